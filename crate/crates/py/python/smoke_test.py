"""Smoke test for the repsub_py extension.

Build and run from the repository root:

    cargo build -p repsub-py --features extension-module
    python3 crates/py/python/smoke_test.py
"""

import math
import os
import shutil
import sys
import tempfile


def import_extension():
    try:
        import repsub_py
        return repsub_py
    except ImportError:
        pass
    here = os.path.dirname(os.path.abspath(__file__))
    root = os.path.abspath(os.path.join(here, "..", "..", ".."))
    for profile in ("debug", "release"):
        lib = os.path.join(root, "target", profile, "librepsub_py.so")
        if os.path.exists(lib):
            tmp = tempfile.mkdtemp()
            shutil.copy(lib, os.path.join(tmp, "repsub_py.so"))
            sys.path.insert(0, tmp)
            import repsub_py
            return repsub_py
    sys.exit("repsub_py not built; run `cargo build -p repsub-py --features extension-module`")


def main():
    rp = import_extension()

    assert rp.spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert rp.rs_count([0.5, 0.9, 0.2, 0.7], 0) == 2
    assert abs(rp.selectivity([2.0, 1.0, 1.0]) - 1 / 3) < 1e-12
    try:
        rp.spearman([1, 1, 1], [1, 2, 3])
        raise AssertionError("constant vector accepted")
    except ValueError as e:
        assert "undefined correlation" in str(e)

    train = rp.Dataset.synth(7, classes=3, per_class=20, size=8)
    test = rp.Dataset.synth(8, classes=3, per_class=5, size=8, split="test")
    assert len(train) == 60 and train.sample_shape == [3, 8, 8]

    net = rp.Network.build("cnn-desk", [3, 8, 8], 3, seed=1)
    history = rp.train(net, train, epochs=3)
    assert len(history) == 3 and all(math.isfinite(loss) for _, loss, _ in history)
    acc = rp.evaluate(net, test)
    assert 0.0 <= acc <= 1.0

    img = rp.generate(net, 0, 1, objective="iam", steps=16)
    assert img["trace"][img["best_iter"]] >= img["trace"][0]
    assert all(0.0 <= p <= 1.0 for p in img["image"])

    rows = rp.layer_profile(net, test, 1, steps=8)
    assert len(rows) == net.unit_counts()[1]
    for r in rows:
        assert 0.0 <= r["selectivity"] <= 1.0
        assert 0.0 <= r["rs_iam"] < 1.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.urs")
        net.save(path)
        again = rp.Network.load(path)
        assert again.predict(test.image(0)) == net.predict(test.image(0))

    silent = net.ablate(0, 2)
    assert silent.unit_activation(test.image(1), 0, 2) == 0.0

    print(f"repsub_py smoke test ok: {net!r}, held-out accuracy {acc:.3f}")


if __name__ == "__main__":
    main()
