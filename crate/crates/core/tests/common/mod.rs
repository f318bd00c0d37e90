//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use repsub::{Graph, Layer, Network, Tensor};

pub const FD_EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;

/// Cross-entropy of `net` in f64, with parameters taken from `params`
/// (in `Network::parameters` order). Also returns the activation pattern:
/// one entry per ReLU input (positive or not) and per pool window (argmax).
pub fn reference_loss(
    net: &Network,
    params: &[Vec<f64>],
    input: &[f64],
    batch: usize,
    labels: &[usize],
) -> (f64, Vec<u32>) {
    let mut shape: Vec<usize> = net.input_shape().to_vec();
    let mut x = input.to_vec();
    let mut pattern = Vec::new();
    let mut p = 0;
    for layer in net.layers() {
        match layer {
            Layer::Conv2d { kernels, .. } => {
                let (k, c) = (kernels.shape()[0], kernels.shape()[1]);
                let (h, w) = (shape[1], shape[2]);
                let (wt, bias) = (&params[p], &params[p + 1]);
                p += 2;
                let mut out = vec![0.0; batch * k * h * w];
                for b in 0..batch {
                    for o in 0..k {
                        for y in 0..h {
                            for xx in 0..w {
                                let mut acc = bias[o];
                                for ci in 0..c {
                                    for dy in 0..3 {
                                        for dx in 0..3 {
                                            let (sy, sx) = (y + dy, xx + dx);
                                            if sy < 1 || sx < 1 || sy > h || sx > w {
                                                continue;
                                            }
                                            let v = x[((b * c + ci) * h + sy - 1) * w + sx - 1];
                                            acc += wt[((o * c + ci) * 3 + dy) * 3 + dx] * v;
                                        }
                                    }
                                }
                                out[((b * k + o) * h + y) * w + xx] = acc;
                            }
                        }
                    }
                }
                shape = vec![k, h, w];
                x = out;
            }
            Layer::Dense { weight, .. } => {
                let (i, o) = (weight.shape()[0], weight.shape()[1]);
                let (wt, bias) = (&params[p], &params[p + 1]);
                p += 2;
                let mut out = vec![0.0; batch * o];
                for b in 0..batch {
                    for j in 0..o {
                        let mut acc = bias[j];
                        for q in 0..i {
                            acc += x[b * i + q] * wt[q * o + j];
                        }
                        out[b * o + j] = acc;
                    }
                }
                shape = vec![o];
                x = out;
            }
            Layer::Relu => {
                for v in &mut x {
                    pattern.push((*v > 0.0) as u32);
                    *v = v.max(0.0);
                }
            }
            Layer::MaxPool2 => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; batch * c * oh * ow];
                for bc in 0..batch * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for (n, (dy, dx)) in
                                [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate()
                            {
                                let v = x[(bc * h + 2 * y + dy) * w + 2 * xx + dx];
                                if v > best.0 {
                                    best = (v, n);
                                }
                            }
                            pattern.push(best.1 as u32);
                            out[(bc * oh + y) * ow + xx] = best.0;
                        }
                    }
                }
                shape = vec![c, oh, ow];
                x = out;
            }
            Layer::Flatten => shape = vec![shape.iter().product()],
        }
    }
    let classes = shape[0];
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &x[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    (total / batch as f64, pattern)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, scale).unwrap();
    let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(shape, data).unwrap()
}

fn dense(rng: &mut ChaCha8Rng, i: usize, o: usize) -> Layer {
    Layer::Dense {
        weight: random_tensor(rng, vec![i, o], 1.0 / (i as f64).sqrt()),
        bias: random_tensor(rng, vec![o], 0.1),
    }
}

/// A small random MLP (1 to 3 dense layers) or CNN (1 or 2 convolutions)
/// with random biases.
pub fn random_network(rng: &mut ChaCha8Rng, cnn: bool) -> Network {
    let classes = rng.random_range(2..=4);
    let mut layers = Vec::new();
    let input_shape;
    if cnn {
        let c = rng.random_range(1..=2);
        let side = [4, 6][rng.random_range(0..2)];
        input_shape = vec![c, side, side];
        let convs = rng.random_range(1..=2);
        let (mut ch, mut h) = (c, side);
        for n in 0..convs {
            let k = rng.random_range(1..=3);
            layers.push(Layer::Conv2d {
                kernels: random_tensor(rng, vec![k, ch, 3, 3], 1.0 / (9.0 * ch as f64).sqrt()),
                bias: random_tensor(rng, vec![k], 0.1),
            });
            layers.push(Layer::Relu);
            ch = k;
            let room = n + 1 == convs || h / 2 >= 3;
            if h % 2 == 0 && room && rng.random_bool(0.5) {
                layers.push(Layer::MaxPool2);
                h /= 2;
            }
        }
        layers.push(Layer::Flatten);
        let mut width = ch * h * h;
        if rng.random_bool(0.5) {
            let hidden = rng.random_range(2..=5);
            layers.push(dense(rng, width, hidden));
            layers.push(Layer::Relu);
            width = hidden;
        }
        layers.push(dense(rng, width, classes));
    } else {
        input_shape = vec![rng.random_range(1..=2), 2, rng.random_range(2..=3)];
        layers.push(Layer::Flatten);
        let mut width: usize = input_shape.iter().product();
        for _ in 0..rng.random_range(0..=2) {
            let hidden = rng.random_range(2..=6);
            layers.push(dense(rng, width, hidden));
            layers.push(Layer::Relu);
            width = hidden;
        }
        layers.push(dense(rng, width, classes));
    }
    Network::new(input_shape, layers).unwrap()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub compared: usize,
    /// Components skipped because a perturbation crossed a ReLU or pool kink.
    pub skipped: usize,
    pub failures: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        self.compared += 1;
        if abs > ABS_FLOOR && rel >= REL_TOL {
            self.failures += 1;
        }
        if abs > ABS_FLOOR {
            self.max_rel = self.max_rel.max(rel);
        }
        self.max_abs = self.max_abs.max(abs);
    }

    pub fn merge(&mut self, o: GradCheck) {
        self.compared += o.compared;
        self.skipped += o.skipped;
        self.failures += o.failures;
        self.max_rel = self.max_rel.max(o.max_rel);
        self.max_abs = self.max_abs.max(o.max_abs);
    }
}

/// Compares autograd gradients of the batch cross-entropy (for every
/// parameter and every input pixel) with central differences of the f64
/// reference loss.
pub fn check_network_gradients(net: &Network, rng: &mut ChaCha8Rng) -> GradCheck {
    let batch = 2;
    let sample: usize = net.input_shape().iter().product();
    let input: Vec<f32> = (0..batch * sample).map(|_| rng.random::<f32>()).collect();
    let labels: Vec<usize> = (0..batch)
        .map(|_| rng.random_range(0..net.class_count()))
        .collect();

    let mut shape = vec![batch];
    shape.extend_from_slice(net.input_shape());
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(shape, input.clone()).unwrap(), true);
    let f = net.forward(&mut g, x, true, None).unwrap();
    let loss = g.softmax_xent(f.output, &labels).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut params: Vec<Vec<f64>> = net
        .parameters()
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let mut x64: Vec<f64> = input.iter().map(|&v| v as f64).collect();
    let (_, base) = reference_loss(net, &params, &x64, batch, &labels);

    let mut check = GradCheck::default();
    for (j, id) in f.params.iter().enumerate() {
        let analytic = grads.get(*id).unwrap().to_vec();
        for i in 0..params[j].len() {
            let orig = params[j][i];
            params[j][i] = orig + FD_EPS;
            let (lp, pp) = reference_loss(net, &params, &x64, batch, &labels);
            params[j][i] = orig - FD_EPS;
            let (lm, pm) = reference_loss(net, &params, &x64, batch, &labels);
            params[j][i] = orig;
            if pp != base || pm != base {
                check.skipped += 1;
                continue;
            }
            check.record(analytic[i] as f64, (lp - lm) / (2.0 * FD_EPS));
        }
    }
    let analytic = grads.get(x).unwrap().to_vec();
    for i in 0..x64.len() {
        let orig = x64[i];
        x64[i] = orig + FD_EPS;
        let (lp, pp) = reference_loss(net, &params, &x64, batch, &labels);
        x64[i] = orig - FD_EPS;
        let (lm, pm) = reference_loss(net, &params, &x64, batch, &labels);
        x64[i] = orig;
        if pp != base || pm != base {
            check.skipped += 1;
            continue;
        }
        check.record(analytic[i] as f64, (lp - lm) / (2.0 * FD_EPS));
    }
    check
}

/// Runs the gradient check over `count` random networks, alternating MLPs
/// and CNNs.
pub fn gradient_suite(seed: u64, count: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheck::default();
    for i in 0..count {
        let net = random_network(&mut rng, i % 2 == 1);
        total.merge(check_network_gradients(&net, &mut rng));
    }
    total
}

/// Class selectivity written out from its definition.
pub fn brute_selectivity(row: &[f64]) -> f64 {
    let mut arg = 0;
    for i in 1..row.len() {
        if row[i] > row[arg] {
            arg = i;
        }
    }
    let mut others = 0.0;
    for (i, v) in row.iter().enumerate() {
        if i != arg {
            others += v;
        }
    }
    let mu_max = row[arg];
    let mu_rest = others / (row.len() - 1) as f64;
    if mu_max + mu_rest == 0.0 {
        0.0
    } else {
        (mu_max - mu_rest) / (mu_max + mu_rest)
    }
}

pub fn brute_rs_count(acts: &[f32], target: usize) -> usize {
    let mut k = 0;
    for (i, a) in acts.iter().enumerate() {
        if i != target && *a > acts[target] {
            k += 1;
        }
    }
    k
}

/// Spearman's rho from rank-by-counting and a textbook Pearson.
pub fn brute_spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct MetricCheck {
    pub cases: usize,
    pub selectivity_max_err: f64,
    pub rs_mismatches: usize,
    pub spearman_max_err: f64,
    pub spearman_flag_mismatches: usize,
}

/// Compares the library metrics with the brute-force versions on `cases`
/// random inputs each. Values are drawn from small grids so ties occur.
pub fn metric_suite(seed: u64, cases: usize) -> MetricCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MetricCheck {
        cases,
        ..Default::default()
    };
    for _ in 0..cases {
        let k = rng.random_range(2..=10);
        let row: Vec<f64> = (0..k)
            .map(|_| match rng.random_range(0..3) {
                0 => 0.0,
                1 => rng.random_range(0..4) as f64 * 0.25,
                _ => rng.random::<f64>() * 5.0,
            })
            .collect();
        let err = (repsub::selectivity(&row).unwrap() - brute_selectivity(&row)).abs();
        out.selectivity_max_err = out.selectivity_max_err.max(err);

        let n = rng.random_range(1..=40);
        let acts: Vec<f32> = (0..n)
            .map(|_| {
                if rng.random_bool(0.3) {
                    rng.random_range(0..3) as f32
                } else {
                    rng.random::<f32>() * 3.0
                }
            })
            .collect();
        let t = rng.random_range(0..n);
        if repsub::rs_count(&acts, t) != brute_rs_count(&acts, t) {
            out.rs_mismatches += 1;
        }

        let m = rng.random_range(2..=25);
        let xs: Vec<f64> = (0..m).map(|_| rng.random_range(0..6) as f64).collect();
        let ys: Vec<f64> = (0..m)
            .map(|_| {
                if rng.random_bool(0.5) {
                    rng.random_range(0..4) as f64 / 8.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        match (repsub::spearman(&xs, &ys), brute_spearman(&xs, &ys)) {
            (Ok(a), Some(b)) => out.spearman_max_err = out.spearman_max_err.max((a - b).abs()),
            (Err(_), None) => {}
            _ => out.spearman_flag_mismatches += 1,
        }
    }
    out
}
