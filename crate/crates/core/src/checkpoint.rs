//! `URS1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "URS1"            4 bytes magic
//! version           u16 (= 1)
//! layer count       u16
//! per layer         u8 type tag (0 conv, 1 dense, 2 relu, 3 pool, 4 flatten)
//!                   u8 rank, u32 dims[rank]
//! parameter blobs   f32, for each conv/dense layer in order: weight, bias
//! ```
//!
//! Dims are the kernel shape `[K,C,3,3]` for conv, the weight shape `[I,O]`
//! for dense, `[2]` (window) for pooling, the per-sample input shape for
//! flatten and nothing for ReLU. The network input shape is recovered from
//! the flatten entry.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::model::{Layer, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"URS1";
pub const VERSION: u16 = 1;

const TAG_CONV: u8 = 0;
const TAG_DENSE: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_POOL: u8 = 3;
const TAG_FLATTEN: u8 = 4;

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    if !net.ablated_units().is_empty() {
        return Err(Error::Checkpoint(
            "ablated networks are views and cannot be saved".into(),
        ));
    }
    let layers = net.layers();
    let count = u16::try_from(layers.len())
        .map_err(|_| Error::Checkpoint(format!("{} layers exceed u16", layers.len())))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    let input_shapes = net.layer_input_shapes();
    for (layer, input) in layers.iter().zip(&input_shapes) {
        let (tag, dims): (u8, &[usize]) = match layer {
            Layer::Conv2d { kernels, .. } => (TAG_CONV, kernels.shape()),
            Layer::Dense { weight, .. } => (TAG_DENSE, weight.shape()),
            Layer::Relu => (TAG_RELU, &[]),
            Layer::MaxPool2 => (TAG_POOL, &[2]),
            Layer::Flatten => (TAG_FLATTEN, input),
        };
        out.push(tag);
        out.push(dims.len() as u8);
        for &d in dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    for p in net.parameters() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: {what} at byte {} needs {n} bytes, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

enum Spec {
    Conv(Vec<usize>),
    Dense(Vec<usize>),
    Relu,
    Pool,
    Flatten(Vec<usize>),
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    r.pos = 4;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, expected {VERSION}"
        )));
    }
    let count = r.u16("layer count")? as usize;
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let tag = r.u8("layer tag")?;
        let rank = r.u8("layer rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("layer dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims.contains(&0) {
            return Err(Error::Checkpoint(format!("layer {i}: zero dimension")));
        }
        let spec = match (tag, rank) {
            (TAG_CONV, 4) if dims[2..] == [3, 3] => Spec::Conv(dims),
            (TAG_DENSE, 2) => Spec::Dense(dims),
            (TAG_RELU, 0) => Spec::Relu,
            (TAG_POOL, 1) if dims[0] == 2 => Spec::Pool,
            (TAG_FLATTEN, r) if r > 0 => Spec::Flatten(dims),
            (TAG_CONV..=TAG_FLATTEN, _) => {
                return Err(Error::Checkpoint(format!(
                    "layer {i}: invalid dims {dims:?} for tag {tag}"
                )))
            }
            _ => return Err(Error::Checkpoint(format!("layer {i}: unknown tag {tag}"))),
        };
        specs.push(spec);
    }
    let input_shape = infer_input_shape(&specs)?;
    let mut layers = Vec::with_capacity(count);
    for spec in &specs {
        layers.push(match spec {
            Spec::Conv(dims) => Layer::Conv2d {
                kernels: r.tensor(dims, "conv kernels")?,
                bias: r.tensor(&dims[..1], "conv bias")?,
            },
            Spec::Dense(dims) => Layer::Dense {
                weight: r.tensor(dims, "dense weight")?,
                bias: r.tensor(&dims[1..], "dense bias")?,
            },
            Spec::Relu => Layer::Relu,
            Spec::Pool => Layer::MaxPool2,
            Spec::Flatten(_) => Layer::Flatten,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.pos
        )));
    }
    let net = Network::new(input_shape, layers).map_err(|e| Error::Checkpoint(e.to_string()))?;
    // the flatten dims must agree with the rebuilt network
    for (spec, shape) in specs.iter().zip(net.layer_input_shapes()) {
        if let Spec::Flatten(dims) = spec {
            if *dims != shape {
                return Err(Error::Checkpoint(format!(
                    "flatten dims {dims:?} disagree with inferred shape {shape:?}"
                )));
            }
        }
    }
    Ok(net)
}

/// Walks back from the first flatten to the network input.
fn infer_input_shape(specs: &[Spec]) -> Result<Vec<usize>> {
    let Some(flat) = specs.iter().position(|s| matches!(s, Spec::Flatten(_))) else {
        return match specs.first() {
            Some(Spec::Dense(dims)) => Ok(vec![dims[0]]),
            _ => Err(Error::Checkpoint(
                "cannot infer input shape without a flatten layer".into(),
            )),
        };
    };
    let Spec::Flatten(dims) = &specs[flat] else {
        unreachable!()
    };
    let mut shape = dims.clone();
    for spec in specs[..flat].iter().rev() {
        match spec {
            Spec::Conv(k) => {
                if shape.len() != 3 || shape[0] != k[0] {
                    return Err(Error::Checkpoint(format!(
                        "conv with kernels {k:?} cannot produce {shape:?}"
                    )));
                }
                shape[0] = k[1];
            }
            Spec::Pool => {
                if shape.len() != 3 {
                    return Err(Error::Checkpoint(format!("pool cannot produce {shape:?}")));
                }
                shape[1] *= 2;
                shape[2] *= 2;
            }
            Spec::Relu => {}
            Spec::Dense(w) => {
                if shape != [w[1]] {
                    return Err(Error::Checkpoint(format!(
                        "dense with weight {w:?} cannot produce {shape:?}"
                    )));
                }
                shape = vec![w[0]];
            }
            Spec::Flatten(_) => unreachable!("first flatten"),
        }
    }
    Ok(shape)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(net)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
