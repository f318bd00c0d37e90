//! Layer-sequence networks, architecture presets and forward helpers.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples per chunk for inference-only passes.
const INFERENCE_CHUNK: usize = 64;

/// A unit: a kernel of a convolution layer or a neuron of a hidden dense
/// layer. `layer` indexes the network's analyzable layers, not its raw
/// layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnitRef {
    pub layer: usize,
    pub unit: usize,
}

impl UnitRef {
    pub fn new(layer: usize, unit: usize) -> Self {
        UnitRef { layer, unit }
    }
}

impl fmt::Display for UnitRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}/U{}", self.layer, self.unit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Kernels `[K,C,3,3]`, bias `[K]`.
    Conv2d {
        kernels: Tensor,
        bias: Tensor,
    },
    /// Weight `[I,O]`, bias `[O]`.
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    Relu,
    MaxPool2,
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv",
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "pool",
            Layer::Flatten => "flatten",
        }
    }

    fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv2d { kernels, bias } => Some((kernels, bias)),
            Layer::Dense { weight, bias } => Some((weight, bias)),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv2d { kernels, bias } => Some((kernels, bias)),
            Layer::Dense { weight, bias } => Some((weight, bias)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d { kernels, .. } => {
                if input.len() != 3 || input[0] != kernels.shape()[1] {
                    return Err(Error::Shape(format!(
                        "conv layer with kernels {:?} cannot take input {input:?}",
                        kernels.shape()
                    )));
                }
                if input[1] < 3 || input[2] < 3 {
                    return Err(Error::Shape(format!("conv input {input:?} below 3x3")));
                }
                Ok(vec![kernels.shape()[0], input[1], input[2]])
            }
            Layer::Dense { weight, .. } => {
                if input.len() != 1 || input[0] != weight.shape()[0] {
                    return Err(Error::Shape(format!(
                        "dense layer with weight {:?} cannot take input {input:?}",
                        weight.shape()
                    )));
                }
                Ok(vec![weight.shape()[1]])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2 => {
                if input.len() != 3 || !input[1].is_multiple_of(2) || !input[2].is_multiple_of(2) {
                    return Err(Error::Shape(format!(
                        "2x2 pooling needs [C,H,W] with even H and W, got {input:?}"
                    )));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Ids of the graph nodes created by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// Last node built: the logits, or the activation of the stop layer.
    pub output: NodeId,
    /// Post-ReLU output of every analyzable layer reached.
    pub layer_outputs: Vec<NodeId>,
    /// Leaf ids of the parameters, in [`Network::parameters`] order.
    pub params: Vec<NodeId>,
}

/// An ordered list of layers with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    // raw index of the Conv2d/Dense layer behind each analyzable layer
    analyzable: Vec<usize>,
    ablated: BTreeSet<UnitRef>,
}

impl Network {
    /// Validates that consecutive layer shapes conform for the per-sample
    /// `input_shape`.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {input_shape:?}")));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            if let Some((w, b)) = layer.params() {
                let expected = w.shape()[if matches!(layer, Layer::Conv2d { .. }) {
                    0
                } else {
                    1
                }];
                if b.shape() != [expected] {
                    return Err(Error::Shape(format!(
                        "layer {i}: bias {:?} for parameter {:?}",
                        b.shape(),
                        w.shape()
                    )));
                }
                if matches!(layer, Layer::Conv2d { .. })
                    && (w.rank() != 4 || w.shape()[2..] != [3, 3])
                {
                    return Err(Error::Shape(format!(
                        "layer {i}: kernels must be [K,C,3,3], got {:?}",
                        w.shape()
                    )));
                }
            }
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Shape(format!("layer {i} ({}): {e}", layer.kind())))?;
        }
        let analyzable = layers
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0].params().is_some() && matches!(w[1], Layer::Relu))
            .map(|(i, _)| i)
            .collect();
        Ok(Network {
            input_shape,
            layers,
            analyzable,
            ablated: BTreeSet::new(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layers
            .iter()
            .try_fold(self.input_shape.clone(), |s, l| l.output_shape(&s))
            .expect("validated at construction")
    }

    pub fn class_count(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Per-sample input shape of each raw layer.
    pub fn layer_input_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut s = self.input_shape.clone();
        for l in &self.layers {
            let next = l.output_shape(&s).expect("validated at construction");
            shapes.push(std::mem::replace(&mut s, next));
        }
        shapes
    }

    pub fn analyzable_count(&self) -> usize {
        self.analyzable.len()
    }

    /// Raw layer index of analyzable layer `layer`.
    pub fn analyzable_layer(&self, layer: usize) -> Option<usize> {
        self.analyzable.get(layer).copied()
    }

    pub fn is_conv_layer(&self, layer: usize) -> bool {
        self.analyzable
            .get(layer)
            .is_some_and(|&i| matches!(self.layers[i], Layer::Conv2d { .. }))
    }

    /// Kernel count for a conv layer, output width for a dense layer.
    pub fn unit_count(&self, layer: usize) -> Option<usize> {
        self.analyzable.get(layer).map(|&i| match &self.layers[i] {
            Layer::Conv2d { kernels, .. } => kernels.shape()[0],
            Layer::Dense { weight, .. } => weight.shape()[1],
            _ => unreachable!("analyzable layers carry parameters"),
        })
    }

    pub fn unit_counts(&self) -> Vec<usize> {
        (0..self.analyzable.len())
            .map(|l| self.unit_count(l).expect("in range"))
            .collect()
    }

    pub fn check_unit(&self, unit: UnitRef) -> Result<()> {
        match self.unit_count(unit.layer) {
            None => Err(Error::InvalidArgument(format!(
                "layer {} out of range ({} analyzable layers)",
                unit.layer,
                self.analyzable.len()
            ))),
            Some(n) if unit.unit >= n => Err(Error::InvalidArgument(format!(
                "unit {} out of range (layer {} has {n} units)",
                unit.unit, unit.layer
            ))),
            Some(_) => Ok(()),
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(Layer::params_mut)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    pub fn ablated_units(&self) -> &BTreeSet<UnitRef> {
        &self.ablated
    }

    /// Copy of the network whose `unit` outputs 0 after its ReLU, at every
    /// spatial position.
    pub fn ablate_unit(&self, unit: UnitRef) -> Result<Network> {
        self.check_unit(unit)?;
        let mut net = self.clone();
        net.ablated.insert(unit);
        Ok(net)
    }

    /// Records the forward pass of a `[B, ..input_shape]` batch. With
    /// `stop_after = Some(l)` the pass ends after analyzable layer `l`.
    pub fn forward<'a>(
        &'a self,
        graph: &mut Graph<'a>,
        input: NodeId,
        params_grad: bool,
        stop_after: Option<usize>,
    ) -> Result<Forward> {
        let x = graph.value(input);
        if x.shape().get(1..) != Some(&self.input_shape[..]) {
            return Err(Error::Shape(format!(
                "network expects [B, {}], got {:?}",
                self.input_shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", "),
                x.shape()
            )));
        }
        self.run(graph, input, 0, params_grad, stop_after)
    }

    /// Continues a pass from the (masked) output of analyzable layer
    /// `after`, through the remaining layers to the logits.
    pub fn forward_tail<'a>(
        &'a self,
        graph: &mut Graph<'a>,
        activations: NodeId,
        after: usize,
    ) -> Result<Forward> {
        let raw = self
            .analyzable
            .get(after)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {after} out of range")))?;
        // analyzable layer, its ReLU, then the rest
        self.run(graph, activations, raw + 2, false, None)
    }

    fn run<'a>(
        &'a self,
        graph: &mut Graph<'a>,
        input: NodeId,
        start: usize,
        params_grad: bool,
        stop_after: Option<usize>,
    ) -> Result<Forward> {
        if let Some(l) = stop_after {
            if l >= self.analyzable.len() {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} out of range ({} analyzable layers)",
                    self.analyzable.len()
                )));
            }
        }
        let mut params = Vec::new();
        let mut layer_outputs = Vec::new();
        let mut cur = input;
        let mut pending: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            cur = match layer {
                Layer::Conv2d { kernels, bias } => {
                    let k = graph.param(kernels, params_grad);
                    let b = graph.param(bias, params_grad);
                    params.extend([k, b]);
                    graph.conv2d(cur, k, b)?
                }
                Layer::Dense { weight, bias } => {
                    let w = graph.param(weight, params_grad);
                    let b = graph.param(bias, params_grad);
                    params.extend([w, b]);
                    graph.dense(cur, w, b)?
                }
                Layer::Relu => graph.relu(cur),
                Layer::MaxPool2 => graph.max_pool2(cur)?,
                Layer::Flatten => graph.flatten(cur),
            };
            if let Some(l) = self.analyzable.iter().position(|&a| a == i) {
                pending = Some(l);
                continue;
            }
            if let Some(l) = pending.take() {
                let keep = self.keep_mask(l);
                if keep.contains(&0.0) {
                    cur = graph.channel_mask(cur, keep)?;
                }
                layer_outputs.push(cur);
                if stop_after == Some(l) {
                    break;
                }
            }
        }
        Ok(Forward {
            output: cur,
            layer_outputs,
            params,
        })
    }

    fn keep_mask(&self, layer: usize) -> Vec<f32> {
        let n = self.unit_count(layer).expect("in range");
        let mut keep = vec![1.0; n];
        for u in self
            .ablated
            .range(UnitRef::new(layer, 0)..UnitRef::new(layer + 1, 0))
        {
            keep[u.unit] = 0.0;
        }
        keep
    }

    /// Logits `[N, classes]` for a batch of images.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        let classes = self.class_count();
        let mut out = Vec::with_capacity(n * classes);
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
            let mut g = Graph::new();
            let x = g.leaf(images.gather(&idx), false);
            let f = self.forward(&mut g, x, false, None)?;
            out.extend_from_slice(g.value(f.output).data());
        }
        Tensor::new(vec![n, classes], out)
    }

    /// Argmax class per image; ties go to the lower class index.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        let classes = logits.shape()[1];
        Ok(logits
            .data()
            .chunks_exact(classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(0, |best, (c, &v)| if v > row[best] { c } else { best })
            })
            .collect())
    }

    /// Pooled post-ReLU unit activations `[N, units]` of every analyzable
    /// layer up to and including `upto` (all layers when `None`).
    pub fn pooled_activations(&self, images: &Tensor, upto: Option<usize>) -> Result<Vec<Tensor>> {
        let n = images.shape()[0];
        let last = upto.unwrap_or(self.analyzable.len().saturating_sub(1));
        let counts = self.unit_counts();
        let mut acc: Vec<Vec<f32>> = (0..=last)
            .map(|l| Vec::with_capacity(n * counts[l]))
            .collect();
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
            let mut g = Graph::new();
            let x = g.leaf(images.gather(&idx), false);
            let f = self.forward(&mut g, x, false, Some(last))?;
            for (l, &node) in f.layer_outputs.iter().enumerate() {
                let pooled = g.unit_pool(node)?;
                acc[l].extend_from_slice(g.value(pooled).data());
            }
        }
        acc.into_iter()
            .enumerate()
            .map(|(l, data)| Tensor::new(vec![n, counts[l]], data))
            .collect()
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn conv_layer(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Conv2d {
        kernels: he_normal(&[out_ch, in_ch, 3, 3], in_ch * 9, rng),
        bias: Tensor::zeros(&[out_ch]),
    }
}

fn dense_layer(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Dense {
        weight: he_normal(&[inputs, outputs], inputs, rng),
        bias: Tensor::zeros(&[outputs]),
    }
}

/// Conv(3x3, stride 1, pad 1)+ReLU per entry of `channels`, 2x2 max-pool
/// after every second conv, then flatten, dense(`dense_width`)+ReLU and a
/// dense classifier. Weights are He-normal from `seed`, biases zero.
pub fn build_shallow_cnn(
    input_shape: &[usize],
    channels: &[usize],
    dense_width: usize,
    classes: usize,
    seed: u64,
) -> Result<Network> {
    if channels.is_empty() || channels.contains(&0) || dense_width == 0 || classes == 0 {
        return Err(Error::InvalidArgument(
            "cnn needs nonempty positive channel list, dense width and classes".into(),
        ));
    }
    if input_shape.len() != 3 {
        return Err(Error::Shape(format!(
            "cnn input must be [C,H,W], got {input_shape:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut in_ch = input_shape[0];
    let (mut h, mut w) = (input_shape[1], input_shape[2]);
    for (i, &c) in channels.iter().enumerate() {
        layers.push(conv_layer(in_ch, c, &mut rng));
        layers.push(Layer::Relu);
        if i % 2 == 1 {
            layers.push(Layer::MaxPool2);
            h /= 2;
            w /= 2;
        }
        in_ch = c;
    }
    layers.push(Layer::Flatten);
    layers.push(dense_layer(in_ch * h * w, dense_width, &mut rng));
    layers.push(Layer::Relu);
    layers.push(dense_layer(dense_width, classes, &mut rng));
    Network::new(input_shape.to_vec(), layers)
}

/// Flatten, dense+ReLU per entry of `widths`, dense classifier.
pub fn build_mlp(
    input_shape: &[usize],
    widths: &[usize],
    classes: usize,
    seed: u64,
) -> Result<Network> {
    if widths.is_empty() || widths.contains(&0) || classes == 0 {
        return Err(Error::InvalidArgument(
            "mlp needs a nonempty list of positive widths and classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = vec![Layer::Flatten];
    let mut inputs: usize = input_shape.iter().product();
    for &w in widths {
        layers.push(dense_layer(inputs, w, &mut rng));
        layers.push(Layer::Relu);
        inputs = w;
    }
    layers.push(dense_layer(inputs, classes, &mut rng));
    Network::new(input_shape.to_vec(), layers)
}

/// Architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    CnnDesk,
    CnnPaper,
    MlpDesk,
    MlpPaper,
}

impl Arch {
    pub const CNN_PAPER_CHANNELS: [usize; 4] = [64, 64, 128, 128];
    pub const CNN_DESK_CHANNELS: [usize; 4] = [16, 16, 32, 32];
    pub const MLP_PAPER_WIDTHS: [usize; 4] = [128, 512, 2048, 2048];
    pub const MLP_DESK_WIDTHS: [usize; 4] = [64, 128, 256, 256];
    pub const CNN_DESK_DENSE: usize = 64;
    pub const CNN_PAPER_DENSE: usize = 256;

    pub fn build(self, input_shape: &[usize], classes: usize, seed: u64) -> Result<Network> {
        match self {
            Arch::CnnDesk => build_shallow_cnn(
                input_shape,
                &Self::CNN_DESK_CHANNELS,
                Self::CNN_DESK_DENSE,
                classes,
                seed,
            ),
            Arch::CnnPaper => build_shallow_cnn(
                input_shape,
                &Self::CNN_PAPER_CHANNELS,
                Self::CNN_PAPER_DENSE,
                classes,
                seed,
            ),
            Arch::MlpDesk => build_mlp(input_shape, &Self::MLP_DESK_WIDTHS, classes, seed),
            Arch::MlpPaper => build_mlp(input_shape, &Self::MLP_PAPER_WIDTHS, classes, seed),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::CnnDesk => "cnn-desk",
            Arch::CnnPaper => "cnn-paper",
            Arch::MlpDesk => "mlp-desk",
            Arch::MlpPaper => "mlp-paper",
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-desk" => Ok(Arch::CnnDesk),
            "cnn-paper" => Ok(Arch::CnnPaper),
            "mlp-desk" => Ok(Arch::MlpDesk),
            "mlp-paper" => Ok(Arch::MlpPaper),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_cnn_logit_shape() {
        let net = Arch::CnnDesk.build(&[3, 32, 32], 4, 0).unwrap();
        let x = Tensor::full(&[2, 3, 32, 32], 0.5);
        assert_eq!(net.logits(&x).unwrap().shape(), &[2, 4]);
        assert_eq!(net.analyzable_count(), 5);
        assert_eq!(net.unit_counts(), vec![16, 16, 32, 32, 64]);
    }

    #[test]
    fn full_size_presets_unit_counts() {
        let cnn = Arch::CnnPaper.build(&[3, 32, 32], 10, 0).unwrap();
        assert_eq!(&cnn.unit_counts()[..4], &[64, 64, 128, 128]);
        assert_eq!(cnn.analyzable_count(), 4 + 1);
        let mlp = Arch::MlpPaper.build(&[3, 32, 32], 10, 0).unwrap();
        assert_eq!(mlp.unit_counts(), vec![128, 512, 2048, 2048]);
    }

    #[test]
    fn mlp_desk_forward_is_finite() {
        let net = Arch::MlpDesk.build(&[3, 32, 32], 10, 3).unwrap();
        let x = Tensor::full(&[3, 3, 32, 32], 0.25);
        assert!(net.logits(&x).unwrap().all_finite());
    }

    #[test]
    fn rejects_non_conforming_layers() {
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                weight: Tensor::zeros(&[5, 2]),
                bias: Tensor::zeros(&[2]),
            },
        ];
        assert!(Network::new(vec![2, 2], layers).is_err());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = build_mlp(&[1, 2, 2], &[3], 2, 0).unwrap();
        let err = net.logits(&Tensor::zeros(&[1, 1, 3, 3])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn ablation_leaves_original_untouched() {
        let net = build_mlp(&[1, 1, 4], &[3], 2, 1).unwrap();
        let abl = net.ablate_unit(UnitRef::new(0, 1)).unwrap();
        assert!(net.ablated_units().is_empty());
        let x = Tensor::full(&[1, 1, 1, 4], 0.9);
        let acts = abl.pooled_activations(&x, None).unwrap();
        assert_eq!(acts[0].data()[1], 0.0);
        assert!(net.ablate_unit(UnitRef::new(0, 3)).is_err());
    }
}
