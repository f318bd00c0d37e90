//! Class-conditional unit activations and the class selectivity index.

use crate::autograd::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Network, UnitRef};
use crate::tensor::Tensor;

/// Mean pooled post-ReLU activation of every unit of one layer, per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassConditionalActivations {
    pub layer: usize,
    pub units: usize,
    pub classes: usize,
    /// Row-major `[units x classes]`.
    pub means: Vec<f64>,
    pub sample_counts: Vec<usize>,
}

impl ClassConditionalActivations {
    pub fn row(&self, unit: usize) -> &[f64] {
        &self.means[unit * self.classes..(unit + 1) * self.classes]
    }

    /// Selectivity of every unit in the layer.
    pub fn selectivities(&self) -> Result<Vec<f64>> {
        (0..self.units).map(|u| selectivity(self.row(u))).collect()
    }
}

/// Scalar activation of one unit for a single image `[C,H,W]` or `[1,C,H,W]`:
/// the post-ReLU output of a dense unit, or the spatial mean of a conv
/// kernel's post-ReLU map.
pub fn unit_activation(net: &Network, image: &Tensor, unit: UnitRef) -> Result<f32> {
    net.check_unit(unit)?;
    let batch = as_batch(net, image)?;
    let mut g = Graph::new();
    let x = g.leaf(batch, false);
    let f = net.forward(&mut g, x, false, Some(unit.layer))?;
    let pooled = g.unit_pool(f.output)?;
    Ok(g.value(pooled).data()[unit.unit])
}

/// Reshapes a single image to a batch of one, checking the input shape.
pub(crate) fn as_batch(net: &Network, image: &Tensor) -> Result<Tensor> {
    let shape = image.shape();
    let per_sample = if shape.len() == net.input_shape().len() + 1 && shape[0] == 1 {
        &shape[1..]
    } else {
        shape
    };
    if per_sample != net.input_shape() {
        return Err(Error::Shape(format!(
            "image {:?} does not match network input {:?}",
            shape,
            net.input_shape()
        )));
    }
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(per_sample);
    image.clone().reshape(batch_shape)
}

/// Class-conditional means for every analyzable layer from one pass over
/// `data`, accumulated in 64-bit.
pub fn class_conditional_means_all(
    net: &Network,
    data: &Dataset,
) -> Result<Vec<ClassConditionalActivations>> {
    let counts = data.class_counts();
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    let classes = data.class_count();
    let acts = net.pooled_activations(data.images(), None)?;
    Ok(acts
        .iter()
        .enumerate()
        .map(|(layer, a)| accumulate(layer, a, data.labels(), classes, &counts))
        .collect())
}

/// Class-conditional means of one analyzable layer.
pub fn class_conditional_means(
    net: &Network,
    data: &Dataset,
    layer: usize,
) -> Result<ClassConditionalActivations> {
    let counts = data.class_counts();
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    if layer >= net.analyzable_count() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range"
        )));
    }
    let acts = net.pooled_activations(data.images(), Some(layer))?;
    Ok(accumulate(
        layer,
        &acts[layer],
        data.labels(),
        data.class_count(),
        &counts,
    ))
}

fn accumulate(
    layer: usize,
    acts: &Tensor,
    labels: &[usize],
    classes: usize,
    counts: &[usize],
) -> ClassConditionalActivations {
    let units = acts.shape()[1];
    let mut sums = vec![0.0f64; units * classes];
    for (row, &label) in acts.data().chunks_exact(units).zip(labels) {
        for (u, &v) in row.iter().enumerate() {
            sums[u * classes + label] += v as f64;
        }
    }
    for u in 0..units {
        for c in 0..classes {
            sums[u * classes + c] /= counts[c] as f64;
        }
    }
    ClassConditionalActivations {
        layer,
        units,
        classes,
        means: sums,
        sample_counts: counts.to_vec(),
    }
}

/// `(max - mean_rest) / (max + mean_rest)` over a unit's class-conditional
/// means, where `max` is the largest entry (first one on ties) and
/// `mean_rest` the mean of the remaining entries. A dead unit (all zero)
/// scores 0.
pub fn selectivity(row: &[f64]) -> Result<f64> {
    if row.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "selectivity needs at least 2 classes, got {}",
            row.len()
        )));
    }
    if let Some(v) = row.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "class-conditional mean {v} is negative or NaN"
        )));
    }
    let arg = row
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
    let max = row[arg];
    let others = (row.len() - 1) as f64;
    let rest = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &v)| v)
        .sum::<f64>()
        / others;
    // summing gaps keeps equal entries at exactly zero
    let gap = row.iter().map(|&v| max - v).sum::<f64>() / others;
    let denom = max + rest;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((gap / denom).clamp(0.0, 1.0))
}
