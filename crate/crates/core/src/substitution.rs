//! Representative substitution (RS), single-unit ablation and the per-layer
//! analyses that combine them with class selectivity.
//!
//! The RS of a unit is the fraction of units in its layer whose pooled
//! activation strictly exceeds its own on the unit's generated image. The
//! denominator counts the target itself, so a layer of `n` units yields
//! values `k/n` with `0 <= k <= n-1`.

use rayon::prelude::*;

use crate::autograd::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Network, UnitRef};
use crate::selectivity::{as_batch, class_conditional_means};
use crate::stats::spearman;
use crate::tensor::Tensor;
use crate::train::evaluate;
use crate::viz::{generate, GeneratedImage, Objective, VizConfig};

/// Above this many cached floats, ablation re-runs the full network instead
/// of replaying the layer tail from cached activations.
const ABLATION_CACHE_LIMIT: usize = 1 << 28;
const TAIL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RsScore {
    pub unit: UnitRef,
    pub objective: Objective,
    /// Units in the layer strictly more active than the target.
    pub count: usize,
    /// Units in the layer, target included.
    pub units: usize,
}

impl RsScore {
    pub fn value(&self) -> f64 {
        self.count as f64 / self.units as f64
    }
}

/// Number of entries strictly greater than `acts[target]`.
pub fn rs_count(acts: &[f32], target: usize) -> usize {
    let x = acts[target];
    acts.iter().filter(|&&v| v > x).count()
}

/// RS of `unit` on an image generated for a unit of the same layer.
pub fn representative_substitution(
    net: &Network,
    unit: UnitRef,
    img: &GeneratedImage,
) -> Result<RsScore> {
    net.check_unit(unit)?;
    if img.unit.layer != unit.layer {
        return Err(Error::InvalidArgument(format!(
            "image was generated for layer {} but the unit is in layer {}",
            img.unit.layer, unit.layer
        )));
    }
    let acts = layer_activations(net, &img.image, unit.layer)?;
    Ok(RsScore {
        unit,
        objective: img.objective,
        count: rs_count(&acts, unit.unit),
        units: acts.len(),
    })
}

/// Pooled activations of every unit of `layer` for one image.
pub fn layer_activations(net: &Network, image: &Tensor, layer: usize) -> Result<Vec<f32>> {
    let batch = as_batch(net, image)?;
    let mut g = Graph::new();
    let x = g.leaf(batch, false);
    let f = net.forward(&mut g, x, false, Some(layer))?;
    let pooled = g.unit_pool(f.output)?;
    Ok(g.value(pooled).data().to_vec())
}

/// Per-unit record behind the selectivity/RS scatter plots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitReport {
    pub unit: UnitRef,
    pub selectivity: f32,
    pub rs_am: f32,
    pub rs_iam: f32,
    /// Accuracy of the network minus accuracy with the unit ablated.
    pub ablation_delta: f32,
}

/// A unit report together with the images it was computed from.
#[derive(Debug, Clone)]
pub struct UnitAnalysis {
    pub report: UnitReport,
    pub am: GeneratedImage,
    /// Absent for single-unit layers, where IAM is undefined.
    pub iam: Option<GeneratedImage>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCorrelation {
    pub layer: usize,
    /// Spearman correlation of selectivity and IAM RS; `None` when undefined
    /// (a constant vector or a single unit).
    pub rho: Option<f64>,
    pub unit_count: usize,
}

/// Base seed of a unit's image generation; AM and IAM share it.
pub fn unit_seed(base: u64, unit: UnitRef) -> u64 {
    let key = ((unit.layer as u64) << 32) | unit.unit as u64;
    base ^ key.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `evaluate(net) - evaluate(ablate_unit(net, unit))`, in `[-1, 1]`.
pub fn ablation_delta(net: &Network, data: &Dataset, unit: UnitRef) -> Result<f64> {
    Ok(evaluate(net, data)? - evaluate(&net.ablate_unit(unit)?, data)?)
}

/// Accuracy drops from ablating single units of one layer. Unless the
/// layer output is too large, it is cached once so each probe only replays
/// the layers after it.
pub struct AblationProbe<'a> {
    net: &'a Network,
    data: &'a Dataset,
    baseline: f64,
    layer: usize,
    // post-ReLU output of `layer` for every sample, when small enough
    cache: Option<Tensor>,
}

impl<'a> AblationProbe<'a> {
    pub fn new(net: &'a Network, data: &'a Dataset, layer: usize) -> Result<Self> {
        if layer >= net.analyzable_count() {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range"
            )));
        }
        let baseline = evaluate(net, data)?;
        let raw = net.analyzable_layer(layer).expect("in range");
        let per_sample: usize = net.layer_input_shapes()[raw + 1].iter().product();
        let cache =
            if per_sample * data.len() <= ABLATION_CACHE_LIMIT && net.ablated_units().is_empty() {
                Some(layer_outputs(net, data.images(), layer)?)
            } else {
                None
            };
        Ok(AblationProbe {
            net,
            data,
            baseline,
            layer,
            cache,
        })
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    /// `evaluate(net) - evaluate(ablate_unit(net, unit))`.
    pub fn delta(&self, unit: usize) -> Result<f64> {
        let target = UnitRef::new(self.layer, unit);
        self.net.check_unit(target)?;
        let Some(cache) = &self.cache else {
            return Ok(self.baseline - evaluate(&self.net.ablate_unit(target)?, self.data)?);
        };
        let n = self.data.len();
        let per_sample = cache.len() / n;
        let units = cache.shape()[1];
        let inner = per_sample / units;
        let mut correct = 0usize;
        for start in (0..n).step_by(TAIL_CHUNK) {
            let idx: Vec<usize> = (start..(start + TAIL_CHUNK).min(n)).collect();
            let mut chunk = cache.gather(&idx);
            for sample in chunk.data_mut().chunks_exact_mut(per_sample) {
                sample[unit * inner..(unit + 1) * inner].fill(0.0);
            }
            let mut g = Graph::new();
            let x = g.leaf(chunk, false);
            let f = self.net.forward_tail(&mut g, x, self.layer)?;
            let logits = g.value(f.output);
            let classes = logits.shape()[1];
            correct += logits
                .data()
                .chunks_exact(classes)
                .zip(&idx)
                .filter(|(row, &i)| {
                    let pred = row
                        .iter()
                        .enumerate()
                        .fold(0, |b, (c, &v)| if v > row[b] { c } else { b });
                    pred == self.data.labels()[i]
                })
                .count();
        }
        Ok(self.baseline - correct as f64 / n as f64)
    }
}

/// Post-ReLU output of analyzable layer `layer` for every image.
fn layer_outputs(net: &Network, images: &Tensor, layer: usize) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for start in (0..n).step_by(TAIL_CHUNK) {
        let idx: Vec<usize> = (start..(start + TAIL_CHUNK).min(n)).collect();
        let mut g = Graph::new();
        let x = g.leaf(images.gather(&idx), false);
        let f = net.forward(&mut g, x, false, Some(layer))?;
        let v = g.value(f.output);
        shape = v.shape().to_vec();
        data.extend_from_slice(v.data());
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

/// Selectivity, AM/IAM RS and ablation delta for every unit of `layer`,
/// with the generated images. Units are processed in parallel on the current
/// rayon pool; results are in unit order and do not depend on scheduling.
pub fn layer_analysis(
    net: &Network,
    data: &Dataset,
    layer: usize,
    cfg: &VizConfig,
) -> Result<Vec<UnitAnalysis>> {
    cfg.validate()?;
    let n = net
        .unit_count(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range")))?;
    let selectivities = class_conditional_means(net, data, layer)?.selectivities()?;
    let probe = AblationProbe::new(net, data, layer)?;
    (0..n)
        .into_par_iter()
        .map(|u| {
            let unit = UnitRef::new(layer, u);
            let seed = unit_seed(cfg.init_seed, unit);
            let am_cfg = VizConfig {
                objective: Objective::Am,
                init_seed: seed,
                ..*cfg
            };
            let am = generate(net, unit, &am_cfg)?;
            let rs_am = representative_substitution(net, unit, &am)?;
            let (iam, rs_iam) = if n > 1 {
                let iam_cfg = VizConfig {
                    objective: Objective::Iam,
                    ..am_cfg
                };
                let iam = generate(net, unit, &iam_cfg)?;
                let rs = representative_substitution(net, unit, &iam)?.value();
                (Some(iam), rs)
            } else {
                (None, 0.0)
            };
            let report = UnitReport {
                unit,
                selectivity: selectivities[u] as f32,
                rs_am: rs_am.value() as f32,
                rs_iam: rs_iam as f32,
                ablation_delta: probe.delta(u)? as f32,
            };
            Ok(UnitAnalysis { report, am, iam })
        })
        .collect()
}

/// Unit reports for every unit of `layer`.
pub fn layer_profile(
    net: &Network,
    data: &Dataset,
    layer: usize,
    cfg: &VizConfig,
) -> Result<Vec<UnitReport>> {
    Ok(layer_analysis(net, data, layer, cfg)?
        .into_iter()
        .map(|a| a.report)
        .collect())
}

/// Spearman correlation of selectivity and IAM RS for each layer present in
/// `reports`, in layer order.
pub fn correlate(reports: &[UnitReport]) -> Vec<LayerCorrelation> {
    let mut layers: Vec<usize> = reports.iter().map(|r| r.unit.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    layers
        .into_iter()
        .map(|layer| {
            let rows: Vec<&UnitReport> = reports.iter().filter(|r| r.unit.layer == layer).collect();
            let sel: Vec<f64> = rows.iter().map(|r| r.selectivity as f64).collect();
            let rs: Vec<f64> = rows.iter().map(|r| r.rs_iam as f64).collect();
            LayerCorrelation {
                layer,
                rho: spearman(&sel, &rs).ok(),
                unit_count: rows.len(),
            }
        })
        .collect()
}

/// Full analysis of the selected layers (all analyzable layers when `None`).
pub fn analyze(
    net: &Network,
    data: &Dataset,
    layers: Option<&[usize]>,
    cfg: &VizConfig,
) -> Result<(Vec<UnitAnalysis>, Vec<LayerCorrelation>)> {
    let all: Vec<usize> = (0..net.analyzable_count()).collect();
    let layers = layers.unwrap_or(&all);
    let mut units = Vec::new();
    for &l in layers {
        units.extend(layer_analysis(net, data, l, cfg)?);
    }
    let reports: Vec<UnitReport> = units.iter().map(|a| a.report).collect();
    let correlations = correlate(&reports);
    Ok((units, correlations))
}

/// Per-layer Spearman correlation of selectivity and IAM RS over every
/// analyzable layer.
pub fn layerwise_correlation(
    net: &Network,
    data: &Dataset,
    cfg: &VizConfig,
) -> Result<Vec<LayerCorrelation>> {
    if net.analyzable_count() < 2 {
        return Err(Error::InvalidArgument(format!(
            "layer-wise correlation needs at least 2 analyzable layers, network has {}",
            net.analyzable_count()
        )));
    }
    Ok(analyze(net, data, None, cfg)?.1)
}
