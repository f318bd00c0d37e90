//! Input-space gradient ascent on a unit's activation (AM) or on its
//! activation minus the mean of the other units in its layer (IAM).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::model::{Network, UnitRef};
use crate::selectivity::as_batch;
use crate::tensor::Tensor;

/// Gradient norms below this skip the update.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Objective {
    /// Maximize the unit's activation.
    Am,
    /// Maximize the unit's activation minus the mean activation of the
    /// other units in the same layer.
    Iam,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Am => "am",
            Objective::Iam => "iam",
        }
    }

    /// Linear weights over the layer's pooled activations.
    fn coefficients(self, units: usize, target: usize) -> Vec<f64> {
        match self {
            Objective::Am => {
                let mut c = vec![0.0; units];
                c[target] = 1.0;
                c
            }
            Objective::Iam => {
                let mut c = vec![-1.0 / (units - 1) as f64; units];
                c[target] = 1.0;
                c
            }
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "am" => Ok(Objective::Am),
            "iam" => Ok(Objective::Iam),
            other => Err(Error::InvalidArgument(format!(
                "unknown objective {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VizConfig {
    pub steps: usize,
    pub step_size: f32,
    pub init_seed: u64,
    /// Initial pixels are uniform in `[init_low, init_high]`.
    pub init_low: f32,
    pub init_high: f32,
    pub objective: Objective,
    /// Independent starts; the one with the best objective is kept.
    pub restarts: usize,
}

impl Default for VizConfig {
    fn default() -> Self {
        VizConfig {
            steps: 256,
            step_size: 0.1,
            init_seed: 42,
            init_low: 0.45,
            init_high: 0.55,
            objective: Objective::Am,
            restarts: 1,
        }
    }
}

impl VizConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_size.is_nan() || self.step_size <= 0.0 || self.step_size.is_infinite() {
            return Err(Error::InvalidArgument(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(0.0..=1.0).contains(&self.init_low)
            || !(0.0..=1.0).contains(&self.init_high)
            || self.init_low > self.init_high
        {
            return Err(Error::InvalidArgument(format!(
                "init range [{}, {}] must lie within [0,1]",
                self.init_low, self.init_high
            )));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub unit: UnitRef,
    pub objective: Objective,
    /// Per-sample input shape, values in `[0,1]`.
    pub image: Tensor,
    /// Objective of every iterate, starting with the initial image.
    pub objective_trace: Vec<f64>,
    /// Index of the returned iterate in `objective_trace`.
    pub best_iter: usize,
}

impl GeneratedImage {
    pub fn best_objective(&self) -> f64 {
        self.objective_trace[self.best_iter]
    }
}

/// Objective computed from a layer's pooled activations.
pub fn objective_from_activations(
    acts: &[f32],
    target: usize,
    objective: Objective,
) -> Result<f64> {
    let n = acts.len();
    if target >= n {
        return Err(Error::InvalidArgument(format!(
            "unit {target} out of range for {n} activations"
        )));
    }
    match objective {
        Objective::Am => Ok(acts[target] as f64),
        Objective::Iam => {
            if n < 2 {
                return Err(Error::InvalidArgument(
                    "IAM is undefined for a layer with a single unit".into(),
                ));
            }
            let others: f64 = acts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != target)
                .map(|(_, &v)| v as f64)
                .sum();
            Ok(acts[target] as f64 - others / (n - 1) as f64)
        }
    }
}

/// AM or IAM objective of `unit` for one image.
pub fn objective_value(
    net: &Network,
    image: &Tensor,
    unit: UnitRef,
    objective: Objective,
) -> Result<f64> {
    net.check_unit(unit)?;
    let batch = as_batch(net, image)?;
    let mut g = Graph::new();
    let x = g.leaf(batch, false);
    let f = net.forward(&mut g, x, false, Some(unit.layer))?;
    let pooled = g.unit_pool(f.output)?;
    objective_from_activations(g.value(pooled).data(), unit.unit, objective)
}

/// Objective value and its gradient with respect to the input image.
pub fn objective_gradient(
    net: &Network,
    image: &Tensor,
    unit: UnitRef,
    objective: Objective,
) -> Result<(f64, Vec<f32>)> {
    net.check_unit(unit)?;
    let batch = as_batch(net, image)?;
    let mut g = Graph::new();
    let x = g.leaf(batch, true);
    let f = net.forward(&mut g, x, false, Some(unit.layer))?;
    let pooled = g.unit_pool(f.output)?;
    let acts = g.value(pooled).data();
    let value = objective_from_activations(acts, unit.unit, objective)?;
    let coeffs = objective.coefficients(acts.len(), unit.unit);
    let loss = g.weighted_sum(pooled, coeffs)?;
    let mut grads = g.backward(loss)?;
    let grad = grads.take(x).unwrap_or_else(|| vec![0.0; image.len()]);
    Ok((value, grad))
}

/// Seed of restart `r`; restart 0 uses the configured seed itself.
fn restart_seed(seed: u64, restart: usize) -> u64 {
    if restart == 0 {
        seed
    } else {
        seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// Seeded initial image in the network's input shape.
pub fn initial_image(net: &Network, cfg: &VizConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = net.input_shape().iter().product();
    let data = (0..n)
        .map(|_| {
            if cfg.init_low == cfg.init_high {
                cfg.init_low
            } else {
                rng.random_range(cfg.init_low..=cfg.init_high)
            }
        })
        .collect();
    Tensor::new(net.input_shape().to_vec(), data).expect("input shape")
}

/// Normalized-gradient ascent with clipping to `[0,1]`:
/// `x <- clip(x + step_size * g / |g|)`. Returns the best iterate, so the
/// returned objective is never below the initial one.
pub fn generate(net: &Network, unit: UnitRef, cfg: &VizConfig) -> Result<GeneratedImage> {
    cfg.validate()?;
    net.check_unit(unit)?;
    if cfg.objective == Objective::Iam && net.unit_count(unit.layer) == Some(1) {
        return Err(Error::InvalidArgument(format!(
            "IAM is undefined for {unit}: its layer has a single unit"
        )));
    }
    let mut best: Option<GeneratedImage> = None;
    for r in 0..cfg.restarts {
        let run = ascend(net, unit, cfg, restart_seed(cfg.init_seed, r))?;
        if best
            .as_ref()
            .is_none_or(|b| run.best_objective() > b.best_objective())
        {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn ascend(net: &Network, unit: UnitRef, cfg: &VizConfig, seed: u64) -> Result<GeneratedImage> {
    let mut image = initial_image(net, cfg, seed);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut best_iter = 0;
    let mut best_image = image.clone();
    for t in 0..=cfg.steps {
        let (value, grad) = objective_gradient(net, &image, unit, cfg.objective)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteObjective { iteration: t });
        }
        trace.push(value);
        if value > trace[best_iter] {
            best_iter = t;
            best_image.data_mut().copy_from_slice(image.data());
        }
        if t == cfg.steps {
            break;
        }
        let norm = grad
            .iter()
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        if norm < MIN_GRAD_NORM {
            continue;
        }
        let scale = (cfg.step_size as f64 / norm) as f32;
        for (p, g) in image.data_mut().iter_mut().zip(&grad) {
            *p = (*p + scale * g).clamp(0.0, 1.0);
        }
    }
    Ok(GeneratedImage {
        unit,
        objective: cfg.objective,
        image: best_image,
        objective_trace: trace,
        best_iter,
    })
}

/// Binary PPM (P6) bytes for a `[C,H,W]` image with 1 or 3 channels.
/// Values are scaled by 255 and rounded half up.
pub fn ppm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    let (channels, height, width) = match *shape {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Shape(format!(
                "PPM output needs a [C,H,W] image, got {shape:?}"
            )))
        }
    };
    if channels != 1 && channels != 3 {
        return Err(Error::Shape(format!(
            "PPM output needs 1 or 3 channels, got {channels}"
        )));
    }
    let plane = height * width;
    let to_byte = |v: f32| ((v.clamp(0.0, 1.0) as f64) * 255.0 + 0.5).floor() as u8;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(plane * 3);
    let px = image.data();
    for i in 0..plane {
        for c in 0..3 {
            let src = if channels == 1 { 0 } else { c };
            out.push(to_byte(px[src * plane + i]));
        }
    }
    Ok(out)
}

pub fn emit_image(img: &GeneratedImage, path: &Path) -> Result<()> {
    write_atomic(path, &ppm_bytes(&img.image)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;

    /// Input `[1,1,2]`, hidden dense layer with the given 2x2 weight
    /// (columns are units), then a classifier.
    fn two_unit_linear(weight: [f32; 4], bias: [f32; 2]) -> Network {
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                weight: Tensor::new(vec![2, 2], weight.to_vec()).unwrap(),
                bias: Tensor::new(vec![2], bias.to_vec()).unwrap(),
            },
            Layer::Relu,
            Layer::Dense {
                weight: Tensor::zeros(&[2, 2]),
                bias: Tensor::zeros(&[2]),
            },
        ];
        Network::new(vec![1, 1, 2], layers).unwrap()
    }

    #[test]
    fn am_and_iam_hand_values() {
        // unit 0 = 3, unit 1 = 1 for image (3, 1)
        let net = two_unit_linear([1.0, 0.0, 0.0, 1.0], [0.0, 0.0]);
        let img = Tensor::new(vec![1, 1, 2], vec![3.0, 1.0]).unwrap();
        let u = UnitRef::new(0, 0);
        assert_eq!(objective_value(&net, &img, u, Objective::Am).unwrap(), 3.0);
        assert_eq!(objective_value(&net, &img, u, Objective::Iam).unwrap(), 2.0);
    }

    #[test]
    fn iam_is_zero_for_equal_activations() {
        let acts = vec![0.3f32; 15];
        for i in 0..15 {
            assert_eq!(
                objective_from_activations(&acts, i, Objective::Iam).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn dead_network_objectives_are_zero() {
        let net = two_unit_linear([0.0; 4], [0.0; 2]);
        let img = Tensor::new(vec![1, 1, 2], vec![0.4, 0.9]).unwrap();
        for obj in [Objective::Am, Objective::Iam] {
            assert_eq!(
                objective_value(&net, &img, UnitRef::new(0, 1), obj).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn iam_rejected_for_single_unit_layer() {
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                weight: Tensor::full(&[2, 1], 1.0),
                bias: Tensor::zeros(&[1]),
            },
            Layer::Relu,
            Layer::Dense {
                weight: Tensor::zeros(&[1, 2]),
                bias: Tensor::zeros(&[2]),
            },
        ];
        let net = Network::new(vec![1, 1, 2], layers).unwrap();
        let cfg = VizConfig {
            objective: Objective::Iam,
            ..VizConfig::default()
        };
        assert!(generate(&net, UnitRef::new(0, 0), &cfg).is_err());
        let img = Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap();
        assert!(objective_value(&net, &img, UnitRef::new(0, 0), Objective::Iam).is_err());
    }

    #[test]
    fn zero_steps_returns_init() {
        let net = two_unit_linear([1.0, 0.0, 0.0, 1.0], [0.0, 0.0]);
        let cfg = VizConfig {
            steps: 0,
            ..VizConfig::default()
        };
        let g = generate(&net, UnitRef::new(0, 0), &cfg).unwrap();
        assert_eq!(g.objective_trace.len(), 1);
        assert_eq!(g.best_iter, 0);
        assert_eq!(g.image, initial_image(&net, &cfg, cfg.init_seed));
        assert!(g.image.data().iter().all(|v| (0.45..=0.55).contains(v)));
    }

    #[test]
    fn linear_unit_saturates_to_sign_pattern() {
        // single unit with mixed-sign weights over 6 pixels
        let w = [0.8f32, -0.3, 0.5, -1.2, 0.1, -0.05];
        let layers = vec![
            Layer::Flatten,
            Layer::Dense {
                weight: Tensor::new(vec![6, 1], w.to_vec()).unwrap(),
                bias: Tensor::new(vec![1], vec![2.0]).unwrap(),
            },
            Layer::Relu,
            Layer::Dense {
                weight: Tensor::zeros(&[1, 2]),
                bias: Tensor::zeros(&[2]),
            },
        ];
        let net = Network::new(vec![1, 2, 3], layers).unwrap();
        let g = generate(&net, UnitRef::new(0, 0), &VizConfig::default()).unwrap();
        for (p, wv) in g.image.data().iter().zip(w) {
            let target = if wv > 0.0 { 1.0 } else { 0.0 };
            assert!((p - target).abs() <= 1e-6, "{p} vs {target}");
        }
    }

    #[test]
    fn iam_orthogonal_model_converges() {
        let net = two_unit_linear([1.0, 0.0, 0.0, 1.0], [0.0, 0.0]);
        let cfg = VizConfig {
            objective: Objective::Iam,
            ..VizConfig::default()
        };
        let g = generate(&net, UnitRef::new(0, 0), &cfg).unwrap();
        assert_eq!(g.image.data(), &[1.0, 0.0]);
        assert_eq!(g.best_objective(), 1.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let net = two_unit_linear([0.7, -0.2, 0.4, 0.9], [0.1, 0.0]);
        let cfg = VizConfig {
            steps: 10,
            step_size: 0.01,
            objective: Objective::Iam,
            restarts: 2,
            ..VizConfig::default()
        };
        let a = generate(&net, UnitRef::new(0, 1), &cfg).unwrap();
        let b = generate(&net, UnitRef::new(0, 1), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.best_objective() >= a.objective_trace[0]);
    }

    #[test]
    fn ppm_encoding() {
        let half = Tensor::full(&[3, 32, 32], 0.5);
        let bytes = ppm_bytes(&half).unwrap();
        let header = b"P6\n32 32\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 3 * 1024);
        assert!(bytes[header.len()..].iter().all(|&b| b == 128));

        let ones = Tensor::full(&[3, 4, 2], 1.0);
        let bytes = ppm_bytes(&ones).unwrap();
        assert!(bytes[b"P6\n2 4\n255\n".len()..].iter().all(|&b| b == 255));

        let mut rgb = Tensor::zeros(&[3, 1, 2]);
        rgb.data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.2, 0.0]);
        let bytes = ppm_bytes(&rgb).unwrap();
        assert_eq!(&bytes[b"P6\n2 1\n255\n".len()..], &[255, 0, 51, 0, 255, 0]);

        assert!(ppm_bytes(&Tensor::zeros(&[2, 4, 4])).is_err());
    }
}
