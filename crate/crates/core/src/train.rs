//! Minibatch SGD with momentum on softmax cross-entropy, and accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch: 32,
            lr: 0.05,
            momentum: 0.9,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's samples.
    pub loss: f64,
    /// Fraction of samples classified correctly before their update.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Accuracy of the trained network over the whole training set.
    pub final_train_accuracy: f64,
}

/// Trains `net` in place.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if net.class_count() != data.class_count() {
        return Err(Error::Shape(format!(
            "network has {} outputs, dataset has {} classes",
            net.class_count(),
            data.class_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<f32>> = net
        .parameters()
        .iter()
        .map(|p| vec![0.0; p.len()])
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_index, idx) in order.chunks(cfg.batch).enumerate() {
            let images = data.images().gather(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let grads = {
                let mut g = Graph::new();
                let x = g.leaf(images, false);
                let f = net.forward(&mut g, x, true, None)?;
                let logits = g.value(f.output);
                let classes = logits.shape()[1];
                correct += logits
                    .data()
                    .chunks_exact(classes)
                    .zip(&labels)
                    .filter(|(row, &l)| argmax(row) == l)
                    .count();
                let loss = g.softmax_xent(f.output, &labels)?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_index,
                        loss: value,
                    });
                }
                loss_sum += value * idx.len() as f64;
                let mut grads = g.backward(loss)?;
                f.params
                    .iter()
                    .map(|&p| grads.take(p).expect("parameters require grad"))
                    .collect::<Vec<_>>()
            };
            for ((param, vel), grad) in net
                .parameters_mut()
                .into_iter()
                .zip(&mut velocity)
                .zip(grads)
            {
                for ((w, v), g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = cfg.momentum * *v + g;
                    *w -= cfg.lr * *v;
                }
            }
        }
        history.push(EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(TrainHistory {
        epochs: history,
        final_train_accuracy: evaluate(net, data)?,
    })
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (c, &v)| if v > row[best] { c } else { best })
}

/// Fraction of samples whose argmax logit (lowest index on ties) matches the
/// label; 0 for an empty dataset.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let predictions = net.predict(data.images())?;
    let correct = predictions
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
