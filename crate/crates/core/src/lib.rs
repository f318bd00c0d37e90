//! Class selectivity, activation maximization and representative
//! substitution for small convolutional and fully connected networks.
//!
//! The crate carries its own reverse-mode autograd ([`autograd::Graph`]),
//! a CIFAR-10 binary loader and a procedural dataset, SGD training, unit
//! visualization by gradient ascent (AM and IAM objectives), and the
//! per-layer analyses that relate class selectivity to RS.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod fsio;
pub mod model;
pub mod report;
pub mod selectivity;
pub mod stats;
pub mod substitution;
pub mod tensor;
pub mod train;
pub mod viz;

pub use autograd::{Gradients, Graph, NodeId};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{load_cifar10, synth_dataset, Dataset, Split, SynthSpec};
pub use error::{Error, Result};
pub use model::{build_mlp, build_shallow_cnn, Arch, Layer, Network, UnitRef};
pub use selectivity::{
    class_conditional_means, selectivity, unit_activation, ClassConditionalActivations,
};
pub use stats::spearman;
pub use substitution::{
    ablation_delta, layer_profile, layerwise_correlation, representative_substitution, rs_count,
    LayerCorrelation, RsScore, UnitReport,
};
pub use tensor::Tensor;
pub use train::{evaluate, train, TrainConfig, TrainHistory};
pub use viz::{generate, GeneratedImage, Objective, VizConfig};
