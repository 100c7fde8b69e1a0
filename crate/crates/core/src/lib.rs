//! Label-signal smoothness regularization for small neural networks.
//!
//! For every batch, the representations captured after each monitored ReLU
//! are turned into a cosine-similarity kNN graph. The smoothness of the
//! class-indicator signals on those graphs is compared between consecutive
//! monitored layers, and the mean absolute change is added to the training
//! loss. Around this sit a from-scratch dense/convolutional network with
//! manual backpropagation, Parseval-style weight retraction, dataset loaders
//! and a robustness harness (noise, gradient-sign attacks, fault dropout,
//! weight quantization).

pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod matrix;
pub mod network;
pub mod regularizers;
pub mod rng;
pub mod robustness;
pub mod signals;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{GraphOptions, SimilarityGraph, SimilarityMatrix, Spectrum};
pub use harness::TrainConfig;
pub use matrix::Matrix;
pub use network::{ForwardTrace, NetworkModel};
pub use regularizers::RegularizerConfig;
pub use robustness::AttackReport;
pub use signals::{LabelSignalSet, SmoothnessProfile};
pub use tensor::DenseTensor;
