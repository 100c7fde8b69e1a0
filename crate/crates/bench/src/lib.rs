//! Fixtures shared by the kernel benchmarks: a desk-sized model and a
//! normalized batch of synthetic images.

use lsmooth::data::{normalize, synthetic, NormStats, SyntheticSpec};
use lsmooth::harness::TrainConfig;
use lsmooth::network::ModelSpec;
use lsmooth::{DenseTensor, NetworkModel};

pub struct Fixture {
    pub model: NetworkModel<f32>,
    pub images: DenseTensor<f32>,
    pub labels: Vec<usize>,
    pub config: TrainConfig,
}

/// Untrained default model and one batch of `batch` normalized images.
pub fn fixture(batch: usize) -> Fixture {
    let config = TrainConfig::default();
    let spec = SyntheticSpec::default();
    let data = synthetic(&spec, batch, 0, 0).expect("synthetic data");
    let stats = NormStats::from_training(&data).expect("statistics");
    let images = normalize(&data, &stats).expect("normalize");
    let model_spec = ModelSpec {
        input_shape: data.image_shape().to_vec(),
        hidden: config.hidden_layers().expect("default layers parse"),
        num_classes: data.num_classes(),
        renormalize_conv: false,
    };
    let model = NetworkModel::init(&model_spec, 0).expect("model");
    Fixture { model, images, labels: data.labels().to_vec(), config }
}
