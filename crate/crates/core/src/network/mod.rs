//! Small deterministic dense/convolutional network with hand-written
//! backpropagation.
//!
//! A model is a sequence of hidden layers (dense or 3x3 convolutions, each
//! followed by a ReLU) and a final linear layer whose outputs are the logits
//! of a softmax classifier. The outputs of selected ReLU layers are the
//! *monitored points*: they are recorded during the forward pass so that
//! batch similarity graphs can be built from them, and the backward pass
//! accepts extra gradient contributions at exactly those points.
//!
//! A dense layer that reads a spatial `C×H×W` activation either flattens it
//! (fan-in `C·H·W`) or global-average-pools it (fan-in `C`).

mod backward;
mod checkpoint;
mod forward;
mod gemm;
mod loss;
mod optim;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::{DenseTensor, Scalar};

pub use backward::{backward, BackwardOutput, Gradients};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{forward, forward_with_hook, forward_with_trace, ForwardTrace};
pub use loss::softmax_cross_entropy;
pub use optim::{sgd_momentum_step, Sgd};

/// Spatial kernel size of every convolution.
pub const KERNEL_SIZE: usize = 3;

/// Branch weight used when a layer adds an identity skip to its output.
pub const RESIDUAL_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv3x3,
    Conv3x3Strided,
}

impl LayerKind {
    pub fn stride(self) -> usize {
        match self {
            LayerKind::Conv3x3Strided => 2,
            _ => 1,
        }
    }

    pub fn is_conv(self) -> bool {
        !matches!(self, LayerKind::Dense)
    }

    fn tag(self) -> u8 {
        match self {
            LayerKind::Dense => 0,
            LayerKind::Conv3x3 => 1,
            LayerKind::Conv3x3Strided => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(LayerKind::Dense),
            1 => Some(LayerKind::Conv3x3),
            2 => Some(LayerKind::Conv3x3Strided),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    pub kind: LayerKind,
    /// `[out, in]` for dense layers, `[out, in, 3, 3]` for convolutions.
    pub weights: DenseTensor<S>,
    /// `[out]`.
    pub bias: DenseTensor<S>,
    pub activation: Activation,
    /// Output is `α·h(z) + α·input` with `α = 0.5`.
    pub residual: bool,
    /// Convolution weights are divided by `√(2·k_s + 1)` in the forward pass.
    pub renormalize: bool,
    /// Per-example input shape: `[C, H, W]` or `[D]`.
    pub input_shape: Vec<usize>,
}

impl<S: Scalar> Layer<S> {
    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn fan_in(&self) -> usize {
        self.weights.shape()[1..].iter().product()
    }

    /// Dense layer reading a spatial input through global average pooling.
    pub fn pools_input(&self) -> bool {
        self.kind == LayerKind::Dense
            && self.input_shape.len() == 3
            && self.input_shape[1] * self.input_shape[2] > 1
            && self.weights.shape()[1] == self.input_shape[0]
    }

    /// Per-example output shape.
    pub fn output_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense => vec![self.out_features()],
            _ => {
                let s = self.kind.stride();
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                vec![self.out_features(), (h - 1) / s + 1, (w - 1) / s + 1]
            }
        }
    }

    /// Factor applied to the stored weights in the forward pass.
    pub fn weight_scale(&self) -> S {
        if self.renormalize && self.kind.is_conv() {
            S::of_f64(crate::regularizers::conv_renormalization_factor(KERNEL_SIZE))
        } else {
            S::one()
        }
    }

    fn validate(&self) -> Result<()> {
        let ws = self.weights.shape();
        let expected_in: usize = match (self.kind, self.input_shape.len()) {
            (LayerKind::Dense, 1) => self.input_shape[0],
            (LayerKind::Dense, 3) => {
                if self.pools_input() {
                    self.input_shape[0]
                } else {
                    self.input_shape.iter().product()
                }
            }
            (_, 3) => self.input_shape[0],
            _ => return Err(Error::Shape(format!("{:?} layer cannot take input {:?}", self.kind, self.input_shape))),
        };
        let shape_ok = match self.kind {
            LayerKind::Dense => ws.len() == 2 && ws[1] == expected_in,
            _ => ws.len() == 4 && ws[1] == expected_in && ws[2] == KERNEL_SIZE && ws[3] == KERNEL_SIZE,
        };
        if !shape_ok {
            return Err(Error::Shape(format!(
                "{:?} weights {:?} do not fit input {:?}",
                self.kind, ws, self.input_shape
            )));
        }
        if self.bias.shape() != [ws[0]] {
            return Err(Error::Shape(format!("bias {:?} for {} outputs", self.bias.shape(), ws[0])));
        }
        if self.residual && (self.output_shape() != self.input_shape || self.activation != Activation::Relu) {
            return Err(Error::Shape("a residual layer must be a shape-preserving ReLU layer".into()));
        }
        Ok(())
    }
}

/// Hidden layer description: kind, width and optional identity skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HiddenLayerSpec {
    pub kind: LayerKind,
    pub width: usize,
    pub residual: bool,
}

impl FromStr for HiddenLayerSpec {
    type Err = Error;

    /// `dense:32`, `conv3x3:8`, `conv3x3_strided:16`, optionally `:residual`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("cannot parse layer spec {s:?}"));
        let kind = match parts.first().copied() {
            Some("dense") => LayerKind::Dense,
            Some("conv3x3") => LayerKind::Conv3x3,
            Some("conv3x3_strided") => LayerKind::Conv3x3Strided,
            _ => return Err(bad()),
        };
        let width = parts.get(1).and_then(|w| w.parse().ok()).filter(|&w| w > 0).ok_or_else(bad)?;
        let residual = match parts.get(2).copied() {
            None => false,
            Some("residual") => true,
            Some(_) => return Err(bad()),
        };
        if parts.len() > 3 {
            return Err(bad());
        }
        Ok(HiddenLayerSpec { kind, width, residual })
    }
}

impl fmt::Display for HiddenLayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            LayerKind::Dense => "dense",
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv3x3Strided => "conv3x3_strided",
        };
        write!(f, "{kind}:{}", self.width)?;
        if self.residual {
            write!(f, ":residual")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Per-example input shape, `[C, H, W]` or `[D]`.
    pub input_shape: Vec<usize>,
    pub hidden: Vec<HiddenLayerSpec>,
    pub num_classes: usize,
    pub renormalize_conv: bool,
}

/// Layers plus the indices of the ReLU layers whose outputs are monitored.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel<S> {
    layers: Vec<Layer<S>>,
    monitored: Vec<usize>,
}

impl<S: Scalar> NetworkModel<S> {
    /// Assembles a model, checking that consecutive shapes agree and that the
    /// last layer is a plain linear classifier. Monitors every ReLU layer.
    pub fn from_layers(layers: Vec<Layer<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a model needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.validate().map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
            if i > 0 && layers[i - 1].output_shape() != layer.input_shape {
                return Err(Error::Shape(format!(
                    "layer {i} expects {:?} but receives {:?}",
                    layer.input_shape,
                    layers[i - 1].output_shape()
                )));
            }
        }
        let last = layers.last().expect("nonempty");
        if last.kind != LayerKind::Dense || last.activation != Activation::None || last.residual {
            return Err(Error::Shape("the last layer must be linear without activation".into()));
        }
        let monitored = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.activation == Activation::Relu)
            .map(|(i, _)| i)
            .collect();
        Ok(NetworkModel { layers, monitored })
    }

    /// He-uniform initialised model with zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.input_shape.len() != 1 && spec.input_shape.len() != 3 {
            return Err(Error::Config(format!("input shape {:?} must be [D] or [C,H,W]", spec.input_shape)));
        }
        if spec.num_classes < 2 {
            return Err(Error::Config("at least two classes are needed".into()));
        }
        let mut rng = substream(seed, Stream::Init, 0);
        let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
        let mut shape = spec.input_shape.clone();
        for h in &spec.hidden {
            let (weight_shape, in_shape) = match h.kind {
                LayerKind::Dense => (vec![h.width, shape.iter().product()], shape.clone()),
                _ => {
                    if shape.len() != 3 {
                        return Err(Error::Config("a convolution cannot follow a dense layer".into()));
                    }
                    (vec![h.width, shape[0], KERNEL_SIZE, KERNEL_SIZE], shape.clone())
                }
            };
            let layer = Layer {
                kind: h.kind,
                weights: he_uniform(&weight_shape, &mut rng),
                bias: DenseTensor::zeros(&[h.width]),
                activation: Activation::Relu,
                residual: h.residual,
                renormalize: spec.renormalize_conv && h.kind.is_conv(),
                input_shape: in_shape,
            };
            shape = layer.output_shape();
            layers.push(layer);
        }
        // Spatial features are global-average-pooled before the classifier.
        let fan_in = shape[0];
        layers.push(Layer {
            kind: LayerKind::Dense,
            weights: he_uniform(&[spec.num_classes, fan_in], &mut rng),
            bias: DenseTensor::zeros(&[spec.num_classes]),
            activation: Activation::None,
            residual: false,
            renormalize: false,
            input_shape: shape,
        });
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn monitored_points(&self) -> &[usize] {
        &self.monitored
    }

    /// Restricts monitoring to the given ReLU layers (strictly increasing).
    pub fn set_monitored_points(&mut self, points: Vec<usize>) -> Result<()> {
        if points.is_empty() {
            return Err(Error::Config("at least one monitored point is required".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("monitored points {points:?} must be strictly increasing")));
        }
        if let Some(&p) = points
            .iter()
            .find(|&&p| p >= self.layers.len() || self.layers[p].activation != Activation::Relu)
        {
            return Err(Error::Config(format!("layer {p} is not a ReLU layer")));
        }
        self.monitored = points;
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.layers[0].input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("nonempty").out_features()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// `½ Σ θ²` over every weight and bias.
    pub fn half_squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(l.bias.data()))
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum::<f64>()
            * 0.5
    }

    pub fn cast<T: Scalar>(&self) -> NetworkModel<T> {
        NetworkModel {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    kind: l.kind,
                    weights: l.weights.cast(),
                    bias: l.bias.cast(),
                    activation: l.activation,
                    residual: l.residual,
                    renormalize: l.renormalize,
                    input_shape: l.input_shape.clone(),
                })
                .collect(),
            monitored: self.monitored.clone(),
        }
    }
}

fn he_uniform<S: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> DenseTensor<S> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::of_f64(rng.random_range(-bound..bound))).collect();
    DenseTensor::from_vec(shape, data).expect("valid shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec {
            input_shape: vec![1, 6, 6],
            hidden: vec![
                "conv3x3:4".parse().unwrap(),
                "conv3x3:4:residual".parse().unwrap(),
                "conv3x3_strided:6".parse().unwrap(),
                "dense:5".parse().unwrap(),
            ],
            num_classes: 3,
            renormalize_conv: false,
        }
    }

    #[test]
    fn layer_spec_parsing() {
        let s: HiddenLayerSpec = "conv3x3_strided:16".parse().unwrap();
        assert_eq!(s, HiddenLayerSpec { kind: LayerKind::Conv3x3Strided, width: 16, residual: false });
        assert_eq!(s.to_string(), "conv3x3_strided:16");
        assert!("conv5x5:3".parse::<HiddenLayerSpec>().is_err());
        assert!("dense:0".parse::<HiddenLayerSpec>().is_err());
        assert!("dense:3:skip".parse::<HiddenLayerSpec>().is_err());
        assert!("dense:3:residual".parse::<HiddenLayerSpec>().unwrap().residual);
    }

    #[test]
    fn init_shapes() {
        let m = NetworkModel::<f32>::init(&spec(), 1).unwrap();
        let shapes: Vec<Vec<usize>> = m.layers().iter().map(|l| l.output_shape()).collect();
        assert_eq!(shapes, vec![vec![4, 6, 6], vec![4, 6, 6], vec![6, 3, 3], vec![5], vec![3]]);
        assert_eq!(m.monitored_points(), &[0, 1, 2, 3]);
        assert_eq!(m.num_classes(), 3);
        assert_eq!(m.layers()[3].fan_in(), 54);
    }

    #[test]
    fn pooled_classifier_after_conv() {
        let mut s = spec();
        s.hidden.pop();
        let m = NetworkModel::<f32>::init(&s, 1).unwrap();
        let last = m.layers().last().unwrap();
        assert!(last.pools_input());
        assert_eq!(last.fan_in(), 6);
    }

    #[test]
    fn init_is_seeded() {
        let a = NetworkModel::<f32>::init(&spec(), 9).unwrap();
        let b = NetworkModel::<f32>::init(&spec(), 9).unwrap();
        let c = NetworkModel::<f32>::init(&spec(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn monitored_point_validation() {
        let mut m = NetworkModel::<f32>::init(&spec(), 1).unwrap();
        assert!(m.set_monitored_points(vec![1, 3]).is_ok());
        assert!(m.set_monitored_points(vec![3, 1]).is_err());
        assert!(m.set_monitored_points(vec![4]).is_err());
        assert!(m.set_monitored_points(vec![]).is_err());
    }

    #[test]
    fn residual_needs_matching_shapes() {
        let mut s = spec();
        s.hidden[2].residual = true;
        assert!(NetworkModel::<f32>::init(&s, 1).is_err());
    }
}
