use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::regularizers::convex_combine;
use crate::tensor::{DenseTensor, Scalar};

use super::gemm::{gemm_acc, ConvGeometry};
use super::{Activation, Layer, LayerKind, NetworkModel, RESIDUAL_ALPHA};

/// Everything the backward pass needs from a forward pass, plus the monitored
/// representations.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    /// Input batch of every layer; entry `i + 1` is the output of layer `i`.
    pub(crate) activations: Vec<DenseTensor<S>>,
    /// Pre-activation `Wx + b` of every layer.
    pub(crate) pre_activations: Vec<DenseTensor<S>>,
    pub(crate) monitored: Vec<usize>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn batch_size(&self) -> usize {
        self.activations[0].outer()
    }

    pub fn input(&self) -> &DenseTensor<S> {
        &self.activations[0]
    }

    /// `b×C` logits.
    pub fn logits(&self) -> &DenseTensor<S> {
        self.activations.last().expect("nonempty trace")
    }

    pub fn monitored_layers(&self) -> &[usize] {
        &self.monitored
    }

    /// Output of layer `layer` (batch-major).
    pub fn layer_output(&self, layer: usize) -> &DenseTensor<S> {
        &self.activations[layer + 1]
    }

    /// `Wx + b` of layer `layer`, before its activation.
    pub fn pre_activation(&self, layer: usize) -> &DenseTensor<S> {
        &self.pre_activations[layer]
    }

    /// Flattened `b×d` representation at each monitored point, in `f64`.
    pub fn representations(&self) -> Vec<Matrix> {
        self.monitored.iter().map(|&l| self.layer_output(l).to_matrix()).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.pre_activations.len()
    }
}

pub fn forward_with_trace<S: Scalar>(model: &NetworkModel<S>, batch: &DenseTensor<S>) -> Result<ForwardTrace<S>> {
    forward_with_hook(model, batch, |_, _| {})
}

/// Forward pass that lets `hook` rewrite the output at each monitored point
/// (called with the point's position in the monitored list). Downstream layers
/// see the rewritten values.
pub fn forward_with_hook<S: Scalar>(
    model: &NetworkModel<S>,
    batch: &DenseTensor<S>,
    mut hook: impl FnMut(usize, &mut DenseTensor<S>),
) -> Result<ForwardTrace<S>> {
    check_input(model, batch)?;
    let n_layers = model.layers().len();
    let mut activations = Vec::with_capacity(n_layers + 1);
    let mut pre_activations = Vec::with_capacity(n_layers);
    activations.push(batch.clone());
    for (i, layer) in model.layers().iter().enumerate() {
        let input = activations.last().expect("nonempty");
        let z = linear_part(layer, input);
        let mut out = match layer.activation {
            Activation::Relu => z.map(|v| if v > S::zero() { v } else { S::zero() }),
            Activation::None => z.clone(),
        };
        if layer.residual {
            let a = S::of_f64(RESIDUAL_ALPHA);
            out = convex_combine(&[&out, input], &[a, a])?;
        }
        if let Some(pos) = model.monitored_points().iter().position(|&p| p == i) {
            hook(pos, &mut out);
        }
        pre_activations.push(z);
        activations.push(out);
    }
    Ok(ForwardTrace { activations, pre_activations, monitored: model.monitored_points().to_vec() })
}

/// Logits only.
pub fn forward<S: Scalar>(model: &NetworkModel<S>, batch: &DenseTensor<S>) -> Result<DenseTensor<S>> {
    let mut trace = forward_with_trace(model, batch)?;
    Ok(trace.activations.pop().expect("nonempty"))
}

fn check_input<S: Scalar>(model: &NetworkModel<S>, batch: &DenseTensor<S>) -> Result<()> {
    if batch.shape().len() < 2 || batch.shape()[1..] != *model.input_shape() {
        return Err(Error::Shape(format!(
            "batch of shape {:?} for a model taking {:?}",
            batch.shape(),
            model.input_shape()
        )));
    }
    if !batch.is_finite() {
        return Err(Error::Degenerate("batch contains non-finite values".into()));
    }
    Ok(())
}

/// `W x + b` for a batch.
pub(crate) fn linear_part<S: Scalar>(layer: &Layer<S>, input: &DenseTensor<S>) -> DenseTensor<S> {
    match layer.kind {
        LayerKind::Dense => dense_forward(layer, input),
        _ => conv_forward(layer, input),
    }
}

/// Dense-layer view of the input: pooled `b×C` or flattened `b×fan_in`.
pub(crate) fn dense_input<S: Scalar>(layer: &Layer<S>, input: &DenseTensor<S>) -> Vec<S> {
    if !layer.pools_input() {
        return input.data().to_vec();
    }
    let b = input.outer();
    let c = layer.input_shape[0];
    let hw = layer.input_shape[1] * layer.input_shape[2];
    let inv = S::of_f64(1.0 / hw as f64);
    let mut pooled = vec![S::zero(); b * c];
    for n in 0..b {
        for ch in 0..c {
            let plane = &input.data()[(n * c + ch) * hw..(n * c + ch + 1) * hw];
            let sum = plane.iter().fold(S::zero(), |acc, &v| acc + v);
            pooled[n * c + ch] = sum * inv;
        }
    }
    pooled
}

fn dense_forward<S: Scalar>(layer: &Layer<S>, input: &DenseTensor<S>) -> DenseTensor<S> {
    let b = input.outer();
    let x = dense_input(layer, input);
    let out = layer.out_features();
    let fan_in = layer.fan_in();
    let w = layer.weights.data();
    let bias = layer.bias.data();
    let mut z = vec![S::zero(); b * out];
    for n in 0..b {
        let xr = &x[n * fan_in..(n + 1) * fan_in];
        for o in 0..out {
            let wr = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = bias[o];
            for (a, c) in wr.iter().zip(xr) {
                acc = acc + *a * *c;
            }
            z[n * out + o] = acc;
        }
    }
    DenseTensor::from_vec(&[b, out], z).expect("dense output shape")
}

/// Output extent and the valid output range `[lo, hi)` for kernel offset `k`
/// with stride `s`, padding 1: the input index is `o*s + k - 1`.
#[inline]
pub(crate) fn valid_range(k: usize, s: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // o*s + k >= 1  and  o*s + k - 1 < in_len
    let lo = if k >= 1 { 0 } else { 1_usize.div_ceil(s) };
    let hi = ((in_len + 1 - k).div_ceil(s)).min(out_len);
    (lo, hi.max(lo))
}

fn conv_geometry<S: Scalar>(layer: &Layer<S>) -> ConvGeometry {
    let out = layer.output_shape();
    ConvGeometry {
        c_in: layer.input_shape[0],
        h: layer.input_shape[1],
        w: layer.input_shape[2],
        ho: out[1],
        wo: out[2],
        stride: layer.kind.stride(),
    }
}

/// Weights as applied in the forward pass, `c_out × (c_in·9)`.
pub(crate) fn effective_weights<S: Scalar>(layer: &Layer<S>) -> (ConvGeometry, Vec<S>) {
    let scale = layer.weight_scale();
    (conv_geometry(layer), layer.weights.data().iter().map(|&w| w * scale).collect())
}

fn conv_forward<S: Scalar>(layer: &Layer<S>, input: &DenseTensor<S>) -> DenseTensor<S> {
    let b = input.outer();
    let (g, weights) = effective_weights(layer);
    let c_out = layer.out_features();
    let (k, p) = (g.patch_len(), g.positions());
    let per_in = input.inner();
    let mut col = vec![S::zero(); k * p];
    let mut z = vec![S::zero(); b * c_out * p];
    for n in 0..b {
        g.im2col(&input.data()[n * per_in..(n + 1) * per_in], &mut col);
        let out = &mut z[n * c_out * p..(n + 1) * c_out * p];
        for (o, plane) in out.chunks_exact_mut(p).enumerate() {
            plane.iter_mut().for_each(|v| *v = layer.bias.data()[o]);
        }
        gemm_acc(&weights, &col, out, c_out, k, p);
    }
    DenseTensor::from_vec(&[b, c_out, g.ho, g.wo], z).expect("conv output shape")
}
