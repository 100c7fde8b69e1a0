use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{DenseTensor, Scalar};

use super::forward::{dense_input, effective_weights, ForwardTrace};
use super::gemm::{gemm_acc, gemm_at_b_acc};
use super::{Activation, Layer, LayerKind, NetworkModel, RESIDUAL_ALPHA};

/// Per-layer parameter gradients, laid out like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub weights: Vec<DenseTensor<S>>,
    pub biases: Vec<DenseTensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(model: &NetworkModel<S>) -> Self {
        Gradients {
            weights: model.layers().iter().map(|l| DenseTensor::zeros(l.weights.shape())).collect(),
            biases: model.layers().iter().map(|l| DenseTensor::zeros(l.bias.shape())).collect(),
        }
    }

    /// Adds `λ θ`, the gradient of `λ/2 ‖θ‖²`.
    pub fn add_weight_decay(&mut self, model: &NetworkModel<S>, lambda: f64) {
        let lambda = S::of_f64(lambda);
        for (l, layer) in model.layers().iter().enumerate() {
            for (g, &p) in self.weights[l].data_mut().iter_mut().zip(layer.weights.data()) {
                *g = *g + lambda * p;
            }
            for (g, &p) in self.biases[l].data_mut().iter_mut().zip(layer.bias.data()) {
                *g = *g + lambda * p;
            }
        }
    }

    /// All entries, layer by layer, weights before biases.
    pub fn flat(&self) -> Vec<S> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BackwardOutput<S> {
    pub params: Gradients<S>,
    /// Gradient with respect to the input batch.
    pub input: DenseTensor<S>,
}

/// Reverse-mode pass through the recorded forward trace.
///
/// `dlogits` is the loss gradient at the logits. `extra`, when nonempty, holds
/// one `b×d` gradient per monitored point that is added to the gradient
/// arriving at that point before it is propagated further down.
pub fn backward<S: Scalar>(
    model: &NetworkModel<S>,
    trace: &ForwardTrace<S>,
    dlogits: &DenseTensor<S>,
    extra: &[Matrix],
) -> Result<BackwardOutput<S>> {
    check_trace(model, trace, dlogits, extra)?;
    let mut params = Gradients::zeros_like(model);
    let mut grad = dlogits.data().to_vec();
    for (i, layer) in model.layers().iter().enumerate().rev() {
        if let Some(pos) = trace.monitored.iter().position(|&p| p == i) {
            if let Some(e) = extra.get(pos) {
                for (g, &v) in grad.iter_mut().zip(e.as_slice()) {
                    *g = *g + S::of_f64(v);
                }
            }
        }
        let z = &trace.pre_activations[i];
        let input = &trace.activations[i];
        let alpha = S::of_f64(RESIDUAL_ALPHA);
        let mut dz = grad.clone();
        if layer.residual {
            dz.iter_mut().for_each(|g| *g = *g * alpha);
        }
        if layer.activation == Activation::Relu {
            for (g, &zv) in dz.iter_mut().zip(z.data()) {
                if zv <= S::zero() {
                    *g = S::zero();
                }
            }
        }
        let mut dx = match layer.kind {
            LayerKind::Dense => dense_backward(layer, input, &dz, &mut params, i),
            _ => conv_backward(layer, input, &dz, &mut params, i),
        };
        if layer.residual {
            for (d, &g) in dx.iter_mut().zip(&grad) {
                *d = *d + alpha * g;
            }
        }
        grad = dx;
    }
    let input = DenseTensor::from_vec(trace.input().shape(), grad)?;
    Ok(BackwardOutput { params, input })
}

fn check_trace<S: Scalar>(
    model: &NetworkModel<S>,
    trace: &ForwardTrace<S>,
    dlogits: &DenseTensor<S>,
    extra: &[Matrix],
) -> Result<()> {
    let layers = model.layers();
    if trace.num_layers() != layers.len() || trace.monitored != model.monitored_points() {
        return Err(Error::Shape("trace was not produced by this model".into()));
    }
    let b = trace.batch_size();
    for (l, z) in layers.iter().zip(&trace.pre_activations) {
        let mut expected = vec![b];
        expected.extend(l.output_shape());
        if z.shape() != expected {
            return Err(Error::Shape("trace was not produced by this model".into()));
        }
    }
    if dlogits.shape() != trace.logits().shape() {
        return Err(Error::Shape(format!(
            "logit gradient {:?} for logits {:?}",
            dlogits.shape(),
            trace.logits().shape()
        )));
    }
    if !extra.is_empty() {
        if extra.len() != trace.monitored.len() {
            return Err(Error::Shape(format!(
                "{} extra gradients for {} monitored points",
                extra.len(),
                trace.monitored.len()
            )));
        }
        for (e, &p) in extra.iter().zip(&trace.monitored) {
            let out = trace.layer_output(p);
            if e.rows() != out.outer() || e.cols() != out.inner() {
                return Err(Error::Shape(format!("extra gradient {}x{} at layer {p}", e.rows(), e.cols())));
            }
        }
    }
    Ok(())
}

fn dense_backward<S: Scalar>(
    layer: &Layer<S>,
    input: &DenseTensor<S>,
    dz: &[S],
    params: &mut Gradients<S>,
    idx: usize,
) -> Vec<S> {
    let b = input.outer();
    let x = dense_input(layer, input);
    let out = layer.out_features();
    let fan_in = layer.fan_in();
    let w = layer.weights.data();
    let dw = params.weights[idx].data_mut();
    let mut dx_flat = vec![S::zero(); b * fan_in];
    for n in 0..b {
        let xr = &x[n * fan_in..(n + 1) * fan_in];
        let dxr = &mut dx_flat[n * fan_in..(n + 1) * fan_in];
        for o in 0..out {
            let g = dz[n * out + o];
            if g == S::zero() {
                continue;
            }
            let dwr = &mut dw[o * fan_in..(o + 1) * fan_in];
            for (d, &xv) in dwr.iter_mut().zip(xr) {
                *d = *d + g * xv;
            }
            for (d, &wv) in dxr.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                *d = *d + g * wv;
            }
        }
    }
    let db = params.biases[idx].data_mut();
    for n in 0..b {
        for o in 0..out {
            db[o] = db[o] + dz[n * out + o];
        }
    }
    if !layer.pools_input() {
        return dx_flat;
    }
    let c = layer.input_shape[0];
    let hw = layer.input_shape[1] * layer.input_shape[2];
    let inv = S::of_f64(1.0 / hw as f64);
    let mut dx = vec![S::zero(); b * c * hw];
    for n in 0..b {
        for ch in 0..c {
            let g = dx_flat[n * c + ch] * inv;
            dx[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}

fn conv_backward<S: Scalar>(
    layer: &Layer<S>,
    input: &DenseTensor<S>,
    dz: &[S],
    params: &mut Gradients<S>,
    idx: usize,
) -> Vec<S> {
    let b = input.outer();
    let (g, weights) = effective_weights(layer);
    let c_out = layer.out_features();
    let (k, p) = (g.patch_len(), g.positions());
    let per_in = input.inner();
    let x = input.data();
    let mut dx = vec![S::zero(); x.len()];
    let mut col = vec![S::zero(); k * p];
    let mut dcol = vec![S::zero(); k * p];
    let mut dw = vec![S::zero(); c_out * k];
    for n in 0..b {
        let gz = &dz[n * c_out * p..(n + 1) * c_out * p];
        g.im2col_transposed(&x[n * per_in..(n + 1) * per_in], &mut col);
        gemm_acc(gz, &col, &mut dw, c_out, p, k);
        dcol.iter_mut().for_each(|v| *v = S::zero());
        gemm_at_b_acc(&weights, gz, &mut dcol, k, c_out, p);
        g.col2im_acc(&dcol, &mut dx[n * per_in..(n + 1) * per_in]);
    }
    let scale = layer.weight_scale();
    for (acc, d) in params.weights[idx].data_mut().iter_mut().zip(dw) {
        *acc = *acc + d * scale;
    }
    let db = params.biases[idx].data_mut();
    for n in 0..b {
        for o in 0..c_out {
            let plane = &dz[(n * c_out + o) * p..(n * c_out + o + 1) * p];
            db[o] = plane.iter().fold(db[o], |acc, &g| acc + g);
        }
    }
    dx
}
