use crate::tensor::Scalar;

use super::{Gradients, NetworkModel};

/// One momentum step on a flat parameter slice:
/// `v <- μ v + g + λ θ`, `θ <- θ - η v`.
pub fn sgd_momentum_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    velocity: &mut [S],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    let (lr, mu, wd) = (S::of_f64(lr), S::of_f64(momentum), S::of_f64(weight_decay));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
}

/// Momentum SGD with a velocity buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<S> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Gradients<S>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(model: &NetworkModel<S>, momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Gradients::zeros_like(model) }
    }

    pub fn step(&mut self, model: &mut NetworkModel<S>, grads: &Gradients<S>, lr: f64) {
        for (l, layer) in model.layers_mut().iter_mut().enumerate() {
            sgd_momentum_step(
                layer.weights.data_mut(),
                grads.weights[l].data(),
                self.velocity.weights[l].data_mut(),
                lr,
                self.momentum,
                self.weight_decay,
            );
            sgd_momentum_step(
                layer.bias.data_mut(),
                grads.biases[l].data(),
                self.velocity.biases[l].data_mut(),
                lr,
                self.momentum,
                self.weight_decay,
            );
        }
    }
}
