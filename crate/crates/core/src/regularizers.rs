//! The label-smoothness gap regularizer and the Parseval training pieces.
//!
//! # Smoothness gap
//!
//! For monitored representations `X_1 … X_d` of one batch, each `X_p` gives a
//! kNN cosine graph with Laplacian `L_p` and a (normalized) power
//! `P_p = L_p^m / c_p`. The summed label smoothness at that point is
//!
//! ```text
//! T_p = Σ_c s_c^T P_p s_c = Σ_ij P_p[i,j] Y[i,j],   Y = Σ_c s_c s_c^T
//! ```
//!
//! and the penalty is `γ^m · mean_p |T_{p+1} - T_p|`.
//!
//! Gradients treat the kNN edge set and the normalizer `c_p` as constants
//! for the batch. Along the remaining path:
//!
//! ```text
//! ∂T/∂L   = (1/c) Σ_{r=0}^{m-1} L^r Y L^{m-1-r}             (= G)
//! ∂T/∂w_ij = G_ii + G_jj - 2 G_ij                            (w_ij = A_ij = A_ji)
//! ∂w_ij/∂x_i = (x̂_j - w_ij x̂_i) / ‖x_i‖,   x̂ = x / ‖x‖
//! ```
//!
//! `|·|` has subgradient 0 at 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, EdgeSupport, GraphOptions};
use crate::matrix::Matrix;
use crate::network::{ForwardTrace, NetworkModel};
use crate::signals::{self, LabelSignalSet};
use crate::tensor::{DenseTensor, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// Smoothness-gap weight γ; the loss uses γ^m.
    pub gamma: f64,
    /// Laplacian power m.
    pub power_m: u32,
    /// kNN neighbour count; `None` is the complete graph.
    pub k: Option<usize>,
    /// Parseval retraction step β.
    pub beta: f64,
    pub parseval_enabled: bool,
    pub clamp_negative_similarities: bool,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            gamma: 0.01,
            power_m: 2,
            k: None,
            beta: 0.01,
            parseval_enabled: false,
            clamp_negative_similarities: true,
        }
    }
}

impl RegularizerConfig {
    /// γ^m, the coefficient actually applied to Δ.
    pub fn effective_gamma(&self) -> f64 {
        self.gamma.powi(self.power_m as i32)
    }

    pub fn graph_options(&self) -> GraphOptions {
        GraphOptions { k: self.k, clamp_negative: self.clamp_negative_similarities }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be a finite value >= 0, got {}", self.gamma)));
        }
        if self.power_m < 1 {
            return Err(Error::Config("power_m must be at least 1".into()));
        }
        if self.k == Some(0) {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be a finite value >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// The per-batch constants the gradient treats as fixed at one monitored point.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenGraph {
    /// Edges retained by the kNN rule.
    pub support: EdgeSupport,
    /// `(i,j)` carries a differentiable weight: on the support and not
    /// removed by negative clamping.
    active: Vec<bool>,
    /// Max-abs normalizer of `L^m` (1 when `m = 1`).
    pub normalizer: f64,
}

impl FrozenGraph {
    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.active[i * self.support.len() + j]
    }
}

#[derive(Debug, Clone)]
pub struct RegularizerOutput {
    /// `γ^m Δ`.
    pub value: f64,
    /// `Δ`, the mean absolute consecutive gap.
    pub delta: f64,
    /// Summed label smoothness at each monitored point.
    pub sums: Vec<f64>,
    /// `∂value/∂X_p`, one `b×d` matrix per monitored point.
    pub grads: Vec<Matrix>,
    pub frozen: Vec<FrozenGraph>,
}

/// Regularizer value and gradients for a recorded forward pass.
pub fn smoothness_regularizer<S: Scalar>(
    trace: &ForwardTrace<S>,
    signals: &LabelSignalSet,
    cfg: &RegularizerConfig,
) -> Result<RegularizerOutput> {
    smoothness_regularizer_on(&trace.representations(), signals, cfg)
}

/// Same as [`smoothness_regularizer`] on explicit `b×d` representations.
pub fn smoothness_regularizer_on(
    representations: &[Matrix],
    signals: &LabelSignalSet,
    cfg: &RegularizerConfig,
) -> Result<RegularizerOutput> {
    cfg.validate()?;
    if representations.len() < 2 {
        return Err(Error::Config(format!(
            "the smoothness regularizer needs at least 2 monitored points, got {}",
            representations.len()
        )));
    }
    let b = signals.batch_size();
    if let Some(r) = representations.iter().find(|r| r.rows() != b) {
        return Err(Error::Shape(format!("{} representations for a batch of {b}", r.rows())));
    }
    let m = cfg.power_m;
    let opts = cfg.graph_options();

    struct Point {
        laplacian: Matrix,
        similarity: Matrix,
        norms: Vec<f64>,
        frozen: FrozenGraph,
    }

    let mut points = Vec::with_capacity(representations.len());
    let mut sums = Vec::with_capacity(representations.len());
    for rep in representations {
        let bg = graph::batch_graph(rep, opts)?;
        let power = graph::laplacian_power_normalized(bg.graph.laplacian(), m)?;
        sums.push(signals::layer_smoothness_sum(&power.matrix, signals)?);
        let sim = bg.similarity.into_matrix();
        let active = (0..b * b)
            .map(|idx| {
                let (i, j) = (idx / b, idx % b);
                bg.support.contains(i, j) && (!opts.clamp_negative || sim[(i, j)] > 0.0)
            })
            .collect();
        points.push(Point {
            laplacian: bg.graph.laplacian().clone(),
            similarity: sim,
            norms: bg.norms,
            frozen: FrozenGraph { support: bg.support, active, normalizer: power.normalizer },
        });
    }

    let gaps: Vec<f64> = sums.windows(2).map(|w| w[1] - w[0]).collect();
    let delta = signals::delta_total(&gaps)?;
    let coef = cfg.effective_gamma();
    let value = coef * delta;
    let scale = coef / gaps.len() as f64;

    let same_class = signals.same_class_matrix();
    let mut grads = Vec::with_capacity(points.len());
    for (p, (point, rep)) in points.iter().zip(representations).enumerate() {
        // T_p enters gap p-1 with + and gap p with -.
        let mut weight = 0.0;
        if p > 0 {
            weight += sign(gaps[p - 1]);
        }
        if p < gaps.len() {
            weight -= sign(gaps[p]);
        }
        weight *= scale;
        if weight == 0.0 {
            grads.push(Matrix::zeros(rep.rows(), rep.cols()));
            continue;
        }
        let g = smoothness_laplacian_gradient(&point.laplacian, &same_class, m, point.frozen.normalizer)?;
        let mut edge_grad = Matrix::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                if i != j && point.frozen.is_active(i, j) {
                    edge_grad[(i, j)] = weight * (g[(i, i)] + g[(j, j)] - 2.0 * g[(i, j)]);
                }
            }
        }
        grads.push(cosine_backward(rep, &point.norms, &point.similarity, &edge_grad)?);
    }

    Ok(RegularizerOutput { value, delta, sums, grads, frozen: points.into_iter().map(|p| p.frozen).collect() })
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `∂ tr(L^m Y)/c ∂L = (1/c) Σ_r L^r Y L^{m-1-r}` for symmetric `L`, `Y`.
fn smoothness_laplacian_gradient(l: &Matrix, y: &Matrix, m: u32, normalizer: f64) -> Result<Matrix> {
    let n = l.rows();
    let mut powers = Vec::with_capacity(m as usize);
    powers.push(Matrix::identity(n));
    for r in 1..m as usize {
        let next = powers[r - 1].matmul(l)?;
        powers.push(next);
    }
    let mut g = Matrix::zeros(n, n);
    for r in 0..m as usize {
        let left = if r == 0 { y.clone() } else { powers[r].matmul(y)? };
        let term = if r + 1 == m as usize { left } else { left.matmul(&powers[m as usize - 1 - r])? };
        g.add_assign(&term);
    }
    g.scale(1.0 / normalizer);
    Ok(g)
}

/// Chains `∂value/∂w_ij` (symmetric, one entry per ordered pair holding the
/// derivative for the unordered edge) through the cosine similarities.
fn cosine_backward(x: &Matrix, norms: &[f64], sim: &Matrix, edge_grad: &Matrix) -> Result<Matrix> {
    let (b, d) = (x.rows(), x.cols());
    let mut unit = x.clone();
    for (i, &n) in norms.iter().enumerate() {
        let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
        unit.row_mut(i).iter_mut().for_each(|v| *v *= inv);
    }
    // Each unordered edge is stored twice in edge_grad; its derivative reaches
    // x_i through the (i,j) entry only.
    let pulled = edge_grad.matmul(&unit)?;
    let mut out = Matrix::zeros(b, d);
    for i in 0..b {
        if norms[i] == 0.0 {
            continue;
        }
        let coef: f64 = (0..b).map(|j| edge_grad[(i, j)] * sim[(i, j)]).sum();
        let inv = 1.0 / norms[i];
        let (urow, prow) = (unit.row(i), pulled.row(i));
        for ((o, &p), &u) in out.row_mut(i).iter_mut().zip(prow).zip(urow) {
            *o = (p - coef * u) * inv;
        }
    }
    Ok(out)
}

/// One step of `W <- (1+β) W - β W W^T W` on a `rows×cols` matrix.
pub fn parseval_retraction(w: &Matrix, beta: f64) -> Result<Matrix> {
    let wwt = w.matmul(&w.transpose())?;
    let cubic = wwt.matmul(w)?;
    let mut out = w.clone();
    for (o, c) in out.as_mut_slice().iter_mut().zip(cubic.as_slice()) {
        *o = (1.0 + beta) * *o - beta * c;
    }
    Ok(out)
}

/// Applies [`parseval_retraction`] to every layer, viewing each weight tensor
/// as `out × fan_in`.
pub fn apply_parseval<S: Scalar>(model: &mut NetworkModel<S>, beta: f64) -> Result<()> {
    for layer in model.layers_mut() {
        let rows = layer.weights.outer();
        let w = layer.weights.to_matrix();
        debug_assert_eq!(w.rows(), rows);
        let updated = parseval_retraction(&w, beta)?;
        for (dst, &src) in layer.weights.data_mut().iter_mut().zip(updated.as_slice()) {
            *dst = S::of_f64(src);
        }
    }
    Ok(())
}

/// `1/√(2·k_s + 1)`.
pub fn conv_renormalization_factor(kernel_size: usize) -> f64 {
    1.0 / ((2 * kernel_size + 1) as f64).sqrt()
}

/// Kernel as seen by the forward pass, `W / √(2·k_s + 1)`. The stored kernel
/// is left untouched.
pub fn conv_renormalization<S: Scalar>(kernel: &DenseTensor<S>, kernel_size: usize) -> DenseTensor<S> {
    let f = S::of_f64(conv_renormalization_factor(kernel_size));
    kernel.map(|v| v * f)
}

/// `Σ α_i · branch_i`. The weights must lie in `(0, 1]` and sum to 1.
pub fn convex_combine<S: Scalar>(branches: &[&DenseTensor<S>], alphas: &[S]) -> Result<DenseTensor<S>> {
    let first = branches.first().ok_or_else(|| Error::Parameter("no branches to combine".into()))?;
    if branches.len() != alphas.len() {
        return Err(Error::Parameter(format!("{} branches but {} weights", branches.len(), alphas.len())));
    }
    if let Some(b) = branches.iter().find(|b| b.shape() != first.shape()) {
        return Err(Error::Shape(format!("branch shapes {:?} and {:?} differ", first.shape(), b.shape())));
    }
    let total: f64 = alphas.iter().map(|a| a.as_f64()).sum();
    if alphas.iter().any(|a| !(a.as_f64() > 0.0 && a.as_f64() <= 1.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Parameter("convexity weights must be in (0, 1] and sum to 1".into()));
    }
    if branches.len() == 1 {
        return Ok((*first).clone());
    }
    let mut out = DenseTensor::zeros(first.shape());
    for (b, &a) in branches.iter().zip(alphas) {
        for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
            *o = *o + a * v;
        }
    }
    Ok(out)
}
