//! Brute-force reference implementations shared by the integration tests.
//! Everything here is written from the definitions with plain loops and does
//! not call the library's graph or regularizer code.

#![allow(dead_code)]

use lsmooth::network::{forward_with_trace, softmax_cross_entropy, NetworkModel};
use lsmooth::regularizers::FrozenGraph;
use lsmooth::DenseTensor;

pub type Mat = Vec<Vec<f64>>;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let p = b[0].len();
    let mut c = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            c[i][j] = (0..b.len()).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn laplacian(adj: &Mat) -> Mat {
    let n = adj.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            l[i][j] = if i == j { adj[i].iter().sum::<f64>() - adj[i][i] } else { -adj[i][j] };
        }
    }
    l
}

pub fn power(l: &Mat, m: u32) -> Mat {
    let mut p = l.clone();
    for _ in 1..m {
        p = matmul(&p, l);
    }
    p
}

pub fn quad(p: &Mat, s: &[f64]) -> f64 {
    let n = s.len();
    (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| s[i] * p[i][j] * s[j]).sum()
}

/// `Σ_c s_c^T P s_c` over the classes present in `labels`.
pub fn label_smoothness(p: &Mat, labels: &[usize]) -> f64 {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
        .iter()
        .map(|&c| {
            let s: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }).collect();
            quad(p, &s)
        })
        .sum()
}

/// kNN union support: `j` among the `k` most similar to `i` (ties to the
/// lower index), or the reverse.
pub fn knn_union(sim: &Mat, k: usize) -> Vec<Vec<bool>> {
    let n = sim.len();
    let mut keep = vec![vec![false; n]; n];
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| sim[i][b].partial_cmp(&sim[i][a]).unwrap().then(a.cmp(&b)));
        for &j in others.iter().take(k.min(n - 1)) {
            keep[i][j] = true;
            keep[j][i] = true;
        }
    }
    keep
}

/// Regularizer value with the support, negative-clamping mask and
/// normalizer taken from `frozen`.
pub fn frozen_value(reps: &[Mat], labels: &[usize], gamma: f64, m: u32, frozen: &[FrozenGraph]) -> f64 {
    let sums: Vec<f64> = reps
        .iter()
        .zip(frozen)
        .map(|(x, f)| {
            let n = x.len();
            let mut adj = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    if i != j && f.is_active(i, j) {
                        adj[i][j] = cosine(&x[i], &x[j]);
                    }
                }
            }
            let mut p = power(&laplacian(&adj), m);
            p.iter_mut().flatten().for_each(|v| *v /= f.normalizer);
            label_smoothness(&p, labels)
        })
        .collect();
    let gaps: Vec<f64> = sums.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    gamma.powi(m as i32) * gaps.iter().sum::<f64>() / gaps.len() as f64
}

pub fn to_mat(t: &lsmooth::Matrix) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Monitored representations of a forward pass as nested vectors.
pub fn representations(model: &NetworkModel<f64>, x: &DenseTensor<f64>) -> Vec<Mat> {
    forward_with_trace(model, x).unwrap().representations().iter().map(to_mat).collect()
}

/// `CCE + λ·½‖θ‖² + γ^m Δ` with the graph state frozen.
pub fn full_loss(
    model: &NetworkModel<f64>,
    x: &DenseTensor<f64>,
    labels: &[usize],
    lambda: f64,
    gamma: f64,
    m: u32,
    frozen: &[FrozenGraph],
) -> f64 {
    let trace = forward_with_trace(model, x).unwrap();
    let (cce, _) = softmax_cross_entropy(trace.logits(), labels).unwrap();
    let reps: Vec<Mat> = trace.representations().iter().map(to_mat).collect();
    cce + lambda * model.half_squared_norm() + frozen_value(&reps, labels, gamma, m, frozen)
}

/// Central difference of `f` with respect to parameter `idx`.
pub fn central_difference(
    model: &NetworkModel<f64>,
    idx: usize,
    h: f64,
    f: impl Fn(&NetworkModel<f64>) -> f64,
) -> f64 {
    let mut plus = model.clone();
    let mut minus = model.clone();
    set_param(&mut plus, idx, h);
    set_param(&mut minus, idx, -h);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

fn set_param(model: &mut NetworkModel<f64>, idx: usize, delta: f64) {
    let mut k = idx;
    for layer in model.layers_mut() {
        let nw = layer.weights.len();
        if k < nw {
            layer.weights.data_mut()[k] += delta;
            return;
        }
        k -= nw;
        let nb = layer.bias.len();
        if k < nb {
            layer.bias.data_mut()[k] += delta;
            return;
        }
        k -= nb;
    }
    panic!("parameter index out of range");
}

/// `|a - b| <= rel · max(|a|, |b|) + abs`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

/// Relative error with an absolute floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// A small random model, batch and regularizer setting for gradient checks.
pub struct GradCase {
    pub model: NetworkModel<f64>,
    pub x: DenseTensor<f64>,
    pub labels: Vec<usize>,
    pub m: u32,
    pub k: Option<usize>,
}

pub fn tiny_case(seed: u64, batch: usize) -> GradCase {
    use lsmooth::network::ModelSpec;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let hidden: &[&str] = match seed % 4 {
        0 => &["conv3x3:2", "conv3x3:2:residual", "conv3x3_strided:3", "dense:4"],
        1 => &["conv3x3:3", "conv3x3_strided:2", "dense:5"],
        2 => &["dense:6", "dense:5", "dense:4"],
        _ => &["conv3x3_strided:3", "conv3x3:3:residual"],
    };
    let spec = ModelSpec {
        input_shape: vec![1, 4, 4],
        hidden: hidden.iter().map(|s| s.parse().unwrap()).collect(),
        num_classes: 3,
        renormalize_conv: seed % 2 == 1,
    };
    let mut model = NetworkModel::<f64>::init(&spec, seed).unwrap();
    for layer in model.layers_mut() {
        layer.bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    let data = (0..batch * 16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let x = DenseTensor::from_vec(&[batch, 1, 4, 4], data).unwrap();
    let mut labels: Vec<usize> = (0..batch).map(|i| i % 3).collect();
    for i in (1..batch).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let m = 1 + (seed % 3) as u32;
    let k = if seed.is_multiple_of(5) || batch < 3 { None } else { Some(rng.random_range(2..batch)) };
    GradCase { model, x, labels, m, k }
}

/// Signs of every ReLU pre-activation; a change between two parameter
/// settings means a kink lies between them.
pub fn relu_pattern(model: &NetworkModel<f64>, x: &DenseTensor<f64>) -> Vec<bool> {
    use lsmooth::network::Activation;
    let trace = forward_with_trace(model, x).unwrap();
    model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.activation == Activation::Relu)
        .flat_map(|(i, _)| trace.pre_activation(i).data().iter().map(|&z| z > 0.0).collect::<Vec<_>>())
        .collect()
}

/// Model with parameter `idx` shifted by `delta`.
pub fn shifted(model: &NetworkModel<f64>, idx: usize, delta: f64) -> NetworkModel<f64> {
    let mut out = model.clone();
    set_param(&mut out, idx, delta);
    out
}

/// A `b×d` batch of representations with mixed-sign entries.
pub fn random_batch(rng: &mut impl rand::Rng, b: usize, d: usize) -> lsmooth::Matrix {
    let data = (0..b * d).map(|_| rng.random_range(-0.5..1.0)).collect();
    lsmooth::Matrix::from_vec(b, d, data).unwrap()
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Parameters whose ±h probe crosses a ReLU kink.
    pub skipped: usize,
    pub worst: f64,
}

/// Full-loss gradient check on `tiny_case(seed, batch)` with the kNN support,
/// clamp mask and normalizer frozen from the unperturbed forward pass.
pub fn check_full_loss_gradient(seed: u64, batch: usize, lambda: f64, gamma: f64) -> GradCheck {
    use lsmooth::network::backward;
    use lsmooth::regularizers::{smoothness_regularizer, RegularizerConfig};
    use lsmooth::signals::make_label_signals;

    // Near ε^(1/3): truncation and cancellation error are balanced.
    let h = 1e-5;
    let case = tiny_case(seed, batch);
    let model = &case.model;
    let trace = forward_with_trace(model, &case.x).unwrap();
    let (_, dlogits) = softmax_cross_entropy(trace.logits(), &case.labels).unwrap();
    let signals = make_label_signals(&case.labels, model.num_classes()).unwrap();
    let cfg = RegularizerConfig { gamma, power_m: case.m, k: case.k, ..Default::default() };
    let out = smoothness_regularizer(&trace, &signals, &cfg).unwrap();
    let mut grads = backward(model, &trace, &dlogits, &out.grads).unwrap().params;
    grads.add_weight_decay(model, lambda);
    let pattern = relu_pattern(model, &case.x);
    let loss = |m: &NetworkModel<f64>| full_loss(m, &case.x, &case.labels, lambda, gamma, case.m, &out.frozen);
    let mut res = GradCheck::default();
    for (idx, &g) in grads.flat().iter().enumerate() {
        if relu_pattern(&shifted(model, idx, h), &case.x) != pattern
            || relu_pattern(&shifted(model, idx, -h), &case.x) != pattern
        {
            res.skipped += 1;
            continue;
        }
        let fd = central_difference(model, idx, h, loss);
        res.checked += 1;
        res.worst = res.worst.max(rel_err(g, fd, 1e-6));
    }
    res
}
