//! Batch similarity graphs and the spectral quantities defined on them.
//!
//! A batch of `b` representations gives a `b×b` cosine similarity matrix.
//! Sparsifying it with a k-nearest-neighbour union rule yields a weighted
//! graph whose combinatorial Laplacian `L = D - A` is used to measure how
//! smoothly class-indicator signals vary across the batch.
//!
//! All computations are carried out in `f64` whatever precision the network
//! trains in.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Tolerance used when validating symmetry of inputs.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Off-diagonal Frobenius norm at which the Jacobi sweeps stop, relative to
/// `max(1, ‖input‖_F)`.
pub const JACOBI_TOL: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cosine similarity `⟨a,b⟩ / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Eight independent partial sums keep the loop vectorizable.
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Pairwise cosine similarities of the rows of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
}

impl SimilarityMatrix {
    /// Wraps an existing matrix after checking it is square and symmetric.
    pub fn from_matrix(values: Matrix) -> Result<Self> {
        values.ensure_symmetric(SYMMETRY_TOL)?;
        Ok(SimilarityMatrix { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }

    pub fn into_matrix(self) -> Matrix {
        self.values
    }
}

/// Cosine similarity matrix of the rows of `representations` (`b×d`).
///
/// Fails on an all-zero row, naming it.
pub fn build_similarity_matrix(representations: &Matrix) -> Result<SimilarityMatrix> {
    check_batch(representations)?;
    let norms = row_norms(representations);
    if let Some(row) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNormRow { row });
    }
    Ok(similarity_from_norms(representations, &norms))
}

/// Like [`build_similarity_matrix`], but a zero-norm row gets similarity 0
/// with every other row instead of an error. The diagonal stays 1.
///
/// Returns the row norms alongside, which the regularizer gradient reuses.
pub fn similarity_matrix_lenient(representations: &Matrix) -> Result<(SimilarityMatrix, Vec<f64>)> {
    check_batch(representations)?;
    let norms = row_norms(representations);
    Ok((similarity_from_norms(representations, &norms), norms))
}

fn check_batch(representations: &Matrix) -> Result<()> {
    if representations.rows() < 2 {
        return Err(Error::Parameter(format!(
            "a similarity graph needs at least 2 examples, got {}",
            representations.rows()
        )));
    }
    Ok(())
}

fn row_norms(x: &Matrix) -> Vec<f64> {
    (0..x.rows()).map(|i| norm(x.row(i))).collect()
}

fn similarity_from_norms(x: &Matrix, norms: &[f64]) -> SimilarityMatrix {
    let b = x.rows();
    let mut m = Matrix::identity(b);
    for i in 0..b {
        for j in (i + 1)..b {
            let s = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                (dot(x.row(i), x.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    SimilarityMatrix { values: m }
}

/// Symmetric set of retained edges of a kNN graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSupport {
    n: usize,
    mask: Vec<bool>,
}

impl EdgeSupport {
    pub fn complete(n: usize) -> Self {
        let mut mask = vec![true; n * n];
        for i in 0..n {
            mask[i * n + i] = false;
        }
        EdgeSupport { n, mask }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.mask[i * self.n..(i + 1) * self.n].iter().filter(|&&m| m).count()
    }

    /// Support with nodes relabelled: `out(a,b) = self(perm[a], perm[b])`.
    pub fn permuted(&self, perm: &[usize]) -> EdgeSupport {
        let n = self.n;
        let mut mask = vec![false; n * n];
        for a in 0..n {
            for b in 0..n {
                mask[a * n + b] = self.contains(perm[a], perm[b]);
            }
        }
        EdgeSupport { n, mask }
    }
}

/// Union kNN support: `(i,j)` is kept when `j` is among the `k` most similar
/// nodes of `i` or `i` among those of `j`. Ties prefer the lower index.
pub fn knn_support(m: &SimilarityMatrix, k: usize) -> Result<EdgeSupport> {
    let b = m.batch_size();
    if k < 1 || k > b {
        return Err(Error::Parameter(format!("k = {k} outside [1, {b}]")));
    }
    let values = m.values();
    let mut mask = vec![false; b * b];
    let mut candidates: Vec<usize> = Vec::with_capacity(b);
    for i in 0..b {
        candidates.clear();
        candidates.extend((0..b).filter(|&j| j != i));
        // Descending similarity; the sort is stable so equal values keep index order.
        candidates.sort_by(|&p, &q| values[(i, q)].total_cmp(&values[(i, p)]));
        for &j in candidates.iter().take(k) {
            mask[i * b + j] = true;
            mask[j * b + i] = true;
        }
    }
    Ok(EdgeSupport { n: b, mask })
}

/// Weighted graph over a batch together with its degree vector and Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    adjacency: Matrix,
    degree: Vec<f64>,
    laplacian: Matrix,
    k: usize,
}

impl SimilarityGraph {
    /// Builds the graph from a symmetric adjacency matrix with zero diagonal.
    pub fn from_adjacency(adjacency: Matrix, k: usize) -> Result<Self> {
        adjacency.ensure_symmetric(SYMMETRY_TOL)?;
        if let Some(i) = (0..adjacency.rows()).find(|&i| adjacency[(i, i)] != 0.0) {
            return Err(Error::Parameter(format!("adjacency has nonzero diagonal at {i}")));
        }
        let degree = adjacency.row_sums();
        let laplacian = laplacian_from_parts(&adjacency, &degree);
        Ok(SimilarityGraph { adjacency, degree, laplacian, k })
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn laplacian(&self) -> &Matrix {
        &self.laplacian
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn batch_size(&self) -> usize {
        self.adjacency.rows()
    }
}

/// kNN union graph with edge weights taken from `m`.
pub fn knn_adjacency(m: &SimilarityMatrix, k: usize) -> Result<SimilarityGraph> {
    knn_adjacency_with(m, k, false)
}

/// kNN union graph; with `clamp_negative` set, retained negative similarities
/// become zero-weight edges so the Laplacian stays positive semidefinite.
pub fn knn_adjacency_with(m: &SimilarityMatrix, k: usize, clamp_negative: bool) -> Result<SimilarityGraph> {
    let support = knn_support(m, k)?;
    let adjacency = adjacency_on_support(m, &support, clamp_negative);
    SimilarityGraph::from_adjacency(adjacency, k)
}

pub(crate) fn adjacency_on_support(m: &SimilarityMatrix, support: &EdgeSupport, clamp_negative: bool) -> Matrix {
    let b = m.batch_size();
    let mut a = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            if support.contains(i, j) {
                let w = m.values()[(i, j)];
                a[(i, j)] = if clamp_negative { w.max(0.0) } else { w };
            }
        }
    }
    a
}

/// How a batch of representations is turned into a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphOptions {
    /// Neighbour count; `None` means the complete graph (`k = b`). Values
    /// above the batch size are clamped to it.
    pub k: Option<usize>,
    pub clamp_negative: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions { k: None, clamp_negative: true }
    }
}

impl GraphOptions {
    pub fn effective_k(&self, batch_size: usize) -> usize {
        self.k.map_or(batch_size, |k| k.min(batch_size))
    }
}

/// Everything derived from one batch of representations: similarities, row
/// norms, the retained edge set and the resulting graph.
#[derive(Debug, Clone)]
pub struct BatchGraph {
    pub similarity: SimilarityMatrix,
    pub norms: Vec<f64>,
    pub support: EdgeSupport,
    pub graph: SimilarityGraph,
}

/// Builds the kNN graph of a batch, tolerating zero-norm rows.
pub fn batch_graph(representations: &Matrix, opts: GraphOptions) -> Result<BatchGraph> {
    let (similarity, norms) = similarity_matrix_lenient(representations)?;
    let k = opts.effective_k(representations.rows());
    let support = knn_support(&similarity, k)?;
    let adjacency = adjacency_on_support(&similarity, &support, opts.clamp_negative);
    let graph = SimilarityGraph::from_adjacency(adjacency, k)?;
    Ok(BatchGraph { similarity, norms, support, graph })
}

/// The graph Laplacian `D - A`.
pub fn laplacian(graph: &SimilarityGraph) -> &Matrix {
    graph.laplacian()
}

/// `D - A` for a raw adjacency matrix.
pub fn laplacian_from_adjacency(adjacency: &Matrix) -> Matrix {
    laplacian_from_parts(adjacency, &adjacency.row_sums())
}

fn laplacian_from_parts(adjacency: &Matrix, degree: &[f64]) -> Matrix {
    let b = adjacency.rows();
    let mut l = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            l[(i, j)] = if i == j { degree[i] - adjacency[(i, j)] } else { -adjacency[(i, j)] };
        }
    }
    l
}

/// `L^m`, scaled so its largest absolute entry is 1 when `m >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianPower {
    pub matrix: Matrix,
    /// Divisor applied to the raw power; 1 when `m = 1` or the power is zero.
    pub normalizer: f64,
    pub power: u32,
}

pub fn laplacian_power_normalized(l: &Matrix, m: u32) -> Result<LaplacianPower> {
    if m < 1 {
        return Err(Error::Parameter("Laplacian power must be at least 1".into()));
    }
    l.ensure_symmetric(SYMMETRY_TOL)?;
    let mut matrix = l.pow(m)?;
    let mut normalizer = 1.0;
    if m >= 2 {
        let max = matrix.max_abs();
        if max > 0.0 {
            matrix.scale(1.0 / max);
            normalizer = max;
        }
    }
    Ok(LaplacianPower { matrix, normalizer, power: m })
}

/// Eigenvalues in ascending order with matching orthonormal eigenvectors
/// stored as the columns of `eigenvectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl Spectrum {
    pub fn eigenvector(&self, idx: usize) -> Vec<f64> {
        (0..self.eigenvectors.rows()).map(|r| self.eigenvectors[(r, idx)]).collect()
    }

    /// `F Λ F^T`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let f = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = (0..n).map(|c| f[(i, c)] * self.eigenvalues[c] * f[(j, c)]).sum();
            }
        }
        out
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvectors are sign-normalized so their first non-negligible component is
/// positive. When the smallest eigenvalue is simple and its eigenvector is
/// constant, it is set exactly to `1/√b`.
pub fn eigendecompose(l: &Matrix) -> Result<Spectrum> {
    l.ensure_symmetric(SYMMETRY_TOL)?;
    let n = l.rows();
    let mut a = l.clone();
    let mut v = Matrix::identity(n);
    let threshold = JACOBI_TOL * l.frobenius_norm().max(1.0);

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) < threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let sign = match (0..n).map(|r| v[(r, src)]).find(|x| x.abs() > 1e-10) {
            Some(x) if x < 0.0 => -1.0,
            _ => 1.0,
        };
        for r in 0..n {
            eigenvectors[(r, dst)] = sign * v[(r, src)];
        }
    }

    if n >= 1 {
        let simple = n == 1 || eigenvalues[1] - eigenvalues[0] > 1e-8 * threshold.max(1.0);
        let c = 1.0 / (n as f64).sqrt();
        let constant = (0..n).all(|r| (eigenvectors[(r, 0)] - c).abs() < 1e-9);
        if simple && constant {
            for r in 0..n {
                eigenvectors[(r, 0)] = c;
            }
        }
    }

    Ok(Spectrum { eigenvalues, eigenvectors })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[(i, j)] * a[(i, j)];
            }
        }
    }
    sum.sqrt()
}

/// Applies `A <- J^T A J`, `V <- V J` for the rotation in the `(p,q)` plane.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Graph Fourier transform `F^T s`.
pub fn gft(spectrum: &Spectrum, s: &[f64]) -> Result<Vec<f64>> {
    let f = &spectrum.eigenvectors;
    if s.len() != f.rows() {
        return Err(Error::Shape(format!("signal of length {} on a {}-node graph", s.len(), f.rows())));
    }
    let n = f.rows();
    Ok((0..f.cols()).map(|c| (0..n).map(|r| f[(r, c)] * s[r]).sum()).collect())
}

/// Quadratic-form smoothness `s^T P s`, with `P` a Laplacian or a power of it.
pub fn smoothness(l_power: &Matrix, s: &[f64]) -> Result<f64> {
    l_power.quadratic_form(s)
}

/// `Σ_{i<j} A[i,j] (s[i] - s[j])²`; equal to `s^T L s` for `L = D - A`.
pub fn pairwise_smoothness(adjacency: &Matrix, s: &[f64]) -> Result<f64> {
    let b = adjacency.rows();
    if s.len() != b {
        return Err(Error::Shape(format!("signal of length {} on a {b}-node graph", s.len())));
    }
    let mut total = 0.0;
    for i in 0..b {
        for j in (i + 1)..b {
            let d = s[i] - s[j];
            total += adjacency[(i, j)] * d * d;
        }
    }
    Ok(total)
}

/// Bandwidth estimate `(s^T L^m s / s^T s)^(1/m)` on the unnormalized power.
///
/// The repeated products are rescaled as they go so large `m` does not
/// overflow.
pub fn bandwidth_estimate(l: &Matrix, s: &[f64], m: u32) -> Result<f64> {
    if m < 1 {
        return Err(Error::Parameter("bandwidth power must be at least 1".into()));
    }
    if s.len() != l.rows() {
        return Err(Error::Shape(format!("signal of length {} on a {}-node graph", s.len(), l.rows())));
    }
    let energy = dot(s, s);
    if energy == 0.0 {
        return Err(Error::Degenerate("bandwidth of a zero signal".into()));
    }
    // A product this small next to `‖L‖·‖v‖∞` is cancellation noise of a
    // signal in the null space.
    let l_scale = (0..l.rows()).map(|i| l.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut v = s.to_vec();
    let mut prev_peak = v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
    let mut log_scale = 0.0;
    for _ in 0..m {
        v = l.mat_vec(&v)?;
        let peak = v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        if peak <= 1e-13 * l_scale * prev_peak {
            return Ok(0.0);
        }
        prev_peak = 1.0;
        v.iter_mut().for_each(|x| *x /= peak);
        log_scale += peak.ln();
    }
    let numerator = dot(s, &v);
    // Relative to the rescaled iterate, anything this small is rounding noise.
    let noise = 1e-12 * norm(s) * norm(&v);
    if numerator <= noise {
        if numerator < -noise {
            return Err(Error::Degenerate(
                "s^T L^m s is negative; the Laplacian is not positive semidefinite".into(),
            ));
        }
        return Ok(0.0);
    }
    Ok(((numerator.ln() + log_scale - energy.ln()) / m as f64).exp())
}
