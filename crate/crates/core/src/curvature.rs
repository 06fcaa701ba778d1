//! Hessian diagnostics: dense Hessians for small models, power iteration,
//! Hutchinson trace estimation, block Gershgorin intervals, per-sample logit
//! Hessians and the activation-norm bound on layer Hessians.
//!
//! Dense eigenvalues and singular values come from nalgebra and serve as the
//! reference oracle for the matrix-free estimators.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad, AutodiffError, HessianOperator, Program};
use crate::data::Batch;
use crate::graph::{Graph, Var};
use crate::model::{forward, record_forward, record_layers, LayerKind, LayerSlot, Layout, ModelSpec, ParamVector};
use crate::objective::{model_error, record_cross_entropy, ClientObjective, RegConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Largest dimension for which dense Hessians are assembled by default.
pub const DEFAULT_DENSE_CAP: usize = 400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurvatureError {
    #[error("dimension {dim} exceeds the dense cap {cap}")]
    Cap { dim: usize, cap: usize },
    #[error("power iteration did not converge in {iterations} iterations (last value {value})")]
    NonConverged {
        iterations: usize,
        value: f64,
        vector: Vec<f64>,
    },
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Anything that can multiply a vector by a symmetric matrix.
pub trait HvpOperator {
    fn dim(&self) -> usize;
    fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>, CurvatureError>;
}

impl HvpOperator for HessianOperator {
    fn dim(&self) -> usize {
        HessianOperator::dim(self)
    }

    fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>, CurvatureError> {
        Ok(HessianOperator::apply(self, v)?)
    }
}

impl HvpOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.ncols()
    }

    fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>, CurvatureError> {
        Ok((&*self * DVector::from_column_slice(v)).data.into())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut e: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Dense Hessian with the asymmetry measured before symmetrizing.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactHessian {
    pub matrix: DMatrix<f64>,
    /// Largest `|H_ij - H_ji|` before symmetrization.
    pub asymmetry: f64,
    pub loss: f64,
}

fn symmetrize(m: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let t = m.transpose();
    let asym = (&m - &t).amax();
    ((m + t) * 0.5, asym)
}

/// Columns `H e_j` for `j` in `cols`, restricted to rows `rows`.
pub fn hessian_columns<O: HvpOperator + ?Sized>(
    op: &mut O,
    rows: Range<usize>,
    cols: Range<usize>,
) -> Result<DMatrix<f64>, CurvatureError> {
    let d = op.dim();
    let mut m = DMatrix::zeros(rows.len(), cols.len());
    let mut e = vec![0.0; d];
    for (c, j) in cols.enumerate() {
        e[j] = 1.0;
        let col = op.apply(&e)?;
        e[j] = 0.0;
        for (r, i) in rows.clone().enumerate() {
            m[(r, c)] = col[i];
        }
    }
    Ok(m)
}

/// Symmetrized diagonal block `H[range, range]`.
pub fn hessian_block<O: HvpOperator + ?Sized>(op: &mut O, range: Range<usize>) -> Result<DMatrix<f64>, CurvatureError> {
    Ok(symmetrize(hessian_columns(op, range.clone(), range)?).0)
}

/// Dense Hessian assembled from `d` Hessian-vector products.
pub fn exact_hessian<P: Program + ?Sized>(
    program: &P,
    params: &[f64],
    batch: &P::Batch,
    cap: usize,
) -> Result<ExactHessian, CurvatureError> {
    let d = params.len();
    if d > cap {
        return Err(CurvatureError::Cap { dim: d, cap });
    }
    let mut op = HessianOperator::new(program, params, batch)?;
    let raw = hessian_columns(&mut op, 0..d, 0..d)?;
    let (matrix, asymmetry) = symmetrize(raw);
    Ok(ExactHessian {
        matrix,
        asymmetry,
        loss: op.loss(),
    })
}

/// Hessian by central differences of reverse-mode gradients. Independent
/// of the second reverse pass, so it cross-checks [`exact_hessian`].
pub fn finite_diff_hessian<P: Program + ?Sized>(
    program: &P,
    params: &[f64],
    batch: &P::Batch,
    step: f64,
) -> Result<DMatrix<f64>, CurvatureError> {
    let d = params.len();
    let mut m = DMatrix::zeros(d, d);
    let mut w = params.to_vec();
    for j in 0..d {
        let orig = w[j];
        w[j] = orig + step;
        let up = grad(program, &w, batch)?;
        w[j] = orig - step;
        let down = grad(program, &w, batch)?;
        w[j] = orig;
        for i in 0..d {
            m[(i, j)] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    Ok(symmetrize(m).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let c = dot(v, u);
        for (x, y) in v.iter_mut().zip(u) {
            *x -= c * y;
        }
    }
}

fn power_iteration_deflated<O: HvpOperator + ?Sized>(
    op: &mut O,
    found: &[Vec<f64>],
    max_iters: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<Eigenpair, CurvatureError> {
    if max_iters == 0 {
        return Err(CurvatureError::Domain("max_iters must be at least 1".into()));
    }
    let d = op.dim();
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    project_out(&mut v, found);
    let n0 = norm(&v);
    if n0 == 0.0 {
        return Ok(Eigenpair {
            value: 0.0,
            vector: v,
            iterations: 0,
        });
    }
    v.iter_mut().for_each(|x| *x /= n0);
    let mut hv = op.apply(&v)?;
    project_out(&mut hv, found);
    let mut lambda = dot(&v, &hv);
    for it in 1..=max_iters {
        let n = norm(&hv);
        if n == 0.0 {
            return Ok(Eigenpair {
                value: 0.0,
                vector: v,
                iterations: it,
            });
        }
        v = hv.iter().map(|x| x / n).collect();
        hv = op.apply(&v)?;
        project_out(&mut hv, found);
        let next = dot(&v, &hv);
        if (next - lambda).abs() < tol * (1.0 + next.abs()) {
            return Ok(Eigenpair {
                value: next,
                vector: v,
                iterations: it,
            });
        }
        lambda = next;
    }
    Err(CurvatureError::NonConverged {
        iterations: max_iters,
        value: lambda,
        vector: v,
    })
}

/// Dominant-magnitude eigenvalue (with its sign) and unit eigenvector.
pub fn power_iteration_top<O: HvpOperator + ?Sized>(
    op: &mut O,
    max_iters: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<Eigenpair, CurvatureError> {
    power_iteration_deflated(op, &[], max_iters, tol, rng)
}

/// `k` eigenpairs by deflated power iteration, sorted by value descending.
pub fn topk_eigenvalues<O: HvpOperator + ?Sized>(
    op: &mut O,
    k: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<Vec<Eigenpair>, CurvatureError> {
    if k > op.dim() {
        return Err(CurvatureError::Domain(format!("k = {k} exceeds dimension {}", op.dim())));
    }
    let mut pairs: Vec<Eigenpair> = Vec::with_capacity(k);
    for _ in 0..k {
        let basis: Vec<Vec<f64>> = pairs.iter().map(|p| p.vector.clone()).collect();
        pairs.push(power_iteration_deflated(op, &basis, max_iters, tol, rng)?);
    }
    pairs.sort_by(|a, b| b.value.total_cmp(&a.value));
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub probes: usize,
}

/// Mean of `z^T H z` over Rademacher probes, with its standard error.
pub fn hutchinson_trace<O: HvpOperator + ?Sized>(
    op: &mut O,
    probes: usize,
    rng: &mut Rng,
) -> Result<TraceEstimate, CurvatureError> {
    if probes < 2 {
        return Err(CurvatureError::Domain("at least two probes are needed".into()));
    }
    let d = op.dim();
    let mut samples = Vec::with_capacity(probes);
    for _ in 0..probes {
        let z: Vec<f64> = (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let hz = op.apply(&z)?;
        samples.push(dot(&z, &hz));
    }
    let n = probes as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(TraceEstimate {
        estimate: mean,
        stderr: (var / n).sqrt(),
        probes,
    })
}

/// Interval around one layer block's spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInterval {
    pub layer: usize,
    pub range: Range<usize>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Sum of spectral norms of the off-diagonal blocks in this block row.
    pub radius: f64,
    /// Entry-bound radius `max|H_lj| * sqrt((L-1) d_l (d - d_l))`, for
    /// reference only.
    pub loose_radius: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GershgorinReport {
    pub intervals: Vec<LayerInterval>,
    /// Eigenvalues of the full matrix, ascending.
    pub eigenvalues: Vec<f64>,
    /// Smallest, over eigenvalues, of the best distance inside an interval;
    /// negative when some eigenvalue lies outside every interval.
    pub margin: f64,
}

impl GershgorinReport {
    pub fn contains_all(&self, tol: f64) -> bool {
        self.margin >= -tol
    }
}

/// One block per parameterized layer (weights and bias together).
pub fn layer_blocks(layout: &Layout) -> Vec<(usize, Range<usize>)> {
    layout.slots.iter().map(|s| (s.layer, s.range())).collect()
}

/// Block Gershgorin intervals `[lambda_min(H_ll) - R_l, lambda_max(H_ll) + R_l]`
/// with `R_l = sum_{j != l} |H_lj|_2`, and how well they contain the spectrum.
pub fn gershgorin_report(h: &DMatrix<f64>, blocks: &[(usize, Range<usize>)]) -> GershgorinReport {
    let d = h.nrows();
    let count = blocks.len();
    let intervals: Vec<LayerInterval> = blocks
        .iter()
        .map(|(layer, r)| {
            let diag = h.view((r.start, r.start), (r.len(), r.len())).into_owned();
            let eig = symmetric_eigenvalues(&diag);
            let mut radius = 0.0;
            let mut max_entry: f64 = 0.0;
            for (_, other) in blocks.iter().filter(|(_, o)| o != r) {
                let off = h.view((r.start, other.start), (r.len(), other.len())).into_owned();
                radius += spectral_norm(&off);
                max_entry = max_entry.max(off.amax());
            }
            let lambda_min = eig.first().copied().unwrap_or(0.0);
            let lambda_max = eig.last().copied().unwrap_or(0.0);
            let loose_radius = max_entry * (((count.max(1) - 1) * r.len() * (d - r.len())) as f64).sqrt();
            LayerInterval {
                layer: *layer,
                range: r.clone(),
                lambda_min,
                lambda_max,
                radius,
                loose_radius,
                lower: lambda_min - radius,
                upper: lambda_max + radius,
            }
        })
        .collect();
    let eigenvalues = symmetric_eigenvalues(h);
    let margin = eigenvalues
        .iter()
        .map(|&e| {
            intervals
                .iter()
                .map(|iv| (e - iv.lower).min(iv.upper - e))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .fold(f64::INFINITY, f64::min);
    GershgorinReport {
        intervals,
        eigenvalues,
        margin,
    }
}

/// Loss of one sample as a function of a layer's output.
struct SuffixProgram<'a> {
    spec: &'a ModelSpec,
    layout: &'a Layout,
    params: &'a [f64],
    from: usize,
    shape: Vec<usize>,
    label: usize,
}

impl Program for SuffixProgram<'_> {
    type Batch = ();

    fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    fn record(&self, g: &mut Graph, z: Var, _: &()) -> Result<Var, AutodiffError> {
        let p = g.constant(Tensor::vector(self.params.to_vec()));
        let mut shape = vec![1];
        shape.extend_from_slice(&self.shape);
        let z = g.reshape(z, shape);
        let trace = record_layers(self.spec, self.layout, g, p, z, self.from, false).map_err(model_error)?;
        Ok(record_cross_entropy(g, trace.logits, &[self.label]))
    }
}

/// Hessian of one sample's loss with respect to a layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitHessian {
    pub matrix: DMatrix<f64>,
    pub ordinal: usize,
    pub asymmetry: f64,
}

fn slot(params: &ParamVector, ordinal: usize) -> Result<&LayerSlot, CurvatureError> {
    params
        .layout
        .slots
        .get(ordinal)
        .ok_or_else(|| CurvatureError::Domain(format!("no parameterized layer with ordinal {ordinal}")))
}

fn single(input: &Tensor) -> Result<(), CurvatureError> {
    if input.shape().first() != Some(&1) {
        return Err(CurvatureError::Domain(format!(
            "expected a single sample, got batch shape {:?}",
            input.shape()
        )));
    }
    Ok(())
}

/// Hessian of the sample loss with respect to the output `z = W a + b` of
/// parameterized layer `ordinal`, by nested differentiation of the suffix
/// network. `input` is `[1, ...]`.
pub fn logit_hessian(
    spec: &ModelSpec,
    params: &ParamVector,
    input: &Tensor,
    label: usize,
    ordinal: usize,
    cap: usize,
) -> Result<LogitHessian, CurvatureError> {
    single(input)?;
    let slot = slot(params, ordinal)?;
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(params.values.clone()));
    let x = g.constant(input.clone());
    let trace = record_forward(spec, &params.layout, &mut g, p, x, false).map_err(model_error)?;
    let z = g.value(trace.outputs[slot.layer]).data().to_vec();
    let suffix = SuffixProgram {
        spec,
        layout: &params.layout,
        params: &params.values,
        from: slot.layer + 1,
        shape: slot.output_shape.clone(),
        label,
    };
    let h = exact_hessian(&suffix, &z, &(), cap)?;
    Ok(LogitHessian {
        matrix: h.matrix,
        ordinal,
        asymmetry: h.asymmetry,
    })
}

fn ce_objective<'a>(spec: &'a ModelSpec, layout: &'a Layout) -> ClientObjective<'a> {
    ClientObjective::new(spec, layout, RegConfig::default())
}

/// The input each parameterized layer sees, per sample.
fn layer_input(spec: &ModelSpec, params: &ParamVector, inputs: &Tensor, ordinal: usize) -> Result<Tensor, CurvatureError> {
    let (_, cap) = forward(spec, params, inputs, true).map_err(|e| CurvatureError::Autodiff(model_error(e)))?;
    Ok(cap.expect("capture requested").entries[ordinal].activation.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KroneckerReport {
    pub ordinal: usize,
    /// `|H_W - M (x) a a^T|_F / (1 + |H_W|_F)`.
    pub residual: f64,
    pub lambda_max_block: f64,
    pub lambda_max_logit: f64,
    pub activation_norm_sq: f64,
    /// `|lambda_max(H_W) - max(lambda_max(M) |a|^2, 0)|`.
    pub eigen_identity_error: f64,
}

/// Compares the weight block of a fully connected layer's single-sample
/// Hessian with `M (x) a a^T`, where `M` is the Hessian with respect to the
/// layer output and `a` its input. Weights are vectorized row-major over
/// `[d_out, d_in]`, so index `o * d_in + i` pairs `M[o, .]` with `a[i]`.
pub fn kronecker_check(
    spec: &ModelSpec,
    params: &ParamVector,
    input: &Tensor,
    label: usize,
    ordinal: usize,
    cap: usize,
) -> Result<KroneckerReport, CurvatureError> {
    single(input)?;
    let slot = slot(params, ordinal)?;
    if slot.kind != LayerKind::FullyConnected {
        return Err(CurvatureError::Domain(format!("layer {} is not fully connected", slot.layer)));
    }
    if slot.weight.len() > cap {
        return Err(CurvatureError::Cap {
            dim: slot.weight.len(),
            cap,
        });
    }
    let obj = ce_objective(spec, &params.layout);
    let batch = Batch {
        inputs: input.clone(),
        labels: vec![label],
    };
    let mut op = HessianOperator::new(&obj, &params.values, &batch)?;
    let block = hessian_block(&mut op, slot.weight.clone())?;
    let m = logit_hessian(spec, params, input, label, ordinal, cap)?.matrix;
    let a = layer_input(spec, params, input, ordinal)?;
    let av = DVector::from_column_slice(a.data());
    let kron = m.kronecker(&(&av * av.transpose()));
    let residual = (&block - &kron).norm() / (1.0 + block.norm());
    let lambda_max_block = *symmetric_eigenvalues(&block).last().unwrap_or(&0.0);
    let lambda_max_logit = *symmetric_eigenvalues(&m).last().unwrap_or(&0.0);
    let activation_norm_sq = a.sum_of_squares();
    Ok(KroneckerReport {
        ordinal,
        residual,
        lambda_max_block,
        lambda_max_logit,
        activation_norm_sq,
        eigen_identity_error: (lambda_max_block - (lambda_max_logit * activation_norm_sq).max(0.0)).abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub layer: usize,
    pub ordinal: usize,
    pub kind: LayerKind,
    pub batch_size: usize,
    /// Top eigenvalue of the batch-loss Hessian restricted to the weights.
    pub lambda_max: f64,
    pub logit_lambda_max: Vec<f64>,
    pub alpha: f64,
    /// Squared Euclidean (FC) or Frobenius (conv) norm of each layer input.
    pub activation_norms_sq: Vec<f64>,
    /// `alpha / B * sum |a|^2`.
    pub bound: f64,
    pub residual: f64,
    /// Squared Frobenius norms of the unfolded (im2col) inputs. Equal to
    /// `activation_norms_sq` for FC layers.
    pub unfolded_norms_sq: Vec<f64>,
    pub unfolded_bound: f64,
    pub unfolded_residual: f64,
    /// Slack allowed on `residual` when judging the bound.
    pub tolerance: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.residual >= -self.tolerance
    }
}

fn unfolded_norm_sq(a: &Tensor, slot: &LayerSlot) -> f64 {
    if slot.kind == LayerKind::FullyConnected {
        return a.sum_of_squares();
    }
    let [c, h, w] = slot.input_shape[..] else {
        return a.sum_of_squares();
    };
    let [ho, wo] = slot.output_shape[1..] else {
        return a.sum_of_squares();
    };
    let (k1, k2) = (slot.weight_shape[2], slot.weight_shape[3]);
    let (s, pad) = (slot.stride, slot.padding);
    let x = a.data();
    let mut total = 0.0;
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k1 {
                    for kx in 0..k2 {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            let v = x[(ci * h + iy as usize) * w + ix as usize];
                            total += v * v;
                        }
                    }
                }
            }
        }
    }
    total
}

/// Checks `lambda_max(H_W) <= alpha / B * sum_i |a_i|^2` for the weights of
/// parameterized layer `ordinal` under the batch-mean cross-entropy, with
/// `alpha = max_i lambda_max(M_i)` over per-sample output Hessians.
pub fn activation_bound_report(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    ordinal: usize,
    cap: usize,
) -> Result<BoundReport, CurvatureError> {
    let slot = slot(params, ordinal)?.clone();
    if slot.weight.len() > cap {
        return Err(CurvatureError::Cap {
            dim: slot.weight.len(),
            cap,
        });
    }
    let b = batch.len();
    if b == 0 {
        return Err(CurvatureError::Autodiff(AutodiffError::EmptyBatch));
    }
    let obj = ce_objective(spec, &params.layout);
    let mut op = HessianOperator::new(&obj, &params.values, batch)?;
    let block = hessian_block(&mut op, slot.weight.clone())?;
    let lambda_max = *symmetric_eigenvalues(&block).last().unwrap_or(&0.0);

    let inputs = layer_input(spec, params, &batch.inputs, ordinal)?;
    let mut logit_lambda_max = Vec::with_capacity(b);
    let mut activation_norms_sq = Vec::with_capacity(b);
    let mut unfolded_norms_sq = Vec::with_capacity(b);
    for i in 0..b {
        let x = batch.inputs.slice_leading(i, i + 1);
        let m = logit_hessian(spec, params, &x, batch.labels[i], ordinal, cap)?;
        logit_lambda_max.push(*symmetric_eigenvalues(&m.matrix).last().unwrap_or(&0.0));
        let a = inputs.slice_leading(i, i + 1);
        activation_norms_sq.push(a.sum_of_squares());
        unfolded_norms_sq.push(unfolded_norm_sq(&a, &slot));
    }
    let alpha = logit_lambda_max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bound = alpha / b as f64 * activation_norms_sq.iter().sum::<f64>();
    let unfolded_bound = alpha / b as f64 * unfolded_norms_sq.iter().sum::<f64>();
    Ok(BoundReport {
        layer: slot.layer,
        ordinal,
        kind: slot.kind,
        batch_size: b,
        lambda_max,
        logit_lambda_max,
        alpha,
        activation_norms_sq,
        bound,
        residual: bound - lambda_max,
        unfolded_norms_sq,
        unfolded_bound,
        unfolded_residual: unfolded_bound - lambda_max,
        tolerance: match slot.kind {
            LayerKind::FullyConnected => 1e-8,
            LayerKind::Conv2d => 1e-4,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureOptions {
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default = "d_probes")]
    pub probes: usize,
    /// Dense Hessian, Gershgorin and bound reports run only up to this
    /// parameter count.
    #[serde(default = "d_cap")]
    pub dense_cap: usize,
    /// Number of leading samples used for the activation bound reports;
    /// zero disables them.
    #[serde(default = "d_bound_samples")]
    pub bound_samples: usize,
}

fn d_top_k() -> usize {
    3
}
fn d_max_iters() -> usize {
    1000
}
fn d_tol() -> f64 {
    1e-10
}
fn d_probes() -> usize {
    100
}
fn d_cap() -> usize {
    DEFAULT_DENSE_CAP
}
fn d_bound_samples() -> usize {
    4
}

impl Default for CurvatureOptions {
    fn default() -> Self {
        CurvatureOptions {
            top_k: d_top_k(),
            max_iters: d_max_iters(),
            tol: d_tol(),
            probes: d_probes(),
            dense_cap: d_cap(),
            bound_samples: d_bound_samples(),
        }
    }
}

/// Dense-oracle quantities, present when the model fits under the cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSummary {
    pub top_eigenvalue: f64,
    pub min_eigenvalue: f64,
    pub trace: f64,
    pub asymmetry: f64,
    pub gershgorin: GershgorinReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub dim: usize,
    pub loss: f64,
    /// From deflated power iteration, descending.
    pub top_eigenvalues: Vec<f64>,
    /// Set when the dominant-magnitude eigenvalue is negative.
    pub negative_dominant: bool,
    pub trace: TraceEstimate,
    pub dense: Option<DenseSummary>,
    pub bounds: Vec<BoundReport>,
}

/// Curvature of the batch-mean cross-entropy at `params`.
pub fn curvature_report(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    opts: &CurvatureOptions,
    rng: &mut Rng,
) -> Result<CurvatureReport, CurvatureError> {
    let obj = ce_objective(spec, &params.layout);
    let mut op = HessianOperator::new(&obj, &params.values, batch)?;
    let d = op.dim();
    let top = power_iteration_top(&mut op, opts.max_iters, opts.tol, &mut rng.child(0))?;
    let k = opts.top_k.min(d);
    let top_eigenvalues = topk_eigenvalues(&mut op, k, opts.max_iters, opts.tol, &mut rng.child(1))?
        .into_iter()
        .map(|p| p.value)
        .collect();
    let trace = hutchinson_trace(&mut op, opts.probes.max(2), &mut rng.child(2))?;
    let mut dense = None;
    let mut bounds = Vec::new();
    if d <= opts.dense_cap {
        let raw = hessian_columns(&mut op, 0..d, 0..d)?;
        let (h, asymmetry) = symmetrize(raw);
        let gershgorin = gershgorin_report(&h, &layer_blocks(&params.layout));
        dense = Some(DenseSummary {
            top_eigenvalue: *gershgorin.eigenvalues.last().unwrap_or(&0.0),
            min_eigenvalue: *gershgorin.eigenvalues.first().unwrap_or(&0.0),
            trace: h.trace(),
            asymmetry,
            gershgorin,
        });
        let n = opts.bound_samples.min(batch.len());
        if n > 0 {
            let sub = Batch {
                inputs: batch.inputs.slice_leading(0, n),
                labels: batch.labels[..n].to_vec(),
            };
            for ordinal in 1..params.layout.slots.len() {
                bounds.push(activation_bound_report(spec, params, &sub, ordinal, opts.dense_cap)?);
            }
        }
    }
    Ok(CurvatureReport {
        dim: d,
        loss: op.loss(),
        top_eigenvalues,
        negative_dominant: top.value < 0.0,
        trace,
        dense,
        bounds,
    })
}
