//! Decoders from predicted codewords back to binary label vectors.

use nalgebra::{DMatrix, DVector};

use crate::encoders::EncodingMatrix;
use crate::error::{Error, Result};
use crate::linear_models::VARIANCE_FLOOR;

/// Largest label count accepted by [`exhaustive_decode`].
pub const EXHAUSTIVE_MAX_LABELS: usize = 25;

/// Everything needed to score a candidate label vector for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeProblem {
    encoding: EncodingMatrix,
    codeword_pred: DVector<f64>,
    residual_variances: DVector<f64>,
    label_log_probs: Option<Vec<(f64, f64)>>,
    lambda: f64,
}

impl DecodeProblem {
    pub fn new(
        encoding: EncodingMatrix,
        codeword_pred: DVector<f64>,
        residual_variances: DVector<f64>,
        label_log_probs: Option<Vec<(f64, f64)>>,
        lambda: f64,
    ) -> Result<Self> {
        let d = encoding.n_projections();
        if codeword_pred.len() != d || residual_variances.len() != d {
            return Err(Error::dim(format!(
                "{d} projections but {} predictions and {} variances",
                codeword_pred.len(),
                residual_variances.len()
            )));
        }
        if residual_variances.iter().any(|&s| !(s >= VARIANCE_FLOOR)) {
            return Err(Error::arg("residual variances must be at least the variance floor"));
        }
        if label_log_probs.is_some() != encoding.includes_identity() {
            return Err(Error::arg(
                "label log-probabilities must be given exactly when the codeword includes the labels",
            ));
        }
        if let Some(lp) = &label_log_probs {
            if lp.len() != encoding.n_labels() {
                return Err(Error::dim("one log-probability pair is needed per label"));
            }
            if lp.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
                return Err(Error::arg("log-probabilities must be finite"));
            }
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::arg(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self {
            encoding,
            codeword_pred,
            residual_variances,
            label_log_probs,
            lambda,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.encoding.n_labels()
    }

    pub fn encoding(&self) -> &EncodingMatrix {
        &self.encoding
    }

    pub fn codeword_pred(&self) -> &DVector<f64> {
        &self.codeword_pred
    }

    pub fn residual_variances(&self) -> &DVector<f64> {
        &self.residual_variances
    }

    pub fn label_log_probs(&self) -> Option<&[(f64, f64)]> {
        self.label_log_probs.as_deref()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Per-label linear coefficient `λ·log(p0/p1)`, zero without classifiers.
    fn label_costs(&self) -> DVector<f64> {
        match &self.label_log_probs {
            Some(lp) => DVector::from_iterator(lp.len(), lp.iter().map(|(l0, l1)| self.lambda * (l0 - l1))),
            None => DVector::zeros(self.n_labels()),
        }
    }
}

/// `½ Σ_k (v_kᵀy − m̂_k)² / σ̂_k² + λ Σ_j y_j log(p̂_j0 / p̂_j1)`.
pub fn decode_objective(p: &DecodeProblem, y: &DVector<f64>) -> f64 {
    assert_eq!(y.len(), p.n_labels(), "label vector length");
    let residual = p.encoding.matrix().tr_mul(y) - &p.codeword_pred;
    let fit: f64 = residual
        .iter()
        .zip(p.residual_variances.iter())
        .map(|(r, s)| r * r / s)
        .sum();
    0.5 * fit + p.label_costs().dot(y)
}

fn bits(mask: usize, q: usize) -> DVector<f64> {
    // first label is the most significant bit, so ascending masks are
    // lexicographic order
    DVector::from_fn(q, |j, _| ((mask >> (q - 1 - j)) & 1) as f64)
}

/// Exact minimizer of [`decode_objective`] over `{0,1}^q`; ties go to the
/// lexicographically smallest vector.
pub fn exhaustive_decode(p: &DecodeProblem) -> Result<DVector<f64>> {
    let q = p.n_labels();
    if q > EXHAUSTIVE_MAX_LABELS {
        return Err(Error::Size {
            q,
            max: EXHAUSTIVE_MAX_LABELS,
        });
    }
    let v = p.encoding.matrix();
    let inv_var = p.residual_variances.map(|s| 1.0 / s);
    let costs = p.label_costs();
    let mut best = (f64::INFINITY, 0usize);
    let mut codeword = DVector::zeros(v.ncols());
    for mask in 0..1usize << q {
        codeword.copy_from(&(-&p.codeword_pred));
        let mut linear = 0.0;
        for j in 0..q {
            if (mask >> (q - 1 - j)) & 1 == 1 {
                codeword += v.row(j).transpose();
                linear += costs[j];
            }
        }
        let value = 0.5 * codeword.iter().zip(inv_var.iter()).map(|(r, w)| r * r * w).sum::<f64>() + linear;
        if value < best.0 {
            best = (value, mask);
        }
    }
    Ok(bits(best.1, q))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldResult {
    pub labels: DVector<f64>,
    pub beliefs: DVector<f64>,
    pub sweeps: usize,
    /// False when the sweep cap was reached first.
    pub converged: bool,
}

pub const MEANFIELD_MAX_SWEEPS: usize = 200;
pub const MEANFIELD_TOL: f64 = 1e-6;

/// Expected energy gap between `y_j = 1` and `y_j = 0` with every other label
/// drawn independently from its belief.
fn meanfield_gap(p: &DecodeProblem, beliefs: &DVector<f64>, j: usize, costs: &DVector<f64>) -> f64 {
    let v = p.encoding.matrix();
    let mut gap = costs[j];
    for k in 0..v.ncols() {
        let vkj = v[(j, k)];
        if vkj == 0.0 {
            continue;
        }
        let mean_others: f64 = (0..v.nrows()).filter(|&l| l != j).map(|l| v[(l, k)] * beliefs[l]).sum();
        gap += vkj * (mean_others - p.codeword_pred[k]) / p.residual_variances[k]
            + vkj * vkj / (2.0 * p.residual_variances[k]);
    }
    gap
}

fn sigmoid(z: f64) -> f64 {
    crate::linear_models::sigmoid(z)
}

/// Coordinate-wise mean-field relaxation of [`decode_objective`], thresholded
/// at 0.5.
pub fn meanfield_decode(p: &DecodeProblem, max_sweeps: usize, tol: f64) -> MeanFieldResult {
    let q = p.n_labels();
    let costs = p.label_costs();
    let mut beliefs = match &p.label_log_probs {
        Some(lp) => DVector::from_iterator(q, lp.iter().map(|(_, l1)| l1.exp())),
        None => DVector::from_element(q, 0.5),
    };
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut change = 0.0f64;
        for j in 0..q {
            let b = sigmoid(-meanfield_gap(p, &beliefs, j, &costs));
            change = change.max((b - beliefs[j]).abs());
            beliefs[j] = b;
        }
        if change < tol {
            converged = true;
            break;
        }
    }
    MeanFieldResult {
        labels: beliefs.map(|b| f64::from(b >= 0.5)),
        beliefs,
        sweeps,
        converged,
    }
}

/// Largest belief change that one more mean-field sweep would make.
pub fn meanfield_residual(p: &DecodeProblem, beliefs: &DVector<f64>) -> f64 {
    let costs = p.label_costs();
    let mut b = beliefs.clone();
    let mut change = 0.0f64;
    for j in 0..b.len() {
        let nb = sigmoid(-meanfield_gap(p, &b, j, &costs));
        change = change.max((nb - b[j]).abs());
        b[j] = nb;
    }
    change
}

fn check_codeword(v: &EncodingMatrix, z: &DVector<f64>) -> Result<()> {
    if z.len() != v.n_projections() {
        return Err(Error::dim(format!(
            "codeword has length {}, encoding has {} projections",
            z.len(),
            v.n_projections()
        )));
    }
    Ok(())
}

/// `round(V ẑ)` with ties at 0.5 going to 1.
pub fn pca_round_decode(v: &EncodingMatrix, codeword_pred: &DVector<f64>) -> Result<DVector<f64>> {
    if v.includes_identity() {
        return Err(Error::arg("rounding decoder expects a projection-only codeword"));
    }
    check_codeword(v, codeword_pred)?;
    Ok((v.matrix() * codeword_pred).map(|x| f64::from(x >= 0.5)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseRecovery {
    pub labels: DVector<f64>,
    /// Real-valued estimate before thresholding.
    pub estimate: DVector<f64>,
    pub iterations: usize,
}

pub const COSAMP_MAX_ITER: usize = 50;

/// Indices of the `k` largest-magnitude entries; ties keep the lower index.
fn top_k(values: &DVector<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Least squares restricted to the columns `support` of `a`, scattered back
/// into a full-length vector.
fn restricted_least_squares(a: &DMatrix<f64>, b: &DVector<f64>, support: &[usize]) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(a.ncols());
    if support.is_empty() {
        return Ok(out);
    }
    let sub = a.select_columns(support);
    let svd = sub.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1e-300);
    let sol = svd.solve(b, tol).map_err(|e| Error::Singular(e.to_string()))?;
    for (k, &j) in support.iter().enumerate() {
        out[j] = sol[k];
    }
    Ok(out)
}

/// CoSaMP on `Vᵀ y ≈ ẑ`, then thresholding of the estimate at 0.5.
pub fn cosamp_decode(
    v: &EncodingMatrix,
    codeword_pred: &DVector<f64>,
    sparsity: usize,
    max_iter: usize,
) -> Result<SparseRecovery> {
    check_codeword(v, codeword_pred)?;
    let q = v.n_labels();
    if sparsity == 0 || sparsity > q {
        return Err(Error::arg(format!("sparsity must lie in 1..={q}, got {sparsity}")));
    }
    let sensing = v.matrix().transpose();
    let mut estimate = DVector::zeros(q);
    let mut residual = codeword_pred.clone();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let proxy = v.matrix() * &residual;
        let mut merged = top_k(&proxy, (2 * sparsity).min(q));
        merged.extend((0..q).filter(|&j| estimate[j] != 0.0));
        merged.sort_unstable();
        merged.dedup();
        let full = restricted_least_squares(&sensing, codeword_pred, &merged)?;
        let keep = top_k(&full, sparsity);
        let mut next = DVector::zeros(q);
        for &j in &keep {
            next[j] = full[j];
        }
        let next_residual = codeword_pred - &sensing * &next;
        let stalled = (residual.norm() - next_residual.norm()).abs() < 1e-6;
        estimate = next;
        residual = next_residual;
        if stalled || residual.norm() < 1e-12 {
            break;
        }
    }
    Ok(SparseRecovery {
        labels: estimate.map(|x| f64::from(x >= 0.5)),
        estimate,
        iterations,
    })
}

pub const L1_MAX_ITER: usize = 2000;

/// `½ Σ_k (v_kᵀy − m̂_k)² + penalty·‖y‖₁`.
pub fn l1_objective(v: &EncodingMatrix, codeword_pred: &DVector<f64>, penalty: f64, y: &DVector<f64>) -> f64 {
    let r = v.matrix().tr_mul(y) - codeword_pred;
    0.5 * r.norm_squared() + penalty * y.lp_norm(1)
}

/// Proximal-gradient minimization of [`l1_objective`] followed by
/// thresholding at 0.5. Also returns the objective after every iteration.
pub fn l1_decode_traced(
    v: &EncodingMatrix,
    codeword_pred: &DVector<f64>,
    penalty: f64,
    max_iter: usize,
) -> Result<(SparseRecovery, Vec<f64>)> {
    check_codeword(v, codeword_pred)?;
    if !(penalty >= 0.0) {
        return Err(Error::arg(format!("l1 penalty must be >= 0, got {penalty}")));
    }
    let m = v.matrix();
    let gram = m * m.transpose();
    let lipschitz = gram.clone().symmetric_eigenvalues().max();
    let q = v.n_labels();
    let mut y = DVector::zeros(q);
    let mut trace = vec![l1_objective(v, codeword_pred, penalty, &y)];
    let mut iterations = 0;
    if lipschitz > 0.0 {
        let vz = m * codeword_pred;
        let shrink = penalty / lipschitz;
        while iterations < max_iter {
            iterations += 1;
            let grad = &gram * &y - &vz;
            y = (&y - grad / lipschitz).map(|x| x.signum() * (x.abs() - shrink).max(0.0));
            let f = l1_objective(v, codeword_pred, penalty, &y);
            let prev = *trace.last().expect("nonempty");
            trace.push(f);
            if (prev - f).abs() < 1e-12 * prev.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
    }
    Ok((
        SparseRecovery {
            labels: y.map(|x| f64::from(x >= 0.5)),
            estimate: y,
            iterations,
        },
        trace,
    ))
}

pub fn l1_decode(
    v: &EncodingMatrix,
    codeword_pred: &DVector<f64>,
    penalty: f64,
    max_iter: usize,
) -> Result<SparseRecovery> {
    l1_decode_traced(v, codeword_pred, penalty, max_iter).map(|(r, _)| r)
}
