//! Max-margin label-space metric learning.
//!
//! The metric `Q` is learned by a cutting-plane loop over a relaxed
//! constraint set. Each constraint compares the true label vector of a
//! training sample against a violator `y ∈ [0,1]^q` found by a box-constrained
//! convex quadratic oracle. The restricted problem over the current cuts is
//! solved with a primal log-barrier method in the packed (`svec`) coordinates
//! of `Q`, so the slack variables never need to be handled separately by the
//! caller.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoders::EncodingMatrix;
use crate::error::{Error, Result};
use crate::linalg::{fix_column_signs, sym_eigen_desc, symmetrize};
use crate::linear_models::{predict_proba, BinaryClassifier, RidgeMap};

/// Smallest eigenvalue accepted as positive semidefinite.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Symmetric positive-semidefinite q×q label metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricQ(DMatrix<f64>);

impl MetricQ {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() || q.nrows() == 0 {
            return Err(Error::dim("metric must be a non-empty square matrix"));
        }
        let scale = q.amax().max(1.0);
        if (&q - q.transpose()).amax() > 1e-10 * scale {
            return Err(Error::arg("metric is not symmetric"));
        }
        let (values, _) = sym_eigen_desc(&q)?;
        let min = values[values.len() - 1];
        if min < -PSD_TOLERANCE {
            return Err(Error::NonPsd { min_eigenvalue: min });
        }
        Ok(Self(q))
    }

    pub fn zeros(q: usize) -> Self {
        Self(DMatrix::zeros(q, q))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let (values, _) = sym_eigen_desc(&self.0)?;
        Ok(values[values.len() - 1])
    }

    /// `aᵀQa`.
    pub fn quad(&self, a: &DVector<f64>) -> f64 {
        a.dot(&(&self.0 * a))
    }
}

/// Per-sample data consumed by the separation oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginSample {
    /// Regressed label vector `Pᵀx`.
    pub phi_base: DVector<f64>,
    pub y_true: DVector<f64>,
    /// `(log P(y_j = 0 | x), log P(y_j = 1 | x))` per label.
    pub log_probs: Vec<(f64, f64)>,
}

impl MarginSample {
    pub fn new(phi_base: DVector<f64>, y_true: DVector<f64>, log_probs: Vec<(f64, f64)>) -> Result<Self> {
        let q = phi_base.len();
        if y_true.len() != q || log_probs.len() != q {
            return Err(Error::dim("phi, labels and log-probabilities differ in length"));
        }
        if y_true.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::arg("true label vector must be binary"));
        }
        if log_probs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::arg("log-probabilities must be finite"));
        }
        Ok(Self {
            phi_base,
            y_true,
            log_probs,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.phi_base.len()
    }
}

/// One cutting-plane constraint in the affine form
/// `⟨coefficients, svec(Q)⟩ + offset ≤ ξ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cut {
    pub sample_index: usize,
    pub y_violator: DVector<f64>,
    pub coefficients: DVector<f64>,
    pub offset: f64,
}

impl Cut {
    pub fn new(sample_index: usize, s: &MarginSample, y_violator: DVector<f64>) -> Result<Self> {
        let q = s.n_labels();
        if y_violator.len() != q {
            return Err(Error::dim("violator length differs from label count"));
        }
        if y_violator.iter().any(|&v| !(-1e-12..=1.0 + 1e-12).contains(&v)) {
            return Err(Error::arg("violator lies outside the unit box"));
        }
        let a = &s.phi_base - &s.y_true;
        let b = &s.phi_base - &y_violator;
        let diff = &a * a.transpose() - &b * b.transpose();
        let offset = relaxed_hamming(&s.y_true, &y_violator) + interpolated_log_prob(s, &y_violator)
            - interpolated_log_prob(s, &s.y_true);
        Ok(Self {
            sample_index,
            y_violator,
            coefficients: svec(&diff),
            offset,
        })
    }

    /// Constraint value at a given metric, before subtracting the slack.
    pub fn value(&self, q: &MetricQ) -> f64 {
        self.coefficients.dot(&svec(q.matrix())) + self.offset
    }
}

/// Result of a restricted master solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterSolution {
    pub metric: MetricQ,
    pub slacks: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// False when the Newton iteration cap was reached first.
    pub converged: bool,
}

/// Packs a symmetric matrix into its lower triangle, column by column, with
/// off-diagonal entries scaled by √2 so that `svec(A)·svec(B) = ⟨A, B⟩`.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let q = m.nrows();
    let mut out = Vec::with_capacity(q * (q + 1) / 2);
    for j in 0..q {
        out.push(m[(j, j)]);
        for i in j + 1..q {
            out.push(std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]));
        }
    }
    DVector::from_vec(out)
}

pub fn smat(v: &DVector<f64>, q: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(q, q);
    let mut k = 0;
    for j in 0..q {
        m[(j, j)] = v[k];
        k += 1;
        for i in j + 1..q {
            let x = v[k] / std::f64::consts::SQRT_2;
            m[(i, j)] = x;
            m[(j, i)] = x;
            k += 1;
        }
    }
    m
}

/// `Pᵀx − y`.
pub fn build_phi(p: &RidgeMap, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let base = p.apply(x)?;
    if base.len() != y.len() {
        return Err(Error::dim(format!(
            "map has {} outputs, label vector has length {}",
            base.len(),
            y.len()
        )));
    }
    Ok(base - y)
}

/// `Σ_j |y_true_j − y_j|`.
pub fn relaxed_hamming(y_true: &DVector<f64>, y: &DVector<f64>) -> f64 {
    y_true.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum()
}

/// Label log-probability linearly interpolated between the per-label
/// endpoints.
pub fn interpolated_log_prob(s: &MarginSample, y: &DVector<f64>) -> f64 {
    s.log_probs
        .iter()
        .zip(y.iter())
        .map(|(&(l0, l1), &yj)| (1.0 - yj) * l0 + yj * l1)
        .sum()
}

/// Oracle objective `(m−y)ᵀQ(m−y) − log P̃(y) − Δ̃(y_true, y)`.
pub fn oracle_objective(q: &MetricQ, s: &MarginSample, y: &DVector<f64>) -> f64 {
    let phi = &s.phi_base - y;
    q.quad(&phi) - interpolated_log_prob(s, y) - relaxed_hamming(&s.y_true, y)
}

/// Gradient of the oracle objective on the open box.
fn oracle_gradient(q: &MetricQ, s: &MarginSample, y: &DVector<f64>) -> DVector<f64> {
    let phi = &s.phi_base - y;
    let mut g = q.matrix() * phi * -2.0;
    for j in 0..y.len() {
        let (l0, l1) = s.log_probs[j];
        g[j] += -(l1 - l0) + (2.0 * s.y_true[j] - 1.0);
    }
    g
}

fn project_box(y: &mut DVector<f64>) {
    y.apply(|v| *v = v.clamp(0.0, 1.0));
}

const ORACLE_PG_TOL: f64 = 1e-6;
const ORACLE_MAX_ITER: usize = 1000;

/// Approximate minimizer of the oracle objective over `[0,1]^q`, and the
/// constraint violation `f(y_true) − f(y_star)` at zero slack.
pub fn separation_oracle(q: &MetricQ, s: &MarginSample) -> Result<(DVector<f64>, f64)> {
    let n = s.n_labels();
    if q.dim() != n {
        return Err(Error::dim("metric and sample differ in label count"));
    }
    let min_eig = q.min_eigenvalue()?;
    if min_eig < -PSD_TOLERANCE {
        return Err(Error::NonPsd {
            min_eigenvalue: min_eig,
        });
    }

    let mut y = s.y_true.map(|v| if v == 1.0 { 0.25 } else { 0.75 });
    let mut fy = oracle_objective(q, s, &y);
    let mut step = 1.0;
    for _ in 0..ORACLE_MAX_ITER {
        let g = oracle_gradient(q, s, &y);
        let mut probe = &y - &g;
        project_box(&mut probe);
        if (&probe - &y).norm() <= ORACLE_PG_TOL {
            break;
        }
        loop {
            let mut cand = &y - &g * step;
            project_box(&mut cand);
            let d = &cand - &y;
            let fc = oracle_objective(q, s, &cand);
            if fc <= fy + g.dot(&d) + d.norm_squared() / (2.0 * step) || step < 1e-14 {
                y = cand;
                fy = fc;
                break;
            }
            step *= 0.5;
        }
        step *= 2.0;
    }
    polish_free_coordinates(q, s, &mut y);

    let violation = oracle_objective(q, s, &s.y_true) - oracle_objective(q, s, &y);
    Ok((y, violation))
}

/// Newton step on the coordinates strictly inside the box, accepted only if it
/// stays feasible and lowers the objective.
fn polish_free_coordinates(q: &MetricQ, s: &MarginSample, y: &mut DVector<f64>) {
    let free: Vec<usize> = (0..y.len()).filter(|&j| y[j] > 1e-12 && y[j] < 1.0 - 1e-12).collect();
    if free.is_empty() {
        return;
    }
    let g = oracle_gradient(q, s, y);
    let h = DMatrix::from_fn(free.len(), free.len(), |a, b| 2.0 * q.matrix()[(free[a], free[b])]);
    let rhs = DVector::from_iterator(free.len(), free.iter().map(|&j| -g[j]));
    let Some(step) = h.cholesky().map(|c| c.solve(&rhs)) else {
        return;
    };
    let mut cand = y.clone();
    for (k, &j) in free.iter().enumerate() {
        cand[j] += step[k];
    }
    project_box(&mut cand);
    if oracle_objective(q, s, &cand) < oracle_objective(q, s, y) {
        *y = cand;
    }
}

/// Frobenius-nearest PSD matrix: negative eigenvalues are clipped to zero.
pub fn psd_project(s: &DMatrix<f64>) -> Result<MetricQ> {
    if s.nrows() != s.ncols() {
        return Err(Error::dim("projection needs a square matrix"));
    }
    if (s - s.transpose()).amax() > 1e-8 * s.amax().max(1.0) {
        return Err(Error::arg("matrix is not symmetric"));
    }
    let (values, vectors) = sym_eigen_desc(s)?;
    let clipped = values.map(|v| v.max(0.0));
    let m = &vectors * DMatrix::from_diagonal(&clipped) * vectors.transpose();
    Ok(MetricQ(symmetrize(&m)))
}

/// Settings of the barrier solver used for restricted master problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MasterOptions {
    /// Stop once the barrier duality-gap bound falls below
    /// `tol · max(1, |objective|)`.
    pub tol: f64,
    pub max_newton_steps: usize,
}

impl Default for MasterOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_newton_steps: 3000,
        }
    }
}

/// Minimizes `trace(Q)/2 + (C/n)·Σξ_i` subject to the cuts, `ξ ≥ 0` and
/// `Q ⪰ 0`.
pub fn solve_restricted_master(
    cuts: &[Cut],
    n_samples: usize,
    n_labels: usize,
    c: f64,
    options: &MasterOptions,
) -> Result<MasterSolution> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::arg(format!("C must be positive and finite, got {c}")));
    }
    if n_samples == 0 || n_labels == 0 {
        return Err(Error::arg("master problem needs n >= 1 and q >= 1"));
    }
    let m = n_labels * (n_labels + 1) / 2;
    for cut in cuts {
        if cut.sample_index >= n_samples {
            return Err(Error::arg(format!(
                "cut references sample {} of {n_samples}",
                cut.sample_index
            )));
        }
        if cut.coefficients.len() != m {
            return Err(Error::dim("cut does not match the label count"));
        }
    }
    if cuts.is_empty() {
        return Ok(MasterSolution {
            metric: MetricQ::zeros(n_labels),
            slacks: DVector::zeros(n_samples),
            objective: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    let weight = c / n_samples as f64;
    let barrier = Barrier::new(cuts, n_samples, n_labels, weight);
    let (x, iterations, converged) = barrier.solve(options)?;
    let metric = psd_project(&smat(&x, n_labels))?;
    let slacks = exact_slacks(cuts, &metric, n_samples);
    let objective = 0.5 * metric.trace() + weight * slacks.sum();
    Ok(MasterSolution {
        metric,
        slacks,
        objective,
        iterations,
        converged,
    })
}

/// `ξ_i = max(0, max over the cuts of sample i)`.
pub fn exact_slacks(cuts: &[Cut], q: &MetricQ, n_samples: usize) -> DVector<f64> {
    let x = svec(q.matrix());
    let mut slacks = DVector::zeros(n_samples);
    for cut in cuts {
        let v = cut.coefficients.dot(&x) + cut.offset;
        if v > slacks[cut.sample_index] {
            slacks[cut.sample_index] = v;
        }
    }
    slacks
}

/// Log-barrier formulation over `(svec(Q), ξ_active)`:
/// `t·(cᵀx + w·Σξ) − Σ log(ξ_i − g_c(x)) − Σ log ξ_i − log det Q`.
struct Barrier {
    q: usize,
    weight: f64,
    /// Cut coefficient rows (N×m).
    rows: DMatrix<f64>,
    offsets: DVector<f64>,
    /// Position of each cut's sample in the active-sample list.
    owner: Vec<usize>,
    n_active: usize,
    trace_coef: DVector<f64>,
}

struct BarrierState {
    x: DVector<f64>,
    xi: DVector<f64>,
}

impl Barrier {
    fn new(cuts: &[Cut], n_samples: usize, q: usize, weight: f64) -> Self {
        let m = q * (q + 1) / 2;
        let mut slot = vec![usize::MAX; n_samples];
        let mut n_active = 0;
        let mut owner = Vec::with_capacity(cuts.len());
        for cut in cuts {
            if slot[cut.sample_index] == usize::MAX {
                slot[cut.sample_index] = n_active;
                n_active += 1;
            }
            owner.push(slot[cut.sample_index]);
        }
        let rows = DMatrix::from_fn(cuts.len(), m, |r, k| cuts[r].coefficients[k]);
        let offsets = DVector::from_iterator(cuts.len(), cuts.iter().map(|c| c.offset));
        let trace_coef = svec(&DMatrix::identity(q, q)) * 0.5;
        Self {
            q,
            weight,
            rows,
            offsets,
            owner,
            n_active,
            trace_coef,
        }
    }

    fn n_terms(&self) -> f64 {
        (self.rows.nrows() + self.n_active + self.q) as f64
    }

    fn objective(&self, s: &BarrierState) -> f64 {
        self.trace_coef.dot(&s.x) + self.weight * s.xi.sum()
    }

    /// Constraint margins `ξ_i − g_c(x)`, or `None` outside the domain.
    fn margins(&self, s: &BarrierState) -> Option<DVector<f64>> {
        if s.xi.iter().any(|&v| !(v > 0.0)) {
            return None;
        }
        let g = &self.rows * &s.x + &self.offsets;
        let margins = DVector::from_iterator(g.len(), g.iter().enumerate().map(|(c, &gc)| s.xi[self.owner[c]] - gc));
        if margins.iter().all(|&v| v > 0.0) {
            Some(margins)
        } else {
            None
        }
    }

    fn value(&self, t: f64, s: &BarrierState) -> Option<f64> {
        let margins = self.margins(s)?;
        let chol = smat(&s.x, self.q).cholesky()?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let barrier = -margins.iter().map(|v| v.ln()).sum::<f64>() - s.xi.iter().map(|v| v.ln()).sum::<f64>() - log_det;
        let v = t * self.objective(s) + barrier;
        v.is_finite().then_some(v)
    }

    fn initial_state(&self) -> BarrierState {
        let x = svec(&DMatrix::identity(self.q, self.q));
        let g = &self.rows * &x + &self.offsets;
        let mut xi = DVector::<f64>::zeros(self.n_active);
        for (c, &gc) in g.iter().enumerate() {
            let o = self.owner[c];
            xi[o] = xi[o].max(gc);
        }
        xi.apply(|v| *v += 1.0);
        BarrierState { x, xi }
    }

    /// Gradient of the barrier terms alone, with the margins and `Q⁻¹` it used.
    #[allow(clippy::type_complexity)]
    fn barrier_gradient(&self, s: &BarrierState) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DMatrix<f64>)> {
        let margins = self
            .margins(s)
            .ok_or_else(|| Error::Singular("barrier iterate left the domain".into()))?;
        let qinv = smat(&s.x, self.q)
            .cholesky()
            .ok_or_else(|| Error::Singular("barrier metric lost definiteness".into()))?
            .inverse();
        let inv = margins.map(|v| 1.0 / v);
        let gx = self.rows.tr_mul(&inv) - svec(&qinv);
        let mut gxi = DVector::zeros(self.n_active);
        for (c, &v) in inv.iter().enumerate() {
            gxi[self.owner[c]] -= v;
        }
        for (i, xi) in s.xi.iter().enumerate() {
            gxi[i] -= 1.0 / xi;
        }
        Ok((gx, gxi, margins, qinv))
    }

    /// Barrier weight that best balances objective and barrier gradients at
    /// the starting point.
    fn initial_weight(&self, s: &BarrierState) -> Result<f64> {
        let (gx, gxi, _, _) = self.barrier_gradient(s)?;
        let cc = self.trace_coef.norm_squared() + self.weight * self.weight * self.n_active as f64;
        let cg = self.trace_coef.dot(&gx) + self.weight * gxi.sum();
        let t = -cg / cc;
        Ok(if t.is_finite() && t > 0.0 {
            t
        } else {
            self.n_terms() / self.objective(s).abs().max(1.0)
        })
    }

    /// Newton direction and squared decrement at barrier weight `t`.
    fn newton_step(&self, t: f64, s: &BarrierState) -> Result<(DVector<f64>, DVector<f64>, f64)> {
        let q = self.q;
        let m = q * (q + 1) / 2;
        let (bgx, bgxi, margins, qinv) = self.barrier_gradient(s)?;
        let inv = margins.map(|v| 1.0 / v);
        let inv2 = margins.map(|v| 1.0 / (v * v));
        let mut gx = &self.trace_coef * t + bgx;
        let gxi = bgxi.add_scalar(t * self.weight);
        let gx_full = gx.clone();

        // Hessian of −log det: Δ ↦ Q⁻¹ Δ Q⁻¹ in packed coordinates.
        let mut hxx = DMatrix::zeros(m, m);
        for k in 0..m {
            let mut e = DVector::zeros(m);
            e[k] = 1.0;
            let d = smat(&e, q);
            hxx.set_column(k, &svec(&(&qinv * d * &qinv)));
        }
        let mut scaled = self.rows.clone();
        for (r, mut row) in scaled.row_iter_mut().enumerate() {
            row *= inv[r];
        }
        hxx += scaled.tr_mul(&scaled);

        // Cross terms h_i = −Σ_c G_c / s_c² and diagonal D_i.
        let mut cross = DMatrix::zeros(m, self.n_active);
        let mut diag = s.xi.map(|v| 1.0 / (v * v));
        for (c, &w) in inv2.iter().enumerate() {
            let o = self.owner[c];
            let mut col = cross.column_mut(o);
            col.axpy(-w, &self.rows.row(c).transpose(), 1.0);
            diag[o] += w;
        }

        for i in 0..self.n_active {
            let h = cross.column(i).into_owned();
            hxx.ger(-1.0 / diag[i], &h, &h, 1.0);
            gx.axpy(-gxi[i] / diag[i], &h, 1.0);
        }
        let hxx = symmetrize(&hxx);
        let dx = match hxx.clone().cholesky() {
            Some(ch) => ch.solve(&(-&gx)),
            None => {
                let shift = 1e-12 * hxx.diagonal().amax().max(1.0);
                let mut reg = hxx;
                for k in 0..m {
                    reg[(k, k)] += shift;
                }
                reg.cholesky()
                    .ok_or_else(|| Error::Singular("barrier Newton system".into()))?
                    .solve(&(-&gx))
            }
        };
        let mut dxi = DVector::zeros(self.n_active);
        for i in 0..self.n_active {
            dxi[i] = (-gxi[i] - cross.column(i).dot(&dx)) / diag[i];
        }

        let decrement = -(gx_full.dot(&dx) + gxi.dot(&dxi));
        Ok((dx, dxi, decrement))
    }

    fn solve(&self, options: &MasterOptions) -> Result<(DVector<f64>, usize, bool)> {
        let mut s = self.initial_state();
        let n_terms = self.n_terms();
        let mut t = self.initial_weight(&s)?;
        let mu = 20.0;
        let mut steps = 0;
        loop {
            // centering
            loop {
                if steps >= options.max_newton_steps {
                    return Ok((s.x, steps, false));
                }
                let (dx, dxi, decrement) = self.newton_step(t, &s)?;
                steps += 1;
                let f0 = self
                    .value(t, &s)
                    .ok_or_else(|| Error::Singular("barrier value undefined".into()))?;
                // decrements below the round-off level of the barrier value carry no information
                if decrement / 2.0 <= 1e-10_f64.max(1e-13 * f0.abs()) {
                    break;
                }
                let mut alpha = 1.0;
                loop {
                    let cand = BarrierState {
                        x: &s.x + &dx * alpha,
                        xi: &s.xi + &dxi * alpha,
                    };
                    if let Some(fc) = self.value(t, &cand) {
                        if fc <= f0 - 0.25 * alpha * decrement {
                            s = cand;
                            break;
                        }
                    }
                    alpha *= 0.5;
                    if alpha < 1e-10 {
                        // round-off floor: the iterate is as central as it can get
                        let ok = n_terms / t <= 1e-6 * self.objective(&s).abs().max(1.0);
                        return Ok((s.x, steps, ok));
                    }
                }
            }
            if n_terms / t <= options.tol * self.objective(&s).abs().max(1.0) {
                return Ok((s.x, steps, true));
            }
            t *= mu;
        }
    }
}

/// Settings of [`learn_metric`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    pub c: f64,
    /// Minimum violation (beyond the current slack) for a new cut; `None`
    /// means `1e-3·q`.
    pub eps_violation: Option<f64>,
    pub max_rounds: usize,
    pub master: MasterOptions,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            c: 1e6,
            eps_violation: None,
            max_rounds: 100,
            master: MasterOptions::default(),
        }
    }
}

/// One row of the cutting-plane trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub cuts_added: usize,
    pub master_objective: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricFit {
    pub metric: MetricQ,
    pub trace: Vec<RoundRecord>,
    pub n_cuts: usize,
    /// Set when the round cap stopped the loop while cuts were still being added.
    pub round_cap_reached: bool,
    pub master_converged: bool,
}

/// Builds the oracle inputs for every row of `features`.
pub fn margin_samples(
    features: &DMatrix<f64>,
    labels: &DMatrix<f64>,
    p: &RidgeMap,
    classifiers: &[BinaryClassifier],
) -> Result<Vec<MarginSample>> {
    let q = labels.ncols();
    if classifiers.len() != q {
        return Err(Error::dim(format!("{} classifiers for {q} labels", classifiers.len())));
    }
    if p.map.ncols() != q || p.map.nrows() != features.ncols() || features.nrows() != labels.nrows() {
        return Err(Error::dim("features, labels and ridge map do not conform"));
    }
    let phi = features * &p.map;
    (0..features.nrows())
        .map(|i| {
            let x = features.row(i).transpose();
            let log_probs = classifiers
                .iter()
                .map(|c| predict_proba(c, &x).map(|(p0, p1)| (p0.ln(), p1.ln())))
                .collect::<Result<Vec<_>>>()?;
            MarginSample::new(phi.row(i).transpose(), labels.row(i).transpose(), log_probs)
        })
        .collect()
}

/// Cutting-plane metric learning on a training set.
pub fn learn_metric(
    train: &Dataset,
    p: &RidgeMap,
    classifiers: &[BinaryClassifier],
    options: &MetricOptions,
) -> Result<MetricFit> {
    let samples = margin_samples(train.features(), train.labels(), p, classifiers)?;
    learn_metric_from_samples(&samples, options)
}

pub fn learn_metric_from_samples(samples: &[MarginSample], options: &MetricOptions) -> Result<MetricFit> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::arg("no training samples"));
    }
    if !(options.c > 0.0) {
        return Err(Error::arg(format!("C must be > 0, got {}", options.c)));
    }
    let q = samples[0].n_labels();
    if samples.iter().any(|s| s.n_labels() != q) {
        return Err(Error::dim("samples differ in label count"));
    }
    let eps = options.eps_violation.unwrap_or(1e-3 * q as f64);

    let mut cuts: Vec<Cut> = Vec::new();
    let mut solution = solve_restricted_master(&cuts, n, q, options.c, &options.master)?;
    let mut trace = Vec::new();
    let mut master_converged = true;
    let mut pending = false;
    for round in 0..options.max_rounds {
        let found: Vec<(usize, DVector<f64>, f64)> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| separation_oracle(&solution.metric, s).map(|(y, v)| (i, y, v - solution.slacks[i])))
            .collect::<Result<_>>()?;
        let max_violation = found.iter().map(|f| f.2).fold(f64::NEG_INFINITY, f64::max);
        let mut added = 0;
        for (i, y, excess) in found {
            if excess > eps {
                cuts.push(Cut::new(i, &samples[i], y)?);
                added += 1;
            }
        }
        trace.push(RoundRecord {
            round,
            cuts_added: added,
            master_objective: solution.objective,
            max_violation,
        });
        log::debug!("round {round}: {added} cuts, objective {:.6e}", solution.objective);
        if added == 0 {
            pending = false;
            break;
        }
        solution = solve_restricted_master(&cuts, n, q, options.c, &options.master)?;
        master_converged &= solution.converged;
        pending = round + 1 == options.max_rounds;
    }
    if pending {
        log::warn!("cutting plane stopped at the round cap with cuts still being added");
    }
    Ok(MetricFit {
        metric: solution.metric,
        trace,
        n_cuts: cuts.len(),
        round_cap_reached: pending,
        master_converged,
    })
}

pub fn write_trace_csv(trace: &[RoundRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    for r in trace {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// `V = U·D^{1/2}` from the eigenpairs of `Q`, largest first, keeping `d`
/// columns.
pub fn metric_to_projections(q: &MetricQ, d: usize) -> Result<EncodingMatrix> {
    let n = q.dim();
    if d < 1 || d > n {
        return Err(Error::arg(format!("d must lie in 1..={n}, got {d}")));
    }
    let (values, vectors) = sym_eigen_desc(q.matrix())?;
    let mut v = DMatrix::from_fn(n, d, |i, k| vectors[(i, k)] * values[k].max(0.0).sqrt());
    fix_column_signs(&mut v);
    EncodingMatrix::new_allow_zero_columns(v, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_psd(rng: &mut ChaCha8Rng, q: usize, rank: usize) -> MetricQ {
        let b = DMatrix::from_fn(q, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
        MetricQ::new(symmetrize(&(&b * b.transpose()))).unwrap()
    }

    fn random_sample(rng: &mut ChaCha8Rng, q: usize) -> MarginSample {
        let phi = DVector::from_fn(q, |_, _| rng.random::<f64>() * 1.4 - 0.2);
        let y = DVector::from_fn(q, |_, _| f64::from(rng.random::<bool>()));
        let lp = (0..q)
            .map(|_| {
                let p1: f64 = rng.random_range(0.05..0.95);
                ((1.0 - p1).ln(), p1.ln())
            })
            .collect();
        MarginSample::new(phi, y, lp).unwrap()
    }

    fn uniform_sample(phi: &[f64], y: &[f64]) -> MarginSample {
        let q = phi.len();
        MarginSample::new(
            DVector::from_column_slice(phi),
            DVector::from_column_slice(y),
            vec![(0.5f64.ln(), 0.5f64.ln()); q],
        )
        .unwrap()
    }

    /// Oracle objective written out term by term.
    fn objective_by_hand(q: &DMatrix<f64>, s: &MarginSample, y: &[f64]) -> f64 {
        let n = y.len();
        let mut quad = 0.0;
        for a in 0..n {
            for b in 0..n {
                quad += (s.phi_base[a] - y[a]) * q[(a, b)] * (s.phi_base[b] - y[b]);
            }
        }
        let mut lin = 0.0;
        for j in 0..n {
            lin += (1.0 - y[j]) * s.log_probs[j].0 + y[j] * s.log_probs[j].1;
            lin += (s.y_true[j] - y[j]).abs();
        }
        quad - lin
    }

    fn binary_minimum(q: &DMatrix<f64>, s: &MarginSample) -> f64 {
        let n = s.n_labels();
        (0..1usize << n)
            .map(|mask| {
                let y: Vec<f64> = (0..n).map(|j| ((mask >> j) & 1) as f64).collect();
                objective_by_hand(q, s, &y)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn phi_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_vec(vec![1.0, 0.0, 0.5]);
        let zero = RidgeMap {
            map: DMatrix::zeros(4, 3),
            ridge: 0.0,
        };
        assert_eq!(build_phi(&zero, &x, &y).unwrap(), -&y);

        let p = RidgeMap {
            map: DMatrix::from_fn(4, 3, |_, _| rng.sample::<f64, _>(StandardNormal)),
            ridge: 1.0,
        };
        let px = p.map.tr_mul(&x);
        assert!(build_phi(&p, &x, &px).unwrap().amax() == 0.0);

        let phi = build_phi(&p, &x, &y).unwrap();
        for j in 0..3 {
            let direct: f64 = (0..4).map(|r| p.map[(r, j)] * x[r]).sum::<f64>() - y[j];
            assert!((phi[j] - direct).abs() <= 1e-14);
        }
        assert!(matches!(
            build_phi(&p, &x, &DVector::zeros(2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn hamming_and_log_prob_examples() {
        let v = |s: &[f64]| DVector::from_column_slice(s);
        assert_eq!(relaxed_hamming(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])), 0.0);
        assert_eq!(relaxed_hamming(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])), 2.0);
        assert_eq!(relaxed_hamming(&v(&[1.0, 0.0]), &v(&[0.5, 0.5])), 1.0);

        let s = MarginSample::new(v(&[0.0]), v(&[1.0]), vec![(0.2f64.ln(), 0.8f64.ln())]).unwrap();
        assert!((interpolated_log_prob(&s, &v(&[0.25])) - (-1.2629)).abs() < 1e-4);
        assert_eq!(interpolated_log_prob(&s, &v(&[1.0])), 0.8f64.ln());

        let u = uniform_sample(&[0.1, 0.2, 0.3], &[0.0, 1.0, 1.0]);
        let expected = 3.0 * 0.5f64.ln();
        assert!((interpolated_log_prob(&u, &v(&[0.3, 0.9, 0.0])) - expected).abs() < 1e-14);
    }

    #[test]
    fn oracle_flips_everything_under_zero_metric() {
        let s = uniform_sample(&[0.2, 0.7, 0.4], &[1.0, 0.0, 1.0]);
        let (y, violation) = separation_oracle(&MetricQ::zeros(3), &s).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 1.0, 0.0]);
        assert!((violation - 3.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_beats_fine_grid_for_two_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let q = random_psd(&mut rng, 2, 2);
            let s = random_sample(&mut rng, 2);
            let (y, _) = separation_oracle(&q, &s).unwrap();
            let mut best = f64::INFINITY;
            for a in 0..=100 {
                for b in 0..=100 {
                    let g = [a as f64 / 100.0, b as f64 / 100.0];
                    best = best.min(objective_by_hand(q.matrix(), &s, &g));
                }
            }
            assert!(oracle_objective(&q, &s, &y) <= best + 1e-4);
        }
    }

    #[test]
    fn oracle_dominates_binary_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for q_dim in 2..=8 {
            for _ in 0..5 {
                let rank = rng.random_range(1..=q_dim);
                let q = random_psd(&mut rng, q_dim, rank);
                let s = random_sample(&mut rng, q_dim);
                let (y, violation) = separation_oracle(&q, &s).unwrap();
                assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
                let f = oracle_objective(&q, &s, &y);
                assert!((f - objective_by_hand(q.matrix(), &s, y.as_slice())).abs() < 1e-9);
                assert!(f <= binary_minimum(q.matrix(), &s) + 1e-6);
                assert!(violation >= -1e-12);
            }
        }
    }

    #[test]
    fn oracle_rejects_indefinite_metric() {
        let s = uniform_sample(&[0.0, 0.0], &[0.0, 1.0]);
        let bad = MetricQ(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]));
        assert!(matches!(separation_oracle(&bad, &s), Err(Error::NonPsd { .. })));
    }

    #[test]
    fn psd_projection_examples() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!((psd_project(&i3).unwrap().matrix() - &i3).amax() < 1e-12);
        let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -1.0]);
        let p = psd_project(&d).unwrap();
        assert!((p.matrix() - DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.0])).amax() < 1e-12);
    }

    #[test]
    fn psd_projection_is_frobenius_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = symmetrize(&a);
        let p = psd_project(&s).unwrap();
        let dist = (p.matrix() - &s).norm();
        for _ in 0..1000 {
            let rank = rng.random_range(1..=4);
            let m = random_psd(&mut rng, 4, rank);
            assert!(dist <= (m.matrix() - &s).norm() + 1e-12);
        }
    }

    #[test]
    fn svec_round_trip_and_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = symmetrize(&DMatrix::from_fn(5, 5, |_, _| rng.sample::<f64, _>(StandardNormal)));
        let b = symmetrize(&DMatrix::from_fn(5, 5, |_, _| rng.sample::<f64, _>(StandardNormal)));
        assert!((smat(&svec(&a), 5) - &a).amax() < 1e-14);
        assert!((svec(&a).dot(&svec(&b)) - a.component_mul(&b).sum()).abs() < 1e-12);
    }

    #[test]
    fn empty_master_is_zero() {
        let sol = solve_restricted_master(&[], 4, 3, 1e6, &MasterOptions::default()).unwrap();
        assert_eq!(sol.metric.matrix(), &DMatrix::zeros(3, 3));
        assert_eq!(sol.slacks, DVector::zeros(4));
        assert_eq!(sol.objective, 0.0);
    }

    fn fractional_cut() -> (Vec<Cut>, MarginSample) {
        let s = MarginSample::new(
            DVector::from_vec(vec![0.8, 0.3]),
            DVector::from_vec(vec![1.0, 0.0]),
            vec![(0.3f64.ln(), 0.7f64.ln()), (0.6f64.ln(), 0.4f64.ln())],
        )
        .unwrap();
        let cut = Cut::new(0, &s, DVector::from_vec(vec![0.2, 0.9])).unwrap();
        (vec![cut], s)
    }

    #[test]
    fn tiny_slack_cost_drives_metric_to_zero() {
        let (cuts, _) = fractional_cut();
        let sol = solve_restricted_master(&cuts, 1, 2, 1e-12, &MasterOptions::default()).unwrap();
        assert!(sol.metric.matrix().amax() <= 1e-6, "{}", sol.metric.matrix());
    }

    /// Brute-force search over PSD 2×2 matrices [[a,b],[b,c]]: a coarse grid,
    /// then a second grid zoomed around the coarse winner.
    fn grid_master_objective(cut: &Cut, c: f64, range: f64) -> f64 {
        let eval = |a: f64, b: f64, cc: f64| {
            if a < 0.0 || cc < 0.0 || b * b > a * cc {
                return f64::INFINITY;
            }
            let g = cut.coefficients[0] * a
                + cut.coefficients[1] * std::f64::consts::SQRT_2 * b
                + cut.coefficients[2] * cc
                + cut.offset;
            0.5 * (a + cc) + c * g.max(0.0)
        };
        let search = |center: (f64, f64, f64), half: f64| {
            let mut best = (f64::INFINITY, center);
            let steps = 200;
            for i in 0..steps {
                let a = center.0 - half + 2.0 * half * i as f64 / (steps - 1) as f64;
                for j in 0..steps {
                    let b = center.1 - half + 2.0 * half * j as f64 / (steps - 1) as f64;
                    for k in 0..steps {
                        let cc = center.2 - half + 2.0 * half * k as f64 / (steps - 1) as f64;
                        let v = eval(a, b, cc);
                        if v < best.0 {
                            best = (v, (a, b, cc));
                        }
                    }
                }
            }
            best
        };
        let coarse = search((range, 0.0, range), range);
        search(coarse.1, 4.0 * range / 199.0).0
    }

    #[test]
    fn single_cut_matches_grid_search() {
        let (cuts, _) = fractional_cut();
        for c in [0.5, 1.0, 10.0] {
            let sol = solve_restricted_master(&cuts, 1, 2, c, &MasterOptions::default()).unwrap();
            let grid = grid_master_objective(&cuts[0], c, 4.0);
            assert!(
                (sol.objective - grid).abs() <= 1e-3 * grid.abs(),
                "C={c}: solver {} grid {grid}",
                sol.objective
            );
            assert!(sol.objective <= grid + 1e-9);
            let recomputed = 0.5 * sol.metric.trace() + c * sol.slacks.sum();
            assert!((sol.objective - recomputed).abs() <= 1e-8);
        }
    }

    #[test]
    fn zero_rounds_give_zero_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples: Vec<_> = (0..10).map(|_| random_sample(&mut rng, 3)).collect();
        let opts = MetricOptions {
            max_rounds: 0,
            ..MetricOptions::default()
        };
        let fit = learn_metric_from_samples(&samples, &opts).unwrap();
        assert_eq!(fit.metric.matrix(), &DMatrix::zeros(3, 3));
        assert!(fit.trace.is_empty());
    }

    #[test]
    fn confident_classifiers_need_no_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = 4;
        let samples: Vec<_> = (0..30)
            .map(|_| {
                let y = DVector::from_fn(q, |_, _| f64::from(rng.random::<bool>()));
                let phi = DVector::from_fn(q, |_, _| rng.random::<f64>());
                let hi = (1.0 - 1e-6f64).ln();
                let lo = 1e-6f64.ln();
                let lp = y.iter().map(|&v| if v == 1.0 { (lo, hi) } else { (hi, lo) }).collect();
                MarginSample::new(phi, y, lp).unwrap()
            })
            .collect();
        // Every discrete constraint already holds at Q = 0.
        let zero = DMatrix::zeros(q, q);
        for s in &samples {
            let at_truth = objective_by_hand(&zero, s, s.y_true.as_slice());
            assert!(at_truth <= binary_minimum(&zero, s) + 1e-12);
        }
        let fit = learn_metric_from_samples(&samples, &MetricOptions::default()).unwrap();
        assert!(fit.trace.iter().skip(1).all(|r| r.cuts_added == 0));
        assert!(fit.metric.trace() <= 1e-3);
    }

    fn coupled_samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<MarginSample> {
        (0..n)
            .map(|_| {
                let on = rng.random::<bool>();
                let v = f64::from(on);
                let m = 0.5 + (v - 0.5) * 0.6 + 0.1 * rng.sample::<f64, _>(StandardNormal);
                uniform_sample(&[m, m], &[v, v])
            })
            .collect()
    }

    #[test]
    fn dependent_labels_get_coupled() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples = coupled_samples(&mut rng, 40);
        let fit = learn_metric_from_samples(&samples, &MetricOptions::default()).unwrap();
        let q = fit.metric.matrix();
        assert!(q[(0, 1)].abs() > 0.01, "{q}");

        // Dropping the coupling raises the slack needed on the violators the
        // oracle found under a diagonal metric.
        let diag = MetricQ::new(DMatrix::from_diagonal(&q.diagonal())).unwrap();
        let cuts: Vec<Cut> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| Cut::new(i, s, separation_oracle(&diag, s).unwrap().0).unwrap())
            .collect();
        let w = 1e6 / samples.len() as f64;
        let total = |m: &MetricQ| 0.5 * m.trace() + w * exact_slacks(&cuts, m, samples.len()).sum();
        assert!(total(&diag) > total(&fit.metric) * (1.0 + 1e-3));
    }

    #[test]
    fn cutting_plane_objective_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<_> = (0..25).map(|_| random_sample(&mut rng, 4)).collect();
        let fit = learn_metric_from_samples(&samples, &MetricOptions::default()).unwrap();
        for w in fit.trace.windows(2) {
            let tol = 1e-4 * w[0].master_objective.abs().max(1.0);
            assert!(w[1].master_objective >= w[0].master_objective - tol);
        }
        assert!(fit.metric.min_eigenvalue().unwrap() >= -PSD_TOLERANCE);
        assert!(!fit.round_cap_reached);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let samples = coupled_samples(&mut rng, 10);
        let fit = learn_metric_from_samples(&samples, &MetricOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&fit.trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("round,cuts_added,master_objective,max_violation"));
        assert_eq!(lines.count(), fit.trace.len());
    }

    #[test]
    fn projections_from_metric() {
        let v = metric_to_projections(&MetricQ::new(DMatrix::identity(4, 4)).unwrap(), 4).unwrap();
        assert!(v.includes_identity());
        let m = v.matrix();
        assert!((m * m.transpose() - DMatrix::<f64>::identity(4, 4)).amax() <= 1e-10);

        let u = DVector::from_vec(vec![0.5, -2.0, 1.0]);
        let q = MetricQ::new(&u * u.transpose()).unwrap();
        let v = metric_to_projections(&q, 1).unwrap();
        let col = v.matrix().column(0).into_owned();
        assert!((&col - &u).norm().min((&col + &u).norm()) <= 1e-10);
    }

    #[test]
    fn truncated_projections_match_best_rank_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for q_dim in 2..=8 {
            let q = random_psd(&mut rng, q_dim, q_dim);
            let d = q_dim / 2;
            let v = metric_to_projections(&q, d).unwrap();
            let approx = v.matrix() * v.matrix().transpose();
            // Independent route: the Eckart-Young error is the norm of the
            // discarded eigenvalues, taken from nalgebra's own solver.
            let mut eig: Vec<f64> = q.matrix().clone().symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            let tail = eig[d..].iter().map(|l| l * l).sum::<f64>().sqrt();
            assert!(((q.matrix() - approx).norm() - tail).abs() <= 1e-8);
        }
    }
}
