//! Base models: closed-form ridge maps for codeword regression and
//! L2-penalized logistic classifiers for the original labels, with seeded
//! k-fold cross-validation of the penalty.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::EncodingMatrix;
use crate::error::{Error, Result};
use crate::linalg::{inf_norm, spd_solve};

/// Lower bound applied to every estimated residual variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Predicted probabilities are clipped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-6;

pub const DEFAULT_RIDGE_GRID: [f64; 10] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];
pub const DEFAULT_LOGISTIC_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2];
pub const DEFAULT_FOLDS: usize = 5;

/// Least-squares map `P = (XᵀX + ridge·I)⁻¹ XᵀY` from inputs to labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeMap {
    pub map: DMatrix<f64>,
    pub ridge: f64,
}

impl RidgeMap {
    /// `Pᵀx`, the regressed label vector.
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.map.nrows() {
            return Err(Error::dim(format!(
                "input has {} features, map expects {}",
                x.len(),
                self.map.nrows()
            )));
        }
        Ok(self.map.tr_mul(x))
    }
}

pub fn fit_ridge_map(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<RidgeMap> {
    let (n, p) = x.shape();
    if y.nrows() != n {
        return Err(Error::dim(format!("X has {n} rows, Y has {}", y.nrows())));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::arg(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let map = if p <= n {
        let mut gram = x.tr_mul(x);
        for i in 0..p {
            gram[(i, i)] += ridge;
        }
        spd_solve(&gram, &x.tr_mul(y), "regularized Gram matrix")?
    } else {
        if ridge == 0.0 {
            return Err(Error::Singular(format!(
                "p = {p} exceeds n = {n}; a positive ridge is required"
            )));
        }
        // (XᵀX + rI)⁻¹Xᵀ = Xᵀ(XXᵀ + rI)⁻¹
        let mut kernel = x * x.transpose();
        for i in 0..n {
            kernel[(i, i)] += ridge;
        }
        x.tr_mul(&spd_solve(&kernel, y, "regularized kernel matrix")?)
    };
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("ridge solution is not finite".into()));
    }
    Ok(RidgeMap { map, ridge })
}

/// Normal-equation residual `‖(XᵀX + rI)·P − XᵀY‖∞` of a fitted map.
pub fn normal_equation_residual(x: &DMatrix<f64>, y: &DMatrix<f64>, m: &RidgeMap) -> f64 {
    let lhs = x.tr_mul(&(x * &m.map)) + &m.map * m.ridge;
    inf_norm(&(lhs - x.tr_mul(y)))
}

/// `M̂(x) = (P V)ᵀ x`.
pub fn regress_codeword(p: &RidgeMap, v: &EncodingMatrix, x: &DVector<f64>) -> Result<DVector<f64>> {
    if p.map.ncols() != v.n_labels() {
        return Err(Error::dim(format!(
            "ridge map has {} outputs, encoding expects {} labels",
            p.map.ncols(),
            v.n_labels()
        )));
    }
    Ok(v.matrix().tr_mul(&p.apply(x)?))
}

/// Codeword predictions for every row of `x` (n×d).
pub fn regress_codewords(p: &RidgeMap, v: &EncodingMatrix, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != p.map.nrows() || p.map.ncols() != v.n_labels() {
        return Err(Error::dim("inputs, ridge map and encoding do not conform"));
    }
    Ok(x * (&p.map * v.matrix()))
}

/// Regression part of a coding model: the projections plus per-projection
/// residual variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorSet {
    pub projections: EncodingMatrix,
    pub residual_variances: DVector<f64>,
}

/// Mean squared training residual of each codeword regressor, floored at
/// [`VARIANCE_FLOOR`].
pub fn estimate_residual_variances(
    p: &RidgeMap,
    v: &EncodingMatrix,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let n = x.nrows();
    if n == 0 || y.nrows() != n || y.ncols() != v.n_labels() {
        return Err(Error::dim("training matrices do not conform"));
    }
    let predicted = regress_codewords(p, v, x)?;
    let target = y * v.matrix();
    let residual = target - predicted;
    Ok(DVector::from_iterator(
        v.n_projections(),
        residual
            .column_iter()
            .map(|c| (c.norm_squared() / n as f64).max(VARIANCE_FLOOR)),
    ))
}

/// L2-penalized logistic regression model for one binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryClassifier {
    pub weights: DVector<f64>,
    pub intercept: f64,
    pub l2_penalty: f64,
    /// False when the gradient tolerance was not met within the iteration cap.
    pub converged: bool,
    pub iterations: usize,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `(P(y=0|x), P(y=1|x))`, clipped away from 0 and 1.
pub fn predict_proba(c: &BinaryClassifier, x: &DVector<f64>) -> Result<(f64, f64)> {
    if x.len() != c.weights.len() {
        return Err(Error::dim(format!(
            "input has {} features, classifier expects {}",
            x.len(),
            c.weights.len()
        )));
    }
    let p1 = sigmoid(c.weights.dot(x) + c.intercept).clamp(PROB_EPS, 1.0 - PROB_EPS);
    Ok((1.0 - p1, p1))
}

/// P(y=1|x) for every row of `x`, clipped.
pub fn predict_proba_rows(c: &BinaryClassifier, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != c.weights.len() {
        return Err(Error::dim("input width does not match classifier"));
    }
    let z = x * &c.weights;
    Ok(z.map(|z| sigmoid(z + c.intercept).clamp(PROB_EPS, 1.0 - PROB_EPS)))
}

const LOGISTIC_GRAD_TOL: f64 = 1e-6;
const LOGISTIC_MAX_ITER: usize = 500;

struct LogisticProblem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    l2: f64,
}

impl LogisticProblem<'_> {
    fn objective(&self, w: &DVector<f64>, b: f64) -> f64 {
        let z = self.x * w;
        let n = self.y.len() as f64;
        let loss: f64 = z
            .iter()
            .zip(self.y.iter())
            .map(|(&z, &y)| softplus(z + b) - y * (z + b))
            .sum();
        loss / n + 0.5 * self.l2 * w.norm_squared()
    }

    fn gradient(&self, w: &DVector<f64>, b: f64) -> (DVector<f64>, f64) {
        let n = self.y.len() as f64;
        let z = self.x * w;
        let r = DVector::from_iterator(z.len(), z.iter().zip(self.y.iter()).map(|(&z, &y)| sigmoid(z + b) - y));
        let gw = self.x.tr_mul(&r) / n + w * self.l2;
        (gw, r.sum() / n)
    }
}

/// Fits a logistic classifier and returns the objective after every iteration
/// (the first entry is the objective at the zero start).
pub fn fit_logistic_traced(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    l2_penalty: f64,
) -> Result<(BinaryClassifier, Vec<f64>)> {
    let (n, p) = x.shape();
    if y.len() != n || n == 0 {
        return Err(Error::dim(format!("X has {n} rows, y has {}", y.len())));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::arg("logistic targets must be 0/1"));
    }
    if !(l2_penalty > 0.0) {
        return Err(Error::arg(format!("l2_penalty must be > 0, got {l2_penalty}")));
    }
    let prob = LogisticProblem { x, y, l2: l2_penalty };
    let mut w = DVector::zeros(p);
    let mut b = 0.0;
    let mut f = prob.objective(&w, b);
    let mut trace = vec![f];
    let (mut gw, mut gb) = prob.gradient(&w, b);
    let mut step = 1.0;
    let mut prev: Option<(DVector<f64>, f64, DVector<f64>, f64)> = None;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < LOGISTIC_MAX_ITER {
        let gmax = gw.iter().fold(gb.abs(), |m, v| m.max(v.abs()));
        if gmax <= LOGISTIC_GRAD_TOL {
            converged = true;
            break;
        }
        // Barzilai-Borwein trial step, then Armijo backtracking.
        if let Some((pw, pb, pgw, pgb)) = &prev {
            let sw = &w - pw;
            let sb = b - pb;
            let dw = &gw - pgw;
            let db = gb - pgb;
            let sy = sw.dot(&dw) + sb * db;
            if sy > 0.0 {
                step = (sw.norm_squared() + sb * sb) / sy;
            }
        }
        let g2 = gw.norm_squared() + gb * gb;
        let mut accepted = false;
        for _ in 0..60 {
            let w_new = &w - &gw * step;
            let b_new = b - gb * step;
            let f_new = prob.objective(&w_new, b_new);
            if f_new <= f - 1e-4 * step * g2 {
                prev = Some((w.clone(), b, gw.clone(), gb));
                w = w_new;
                b = b_new;
                f = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // no descent possible at machine precision
            trace.push(f);
            break;
        }
        trace.push(f);
        let g = prob.gradient(&w, b);
        gw = g.0;
        gb = g.1;
    }
    if !converged {
        let gmax = gw.iter().fold(gb.abs(), |m, v| m.max(v.abs()));
        converged = gmax <= LOGISTIC_GRAD_TOL;
    }
    Ok((
        BinaryClassifier {
            weights: w,
            intercept: b,
            l2_penalty,
            converged,
            iterations,
        },
        trace,
    ))
}

pub fn fit_logistic(x: &DMatrix<f64>, y: &DVector<f64>, l2_penalty: f64) -> Result<BinaryClassifier> {
    fit_logistic_traced(x, y, l2_penalty).map(|(c, _)| c)
}

/// Penalized logistic objective (mean log loss + l2/2·‖w‖²) of a classifier.
pub fn logistic_objective(c: &BinaryClassifier, x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    LogisticProblem { x, y, l2: c.l2_penalty }.objective(&c.weights, c.intercept)
}

/// Gradient of the penalized logistic objective at a classifier's parameters.
pub fn logistic_gradient(c: &BinaryClassifier, x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, f64) {
    LogisticProblem { x, y, l2: c.l2_penalty }.gradient(&c.weights, c.intercept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ridge,
    Logistic,
}

/// Mean validation loss of every (sorted, deduplicated) grid value.
#[derive(Debug, Clone, PartialEq)]
pub struct CvTable {
    pub grid: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub best: f64,
}

/// Seeded fold assignment: a shuffled index list cut into `folds` nearly
/// equal contiguous chunks.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = n / folds + usize::from(f < n % folds);
        let mut chunk = idx[start..start + len].to_vec();
        chunk.sort_unstable();
        out.push(chunk);
        start += len;
    }
    out
}

fn log_loss(p1: f64, y: f64) -> f64 {
    let p1 = p1.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p1.ln() + (1.0 - y) * (1.0 - p1).ln())
}

/// Validation loss of a single (penalty, fold) cell.
fn fold_loss(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    kind: ModelKind,
    penalty: f64,
    train: &[usize],
    valid: &[usize],
) -> Result<f64> {
    let xt = x.select_rows(train);
    let yt = y.select_rows(train);
    let xv = x.select_rows(valid);
    let yv = y.select_rows(valid);
    match kind {
        ModelKind::Ridge => {
            let m = fit_ridge_map(&xt, &yt, penalty)?;
            let err = &xv * &m.map - &yv;
            Ok(err.norm_squared() / err.len() as f64)
        }
        ModelKind::Logistic => {
            let mut total = 0.0;
            for col in 0..y.ncols() {
                let ytc = yt.column(col).into_owned();
                let yvc = yv.column(col).into_owned();
                let c = fit_logistic(&xt, &ytc, penalty)?;
                let probs = predict_proba_rows(&c, &xv)?;
                total += probs.iter().zip(yvc.iter()).map(|(&p, &y)| log_loss(p, y)).sum::<f64>() / valid.len() as f64;
            }
            Ok(total / y.ncols() as f64)
        }
    }
}

pub fn cross_validate_table(
    x: &DMatrix<f64>,
    y_target: &DMatrix<f64>,
    kind: ModelKind,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<CvTable> {
    if grid.is_empty() {
        return Err(Error::arg("cross-validation grid is empty"));
    }
    if folds < 2 {
        return Err(Error::arg(format!("need at least 2 folds, got {folds}")));
    }
    if grid.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::arg("grid values must be positive and finite"));
    }
    let n = x.nrows();
    if y_target.nrows() != n {
        return Err(Error::dim("X and targets have different row counts"));
    }
    if folds > n {
        return Err(Error::arg(format!("{folds} folds for {n} samples")));
    }
    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() == 1 {
        return Ok(CvTable {
            best: sorted[0],
            mean_loss: vec![f64::NAN],
            grid: sorted,
        });
    }
    let assignment = fold_assignment(n, folds, seed);
    let mut mean_loss = Vec::with_capacity(sorted.len());
    for &penalty in &sorted {
        let mut total = 0.0;
        for (f, valid) in assignment.iter().enumerate() {
            let train: Vec<usize> = assignment
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, idx)| idx.iter().copied())
                .collect();
            match fold_loss(x, y_target, kind, penalty, &train, valid) {
                Ok(loss) => total += loss,
                // A penalty too small for a fold's Gram matrix is simply unusable.
                Err(Error::Singular(_)) => total = f64::INFINITY,
                Err(e) => return Err(e),
            }
        }
        mean_loss.push(total / folds as f64);
    }
    if mean_loss.iter().all(|l| !l.is_finite()) {
        return Err(Error::Singular("every grid value failed in some fold".into()));
    }
    // Ascending scan with `<=` keeps the largest penalty among ties.
    let mut best = 0;
    for i in 1..sorted.len() {
        let (a, b) = (mean_loss[i], mean_loss[best]);
        if a <= b + 1e-12 * b.abs().max(1.0) {
            best = i;
        }
    }
    Ok(CvTable {
        best: sorted[best],
        mean_loss,
        grid: sorted,
    })
}

/// Grid value with the lowest mean validation loss (squared error for ridge,
/// log loss for logistic); ties go to the larger penalty.
pub fn cross_validate(
    x: &DMatrix<f64>,
    y_target: &DMatrix<f64>,
    kind: ModelKind,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<f64> {
    cross_validate_table(x, y_target, kind, grid, folds, seed).map(|t| t.best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    /// Plain conjugate gradient on the normal equations, one column at a time.
    fn cg_normal_equations(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
        let p = x.ncols();
        let mut out = DMatrix::zeros(p, y.ncols());
        for col in 0..y.ncols() {
            let b = x.tr_mul(&y.column(col).into_owned());
            let apply = |v: &DVector<f64>| x.tr_mul(&(x * v)) + v * ridge;
            let mut sol = DVector::zeros(p);
            let mut r = b.clone();
            let mut d = r.clone();
            for _ in 0..10 * p {
                let ad = apply(&d);
                let alpha = r.norm_squared() / d.dot(&ad);
                sol += &d * alpha;
                let r_new = &r - ad * alpha;
                if r_new.norm() < 1e-14 * b.norm() {
                    break;
                }
                let beta = r_new.norm_squared() / r.norm_squared();
                d = &r_new + d * beta;
                r = r_new;
            }
            out.set_column(col, &sol);
        }
        out
    }

    #[test]
    fn ridge_identity_and_scalar() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let m = fit_ridge_map(&i2, &i2, 0.0).unwrap();
        assert!((m.map - &i2).norm() < 1e-15);
        let m = fit_ridge_map(
            &DMatrix::from_element(1, 1, 2.0),
            &DMatrix::from_element(1, 1, 4.0),
            0.0,
        )
        .unwrap();
        assert_eq!(m.map[(0, 0)], 2.0);
    }

    #[test]
    fn ridge_matches_conjugate_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_matrix(&mut rng, 20, 5);
        let y = rand_matrix(&mut rng, 20, 3);
        let m = fit_ridge_map(&x, &y, 1e-6).unwrap();
        let cg = cg_normal_equations(&x, &y, 1e-6);
        assert!((&m.map - &cg).norm() <= 1e-6 * cg.norm());
        let scale = inf_norm(&x.tr_mul(&y)).max(1.0);
        assert!(normal_equation_residual(&x, &y, &m) <= 1e-8 * scale);
    }

    #[test]
    fn ridge_wide_design_uses_kernel_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_matrix(&mut rng, 8, 30);
        let y = rand_matrix(&mut rng, 8, 2);
        assert!(matches!(fit_ridge_map(&x, &y, 0.0), Err(Error::Singular(_))));
        let m = fit_ridge_map(&x, &y, 0.5).unwrap();
        let scale = inf_norm(&x.tr_mul(&y)).max(1.0);
        assert!(normal_equation_residual(&x, &y, &m) <= 1e-8 * scale);
    }

    #[test]
    fn exact_least_squares_at_zero_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 30, 4);
        let y = rand_matrix(&mut rng, 30, 2);
        let m = fit_ridge_map(&x, &y, 0.0).unwrap();
        let resid = x.tr_mul(&(&x * &m.map)) - x.tr_mul(&y);
        assert!(inf_norm(&resid) <= 1e-8);
    }

    #[test]
    fn codeword_regression() {
        let p = RidgeMap {
            map: DMatrix::identity(3, 3),
            ridge: 0.0,
        };
        let v = EncodingMatrix::new(DMatrix::identity(3, 3), false).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(regress_codeword(&p, &v, &x).unwrap(), x);

        let p = RidgeMap {
            map: DMatrix::from_element(1, 1, 2.0),
            ridge: 0.0,
        };
        let v = EncodingMatrix::new(DMatrix::from_element(1, 1, 3.0), false).unwrap();
        let out = regress_codeword(&p, &v, &DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(out[0], 6.0);
        assert!(regress_codeword(&p, &v, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn codeword_regression_columnwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = RidgeMap {
            map: rand_matrix(&mut rng, 6, 4),
            ridge: 0.0,
        };
        let v = EncodingMatrix::new(rand_matrix(&mut rng, 4, 3), false).unwrap();
        let x = DVector::from_iterator(6, (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let joint = regress_codeword(&p, &v, &x).unwrap();
        for k in 0..3 {
            let pv = &p.map * v.matrix().column(k);
            assert!((pv.dot(&x) - joint[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_variances() {
        // perfect fit: Y in the column space of X
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_matrix(&mut rng, 10, 3);
        let y = &x * rand_matrix(&mut rng, 3, 2);
        let p = fit_ridge_map(&x, &y, 0.0).unwrap();
        let v = EncodingMatrix::new(DMatrix::identity(2, 2), false).unwrap();
        let s = estimate_residual_variances(&p, &v, &x, &y).unwrap();
        assert!(s.iter().all(|&s| s == VARIANCE_FLOOR));

        // zero map, first label column (0, 1)
        let p = RidgeMap {
            map: DMatrix::zeros(1, 2),
            ridge: 0.0,
        };
        let v = EncodingMatrix::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), false).unwrap();
        let x = DMatrix::from_element(2, 1, 1.0);
        let y = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let s = estimate_residual_variances(&p, &v, &x, &y).unwrap();
        assert_eq!(s[0], 0.5);

        // independent recomputation
        let x = rand_matrix(&mut rng, 15, 4);
        let y = DMatrix::from_fn(15, 3, |i, j| ((i + j) % 2) as f64);
        let p = fit_ridge_map(&x, &y, 0.1).unwrap();
        let v = EncodingMatrix::new(rand_matrix(&mut rng, 3, 2), false).unwrap();
        let s = estimate_residual_variances(&p, &v, &x, &y).unwrap();
        for k in 0..2 {
            let vk = v.matrix().column(k);
            let mut acc = 0.0;
            for i in 0..15 {
                let target = y.row(i).transpose().dot(&vk);
                let pred = (&p.map * vk).dot(&x.row(i).transpose());
                acc += (target - pred).powi(2);
            }
            assert!((s[k] - (acc / 15.0).max(VARIANCE_FLOOR)).abs() < 1e-12);
        }
    }

    #[test]
    fn logistic_degenerate_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_matrix(&mut rng, 40, 3);
        let y = DVector::from_element(40, 1.0);
        let c = fit_logistic(&x, &y, 1.0).unwrap();
        assert!(c.intercept > 5.0);
        assert!(c.weights.amax() < 1e-3);
        for i in 0..40 {
            let (_, p1) = predict_proba(&c, &x.row(i).transpose()).unwrap();
            assert!(p1 >= 0.95);
        }
    }

    #[test]
    fn logistic_stationarity_on_separable_data() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let (c, trace) = fit_logistic_traced(&x, &y, 1.0).unwrap();
        assert!(c.converged);
        let (gw, gb) = logistic_gradient(&c, &x, &y);
        assert!(gw.amax().max(gb.abs()) <= 1e-6);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn logistic_local_optimality() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_matrix(&mut rng, 50, 3);
        let y = DVector::from_fn(50, |i, _| {
            let s = x[(i, 0)] - 0.5 * x[(i, 1)] + 0.3 * rng.sample::<f64, _>(StandardNormal);
            f64::from(s > 0.0)
        });
        let c = fit_logistic(&x, &y, 0.1).unwrap();
        let base = logistic_objective(&c, &x, &y);
        for _ in 0..100 {
            let mut other = c.clone();
            for w in other.weights.iter_mut() {
                *w += 0.1 * (rng.random::<f64>() * 2.0 - 1.0);
            }
            other.intercept += 0.1 * (rng.random::<f64>() * 2.0 - 1.0);
            assert!(base <= logistic_objective(&other, &x, &y));
        }
    }

    #[test]
    fn proba_contract() {
        let c = BinaryClassifier {
            weights: DVector::zeros(1),
            intercept: 0.0,
            l2_penalty: 1.0,
            converged: true,
            iterations: 0,
        };
        assert_eq!(predict_proba(&c, &DVector::zeros(1)).unwrap(), (0.5, 0.5));
        let big = BinaryClassifier {
            intercept: 1e3,
            ..c.clone()
        };
        let (p0, p1) = predict_proba(&big, &DVector::zeros(1)).unwrap();
        assert_eq!(p1, 1.0 - PROB_EPS);
        assert_eq!(p0 + p1, 1.0);
        let unit = BinaryClassifier {
            weights: DVector::from_element(1, 1.0),
            ..c
        };
        let (_, p1) = predict_proba(&unit, &DVector::from_element(1, 3f64.ln())).unwrap();
        assert!((p1 - 0.75).abs() < 1e-15);
        assert!(predict_proba(&unit, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn cv_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_matrix(&mut rng, 40, 3);
        let y = &x * rand_matrix(&mut rng, 3, 2);
        assert_eq!(cross_validate(&x, &y, ModelKind::Ridge, &[0.3], 5, 1).unwrap(), 0.3);
        assert_eq!(
            cross_validate(&x, &y, ModelKind::Ridge, &[1e3, 1e-8], 5, 1).unwrap(),
            1e-8
        );
        assert!(cross_validate(&x, &y, ModelKind::Ridge, &[], 5, 1).is_err());
        assert!(cross_validate(&x, &y, ModelKind::Ridge, &[1.0], 1, 1).is_err());
    }

    #[test]
    fn cv_matches_external_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_matrix(&mut rng, 30, 3);
        let y = &x * rand_matrix(&mut rng, 3, 1) + rand_matrix(&mut rng, 30, 1) * 2.0;
        let grid = [1e-2, 10.0, 1.0, 100.0];
        let table = cross_validate_table(&x, &y, ModelKind::Ridge, &grid, 3, 99).unwrap();
        let folds = fold_assignment(30, 3, 99);
        let mut best = (f64::INFINITY, 0.0);
        let mut sorted = grid.to_vec();
        sorted.sort_by(f64::total_cmp);
        for &g in &sorted {
            let mut tot = 0.0;
            for v in &folds {
                let tr: Vec<usize> = (0..30).filter(|i| !v.contains(i)).collect();
                let m = fit_ridge_map(&x.select_rows(&tr), &y.select_rows(&tr), g).unwrap();
                let e = x.select_rows(v) * &m.map - y.select_rows(v);
                tot += e.norm_squared() / e.len() as f64;
            }
            if tot / 3.0 <= best.0 {
                best = (tot / 3.0, g);
            }
        }
        assert_eq!(table.best, best.1);
        // grid ordering does not matter
        let rev: Vec<f64> = grid.iter().rev().copied().collect();
        assert_eq!(
            cross_validate(&x, &y, ModelKind::Ridge, &rev, 3, 99).unwrap(),
            table.best
        );
    }
}
