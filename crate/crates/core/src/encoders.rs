//! Label encodings `V` (q×d): random projections, principal components of the
//! label matrix, and label-side canonical correlation directions. The
//! max-margin encoding is derived from a learned metric in
//! [`crate::margin_metric::metric_to_projections`].

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fix_column_signs, spd_solve, sym_eigen_desc};

/// A q×d matrix whose columns are label-space projection directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingMatrix {
    v: DMatrix<f64>,
    /// Whether the codeword also carries the q original labels.
    includes_identity: bool,
}

impl EncodingMatrix {
    /// Validates `d ≥ 1`, finite entries and no all-zero column.
    pub fn new(v: DMatrix<f64>, includes_identity: bool) -> Result<Self> {
        let e = Self::new_allow_zero_columns(v, includes_identity)?;
        if let Some(k) = e.v.column_iter().position(|c| c.iter().all(|&x| x == 0.0)) {
            return Err(Error::arg(format!("projection column {k} is all zero")));
        }
        Ok(e)
    }

    /// Like [`EncodingMatrix::new`] but accepts all-zero columns; a metric
    /// with zero eigenvalues yields such columns.
    pub(crate) fn new_allow_zero_columns(v: DMatrix<f64>, includes_identity: bool) -> Result<Self> {
        if v.nrows() == 0 || v.ncols() == 0 {
            return Err(Error::arg("encoding matrix needs q >= 1 and d >= 1"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("encoding matrix has non-finite entries"));
        }
        Ok(Self { v, includes_identity })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn includes_identity(&self) -> bool {
        self.includes_identity
    }

    pub fn n_labels(&self) -> usize {
        self.v.nrows()
    }

    pub fn n_projections(&self) -> usize {
        self.v.ncols()
    }

    /// `Vᵀy`.
    pub fn encode(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.n_labels() {
            return Err(Error::dim(format!(
                "label vector has length {}, encoding expects {}",
                y.len(),
                self.n_labels()
            )));
        }
        Ok(self.v.tr_mul(y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionDistribution {
    Gaussian,
    Rademacher,
}

/// i.i.d. entries, `N(0, 1/d)` or `±1/√d`.
pub fn random_projections(
    q: usize,
    d: usize,
    distribution: ProjectionDistribution,
    seed: u64,
) -> Result<EncodingMatrix> {
    if q == 0 || d == 0 {
        return Err(Error::arg("random projections need q >= 1 and d >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let v = match distribution {
        ProjectionDistribution::Gaussian => {
            let normal = Normal::new(0.0, scale).expect("positive scale");
            DMatrix::from_fn(q, d, |_, _| normal.sample(&mut rng))
        }
        ProjectionDistribution::Rademacher => {
            DMatrix::from_fn(q, d, |_, _| if rng.random::<bool>() { scale } else { -scale })
        }
    };
    // A Gaussian column is zero with probability 0; a Rademacher column never is.
    EncodingMatrix::new(v, false)
}

/// Result of [`pca_projections`].
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjections {
    pub encoding: EncodingMatrix,
    /// All q singular values of Y, non-increasing.
    pub singular_values: Vec<f64>,
    /// Set when singular values d and d+1 coincide within 1e-10, in which case
    /// the retained subspace is not unique.
    pub rank_warning: bool,
}

/// Top-d right singular vectors of the (uncentered) label matrix.
pub fn pca_projections(y: &DMatrix<f64>, d: usize) -> Result<PcaProjections> {
    let q = y.ncols();
    if d < 1 || d > q {
        return Err(Error::arg(format!("d must lie in 1..={q}, got {d}")));
    }
    if y.iter().all(|&v| v == 0.0) {
        return Err(Error::arg("label matrix is all zero"));
    }
    let gram = y.tr_mul(y);
    let (values, vectors) = sym_eigen_desc(&gram)?;
    let singular_values: Vec<f64> = values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let rank_warning = d < q && (singular_values[d - 1] - singular_values[d]).abs() <= 1e-10;
    let mut v = vectors.columns(0, d).into_owned();
    fix_column_signs(&mut v);
    Ok(PcaProjections {
        encoding: EncodingMatrix::new(v, false)?,
        singular_values,
        rank_warning,
    })
}

/// Result of [`cca_projections`].
#[derive(Debug, Clone, PartialEq)]
pub struct CcaProjections {
    pub encoding: EncodingMatrix,
    /// Generalized eigenvalues (squared canonical correlations) of the kept
    /// directions, non-increasing.
    pub eigenvalues: Vec<f64>,
}

/// Label-side regularized CCA directions: solutions of
/// `YᵀX(XᵀX+rI)⁻¹XᵀY v = λ (YᵀY+rI) v` at the top `d` eigenvalues, scaled so
/// that `vᵀ(YᵀY+rI)v = 1`.
pub fn cca_projections(x: &DMatrix<f64>, y: &DMatrix<f64>, d: usize, reg: f64) -> Result<CcaProjections> {
    let (n, p) = x.shape();
    let q = y.ncols();
    if y.nrows() != n {
        return Err(Error::dim("X and Y have different row counts"));
    }
    if d < 1 || d > q {
        return Err(Error::arg(format!("d must lie in 1..={q}, got {d}")));
    }
    if !(reg > 0.0) {
        return Err(Error::arg(format!("reg must be > 0, got {reg}")));
    }
    let yx = y.tr_mul(x);
    // YᵀX (XᵀX + rI)⁻¹ XᵀY, via the n×n kernel when p > n.
    let a = if p <= n {
        let mut cxx = x.tr_mul(x);
        for i in 0..p {
            cxx[(i, i)] += reg;
        }
        let sol = spd_solve(&cxx, &yx.transpose(), "regularized input covariance")?;
        &yx * sol
    } else {
        let mut k = x * x.transpose();
        for i in 0..n {
            k[(i, i)] += reg;
        }
        let kk = x * x.transpose();
        let sol = spd_solve(&k, &(&kk * y), "regularized input kernel")?;
        y.tr_mul(&sol)
    };
    let a = (&a + a.transpose()) * 0.5;
    let mut b = y.tr_mul(y);
    for i in 0..q {
        b[(i, i)] += reg;
    }
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("regularized label covariance".into()))?;
    let l = chol.l();
    // C = L⁻¹ A L⁻ᵀ
    let linv_a = l
        .solve_lower_triangular(&a)
        .ok_or_else(|| Error::Singular("label covariance factor".into()))?;
    let c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| Error::Singular("label covariance factor".into()))?;
    let (values, w) = sym_eigen_desc(&c)?;
    let w = w.columns(0, d).into_owned();
    let mut v = l
        .transpose()
        .solve_upper_triangular(&w)
        .ok_or_else(|| Error::Singular("label covariance factor".into()))?;
    fix_column_signs(&mut v);
    let eigenvalues = values.iter().take(d).copied().collect();
    Ok(CcaProjections {
        encoding: EncodingMatrix::new(v, true)?,
        eigenvalues,
    })
}

/// The `A` and `B` matrices of the CCA generalized eigenproblem (for checks).
pub fn cca_problem_matrices(x: &DMatrix<f64>, y: &DMatrix<f64>, reg: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = x.ncols();
    let mut cxx = x.tr_mul(x);
    for i in 0..p {
        cxx[(i, i)] += reg;
    }
    let xy = x.tr_mul(y);
    let a = xy.transpose() * spd_solve(&cxx, &xy, "regularized input covariance")?;
    let mut b = y.tr_mul(y);
    for i in 0..y.ncols() {
        b[(i, i)] += reg;
    }
    Ok((a, b))
}
