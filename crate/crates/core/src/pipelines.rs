//! The seven multi-label methods behind one fit/predict interface, plus a
//! versioned JSON container for fitted models.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::decoders::{
    cosamp_decode, exhaustive_decode, meanfield_decode, pca_round_decode, DecodeProblem, COSAMP_MAX_ITER,
    MEANFIELD_MAX_SWEEPS, MEANFIELD_TOL,
};
use crate::encoders::{cca_projections, pca_projections, random_projections, EncodingMatrix, ProjectionDistribution};
use crate::error::{Error, Result};
use crate::linear_models::{
    cross_validate, estimate_residual_variances, fit_logistic, fit_ridge_map, predict_proba, regress_codeword,
    BinaryClassifier, ModelKind, RegressorSet, RidgeMap, DEFAULT_FOLDS, DEFAULT_LOGISTIC_GRID, DEFAULT_RIDGE_GRID,
};
use crate::margin_metric::{learn_metric_from_samples, margin_samples, metric_to_projections, MetricOptions, MetricQ};

pub const MODEL_FORMAT: &str = "mmcode-model";
pub const MODEL_VERSION: u32 = 1;

/// Projection count used by CodingCS when none is given.
pub const CS_DEFAULT_PROJECTIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "BR")]
    Br,
    #[serde(rename = "CodingCS")]
    CodingCs,
    #[serde(rename = "CodingPCA")]
    CodingPca,
    #[serde(rename = "CodingPCA-R")]
    CodingPcaR,
    #[serde(rename = "CodingCCA")]
    CodingCca,
    #[serde(rename = "MaxMargin")]
    MaxMargin,
    #[serde(rename = "CLR")]
    Clr,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Br,
        MethodKind::CodingCs,
        MethodKind::CodingPca,
        MethodKind::CodingPcaR,
        MethodKind::CodingCca,
        MethodKind::MaxMargin,
        MethodKind::Clr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Br => "BR",
            MethodKind::CodingCs => "CodingCS",
            MethodKind::CodingPca => "CodingPCA",
            MethodKind::CodingPcaR => "CodingPCA-R",
            MethodKind::CodingCca => "CodingCCA",
            MethodKind::MaxMargin => "MaxMargin",
            MethodKind::Clr => "CLR",
        }
    }

    /// Methods whose codeword carries the labels themselves, decoded jointly.
    fn uses_joint_decoding(self) -> bool {
        matches!(
            self,
            MethodKind::CodingPcaR | MethodKind::CodingCca | MethodKind::MaxMargin
        )
    }

    fn uses_classifiers(self) -> bool {
        !matches!(self, MethodKind::CodingCs | MethodKind::CodingPca)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name().replace('-', "").to_ascii_lowercase() == key)
            .ok_or_else(|| Error::arg(format!("unknown method {s:?}")))
    }
}

/// Decoder used by the methods that minimize the joint decoding objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointDecoder {
    #[default]
    Exhaustive,
    MeanField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Projection count; `None` means 100 for CodingCS and q otherwise.
    pub d: Option<usize>,
    /// Margin regularizer of the metric learner.
    pub c: f64,
    pub lambda_decode: f64,
    pub seed: u64,
    pub cv_folds: usize,
    pub ridge_grid: Vec<f64>,
    pub logistic_grid: Vec<f64>,
    pub cs_distribution: ProjectionDistribution,
    /// CoSaMP sparsity; `None` means the ceiling of the mean training label count.
    pub cs_sparsity: Option<usize>,
    /// CCA regularizer; `None` means `1e-4·n`.
    pub cca_reg: Option<f64>,
    pub max_rounds: usize,
    pub eps_violation: Option<f64>,
    pub decoder: JointDecoder,
}

impl Default for MethodSpec {
    fn default() -> Self {
        Self {
            kind: MethodKind::Br,
            d: None,
            c: 1e6,
            lambda_decode: 1.0,
            seed: 0,
            cv_folds: DEFAULT_FOLDS,
            ridge_grid: DEFAULT_RIDGE_GRID.to_vec(),
            logistic_grid: DEFAULT_LOGISTIC_GRID.to_vec(),
            cs_distribution: ProjectionDistribution::Gaussian,
            cs_sparsity: None,
            cca_reg: None,
            max_rounds: 100,
            eps_violation: None,
            decoder: JointDecoder::Exhaustive,
        }
    }
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn projections(&self, q: usize) -> usize {
        self.d.unwrap_or(match self.kind {
            MethodKind::CodingCs => CS_DEFAULT_PROJECTIONS,
            _ => q,
        })
    }

    fn validate(&self, q: usize) -> Result<()> {
        let d = self.projections(q);
        match self.kind {
            MethodKind::Br | MethodKind::Clr => {}
            MethodKind::CodingCs => {
                if d == 0 {
                    return Err(Error::arg("CodingCS needs d >= 1"));
                }
            }
            _ => {
                if d == 0 || d > q {
                    return Err(Error::arg(format!("{} needs d in 1..={q}, got {d}", self.kind)));
                }
            }
        }
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::arg(format!("C must be positive and finite, got {}", self.c)));
        }
        if !(self.lambda_decode >= 0.0) || !self.lambda_decode.is_finite() {
            return Err(Error::arg(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda_decode
            )));
        }
        if self.cv_folds < 2 {
            return Err(Error::arg(format!("need at least 2 CV folds, got {}", self.cv_folds)));
        }
        if self.ridge_grid.is_empty() || self.logistic_grid.is_empty() {
            return Err(Error::arg("CV grids must be nonempty"));
        }
        if let Some(s) = self.cs_sparsity {
            if s == 0 || s > q {
                return Err(Error::arg(format!("CoSaMP sparsity must lie in 1..={q}, got {s}")));
            }
        }
        if let Some(r) = self.cca_reg {
            if !(r > 0.0) {
                return Err(Error::arg(format!("CCA regularizer must be > 0, got {r}")));
            }
        }
        Ok(())
    }
}

/// Per-feature z-scoring with training statistics. Constant features keep
/// scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
        let scale = DVector::from_iterator(
            x.ncols(),
            x.column_iter().zip(mean.iter()).map(|(c, &m)| {
                let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            }),
        );
        Self { mean, scale }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j])
    }

    /// Standardized features followed by a constant-1 column.
    pub fn design(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let p = x.ncols();
        DMatrix::from_fn(x.nrows(), p + 1, |i, j| {
            if j == p {
                1.0
            } else {
                (x[(i, j)] - self.mean[j]) / self.scale[j]
            }
        })
    }

    pub fn design_row(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = x.len();
        DVector::from_fn(p + 1, |j, _| {
            if j == p {
                1.0
            } else {
                (x[j] - self.mean[j]) / self.scale[j]
            }
        })
    }
}

/// One CLR pairwise model; `None` when the pair had too little data and
/// votes neutrally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairModel {
    pub first: usize,
    pub second: usize,
    pub classifier: Option<BinaryClassifier>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    spec: MethodSpec,
    n_features: usize,
    label_names: Vec<String>,
    standardizer: Standardizer,
    classifiers: Vec<BinaryClassifier>,
    ridge: Option<RidgeMap>,
    regressors: Option<RegressorSet>,
    metric: Option<MetricQ>,
    pairs: Vec<PairModel>,
    sparsity: Option<usize>,
}

impl FittedModel {
    pub fn spec(&self) -> &MethodSpec {
        &self.spec
    }

    pub fn kind(&self) -> MethodKind {
        self.spec.kind
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn classifiers(&self) -> &[BinaryClassifier] {
        &self.classifiers
    }

    pub fn ridge(&self) -> Option<&RidgeMap> {
        self.ridge.as_ref()
    }

    pub fn regressors(&self) -> Option<&RegressorSet> {
        self.regressors.as_ref()
    }

    pub fn encoding(&self) -> Option<&EncodingMatrix> {
        self.regressors.as_ref().map(|r| &r.projections)
    }

    pub fn metric(&self) -> Option<&MetricQ> {
        self.metric.as_ref()
    }

    pub fn pairs(&self) -> &[PairModel] {
        &self.pairs
    }

    pub fn sparsity(&self) -> Option<usize> {
        self.sparsity
    }

    /// Number of trained predictors in the "#base models" sense: one per
    /// classifier and one per regressed codeword coordinate.
    pub fn base_model_count(&self) -> usize {
        let d = self.encoding().map_or(0, EncodingMatrix::n_projections);
        let q = self.n_labels();
        match self.spec.kind {
            MethodKind::Br => q,
            MethodKind::CodingCs | MethodKind::CodingPca => d,
            MethodKind::CodingPcaR | MethodKind::CodingCca | MethodKind::MaxMargin => q + d,
            MethodKind::Clr => self.pairs.len() + q,
        }
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::dim(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.n_features
            )));
        }
        Ok(())
    }

    /// The joint decoding problem for `x`, for the methods that use one.
    pub fn decode_problem(&self, x: &DVector<f64>) -> Result<Option<DecodeProblem>> {
        self.check_input(x)?;
        if !self.spec.kind.uses_joint_decoding() {
            return Ok(None);
        }
        let xb = self.standardizer.design_row(x);
        self.joint_problem(&xb).map(Some)
    }

    fn joint_problem(&self, xb: &DVector<f64>) -> Result<DecodeProblem> {
        let (ridge, regs) = self.regression_parts()?;
        let log_probs = self
            .classifiers
            .iter()
            .map(|c| predict_proba(c, xb).map(|(p0, p1)| (p0.ln(), p1.ln())))
            .collect::<Result<Vec<_>>>()?;
        DecodeProblem::new(
            regs.projections.clone(),
            regress_codeword(ridge, &regs.projections, xb)?,
            regs.residual_variances.clone(),
            Some(log_probs),
            self.spec.lambda_decode,
        )
    }

    fn regression_parts(&self) -> Result<(&RidgeMap, &RegressorSet)> {
        match (&self.ridge, &self.regressors) {
            (Some(r), Some(s)) => Ok((r, s)),
            _ => Err(Error::arg(format!("{} model has no regressors", self.spec.kind))),
        }
    }

    pub fn predict(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let xb = self.standardizer.design_row(x);
        match self.spec.kind {
            MethodKind::Br => self
                .classifiers
                .iter()
                .map(|c| predict_proba(c, &xb).map(|(_, p1)| f64::from(p1 >= 0.5)))
                .collect::<Result<Vec<_>>>()
                .map(DVector::from_vec),
            MethodKind::CodingCs => {
                let (ridge, regs) = self.regression_parts()?;
                let z = regress_codeword(ridge, &regs.projections, &xb)?;
                let s = self
                    .sparsity
                    .ok_or_else(|| Error::arg("CodingCS model has no sparsity"))?;
                Ok(cosamp_decode(&regs.projections, &z, s, COSAMP_MAX_ITER)?.labels)
            }
            MethodKind::CodingPca => {
                let (ridge, regs) = self.regression_parts()?;
                let z = regress_codeword(ridge, &regs.projections, &xb)?;
                pca_round_decode(&regs.projections, &z)
            }
            MethodKind::CodingPcaR | MethodKind::CodingCca | MethodKind::MaxMargin => {
                let problem = self.joint_problem(&xb)?;
                match self.spec.decoder {
                    JointDecoder::Exhaustive => exhaustive_decode(&problem),
                    JointDecoder::MeanField => {
                        Ok(meanfield_decode(&problem, MEANFIELD_MAX_SWEEPS, MEANFIELD_TOL).labels)
                    }
                }
            }
            MethodKind::Clr => self.predict_clr(&xb),
        }
    }

    /// Pairwise wins plus the calibration vote, compared with the score of
    /// the virtual calibration label.
    fn predict_clr(&self, xb: &DVector<f64>) -> Result<DVector<f64>> {
        let q = self.n_labels();
        let mut score = vec![0.0; q];
        let mut virtual_score = 0.0;
        for (j, c) in self.classifiers.iter().enumerate() {
            if predict_proba(c, xb)?.1 >= 0.5 {
                score[j] += 1.0;
            } else {
                virtual_score += 1.0;
            }
        }
        for pair in &self.pairs {
            match &pair.classifier {
                Some(c) => {
                    let winner = if predict_proba(c, xb)?.1 >= 0.5 {
                        pair.first
                    } else {
                        pair.second
                    };
                    score[winner] += 1.0;
                }
                None => {
                    score[pair.first] += 0.5;
                    score[pair.second] += 0.5;
                }
            }
        }
        Ok(DVector::from_iterator(
            q,
            score.iter().map(|&s| f64::from(s > virtual_score)),
        ))
    }

    /// Predictions for every row of `x` (m×p), computed in parallel.
    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::dim(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.n_features
            )));
        }
        let rows = (0..x.nrows())
            .into_par_iter()
            .map(|i| self.predict(&x.row(i).transpose()))
            .collect::<Result<Vec<_>>>()?;
        let q = self.n_labels();
        Ok(DMatrix::from_fn(x.nrows(), q, |i, j| rows[i][j]))
    }

    fn check_consistency(&self) -> Result<()> {
        let q = self.n_labels();
        let width = self.n_features + 1;
        let bad = |what: &str| Err(Error::Schema(format!("model container is inconsistent: {what}")));
        if q == 0 || self.standardizer.mean.len() != self.n_features || self.standardizer.scale.len() != self.n_features
        {
            return bad("standardizer");
        }
        let want_classifiers = if self.spec.kind.uses_classifiers() { q } else { 0 };
        if self.classifiers.len() != want_classifiers || self.classifiers.iter().any(|c| c.weights.len() != width) {
            return bad("classifiers");
        }
        let needs_regression = !matches!(self.spec.kind, MethodKind::Br | MethodKind::Clr);
        if needs_regression {
            let (ridge, regs) = self.regression_parts()?;
            if ridge.map.shape() != (width, q)
                || regs.projections.n_labels() != q
                || regs.residual_variances.len() != regs.projections.n_projections()
            {
                return bad("regressors");
            }
        }
        if self.spec.kind == MethodKind::Clr
            && (self.pairs.len() != q * (q - 1) / 2
                || self.pairs.iter().any(|p| {
                    p.first >= q || p.second >= q || p.classifier.as_ref().is_some_and(|c| c.weights.len() != width)
                }))
        {
            return bad("pairwise classifiers");
        }
        if self.spec.kind == MethodKind::MaxMargin && self.metric.as_ref().is_none_or(|m| m.dim() != q) {
            return bad("metric");
        }
        Ok(())
    }
}

fn label_column(y: &DMatrix<f64>, j: usize) -> DVector<f64> {
    y.column(j).into_owned()
}

/// One CV-tuned logistic classifier per label.
fn fit_label_classifiers(xb: &DMatrix<f64>, y: &DMatrix<f64>, spec: &MethodSpec) -> Result<Vec<BinaryClassifier>> {
    (0..y.ncols())
        .into_par_iter()
        .map(|j| {
            let target = label_column(y, j);
            let penalty = cross_validate(
                xb,
                &DMatrix::from_column_slice(target.len(), 1, target.as_slice()),
                ModelKind::Logistic,
                &spec.logistic_grid,
                spec.cv_folds,
                spec.seed,
            )?;
            fit_logistic(xb, &target, penalty)
        })
        .collect()
}

fn center_columns(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.nrows() as f64;
    let mean = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n));
    let centered = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - mean[j]);
    (centered, mean)
}

/// Ridge map from the design `[x_std, 1]` onto the labels, with the penalty
/// chosen by CV on `target`. The features are already centered, so the
/// intercept row is the label mean and stays unpenalized.
fn fit_tuned_ridge(
    x_std: &DMatrix<f64>,
    y: &DMatrix<f64>,
    target: &DMatrix<f64>,
    spec: &MethodSpec,
) -> Result<RidgeMap> {
    let (n, p) = x_std.shape();
    let mut grid = spec.ridge_grid.clone();
    if p > n {
        // Wide inputs use the kernel form, which needs a strictly positive
        // ridge relative to the input scale.
        let floor = 1e-6 * x_std.norm_squared() / p as f64;
        for g in &mut grid {
            *g = g.max(floor);
        }
    }
    let (target_c, _) = center_columns(target);
    let ridge = cross_validate(x_std, &target_c, ModelKind::Ridge, &grid, spec.cv_folds, spec.seed)?;
    let (y_c, y_mean) = center_columns(y);
    let slopes = fit_ridge_map(x_std, &y_c, ridge)?.map;
    let mut map = slopes.insert_row(p, 0.0);
    map.row_mut(p).copy_from(&y_mean.transpose());
    Ok(RidgeMap { map, ridge })
}

fn fit_pair(xb: &DMatrix<f64>, y: &DMatrix<f64>, j: usize, k: usize, spec: &MethodSpec) -> Result<BinaryClassifier> {
    let rows: Vec<usize> = (0..y.nrows()).filter(|&i| y[(i, j)] != y[(i, k)]).collect();
    let positives = rows.iter().filter(|&&i| y[(i, j)] == 1.0).count();
    if rows.len() < 2 || positives == 0 || positives == rows.len() {
        return Err(Error::InsufficientData(format!(
            "label pair ({j}, {k}) has {} disagreeing samples, {positives} favouring label {j}",
            rows.len()
        )));
    }
    let x_pair = xb.select_rows(&rows);
    let target = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[(i, j)]));
    let penalty = if rows.len() >= 2 * spec.cv_folds {
        cross_validate(
            &x_pair,
            &DMatrix::from_column_slice(rows.len(), 1, target.as_slice()),
            ModelKind::Logistic,
            &spec.logistic_grid,
            spec.cv_folds,
            spec.seed,
        )?
    } else {
        1.0
    };
    fit_logistic(&x_pair, &target, penalty)
}

pub fn fit(spec: &MethodSpec, train: &Dataset) -> Result<FittedModel> {
    let (n, p) = (train.n_samples(), train.n_features());
    let q = train.n_labels();
    spec.validate(q)?;
    if n < spec.cv_folds {
        return Err(Error::InsufficientData(format!(
            "{n} training samples for {}-fold cross-validation",
            spec.cv_folds
        )));
    }
    let standardizer = Standardizer::fit(train.features());
    let x_std = standardizer.transform(train.features());
    let xb = standardizer.design(train.features());
    let y = train.labels();
    let d = spec.projections(q);

    let classifiers = if spec.kind.uses_classifiers() {
        fit_label_classifiers(&xb, y, spec)?
    } else {
        Vec::new()
    };

    let mut model = FittedModel {
        spec: spec.clone(),
        n_features: p,
        label_names: train.label_names().to_vec(),
        standardizer,
        classifiers,
        ridge: None,
        regressors: None,
        metric: None,
        pairs: Vec::new(),
        sparsity: None,
    };

    let encoding = match spec.kind {
        MethodKind::Br => return Ok(model),
        MethodKind::Clr => {
            let index: Vec<(usize, usize)> = (0..q).flat_map(|j| (j + 1..q).map(move |k| (j, k))).collect();
            model.pairs = index
                .into_par_iter()
                .map(|(j, k)| match fit_pair(&xb, y, j, k, spec) {
                    Ok(c) => Ok(PairModel {
                        first: j,
                        second: k,
                        classifier: Some(c),
                    }),
                    Err(Error::InsufficientData(msg)) => {
                        log::warn!("CLR pair votes neutrally: {msg}");
                        Ok(PairModel {
                            first: j,
                            second: k,
                            classifier: None,
                        })
                    }
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(model);
        }
        MethodKind::CodingCs => {
            let mean_count = y.sum() / n as f64;
            model.sparsity = Some(
                spec.cs_sparsity
                    .unwrap_or_else(|| (mean_count.ceil() as usize).clamp(1, q)),
            );
            random_projections(q, d, spec.cs_distribution, spec.seed.wrapping_add(1))?
        }
        MethodKind::CodingPca => pca_projections(y, d)?.encoding,
        MethodKind::CodingPcaR => {
            let pca = pca_projections(y, d)?;
            EncodingMatrix::new(pca.encoding.matrix().clone(), true)?
        }
        MethodKind::CodingCca => {
            let reg = spec.cca_reg.unwrap_or(1e-4 * n as f64);
            cca_projections(&x_std, y, d, reg)?.encoding
        }
        MethodKind::MaxMargin => {
            let ridge = fit_tuned_ridge(&x_std, y, y, spec)?;
            let samples = margin_samples(&xb, y, &ridge, &model.classifiers)?;
            let options = MetricOptions {
                c: spec.c,
                eps_violation: spec.eps_violation,
                max_rounds: spec.max_rounds,
                ..MetricOptions::default()
            };
            let fitted = learn_metric_from_samples(&samples, &options)?;
            if fitted.round_cap_reached {
                log::warn!("metric learning stopped at the round cap with {} cuts", fitted.n_cuts);
            }
            let encoding = metric_to_projections(&fitted.metric, d)?;
            let residual_variances = estimate_residual_variances(&ridge, &encoding, &xb, y)?;
            model.metric = Some(fitted.metric);
            model.ridge = Some(ridge);
            model.regressors = Some(RegressorSet {
                projections: encoding,
                residual_variances,
            });
            return Ok(model);
        }
    };
    let target = y * encoding.matrix();
    let ridge = fit_tuned_ridge(&x_std, y, &target, spec)?;
    let residual_variances = estimate_residual_variances(&ridge, &encoding, &xb, y)?;
    model.ridge = Some(ridge);
    model.regressors = Some(RegressorSet {
        projections: encoding,
        residual_variances,
    });
    Ok(model)
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    format: &'a str,
    version: u32,
    model: &'a FittedModel,
}

fn invalid_data(msg: impl Into<String>) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::InvalidData, msg.into()))
}

pub fn model_to_json(m: &FittedModel) -> Result<String> {
    serde_json::to_string(&EnvelopeOut {
        format: MODEL_FORMAT,
        version: MODEL_VERSION,
        model: m,
    })
    .map_err(|e| invalid_data(e.to_string()))
}

pub fn model_from_json(text: &str) -> Result<FittedModel> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| invalid_data(e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(MODEL_FORMAT) {
        return Err(invalid_data("not a model container"));
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| invalid_data("model container has no version"))?;
    if version != u64::from(MODEL_VERSION) {
        return Err(Error::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: MODEL_VERSION,
        });
    }
    let model_value = value
        .get("model")
        .cloned()
        .ok_or_else(|| invalid_data("model container has no model"))?;
    let model: FittedModel = serde_json::from_value(model_value).map_err(|e| invalid_data(e.to_string()))?;
    model.check_consistency()?;
    Ok(model)
}

pub fn save_model(m: &FittedModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_json(m)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FittedModel> {
    model_from_json(&fs::read_to_string(path)?)
}
