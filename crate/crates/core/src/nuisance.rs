//! Nuisance models: outcome regressions μ₀, μ₁, the propensity score e₁ and
//! the sampling score s.
//!
//! Outcome regressions are ridge least squares; the two scores are
//! ridge-penalized logistic regressions fitted by IRLS. The intercept is
//! never penalized. Probabilities handed to the estimators are clipped into
//! `[clip, 1 - clip]`.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CombinedDataset;
use crate::features::{dot, FeatureKind, FeatureMap, Standardization};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NuisanceError {
    #[error("{needed} rows required to fit {what}, found {found}")]
    InsufficientRows {
        what: String,
        needed: usize,
        found: usize,
    },
    #[error("normal equations for {0} are singular; use a positive ridge penalty")]
    Singular(String),
    #[error("labels for {0} contain a single class")]
    SingleClass(String),
    #[error("labels for {0} are perfectly separated; use a positive ridge penalty")]
    Separation(String),
    #[error("invalid nuisance configuration: {0}")]
    Config(String),
}

/// x ↦ real-valued prediction.
pub trait Regressor: Debug + Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;

    /// Fitted coefficients, when the model has any.
    fn coefficients(&self) -> Option<Vec<f64>> {
        None
    }
}

/// x ↦ probability in (0, 1).
pub trait ProbabilityModel: Debug + Send + Sync {
    fn probability(&self, x: &[f64]) -> f64;

    fn coefficients(&self) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub map: FeatureMap,
    pub coef: Vec<f64>,
}

impl Regressor for LinearModel {
    fn predict(&self, x: &[f64]) -> f64 {
        dot(&self.map.expand(x), &self.coef)
    }

    fn coefficients(&self) -> Option<Vec<f64>> {
        Some(self.coef.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub map: FeatureMap,
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized log-likelihood after each accepted IRLS step, starting at β = 0.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

impl ProbabilityModel for LogisticModel {
    fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.map.expand(x), &self.coef))
    }

    fn coefficients(&self) -> Option<Vec<f64>> {
        Some(self.coef.clone())
    }
}

/// Wraps a closure as a regression.
pub struct FnRegressor<F>(pub F);

impl<F> Debug for FnRegressor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FnRegressor")
    }
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> Regressor for FnRegressor<F> {
    fn predict(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// Wraps a closure as a probability model.
pub struct FnProbability<F>(pub F);

impl<F> Debug for FnProbability<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FnProbability")
    }
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> ProbabilityModel for FnProbability<F> {
    fn probability(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// Adds a constant to another regression. Used to build deliberately wrong
/// outcome models.
#[derive(Debug, Clone)]
pub struct Offset {
    pub inner: Arc<dyn Regressor>,
    pub delta: f64,
}

impl Regressor for Offset {
    fn predict(&self, x: &[f64]) -> f64 {
        self.inner.predict(x) + self.delta
    }
}

/// Shifts another probability model on the logit scale.
#[derive(Debug, Clone)]
pub struct LogitShift {
    pub inner: Arc<dyn ProbabilityModel>,
    pub delta: f64,
}

impl ProbabilityModel for LogitShift {
    fn probability(&self, x: &[f64]) -> f64 {
        let p = self.inner.probability(x);
        sigmoid(logit(p) + self.delta)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Solves the symmetric positive (semi)definite system, flagging near-singular
/// pivots.
fn solve_spd(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>, NuisanceError> {
    let max_diag = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let chol = a
        .cholesky()
        .ok_or_else(|| NuisanceError::Singular(what.to_owned()))?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if !(min_pivot > 1e-12 * max_diag.max(f64::MIN_POSITIVE)) {
        return Err(NuisanceError::Singular(what.to_owned()));
    }
    Ok(chol.solve(&b))
}

/// Gram matrix ΦᵀWΦ and ΦᵀWv of a row-major design.
fn weighted_normal_equations(design: &[f64], p: usize, w: &[f64], v: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for (k, row) in design.chunks_exact(p).enumerate() {
        let wk = w[k];
        for i in 0..p {
            let ri = row[i] * wk;
            rhs[i] += ri * v[k];
            for j in i..p {
                gram[(i, j)] += ri * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    (gram, rhs)
}

/// Ridge least squares on an explicit set of rows. Penalizes every
/// coefficient except the intercept.
pub fn fit_ridge<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    targets: &[f64],
    map: &FeatureMap,
    ridge: f64,
    what: &str,
) -> Result<LinearModel, NuisanceError> {
    if !(ridge >= 0.0) {
        return Err(NuisanceError::Config(format!("ridge must be nonnegative, got {ridge}")));
    }
    let p = map.p_out();
    let design = map.design(rows);
    let n = design.len() / p;
    assert_eq!(n, targets.len());
    if n < p {
        return Err(NuisanceError::InsufficientRows {
            what: what.to_owned(),
            needed: p,
            found: n,
        });
    }
    let ones = vec![1.0; n];
    let (mut gram, rhs) = weighted_normal_equations(&design, p, &ones, targets);
    for j in 1..p {
        gram[(j, j)] += ridge;
    }
    let coef = solve_spd(gram, rhs, what)?;
    Ok(LinearModel {
        map: map.clone(),
        coef: coef.iter().copied().collect(),
    })
}

/// Outcome regression μ̂_arm fitted on source rows with treatment = arm.
pub fn fit_outcome(
    ds: &CombinedDataset,
    arm: u8,
    map: &FeatureMap,
    ridge: f64,
) -> Result<LinearModel, NuisanceError> {
    let rows: Vec<usize> = (0..ds.len()).collect();
    fit_outcome_on(ds, &rows, arm, map, ridge)
}

fn fit_outcome_on(
    ds: &CombinedDataset,
    rows: &[usize],
    arm: u8,
    map: &FeatureMap,
    ridge: f64,
) -> Result<LinearModel, NuisanceError> {
    let idx: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&i| ds.is_source(i) && ds.treatment(i) == Some(arm))
        .collect();
    let y: Vec<f64> = idx.iter().map(|&i| ds.outcome(i).expect("source row has outcome")).collect();
    fit_ridge(idx.iter().map(|&i| ds.row(i)), &y, map, ridge, &format!("mu{arm}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrlsOptions {
    pub ridge: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            ridge: 1e-2,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

fn penalized_loglik(design: &[f64], p: usize, labels: &[f64], beta: &[f64], ridge: f64) -> f64 {
    let ll: f64 = design
        .chunks_exact(p)
        .zip(labels)
        .map(|(row, &y)| {
            let eta = dot(row, beta);
            if y > 0.5 {
                -softplus(-eta)
            } else {
                -softplus(eta)
            }
        })
        .sum();
    let pen: f64 = beta[1..].iter().map(|b| b * b).sum();
    ll - 0.5 * ridge * pen
}

/// Ridge-penalized logistic regression by IRLS with step halving.
pub fn fit_logistic<'a>(
    labels: &[u8],
    rows: impl IntoIterator<Item = &'a [f64]>,
    map: &FeatureMap,
    opts: IrlsOptions,
    what: &str,
) -> Result<LogisticModel, NuisanceError> {
    if !(opts.ridge >= 0.0) {
        return Err(NuisanceError::Config(format!("ridge must be nonnegative, got {}", opts.ridge)));
    }
    let p = map.p_out();
    let design = map.design(rows);
    let n = design.len() / p;
    assert_eq!(n, labels.len());
    let ones = labels.iter().filter(|&&l| l == 1).count();
    if ones == 0 || ones == n {
        return Err(NuisanceError::SingleClass(what.to_owned()));
    }
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let mut beta = vec![0.0; p];
    let mut obj = penalized_loglik(&design, p, &y, &beta, opts.ridge);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    while iterations < opts.max_iter {
        iterations += 1;
        for (k, row) in design.chunks_exact(p).enumerate() {
            let mu = sigmoid(dot(row, &beta));
            w[k] = mu * (1.0 - mu);
            z[k] = y[k] - mu;
        }
        let ones_w = vec![1.0; n];
        let (_, score) = weighted_normal_equations(&design, p, &ones_w, &z);
        let (mut hess, _) = weighted_normal_equations(&design, p, &w, &z);
        let mut grad = score;
        for j in 1..p {
            hess[(j, j)] += opts.ridge;
            grad[j] -= opts.ridge * beta[j];
        }
        let delta = match solve_spd(hess, grad, what) {
            Ok(d) => d,
            Err(_) if opts.ridge == 0.0 => return Err(NuisanceError::Separation(what.to_owned())),
            Err(e) => return Err(e),
        };
        let mut step = 1.0;
        let mut cand;
        let mut cand_obj;
        loop {
            cand = beta.iter().zip(delta.iter()).map(|(b, d)| b + step * d).collect::<Vec<_>>();
            cand_obj = penalized_loglik(&design, p, &y, &cand, opts.ridge);
            if cand_obj >= obj || step < 1e-10 {
                break;
            }
            step *= 0.5;
        }
        let max_change = delta.iter().fold(0.0f64, |m, d| m.max((step * d).abs()));
        if cand_obj >= obj {
            beta = cand;
            obj = cand_obj;
            trace.push(obj);
        }
        if max_change < opts.tol || step < 1e-10 {
            converged = max_change < opts.tol;
            break;
        }
    }
    if opts.ridge == 0.0 {
        let separated = design.chunks_exact(p).zip(&y).all(|(row, &yk)| {
            let eta = dot(row, &beta);
            (yk > 0.5 && eta > 0.0) || (yk < 0.5 && eta < 0.0)
        });
        let max_coef = beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        if separated && (!converged || max_coef > 1e3) {
            return Err(NuisanceError::Separation(what.to_owned()));
        }
    }
    Ok(LogisticModel {
        map: map.clone(),
        coef: beta,
        iterations,
        converged,
        objective_trace: trace,
    })
}

/// Propensity score ê₁: logistic regression of treatment on source rows.
pub fn fit_propensity(ds: &CombinedDataset, map: &FeatureMap, opts: IrlsOptions) -> Result<LogisticModel, NuisanceError> {
    let rows: Vec<usize> = (0..ds.len()).collect();
    fit_propensity_on(ds, &rows, map, opts)
}

fn fit_propensity_on(
    ds: &CombinedDataset,
    rows: &[usize],
    map: &FeatureMap,
    opts: IrlsOptions,
) -> Result<LogisticModel, NuisanceError> {
    let idx: Vec<usize> = rows.iter().copied().filter(|&i| ds.is_source(i)).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| ds.treatment(i).expect("source row has treatment")).collect();
    fit_logistic(&labels, idx.iter().map(|&i| ds.row(i)), map, opts, "e1")
}

/// Sampling score ŝ: logistic regression of the group indicator on all rows.
pub fn fit_sampling_score(
    ds: &CombinedDataset,
    map: &FeatureMap,
    opts: IrlsOptions,
) -> Result<LogisticModel, NuisanceError> {
    let rows: Vec<usize> = (0..ds.len()).collect();
    fit_sampling_score_on(ds, &rows, map, opts)
}

fn fit_sampling_score_on(
    ds: &CombinedDataset,
    rows: &[usize],
    map: &FeatureMap,
    opts: IrlsOptions,
) -> Result<LogisticModel, NuisanceError> {
    let labels: Vec<u8> = rows.iter().map(|&i| ds.group(i)).collect();
    fit_logistic(&labels, rows.iter().map(|&i| ds.row(i)), map, opts, "s")
}

/// Settings for fitting the four nuisance models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    pub outcome_features: FeatureKind,
    pub propensity_features: FeatureKind,
    pub sampling_features: FeatureKind,
    /// Standardize covariates (using all rows) before feature expansion.
    pub standardize: bool,
    pub outcome_ridge: f64,
    pub logistic_ridge: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub clip: f64,
    /// Number of cross-fitting folds; 0 or 1 disables cross-fitting.
    pub cross_fit_folds: usize,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            outcome_features: FeatureKind::Raw,
            propensity_features: FeatureKind::Raw,
            sampling_features: FeatureKind::Quadratic,
            standardize: true,
            outcome_ridge: 1e-4,
            logistic_ridge: 1e-2,
            max_iter: 100,
            tol: 1e-8,
            clip: 0.01,
            cross_fit_folds: 0,
        }
    }
}

impl NuisanceConfig {
    pub fn irls(&self) -> IrlsOptions {
        IrlsOptions {
            ridge: self.logistic_ridge,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }

    pub fn validate(&self) -> Result<(), NuisanceError> {
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return Err(NuisanceError::Config(format!("clip must lie in (0, 0.5), got {}", self.clip)));
        }
        if self.cross_fit_folds == 1 {
            return Err(NuisanceError::Config("cross_fit_folds must be 0 or at least 2".into()));
        }
        Ok(())
    }
}

/// The four nuisance functions.
#[derive(Debug, Clone)]
pub struct NuisanceModels {
    pub mu0: Arc<dyn Regressor>,
    pub mu1: Arc<dyn Regressor>,
    pub e1: Arc<dyn ProbabilityModel>,
    pub s: Arc<dyn ProbabilityModel>,
}

impl NuisanceModels {
    pub fn raw(&self, x: &[f64]) -> NuisanceValues {
        NuisanceValues {
            mu0: self.mu0.predict(x),
            mu1: self.mu1.predict(x),
            e1: self.e1.probability(x),
            s: self.s.probability(x),
        }
    }

    pub fn coefficients(&self) -> NuisanceCoefficients {
        NuisanceCoefficients {
            mu0: self.mu0.coefficients(),
            mu1: self.mu1.coefficients(),
            e1: self.e1.coefficients(),
            s: self.s.coefficients(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceCoefficients {
    pub mu0: Option<Vec<f64>>,
    pub mu1: Option<Vec<f64>>,
    pub e1: Option<Vec<f64>>,
    pub s: Option<Vec<f64>>,
}

/// Models fitted with one fold held out, plus the fold of every row.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub fold_of_row: Vec<usize>,
    /// `models[k]` was fitted without fold `k`.
    pub models: Vec<NuisanceModels>,
}

/// Nuisance predictions at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceValues {
    pub mu0: f64,
    pub mu1: f64,
    pub e1: f64,
    pub s: f64,
}

impl NuisanceValues {
    pub fn clipped(self, clip: f64) -> Self {
        Self {
            e1: self.e1.clamp(clip, 1.0 - clip),
            s: self.s.clamp(clip, 1.0 - clip),
            ..self
        }
    }

    pub fn mu(&self, arm: u8) -> f64 {
        if arm == 1 {
            self.mu1
        } else {
            self.mu0
        }
    }

    /// e_arm(x): e₁ for arm 1, 1 − e₁ for arm 0.
    pub fn e(&self, arm: u8) -> f64 {
        if arm == 1 {
            self.e1
        } else {
            1.0 - self.e1
        }
    }
}

/// Fitted (or known) nuisance functions with the clipping floor.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    pub models: NuisanceModels,
    pub cross_fit: Option<CrossFit>,
    pub clip: f64,
}

impl NuisanceSet {
    pub fn new(models: NuisanceModels, clip: f64) -> Self {
        Self {
            models,
            cross_fit: None,
            clip,
        }
    }

    /// Clipped predictions at an arbitrary point, from the full-data models.
    pub fn predict_clipped(&self, x: &[f64]) -> NuisanceValues {
        self.models.raw(x).clipped(self.clip)
    }

    fn models_for_row(&self, row: usize) -> &NuisanceModels {
        match &self.cross_fit {
            Some(cf) if row < cf.fold_of_row.len() => &cf.models[cf.fold_of_row[row]],
            _ => &self.models,
        }
    }

    /// Clipped prediction at training row `row`; under cross-fitting this
    /// comes from the model that did not see the row's fold.
    pub fn predict_row(&self, ds: &CombinedDataset, row: usize) -> NuisanceValues {
        self.models_for_row(row).raw(ds.row(row)).clipped(self.clip)
    }

    /// Clipped predictions at every row.
    pub fn evaluate(&self, ds: &CombinedDataset) -> Vec<NuisanceValues> {
        (0..ds.len()).map(|i| self.predict_row(ds, i)).collect()
    }

    /// Unclipped predictions at every row.
    pub fn evaluate_raw(&self, ds: &CombinedDataset) -> Vec<NuisanceValues> {
        (0..ds.len()).map(|i| self.models_for_row(i).raw(ds.row(i))).collect()
    }
}

/// Deterministic fold assignment, stratified by group: the k-th row of each
/// group goes to fold k mod `folds`.
pub fn assign_folds(ds: &CombinedDataset, folds: usize) -> Vec<usize> {
    let mut counters = [0usize; 2];
    (0..ds.len())
        .map(|i| {
            let g = usize::from(ds.group(i).min(1));
            let f = counters[g] % folds;
            counters[g] += 1;
            f
        })
        .collect()
}

fn fit_models_on(
    ds: &CombinedDataset,
    rows: &[usize],
    cfg: &NuisanceConfig,
    st: &Option<Standardization>,
) -> Result<NuisanceModels, NuisanceError> {
    let p = ds.n_features();
    let map = |kind| FeatureMap {
        kind,
        p_in: p,
        standardization: st.clone(),
    };
    let out_map = map(cfg.outcome_features);
    let mu0 = fit_outcome_on(ds, rows, 0, &out_map, cfg.outcome_ridge)?;
    let mu1 = fit_outcome_on(ds, rows, 1, &out_map, cfg.outcome_ridge)?;
    let e1 = fit_propensity_on(ds, rows, &map(cfg.propensity_features), cfg.irls())?;
    let s = fit_sampling_score_on(ds, rows, &map(cfg.sampling_features), cfg.irls())?;
    Ok(NuisanceModels {
        mu0: Arc::new(mu0),
        mu1: Arc::new(mu1),
        e1: Arc::new(e1),
        s: Arc::new(s),
    })
}

/// Fits μ̂₀, μ̂₁, ê₁, ŝ on the dataset, optionally with cross-fitting.
pub fn fit_nuisances(ds: &CombinedDataset, cfg: &NuisanceConfig) -> Result<NuisanceSet, NuisanceError> {
    cfg.validate()?;
    let st = cfg
        .standardize
        .then(|| Standardization::fit(ds.rows(), ds.n_features()));
    let all: Vec<usize> = (0..ds.len()).collect();
    let models = fit_models_on(ds, &all, cfg, &st)?;
    let cross_fit = if cfg.cross_fit_folds >= 2 {
        let fold_of_row = assign_folds(ds, cfg.cross_fit_folds);
        let models = (0..cfg.cross_fit_folds)
            .map(|k| {
                let rows: Vec<usize> = all.iter().copied().filter(|&i| fold_of_row[i] != k).collect();
                fit_models_on(ds, &rows, cfg, &st)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Some(CrossFit { fold_of_row, models })
    } else {
        None
    };
    Ok(NuisanceSet {
        models,
        cross_fit,
        clip: cfg.clip,
    })
}
