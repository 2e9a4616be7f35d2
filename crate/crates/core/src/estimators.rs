//! Reward estimators for a policy applied to the target domain (R) or to the
//! whole population (V).
//!
//! Every estimator is affine in the policy values: with πᵢ = π(Xᵢ) it equals
//! meanᵢ[πᵢ·aᵢ + bᵢ]. [`RewardCoefficients`] stores (aᵢ, bᵢ), so evaluating a
//! new policy is a single pass and the policy learner can differentiate
//! through it directly.
//!
//! Per-row contributions with w(x) = (1 − ŝ(x))/ŝ(x) and q = n₁/n:
//!
//! | estimator | source row, π = 1 | source row, π = 0 | target row, π = 1 | target row, π = 0 |
//! |-----------|-------------------|-------------------|-------------------|-------------------|
//! | Direct R  | 0 | 0 | μ̂₁/(1−q) | μ̂₀/(1−q) |
//! | IPW R     | A·Y·w/(ê₁(1−q)) | (1−A)·Y·w/((1−ê₁)(1−q)) | 0 | 0 |
//! | SE R      | A(Y−μ̂₁)w/(ê₁(1−q)) | (1−A)(Y−μ̂₀)w/((1−ê₁)(1−q)) | μ̂₁/(1−q) | μ̂₀/(1−q) |
//! | SE V      | μ̂₁ + A(Y−μ̂₁)/(ŝê₁) | μ̂₀ + (1−A)(Y−μ̂₀)/(ŝ(1−ê₁)) | μ̂₁ | μ̂₀ |

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CombinedDataset;
use crate::nuisance::{NuisanceSet, NuisanceValues};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("policy has {got} values but the dataset has {expected} rows")]
    LengthMismatch { expected: usize, got: usize },
    #[error("policy value {value} at row {row} is outside [0, 1]")]
    PolicyRange { row: usize, value: f64 },
    #[error("eta must lie in (0, 1), got {0}")]
    Eta(f64),
    #[error("policy class size must be at least 1")]
    ClassSize,
    #[error("{0} is not available for the entire-population reward")]
    Unsupported(EstimatorKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Direct,
    Ipw,
    Se,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Direct, EstimatorKind::Ipw, EstimatorKind::Se];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Direct => "direct",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Se => "se",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "direct" => Ok(EstimatorKind::Direct),
            "ipw" => Ok(EstimatorKind::Ipw),
            "se" => Ok(EstimatorKind::Se),
            other => Err(format!("unknown method `{other}` (expected direct, ipw or se)")),
        }
    }
}

/// Which population the reward refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    /// R(π): the target domain.
    TargetReward,
    /// V(π): source and target together.
    EntireReward,
}

impl std::str::FromStr for Estimand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "r" | "target" => Ok(Estimand::TargetReward),
            "v" | "entire" => Ok(Estimand::EntireReward),
            other => Err(format!("unknown estimand `{other}` (expected r or v)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardCoefficients {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub estimand: Estimand,
    pub kind: EstimatorKind,
    /// Per-row weight cᵢ of the value in the influence values
    /// πᵢaᵢ + bᵢ − cᵢ·value; `None` means cᵢ = 1 for every row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centering: Option<Vec<f64>>,
}

impl RewardCoefficients {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// meanᵢ[πᵢ·aᵢ + bᵢ] without any checks.
    pub fn value(&self, policy_values: &[f64]) -> f64 {
        let s: f64 = policy_values
            .iter()
            .zip(self.a.iter().zip(&self.b))
            .map(|(p, (a, b))| p * a + b)
            .sum();
        s / self.a.len() as f64
    }

    /// Builds coefficients from per-row contributions at π = 1 and π = 0.
    fn from_on_off(on_off: impl Iterator<Item = (f64, f64)>, estimand: Estimand, kind: EstimatorKind) -> Self {
        let (a, b) = on_off.map(|(on, off)| (on - off, off)).unzip();
        Self {
            a,
            b,
            estimand,
            kind,
            centering: None,
        }
    }
}

/// Builds coefficients of the requested kind from precomputed clipped
/// nuisance values.
pub fn coefficients_from_values(
    ds: &CombinedDataset,
    values: &[NuisanceValues],
    kind: EstimatorKind,
    estimand: Estimand,
) -> Result<RewardCoefficients, EstimatorError> {
    assert_eq!(values.len(), ds.len());
    let q = ds.source_fraction();
    let tq = 1.0 - q;
    let rows = (0..ds.len()).map(|i| (i, values[i]));
    let coeffs = match (estimand, kind) {
        (Estimand::TargetReward, EstimatorKind::Direct) => RewardCoefficients::from_on_off(
            rows.map(|(i, v)| {
                if ds.is_source(i) {
                    (0.0, 0.0)
                } else {
                    (v.mu1 / tq, v.mu0 / tq)
                }
            }),
            estimand,
            kind,
        ),
        (Estimand::TargetReward, EstimatorKind::Ipw) => RewardCoefficients::from_on_off(
            rows.map(|(i, v)| match source_obs(ds, i) {
                Some((a, y)) => {
                    let w = (1.0 - v.s) / v.s;
                    (a * y * w / (v.e1 * tq), (1.0 - a) * y * w / ((1.0 - v.e1) * tq))
                }
                None => (0.0, 0.0),
            }),
            estimand,
            kind,
        ),
        (Estimand::TargetReward, EstimatorKind::Se) => RewardCoefficients::from_on_off(
            rows.map(|(i, v)| match source_obs(ds, i) {
                Some((a, y)) => {
                    let w = (1.0 - v.s) / v.s;
                    (
                        a * (y - v.mu1) * w / (v.e1 * tq),
                        (1.0 - a) * (y - v.mu0) * w / ((1.0 - v.e1) * tq),
                    )
                }
                None => (v.mu1 / tq, v.mu0 / tq),
            }),
            estimand,
            kind,
        ),
        (Estimand::EntireReward, EstimatorKind::Se) => RewardCoefficients::from_on_off(
            rows.map(|(i, v)| match source_obs(ds, i) {
                Some((a, y)) => (
                    v.mu1 + a * (y - v.mu1) / (v.s * v.e1),
                    v.mu0 + (1.0 - a) * (y - v.mu0) / (v.s * (1.0 - v.e1)),
                ),
                None => (v.mu1, v.mu0),
            }),
            estimand,
            kind,
        ),
        (Estimand::EntireReward, other) => return Err(EstimatorError::Unsupported(other)),
    };
    // The R influence function subtracts R only on target rows, scaled by
    // 1/(1−q); with q = n₁/n these weights still average to one.
    let centering = (estimand == Estimand::TargetReward)
        .then(|| (0..ds.len()).map(|i| if ds.is_source(i) { 0.0 } else { 1.0 / tq }).collect());
    Ok(RewardCoefficients { centering, ..coeffs })
}

fn source_obs(ds: &CombinedDataset, i: usize) -> Option<(f64, f64)> {
    if !ds.is_source(i) {
        return None;
    }
    let a = ds.treatment(i).expect("source row has treatment");
    let y = ds.outcome(i).expect("source row has outcome");
    Some((f64::from(a), y))
}

pub fn coefficients(
    ds: &CombinedDataset,
    nuisances: &NuisanceSet,
    kind: EstimatorKind,
    estimand: Estimand,
) -> Result<RewardCoefficients, EstimatorError> {
    coefficients_from_values(ds, &nuisances.evaluate(ds), kind, estimand)
}

pub fn coefficients_direct_r(ds: &CombinedDataset, nuisances: &NuisanceSet) -> RewardCoefficients {
    coefficients(ds, nuisances, EstimatorKind::Direct, Estimand::TargetReward).expect("direct R is supported")
}

pub fn coefficients_ipw_r(ds: &CombinedDataset, nuisances: &NuisanceSet) -> RewardCoefficients {
    coefficients(ds, nuisances, EstimatorKind::Ipw, Estimand::TargetReward).expect("IPW R is supported")
}

pub fn coefficients_se_r(ds: &CombinedDataset, nuisances: &NuisanceSet) -> RewardCoefficients {
    coefficients(ds, nuisances, EstimatorKind::Se, Estimand::TargetReward).expect("SE R is supported")
}

pub fn coefficients_se_v(ds: &CombinedDataset, nuisances: &NuisanceSet) -> RewardCoefficients {
    coefficients(ds, nuisances, EstimatorKind::Se, Estimand::EntireReward).expect("SE V is supported")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEstimate {
    pub value: f64,
    pub kind: EstimatorKind,
    pub estimand: Estimand,
    /// Plug-in influence values πᵢaᵢ + bᵢ − cᵢ·value (SE only); they average to zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub influence_values: Option<Vec<f64>>,
    /// Sample SD of the influence values over √n (SE only).
    pub std_error: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl RewardEstimate {
    pub fn without_influence(mut self) -> Self {
        self.influence_values = None;
        self
    }
}

/// Evaluates the estimator at the given policy values.
pub fn estimate(coeffs: &RewardCoefficients, policy_values: &[f64]) -> Result<RewardEstimate, EstimatorError> {
    if policy_values.len() != coeffs.len() {
        return Err(EstimatorError::LengthMismatch {
            expected: coeffs.len(),
            got: policy_values.len(),
        });
    }
    if let Some((row, &value)) = policy_values
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= 0.0 && **v <= 1.0))
    {
        return Err(EstimatorError::PolicyRange { row, value });
    }
    let contributions: Vec<f64> = policy_values
        .iter()
        .zip(coeffs.a.iter().zip(&coeffs.b))
        .map(|(p, (a, b))| p * a + b)
        .collect();
    let n = contributions.len() as f64;
    let value = contributions.iter().sum::<f64>() / n;
    let mut est = RewardEstimate {
        value,
        kind: coeffs.kind,
        estimand: coeffs.estimand,
        influence_values: None,
        std_error: None,
        ci_low: None,
        ci_high: None,
    };
    if coeffs.kind == EstimatorKind::Se {
        let infl: Vec<f64> = match &coeffs.centering {
            Some(w) => contributions.iter().zip(w).map(|(c, w)| c - w * value).collect(),
            None => contributions.iter().map(|c| c - value).collect(),
        };
        let sd = if infl.len() > 1 {
            (infl.iter().map(|v| v * v).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let se = sd / n.sqrt();
        est.std_error = Some(se);
        est.ci_low = Some(value - Z_95 * se);
        est.ci_high = Some(value + Z_95 * se);
        est.influence_values = Some(infl);
    }
    Ok(est)
}

/// Signed bias expression of the SE estimator of R(π):
///
/// (1/n) Σᵢ Σₐ πₐ(Xᵢ)(μₐ − μ̂ₐ)/(1−q) · [s·eₐ·(1−ŝ) − ŝ·êₐ·(1−s)] / (êₐ·ŝ)
///
/// with π₁ = π, π₀ = 1 − π, e₀ = 1 − e₁. `truth` holds unclipped true
/// nuisance values, `fitted` the clipped values the estimator used.
pub fn signed_bias_expression(
    ds: &CombinedDataset,
    truth: &[NuisanceValues],
    fitted: &[NuisanceValues],
    policy_values: &[f64],
) -> Result<f64, EstimatorError> {
    let n = ds.len();
    if policy_values.len() != n {
        return Err(EstimatorError::LengthMismatch { expected: n, got: policy_values.len() });
    }
    assert!(truth.len() == n && fitted.len() == n);
    let tq = 1.0 - ds.source_fraction();
    let total: f64 = (0..n)
        .map(|i| {
            let (t, f, pi) = (truth[i], fitted[i], policy_values[i]);
            [(1u8, pi), (0u8, 1.0 - pi)]
                .iter()
                .map(|&(arm, w)| {
                    let gap = t.mu(arm) - f.mu(arm);
                    let ratio = (t.s * t.e(arm) * (1.0 - f.s) - f.s * f.e(arm) * (1.0 - t.s)) / (f.e(arm) * f.s);
                    w * gap / tq * ratio
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

/// Absolute bias of the SE estimator given true and fitted nuisances.
pub fn bias_diagnostic(
    ds: &CombinedDataset,
    true_nuisances: &NuisanceSet,
    fitted_nuisances: &NuisanceSet,
    policy_values: &[f64],
) -> Result<f64, EstimatorError> {
    let truth = true_nuisances.evaluate_raw(ds);
    let fitted = fitted_nuisances.evaluate(ds);
    signed_bias_expression(ds, &truth, &fitted, policy_values).map(f64::abs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub eta: f64,
    pub policy_class_size: u64,
    pub bound_term: f64,
    pub bias_diagnostic: Option<f64>,
}

/// Uniform deviation term for a finite policy class:
///
/// √( log(2|Π|/η) / (2n²) · Σ_source (Yᵢ − μ̂_{Aᵢ})²(1 − ŝ)² / ((1−q)² ê_{Aᵢ}² ŝ²) )
pub fn generalization_bound_from_values(
    ds: &CombinedDataset,
    values: &[NuisanceValues],
    eta: f64,
    policy_class_size: u64,
) -> Result<BoundReport, EstimatorError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(EstimatorError::Eta(eta));
    }
    if policy_class_size == 0 {
        return Err(EstimatorError::ClassSize);
    }
    let n = ds.len() as f64;
    let tq = 1.0 - ds.source_fraction();
    let sum: f64 = (0..ds.len())
        .filter_map(|i| {
            let (a, y) = source_obs(ds, i)?;
            let v = values[i];
            let arm = if a > 0.5 { 1 } else { 0 };
            let r = y - v.mu(arm);
            let num = r * r * (1.0 - v.s).powi(2);
            let den = tq * tq * v.e(arm).powi(2) * v.s * v.s;
            Some(num / den)
        })
        .sum();
    let log_term = 2f64.ln() + (policy_class_size as f64).ln() - eta.ln();
    let bound_term = (log_term / (2.0 * n * n) * sum).sqrt();
    Ok(BoundReport {
        eta,
        policy_class_size,
        bound_term,
        bias_diagnostic: None,
    })
}

pub fn generalization_bound(
    ds: &CombinedDataset,
    nuisances: &NuisanceSet,
    eta: f64,
    policy_class_size: u64,
) -> Result<BoundReport, EstimatorError> {
    generalization_bound_from_values(ds, &nuisances.evaluate(ds), eta, policy_class_size)
}

/// Default class size for a continuous parametric policy: 10^p_out, saturating.
pub fn default_policy_class_size(p_out: usize) -> u64 {
    10u64.checked_pow(p_out as u32).unwrap_or(u64::MAX)
}
