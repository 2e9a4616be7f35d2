//! Evaluation of a policy against known potential outcomes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CombinedDataset, PotentialOutcomes};
use crate::policy::{OraclePolicy, Policy, PolicyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("potential outcomes cover {got} rows, dataset has {expected}")]
    MissingPotentialOutcomes { expected: usize, got: usize },
    #[error("decision vector has {got} entries, dataset has {expected}")]
    DecisionLength { expected: usize, got: usize },
    #[error("no target rows")]
    EmptyTarget,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Rows summed by the welfare change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WelfareScope {
    /// Every row, source and target.
    #[default]
    All,
    Target,
}

impl std::str::FromStr for WelfareScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(WelfareScope::All),
            "target" => Ok(WelfareScope::Target),
            other => Err(format!("unknown welfare scope `{other}` (expected target or all)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// n₀⁻¹ Σ_target [π Y(1) + (1 − π) Y(0)].
    pub true_reward: f64,
    /// Oracle true reward minus this policy's true reward.
    pub regret: f64,
    /// Disagreement rate with the oracle on target rows.
    pub policy_error: f64,
    /// Σ (Y(1) − Y(0)) π over the welfare scope.
    pub welfare_change: f64,
}

/// Target-domain reward of hard decisions under the potential outcomes.
pub fn true_reward(ds: &CombinedDataset, po: &PotentialOutcomes, decisions: &[f64]) -> Result<f64, MetricsError> {
    check(ds, po, decisions)?;
    let idx = ds.target_indices();
    if idx.is_empty() {
        return Err(MetricsError::EmptyTarget);
    }
    let s: f64 = idx
        .iter()
        .map(|&i| decisions[i] * po.y1[i] + (1.0 - decisions[i]) * po.y0[i])
        .sum();
    Ok(s / idx.len() as f64)
}

fn check(ds: &CombinedDataset, po: &PotentialOutcomes, decisions: &[f64]) -> Result<(), MetricsError> {
    if po.y1.len() != ds.len() || po.y0.len() != ds.len() {
        return Err(MetricsError::MissingPotentialOutcomes {
            expected: ds.len(),
            got: po.y1.len().min(po.y0.len()),
        });
    }
    if decisions.len() != ds.len() {
        return Err(MetricsError::DecisionLength {
            expected: ds.len(),
            got: decisions.len(),
        });
    }
    Ok(())
}

/// Computes all metrics from per-row hard decisions (0.0/1.0) of the policy
/// and of the oracle.
pub fn evaluate_decisions(
    ds: &CombinedDataset,
    po: &PotentialOutcomes,
    decisions: &[f64],
    oracle_decisions: &[f64],
    scope: WelfareScope,
) -> Result<EvalMetrics, MetricsError> {
    check(ds, po, decisions)?;
    check(ds, po, oracle_decisions)?;
    let reward = true_reward(ds, po, decisions)?;
    let oracle_reward = true_reward(ds, po, oracle_decisions)?;
    let target = ds.target_indices();
    let policy_error = target
        .iter()
        .map(|&i| (oracle_decisions[i] - decisions[i]).powi(2))
        .sum::<f64>()
        / target.len() as f64;
    let welfare_change = (0..ds.len())
        .filter(|&i| scope == WelfareScope::All || !ds.is_source(i))
        .map(|i| (po.y1[i] - po.y0[i]) * decisions[i])
        .sum();
    Ok(EvalMetrics {
        true_reward: reward,
        regret: oracle_reward - reward,
        policy_error,
        welfare_change,
    })
}

pub fn oracle_decisions<F: Fn(&[f64]) -> f64>(
    ds: &CombinedDataset,
    oracle: &OraclePolicy<F>,
) -> Result<Vec<f64>, PolicyError> {
    ds.rows().map(|x| oracle.decision(x).map(f64::from)).collect()
}

pub fn evaluate_policy<F: Fn(&[f64]) -> f64>(
    policy: &Policy,
    oracle: &OraclePolicy<F>,
    ds: &CombinedDataset,
    po: &PotentialOutcomes,
    scope: WelfareScope,
) -> Result<EvalMetrics, MetricsError> {
    let decisions = policy.decisions(ds);
    let oracle = oracle_decisions(ds, oracle)?;
    evaluate_decisions(ds, po, &decisions, &oracle, scope)
}
