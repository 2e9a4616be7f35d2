//! Policy class, oracle policy and the gradient-based policy learner.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CombinedDataset;
use crate::estimators::RewardCoefficients;
use crate::features::{dot, FeatureKind, FeatureMap, Standardization};
use crate::nuisance::sigmoid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("CATE value is not finite: {0}")]
    NonFiniteCate(f64),
    #[error("non-finite gradient at epoch {epoch}")]
    NonFiniteGradient { epoch: usize },
    #[error("invalid learner configuration: {0}")]
    Config(String),
    #[error("coefficients cover {coeffs} rows but {rows} covariate rows were given")]
    Mismatch { coeffs: usize, rows: usize },
    #[error("no target rows to evaluate on")]
    EmptyTarget,
}

/// Linear-logistic policy: treat iff θ·φ(x) ≥ 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub theta: Vec<f64>,
    pub temperature: f64,
    pub map: FeatureMap,
}

impl Policy {
    pub fn score(&self, x: &[f64]) -> f64 {
        dot(&self.theta, &self.map.expand(x))
    }

    /// σ(θ·φ(x)/T) in (0, 1).
    pub fn smooth_value(&self, x: &[f64]) -> f64 {
        sigmoid(self.score(x) / self.temperature)
    }

    pub fn hard_value(&self, x: &[f64]) -> u8 {
        u8::from(self.score(x) >= 0.0)
    }

    /// Hard decisions at every dataset row, as 0.0/1.0.
    pub fn decisions(&self, ds: &CombinedDataset) -> Vec<f64> {
        ds.rows().map(|x| f64::from(self.hard_value(x))).collect()
    }
}

/// Oracle rule: treat iff the CATE is nonnegative.
pub fn oracle_decision(cate_value: f64) -> Result<u8, PolicyError> {
    if !cate_value.is_finite() {
        return Err(PolicyError::NonFiniteCate(cate_value));
    }
    Ok(u8::from(cate_value >= 0.0))
}

/// Oracle policy built from a known CATE function.
pub struct OraclePolicy<F> {
    pub cate: F,
}

impl<F: Fn(&[f64]) -> f64> OraclePolicy<F> {
    pub fn new(cate: F) -> Self {
        Self { cate }
    }

    pub fn decision(&self, x: &[f64]) -> Result<u8, PolicyError> {
        oracle_decision((self.cate)(x))
    }
}

/// Disagreement rate between the policy and the oracle on target rows.
pub fn policy_error<'a, F: Fn(&[f64]) -> f64>(
    policy: &Policy,
    oracle: &OraclePolicy<F>,
    target_rows: impl IntoIterator<Item = &'a [f64]>,
) -> Result<f64, PolicyError> {
    let mut n = 0usize;
    let mut wrong = 0usize;
    for x in target_rows {
        n += 1;
        let d = i32::from(oracle.decision(x)?) - i32::from(policy.hard_value(x));
        wrong += (d * d) as usize;
    }
    if n == 0 {
        return Err(PolicyError::EmptyTarget);
    }
    Ok(wrong as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemperatureSchedule {
    Constant { value: f64 },
    /// Geometric interpolation from `start` at the first epoch to `end` at the last.
    Geometric { start: f64, end: f64 },
}

impl TemperatureSchedule {
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        match *self {
            TemperatureSchedule::Constant { value } => value,
            TemperatureSchedule::Geometric { start, end } => {
                if epochs <= 1 {
                    end
                } else {
                    let f = epoch as f64 / (epochs - 1) as f64;
                    start * (end / start).powf(f)
                }
            }
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            TemperatureSchedule::Constant { value } => value > 0.0 && value.is_finite(),
            TemperatureSchedule::Geometric { start, end } => start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub batch_size: usize,
    pub step_size: f64,
    pub max_epochs: usize,
    pub temperature: TemperatureSchedule,
    pub features: FeatureKind,
    /// Standardize covariates before expansion, using the training rows.
    pub standardize: bool,
    pub seed: u64,
    /// Initial θ; zeros when absent.
    pub init: Option<Vec<f64>>,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            step_size: 0.05,
            max_epochs: 500,
            temperature: TemperatureSchedule::Constant { value: 1.0 },
            features: FeatureKind::Raw,
            standardize: true,
            seed: 0,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Full-data smoothed objective at initialization.
    pub initial_objective: f64,
    /// Full-data smoothed objective after each epoch.
    pub objective: Vec<f64>,
    /// Epoch whose θ was returned; `None` means the initial θ.
    pub best_epoch: Option<usize>,
    pub best_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedPolicy {
    pub policy: Policy,
    pub trace: TrainingTrace,
}

fn smoothed_objective(design: &[f64], p: usize, coeffs: &RewardCoefficients, theta: &[f64], temp: f64) -> f64 {
    let s: f64 = design
        .chunks_exact(p)
        .zip(coeffs.a.iter().zip(&coeffs.b))
        .map(|(f, (a, b))| sigmoid(dot(f, theta) / temp) * a + b)
        .sum();
    s / coeffs.len() as f64
}

/// Maximizes meanᵢ[σ(θ·φᵢ/T)·aᵢ + bᵢ] by mini-batch gradient ascent and
/// returns the θ with the best full-data objective seen.
pub fn learn_policy<'a>(
    coeffs: &RewardCoefficients,
    covariates: impl IntoIterator<Item = &'a [f64]>,
    p_in: usize,
    config: &LearnerConfig,
) -> Result<LearnedPolicy, PolicyError> {
    let rows: Vec<&[f64]> = covariates.into_iter().collect();
    let n = rows.len();
    if n != coeffs.len() {
        return Err(PolicyError::Mismatch { coeffs: coeffs.len(), rows: n });
    }
    if config.batch_size == 0 || config.batch_size > n {
        return Err(PolicyError::Config(format!(
            "batch_size must lie in 1..={n}, got {}",
            config.batch_size
        )));
    }
    if !(config.step_size > 0.0 && config.step_size.is_finite()) {
        return Err(PolicyError::Config(format!("step_size must be positive, got {}", config.step_size)));
    }
    if !config.temperature.is_valid() {
        return Err(PolicyError::Config("temperatures must be positive".into()));
    }
    let map = if config.standardize {
        FeatureMap::standardized(config.features, p_in, Standardization::fit(rows.iter().copied(), p_in))
    } else {
        FeatureMap::new(config.features, p_in)
    };
    let p = map.p_out();
    let mut theta = match &config.init {
        Some(init) if init.len() == p => init.clone(),
        Some(init) => {
            return Err(PolicyError::Config(format!("init has {} entries, feature map has {p}", init.len())))
        }
        None => vec![0.0; p],
    };
    let design = map.design(rows.iter().copied());
    let epochs = config.max_epochs;
    let final_temp = config.temperature.at(epochs.saturating_sub(1), epochs);

    let initial_objective = smoothed_objective(&design, p, coeffs, &theta, config.temperature.at(0, epochs));
    let mut best = (initial_objective, None, theta.clone());
    let mut objective = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grad = vec![0.0; p];
    for epoch in 0..epochs {
        let temp = config.temperature.at(epoch, epochs);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let f = &design[i * p..(i + 1) * p];
                let sg = sigmoid(dot(f, &theta) / temp);
                let w = coeffs.a[i] * sg * (1.0 - sg) / temp;
                for (g, fj) in grad.iter_mut().zip(f) {
                    *g += w * fj;
                }
            }
            let scale = config.step_size / batch.len() as f64;
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t += scale * g;
            }
            if theta.iter().any(|t| !t.is_finite()) {
                return Err(PolicyError::NonFiniteGradient { epoch });
            }
        }
        let obj = smoothed_objective(&design, p, coeffs, &theta, temp);
        objective.push(obj);
        if obj > best.0 {
            best = (obj, Some(epoch), theta.clone());
        }
    }
    let (best_objective, best_epoch, theta) = best;
    Ok(LearnedPolicy {
        policy: Policy {
            theta,
            temperature: final_temp,
            map,
        },
        trace: TrainingTrace {
            initial_objective,
            objective,
            best_epoch,
            best_objective,
        },
    })
}
