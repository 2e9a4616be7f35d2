//! Replicated simulation experiments: method comparison tables and sweeps.
//!
//! Replication `r` uses simulation seed `sim.seed + r`; each method's learner
//! seed is derived from that. Replications run on a dedicated thread pool and
//! are collected in index order, so reports do not depend on the worker count.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{
    coefficients_from_values, default_policy_class_size, estimate, generalization_bound_from_values,
    signed_bias_expression, BoundReport, Estimand, EstimatorError, EstimatorKind, RewardEstimate,
};
use crate::metrics::{evaluate_decisions, MetricsError, WelfareScope};
use crate::nuisance::{fit_nuisances, NuisanceCoefficients, NuisanceConfig, NuisanceError};
use crate::policy::{learn_policy, oracle_decision, LearnerConfig, PolicyError, TrainingTrace};
use crate::simulate::{generate, shift_sweep_config, treatment_sweep_config, SimConfig, SimError};
use crate::stats::{mean, paired_t_test, sample_sd};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("nuisance fit: {0}")]
    Nuisance(#[from] NuisanceError),
    #[error("estimator: {0}")]
    Estimator(#[from] EstimatorError),
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub replications: usize,
    pub methods: Vec<EstimatorKind>,
    pub welfare_scope: WelfareScope,
    /// Confidence parameter of the generalization bound.
    pub eta: f64,
    /// |Π| for the bound; defaults to 10^(policy feature dimension).
    pub policy_class_size: Option<u64>,
    /// Keep per-epoch objectives in the report.
    pub record_traces: bool,
    pub sim: SimConfig,
    pub nuisance: NuisanceConfig,
    pub learner: LearnerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            replications: 50,
            methods: EstimatorKind::ALL.to_vec(),
            welfare_scope: WelfareScope::All,
            eta: 0.05,
            policy_class_size: None,
            record_traces: true,
            sim: SimConfig::default(),
            nuisance: NuisanceConfig::default(),
            learner: LearnerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Learner seed for a method within a replication.
pub fn learner_seed(base: u64, rep_seed: u64, method: EstimatorKind) -> u64 {
    let stream = method as u64 + 1;
    splitmix64(base ^ splitmix64(rep_seed) ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: EstimatorKind,
    pub true_reward: f64,
    pub regret: f64,
    pub policy_error: f64,
    pub welfare_change: f64,
    pub treated_fraction_target: f64,
    /// The method's own estimate of R at its learned hard policy.
    pub estimate: RewardEstimate,
    /// SE estimate of R at this method's learned policy.
    pub se_estimate: RewardEstimate,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TrainingTrace>,
    /// Bound term and bias diagnostic at this method's learned policy.
    pub bound: BoundReport,
    /// Signed bias expression with the true nuisances.
    pub signed_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub index: usize,
    pub seed: u64,
    pub oracle_true_reward: f64,
    pub oracle_treated_fraction_target: f64,
    pub nuisance_coefficients: NuisanceCoefficients,
    pub methods: Vec<MethodResult>,
}

impl ReplicationResult {
    pub fn method(&self, kind: EstimatorKind) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub index: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TrueReward,
    Regret,
    PolicyError,
    WelfareChange,
    EstimatedReward,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::TrueReward,
        Metric::Regret,
        Metric::PolicyError,
        Metric::WelfareChange,
        Metric::EstimatedReward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::TrueReward => "true_reward",
            Metric::Regret => "regret",
            Metric::PolicyError => "policy_error",
            Metric::WelfareChange => "welfare_change",
            Metric::EstimatedReward => "estimated_reward",
        }
    }

    pub fn of(self, m: &MethodResult) -> f64 {
        match self {
            Metric::TrueReward => m.true_reward,
            Metric::Regret => m.regret,
            Metric::PolicyError => m.policy_error,
            Metric::WelfareChange => m.welfare_change,
            Metric::EstimatedReward => m.estimate.value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub mean: f64,
    pub sd: f64,
    /// (mean − mean_direct) / mean_direct; absent for Direct or without a Direct run.
    pub relative_improvement: Option<f64>,
    /// Paired t-test against Direct over completed replications.
    pub p_value: Option<f64>,
    pub p_value_degenerate: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: EstimatorKind,
    pub metrics: Vec<MetricSummary>,
}

impl MethodSummary {
    pub fn get(&self, metric: Metric) -> &MetricSummary {
        self.metrics.iter().find(|s| s.metric == metric).expect("every metric is summarized")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub requested: usize,
    pub completed: usize,
    pub failures: Vec<ReplicationFailure>,
    pub summary: Vec<MethodSummary>,
    pub replications: Vec<ReplicationResult>,
}

impl ExperimentReport {
    pub fn summary_for(&self, kind: EstimatorKind) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == kind)
    }

    /// Per-replication series of one metric for one method.
    pub fn series(&self, kind: EstimatorKind, metric: Metric) -> Vec<f64> {
        self.replications
            .iter()
            .filter_map(|r| r.method(kind).map(|m| metric.of(m)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `method,metric,mean,sd,relative_improvement,p_value`
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| ExperimentError::Io(std::io::Error::other(e));
        w.write_record(["method", "metric", "mean", "sd", "relative_improvement", "p_value"])
            .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.summary {
            for m in &s.metrics {
                w.write_record([
                    s.method.name().to_string(),
                    m.metric.name().to_string(),
                    m.mean.to_string(),
                    m.sd.to_string(),
                    opt(m.relative_improvement),
                    opt(m.p_value),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs one replication: simulate, fit nuisances, learn and evaluate a policy
/// per method.
pub fn run_replication(cfg: &ExperimentConfig, index: usize) -> Result<ReplicationResult, ExperimentError> {
    let seed = cfg.sim.seed.wrapping_add(index as u64);
    let sim_cfg = SimConfig { seed, ..cfg.sim.clone() };
    let sim = generate(&sim_cfg)?;
    let ds = &sim.dataset;
    let po = &sim.potential;

    let fitted = fit_nuisances(ds, &cfg.nuisance)?;
    let fitted_values = fitted.evaluate(ds);
    let truth = sim.true_nuisances(cfg.nuisance.clip);
    let truth_values = truth.evaluate_raw(ds);

    let oracle: Vec<f64> = ds
        .rows()
        .map(|x| oracle_decision(crate::simulate::cate(x)).map(f64::from))
        .collect::<Result<_, _>>()?;
    let target = ds.target_indices();
    let treated_frac = |d: &[f64]| target.iter().map(|&i| d[i]).sum::<f64>() / target.len() as f64;

    let se_coeffs = coefficients_from_values(ds, &fitted_values, EstimatorKind::Se, Estimand::TargetReward)?;
    let p_out = cfg.learner.features.output_dim(ds.n_features());
    let class_size = cfg.policy_class_size.unwrap_or_else(|| default_policy_class_size(p_out));
    let bound_base = generalization_bound_from_values(ds, &fitted_values, cfg.eta, class_size)?;

    let mut methods = Vec::with_capacity(cfg.methods.len());
    for &kind in &cfg.methods {
        let coeffs = coefficients_from_values(ds, &fitted_values, kind, Estimand::TargetReward)?;
        let learner = LearnerConfig {
            seed: learner_seed(cfg.learner.seed, seed, kind),
            ..cfg.learner.clone()
        };
        let learned = learn_policy(&coeffs, ds.rows(), ds.n_features(), &learner)?;
        let decisions = learned.policy.decisions(ds);
        let metrics = evaluate_decisions(ds, po, &decisions, &oracle, cfg.welfare_scope)?;
        let own = estimate(&coeffs, &decisions)?.without_influence();
        let se_est = estimate(&se_coeffs, &decisions)?.without_influence();
        let signed_bias = signed_bias_expression(ds, &truth_values, &fitted_values, &decisions)?;
        let bound = BoundReport {
            bias_diagnostic: Some(signed_bias.abs()),
            ..bound_base.clone()
        };
        methods.push(MethodResult {
            method: kind,
            true_reward: metrics.true_reward,
            regret: metrics.regret,
            policy_error: metrics.policy_error,
            welfare_change: metrics.welfare_change,
            treated_fraction_target: treated_frac(&decisions),
            estimate: own,
            se_estimate: se_est,
            theta: learned.policy.theta.clone(),
            trace: cfg.record_traces.then_some(learned.trace),
            bound,
            signed_bias,
        });
    }
    let oracle_reward = crate::metrics::true_reward(ds, po, &oracle)?;
    Ok(ReplicationResult {
        index,
        seed,
        oracle_true_reward: oracle_reward,
        oracle_treated_fraction_target: treated_frac(&oracle),
        nuisance_coefficients: fitted.models.coefficients(),
        methods,
    })
}

fn summarize(cfg: &ExperimentConfig, reps: &[ReplicationResult]) -> Vec<MethodSummary> {
    let has_direct = cfg.methods.contains(&EstimatorKind::Direct);
    let series = |kind, metric: Metric| -> Vec<f64> {
        reps.iter().filter_map(|r| r.method(kind).map(|m| metric.of(m))).collect()
    };
    cfg.methods
        .iter()
        .map(|&kind| {
            let metrics = Metric::ALL
                .iter()
                .map(|&metric| {
                    let xs = series(kind, metric);
                    let (m, sd) = if xs.is_empty() {
                        (f64::NAN, f64::NAN)
                    } else {
                        (mean(&xs), sample_sd(&xs))
                    };
                    let mut s = MetricSummary {
                        metric,
                        mean: m,
                        sd,
                        relative_improvement: None,
                        p_value: None,
                        p_value_degenerate: None,
                    };
                    if has_direct && kind != EstimatorKind::Direct {
                        let base = series(EstimatorKind::Direct, metric);
                        if !base.is_empty() {
                            let bm = mean(&base);
                            s.relative_improvement = Some((m - bm) / bm);
                        }
                        if let Ok(t) = paired_t_test(&xs, &base) {
                            s.p_value = Some(t.p_value);
                            s.p_value_degenerate = Some(t.degenerate);
                        }
                    }
                    s
                })
                .collect();
            MethodSummary { method: kind, metrics }
        })
        .collect()
}

fn validate_config(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    if cfg.methods.is_empty() {
        return Err(ExperimentError::Config("at least one method is required".into()));
    }
    let mut seen = cfg.methods.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != cfg.methods.len() {
        return Err(ExperimentError::Config("methods must be distinct".into()));
    }
    if !(cfg.eta > 0.0 && cfg.eta < 1.0) {
        return Err(ExperimentError::Config(format!("eta must lie in (0, 1), got {}", cfg.eta)));
    }
    cfg.nuisance.validate()?;
    Ok(())
}

/// Runs `cfg.replications` replications on `workers` threads.
pub fn run_table(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentReport, ExperimentError> {
    if cfg.replications < 2 {
        return Err(ExperimentError::Config(format!(
            "at least 2 replications are required, got {}",
            cfg.replications
        )));
    }
    validate_config(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    let outcomes: Vec<Result<ReplicationResult, (usize, String)>> = pool.install(|| {
        (0..cfg.replications)
            .into_par_iter()
            .map(|i| run_replication(cfg, i).map_err(|e| (i, e.to_string())))
            .collect()
    });
    let mut replications = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => replications.push(r),
            Err((index, error)) => failures.push(ReplicationFailure {
                index,
                seed: cfg.sim.seed.wrapping_add(index as u64),
                error,
            }),
        }
    }
    let summary = summarize(cfg, &replications);
    Ok(ExperimentReport {
        config: cfg.clone(),
        requested: cfg.replications,
        completed: replications.len(),
        failures,
        summary,
        replications,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Chebyshev distance between source and target covariate means.
    Shift,
    /// Coefficient β of the source treatment mechanism.
    Treatment,
}

impl std::str::FromStr for SweepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shift" => Ok(SweepKind::Shift),
            "treatment" => Ok(SweepKind::Treatment),
            other => Err(format!("unknown sweep kind `{other}` (expected shift or treatment)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub grid_value: f64,
    pub report: ExperimentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Long format: `grid_value,method,metric,mean,sd`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| ExperimentError::Io(std::io::Error::other(e));
        w.write_record(["grid_value", "method", "metric", "mean", "sd"]).map_err(io)?;
        for p in &self.points {
            for s in &p.report.summary {
                for m in &s.metrics {
                    w.write_record([
                        p.grid_value.to_string(),
                        s.method.name().to_string(),
                        m.metric.name().to_string(),
                        m.mean.to_string(),
                        m.sd.to_string(),
                    ])
                    .map_err(io)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn sweep_config(base: &ExperimentConfig, kind: SweepKind, value: f64) -> ExperimentConfig {
    let sim = match kind {
        SweepKind::Shift => shift_sweep_config(&base.sim, value),
        SweepKind::Treatment => treatment_sweep_config(&base.sim, value),
    };
    ExperimentConfig { sim, ..base.clone() }
}

/// Runs a table at every grid point.
pub fn run_sweep(
    kind: SweepKind,
    grid: &[f64],
    base: &ExperimentConfig,
    workers: usize,
) -> Result<SweepReport, ExperimentError> {
    if grid.is_empty() {
        return Err(ExperimentError::Config("sweep grid is empty".into()));
    }
    if let Some(v) = grid.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(ExperimentError::Config(format!("grid values must be nonnegative, got {v}")));
    }
    let points = grid
        .iter()
        .map(|&v| {
            run_table(&sweep_config(base, kind, v), workers).map(|report| SweepPoint { grid_value: v, report })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepReport { kind, points })
}

/// Parses `0,0.5,1` or an arithmetic progression written `0,0.5,...,3`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    let num = |p: &str| p.parse::<f64>().map_err(|_| format!("bad grid value `{p}`"));
    if let Some(pos) = parts.iter().position(|p| *p == "..." || *p == "..") {
        if pos < 2 || pos + 2 != parts.len() {
            return Err("progression must look like a,b,...,c".into());
        }
        let head: Vec<f64> = parts[..pos].iter().map(|p| num(p)).collect::<Result<_, _>>()?;
        let end = num(parts[pos + 1])?;
        let start = head[0];
        let step = head[1] - head[0];
        if !(step > 0.0) || end < start {
            return Err("progression must be increasing".into());
        }
        let count = ((end - start) / step + 1e-9).floor() as usize;
        let mut out: Vec<f64> = (0..=count).map(|k| start + step * k as f64).collect();
        // snap the last point onto the stated end to avoid 2.9999999
        if let Some(last) = out.last_mut() {
            if (*last - end).abs() < 1e-9 * step.max(1.0) {
                *last = end;
            }
        }
        return Ok(out);
    }
    parts.iter().map(|p| num(p)).collect()
}
