//! Synthetic source/target generator with known potential outcomes and
//! closed-form nuisance functions.
//!
//! Source covariates are N(μ_s, Σ_s), target covariates N(μ_t, Σ_t), with
//! Σ_s[i][j] = 2^−|i−j| and Σ_t[i][j] = 2^(−|i−j|+1) by default. With the
//! transform X̃ⱼ = Xⱼ(|Xⱼ|^0.1 + |Xⱼ|^0.3 + |Xⱼ|^0.5):
//!
//! Y(1) = 15 + 0.4·X̃₁X̃₂ + 0.7·X̃₃ + ε,  Y(0) = 10 + 0.1·X̃₁ + 0.5·X̃₂X̃₃ + ε
//!
//! and source treatment A ~ Bern(σ(−β·X̃₂)).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CombinedDataset, PotentialOutcomes};
use crate::nuisance::{sigmoid, FnProbability, FnRegressor, NuisanceModels, NuisanceSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("{0} covariance is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("invalid simulation config: {0}")]
    Config(String),
}

pub const DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub mu_source: [f64; DIM],
    pub mu_target: [f64; DIM],
    pub cov_source: [[f64; DIM]; DIM],
    pub cov_target: [[f64; DIM]; DIM],
    pub beta_treatment: f64,
    pub noise_sd: f64,
    pub shared_noise: bool,
    pub seed: u64,
}

fn banded_cov(offset: i32) -> [[f64; DIM]; DIM] {
    let mut c = [[0.0; DIM]; DIM];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = 2f64.powi(-((i as i32 - j as i32).abs()) + offset);
        }
    }
    c
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_source: 512,
            n_target: 2048,
            mu_source: [10.0, 3.0, 7.0],
            mu_target: [9.0, 4.0, 6.0],
            cov_source: banded_cov(0),
            cov_target: banded_cov(1),
            beta_treatment: 0.0,
            noise_sd: 1.0,
            shared_noise: true,
            seed: 0,
        }
    }
}

/// X̃ⱼ = xⱼ·|xⱼ|^0.1 + xⱼ·|xⱼ|^0.3 + xⱼ·|xⱼ|^0.5, componentwise.
pub fn feature_transform(x: &[f64; DIM]) -> [f64; DIM] {
    x.map(|v| {
        let a = v.abs();
        v * a.powf(0.1) + v * a.powf(0.3) + v * a.powf(0.5)
    })
}

fn tilde(x: &[f64]) -> [f64; DIM] {
    feature_transform(&[x[0], x[1], x[2]])
}

/// Noise-free E[Y(1) | x].
pub fn mean_treated(x: &[f64]) -> f64 {
    let t = tilde(x);
    15.0 + 0.4 * t[0] * t[1] + 0.7 * t[2]
}

/// Noise-free E[Y(0) | x].
pub fn mean_control(x: &[f64]) -> f64 {
    let t = tilde(x);
    10.0 + 0.1 * t[0] + 0.5 * t[1] * t[2]
}

pub fn cate(x: &[f64]) -> f64 {
    mean_treated(x) - mean_control(x)
}

/// Multivariate normal with a precomputed Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl Gaussian {
    pub fn new(mean: &[f64; DIM], cov: &[[f64; DIM]; DIM], name: &'static str) -> Result<Self, SimError> {
        let m = DMatrix::from_fn(DIM, DIM, |i, j| cov[i][j]);
        if (0..DIM).any(|i| (0..DIM).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12)) {
            return Err(SimError::NotPositiveDefinite(name));
        }
        let chol = m.clone().cholesky().ok_or(SimError::NotPositiveDefinite(name))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Self {
            mean: DVector::from_row_slice(mean),
            chol: l,
            precision,
            log_det,
        })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> [f64; DIM] {
        let z = DVector::from_fn(DIM, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &self.mean + &self.chol * z;
        [x[0], x[1], x[2]]
    }

    /// Log density up to the shared −(d/2)·log 2π constant.
    pub fn log_density_unnormalized(&self, x: &[f64]) -> f64 {
        let d = DVector::from_row_slice(x) - &self.mean;
        -0.5 * (d.dot(&(&self.precision * &d)) + self.log_det)
    }
}

/// Closed-form nuisance functions of the generator.
#[derive(Debug, Clone)]
pub struct TrueModel {
    pub source: Gaussian,
    pub target: Gaussian,
    pub beta_treatment: f64,
    pub q: f64,
}

impl TrueModel {
    pub fn new(cfg: &SimConfig) -> Result<Self, SimError> {
        Ok(Self {
            source: Gaussian::new(&cfg.mu_source, &cfg.cov_source, "source")?,
            target: Gaussian::new(&cfg.mu_target, &cfg.cov_target, "target")?,
            beta_treatment: cfg.beta_treatment,
            q: cfg.n_source as f64 / (cfg.n_source + cfg.n_target) as f64,
        })
    }

    pub fn e1(&self, x: &[f64]) -> f64 {
        if self.beta_treatment == 0.0 {
            0.5
        } else {
            sigmoid(-self.beta_treatment * tilde(x)[1])
        }
    }

    /// s(x) = q f_s(x) / (q f_s(x) + (1 − q) f_t(x)), evaluated on the log scale.
    pub fn s(&self, x: &[f64]) -> f64 {
        let ls = self.q.ln() + self.source.log_density_unnormalized(x);
        let lt = (1.0 - self.q).ln() + self.target.log_density_unnormalized(x);
        sigmoid(ls - lt)
    }

    pub fn nuisance_set(self: &Arc<Self>, clip: f64) -> NuisanceSet {
        let e = Arc::clone(self);
        let s = Arc::clone(self);
        NuisanceSet::new(
            NuisanceModels {
                mu0: Arc::new(FnRegressor(mean_control)),
                mu1: Arc::new(FnRegressor(mean_treated)),
                e1: Arc::new(FnProbability(move |x: &[f64]| e.e1(x))),
                s: Arc::new(FnProbability(move |x: &[f64]| s.s(x))),
            },
            clip,
        )
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: CombinedDataset,
    pub potential: PotentialOutcomes,
    pub truth: Arc<TrueModel>,
}

impl SimulatedData {
    /// True nuisances at the given clipping floor.
    pub fn true_nuisances(&self, clip: f64) -> NuisanceSet {
        self.truth.nuisance_set(clip)
    }

    /// Sidecar table rows: y1, y0, mu0_true, mu1_true, e1_true, s_true.
    pub fn truth_table(&self) -> Vec<[f64; 6]> {
        (0..self.dataset.len())
            .map(|i| {
                let x = self.dataset.row(i);
                [
                    self.potential.y1[i],
                    self.potential.y0[i],
                    mean_control(x),
                    mean_treated(x),
                    self.truth.e1(x),
                    self.truth.s(x),
                ]
            })
            .collect()
    }

    pub fn write_truth_csv<W: std::io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["y1", "y0", "mu0_true", "mu1_true", "e1_true", "s_true"])?;
        for row in self.truth_table() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws one source/target sample. Source rows come first.
pub fn generate(cfg: &SimConfig) -> Result<SimulatedData, SimError> {
    if cfg.n_source == 0 || cfg.n_target == 0 {
        return Err(SimError::Config("n_source and n_target must be at least 1".into()));
    }
    if !(cfg.noise_sd >= 0.0 && cfg.noise_sd.is_finite()) {
        return Err(SimError::Config(format!("noise_sd must be nonnegative, got {}", cfg.noise_sd)));
    }
    if !(cfg.beta_treatment >= 0.0 && cfg.beta_treatment.is_finite()) {
        return Err(SimError::Config(format!("beta_treatment must be nonnegative, got {}", cfg.beta_treatment)));
    }
    let truth = Arc::new(TrueModel::new(cfg)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_source + cfg.n_target;

    let mut covariates = Vec::with_capacity(n * DIM);
    for _ in 0..cfg.n_source {
        covariates.extend(truth.source.sample(&mut rng));
    }
    for _ in 0..cfg.n_target {
        covariates.extend(truth.target.sample(&mut rng));
    }

    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut group = Vec::with_capacity(n);
    let mut treatment = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    for i in 0..n {
        let x = &covariates[i * DIM..(i + 1) * DIM];
        let eps1: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.noise_sd;
        let eps0 = if cfg.shared_noise {
            eps1
        } else {
            rng.sample::<f64, _>(StandardNormal) * cfg.noise_sd
        };
        let p1 = mean_treated(x) + eps1;
        let p0 = mean_control(x) + eps0;
        y1.push(p1);
        y0.push(p0);
        if i < cfg.n_source {
            let a = u8::from(rng.random::<f64>() < truth.e1(x));
            group.push(1);
            treatment.push(Some(a));
            outcome.push(Some(if a == 1 { p1 } else { p0 }));
        } else {
            group.push(0);
            treatment.push(None);
            outcome.push(None);
        }
    }
    let dataset = CombinedDataset::new(DIM, covariates, group, treatment, outcome)
        .map_err(|e| SimError::Config(e.to_string()))?;
    Ok(SimulatedData {
        dataset,
        potential: PotentialOutcomes { y1, y0 },
        truth,
    })
}

/// Target mean displaced from the source mean by `distance` along (−1, +1, −1),
/// so the Chebyshev distance between the two means equals `distance`.
pub fn shift_sweep_config(base: &SimConfig, distance: f64) -> SimConfig {
    const DIRECTION: [f64; DIM] = [-1.0, 1.0, -1.0];
    let mut cfg = base.clone();
    cfg.mu_target = std::array::from_fn(|j| base.mu_source[j] + distance * DIRECTION[j]);
    cfg
}

pub fn treatment_sweep_config(base: &SimConfig, beta: f64) -> SimConfig {
    SimConfig {
        beta_treatment: beta,
        ..base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_fixed_points() {
        assert_eq!(feature_transform(&[0.0, 1.0, -1.0]), [0.0, 3.0, -3.0]);
        let t = feature_transform(&[2.0, -2.0, 0.5]);
        assert!((t[0] + t[1]).abs() < 1e-15);
        let expect = 2.0 * (2f64.powf(0.1) + 2f64.powf(0.3) + 2f64.powf(0.5));
        assert!((t[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn default_covariances() {
        let c = SimConfig::default();
        assert_eq!(c.cov_source, [[1.0, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 1.0]]);
        assert_eq!(c.cov_target, [[2.0, 1.0, 0.5], [1.0, 2.0, 1.0], [0.5, 1.0, 2.0]]);
    }

    #[test]
    fn shift_sweep_means() {
        let base = SimConfig::default();
        assert_eq!(shift_sweep_config(&base, 0.0).mu_target, [10.0, 3.0, 7.0]);
        assert_eq!(shift_sweep_config(&base, 1.0).mu_target, [9.0, 4.0, 6.0]);
        assert_eq!(shift_sweep_config(&base, 2.0).mu_target, [8.0, 5.0, 5.0]);
        for d in [0.0, 0.5, 1.7, 3.0] {
            let c = shift_sweep_config(&base, d);
            let cheb = (0..DIM).map(|j| (c.mu_target[j] - c.mu_source[j]).abs()).fold(0.0, f64::max);
            assert!((cheb - d).abs() < 1e-12);
        }
    }

    #[test]
    fn fair_coin_treatment_fraction() {
        let cfg = SimConfig { seed: 17, ..Default::default() };
        let sim = generate(&cfg).unwrap();
        let ds = &sim.dataset;
        let treated = ds.source_indices().iter().filter(|&&i| ds.treatment(i) == Some(1)).count();
        let frac = treated as f64 / cfg.n_source as f64;
        assert!((frac - 0.5).abs() < 3.0 * (0.25 / cfg.n_source as f64).sqrt(), "{frac}");
    }

    #[test]
    fn noise_free_effect_matches_closed_form_cate() {
        let cfg = SimConfig { noise_sd: 0.0, seed: 2, n_source: 20, n_target: 30, ..Default::default() };
        let sim = generate(&cfg).unwrap();
        for i in 0..sim.dataset.len() {
            let x = sim.dataset.row(i);
            let t = tilde(x);
            let tau = 5.0 + 0.4 * t[0] * t[1] + 0.7 * t[2] - 0.1 * t[0] - 0.5 * t[1] * t[2];
            let diff = sim.potential.y1[i] - sim.potential.y0[i];
            assert!((diff - tau).abs() < 1e-9 * tau.abs().max(1.0));
            assert!((cate(x) - tau).abs() < 1e-9 * tau.abs().max(1.0));
        }
    }

    #[test]
    fn shared_noise_keeps_effect_noise_free() {
        let cfg = SimConfig { seed: 8, n_source: 10, n_target: 10, ..Default::default() };
        let sim = generate(&cfg).unwrap();
        for i in 0..sim.dataset.len() {
            let x = sim.dataset.row(i);
            let diff = sim.potential.y1[i] - sim.potential.y0[i];
            assert!((diff - cate(x)).abs() < 1e-9 * cate(x).abs().max(1.0));
        }
        let indep = generate(&SimConfig { shared_noise: false, ..cfg }).unwrap();
        let any_gap = (0..indep.dataset.len()).any(|i| {
            let x = indep.dataset.row(i);
            (indep.potential.y1[i] - indep.potential.y0[i] - cate(x)).abs() > 1e-6
        });
        assert!(any_gap);
    }

    #[test]
    fn observed_outcomes_are_consistent() {
        let sim = generate(&SimConfig { seed: 4, beta_treatment: 0.1, ..Default::default() }).unwrap();
        assert!(sim.potential.is_consistent_with(&sim.dataset));
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SimConfig { seed: 99, n_source: 50, n_target: 70, ..Default::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.potential, b.potential);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.dataset.write_csv(&mut ba, &a.dataset.default_names()).unwrap();
        b.dataset.write_csv(&mut bb, &b.dataset.default_names()).unwrap();
        assert_eq!(ba, bb);
        let c = generate(&SimConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn non_pd_covariance_is_rejected() {
        let mut cfg = SimConfig::default();
        cfg.cov_source[0][0] = -1.0;
        assert!(matches!(generate(&cfg), Err(SimError::NotPositiveDefinite("source"))));
        let mut cfg = SimConfig::default();
        cfg.cov_target[0][1] = 5.0;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn sampling_score_agrees_with_density_formula() {
        let m = TrueModel::new(&SimConfig::default()).unwrap();
        // at a point, compare against direct density evaluation
        let x = [9.5, 3.5, 6.5];
        let dens = |mu: [f64; 3], cov: [[f64; 3]; 3]| {
            let c = DMatrix::from_fn(3, 3, |i, j| cov[i][j]);
            let inv = c.clone().try_inverse().unwrap();
            let d = DVector::from_row_slice(&x) - DVector::from_row_slice(&mu);
            (-0.5 * d.dot(&(&inv * &d))).exp() / c.determinant().sqrt()
        };
        let cfg = SimConfig::default();
        let f1 = dens(cfg.mu_source, cfg.cov_source);
        let f0 = dens(cfg.mu_target, cfg.cov_target);
        let q = 0.2;
        let expect = q * f1 / (q * f1 + (1.0 - q) * f0);
        assert!((m.s(&x) - expect).abs() < 1e-12);
    }
}
