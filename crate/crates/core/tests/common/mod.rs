//! A one-dimensional generator with closed-form nuisances and rewards.
//!
//! Source X ~ N(0, 1), target X ~ N(0.5, 1), with fixed group sizes.
//! μ₁(x) = 1 + 2x, μ₀(x) = 0.5 − x, e₁(x) = σ(0.3 + 0.5x) and
//! s(x) = σ(logit q − 0.5x + 0.125), the exact posterior of the source group.
#![allow(dead_code)]

use std::sync::Arc;

use covshift_policy::dataset::{CombinedDataset, PotentialOutcomes};
use covshift_policy::nuisance::{
    logit, sigmoid, FnProbability, FnRegressor, LogitShift, NuisanceModels, NuisanceSet, Offset, ProbabilityModel,
    Regressor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

pub const TARGET_MEAN: f64 = 0.5;

pub fn mu1(x: f64) -> f64 {
    1.0 + 2.0 * x
}

pub fn mu0(x: f64) -> f64 {
    0.5 - x
}

pub fn e1(x: f64) -> f64 {
    sigmoid(0.3 + 0.5 * x)
}

pub fn s(x: f64, q: f64) -> f64 {
    sigmoid(logit(q) - 0.5 * x + 0.125)
}

pub struct Sample {
    pub ds: CombinedDataset,
    pub po: PotentialOutcomes,
    pub q: f64,
}

pub fn draw(n_source: usize, n_target: usize, noise_sd: f64, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_source + n_target;
    let mut x = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    for i in 0..n {
        let source = i < n_source;
        let z: f64 = rng.sample(StandardNormal);
        let xi = if source { z } else { z + TARGET_MEAN };
        let e: f64 = rng.sample::<f64, _>(StandardNormal) * noise_sd;
        let (p1, p0) = (mu1(xi) + e, mu0(xi) + e);
        x.push(xi);
        y1.push(p1);
        y0.push(p0);
        if source {
            let t = u8::from(rng.random::<f64>() < e1(xi));
            g.push(1);
            a.push(Some(t));
            y.push(Some(if t == 1 { p1 } else { p0 }));
        } else {
            g.push(0);
            a.push(None);
            y.push(None);
        }
    }
    Sample {
        ds: CombinedDataset::new(1, x, g, a, y).expect("valid sample"),
        po: PotentialOutcomes { y1, y0 },
        q: n_source as f64 / n as f64,
    }
}

/// True nuisances, optionally with shifted outcome models and logit-shifted scores.
pub fn nuisances(q: f64, mu_shift: f64, score_logit_shift: f64) -> NuisanceSet {
    let mu0: Arc<dyn Regressor> = Arc::new(FnRegressor(|x: &[f64]| mu0(x[0])));
    let mu1: Arc<dyn Regressor> = Arc::new(FnRegressor(|x: &[f64]| mu1(x[0])));
    let e: Arc<dyn ProbabilityModel> = Arc::new(FnProbability(|x: &[f64]| e1(x[0])));
    let sm: Arc<dyn ProbabilityModel> =
        Arc::new(FnProbability(move |x: &[f64]| s(x[0], q)));
    let shift_mu = |inner: Arc<dyn Regressor>| -> Arc<dyn Regressor> {
        if mu_shift == 0.0 {
            inner
        } else {
            Arc::new(Offset { inner, delta: mu_shift })
        }
    };
    let shift_p = |inner: Arc<dyn ProbabilityModel>| -> Arc<dyn ProbabilityModel> {
        if score_logit_shift == 0.0 {
            inner
        } else {
            Arc::new(LogitShift { inner, delta: score_logit_shift })
        }
    };
    let models = NuisanceModels {
        mu0: shift_mu(mu0),
        mu1: shift_mu(mu1),
        e1: shift_p(e),
        s: shift_p(sm),
    };
    NuisanceSet::new(models, 0.01)
}

/// Hard threshold policy 1{x ≥ t} at every row.
pub fn threshold_decisions(ds: &CombinedDataset, t: f64) -> Vec<f64> {
    ds.rows().map(|x| f64::from(u8::from(x[0] >= t))).collect()
}

/// E[X·1{X ≥ t}] and P(X ≥ t) for X ~ N(m, 1).
fn upper_moments(m: f64, t: f64) -> (f64, f64) {
    let z = Normal::standard();
    let p = z.sf(t - m);
    (m * p + z.pdf(t - m), p)
}

/// E over X ~ N(m, 1) of π μ₁ + (1 − π) μ₀ for π = 1{x ≥ t}.
pub fn policy_value(m: f64, t: f64) -> f64 {
    let (ex_hi, p_hi) = upper_moments(m, t);
    let (ex_lo, p_lo) = (m - ex_hi, 1.0 - p_hi);
    (p_hi + 2.0 * ex_hi) + (0.5 * p_lo - ex_lo)
}

/// R(π) for the threshold policy.
pub fn target_value(t: f64) -> f64 {
    policy_value(TARGET_MEAN, t)
}

/// V(π) for the threshold policy: the group-size mixture of both domains.
pub fn entire_value(t: f64, q: f64) -> f64 {
    q * policy_value(0.0, t) + (1.0 - q) * policy_value(TARGET_MEAN, t)
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

pub fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
