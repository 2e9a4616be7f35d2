//! Small summary statistics and the paired t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("at least two pairs are required, got {0}")]
    TooShort(usize),
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn sample_var(xs: &[f64]) -> f64 {
    sample_sd(xs).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub mean_difference: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    /// Differences have zero variance; the p-value is reported as 1.
    pub degenerate: bool,
}

/// Two-sided paired t-test of `a` against `b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatsError::TooShort(a.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let m = mean(&diffs);
    let sd = sample_sd(&diffs);
    let df = diffs.len() - 1;
    if !(sd > 0.0) {
        return Ok(PairedTTest {
            mean_difference: m,
            t_statistic: 0.0,
            degrees_of_freedom: df,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let t = m / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(PairedTTest {
        mean_difference: m,
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_series_are_degenerate() {
        let a = [1.0, 2.0, 3.0];
        let r = paired_t_test(&a, &a).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn alternating_differences_have_zero_t() {
        let a = [1.0, -1.0, 1.0, -1.0];
        let r = paired_t_test(&a, &[0.0; 4]).unwrap();
        assert_eq!(r.t_statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_to_five_hand_value() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_t_test(&a, &[0.0; 5]).unwrap();
        let t = 3.0 / (2.5f64.sqrt() / 5f64.sqrt());
        assert!((r.t_statistic - t).abs() < 1e-12);
        assert!((r.t_statistic - 4.242640687119285).abs() < 1e-12);
        // two-sided tail of t(4) at 3·√2
        assert!((r.p_value - 0.013235599563682695).abs() < 1e-10);
        assert_eq!(r.degrees_of_freedom, 4);
    }

    #[test]
    fn t_cdf_matches_closed_form_for_two_df() {
        // for 2 degrees of freedom, P(T > t) = 1/2 − t / (2√(t² + 2))
        let dist = StudentsT::new(0.0, 1.0, 2.0).unwrap();
        for t in [0.1, 0.7, 1.5, 3.0, 8.0] {
            let expect = 0.5 - t / (2.0 * (t * t + 2.0f64).sqrt());
            assert!((dist.sf(t) - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn input_errors() {
        assert!(matches!(paired_t_test(&[1.0], &[2.0]), Err(StatsError::TooShort(1))));
        assert!(matches!(paired_t_test(&[1.0, 2.0], &[2.0]), Err(StatsError::LengthMismatch(2, 1))));
    }
}
