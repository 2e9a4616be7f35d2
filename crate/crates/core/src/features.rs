//! Covariate feature maps shared by the nuisance models and the policy class.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Intercept only.
    Intercept,
    /// Intercept plus the covariates.
    Raw,
    /// Intercept, covariates, squares and pairwise products.
    Quadratic,
}

impl FeatureKind {
    pub fn output_dim(self, p_in: usize) -> usize {
        match self {
            FeatureKind::Intercept => 1,
            FeatureKind::Raw => p_in + 1,
            FeatureKind::Quadratic => 1 + 2 * p_in + p_in * (p_in.saturating_sub(1)) / 2,
        }
    }
}

/// Affine rescaling applied to covariates before expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Column means and population standard deviations of row-major data.
    /// Constant columns get scale 1.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, p: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; p];
        let mut sumsq = vec![0.0; p];
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for r in &rows {
            n += 1;
            for j in 0..p {
                sum[j] += r[j];
            }
        }
        let center: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
        for r in &rows {
            for j in 0..p {
                let d = r[j] - center[j];
                sumsq[j] += d * d;
            }
        }
        let scale = sumsq
            .iter()
            .map(|s| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { center, scale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    pub p_in: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

impl FeatureMap {
    pub fn new(kind: FeatureKind, p_in: usize) -> Self {
        Self {
            kind,
            p_in,
            standardization: None,
        }
    }

    pub fn standardized(kind: FeatureKind, p_in: usize, st: Standardization) -> Self {
        assert_eq!(st.center.len(), p_in);
        Self {
            kind,
            p_in,
            standardization: Some(st),
        }
    }

    pub fn p_out(&self) -> usize {
        self.kind.output_dim(self.p_in)
    }

    /// Writes the feature vector of `x` into `out` (cleared first).
    pub fn expand_into(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.p_in);
        out.clear();
        out.push(1.0);
        if self.kind == FeatureKind::Intercept {
            return;
        }
        let start = out.len();
        match &self.standardization {
            Some(st) => out.extend(x.iter().zip(&st.center).zip(&st.scale).map(|((v, c), s)| (v - c) / s)),
            None => out.extend_from_slice(x),
        }
        if self.kind == FeatureKind::Quadratic {
            let p = self.p_in;
            for j in 0..p {
                let z = out[start + j];
                out.push(z * z);
            }
            for i in 0..p {
                for j in (i + 1)..p {
                    let v = out[start + i] * out[start + j];
                    out.push(v);
                }
            }
        }
    }

    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.p_out());
        self.expand_into(x, &mut out);
        out
    }

    /// Row-major design matrix for the given rows.
    pub fn design<'a>(&self, rows: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
        let mut design = Vec::new();
        let mut buf = Vec::with_capacity(self.p_out());
        for r in rows {
            self.expand_into(r, &mut buf);
            design.extend_from_slice(&buf);
        }
        design
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims() {
        for p in 0..6 {
            assert_eq!(FeatureMap::new(FeatureKind::Raw, p).p_out(), p + 1);
            assert_eq!(
                FeatureMap::new(FeatureKind::Quadratic, p).p_out(),
                1 + p + p + p * p.saturating_sub(1) / 2
            );
            assert_eq!(FeatureMap::new(FeatureKind::Intercept, p).p_out(), 1);
        }
        let m = FeatureMap::new(FeatureKind::Quadratic, 3);
        assert_eq!(m.expand(&[1.0, 2.0, 3.0]).len(), m.p_out());
    }

    #[test]
    fn quadratic_layout() {
        let m = FeatureMap::new(FeatureKind::Quadratic, 3);
        assert_eq!(
            m.expand(&[1.0, 2.0, 3.0]),
            vec![1.0, 1.0, 2.0, 3.0, 1.0, 4.0, 9.0, 2.0, 3.0, 6.0]
        );
    }

    #[test]
    fn standardization_centers_and_scales() {
        let data = [[1.0, 5.0], [3.0, 5.0]];
        let st = Standardization::fit(data.iter().map(|r| &r[..]), 2);
        assert_eq!(st.center, vec![2.0, 5.0]);
        assert_eq!(st.scale, vec![1.0, 1.0]);
        let m = FeatureMap::standardized(FeatureKind::Raw, 2, st);
        assert_eq!(m.expand(&[3.0, 6.0]), vec![1.0, 1.0, 1.0]);
    }
}
