//! Univariate Gaussian mixtures used as return distributions.
//!
//! Components are parameterized by standard deviation (not variance). Every
//! scale is bounded below by [`SCALE_FLOOR`] so the overlap integrals stay
//! finite.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible component standard deviation, in return units.
pub const SCALE_FLOOR: f64 = 1e-3;

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Mixture of `L` Gaussians describing the return at one state-action pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmReturn {
    weights: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl GmmReturn {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let l = weights.len();
        if l == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if means.len() != l {
            return Err(Error::DimensionMismatch {
                what: "mixture means",
                expected: l,
                actual: means.len(),
            });
        }
        if scales.len() != l {
            return Err(Error::DimensionMismatch {
                what: "mixture scales",
                expected: l,
                actual: scales.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(
                "mixture weights must be finite and non-negative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        if means.iter().any(|u| !u.is_finite()) {
            return Err(Error::invalid("mixture means must be finite"));
        }
        if scales.iter().any(|s| !s.is_finite() || *s < SCALE_FLOOR) {
            return Err(Error::invalid(format!(
                "mixture scales must be finite and at least {SCALE_FLOOR}"
            )));
        }
        Ok(Self {
            weights,
            means,
            scales,
        })
    }

    /// Single Gaussian component.
    pub fn normal(mean: f64, scale: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![scale])
    }

    /// Point-like return at `value`, used for terminal bootstrap targets.
    pub fn degenerate(value: f64) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![value],
            scales: vec![SCALE_FLOOR],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    fn components(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((&w, &u), &s)| (w, u, s))
    }

    pub fn mean(&self) -> f64 {
        self.components().map(|(w, u, _)| w * u).sum()
    }

    /// Total variance: within-component plus between-component spread.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let second: f64 = self.components().map(|(w, u, s)| w * (s * s + u * u)).sum();
        (second - mean * mean).max(0.0)
    }

    /// Distribution of `shift + scale * Z`. Shrunk scales are held at [`SCALE_FLOOR`].
    pub fn affine(&self, shift: f64, scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::invalid(format!(
                "affine scale must be positive, got {scale}"
            )));
        }
        if !shift.is_finite() {
            return Err(Error::invalid("affine shift must be finite"));
        }
        Ok(Self {
            weights: self.weights.clone(),
            means: self.means.iter().map(|u| shift + scale * u).collect(),
            scales: self
                .scales
                .iter()
                .map(|s| (scale * s).max(SCALE_FLOOR))
                .collect(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let pick: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if pick < acc {
                idx = i;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        self.means[idx] + self.scales[idx] * z
    }

    pub fn density(&self, x: f64) -> f64 {
        self.components()
            .map(|(w, u, s)| w * normal_pdf(x - u, s * s))
            .sum()
    }
}

pub(crate) fn normal_pdf(delta: f64, variance: f64) -> f64 {
    (-0.5 * delta * delta / variance).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
}

/// `∫ N(x; u1, s1²) N(x; u2, s2²) dx`, the density of `u1 - u2` under variance `s1² + s2²`.
pub fn gaussian_overlap(u1: f64, s1: f64, u2: f64, s2: f64) -> Result<f64> {
    if !(s1 > 0.0 && s2 > 0.0) {
        return Err(Error::invalid(format!(
            "overlap scales must be positive, got {s1} and {s2}"
        )));
    }
    Ok(overlap_unchecked(u1, s1, u2, s2))
}

#[inline]
pub(crate) fn overlap_unchecked(u1: f64, s1: f64, u2: f64, s2: f64) -> f64 {
    normal_pdf(u1 - u2, s1 * s1 + s2 * s2)
}

/// `∫ p q` as a double sum of component overlaps.
pub(crate) fn cross_inner(p: &GmmReturn, q: &GmmReturn) -> f64 {
    let mut total = 0.0;
    for (wp, up, sp) in p.components() {
        for (wq, uq, sq) in q.components() {
            total += wp * wq * overlap_unchecked(up, sp, uq, sq);
        }
    }
    total
}

/// Jensen-Tsallis distance of order two, `¼ ∫ (p - q)²`, in closed form.
pub fn jtd(p: &GmmReturn, q: &GmmReturn) -> f64 {
    let value = 0.25 * (cross_inner(p, p) - 2.0 * cross_inner(p, q) + cross_inner(q, q));
    value.max(0.0)
}
