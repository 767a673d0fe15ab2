//! Axis-aligned box embeddings with softplus-smoothed volume.
//!
//! A concept is a hyperrectangle `[min, max]` in `d` dimensions. Volumes are
//! smoothed per axis as `tau * softplus(extent / tau)`, which keeps them
//! strictly positive even for the negative extents produced by intersecting
//! disjoint boxes. All volume arithmetic happens in log space: with `d` in the
//! hundreds a raw product over- or underflows long before a ratio is taken.
//!
//! `cond_prob(x, y)` is `Vol(x ∩ y) / Vol(y)`, read as "the probability that
//! `x` contains `y`".

use crate::error::{Error, Result};

/// Numerically stable `log(1 + e^a)`.
#[inline]
pub fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

/// `log(softplus(a))` without underflow for very negative `a`.
#[inline]
pub fn log_softplus(a: f64) -> f64 {
    let sp = softplus(a);
    if sp > 0.0 {
        sp.ln()
    } else {
        // softplus(a) ~ e^a once e^a underflows
        a
    }
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Smoothness temperature for box volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothing(f64);

impl Smoothing {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Smoothing(tau))
        } else {
            Err(Error::invalid(format!("smoothing tau must be positive, got {tau}")))
        }
    }

    pub fn tau(self) -> f64 {
        self.0
    }

    /// Log of the smoothed side length for a single axis extent.
    #[inline]
    pub fn log_side(self, extent: f64) -> f64 {
        self.0.ln() + log_softplus(extent / self.0)
    }
}

/// A box embedding: a `min` and a `max` corner of equal length.
///
/// Decoder outputs always satisfy `min <= max`; intersections may not, and a
/// negative extent simply encodes disjointness on that axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxEmbedding {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl BoxEmbedding {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::invalid(format!(
                "box corners differ in length: min {} vs max {}",
                min.len(),
                max.len()
            )));
        }
        Ok(BoxEmbedding { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn center(&self) -> Vec<f64> {
        center(&self.min, &self.max)
    }

    pub fn intersection(&self, other: &BoxEmbedding) -> Result<BoxEmbedding> {
        check_dims(self, other, "intersection")?;
        let min = self.min.iter().zip(&other.min).map(|(a, b)| a.max(*b)).collect();
        let max = self.max.iter().zip(&other.max).map(|(a, b)| a.min(*b)).collect();
        Ok(BoxEmbedding { min, max })
    }

    pub fn log_volume(&self, s: Smoothing) -> f64 {
        log_volume(&self.min, &self.max, s)
    }

    /// Smoothed volume. May overflow to infinity or underflow to zero for
    /// large dimensions; prefer [`BoxEmbedding::log_volume`] for arithmetic.
    pub fn volume(&self, s: Smoothing) -> f64 {
        self.log_volume(s).exp()
    }
}

fn check_dims(x: &BoxEmbedding, y: &BoxEmbedding, op: &str) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::invalid(format!(
            "{op}: dimension mismatch {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

pub fn center(min: &[f64], max: &[f64]) -> Vec<f64> {
    min.iter().zip(max).map(|(a, b)| (a + b) / 2.0).collect()
}

pub fn log_volume(min: &[f64], max: &[f64], s: Smoothing) -> f64 {
    min.iter().zip(max).map(|(lo, hi)| s.log_side(hi - lo)).sum()
}

/// `log Pr(x | y)` over raw corner slices; all four must share a length.
pub fn log_cond_prob_raw(
    x_min: &[f64],
    x_max: &[f64],
    y_min: &[f64],
    y_max: &[f64],
    s: Smoothing,
) -> f64 {
    let mut log_int = 0.0;
    let mut log_y = 0.0;
    for i in 0..y_min.len() {
        let lo = x_min[i].max(y_min[i]);
        let hi = x_max[i].min(y_max[i]);
        log_int += s.log_side(hi - lo);
        log_y += s.log_side(y_max[i] - y_min[i]);
    }
    (log_int - log_y).min(0.0)
}

pub fn log_cond_prob(x: &BoxEmbedding, y: &BoxEmbedding, s: Smoothing) -> Result<f64> {
    check_dims(x, y, "cond_prob")?;
    Ok(log_cond_prob_raw(&x.min, &x.max, &y.min, &y.max, s))
}

/// `Pr(x | y) = Vol(x ∩ y) / Vol(y)`, in `(0, 1]`.
///
/// The result is floored at the smallest positive normal double so it stays
/// strictly positive when the log ratio underflows.
pub fn cond_prob(x: &BoxEmbedding, y: &BoxEmbedding, s: Smoothing) -> Result<f64> {
    Ok(log_cond_prob(x, y, s)?.exp().max(f64::MIN_POSITIVE))
}
