//! Scaled inverse-χ² variance prior fitted by the method of moments on the
//! log scale.

use crate::error::{Error, Result};
use crate::special::{digamma, trigamma, trigamma_inverse};
use crate::trend::TrendFit;

/// 1/σ² ~ χ²_κ₀ / (κ₀ s₀² ξ²(M)). `kappa0` may be infinite (point mass).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvChisqPrior {
    pub kappa0: f64,
    pub s0_sq: f64,
}

impl InvChisqPrior {
    pub fn new(kappa0: f64, s0_sq: f64) -> Result<Self> {
        if !(kappa0 > 0.0) || !(s0_sq > 0.0 && s0_sq.is_finite()) {
            return Err(Error::Input(format!("invalid inverse-χ² prior: κ₀ = {kappa0}, s₀² = {s0_sq}")));
        }
        Ok(Self { kappa0, s0_sq })
    }

    /// Posterior-mean-style pooled variance (d S² + κ₀ s₀² ξ²)/(d + κ₀).
    pub fn moderated_variance(&self, s2: f64, df: f64, xi2: f64) -> f64 {
        if self.kappa0.is_infinite() {
            self.s0_sq * xi2
        } else {
            (df * s2 + self.kappa0 * self.s0_sq * xi2) / (df + self.kappa0)
        }
    }
}

fn positive_logs(s2: &[f64]) -> Vec<(usize, f64)> {
    let kept: Vec<(usize, f64)> = s2
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(i, v)| (i, v.ln()))
        .collect();
    if kept.len() < s2.len() {
        log::warn!("moment fit: ignoring {} zero or non-finite variances", s2.len() - kept.len());
    }
    kept
}

/// Solves ψ′(κ/2) = target; a non-positive target means κ = ∞.
fn kappa_from_target(target: f64) -> f64 {
    if target > 0.0 {
        2.0 * trigamma_inverse(target)
    } else {
        f64::INFINITY
    }
}

/// ψ(κ/2) − ln(κ/2), zero in the κ = ∞ limit.
fn log_scale_bias(kappa: f64) -> f64 {
    if kappa.is_infinite() {
        0.0
    } else {
        digamma(0.5 * kappa) - (0.5 * kappa).ln()
    }
}

pub fn fit_invchisq_untrended(s2: &[f64], df: f64) -> Result<InvChisqPrior> {
    let logs = positive_logs(s2);
    let n = logs.len();
    if n < 2 {
        return Err(Error::Input("moment fit needs at least two positive variances".into()));
    }
    let shift = -digamma(0.5 * df) + (0.5 * df).ln();
    let e: Vec<f64> = logs.iter().map(|(_, l)| l + shift).collect();
    let mean = e.iter().sum::<f64>() / n as f64;
    let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let kappa0 = kappa_from_target(var - trigamma(0.5 * df));
    InvChisqPrior::new(kappa0, (mean + log_scale_bias(kappa0)).exp())
}

/// Trended fit: moments of the residuals of log S² about `trend` at the
/// side values `m`, with the residual variance inflated by n/(n − ν) for the
/// ν trend parameters.
pub fn fit_invchisq_trended(s2: &[f64], m: &[f64], df: f64, trend: &TrendFit, spline_df: usize) -> Result<InvChisqPrior> {
    if m.len() != s2.len() {
        return Err(Error::Input("side values and variances differ in length".into()));
    }
    let logs = positive_logs(s2);
    let n = logs.len();
    if n <= spline_df.max(1) {
        return Err(Error::Input(format!(
            "moment fit needs more than {} positive variances, got {n}",
            spline_df.max(1)
        )));
    }
    let r: Vec<f64> = logs.iter().map(|&(i, l)| l - trend.m_hat(m[i])).collect();
    let mean = r.iter().sum::<f64>() / n as f64;
    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64 * n as f64 / (n - spline_df) as f64;
    let kappa0 = kappa_from_target(var - trigamma(0.5 * df));
    let s0_sq = (mean + log_scale_bias(kappa0) - digamma(0.5 * df) + (0.5 * df).ln()).exp();
    InvChisqPrior::new(kappa0, s0_sq)
}
