//! Data for diagnostic plots: trend curves, fitted marginal densities of the
//! (scaled) residual variance, and observed histograms.

use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::priorfit::{scaled_chisq_density, DiscretePrior1D, DiscretePrior2D, InvChisqPrior};
use crate::trend::TrendFit;

/// Tail mass left off each end of a marginal grid.
pub const GRID_TAIL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendPoint {
    pub m: f64,
    pub m_hat: f64,
    pub xi2: f64,
}

/// The fitted trend at `points` equally spaced values on [lo, hi].
pub fn trend_curve(trend: &TrendFit, lo: f64, hi: f64, points: usize) -> Vec<TrendPoint> {
    linear_grid(lo, hi, points)
        .into_iter()
        .map(|m| {
            let (m_hat, xi2) = trend.eval(m);
            TrendPoint { m, m_hat, xi2 }
        })
        .collect()
}

fn linear_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points < 2 || hi <= lo {
        return vec![lo; points.min(1)];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    linear_grid(a, b, points).into_iter().map(f64::exp).collect()
}

fn chisq_quantile(df: f64, q: f64) -> Result<f64> {
    let chi = ChiSquared::new(df).map_err(|e| Error::Input(e.to_string()))?;
    Ok(chi.inverse_cdf(q) / df)
}

/// Density of x = τ²χ²_d/d mixed over (τ², weight) pairs, on a log grid
/// from the lower tail quantile of the smallest τ² to the upper tail
/// quantile of the largest.
pub fn variance_mixture_marginal(atoms: &[(f64, f64)], df: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    let (lo_tau, hi_tau) = atoms
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &(t, _)| (lo.min(t), hi.max(t)));
    if !(lo_tau.is_finite() && lo_tau > 0.0) {
        return Err(Error::Input("prior has no positive-weight atoms".into()));
    }
    let lo = lo_tau * chisq_quantile(df, GRID_TAIL)?;
    let hi = hi_tau * chisq_quantile(df, 1.0 - GRID_TAIL)?;
    Ok(log_grid(lo, hi, points)
        .into_iter()
        .map(|x| {
            let f = atoms.iter().map(|&(t, w)| w * scaled_chisq_density(x, df, t)).sum();
            (x, f)
        })
        .collect())
}

pub fn npmle_marginal(prior: &DiscretePrior1D, df: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    let atoms: Vec<(f64, f64)> = prior.support().iter().copied().zip(prior.weights().iter().copied()).collect();
    variance_mixture_marginal(&atoms, df, points)
}

/// Marginal of S² under a joint prior: the σ² mixture with μ summed out.
pub fn joint_marginal(prior: &DiscretePrior2D, df: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    let atoms: Vec<(f64, f64)> = prior.atoms().iter().map(|a| a.1).zip(prior.weights().iter().copied()).collect();
    variance_mixture_marginal(&atoms, df, points)
}

/// Marginal of x under a scaled inverse-χ² prior: x/s₀² ~ F(d, κ₀), or
/// s₀²χ²_d/d when κ₀ is infinite.
pub fn invchisq_marginal(prior: &InvChisqPrior, df: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    if prior.kappa0.is_infinite() {
        return variance_mixture_marginal(&[(prior.s0_sq, 1.0)], df, points);
    }
    let f = FisherSnedecor::new(df, prior.kappa0).map_err(|e| Error::Input(e.to_string()))?;
    let s = prior.s0_sq;
    let lo = s * f.inverse_cdf(GRID_TAIL);
    let hi = s * f.inverse_cdf(1.0 - GRID_TAIL);
    Ok(log_grid(lo, hi, points)
        .into_iter()
        .map(|x| (x, f.pdf(x / s) / s))
        .collect())
}

/// Trapezoid rule over (x, f) pairs.
pub fn trapezoid(curve: &[(f64, f64)]) -> f64 {
    curve.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over [min, max]; every value lands in exactly one bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramBin {
            lo: lo + width * b as f64,
            hi: if b + 1 == bins && hi > lo { hi } else { lo + width * (b + 1) as f64 },
            count,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marginals_integrate_to_one() {
        let prior = DiscretePrior1D::new(vec![0.2, 1.0, 30.0], vec![0.3, 0.5, 0.2]).unwrap();
        for df in [2.0, 4.0, 10.0] {
            let curve = npmle_marginal(&prior, df, 400).unwrap();
            assert!((trapezoid(&curve) - 1.0).abs() < 1e-3, "df {df}: {}", trapezoid(&curve));
        }
        for kappa0 in [3.0, 20.0, f64::INFINITY] {
            let curve = invchisq_marginal(&InvChisqPrior { kappa0, s0_sq: 2.0 }, 4.0, 400).unwrap();
            assert!((trapezoid(&curve) - 1.0).abs() < 1e-3, "κ₀ {kappa0}: {}", trapezoid(&curve));
        }
    }

    #[test]
    fn histogram_counts_everything() {
        let values: Vec<f64> = (0..1001).map(|i| (i as f64 * 0.37).sin()).collect();
        let h = histogram(&values, 17);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 1001);
        assert_eq!(histogram(&[3.0; 5], 4).iter().map(|b| b.count).sum::<usize>(), 5);
    }
}
