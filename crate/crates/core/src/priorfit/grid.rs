//! Discretization grids for the variance prior (1-D) and the joint
//! (intensity, variance) prior (2-D).

use crate::error::{Error, Result};
use crate::special::quantile_sorted;
use crate::trend::TrendFit;

/// `size` log-spaced points from the `lower_quantile` quantile of the
/// positive entries of `values` to their maximum. A degenerate range gives
/// the single point.
pub fn grid_1d(values: &[f64], size: usize, lower_quantile: f64) -> Result<Vec<f64>> {
    let mut pos: Vec<f64> = values.iter().copied().filter(|v| v.is_finite() && *v > 0.0).collect();
    if pos.len() < values.len() {
        log::warn!("grid: ignoring {} non-positive or non-finite values", values.len() - pos.len());
    }
    if pos.is_empty() {
        return Err(Error::Input("grid needs at least one positive value".into()));
    }
    if size == 0 {
        return Err(Error::Config("grid size must be at least 1".into()));
    }
    pos.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&pos, lower_quantile);
    let hi = pos[pos.len() - 1];
    Ok(log_spaced(lo, hi, size))
}

fn log_spaced(lo: f64, hi: f64, size: usize) -> Vec<f64> {
    if lo >= hi || size == 1 {
        if lo < hi {
            log::warn!("grid of size 1 placed at the maximum");
        }
        return vec![hi];
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    let step = (lhi - llo) / (size - 1) as f64;
    let mut out: Vec<f64> = (0..size).map(|j| (llo + step * j as f64).exp()).collect();
    out[0] = lo;
    out[size - 1] = hi;
    out
}

/// `size` equally spaced points from the `lower_quantile` quantile of
/// `values` to their maximum.
pub fn linear_grid(values: &[f64], size: usize, lower_quantile: f64) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Err(Error::Input("grid needs at least one finite value".into()));
    }
    v.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&v, lower_quantile);
    let hi = v[v.len() - 1];
    if lo >= hi || size <= 1 {
        return Ok(vec![hi]);
    }
    let step = (hi - lo) / (size - 1) as f64;
    let mut out: Vec<f64> = (0..size).map(|j| lo + step * j as f64).collect();
    out[size - 1] = hi;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SieveBin {
    /// Observed intensities in the bin, ascending, duplicates kept.
    pub mu: Vec<f64>,
    /// Median intensity u_b of the bin.
    pub center: f64,
    /// exp(m̂(u_b) + r) for each residual grid point r.
    pub variances: Vec<f64>,
}

/// Bins over intensity with per-bin location sets and variance grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Sieve2D {
    pub bins: Vec<SieveBin>,
    pub residual_grid: Vec<f64>,
    /// Bin index of each unit.
    pub assignment: Vec<usize>,
}

impl Sieve2D {
    /// Number of likelihood columns, bins × residual points.
    pub fn columns(&self) -> usize {
        self.bins.len() * self.residual_grid.len()
    }

    pub fn min_variance(&self) -> f64 {
        self.bins
            .iter()
            .flat_map(|b| b.variances.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Near-equal-count bins over the order statistics of `a`; residuals of
/// log `s2` about the trend give a common grid that each bin shifts to its
/// median's trend value.
pub fn grid_2d(
    a: &[f64],
    s2: &[f64],
    trend: &TrendFit,
    bins: usize,
    residual_points: usize,
    lower_quantile: f64,
) -> Result<Sieve2D> {
    let n = a.len();
    if n == 0 || s2.len() != n {
        return Err(Error::Input("joint grid needs matching, non-empty intensity and variance vectors".into()));
    }
    if bins == 0 || residual_points == 0 {
        return Err(Error::Config("joint grid sizes must be at least 1".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("intensities must be finite".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(i.cmp(&j)));
    let mut distinct: Vec<f64> = order.iter().map(|&i| a[i]).collect();
    distinct.dedup();
    let b_count = bins.min(distinct.len());
    if b_count < bins {
        log::warn!("joint grid: only {} distinct intensities, using {b_count} bins instead of {bins}", distinct.len());
    }

    let residuals: Vec<f64> = (0..n)
        .filter(|&i| s2[i] > 0.0 && s2[i].is_finite())
        .map(|i| s2[i].ln() - trend.m_hat(a[i]))
        .collect();
    let residual_grid = linear_grid(&residuals, residual_points, lower_quantile)?;

    let mut assignment = vec![0; n];
    let mut out = Vec::with_capacity(b_count);
    for b in 0..b_count {
        let start = b * n / b_count;
        let end = (b + 1) * n / b_count;
        let members = &order[start..end];
        for &i in members {
            assignment[i] = b;
        }
        let mu: Vec<f64> = members.iter().map(|&i| a[i]).collect();
        let center = quantile_sorted(&mu, 0.5);
        let shift = trend.m_hat(center);
        let variances = residual_grid.iter().map(|r| (shift + r).exp()).collect();
        out.push(SieveBin { mu, center, variances });
    }
    Ok(Sieve2D {
        bins: out,
        residual_grid,
        assignment,
    })
}
