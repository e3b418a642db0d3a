//! Bin-level likelihood for the joint (intensity, variance) prior.
//!
//! Column (b, v) of the likelihood is p_χ²(S² | d, V_bv) times the average
//! over μ ∈ ℳ_b of the N(μ, V_bv/K) density at A. That average is a
//! Gaussian kernel density of the bin's intensities. When many intensities
//! fall inside the kernel window it is tabulated in log space on a grid of
//! spacing s/16 (s the kernel sd) and read off by cubic interpolation;
//! otherwise it is summed directly. Intensities more than 10 s from every
//! μ in the bin contribute zero (relative weight below e⁻⁵⁰).

use std::f64::consts::PI;

use rayon::prelude::*;

use super::grid::Sieve2D;
use super::kernel::ChisqAtom;
use super::npmle::LikelihoodMatrix;
use crate::error::Result;
use crate::special::log_sum_exp;

const WINDOW_SDS: f64 = 10.0;
const TABLE_STEPS_PER_SD: f64 = 16.0;
/// Direct summation when the expected window holds at most this many points.
const DIRECT_MAX_POINTS: f64 = 12.0;

/// log of (1/|ℳ|)Σ_μ N(x; μ, s²) for one (bin, variance) pair.
pub(crate) enum LogKde<'a> {
    Direct { mu: &'a [f64], sd: f64, log_norm: f64 },
    Table { lo: f64, inv_step: f64, values: Vec<f64> },
}

fn direct_log_kde(mu: &[f64], sd: f64, log_norm: f64, x: f64) -> f64 {
    let reach = WINDOW_SDS * sd;
    let start = mu.partition_point(|&m| m < x - reach);
    let end = mu.partition_point(|&m| m <= x + reach);
    if start >= end {
        return f64::NEG_INFINITY;
    }
    let inv = 0.5 / (sd * sd);
    let terms: Vec<f64> = mu[start..end].iter().map(|m| -(x - m) * (x - m) * inv).collect();
    log_sum_exp(&terms) + log_norm
}

impl<'a> LogKde<'a> {
    pub fn new(mu: &'a [f64], variance: f64) -> Self {
        let sd = variance.sqrt();
        let count = mu.len() as f64;
        let log_norm = -count.ln() - 0.5 * (2.0 * PI * variance).ln();
        let range = mu[mu.len() - 1] - mu[0];
        let expected_window = if range > 0.0 {
            count * (2.0 * WINDOW_SDS * sd / range).min(1.0)
        } else {
            count
        };
        if expected_window <= DIRECT_MAX_POINTS {
            return LogKde::Direct { mu, sd, log_norm };
        }
        let step = sd / TABLE_STEPS_PER_SD;
        let lo = mu[0] - WINDOW_SDS * sd;
        let points = ((range + 2.0 * WINDOW_SDS * sd) / step).ceil() as usize + 1;
        let values = (0..points)
            .map(|j| direct_log_kde(mu, sd, log_norm, lo + step * j as f64))
            .collect();
        LogKde::Table {
            lo,
            inv_step: 1.0 / step,
            values,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            LogKde::Direct { mu, sd, log_norm } => direct_log_kde(mu, *sd, *log_norm, x),
            LogKde::Table { lo, inv_step, values } => {
                let t = (x - lo) * inv_step;
                let last = values.len() - 1;
                if !(t >= 0.0) || t > last as f64 {
                    return f64::NEG_INFINITY;
                }
                if last < 3 {
                    let j = (t.floor() as usize).min(last.saturating_sub(1));
                    let f = t - j as f64;
                    return values[j] * (1.0 - f) + values[(j + 1).min(last)] * f;
                }
                // Four-point Lagrange interpolation on the nodes around t.
                let j = (t.floor() as usize).clamp(1, last - 2);
                let u = t - j as f64;
                let (y0, y1, y2, y3) = (values[j - 1], values[j], values[j + 1], values[j + 2]);
                if !(y0.is_finite() && y1.is_finite() && y2.is_finite() && y3.is_finite()) {
                    return f64::NEG_INFINITY;
                }
                let c0 = -u * (u - 1.0) * (u - 2.0) / 6.0;
                let c1 = (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0;
                let c2 = -(u + 1.0) * u * (u - 2.0) / 2.0;
                let c3 = (u + 1.0) * u * (u - 1.0) / 6.0;
                c0 * y0 + c1 * y1 + c2 * y2 + c3 * y3
            }
        }
    }
}

/// Builds the n × (bins·points) log-likelihood matrix, column index
/// b·points + v. `s2` values below 1e-300 are evaluated at the smallest
/// variance of the sieve.
pub(crate) fn joint_likelihood(s2: &[f64], a: &[f64], sieve: &Sieve2D, df: f64, k: f64) -> Result<LikelihoodMatrix> {
    let pv = sieve.residual_grid.len();
    let columns: Vec<(usize, usize)> = (0..sieve.bins.len()).flat_map(|b| (0..pv).map(move |v| (b, v))).collect();
    let kdes: Vec<LogKde<'_>> = columns
        .par_iter()
        .map(|&(b, v)| {
            let bin = &sieve.bins[b];
            LogKde::new(&bin.mu, bin.variances[v] / k)
        })
        .collect();
    let atoms: Vec<ChisqAtom> = columns
        .iter()
        .map(|&(b, v)| ChisqAtom::new(df, sieve.bins[b].variances[v]))
        .collect();
    let floor = sieve.min_variance();
    let shape = 0.5 * df - 1.0;
    LikelihoodMatrix::build(s2.len(), columns.len(), |i, row| {
        let x = if s2[i] < 1e-300 { floor } else { s2[i] };
        let ln_x = x.ln();
        for ((out, kde), atom) in row.iter_mut().zip(&kdes).zip(&atoms) {
            let g = kde.eval(a[i]);
            *out = if g == f64::NEG_INFINITY {
                g
            } else {
                g + atom.ln_density(x, ln_x, shape)
            };
        }
    })
}
