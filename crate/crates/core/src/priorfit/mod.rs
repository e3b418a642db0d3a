//! Variance-prior estimation: likelihood kernels, discretization grids, the
//! grid NPMLE, and the parametric inverse-χ² fits.

mod active_set;
mod binned;
mod grid;
mod invchisq;
mod joint;
mod kernel;
mod npmle;

pub use binned::{fit_discrete_priors, BinRule, BinnedPriorSet};
pub use grid::{grid_1d, grid_2d, linear_grid, Sieve2D, SieveBin};
pub use invchisq::{fit_invchisq_trended, fit_invchisq_untrended, InvChisqPrior};
pub use kernel::{
    joint_kernel, ln_joint_kernel, ln_mixture_density_1d, ln_mixture_density_2d, ln_normal_density,
    ln_scaled_chisq_density, mixture_density_1d, mixture_density_2d, scaled_chisq_density, DiscretePrior1D,
    DiscretePrior2D,
};
pub(crate) use kernel::ChisqAtom;
pub use npmle::{solve_npmle, LikelihoodMatrix, NpmleFit, NpmleOptions, NpmleSolver};

use crate::error::{Error, Result};
use crate::linmodel::Summaries;
use crate::trend::TrendFit;

/// Values below this are treated as zero variance when evaluating kernels.
pub const S2_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy)]
pub struct PriorFitOptions {
    /// Number of τ² grid points.
    pub grid_size: usize,
    /// Lower grid end as a quantile of the data.
    pub lower_quantile: f64,
    /// Intensity bins of the joint grid.
    pub joint_bins: usize,
    /// Residual grid points of the joint grid.
    pub residual_points: usize,
    pub npmle: NpmleOptions,
}

impl Default for PriorFitOptions {
    fn default() -> Self {
        Self {
            grid_size: 300,
            lower_quantile: 0.01,
            joint_bins: 50,
            residual_points: 50,
            npmle: NpmleOptions::default(),
        }
    }
}

/// Grid NPMLE of the scale mixture for `v2 ~ τ² χ²_df / df`.
///
/// Values below [`S2_FLOOR`] are evaluated at the smallest grid point.
pub fn fit_npmle_1d(v2: &[f64], df: f64, opts: &PriorFitOptions) -> Result<(DiscretePrior1D, NpmleFit)> {
    let support = grid_1d(v2, opts.grid_size, opts.lower_quantile)?;
    let atoms: Vec<ChisqAtom> = support.iter().map(|&t| ChisqAtom::new(df, t)).collect();
    let shape = 0.5 * df - 1.0;
    let floor = support[0];
    let mat = LikelihoodMatrix::build(v2.len(), support.len(), |i, row| {
        let x = if v2[i] < S2_FLOOR { floor } else { v2[i] };
        let ln_x = x.ln();
        for (out, atom) in row.iter_mut().zip(&atoms) {
            *out = atom.ln_density(x, ln_x, shape);
        }
    })?;
    let fit = solve_npmle(&mat, None, &opts.npmle)?;
    if !fit.converged {
        log::warn!("NPMLE stopped after {} iterations without meeting the tolerance", fit.iterations);
    }
    let prior = DiscretePrior1D::pruned(&support, &fit.weights, opts.npmle.prune)?;
    Ok((prior, fit))
}

/// Untrended NPMLE on the raw S².
pub fn fit_untrended_npmle(units: &Summaries, opts: &PriorFitOptions) -> Result<DiscretePrior1D> {
    let s2: Vec<f64> = units.units.iter().map(|u| u.s2).collect();
    Ok(fit_npmle_1d(&s2, units.df() as f64, opts)?.0)
}

/// NPMLE on the detrended variances S²/ξ̂²(M).
pub fn fit_reg_npmle(units: &Summaries, trend: &TrendFit, opts: &PriorFitOptions) -> Result<DiscretePrior1D> {
    let v2: Vec<f64> = units.units.iter().map(|u| u.s2 / trend.xi2(u.m)).collect();
    Ok(fit_npmle_1d(&v2, units.df() as f64, opts)?.0)
}

/// Fitted joint prior together with the sieve and bin-level weights.
#[derive(Debug, Clone)]
pub struct JointFit {
    pub prior: DiscretePrior2D,
    pub sieve: Sieve2D,
    /// Weight of each (bin, variance) column, index b·points + v.
    pub column_weights: Vec<f64>,
    pub fit: NpmleFit,
}

/// Joint NPMLE of (μ, σ²) from (S², A) using the intensity side value.
pub fn fit_joint_npmle(units: &Summaries, trend: &TrendFit, opts: &PriorFitOptions) -> Result<JointFit> {
    let s2: Vec<f64> = units.units.iter().map(|u| u.s2).collect();
    let a: Vec<f64> = units.units.iter().map(|u| u.a).collect();
    let sieve = grid_2d(&a, &s2, trend, opts.joint_bins, opts.residual_points, opts.lower_quantile)?;
    let mat = joint::joint_likelihood(&s2, &a, &sieve, units.df() as f64, units.k as f64)?;
    let fit = solve_npmle(&mat, None, &opts.npmle)?;
    if !fit.converged {
        log::warn!("joint NPMLE stopped after {} iterations without meeting the tolerance", fit.iterations);
    }
    let pv = sieve.residual_grid.len();
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    for (col, &w) in fit.weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let bin = &sieve.bins[col / pv];
        let var = bin.variances[col % pv];
        let share = w / bin.mu.len() as f64;
        for &mu in &bin.mu {
            atoms.push((mu, var));
            weights.push(share);
        }
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("joint NPMLE produced no mass".into()));
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    Ok(JointFit {
        prior: DiscretePrior2D::new(atoms, weights)?,
        sieve,
        column_weights: fit.weights.clone(),
        fit,
    })
}
