//! Likelihood kernels and discrete mixing distributions.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::special::{ln_gamma, log_sum_exp};

/// ln of the density of τ²χ²_df/df at x.
pub fn ln_scaled_chisq_density(x: f64, df: f64, tau2: f64) -> f64 {
    let half = 0.5 * df;
    let rate = half / tau2;
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    if x == 0.0 {
        return if df == 2.0 {
            rate.ln()
        } else if df < 2.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
    }
    half * rate.ln() - ln_gamma(half) + (half - 1.0) * x.ln() - rate * x
}

/// Density of τ²χ²_df/df at x.
pub fn scaled_chisq_density(x: f64, df: f64, tau2: f64) -> f64 {
    ln_scaled_chisq_density(x, df, tau2).exp()
}

/// Per-atom constants of the scaled-χ² kernel, for evaluating one x against
/// many scales.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ChisqAtom {
    /// (df/2)·ln(df/(2τ²)) − lnΓ(df/2)
    pub log_norm: f64,
    /// df/(2τ²)
    pub rate: f64,
}

impl ChisqAtom {
    pub fn new(df: f64, tau2: f64) -> Self {
        let half = 0.5 * df;
        let rate = half / tau2;
        Self {
            log_norm: half * rate.ln() - ln_gamma(half),
            rate,
        }
    }

    /// ln density given ln x and x (x > 0), with `shape` = df/2 − 1.
    #[inline]
    pub fn ln_density(&self, x: f64, ln_x: f64, shape: f64) -> f64 {
        self.log_norm + shape * ln_x - self.rate * x
    }
}

/// ln of p_χ²(s2 | κ, σ²) · N(a; μ, σ²/K).
pub fn ln_joint_kernel(s2: f64, a: f64, mu: f64, sigma2: f64, kappa: f64, k: f64) -> f64 {
    ln_scaled_chisq_density(s2, kappa, sigma2) + ln_normal_density(a, mu, sigma2 / k)
}

pub fn joint_kernel(s2: f64, a: f64, mu: f64, sigma2: f64, kappa: f64, k: f64) -> f64 {
    ln_joint_kernel(s2, a, mu, sigma2, kappa, k).exp()
}

#[inline]
pub fn ln_normal_density(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - 0.5 * d * d / var
}

fn check_simplex(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Input("prior has no atoms".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Input("prior weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Input(format!("prior weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Discrete distribution of τ² on a positive, strictly increasing support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePrior1D {
    support: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscretePrior1D {
    pub fn new(support: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if support.len() != weights.len() {
            return Err(Error::Input("support and weights differ in length".into()));
        }
        if support.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Input("prior support must be finite and positive".into()));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("prior support must be strictly increasing".into()));
        }
        check_simplex(&weights)?;
        Ok(Self { support, weights })
    }

    pub fn dirac(tau2: f64) -> Result<Self> {
        Self::new(vec![tau2], vec![1.0])
    }

    /// Drops atoms with weight below `threshold` and renormalizes.
    pub fn pruned(support: &[f64], weights: &[f64], threshold: f64) -> Result<Self> {
        let keep: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] >= threshold).collect();
        let total: f64 = keep.iter().map(|&k| weights[k]).sum();
        Self::new(
            keep.iter().map(|&k| support[k]).collect(),
            keep.iter().map(|&k| weights[k] / total).collect(),
        )
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.weights).map(|(t, w)| t * w).sum()
    }
}

/// ln Σ_k w_k p_χ²(v2 | df, τ²_k).
pub fn ln_mixture_density_1d(prior: &DiscretePrior1D, df: f64, v2: f64) -> f64 {
    let terms: Vec<f64> = prior
        .support
        .iter()
        .zip(&prior.weights)
        .map(|(&t, &w)| w.ln() + ln_scaled_chisq_density(v2, df, t))
        .collect();
    log_sum_exp(&terms)
}

pub fn mixture_density_1d(prior: &DiscretePrior1D, df: f64, v2: f64) -> f64 {
    ln_mixture_density_1d(prior, df, v2).exp()
}

/// Discrete distribution of (μ, σ²).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePrior2D {
    atoms: Vec<(f64, f64)>,
    weights: Vec<f64>,
}

impl DiscretePrior2D {
    pub fn new(atoms: Vec<(f64, f64)>, weights: Vec<f64>) -> Result<Self> {
        if atoms.len() != weights.len() {
            return Err(Error::Input("atoms and weights differ in length".into()));
        }
        if atoms.iter().any(|(m, s)| !m.is_finite() || !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Input("prior atoms need finite μ and positive σ²".into()));
        }
        check_simplex(&weights)?;
        Ok(Self { atoms, weights })
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// ln Σ_k w_k p_κ(s2, a | μ_k, σ²_k).
pub fn ln_mixture_density_2d(prior: &DiscretePrior2D, kappa: f64, k: f64, s2: f64, a: f64) -> f64 {
    let terms: Vec<f64> = prior
        .atoms
        .iter()
        .zip(&prior.weights)
        .map(|(&(mu, sigma2), &w)| w.ln() + ln_joint_kernel(s2, a, mu, sigma2, kappa, k))
        .collect();
    log_sum_exp(&terms)
}

pub fn mixture_density_2d(prior: &DiscretePrior2D, kappa: f64, k: f64, s2: f64, a: f64) -> f64 {
    ln_mixture_density_2d(prior, kappa, k, s2, a).exp()
}
