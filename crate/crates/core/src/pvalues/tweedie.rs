//! P-values written as one-dimensional integrals of the marginal density at
//! K − p + 1 degrees of freedom. These are independent cross-checks of the
//! direct ratios, not the production path.
//!
//! With d = K − p, x the (scaled) variance and z̃ the standardized contrast,
//!
//!   P = C_d · x^{d/2−1} / f_d(x) · ∫_L^∞ t^{−(d−1)/2} f_{d+1}(t) / √((d+1)t − d x) dt,
//!
//! L = (d x + z̃²)/(d + 1). The substitution t = L + w² turns the integrand
//! into 2w/√((d+1)w² + z̃²) · t^{−(d−1)/2} f_{d+1}(t), which is bounded at
//! w = 0.

use std::f64::consts::PI;

use crate::error::Result;
use crate::linmodel::UnitSummary;
use crate::priorfit::{ChisqAtom, DiscretePrior1D, DiscretePrior2D, S2_FLOOR};
use crate::quadrature::{integrate, QuadOptions};
use crate::special::ln_gamma;

use super::LogAcc;

pub const DEFAULT_QUAD_TOL: f64 = 1e-8;

/// (d+1)w²/(2τ²) at the truncation point; e⁻⁴⁰ ≈ 4e-18 of the peak.
const TRUNCATION_EXPONENT: f64 = 40.0;

/// ln C_d = ln[(1 + 1/d)^{−d/2} Γ((d+1)/2) / (√π (d+1)^{−1/2} Γ(d/2))].
pub fn ln_tweedie_constant(d: f64) -> f64 {
    -0.5 * d * (1.0 + 1.0 / d).ln() + ln_gamma(0.5 * (d + 1.0)) - 0.5 * PI.ln() + 0.5 * (d + 1.0).ln()
        - ln_gamma(0.5 * d)
}

/// Log weights with each atom's exp(−d x/(2τ²)) factor folded in, relative
/// to the largest such factor. The rate terms of the (d+1) kernel at t then
/// reduce to rate·(t − d x/(d+1)), so nothing of order x cancels.
fn relative_weights(ln_w: &[f64], lower: &[ChisqAtom], x: f64) -> Vec<f64> {
    let shift = lower.iter().map(|a| a.rate * x).fold(f64::INFINITY, f64::min);
    ln_w.iter().zip(lower).map(|(lw, a)| lw - (a.rate * x - shift)).collect()
}

/// Integrates `g(w)` over [0, ∞) given the scales (in w) of its Gaussian
/// components, splitting at geometrically separated scales so narrow peaks
/// near zero are resolved.
fn integrate_scales<F: FnMut(f64) -> f64>(mut g: F, scales: &mut Vec<f64>, quad_tol: f64) -> Result<f64> {
    scales.sort_by(f64::total_cmp);
    let mut cuts: Vec<f64> = Vec::new();
    for &s in scales.iter() {
        let edge = s * (2.0 * TRUNCATION_EXPONENT).sqrt();
        if cuts.last().is_none_or(|&c| edge > 2.0 * c) {
            cuts.push(edge);
        } else if let Some(c) = cuts.last_mut() {
            *c = c.max(edge);
        }
    }
    let opts = QuadOptions {
        abs_tol: 0.1 * quad_tol / cuts.len() as f64,
        rel_tol: 1e-12,
        max_subdivisions: 2000,
    };
    let mut total = 0.0;
    let mut lo = 0.0;
    for hi in cuts {
        total += integrate(&mut g, lo, hi, opts)?.value[0];
        lo = hi;
    }
    Ok(total)
}

/// 2w/√((d+1)w² + z̃²), with the w → 0 limit when z̃ = 0.
#[inline]
fn edge_factor(w: f64, d: f64, zt: f64) -> f64 {
    if w == 0.0 {
        return if zt == 0.0 { 2.0 / (d + 1.0).sqrt() } else { 0.0 };
    }
    2.0 * w / ((d + 1.0) * w * w + zt * zt).sqrt()
}

/// Trended 1-D p-value through the integral representation; `trend_xi2` is
/// ξ̂²(M) for the unit.
pub fn tweedie_reg(u: &UnitSummary, prior: &DiscretePrior1D, trend_xi2: f64, nu: f64, quad_tol: f64) -> Result<f64> {
    let d = u.df as f64;
    let mut x = u.s2 / trend_xi2;
    if !(x >= S2_FLOOR) {
        x = prior.support()[0];
    }
    let zt = u.z.abs() / (nu * trend_xi2.sqrt());
    let ln_x = x.ln();
    let ln_w: Vec<f64> = prior.weights().iter().map(|w| w.ln()).collect();
    let lower: Vec<ChisqAtom> = prior.support().iter().map(|&t| ChisqAtom::new(d, t)).collect();
    let upper: Vec<ChisqAtom> = prior.support().iter().map(|&t| ChisqAtom::new(d + 1.0, t)).collect();

    let ln_w_rel = relative_weights(&ln_w, &lower, x);
    let mut den = LogAcc::new();
    for (lw, atom) in ln_w_rel.iter().zip(&lower) {
        den.push(lw + atom.log_norm + (0.5 * d - 1.0) * ln_x);
    }
    let ln_pre = ln_tweedie_constant(d) + (0.5 * d - 1.0) * ln_x - den.value();
    let l = (d * x + zt * zt) / (d + 1.0);

    let integrand = |w: f64| {
        let t = l + w * w;
        let ln_t = t.ln();
        let excess = (zt * zt + (d + 1.0) * w * w) / (d + 1.0);
        let mut acc = LogAcc::new();
        for (lw, atom) in ln_w_rel.iter().zip(&upper) {
            acc.push(lw + atom.log_norm + (0.5 * (d + 1.0) - 1.0) * ln_t - atom.rate * excess);
        }
        edge_factor(w, d, zt) * (ln_pre - 0.5 * (d - 1.0) * ln_t + acc.value()).exp()
    };
    let mut scales: Vec<f64> = prior.support().iter().map(|t| (t / (d + 1.0)).sqrt()).collect();
    Ok(integrate_scales(integrand, &mut scales, quad_tol)?.clamp(0.0, 1.0))
}

/// Joint p-value through the integral representation with the (μ, σ²)
/// prior; the Gaussian factor in A rides along with each atom.
pub fn tweedie_joint(u: &UnitSummary, prior: &DiscretePrior2D, nu: f64, k: usize, quad_tol: f64) -> Result<f64> {
    let d = u.df as f64;
    let kf = k as f64;
    let floor = prior.atoms().iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
    let x = if u.s2 >= S2_FLOOR { u.s2 } else { floor };
    let zt = u.z.abs() / nu;
    let ln_x = x.ln();
    // ln w + ln N(A; μ, σ²/K) per atom.
    let ln_wa: Vec<f64> = prior
        .atoms()
        .iter()
        .zip(prior.weights())
        .map(|(&(mu, s2), &w)| w.ln() + crate::priorfit::ln_normal_density(u.a, mu, s2 / kf))
        .collect();
    let lower: Vec<ChisqAtom> = prior.atoms().iter().map(|a| ChisqAtom::new(d, a.1)).collect();
    let upper: Vec<ChisqAtom> = prior.atoms().iter().map(|a| ChisqAtom::new(d + 1.0, a.1)).collect();

    let ln_w_rel = relative_weights(&ln_wa, &lower, x);
    let mut den = LogAcc::new();
    for (lw, atom) in ln_w_rel.iter().zip(&lower) {
        den.push(lw + atom.log_norm + (0.5 * d - 1.0) * ln_x);
    }
    let ln_pre = ln_tweedie_constant(d) + (0.5 * d - 1.0) * ln_x - den.value();
    let l = (d * x + zt * zt) / (d + 1.0);

    let integrand = |w: f64| {
        let t = l + w * w;
        let ln_t = t.ln();
        let excess = (zt * zt + (d + 1.0) * w * w) / (d + 1.0);
        let mut acc = LogAcc::new();
        for (lw, atom) in ln_w_rel.iter().zip(&upper) {
            acc.push(lw + atom.log_norm + (0.5 * (d + 1.0) - 1.0) * ln_t - atom.rate * excess);
        }
        edge_factor(w, d, zt) * (ln_pre - 0.5 * (d - 1.0) * ln_t + acc.value()).exp()
    };
    let mut scales: Vec<f64> = prior.atoms().iter().map(|a| (a.1 / (d + 1.0)).sqrt()).collect();
    Ok(integrate_scales(integrand, &mut scales, quad_tol)?.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::super::{p_joint, p_partially_bayes_1d};
    use super::*;

    #[test]
    fn dirac_prior_at_zero_contrast_is_one() {
        let prior = DiscretePrior1D::dirac(1.0).unwrap();
        let u = UnitSummary { z: 0.0, s2: 0.8, a: 0.0, m: 0.0, df: 4 };
        let p = tweedie_reg(&u, &prior, 1.0, 1.0, DEFAULT_QUAD_TOL).unwrap();
        assert!((p - 1.0).abs() < DEFAULT_QUAD_TOL, "{p}");
    }

    #[test]
    fn one_dimensional_matches_direct_ratio() {
        let prior = DiscretePrior1D::new(vec![0.3, 1.0, 6.0], vec![0.2, 0.5, 0.3]).unwrap();
        for &(z, s2, xi2, df) in &[(0.7, 0.4, 1.0, 2), (2.5, 3.0, 0.5, 4), (-1.1, 0.05, 2.0, 7), (4.0, 1.0, 1.0, 1)] {
            let u = UnitSummary { z, s2, a: 0.0, m: 0.0, df };
            let direct = p_partially_bayes_1d(&u, &prior, 0.7, xi2);
            let quad = tweedie_reg(&u, &prior, xi2, 0.7, DEFAULT_QUAD_TOL).unwrap();
            assert!((direct - quad).abs() < 1e-7, "z {z} s2 {s2} df {df}: {direct} vs {quad}");
        }
    }

    #[test]
    fn joint_matches_direct_ratio() {
        let prior = DiscretePrior2D::new(
            vec![(1.0, 0.2), (1.5, 1.0), (2.0, 0.05), (0.5, 3.0)],
            vec![0.25, 0.25, 0.25, 0.25],
        )
        .unwrap();
        for &(z, s2, a) in &[(0.3, 0.5, 1.2), (1.8, 0.1, 1.9), (-3.0, 2.0, 0.4)] {
            let u = UnitSummary { z, s2, a, m: a, df: 3 };
            let direct = p_joint(&u, &prior, 0.9, 5);
            let quad = tweedie_joint(&u, &prior, 0.9, 5, DEFAULT_QUAD_TOL).unwrap();
            assert!((direct - quad).abs() < 1e-7, "{direct} vs {quad}");
        }
    }

    #[test]
    fn lower_limit_at_zero_contrast() {
        // L = d x/(d+1) when z = 0; the integrand is finite there.
        let d = 3.0;
        assert!((edge_factor(0.0, d, 0.0) - 2.0 / 2.0).abs() < 1e-15);
        assert!(edge_factor(1e-12, d, 0.0).is_finite());
    }
}
