//! P-values under the true data-generating distribution.
//!
//! With external side information M = μ the oracle conditions on (S², μ):
//! σ² = e^{m(μ)}τ² with τ² ~ G. With the average intensity it conditions on
//! (S², A) and integrates μ ~ N(mean, sd²) numerically. For a scaled
//! inverse-χ² G the τ² integral is conjugate: given μ the posterior of σ²
//! is scaled inverse-χ² on κ + d + 1 degrees of freedom and the p-value is a
//! t tail.

use crate::error::Result;
use crate::linmodel::UnitSummary;
use crate::priorfit::{ln_normal_density, ln_scaled_chisq_density, S2_FLOOR};
use crate::quadrature::{integrate_vec, QuadOptions};
use crate::special::{ln_gamma, ln_two_sided_normal_p, two_sided_t_p};

use super::{PriorG, SimConfig, SimSide, TrendM};

/// Half-width of the μ window in prior standard deviations.
const MU_WINDOW_SDS: f64 = 12.0;

pub struct OracleModel {
    prior: PriorG,
    trend: TrendM,
    mu_mean: f64,
    mu_sd: f64,
    side: SimSide,
    df: f64,
    k: f64,
    nu: f64,
}

impl OracleModel {
    pub fn new(cfg: &SimConfig, nu: f64) -> Self {
        Self {
            prior: cfg.prior_g.clone(),
            trend: cfg.trend_m.clone(),
            mu_mean: cfg.mu_dist.mean,
            mu_sd: cfg.mu_dist.sd,
            side: cfg.side_mode,
            df: (cfg.k() - 2) as f64,
            k: cfg.k() as f64,
            nu,
        }
    }

    /// Oracle p-value of a unit whose latent mean is `mu` (used only with
    /// external side information).
    pub fn p_value(&self, u: &UnitSummary, mu: f64) -> Result<f64> {
        if u.z == 0.0 {
            return Ok(1.0);
        }
        match self.side {
            SimSide::ExternalMu => Ok(self.p_given_mu(u, mu)),
            SimSide::AverageIntensity => self.p_given_intensity(u),
        }
    }

    fn atoms(&self) -> Vec<(f64, f64)> {
        match self.prior {
            PriorG::Dirac { v } => vec![(v, 1.0)],
            PriorG::TwoPoint { v1, v2, w } => vec![(v1, w), (v2, 1.0 - w)],
            PriorG::ScaledInvchisq { .. } => Vec::new(),
        }
    }

    fn p_given_mu(&self, u: &UnitSummary, mu: f64) -> f64 {
        let c = self.trend.eval(mu).exp();
        let s2 = u.s2.max(S2_FLOOR);
        let z = u.z.abs() / self.nu;
        match self.prior {
            PriorG::ScaledInvchisq { df: kappa, scale } => {
                let post = (kappa * c * scale + self.df * s2) / (kappa + self.df);
                two_sided_t_p(z / post.sqrt(), kappa + self.df)
            }
            _ => {
                let mut num = Vec::new();
                let mut den = Vec::new();
                for (tau2, w) in self.atoms() {
                    if w <= 0.0 {
                        continue;
                    }
                    let sigma2 = c * tau2;
                    let lp = w.ln() + ln_scaled_chisq_density(s2, self.df, sigma2);
                    den.push(lp);
                    num.push(lp + ln_two_sided_normal_p(z / sigma2.sqrt()));
                }
                let d = crate::special::log_sum_exp(&den);
                (crate::special::log_sum_exp(&num) - d).exp().clamp(0.0, 1.0)
            }
        }
    }

    /// (ln weight, p) of the unit given μ, integrated over τ².
    fn given_mu_terms(&self, u: &UnitSummary, mu: f64, atoms: &[(f64, f64)]) -> [(f64, f64); 2] {
        let m = self.trend.eval(mu);
        let c = m.exp();
        let s2 = u.s2.max(S2_FLOOR);
        let z = u.z.abs() / self.nu;
        let ln_phi = ln_normal_density(mu, self.mu_mean, self.mu_sd * self.mu_sd);
        match self.prior {
            PriorG::ScaledInvchisq { df: kappa, scale } => {
                let resid = u.a - mu;
                let q = self.df * s2 + self.k * resid * resid + kappa * c * scale;
                let shape = 0.5 * (self.df + 1.0 + kappa);
                // Terms that do not depend on μ cancel in the ratio.
                let ln_w = ln_phi + 0.5 * kappa * m + ln_gamma(shape) - shape * q.ln();
                let post = q / (self.df + 1.0 + kappa);
                let p = two_sided_t_p(z / post.sqrt(), self.df + 1.0 + kappa);
                [(ln_w, p), (f64::NEG_INFINITY, 0.0)]
            }
            _ => {
                let mut out = [(f64::NEG_INFINITY, 0.0); 2];
                for (slot, &(tau2, w)) in out.iter_mut().zip(atoms) {
                    if w <= 0.0 {
                        continue;
                    }
                    let sigma2 = c * tau2;
                    let ln_w = w.ln()
                        + ln_phi
                        + ln_scaled_chisq_density(s2, self.df, sigma2)
                        + ln_normal_density(u.a, mu, sigma2 / self.k);
                    *slot = (ln_w, ln_two_sided_normal_p(z / sigma2.sqrt()).exp());
                }
                out
            }
        }
    }

    fn p_given_intensity(&self, u: &UnitSummary) -> Result<f64> {
        let atoms = self.atoms();
        let lo = self.mu_mean - MU_WINDOW_SDS * self.mu_sd;
        let hi = self.mu_mean + MU_WINDOW_SDS * self.mu_sd;

        // Narrowest plausible width of the A | μ likelihood.
        let (m_lo, _) = self.trend.range();
        let tau_min = match self.prior {
            PriorG::Dirac { v } => v,
            PriorG::TwoPoint { v1, v2, .. } => v1.min(v2),
            PriorG::ScaledInvchisq { df, scale } => df * scale / (df + 10.0 * (2.0 * df).sqrt()),
        };
        let narrow = (m_lo.exp() * tau_min / self.k).sqrt().min(self.mu_sd);
        let mut cuts = vec![lo, hi];
        if u.a > lo && u.a < hi {
            cuts.push(u.a);
        }
        let mut step = narrow;
        while step < hi - lo {
            for c in [u.a - step, u.a + step] {
                if c > lo && c < hi {
                    cuts.push(c);
                }
            }
            step *= 4.0;
        }
        if let TrendM::Logistic { center, width, .. } = self.trend {
            for c in [center - 4.0 * width, center, center + 4.0 * width] {
                if c > lo && c < hi {
                    cuts.push(c);
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();

        // Reference log weight so the integrand is O(1) at its peak.
        let mut reference = f64::NEG_INFINITY;
        for w in cuts.windows(2) {
            for j in 0..=8 {
                let mu = w[0] + (w[1] - w[0]) * j as f64 / 8.0;
                for (lw, _) in self.given_mu_terms(u, mu, &atoms) {
                    reference = reference.max(lw);
                }
            }
        }
        if reference == f64::NEG_INFINITY {
            return Ok(1.0);
        }
        let opts = QuadOptions {
            abs_tol: 1e-13,
            rel_tol: 1e-9,
            max_subdivisions: 4000,
        };
        let mut num = 0.0;
        let mut den = 0.0;
        for w in cuts.windows(2) {
            let q = integrate_vec(
                |mu| {
                    let mut acc = [0.0; 2];
                    for (lw, p) in self.given_mu_terms(u, mu, &atoms) {
                        let e = (lw - reference).exp();
                        acc[0] += e * p;
                        acc[1] += e;
                    }
                    acc
                },
                w[0],
                w[1],
                opts,
            )?;
            num += q.value[0];
            den += q.value[1];
        }
        Ok(if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 1.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::two_sided_normal_p;

    #[test]
    fn external_dirac_is_gaussian_at_true_variance() {
        let cfg = SimConfig::preset("setting4").unwrap();
        let o = OracleModel::new(&cfg, 0.7);
        let u = UnitSummary { z: 1.3, s2: 0.4, a: 20.0, m: 20.1, df: 6 };
        let sigma = cfg.trend_m.eval(20.1).exp().sqrt();
        let p = o.p_value(&u, 20.1).unwrap();
        assert!((p - two_sided_normal_p(1.3 / (0.7 * sigma))).abs() < 1e-14);
    }

    #[test]
    fn flat_trend_intensity_oracle_matches_gaussian_convolution() {
        // With m ≡ 0 and a two-point G, ∫N(A; μ, σ²/K)φ(μ)dμ = N(A; mean, sd² + σ²/K).
        let cfg = SimConfig::preset("setting1").unwrap();
        let o = OracleModel::new(&cfg, (2.0f64 / 3.0).sqrt());
        let u = UnitSummary { z: 2.2, s2: 3.0, a: 23.0, m: 23.0, df: 4 };
        let mut num = 0.0;
        let mut den = 0.0;
        for (tau2, w) in [(1.0, 0.5), (10.0, 0.5)] {
            let f = (ln_scaled_chisq_density(3.0, 4.0, tau2) + ln_normal_density(23.0, 20.0, 9.0 + tau2 / 6.0)).exp();
            num += w * f * two_sided_normal_p(2.2 / (o.nu * f64::sqrt(tau2)));
            den += w * f;
        }
        let p = o.p_value(&u, f64::NAN).unwrap();
        assert!((p - num / den).abs() < 1e-8, "{p} vs {}", num / den);
    }

    #[test]
    fn conjugate_branch_matches_discretized_prior() {
        // Setting 3 oracle against a fine τ² discretization of the same G.
        let cfg = SimConfig::preset("setting3").unwrap();
        let o = OracleModel::new(&cfg, (1.0f64 / 2.0 + 1.0 / 10.0).sqrt());
        let u = UnitSummary { z: 0.9, s2: 0.05, a: 20.1, m: 20.1, df: 10 };
        let exact = o.p_value(&u, f64::NAN).unwrap();

        let grid = 2000;
        let mut support = Vec::new();
        for j in 0..grid {
            let q = (j as f64 + 0.5) / grid as f64;
            let x = statrs::distribution::ContinuousCDF::inverse_cdf(
                &statrs::distribution::ChiSquared::new(10.0).unwrap(),
                q,
            );
            support.push((10.0 / x, 1.0 / grid as f64));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        let steps = 2000;
        for s in 0..steps {
            let mu = 20.0 + 0.2 * (-8.0 + 16.0 * (s as f64 + 0.5) / steps as f64);
            let c = cfg.trend_m.eval(mu).exp();
            let phi = ln_normal_density(mu, 20.0, 0.04);
            for &(tau2, w) in &support {
                let s2 = c * tau2;
                let f = (phi + ln_scaled_chisq_density(0.05, 10.0, s2) + ln_normal_density(20.1, mu, s2 / 12.0)).exp();
                num += w * f * two_sided_normal_p(0.9 / (o.nu * s2.sqrt()));
                den += w * f;
            }
        }
        assert!((exact - num / den).abs() < 2e-3, "{exact} vs {}", num / den);
    }
}
