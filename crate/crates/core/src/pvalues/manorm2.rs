//! The MAnorm2 two-group baseline: a mean–variance curve fitted to the
//! pooled per-group (mean, variance) pairs, a prior degrees of freedom from
//! trigamma matching of the log variance ratios, and a moderated t-test
//! whose curve is evaluated at the equal-weight average of the group means.

use crate::error::{Error, Result};
use crate::linmodel::Design;
use crate::special::{digamma, trigamma, trigamma_inverse, two_sided_normal_p, two_sided_t_p};
use crate::trend::{fit_trend, TrendFit};

use super::{MethodId, PValueVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub mean_a: f64,
    pub var_a: f64,
    pub mean_b: f64,
    pub var_b: f64,
}

/// Per-group means and sample variances for each row of the row-major
/// n × K matrix `y`. Needs a two-group indicator design with at least two
/// samples per group.
pub fn group_stats(y: &[f64], design: &Design) -> Result<(Vec<GroupStats>, usize, usize)> {
    let groups = design
        .groups()
        .ok_or_else(|| Error::Design("MAnorm2 needs a two-group indicator design".into()))?;
    let (ka, kb) = design.group_sizes().expect("groups imply sizes");
    if ka < 2 || kb < 2 {
        return Err(Error::Design(format!(
            "MAnorm2 needs at least two samples per group, got {ka} and {kb}"
        )));
    }
    let k = design.k();
    if y.len() % k != 0 {
        return Err(Error::Input(format!("matrix length {} is not a multiple of K = {k}", y.len())));
    }
    let stats = y
        .chunks(k)
        .map(|row| {
            let mut sum = [0.0; 2];
            for (v, &g) in row.iter().zip(groups) {
                sum[g] += v;
            }
            let mean = [sum[0] / ka as f64, sum[1] / kb as f64];
            let mut ss = [0.0; 2];
            for (v, &g) in row.iter().zip(groups) {
                ss[g] += (v - mean[g]).powi(2);
            }
            GroupStats {
                mean_a: mean[0],
                var_a: ss[0] / (ka - 1) as f64,
                mean_b: mean[1],
                var_b: ss[1] / (kb - 1) as f64,
            }
        })
        .collect();
    Ok((stats, ka, kb))
}

/// Fitted curve and prior degrees of freedom.
#[derive(Debug, Clone)]
pub struct Manorm2Fit {
    /// Trend of log variance on group mean.
    pub trend: TrendFit,
    /// Multiplier taking exp(trend) to the prior scale of 1/σ².
    pub scale: f64,
    pub d0: f64,
    pub k_a: usize,
    pub k_b: usize,
}

impl Manorm2Fit {
    pub fn fit(stats: &[GroupStats], k_a: usize, k_b: usize) -> Result<Self> {
        if k_a < 2 || k_b < 2 {
            return Err(Error::Design(format!(
                "MAnorm2 needs at least two samples per group, got {k_a} and {k_b}"
            )));
        }
        let mut points = Vec::with_capacity(2 * stats.len());
        for s in stats {
            for (mean, var) in [(s.mean_a, s.var_a), (s.mean_b, s.var_b)] {
                if var > 0.0 && var.is_finite() {
                    points.push((mean, var.ln()));
                }
            }
        }
        if points.len() < 2 * stats.len() {
            log::warn!("MAnorm2: {} zero group variances left out of the curve fit", 2 * stats.len() - points.len());
        }
        if points.len() < 4 {
            return Err(Error::Input("MAnorm2 needs positive group variances to fit its curve".into()));
        }
        let trend = fit_trend(&points)?;

        let mut d0_solutions = Vec::new();
        let mut offsets = Vec::new();
        for (g, size) in [(0usize, k_a), (1, k_b)] {
            let nu_g = (size - 1) as f64;
            let z: Vec<f64> = stats
                .iter()
                .map(|s| if g == 0 { (s.mean_a, s.var_a) } else { (s.mean_b, s.var_b) })
                .filter(|(_, v)| *v > 0.0 && v.is_finite())
                .map(|(m, v)| v.ln() - trend.m_hat(m))
                .collect();
            if z.len() < 2 {
                continue;
            }
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64;
            let target = var - trigamma(0.5 * nu_g);
            d0_solutions.push(if target > 0.0 { 2.0 * trigamma_inverse(target) } else { f64::INFINITY });
            offsets.push((z.len() as f64, mean - digamma(0.5 * nu_g) + (0.5 * nu_g).ln()));
        }
        let finite: Vec<f64> = d0_solutions.iter().copied().filter(|v| v.is_finite()).collect();
        let d0 = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        // Under the working prior, E log(S²/ξ) = ψ(ν/2) − ln(ν/2) − ψ(d₀/2) + ln(d₀/2).
        let total: f64 = offsets.iter().map(|o| o.0).sum();
        let offset = offsets.iter().map(|(n, o)| n * o).sum::<f64>() / total;
        let bias = if d0.is_infinite() { 0.0 } else { digamma(0.5 * d0) - (0.5 * d0).ln() };
        Ok(Self {
            trend,
            scale: (offset + bias).exp(),
            d0,
            k_a,
            k_b,
        })
    }

    /// Prior variance scale at curve argument `m`.
    pub fn curve(&self, m: f64) -> f64 {
        self.scale * self.trend.xi2(m)
    }

    pub fn p_value(&self, s: &GroupStats) -> f64 {
        let diff = s.mean_b - s.mean_a;
        if diff == 0.0 {
            return 1.0;
        }
        let (ka, kb) = (self.k_a as f64, self.k_b as f64);
        let resid_df = ka + kb - 2.0;
        let prior = self.curve(0.5 * (s.mean_a + s.mean_b));
        let moderated = if self.d0.is_infinite() {
            prior
        } else {
            let pooled = ((ka - 1.0) * s.var_a + (kb - 1.0) * s.var_b) / resid_df;
            (self.d0 * prior + resid_df * pooled) / (self.d0 + resid_df)
        };
        let t = diff / ((1.0 / ka + 1.0 / kb) * moderated).sqrt();
        if self.d0.is_infinite() {
            two_sided_normal_p(t)
        } else {
            two_sided_t_p(t, self.d0 + resid_df)
        }
    }
}

pub fn p_manorm2(stats: &[GroupStats], k_a: usize, k_b: usize) -> Result<PValueVector> {
    let fit = Manorm2Fit::fit(stats, k_a, k_b)?;
    PValueVector::new(MethodId::Manorm2, stats.iter().map(|s| fit.p_value(s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::{fit_unit, intensity_contrast, manorm_contrast, Contrast, SideMode};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn balanced_tilde_equals_intensity() {
        let d = Design::two_group(3, 3).unwrap();
        let c = Contrast::new(vec![1.0, -1.0], &d).unwrap();
        let y = [1.0, 2.5, 0.3, 4.0, 2.2, 3.1];
        let a = fit_unit(&y, &d, &c, SideMode::AverageIntensity).unwrap();
        let t = fit_unit(&y, &d, &c, SideMode::ManormTilde).unwrap();
        assert_relative_eq!(a.m, t.m, max_relative = 1e-15);
        assert_eq!(intensity_contrast(&d).weights(), manorm_contrast(&d).unwrap().weights());
        let (stats, _, _) = group_stats(&y, &d).unwrap();
        assert_relative_eq!(0.5 * (stats[0].mean_a + stats[0].mean_b), a.a, max_relative = 1e-15);
    }

    #[test]
    fn group_stats_by_hand() {
        let d = Design::two_group(2, 3).unwrap();
        let (s, ka, kb) = group_stats(&[1.0, 3.0, 0.0, 1.0, 5.0], &d).unwrap();
        assert_eq!((ka, kb), (2, 3));
        assert_eq!(s[0].mean_a, 2.0);
        assert_eq!(s[0].var_a, 2.0);
        assert_eq!(s[0].mean_b, 2.0);
        assert_relative_eq!(s[0].var_b, 7.0, max_relative = 1e-15);
    }

    #[test]
    fn singleton_group_is_rejected() {
        let d = Design::two_group(1, 3).unwrap();
        assert!(matches!(group_stats(&[1.0, 2.0, 3.0, 4.0], &d), Err(Error::Design(_))));
    }

    #[test]
    fn homogeneous_variances_give_gaussian_limit() {
        // Identical variances have no spread beyond zero, so d₀ = ∞.
        let stats: Vec<GroupStats> = (0..50)
            .map(|i| GroupStats { mean_a: i as f64, var_a: 1.0, mean_b: i as f64 + 0.5, var_b: 1.0 })
            .collect();
        let fit = Manorm2Fit::fit(&stats, 3, 3).unwrap();
        assert!(fit.d0.is_infinite());
        let p = fit.p_value(&stats[10]);
        let expected = two_sided_normal_p(0.5 / (fit.curve(10.25) * (2.0 / 3.0)).sqrt());
        assert_relative_eq!(p, expected, max_relative = 1e-12);
    }

    #[test]
    fn recovers_prior_df_under_working_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d0 = 8.0;
        let (ka, kb) = (4usize, 4usize);
        let chi = |rng: &mut ChaCha8Rng, df: f64| -> f64 {
            use rand_distr::{ChiSquared, Distribution};
            ChiSquared::new(df).unwrap().sample(rng)
        };
        let stats: Vec<GroupStats> = (0..20000)
            .map(|_| {
                let mean = rng.random_range(5.0..10.0);
                let mut g = || {
                    let sigma2 = d0 / chi(&mut rng, d0);
                    sigma2 * chi(&mut rng, 3.0) / 3.0
                };
                GroupStats { mean_a: mean, var_a: g(), mean_b: mean, var_b: g() }
            })
            .collect();
        let fit = Manorm2Fit::fit(&stats, ka, kb).unwrap();
        assert!((fit.d0 - d0).abs() < 1.0, "d0 {}", fit.d0);
        assert!((fit.curve(7.5) - 1.0).abs() < 0.05, "scale {}", fit.curve(7.5));
    }
}
