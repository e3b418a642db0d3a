//! Per-unit p-values for every method, plus quadrature evaluators of the
//! same p-values through adjacent-degree marginal densities.

mod manorm2;
mod tweedie;

pub use manorm2::{group_stats, p_manorm2, GroupStats, Manorm2Fit};
pub use tweedie::{ln_tweedie_constant, tweedie_joint, tweedie_reg, DEFAULT_QUAD_TOL};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::UnitSummary;
use crate::priorfit::{BinnedPriorSet, ChisqAtom, DiscretePrior1D, DiscretePrior2D, InvChisqPrior, S2_FLOOR};
use crate::special::{ln_two_sided_normal_p, two_sided_normal_p, two_sided_t_p};
use crate::trend::TrendFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    TTest,
    UntrendedInvChisq,
    UntrendedNpmle,
    RegInvChisq,
    RegNpmle,
    JointNpmle,
    DiscreteJoint,
    Map,
    Manorm2,
}

impl MethodId {
    pub const ALL: [MethodId; 9] = [
        MethodId::TTest,
        MethodId::UntrendedInvChisq,
        MethodId::UntrendedNpmle,
        MethodId::RegInvChisq,
        MethodId::RegNpmle,
        MethodId::JointNpmle,
        MethodId::DiscreteJoint,
        MethodId::Map,
        MethodId::Manorm2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::TTest => "t_test",
            MethodId::UntrendedInvChisq => "untrended_inv_chisq",
            MethodId::UntrendedNpmle => "untrended_npmle",
            MethodId::RegInvChisq => "reg_inv_chisq",
            MethodId::RegNpmle => "reg_npmle",
            MethodId::JointNpmle => "joint_npmle",
            MethodId::DiscreteJoint => "discrete_joint",
            MethodId::Map => "map",
            MethodId::Manorm2 => "manorm2",
        }
    }

    /// Whether the method uses a fitted trend in the side information.
    pub fn is_trended(self) -> bool {
        matches!(
            self,
            MethodId::RegInvChisq | MethodId::RegNpmle | MethodId::JointNpmle | MethodId::Map
        )
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        MethodId::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| {
                let known: Vec<&str> = MethodId::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method '{s}' (known: {})", known.join(", ")))
            })
    }
}

/// One method's p-values in unit order.
#[derive(Debug, Clone, PartialEq)]
pub struct PValueVector {
    pub method: MethodId,
    pub p: Vec<f64>,
}

impl PValueVector {
    pub fn new(method: MethodId, p: Vec<f64>) -> Result<Self> {
        if let Some(i) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numerical(format!("{method}: p-value {} at unit {i} is outside [0, 1]", p[i])));
        }
        Ok(Self { method, p })
    }
}

/// Streaming log-sum-exp.
#[derive(Debug, Clone, Copy)]
struct LogAcc {
    max: f64,
    sum: f64,
}

impl LogAcc {
    fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    #[inline]
    fn push(&mut self, v: f64) {
        if v == f64::NEG_INFINITY {
            return;
        }
        if v > self.max {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        } else {
            self.sum += (v - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Classical t-test p-value. With S² = 0 the limit is 0 for Z ≠ 0 and 1
/// for Z = 0.
pub fn p_ttest(u: &UnitSummary, nu: f64) -> f64 {
    if u.z == 0.0 {
        return 1.0;
    }
    if u.s2 <= 0.0 {
        return 0.0;
    }
    two_sided_t_p(u.z / (nu * u.s2.sqrt()), u.df as f64)
}

/// Moderated t-test with the inverse-χ² prior scaled by `xi2`. An infinite
/// κ₀ gives the Gaussian limit with variance s₀²ξ².
pub fn p_limma_param(u: &UnitSummary, prior: &InvChisqPrior, nu: f64, xi2: f64) -> f64 {
    if u.z == 0.0 {
        return 1.0;
    }
    let df = u.df as f64;
    let s2 = prior.moderated_variance(u.s2, df, xi2);
    if !(s2 > 0.0) {
        return 0.0;
    }
    let t = u.z / (nu * s2.sqrt());
    if prior.kappa0.is_infinite() {
        two_sided_normal_p(t)
    } else {
        two_sided_t_p(t, df + prior.kappa0)
    }
}

/// Gaussian p-value with the variance set to the trend, ignoring S².
pub fn p_map(u: &UnitSummary, trend: &TrendFit, nu: f64) -> f64 {
    if u.z == 0.0 {
        return 1.0;
    }
    two_sided_normal_p(u.z / (nu * trend.xi2(u.m).sqrt()))
}

/// A p-value together with a flag set when the marginal density underflowed
/// and the nearest support point was used instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged {
    pub p: f64,
    pub fallback: bool,
}

fn ratio(num: f64, den: f64) -> f64 {
    (num - den).exp().clamp(0.0, 1.0)
}

/// Evaluates Σw·2Φ(−|Z|/(νξτ))·p(S²/ξ²|τ²) / Σw·p(S²/ξ²|τ²) for one prior
/// across many units.
#[derive(Debug, Clone)]
pub struct ScaleMixtureP {
    df: f64,
    ln_w: Vec<f64>,
    atoms: Vec<ChisqAtom>,
    tau: Vec<f64>,
    ln_tau2: Vec<f64>,
    floor: f64,
}

impl ScaleMixtureP {
    pub fn new(prior: &DiscretePrior1D, df: f64) -> Self {
        let support = prior.support();
        Self {
            df,
            ln_w: prior.weights().iter().map(|w| w.ln()).collect(),
            atoms: support.iter().map(|&t| ChisqAtom::new(df, t)).collect(),
            tau: support.iter().map(|t| t.sqrt()).collect(),
            ln_tau2: support.iter().map(|t| t.ln()).collect(),
            floor: support[0],
        }
    }

    pub fn eval(&self, z: f64, s2: f64, nu: f64, xi2: f64) -> Flagged {
        if z == 0.0 {
            return Flagged { p: 1.0, fallback: false };
        }
        let mut x = s2 / xi2;
        if !(x >= S2_FLOOR) {
            x = self.floor;
        }
        let ln_x = x.ln();
        let shape = 0.5 * self.df - 1.0;
        let zt = z.abs() / (nu * xi2.sqrt());
        let mut num = LogAcc::new();
        let mut den = LogAcc::new();
        for k in 0..self.atoms.len() {
            let lp = self.ln_w[k] + self.atoms[k].ln_density(x, ln_x, shape);
            den.push(lp);
            num.push(lp + ln_two_sided_normal_p(zt / self.tau[k]));
        }
        let d = den.value();
        if d.is_finite() {
            return Flagged { p: ratio(num.value(), d), fallback: false };
        }
        let nearest = (0..self.tau.len())
            .min_by(|&i, &j| (self.ln_tau2[i] - ln_x).abs().total_cmp(&(self.ln_tau2[j] - ln_x).abs()))
            .unwrap_or(0);
        Flagged {
            p: two_sided_normal_p(zt / self.tau[nearest]),
            fallback: true,
        }
    }
}

/// Partially Bayes p-value under a discrete scale prior on S²/ξ².
pub fn p_partially_bayes_1d(u: &UnitSummary, prior: &DiscretePrior1D, nu: f64, xi2: f64) -> f64 {
    ScaleMixtureP::new(prior, u.df as f64).eval(u.z, u.s2, nu, xi2).p
}

/// Atoms of a joint prior that share one variance, sorted by μ.
#[derive(Debug, Clone)]
struct VarianceGroup {
    var: f64,
    chisq: ChisqAtom,
    /// −½ ln(2πσ²/K)
    ln_norm_a: f64,
    /// K/(2σ²)
    prec_half: f64,
    sigma: f64,
    mu: Vec<f64>,
    ln_w: Vec<f64>,
    /// Spread of `ln_w` within the group.
    ln_w_range: f64,
}

/// Terms of a group more than this far below its closest atom, in the
/// exponent, are dropped.
const GROUP_WINDOW: f64 = 60.0;

impl VarianceGroup {
    /// log Σ_j w_j exp(−(a − μ_j)²K/(2σ²)) over the atoms near `a`.
    fn ln_kernel_sum(&self, a: f64) -> f64 {
        let mu = &self.mu;
        let pos = mu.partition_point(|&m| m < a);
        let nearest = [pos.checked_sub(1), (pos < mu.len()).then_some(pos)]
            .into_iter()
            .flatten()
            .map(|j| (a - mu[j]).abs())
            .fold(f64::INFINITY, f64::min);
        let limit = nearest * nearest * self.prec_half + GROUP_WINDOW + self.ln_w_range;
        let reach = (limit / self.prec_half).sqrt();
        let lo = mu.partition_point(|&m| m < a - reach);
        let hi = mu.partition_point(|&m| m <= a + reach);
        let mut acc = LogAcc::new();
        for j in lo..hi {
            let d = a - mu[j];
            acc.push(self.ln_w[j] - d * d * self.prec_half);
        }
        acc.value()
    }
}

/// Evaluates the joint-prior p-value for many units. Atoms with the same σ²
/// share their χ² density and Gaussian tail evaluations.
pub struct JointMixtureP {
    df: f64,
    groups: Vec<VarianceGroup>,
    floor: f64,
}

impl JointMixtureP {
    pub fn new(prior: &DiscretePrior2D, df: f64, k: f64) -> Self {
        let mut atoms: Vec<(f64, f64, f64)> = prior
            .atoms()
            .iter()
            .zip(prior.weights())
            .filter(|(_, &w)| w > 0.0)
            .map(|(&(mu, s2), &w)| (s2, mu, w.ln()))
            .collect();
        atoms.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
        let mut groups: Vec<VarianceGroup> = Vec::new();
        for (s2, mu, ln_w) in atoms {
            match groups.last_mut() {
                Some(g) if g.var == s2 => {
                    g.mu.push(mu);
                    g.ln_w.push(ln_w);
                }
                _ => groups.push(VarianceGroup {
                    var: s2,
                    chisq: ChisqAtom::new(df, s2),
                    ln_norm_a: -0.5 * (2.0 * std::f64::consts::PI * s2 / k).ln(),
                    prec_half: 0.5 * k / s2,
                    sigma: s2.sqrt(),
                    mu: vec![mu],
                    ln_w: vec![ln_w],
                    ln_w_range: 0.0,
                }),
            }
        }
        for g in groups.iter_mut() {
            let hi = g.ln_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = g.ln_w.iter().copied().fold(f64::INFINITY, f64::min);
            g.ln_w_range = hi - lo;
        }
        let floor = prior.atoms().iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
        Self { df, groups, floor }
    }

    pub fn eval(&self, z: f64, s2: f64, a: f64, nu: f64) -> Flagged {
        if z == 0.0 {
            return Flagged { p: 1.0, fallback: false };
        }
        let x = if s2 >= S2_FLOOR { s2 } else { self.floor };
        let ln_x = x.ln();
        let shape = 0.5 * self.df - 1.0;
        let zt = z.abs() / nu;
        let weights: Vec<f64> = self
            .groups
            .iter()
            .map(|g| {
                let lp = g.chisq.ln_density(x, ln_x, shape) + g.ln_norm_a;
                if lp == f64::NEG_INFINITY {
                    lp
                } else {
                    lp + g.ln_kernel_sum(a)
                }
            })
            .collect();
        // Groups this far below the largest weight change p by less than
        // e⁻⁶⁰ per group, so their tails are not evaluated.
        let top = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut num = LogAcc::new();
        let mut den = LogAcc::new();
        for (g, &lp) in self.groups.iter().zip(&weights) {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            den.push(lp);
            if lp >= top - 60.0 {
                num.push(lp + ln_two_sided_normal_p(zt / g.sigma));
            }
        }
        let d = den.value();
        if d.is_finite() {
            return Flagged { p: ratio(num.value(), d), fallback: false };
        }
        let nearest = self
            .groups
            .iter()
            .flat_map(|g| g.mu.iter().map(move |&mu| (g.sigma, mu)))
            .min_by(|p, q| {
                let dp = ((p.0 * p.0).ln() - ln_x).abs() + (a - p.1).abs();
                let dq = ((q.0 * q.0).ln() - ln_x).abs() + (a - q.1).abs();
                dp.total_cmp(&dq)
            })
            .map(|(sigma, _)| sigma)
            .unwrap_or(1.0);
        Flagged {
            p: two_sided_normal_p(zt / nearest),
            fallback: true,
        }
    }
}

/// Partially Bayes p-value under a discrete prior on (μ, σ²), conditioning
/// on (S², A).
pub fn p_joint(u: &UnitSummary, prior: &DiscretePrior2D, nu: f64, k: usize) -> f64 {
    JointMixtureP::new(prior, u.df as f64, k as f64).eval(u.z, u.s2, u.a, nu).p
}

/// The 1-D partially Bayes p-value under the prior of the unit's bin.
pub fn p_discrete_joint(u: &UnitSummary, priors: &BinnedPriorSet, nu: f64) -> Result<f64> {
    let prior = priors.prior_for(u.m)?;
    Ok(p_partially_bayes_1d(u, prior, nu, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit(z: f64, s2: f64, df: usize) -> UnitSummary {
        UnitSummary { z, s2, a: 0.0, m: 0.0, df }
    }

    #[test]
    fn method_names_roundtrip() {
        for m in MethodId::ALL {
            assert_eq!(m.name().parse::<MethodId>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("reg-npmle".parse::<MethodId>().is_ok());
        assert!("oracle".parse::<MethodId>().is_err());
    }

    #[test]
    fn ttest_hand_values() {
        assert_eq!(p_ttest(&unit(0.0, 1.0, 2), 1.0), 1.0);
        // t₂ CDF is 1/2 + t/(2√(2+t²)).
        let expected = 2.0 * (1.0 - (0.5 + 1.0 / (2.0 * 3f64.sqrt())));
        assert_relative_eq!(p_ttest(&unit(1.0, 1.0, 2), 1.0), expected, max_relative = 1e-12);
        assert!((p_ttest(&unit(1.0, 1.0, 2), 1.0) - 0.422650).abs() < 5e-7);
        assert_eq!(p_ttest(&unit(1.0, 0.0, 2), 1.0), 0.0);
        assert_eq!(p_ttest(&unit(0.0, 0.0, 2), 1.0), 1.0);
        assert!(p_ttest(&unit(1e200, 1.0, 2), 1.0) < 1e-300);
    }

    #[test]
    fn limma_parametric_hand_values() {
        let prior = InvChisqPrior::new(2.0, 1.0).unwrap();
        assert_eq!(p_limma_param(&unit(0.0, 1.0, 2), &prior, 1.0, 1.0), 1.0);
        // t₄: two-sided p = 1 − 1.5u + 0.5u³ with u = t/√(t² + 4).
        let u = 2.0 / 8f64.sqrt();
        let expected = 1.0 - 1.5 * u + 0.5 * u * u * u;
        let p = p_limma_param(&unit(2.0, 1.0, 2), &prior, 1.0, 1.0);
        assert_relative_eq!(p, expected, max_relative = 1e-12);
        assert!((p - 0.116117).abs() < 5e-7);
        let inf = InvChisqPrior::new(f64::INFINITY, 1.0).unwrap();
        assert_relative_eq!(
            p_limma_param(&unit(1.7, 30.0, 2), &inf, 1.0, 1.0),
            two_sided_normal_p(1.7),
            max_relative = 1e-15
        );
    }

    #[test]
    fn degenerate_prior_gives_gaussian() {
        let prior = DiscretePrior1D::dirac(1.0).unwrap();
        for &s2 in &[0.0, 0.1, 1.0, 50.0] {
            assert_relative_eq!(
                p_partially_bayes_1d(&unit(1.3, s2, 3), &prior, 0.5, 1.0),
                two_sided_normal_p(2.6),
                max_relative = 1e-13
            );
        }
    }

    #[test]
    fn two_atom_ratio_by_hand() {
        let prior = DiscretePrior1D::new(vec![1.0, 4.0], vec![0.5, 0.5]).unwrap();
        let e1 = (-1f64).exp();
        let e4 = (-0.25f64).exp();
        let num = 0.5 * two_sided_normal_p(2.0) * e1 + 0.5 * two_sided_normal_p(1.0) * 0.25 * e4;
        let den = 0.5 * e1 + 0.125 * e4;
        let p = p_partially_bayes_1d(&unit(2.0, 1.0, 2), &prior, 1.0, 1.0);
        assert_relative_eq!(p, num / den, max_relative = 1e-13);
        assert_eq!(p_partially_bayes_1d(&unit(0.0, 1.0, 2), &prior, 1.0, 1.0), 1.0);
    }

    #[test]
    fn trend_scales_the_unit() {
        // With ξ² = 4, (Z, S²) = (2, 4) behaves like (1, 1) at ξ² = 1.
        let prior = DiscretePrior1D::new(vec![0.5, 2.0], vec![0.3, 0.7]).unwrap();
        let a = p_partially_bayes_1d(&unit(2.0, 4.0, 4), &prior, 1.0, 4.0);
        let b = p_partially_bayes_1d(&unit(1.0, 1.0, 4), &prior, 1.0, 1.0);
        assert_relative_eq!(a, b, max_relative = 1e-13);
    }

    #[test]
    fn joint_single_atom() {
        let prior = DiscretePrior2D::new(vec![(3.0, 2.0)], vec![1.0]).unwrap();
        let u = UnitSummary { z: 1.5, s2: 0.7, a: 9.0, m: 9.0, df: 4 };
        assert_relative_eq!(p_joint(&u, &prior, 0.8, 6), two_sided_normal_p(1.5 / (0.8 * 2f64.sqrt())), max_relative = 1e-13);
    }

    #[test]
    fn joint_matches_direct_sum() {
        let atoms = vec![(1.0, 0.5), (1.0, 2.0), (2.0, 2.0), (2.5, 0.1)];
        let w = vec![0.1, 0.2, 0.3, 0.4];
        let prior = DiscretePrior2D::new(atoms.clone(), w.clone()).unwrap();
        let u = UnitSummary { z: -0.9, s2: 0.8, a: 1.7, m: 1.7, df: 3 };
        let (nu, k) = (0.6, 5.0);
        let mut num = 0.0;
        let mut den = 0.0;
        for ((mu, s2), w) in atoms.iter().zip(&w) {
            let f = crate::priorfit::joint_kernel(u.s2, u.a, *mu, *s2, 3.0, k);
            num += w * f * two_sided_normal_p(u.z / (nu * s2.sqrt()));
            den += w * f;
        }
        assert_relative_eq!(p_joint(&u, &prior, nu, 5), num / den, max_relative = 1e-12);
    }

    #[test]
    fn map_gaussian_quantile() {
        let trend = TrendFit::constant(0.0);
        let p = p_map(&unit(1.959963984540054, 1.0, 2), &trend, 1.0);
        assert!((p - 0.05).abs() < 1e-6);
        let wide = TrendFit::constant(4f64.ln());
        assert!(p_map(&unit(1.96, 1.0, 2), &wide, 1.0) > p);
        assert_relative_eq!(p_map(&unit(3.92, 1.0, 2), &wide, 1.0), p_map(&unit(1.96, 1.0, 2), &trend, 1.0), max_relative = 1e-14);
    }

    #[test]
    fn discrete_joint_uses_bin_prior() {
        let s2: Vec<f64> = (0..40).map(|i| if i < 20 { 0.2 + 0.01 * i as f64 } else { 4.0 + 0.1 * i as f64 }).collect();
        let m: Vec<f64> = (0..40).map(|i| if i < 20 { 1.0 } else { 2.0 }).collect();
        let set = crate::priorfit::fit_discrete_priors(
            &s2,
            &m,
            4.0,
            &crate::priorfit::BinRule::ExactUpTo { exact: 2, pooled: 0 },
            &Default::default(),
        )
        .unwrap();
        let small = UnitSummary { z: 2.0, s2: 1.0, a: 0.0, m: 1.0, df: 4 };
        let large = UnitSummary { m: 2.0, ..small };
        assert!(p_discrete_joint(&small, &set, 1.0).unwrap() < p_discrete_joint(&large, &set, 1.0).unwrap());
    }
}
