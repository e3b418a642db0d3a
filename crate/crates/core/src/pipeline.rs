//! Runs the requested methods over one set of unit summaries, fitting each
//! trend and prior at most once.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linmodel::{
    check_orthogonality, fit_units, intensity_contrast, manorm_contrast, Contrast, Design, SideSpec, Summaries,
    ORTHOGONALITY_TOL,
};
use crate::multiplicity::bh_adjust;
use crate::priorfit::{
    fit_discrete_priors, fit_invchisq_trended, fit_invchisq_untrended, fit_joint_npmle, fit_reg_npmle,
    fit_untrended_npmle, BinRule, BinnedPriorSet, DiscretePrior1D, InvChisqPrior, JointFit, PriorFitOptions,
};
use crate::pvalues::{
    group_stats, p_limma_param, p_map, p_ttest, GroupStats, JointMixtureP, Manorm2Fit, MethodId, PValueVector, ScaleMixtureP,
};
use crate::special::digamma;
use crate::trend::{fit_trend, TrendFit};

/// What the side value M of each unit is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SideKind {
    AverageIntensity,
    External,
    ManormTilde,
}

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub prior: PriorFitOptions,
    pub bin_rule: BinRule,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            prior: PriorFitOptions::default(),
            bin_rule: BinRule::ExactUpTo { exact: 0, pooled: 10 },
        }
    }
}

/// Per-group statistics for the MAnorm2 baseline.
#[derive(Debug, Clone)]
pub struct GroupData {
    pub stats: Vec<GroupStats>,
    pub k_a: usize,
    pub k_b: usize,
}

type Cell<T> = OnceLock<Result<T>>;

fn cached<'a, T>(cell: &'a Cell<T>, f: impl FnOnce() -> Result<T>) -> Result<&'a T> {
    cell.get_or_init(f).as_ref().map_err(Error::clone)
}

/// Lazily fitted models over one set of summaries.
pub struct Analysis<'a> {
    units: &'a Summaries,
    side: SideKind,
    groups: Option<&'a GroupData>,
    opts: AnalysisOptions,
    trend: Cell<TrendFit>,
    untrended_invchisq: Cell<InvChisqPrior>,
    trended_invchisq: Cell<InvChisqPrior>,
    untrended_npmle: Cell<DiscretePrior1D>,
    reg_npmle: Cell<DiscretePrior1D>,
    joint: Cell<JointFit>,
    discrete: Cell<BinnedPriorSet>,
    manorm2: Cell<Manorm2Fit>,
}

impl<'a> Analysis<'a> {
    pub fn new(units: &'a Summaries, side: SideKind, groups: Option<&'a GroupData>, opts: AnalysisOptions) -> Self {
        Self {
            units,
            side,
            groups,
            opts,
            trend: OnceLock::new(),
            untrended_invchisq: OnceLock::new(),
            trended_invchisq: OnceLock::new(),
            untrended_npmle: OnceLock::new(),
            reg_npmle: OnceLock::new(),
            joint: OnceLock::new(),
            discrete: OnceLock::new(),
            manorm2: OnceLock::new(),
        }
    }

    pub fn units(&self) -> &Summaries {
        self.units
    }

    fn s2(&self) -> Vec<f64> {
        self.units.units.iter().map(|u| u.s2).collect()
    }

    fn m(&self) -> Vec<f64> {
        self.units.units.iter().map(|u| u.m).collect()
    }

    fn df(&self) -> f64 {
        self.units.df() as f64
    }

    /// Trend of log S² on M over units with S² > 0.
    pub fn trend(&self) -> Result<&TrendFit> {
        cached(&self.trend, || {
            let points: Vec<(f64, f64)> = self
                .units
                .units
                .iter()
                .filter(|u| u.s2 > 0.0)
                .map(|u| (u.m, u.s2.ln()))
                .collect();
            if points.len() < self.units.len() {
                log::warn!("trend fit: {} units with S² = 0 left out", self.units.len() - points.len());
            }
            fit_trend(&points)
        })
    }

    pub fn untrended_invchisq(&self) -> Result<&InvChisqPrior> {
        cached(&self.untrended_invchisq, || fit_invchisq_untrended(&self.s2(), self.df()))
    }

    pub fn trended_invchisq(&self) -> Result<&InvChisqPrior> {
        let trend = self.trend()?;
        cached(&self.trended_invchisq, || {
            fit_invchisq_trended(&self.s2(), &self.m(), self.df(), trend, trend.df())
        })
    }

    pub fn untrended_npmle(&self) -> Result<&DiscretePrior1D> {
        cached(&self.untrended_npmle, || fit_untrended_npmle(self.units, &self.opts.prior))
    }

    pub fn reg_npmle(&self) -> Result<&DiscretePrior1D> {
        let trend = self.trend()?;
        cached(&self.reg_npmle, || fit_reg_npmle(self.units, trend, &self.opts.prior))
    }

    pub fn joint(&self) -> Result<&JointFit> {
        if self.side != SideKind::AverageIntensity {
            return Err(Error::NotApplicable {
                method: MethodId::JointNpmle.to_string(),
                reason: "method requires average intensity as the side information".into(),
            });
        }
        let trend = self.trend()?;
        cached(&self.joint, || fit_joint_npmle(self.units, trend, &self.opts.prior))
    }

    pub fn discrete(&self) -> Result<&BinnedPriorSet> {
        cached(&self.discrete, || {
            fit_discrete_priors(&self.s2(), &self.m(), self.df(), &self.opts.bin_rule, &self.opts.prior)
        })
    }

    pub fn manorm2(&self) -> Result<&Manorm2Fit> {
        let groups = self.groups.ok_or_else(|| Error::NotApplicable {
            method: MethodId::Manorm2.to_string(),
            reason: "method needs a two-group design".into(),
        })?;
        cached(&self.manorm2, || Manorm2Fit::fit(&groups.stats, groups.k_a, groups.k_b))
    }

    /// P-values of one method in unit order.
    pub fn p_values(&self, method: MethodId) -> Result<PValueVector> {
        let units = &self.units.units;
        let nu = self.units.nu;
        let df = self.df();
        let p: Vec<f64> = match method {
            MethodId::TTest => units.par_iter().map(|u| p_ttest(u, nu)).collect(),
            MethodId::UntrendedInvChisq => {
                let prior = self.untrended_invchisq()?;
                units.par_iter().map(|u| p_limma_param(u, prior, nu, 1.0)).collect()
            }
            MethodId::RegInvChisq => {
                let prior = self.trended_invchisq()?;
                let trend = self.trend()?;
                units.par_iter().map(|u| p_limma_param(u, prior, nu, trend.xi2(u.m))).collect()
            }
            MethodId::UntrendedNpmle => {
                let eval = ScaleMixtureP::new(self.untrended_npmle()?, df);
                flagged(method, units.par_iter().map(|u| eval.eval(u.z, u.s2, nu, 1.0)).collect())
            }
            MethodId::RegNpmle => {
                let eval = ScaleMixtureP::new(self.reg_npmle()?, df);
                let trend = self.trend()?;
                flagged(method, units.par_iter().map(|u| eval.eval(u.z, u.s2, nu, trend.xi2(u.m))).collect())
            }
            MethodId::JointNpmle => {
                let eval = JointMixtureP::new(&self.joint()?.prior, df, self.units.k as f64);
                flagged(method, units.par_iter().map(|u| eval.eval(u.z, u.s2, u.a, nu)).collect())
            }
            MethodId::DiscreteJoint => {
                let set = self.discrete()?;
                let evals: Vec<ScaleMixtureP> = set.priors().iter().map(|p| ScaleMixtureP::new(p, df)).collect();
                let bins = set.assignment();
                flagged(
                    method,
                    units.par_iter().zip(bins).map(|(u, &b)| evals[b].eval(u.z, u.s2, nu, 1.0)).collect(),
                )
            }
            MethodId::Map => {
                // E log S² = log σ² + ψ(d/2) − log(d/2); undo the offset so that
                // the plug-in estimates σ² itself, as limma's trend does.
                let half = 0.5 * df;
                let trend = self.trend()?.shifted(half.ln() - digamma(half));
                units.par_iter().map(|u| p_map(u, &trend, nu)).collect()
            }
            MethodId::Manorm2 => {
                let fit = self.manorm2()?;
                let groups = self.groups.expect("checked by manorm2()");
                groups.stats.par_iter().map(|s| fit.p_value(s)).collect()
            }
        };
        PValueVector::new(method, p)
    }
}

impl SideKind {
    pub fn of(side: &SideSpec) -> Self {
        match side {
            SideSpec::AverageIntensity => SideKind::AverageIntensity,
            SideSpec::External(_) => SideKind::External,
            SideSpec::ManormTilde => SideKind::ManormTilde,
        }
    }
}

/// Why `method` cannot run with this design and side, if it cannot.
pub fn not_applicable(method: MethodId, design: &Design, side: &SideSpec) -> Option<Error> {
    let reason = match method {
        MethodId::JointNpmle if !matches!(side, SideSpec::AverageIntensity) => {
            "method requires average intensity as the side information"
        }
        MethodId::Manorm2 => match design.group_sizes() {
            None => "method needs a two-group design",
            Some((a, b)) if a < 2 || b < 2 => "method needs at least two samples per group",
            _ => return None,
        },
        _ => return None,
    };
    Some(Error::NotApplicable {
        method: method.to_string(),
        reason: reason.into(),
    })
}

/// Every method that can run with this design and side, in canonical order.
pub fn applicable_methods(design: &Design, side: &SideSpec) -> Vec<MethodId> {
    MethodId::ALL
        .into_iter()
        .filter(|&m| not_applicable(m, design, side).is_none())
        .collect()
}

/// Whether `method` relies on the side value being independent of Z.
pub fn needs_orthogonality(method: MethodId) -> bool {
    method.is_trended() || method == MethodId::DiscreteJoint
}

/// Checks c_θᵀ(XᵀX)⁻¹c_side = 0 for sides that are linear in the data.
/// External side values have nothing to check and return `None`.
pub fn side_orthogonality(
    design: &Design,
    theta: &Contrast,
    side: &SideSpec,
) -> Result<Option<crate::linmodel::OrthogonalityReport>> {
    let side_contrast = match side {
        SideSpec::AverageIntensity => intensity_contrast(design),
        SideSpec::ManormTilde => manorm_contrast(design)?,
        SideSpec::External(_) => return Ok(None),
    };
    check_orthogonality(design, theta, &side_contrast, ORTHOGONALITY_TOL).map(Some)
}

/// P-values and BH-adjusted q-values of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: MethodId,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Fits the row-major n × K matrix `y` and runs `methods` in canonical
/// order. Fails up front if a method is not applicable or, unless
/// `allow_nonorthogonal`, if a side-dependent method is requested with a
/// side value that is correlated with Z.
pub fn analyze_matrix(
    y: &[f64],
    design: &Design,
    theta: &Contrast,
    side: &SideSpec,
    methods: &[MethodId],
    opts: &AnalysisOptions,
    allow_nonorthogonal: bool,
) -> Result<Vec<MethodResult>> {
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    if let Some(e) = methods.iter().find_map(|&m| not_applicable(m, design, side)) {
        return Err(e);
    }
    if methods.iter().any(|&m| needs_orthogonality(m)) {
        if let Some(report) = side_orthogonality(design, theta, side)? {
            if !report.ok || !report.ones_in_colspace {
                let msg = format!(
                    "orthogonality check failed: c_theta' (X'X)^-1 c_side = {} (ones in column space: {})",
                    report.value, report.ones_in_colspace
                );
                if !allow_nonorthogonal {
                    return Err(Error::Design(msg));
                }
                log::warn!("{msg}; continuing as requested");
            }
        }
    }
    let units = fit_units(y, design, theta, side)?;
    let groups = match design.group_sizes() {
        Some((a, b)) if a >= 2 && b >= 2 && methods.contains(&MethodId::Manorm2) => {
            let (stats, k_a, k_b) = group_stats(y, design)?;
            Some(GroupData { stats, k_a, k_b })
        }
        _ => None,
    };
    let analysis = Analysis::new(&units, SideKind::of(side), groups.as_ref(), opts.clone());
    methods
        .into_iter()
        .map(|method| {
            let p = analysis.p_values(method)?.p;
            let q = bh_adjust(&p)?;
            Ok(MethodResult { method, p, q })
        })
        .collect()
}

fn flagged(method: MethodId, values: Vec<crate::pvalues::Flagged>) -> Vec<f64> {
    let count = values.iter().filter(|f| f.fallback).count();
    if count > 0 {
        log::warn!("{method}: marginal density underflowed for {count} units; used the nearest support point");
    }
    values.into_iter().map(|f| f.p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::UnitSummary;

    fn summaries() -> Summaries {
        let units = (0..200)
            .map(|i| {
                let x = i as f64;
                UnitSummary {
                    z: (x * 0.37).sin() * 3.0,
                    s2: 0.5 + (x * 0.91).cos().abs() * 2.0,
                    a: 5.0 + x * 0.01,
                    m: 5.0 + x * 0.01,
                    df: 4,
                }
            })
            .collect();
        Summaries { units, nu: 1.0, k: 6, p: 2 }
    }

    #[test]
    fn every_method_gives_valid_p_values() {
        let s = summaries();
        let analysis = Analysis::new(&s, SideKind::AverageIntensity, None, AnalysisOptions::default());
        for m in MethodId::ALL {
            if m == MethodId::Manorm2 {
                assert!(matches!(analysis.p_values(m), Err(Error::NotApplicable { .. })));
                continue;
            }
            let p = analysis.p_values(m).unwrap();
            assert_eq!(p.p.len(), 200);
        }
    }

    #[test]
    fn joint_needs_average_intensity() {
        let s = summaries();
        let analysis = Analysis::new(&s, SideKind::External, None, AnalysisOptions::default());
        assert!(matches!(analysis.p_values(MethodId::JointNpmle), Err(Error::NotApplicable { .. })));
    }
}
