//! Separate variance priors per stratum of a discrete side variable.

use super::kernel::DiscretePrior1D;
use super::{fit_npmle_1d, PriorFitOptions};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum BinRule {
    /// One bin per integer value 1..=exact, then `pooled` near-equal-count
    /// bins over the values above `exact`.
    ExactUpTo { exact: usize, pooled: usize },
    /// Bins (−∞, e₀), [e₀, e₁), …, [e_last, ∞).
    Edges(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct BinnedPriorSet {
    /// Ascending cut points; bin b holds cuts[b−1] ≤ m < cuts[b].
    cuts: Vec<f64>,
    priors: Vec<DiscretePrior1D>,
    assignment: Vec<usize>,
}

impl BinnedPriorSet {
    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    pub fn priors(&self) -> &[DiscretePrior1D] {
        &self.priors
    }

    /// Bin of each fitted unit.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn bin_of(&self, m: f64) -> Result<usize> {
        if m.is_nan() {
            return Err(Error::Binning("side value is NaN".into()));
        }
        Ok(bin_index(&self.cuts, m))
    }

    pub fn prior_for(&self, m: f64) -> Result<&DiscretePrior1D> {
        Ok(&self.priors[self.bin_of(m)?])
    }
}

fn bin_index(cuts: &[f64], m: f64) -> usize {
    cuts.partition_point(|&c| c <= m)
}

fn cuts_for(rule: &BinRule, m: &[f64]) -> Result<Vec<f64>> {
    match rule {
        BinRule::Edges(edges) => {
            if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
                return Err(Error::Binning("bin edges must be finite and strictly increasing".into()));
            }
            Ok(edges.clone())
        }
        BinRule::ExactUpTo { exact, pooled } => {
            let mut cuts: Vec<f64> = (1..=*exact).map(|v| v as f64 + 0.5).collect();
            let threshold = if *exact == 0 { f64::NEG_INFINITY } else { *exact as f64 + 0.5 };
            let mut rest: Vec<f64> = m.iter().copied().filter(|&v| v >= threshold).collect();
            rest.sort_by(f64::total_cmp);
            if *pooled > 1 && !rest.is_empty() {
                let r = rest.len();
                let mut pooled_cuts = Vec::new();
                for g in 1..*pooled {
                    let t = g * r / pooled;
                    if t == 0 || t >= r {
                        continue;
                    }
                    let cut = 0.5 * (rest[t - 1] + rest[t]);
                    if rest[t - 1] < rest[t] && pooled_cuts.last().is_none_or(|&c| c < cut) {
                        pooled_cuts.push(cut);
                    }
                }
                if pooled_cuts.len() + 1 < *pooled {
                    log::warn!(
                        "ties in the side values left {} pooled bins instead of {pooled}",
                        pooled_cuts.len() + 1
                    );
                }
                cuts.extend(pooled_cuts);
            }
            if *exact > 0 && *pooled == 0 {
                // Values above `exact` share the last exact bin's upper neighbour.
                cuts.pop();
            }
            Ok(cuts)
        }
    }
}

/// Fits an untrended grid NPMLE to the variances within each bin of `m`.
pub fn fit_discrete_priors(s2: &[f64], m: &[f64], df: f64, rule: &BinRule, opts: &PriorFitOptions) -> Result<BinnedPriorSet> {
    if s2.len() != m.len() {
        return Err(Error::Input("side values and variances differ in length".into()));
    }
    if m.iter().any(|v| v.is_nan()) {
        return Err(Error::Binning("side values contain NaN".into()));
    }
    let cuts = cuts_for(rule, m)?;
    let bins = cuts.len() + 1;
    let assignment: Vec<usize> = m.iter().map(|&v| bin_index(&cuts, v)).collect();
    let mut members = vec![Vec::new(); bins];
    for (i, &b) in assignment.iter().enumerate() {
        members[b].push(s2[i]);
    }
    let empty: Vec<String> = (0..bins)
        .filter(|&b| members[b].iter().all(|v| !(*v > 0.0)))
        .map(|b| bin_label(&cuts, b))
        .collect();
    if !empty.is_empty() {
        return Err(Error::Binning(format!("bins without positive variances: {}", empty.join(", "))));
    }
    let priors = members
        .iter()
        .map(|vals| fit_npmle_1d(vals, df, opts).map(|(p, _)| p))
        .collect::<Result<Vec<_>>>()?;
    Ok(BinnedPriorSet { cuts, priors, assignment })
}

fn bin_label(cuts: &[f64], b: usize) -> String {
    let lo = if b == 0 { "-inf".to_string() } else { cuts[b - 1].to_string() };
    let hi = if b == cuts.len() { "inf".to_string() } else { cuts[b].to_string() };
    format!("[{lo}, {hi})")
}
