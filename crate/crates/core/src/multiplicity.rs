//! Benjamini–Hochberg step-up procedure, adjusted p-values, and error
//! counts against known truth.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BhResult {
    pub alpha: f64,
    /// Number of rejections ĵ.
    pub j_hat: usize,
    /// ĵα/n.
    pub threshold: f64,
    pub rejected: Vec<bool>,
}

fn check(p: &[f64]) -> Result<()> {
    if let Some(i) = p.iter().position(|v| v.is_nan()) {
        return Err(Error::Input(format!("p-value at unit {i} is NaN")));
    }
    if let Some(i) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input(format!("p-value {} at unit {i} is outside [0, 1]", p[i])));
    }
    Ok(())
}

/// Indices sorted by p-value, ties broken by index.
fn order(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&i, &j| p[i].total_cmp(&p[j]).then(i.cmp(&j)));
    idx
}

/// Rejects every unit with p ≤ P_(ĵ), ĵ the largest j with P_(j) ≤ jα/n.
pub fn bh_reject(p: &[f64], alpha: f64) -> Result<BhResult> {
    check(p)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Input(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = p.len();
    let idx = order(p);
    let j_hat = (1..=n)
        .rev()
        .find(|&j| p[idx[j - 1]] <= j as f64 * alpha / n as f64)
        .unwrap_or(0);
    let mut rejected = vec![false; n];
    for &i in &idx[..j_hat] {
        rejected[i] = true;
    }
    let threshold = if n == 0 { 0.0 } else { j_hat as f64 * alpha / n as f64 };
    Ok(BhResult {
        alpha,
        j_hat,
        threshold,
        rejected,
    })
}

/// BH-adjusted p-values q_i = min_{j ≥ rank(i)} n P_(j)/j, capped at 1.
pub fn bh_adjust(p: &[f64]) -> Result<Vec<f64>> {
    check(p)?;
    let n = p.len();
    let idx = order(p);
    let mut q = vec![0.0; n];
    let mut running = 1.0f64;
    for r in (0..n).rev() {
        let i = idx[r];
        // p·(n/r) rather than n·p/r so that q ≥ p holds after rounding.
        running = running.min(p[i] * (n as f64 / (r + 1) as f64));
        q[i] = running;
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMetrics {
    /// False discoveries.
    pub v: usize,
    /// Discoveries.
    pub r: usize,
    /// V/(R ∨ 1).
    pub fdp: f64,
    /// True discoveries over the number of non-null units; 0 without any.
    pub power: f64,
}

pub fn error_metrics(result: &BhResult, null_mask: &[bool]) -> Result<ErrorMetrics> {
    if null_mask.len() != result.rejected.len() {
        return Err(Error::Input("null mask and rejections differ in length".into()));
    }
    let mut v = 0;
    let mut r = 0;
    let mut alternatives = 0;
    for (&rej, &null) in result.rejected.iter().zip(null_mask) {
        r += usize::from(rej);
        v += usize::from(rej && null);
        alternatives += usize::from(!null);
    }
    let fdp = v as f64 / r.max(1) as f64;
    let power = if alternatives == 0 {
        0.0
    } else {
        (r - v) as f64 / alternatives as f64
    };
    Ok(ErrorMetrics { v, r, fdp, power })
}
