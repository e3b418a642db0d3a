//! Mean–variance trend: least-squares natural cubic spline of log S² on M.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::special::quantile_sorted;

/// Spline degrees of freedom for `n` points with `distinct_m` distinct side
/// values.
pub fn select_spline_df(n: usize, distinct_m: usize) -> usize {
    let by_n = 1 + usize::from(n >= 3) + usize::from(n >= 6) + usize::from(n >= 30);
    by_n.min(distinct_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrendKind {
    Constant,
    Spline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendFit {
    kind: TrendKind,
    constant_value: f64,
    /// Boundary and interior knots in M units, ascending.
    knots: Vec<f64>,
    coefficients: Vec<f64>,
    df: usize,
}

impl TrendFit {
    pub fn constant(value: f64) -> Self {
        Self {
            kind: TrendKind::Constant,
            constant_value: value,
            knots: Vec::new(),
            coefficients: Vec::new(),
            df: 1,
        }
    }

    pub fn kind(&self) -> TrendKind {
        self.kind
    }

    pub fn constant_value(&self) -> Option<f64> {
        (self.kind == TrendKind::Constant).then_some(self.constant_value)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Number of fitted parameters (1 for a constant).
    pub fn df(&self) -> usize {
        self.df
    }

    /// m̂(m).
    pub fn m_hat(&self, m: f64) -> f64 {
        match self.kind {
            TrendKind::Constant => self.constant_value,
            TrendKind::Spline => {
                let basis = NaturalBasis::new(&self.knots);
                basis
                    .row(m)
                    .iter()
                    .zip(&self.coefficients)
                    .map(|(b, c)| b * c)
                    .sum()
            }
        }
    }

    /// ξ̂²(m) = exp(m̂(m)).
    pub fn xi2(&self, m: f64) -> f64 {
        self.m_hat(m).exp()
    }

    /// (m̂(m), ξ̂²(m)).
    pub fn eval(&self, m: f64) -> (f64, f64) {
        let v = self.m_hat(m);
        (v, v.exp())
    }

    /// The same curve moved up by `c` on the log scale.
    pub fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        match out.kind {
            TrendKind::Constant => out.constant_value += c,
            // The first basis column is the constant 1.
            TrendKind::Spline => out.coefficients[0] += c,
        }
        out
    }
}

/// Natural cubic spline basis {1, x, d_k − d_{K−1}} on knots rescaled to
/// [0, 1]; linear below the first and above the last knot.
struct NaturalBasis {
    lo: f64,
    scale: f64,
    knots: Vec<f64>,
}

impl NaturalBasis {
    fn new(knots: &[f64]) -> Self {
        let lo = knots[0];
        let scale = knots[knots.len() - 1] - lo;
        Self {
            lo,
            scale,
            knots: knots.iter().map(|k| (k - lo) / scale).collect(),
        }
    }

    fn dim(&self) -> usize {
        self.knots.len()
    }

    fn row(&self, m: f64) -> Vec<f64> {
        let x = (m - self.lo) / self.scale;
        let kk = self.knots.len();
        let last = self.knots[kk - 1];
        let d = |k: usize| {
            let xi = self.knots[k];
            (cube_plus(x - xi) - cube_plus(x - last)) / (last - xi)
        };
        let mut row = Vec::with_capacity(kk);
        row.push(1.0);
        row.push(x);
        if kk > 2 {
            let d_last = d(kk - 2);
            for k in 0..kk - 2 {
                row.push(d(k) - d_last);
            }
        }
        row
    }
}

fn cube_plus(v: f64) -> f64 {
    if v > 0.0 {
        v * v * v
    } else {
        0.0
    }
}

/// Fits the trend of `log_s2` on `m` from `(m, log_s2)` pairs.
///
/// With fewer than two spline degrees of freedom the fit is the constant
/// mean of `log_s2`. Knots that coincide because of ties in `m` are merged,
/// lowering the degrees of freedom.
pub fn fit_trend(points: &[(f64, f64)]) -> Result<TrendFit> {
    if points.is_empty() {
        return Err(Error::Input("trend fit needs at least one point".into()));
    }
    if points.iter().any(|(m, v)| !m.is_finite() || !v.is_finite()) {
        return Err(Error::Input("trend fit points must be finite".into()));
    }
    let n = points.len();
    let mean = points.iter().map(|p| p.1).sum::<f64>() / n as f64;

    let mut sorted_m: Vec<f64> = points.iter().map(|p| p.0).collect();
    sorted_m.sort_by(f64::total_cmp);
    let mut distinct = sorted_m.clone();
    distinct.dedup();
    let df = select_spline_df(n, distinct.len());
    if df < 2 {
        if distinct.len() == 1 && n >= 3 {
            log::warn!("all side values are identical; using a constant trend");
        }
        return Ok(TrendFit::constant(mean));
    }

    let mut knots = Vec::with_capacity(df);
    for k in 0..df {
        knots.push(quantile_sorted(&sorted_m, k as f64 / (df - 1) as f64));
    }
    knots.dedup();
    if knots.len() < df {
        log::warn!("tied side values merged spline knots; trend df reduced from {df} to {}", knots.len());
    }
    if knots.len() < 2 {
        return Ok(TrendFit::constant(mean));
    }

    let basis = NaturalBasis::new(&knots);
    let p = basis.dim();
    let mut x = DMatrix::zeros(n, p);
    for (i, (m, _)) in points.iter().enumerate() {
        for (j, v) in basis.row(*m).into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    let y = DVector::from_iterator(n, points.iter().map(|p| p.1));
    let svd = x.svd(true, true);
    let beta = svd
        .solve(&y, 1e-12 * svd.singular_values.max())
        .map_err(|e| Error::Numerical(format!("trend least squares failed: {e}")))?;
    Ok(TrendFit {
        kind: TrendKind::Spline,
        constant_value: mean,
        knots,
        coefficients: beta.iter().copied().collect(),
        df: p,
    })
}
