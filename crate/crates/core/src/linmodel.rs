//! Per-unit ordinary least squares summaries and the orthogonality check.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Relative tolerance on the diagonal of R below which the design is
/// treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Default relative tolerance for [`check_orthogonality`].
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Design {
    x: DMatrix<f64>,
    gram_inverse: DMatrix<f64>,
    /// Thin Q factor (K × p) of X, row-major.
    q: Vec<f64>,
    /// Group index of each sample when X is a two-group indicator encoding.
    groups: Option<Vec<usize>>,
}

impl Design {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        let (k, p) = x.shape();
        if p == 0 {
            return Err(Error::Design("design has no columns".into()));
        }
        if k <= p {
            return Err(Error::Design(format!("need more samples than covariates, got K = {k}, p = {p}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Design("design contains non-finite entries".into()));
        }
        let qr = x.clone().qr();
        let r = qr.r();
        let max_diag = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
        if let Some(j) = (0..p).find(|&j| r[(j, j)].abs() <= RANK_TOL * max_diag) {
            return Err(Error::Design(format!("design is rank deficient (column {j} is dependent on earlier columns)")));
        }
        let r_inv = r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Design("design is rank deficient".into()))?;
        let gram_inverse = &r_inv * r_inv.transpose();
        let q_mat = qr.q();
        let mut q = Vec::with_capacity(k * p);
        for i in 0..k {
            for j in 0..p {
                q.push(q_mat[(i, j)]);
            }
        }
        let groups = detect_two_groups(&x);
        Ok(Self { x, gram_inverse, q, groups })
    }

    /// Cell-means encoding of two groups: the first `k_a` rows indicate
    /// group A (column 0), the next `k_b` rows group B (column 1).
    pub fn two_group(k_a: usize, k_b: usize) -> Result<Self> {
        let k = k_a + k_b;
        let x = DMatrix::from_fn(k, 2, |i, j| if (i < k_a) == (j == 0) { 1.0 } else { 0.0 });
        Self::new(x)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn gram_inverse(&self) -> &DMatrix<f64> {
        &self.gram_inverse
    }

    /// Number of samples K.
    pub fn k(&self) -> usize {
        self.x.nrows()
    }

    /// Number of covariates p.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Residual degrees of freedom K − p.
    pub fn df(&self) -> usize {
        self.k() - self.p()
    }

    /// For a two-group indicator encoding, the group index (0 or 1) of each
    /// sample.
    pub fn groups(&self) -> Option<&[usize]> {
        self.groups.as_deref()
    }

    /// Group sizes (K_A, K_B) for a two-group indicator encoding.
    pub fn group_sizes(&self) -> Option<(usize, usize)> {
        self.groups.as_ref().map(|g| {
            let kb = g.iter().filter(|&&v| v == 1).count();
            (g.len() - kb, kb)
        })
    }

    /// Euclidean norm of the part of `v` orthogonal to the column space.
    pub fn residual_norm(&self, v: &[f64]) -> f64 {
        let mut r = v.to_vec();
        project_out(&self.q, self.p(), &mut r);
        r.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Whether the all-ones vector lies in the column space, to relative
    /// tolerance `tol`.
    pub fn ones_in_colspace(&self, tol: f64) -> bool {
        let k = self.k();
        self.residual_norm(&vec![1.0; k]) <= tol * (k as f64).sqrt()
    }
}

fn detect_two_groups(x: &DMatrix<f64>) -> Option<Vec<usize>> {
    if x.ncols() != 2 {
        return None;
    }
    x.row_iter()
        .map(|row| match (row[0], row[1]) {
            (a, b) if a == 1.0 && b == 0.0 => Some(0),
            (a, b) if a == 0.0 && b == 1.0 => Some(1),
            _ => None,
        })
        .collect()
}

/// r ← (I − QQᵀ) r, with Q row-major K × p.
fn project_out(q: &[f64], p: usize, r: &mut [f64]) {
    let mut coef = [0.0f64; 16];
    let mut heap;
    let coef: &mut [f64] = if p <= coef.len() {
        &mut coef[..p]
    } else {
        heap = vec![0.0; p];
        &mut heap
    };
    for (i, &ri) in r.iter().enumerate() {
        for (j, c) in coef.iter_mut().enumerate() {
            *c += q[i * p + j] * ri;
        }
    }
    for (i, ri) in r.iter_mut().enumerate() {
        let fitted: f64 = coef.iter().enumerate().map(|(j, c)| q[i * p + j] * c).sum();
        *ri -= fitted;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contrast {
    c: Vec<f64>,
    nu: f64,
}

impl Contrast {
    pub fn new(c: Vec<f64>, design: &Design) -> Result<Self> {
        if c.len() != design.p() {
            return Err(Error::Design(format!(
                "contrast has {} weights but the design has {} columns",
                c.len(),
                design.p()
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Design("contrast contains non-finite weights".into()));
        }
        let cv = DVector::from_column_slice(&c);
        let nu2 = (cv.transpose() * design.gram_inverse() * &cv)[(0, 0)];
        if !(nu2 > 0.0) {
            return Err(Error::Design("contrast has zero variance (all weights zero?)".into()));
        }
        Ok(Self { c, nu: nu2.sqrt() })
    }

    pub fn weights(&self) -> &[f64] {
        &self.c
    }

    /// ν = sqrt(cᵀ(XᵀX)⁻¹c).
    pub fn nu(&self) -> f64 {
        self.nu
    }

    fn norm(&self) -> f64 {
        self.c.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// The contrast whose estimate is the average intensity: the mean design row.
pub fn intensity_contrast(design: &Design) -> Contrast {
    let k = design.k() as f64;
    let c = design.x().column_iter().map(|col| col.sum() / k).collect();
    Contrast::new(c, design).expect("mean design row of a full-rank design has positive variance")
}

/// MAnorm2's equal-weight average of the two group means; two-group
/// designs only.
pub fn manorm_contrast(design: &Design) -> Result<Contrast> {
    if design.groups().is_none() {
        return Err(Error::Design(
            "the MAnorm2 side value is only defined for a two-group indicator design".into(),
        ));
    }
    Contrast::new(vec![0.5, 0.5], design)
}

/// Side information to attach to a unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SideMode {
    AverageIntensity,
    External(f64),
    ManormTilde,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitSummary {
    /// Contrast estimate Z.
    pub z: f64,
    /// Residual variance S².
    pub s2: f64,
    /// Average intensity A.
    pub a: f64,
    /// Side information M.
    pub m: f64,
    /// Residual degrees of freedom K − p.
    pub df: usize,
}

/// Precomputed projections for fitting many units against one design.
#[derive(Debug, Clone)]
pub struct UnitFitter {
    k: usize,
    p: usize,
    q: Vec<f64>,
    w_theta: Vec<f64>,
    w_tilde: Option<Vec<f64>>,
    nu: f64,
}

impl UnitFitter {
    pub fn new(design: &Design, theta: &Contrast) -> Result<Self> {
        if theta.weights().len() != design.p() {
            return Err(Error::Design("contrast does not conform to the design".into()));
        }
        let w_theta = estimate_weights(design, theta);
        let w_tilde = manorm_contrast(design).ok().map(|c| estimate_weights(design, &c));
        Ok(Self {
            k: design.k(),
            p: design.p(),
            q: design.q.clone(),
            w_theta,
            w_tilde,
            nu: theta.nu(),
        })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn df(&self) -> usize {
        self.k - self.p
    }

    pub fn fit(&self, y: &[f64], side: SideMode) -> Result<UnitSummary> {
        if y.len() != self.k {
            return Err(Error::Input(format!("response has {} values, design has {} samples", y.len(), self.k)));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("response contains non-finite values".into()));
        }
        let z = dot(&self.w_theta, y);
        let a = y.iter().sum::<f64>() / self.k as f64;
        let mut r = y.to_vec();
        project_out(&self.q, self.p, &mut r);
        let rss: f64 = r.iter().map(|v| v * v).sum();
        let y_norm2: f64 = y.iter().map(|v| v * v).sum();
        // Residuals at roundoff level are a saturated fit.
        let floor = 32.0 * self.k as f64 * f64::EPSILON;
        let s2 = if rss <= floor * floor * y_norm2 {
            0.0
        } else {
            rss / self.df() as f64
        };
        let m = match side {
            SideMode::AverageIntensity => a,
            SideMode::External(m) => m,
            SideMode::ManormTilde => match &self.w_tilde {
                Some(w) => dot(w, y),
                None => {
                    return Err(Error::Design(
                        "the MAnorm2 side value is only defined for a two-group indicator design".into(),
                    ))
                }
            },
        };
        Ok(UnitSummary { z, s2, a, m, df: self.df() })
    }
}

/// w with wᵀy = cᵀβ̂, i.e. w = X(XᵀX)⁻¹c.
fn estimate_weights(design: &Design, c: &Contrast) -> Vec<f64> {
    let cv = DVector::from_column_slice(c.weights());
    let w = design.x() * (design.gram_inverse() * cv);
    w.iter().copied().collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn fit_unit(y: &[f64], design: &Design, theta: &Contrast, side: SideMode) -> Result<UnitSummary> {
    UnitFitter::new(design, theta)?.fit(y, side)
}

/// Summaries for every unit plus the shared design constants.
#[derive(Debug, Clone)]
pub struct Summaries {
    pub units: Vec<UnitSummary>,
    pub nu: f64,
    pub k: usize,
    pub p: usize,
}

impl Summaries {
    pub fn df(&self) -> usize {
        self.k - self.p
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Side information for a whole matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum SideSpec {
    AverageIntensity,
    External(Vec<f64>),
    ManormTilde,
}

/// Fits every row of the row-major n × K matrix `y`.
pub fn fit_units(y: &[f64], design: &Design, theta: &Contrast, side: &SideSpec) -> Result<Summaries> {
    let k = design.k();
    if y.len() % k != 0 {
        return Err(Error::Input(format!("matrix length {} is not a multiple of K = {k}", y.len())));
    }
    let n = y.len() / k;
    if let SideSpec::External(m) = side {
        if m.len() != n {
            return Err(Error::Input(format!("{} side values for {n} units", m.len())));
        }
    }
    let fitter = UnitFitter::new(design, theta)?;
    let units = y
        .par_chunks(k)
        .enumerate()
        .map(|(i, row)| {
            let mode = match side {
                SideSpec::AverageIntensity => SideMode::AverageIntensity,
                SideSpec::External(m) => SideMode::External(m[i]),
                SideSpec::ManormTilde => SideMode::ManormTilde,
            };
            fitter
                .fit(row, mode)
                .map_err(|e| Error::Input(format!("unit {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Summaries {
        units,
        nu: theta.nu(),
        k,
        p: design.p(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthogonalityReport {
    /// c_θᵀ(XᵀX)⁻¹c_side.
    pub value: f64,
    /// |value| within tolerance.
    pub ok: bool,
    pub ones_in_colspace: bool,
}

pub fn check_orthogonality(design: &Design, theta: &Contrast, side: &Contrast, tol: f64) -> Result<OrthogonalityReport> {
    if theta.weights().len() != design.p() || side.weights().len() != design.p() {
        return Err(Error::Design("contrast does not conform to the design".into()));
    }
    let ct = DVector::from_column_slice(theta.weights());
    let cs = DVector::from_column_slice(side.weights());
    let value = (ct.transpose() * design.gram_inverse() * cs)[(0, 0)];
    let ok = value.abs() <= tol * 1f64.max(theta.norm() * side.norm());
    Ok(OrthogonalityReport {
        value,
        ok,
        ones_in_colspace: design.ones_in_colspace(tol),
    })
}
