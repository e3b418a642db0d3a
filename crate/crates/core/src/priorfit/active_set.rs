//! Active-set Newton solver for the grid NPMLE.
//!
//! The solver keeps a small working set W of columns. Each step maximizes
//! the second-order model of the average log-likelihood over the simplex on
//! W, with the exact Hessian −(1/n)Σ_i l_i l_iᵀ/f_i², then backtracks along
//! the step until the likelihood rises by an Armijo margin. When W is solved
//! the full gradient picks the columns to add; columns that lost their
//! weight leave W.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::npmle::{finish, kkt_gap, pass, LikelihoodMatrix, NpmleFit, NpmleOptions, CHUNK_ROWS};
use crate::error::{Error, Result};

/// Plain EM steps on all columns used to choose the first working set.
const WARMUP_EM: usize = 5;
const INITIAL_COLUMNS: usize = 40;
const ADD_PER_ROUND: usize = 50;
/// Newton steps between pricing rounds.
const STEPS_PER_ROUND: usize = 3;
const ARMIJO: f64 = 1e-4;
/// Zero-weight columns stay in W while their gradient is within this of one.
const KEEP_MARGIN: f64 = 1e-4;
const MULTIPLIER_TOL: f64 = 1e-11;
/// Hessian terms of a row below this fraction of its largest term are
/// skipped. The gradient is always exact and the line search guarantees
/// ascent, so this only affects the step direction.
const HESSIAN_CUTOFF: f64 = 1e-12;

/// Compact copy of the working columns, row-major n × a.
struct Working {
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl Working {
    fn new(mat: &LikelihoodMatrix, cols: Vec<usize>) -> Self {
        let a = cols.len();
        let m = mat.m;
        let mut values = vec![0.0; mat.n * a];
        values.par_chunks_mut(a).enumerate().for_each(|(i, out)| {
            let row = &mat.values[i * m..(i + 1) * m];
            for (o, &k) in out.iter_mut().zip(&cols) {
                *o = row[k];
            }
        });
        Self { cols, values }
    }

    fn a(&self) -> usize {
        self.cols.len()
    }

    fn loglik(&self, mat: &LikelihoodMatrix, x: &[f64]) -> f64 {
        let local: Vec<usize> = (0..self.a()).collect();
        let (sum, _) = pass(&self.values, self.a(), &local, x, false);
        (sum + mat.offset_sum()) / mat.n as f64
    }

    /// Average log-likelihood, gradient and negated Hessian on W.
    /// Only the upper triangle is accumulated per row.
    fn model(&self, mat: &LikelihoodMatrix, x: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
        let a = self.a();
        let partials: Vec<(f64, Vec<f64>, Vec<f64>)> = self
            .values
            .par_chunks(CHUNK_ROWS * a)
            .map(|block| {
                let mut ll = 0.0;
                let mut g = vec![0.0; a];
                let mut h = vec![0.0; a * a];
                let mut u = vec![0.0; a];
                let mut nz: Vec<usize> = Vec::with_capacity(a);
                for row in block.chunks(a) {
                    let f: f64 = row.iter().zip(x).map(|(l, w)| l * w).sum();
                    ll += f.ln();
                    let inv = 1.0 / f;
                    let mut u_max: f64 = 0.0;
                    for ((uj, gj), l) in u.iter_mut().zip(g.iter_mut()).zip(row) {
                        *uj = l * inv;
                        *gj += *uj;
                        u_max = u_max.max(*uj);
                    }
                    nz.clear();
                    nz.extend((0..a).filter(|&j| u[j] > HESSIAN_CUTOFF * u_max));
                    for (p, &j) in nz.iter().enumerate() {
                        let uj = u[j];
                        let hrow = &mut h[j * a..(j + 1) * a];
                        for &k in &nz[p..] {
                            hrow[k] += uj * u[k];
                        }
                    }
                }
                (ll, g, h)
            })
            .collect();
        let n = mat.n as f64;
        let mut ll = 0.0;
        let mut g = vec![0.0; a];
        let mut h = DMatrix::zeros(a, a);
        for (l, gp, hp) in partials {
            ll += l;
            for (x, y) in g.iter_mut().zip(gp) {
                *x += y;
            }
            for j in 0..a {
                for k in j..a {
                    h[(j, k)] += hp[j * a + k];
                }
            }
        }
        for j in 0..a {
            for k in j..a {
                let v = h[(j, k)] / n;
                h[(j, k)] = v;
                h[(k, j)] = v;
            }
        }
        for v in g.iter_mut() {
            *v /= n;
        }
        ((ll + mat.offset_sum()) / n, g, h)
    }
}

/// Minimizer of ½yᵀHy + cᵀy over {y ≥ 0, Σy = 1} restricted to `free`.
/// The reduced Hessian is factored after scaling to unit diagonal.
/// Returns `None` if it cannot be factored.
fn face_minimizer(h: &DMatrix<f64>, c: &[f64], free: &[usize]) -> Option<Vec<f64>> {
    let k = free.len();
    let scale: Vec<f64> = free
        .iter()
        .map(|&j| if h[(j, j)] > 0.0 { 1.0 / h[(j, j)].sqrt() } else { 1.0 })
        .collect();
    let mut ridge = 1e-12;
    for _ in 0..8 {
        let hf = DMatrix::from_fn(k, k, |r, s| {
            h[(free[r], free[s])] * scale[r] * scale[s] + if r == s { ridge } else { 0.0 }
        });
        if let Some(chol) = hf.cholesky() {
            let u = chol.solve(&DVector::from_iterator(k, free.iter().zip(&scale).map(|(&j, s)| c[j] * s)));
            let v = chol.solve(&DVector::from_iterator(k, scale.iter().copied()));
            let u_sum: f64 = u.iter().zip(&scale).map(|(a, b)| a * b).sum();
            let v_sum: f64 = v.iter().zip(&scale).map(|(a, b)| a * b).sum();
            let lambda = (1.0 + u_sum) / v_sum;
            let y: Vec<f64> = (0..k).map(|r| scale[r] * (lambda * v[r] - u[r])).collect();
            if y.iter().all(|t| t.is_finite()) {
                return Some(y);
            }
        }
        ridge *= 100.0;
    }
    None
}

/// Primal active-set method for the simplex-constrained quadratic program,
/// started from the feasible point `start`.
fn simplex_qp(h: &DMatrix<f64>, c: &[f64], start: &[f64]) -> Vec<f64> {
    let a = c.len();
    let mut y = start.to_vec();
    let mut is_free: Vec<bool> = y.iter().map(|v| *v > 0.0).collect();
    for _ in 0..4 * a + 20 {
        let free: Vec<usize> = (0..a).filter(|&j| is_free[j]).collect();
        let Some(target) = face_minimizer(h, c, &free) else {
            break;
        };
        let mut t = 1.0;
        let mut blocking = None;
        for (&j, &tj) in free.iter().zip(&target) {
            if tj < 0.0 {
                let step = y[j] / (y[j] - tj);
                if step < t {
                    t = step;
                    blocking = Some(j);
                }
            }
        }
        for (&j, &tj) in free.iter().zip(&target) {
            y[j] = (y[j] + t * (tj - y[j])).max(0.0);
        }
        if let Some(j) = blocking {
            y[j] = 0.0;
            is_free[j] = false;
            continue;
        }
        let grad = h * DVector::from_column_slice(&y);
        let lambda = free.iter().map(|&j| grad[j] + c[j]).sum::<f64>() / free.len() as f64;
        let worst = (0..a)
            .filter(|&j| !is_free[j])
            .map(|j| (j, grad[j] + c[j] - lambda))
            .min_by(|p, q| p.1.total_cmp(&q.1));
        match worst {
            Some((j, mu)) if mu < -MULTIPLIER_TOL => is_free[j] = true,
            _ => break,
        }
    }
    let total: f64 = y.iter().sum();
    y.iter().map(|v| v / total).collect()
}

/// Starting working set: the heaviest columns after a few EM steps, plus the
/// best column of any row the set would otherwise give zero likelihood.
fn initial_set(mat: &LikelihoodMatrix, init: Option<Vec<f64>>) -> (Working, Vec<f64>) {
    let m = mat.m;
    let mut w = init.unwrap_or_else(|| vec![1.0 / m as f64; m]);
    for _ in 0..WARMUP_EM {
        let g = mat.gradient(&w);
        for (wk, gk) in w.iter_mut().zip(&g) {
            *wk *= gk;
        }
        let total: f64 = w.iter().sum();
        for wk in w.iter_mut() {
            *wk /= total;
        }
    }
    let mut order: Vec<usize> = (0..m).filter(|&k| w[k] > 0.0).collect();
    order.sort_by(|&p, &q| w[q].total_cmp(&w[p]).then(p.cmp(&q)));
    order.truncate(INITIAL_COLUMNS);

    let mut in_set = vec![false; m];
    for &k in &order {
        in_set[k] = true;
    }
    let rescue: Vec<usize> = mat
        .values
        .par_chunks(m)
        .filter_map(|row| {
            let covered = row.iter().zip(&in_set).any(|(l, s)| *s && *l > 0.0);
            if covered {
                None
            } else {
                row.iter().position(|l| *l == 1.0)
            }
        })
        .collect();
    for k in rescue {
        in_set[k] = true;
    }
    let cols: Vec<usize> = (0..m).filter(|&k| in_set[k]).collect();
    // Half the mass spread evenly keeps every row's density away from zero.
    let kept: f64 = cols.iter().map(|&k| w[k]).sum();
    let even = 0.5 / cols.len() as f64;
    let x: Vec<f64> = cols.iter().map(|&k| 0.5 * w[k] / kept + even).collect();
    (Working::new(mat, cols), x)
}

/// Full gradient (1/n)Σ_i L_ik/f_i and the row densities f_i in one sweep.
fn price(mat: &LikelihoodMatrix, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = mat.m;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = mat
        .values
        .par_chunks(CHUNK_ROWS * m)
        .map(|block| {
            let mut g = vec![0.0; m];
            let mut f = Vec::with_capacity(CHUNK_ROWS);
            for row in block.chunks(m) {
                let fi: f64 = row.iter().zip(w).map(|(l, wk)| l * wk).sum();
                let inv = 1.0 / fi;
                for (gk, l) in g.iter_mut().zip(row) {
                    *gk += l * inv;
                }
                f.push(fi);
            }
            (g, f)
        })
        .collect();
    let mut g = vec![0.0; m];
    let mut f = Vec::with_capacity(mat.n);
    for (gp, fp) in partials {
        for (a, b) in g.iter_mut().zip(gp) {
            *a += b;
        }
        f.extend(fp);
    }
    for v in g.iter_mut() {
        *v /= mat.n as f64;
    }
    (g, f)
}

/// Columns `cols` of the matrix, stored one after another.
fn gather(mat: &LikelihoodMatrix, cols: &[usize]) -> Vec<f64> {
    let n = mat.n;
    let mut out = vec![0.0; n * cols.len()];
    for (i, row) in mat.values.chunks(mat.m).enumerate() {
        for (j, &k) in cols.iter().enumerate() {
            out[j * n + i] = row[k];
        }
    }
    out
}

/// Moves `w` towards the vertex of column k by the likelihood-maximizing
/// fraction, updating the row densities `f`. Returns the new average
/// log-likelihood, or `None` if the step would not improve on `ll`.
fn vertex_step(mat: &LikelihoodMatrix, k: usize, col: &[f64], w: &mut [f64], f: &mut [f64], ll: f64) -> Option<f64> {
    let n = mat.n;
    // Derivative of the average log-likelihood along the segment, decreasing in t.
    let slope = |t: f64| -> f64 {
        col.iter()
            .zip(f.iter())
            .map(|(l, fi)| (l - fi) / (fi + t * (l - fi)))
            .sum::<f64>()
            / n as f64
    };
    if !(slope(0.0) > 0.0) {
        return None;
    }
    let t = if slope(1.0) >= 0.0 {
        1.0
    } else {
        // Safeguarded Newton on the decreasing derivative.
        let curvature = |t: f64| -> f64 {
            col.iter()
                .zip(f.iter())
                .map(|(l, fi)| {
                    let r = (l - fi) / (fi + t * (l - fi));
                    r * r
                })
                .sum::<f64>()
                / n as f64
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut t = 0.0;
        for _ in 0..100 {
            let s = slope(t);
            if s > 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let mut next = t + s / curvature(t);
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= 1e-13 || hi - lo <= 1e-13 {
                t = next;
                break;
            }
            t = next;
        }
        t
    };
    let moved: Vec<f64> = f.iter().zip(col).map(|(fi, l)| (1.0 - t) * fi + t * l).collect();
    let new_ll = (moved.iter().map(|v| v.ln()).sum::<f64>() + mat.offset_sum()) / n as f64;
    if !(new_ll > ll) {
        return None;
    }
    for v in w.iter_mut() {
        *v *= 1.0 - t;
    }
    w[k] += t;
    f.copy_from_slice(&moved);
    Some(new_ll)
}

pub(super) fn solve(mat: &LikelihoodMatrix, init: Option<Vec<f64>>, opts: &NpmleOptions) -> Result<NpmleFit> {
    let m = mat.m;
    let (mut work, mut x) = initial_set(mat, init);
    let mut ll = work.loglik(mat, &x);
    if !ll.is_finite() {
        return Err(Error::Numerical("NPMLE start has zero likelihood for some row".into()));
    }
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut converged = false;
    let mut improvement = f64::INFINITY;

    while iterations < opts.max_iter {
        let mut settled = false;
        let mut progressed = false;
        for _ in 0..STEPS_PER_ROUND {
            if iterations >= opts.max_iter {
                break;
            }
            let (ll_now, g, h) = work.model(mat, &x);
            ll = ll_now;
            let gap = kkt_gap(&x, &g);
            if gap <= 0.25 * opts.kkt_tol && improvement <= opts.tol * ll.abs().max(1.0) {
                settled = true;
                break;
            }
            let Some((next, ll_next)) = newton_step(mat, &work, &x, ll, &g, &h) else {
                settled = gap <= 0.25 * opts.kkt_tol;
                break;
            };
            iterations += 1;
            progressed = true;
            improvement = ll_next - ll;
            x = next;
            ll = ll_next;
            trace.push(ll);
        }

        // Pricing over all columns.
        let mut full = vec![0.0; m];
        for (&k, &v) in work.cols.iter().zip(&x) {
            full[k] = v;
        }
        let (grad, mut f) = price(mat, &full);
        let gap = kkt_gap(&full, &grad);
        if settled && gap <= opts.kkt_tol {
            converged = true;
            break;
        }
        // Columns with weight are excluded; a zero-weight column of W can
        // have a gradient far beyond what the Newton model resolves.
        let mut candidates: Vec<usize> =
            (0..m).filter(|&k| full[k] == 0.0 && grad[k] > 1.0 + 0.25 * opts.kkt_tol).collect();
        if candidates.is_empty() {
            if settled {
                // Only the tolerance on W is binding.
                converged = gap <= opts.kkt_tol;
                break;
            }
            if !progressed {
                log::debug!("NPMLE stalled with optimality gap {gap:.2e}");
                converged = gap <= opts.kkt_tol;
                break;
            }
            continue;
        }
        // Local maxima of the gradient first, then the largest values.
        let is_peak = |k: usize| (k == 0 || grad[k - 1] <= grad[k]) && (k + 1 == m || grad[k + 1] <= grad[k]);
        candidates.sort_by(|&p, &q| {
            is_peak(q)
                .cmp(&is_peak(p))
                .then(grad[q].total_cmp(&grad[p]))
                .then(p.cmp(&q))
        });
        candidates.truncate(ADD_PER_ROUND);

        let mut keep = vec![false; m];
        for (&k, &v) in work.cols.iter().zip(&x) {
            keep[k] = v > 0.0 || grad[k] >= 1.0 - KEEP_MARGIN;
        }
        let columns = gather(mat, &candidates);
        for (&k, col) in candidates.iter().zip(columns.chunks(mat.n)) {
            keep[k] = true;
            if let Some(new_ll) = vertex_step(mat, k, col, &mut full, &mut f, ll) {
                ll = new_ll;
                iterations += 1;
                progressed = true;
                trace.push(ll);
            }
        }
        let cols: Vec<usize> = (0..m).filter(|&k| keep[k]).collect();
        if !progressed && cols == work.cols {
            // Neither step type moves and the working set is unchanged.
            log::debug!("NPMLE stalled with optimality gap {gap:.2e}");
            converged = gap <= opts.kkt_tol;
            break;
        }
        x = cols.iter().map(|&k| full[k]).collect();
        work = Working::new(mat, cols);
        improvement = f64::INFINITY;
    }

    let mut full = vec![0.0; m];
    for (&k, &v) in work.cols.iter().zip(&x) {
        full[k] = v;
    }
    Ok(finish(mat, full, ll, iterations, converged, trace, opts.prune))
}

/// One damped Newton step on W. Returns the new point and its average
/// log-likelihood, or `None` if no ascent direction was found.
fn newton_step(
    mat: &LikelihoodMatrix,
    work: &Working,
    x: &[f64],
    ll: f64,
    g: &[f64],
    h: &DMatrix<f64>,
) -> Option<(Vec<f64>, f64)> {
    let hx = h * DVector::from_column_slice(x);
    let c: Vec<f64> = g.iter().zip(hx.iter()).map(|(gk, hk)| -(gk + hk)).collect();
    let y = simplex_qp(h, &c, x);
    let mut d: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    let mut slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
    if !(slope > 0.0) {
        // The quadratic model is unreliable here; an EM step always ascends.
        d = x.iter().zip(g).map(|(a, b)| a * b - a).collect();
        slope = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        if !(slope > 0.0) {
            return None;
        }
    }
    let point = |t: f64| -> Vec<f64> { x.iter().zip(&d).map(|(a, b)| (a + t * b).max(0.0)).collect() };
    let mut t = 1.0;
    let mut accepted = None;
    for _ in 0..50 {
        let trial = point(t);
        let ll_trial = work.loglik(mat, &trial);
        if ll_trial >= ll + ARMIJO * t * slope {
            accepted = Some((trial, ll_trial));
            break;
        }
        t *= 0.5;
    }
    if t == 1.0 {
        // The model can be far too cautious about weights near zero; keep
        // doubling while the likelihood rises and x stays feasible.
        let t_max = x
            .iter()
            .zip(&d)
            .filter(|(_, b)| **b < 0.0)
            .map(|(a, b)| -a / b)
            .fold(f64::INFINITY, f64::min);
        while let Some((_, best)) = &accepted {
            let next = (2.0 * t).min(t_max);
            if next <= t {
                break;
            }
            let trial = point(next);
            let ll_trial = work.loglik(mat, &trial);
            if ll_trial <= *best {
                break;
            }
            accepted = Some((trial, ll_trial));
            t = next;
        }
    }
    accepted
}
