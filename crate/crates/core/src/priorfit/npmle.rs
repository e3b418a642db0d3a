//! Grid NPMLE: maximize (1/n)Σ_i log Σ_k w_k L_ik over the simplex.
//!
//! Two solvers share the matrix type. The default is an active-set Newton
//! method (see `active_set`). The other is EM, optionally with SQUAREM
//! extrapolation. An extrapolated point is kept only if its log-likelihood
//! beats the second plain EM step, so the accepted iterates never lose
//! likelihood. Columns whose weight has decayed to nothing are set aside to
//! shorten each pass and are re-admitted if the final optimality check asks
//! for them.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Rows per parallel work item. Fixed so that the reduction order, and hence
/// every floating-point result, is independent of the thread count.
pub(super) const CHUNK_ROWS: usize = 256;

/// Row-major likelihood matrix, each row scaled so that its maximum is 1.
#[derive(Debug, Clone)]
pub struct LikelihoodMatrix {
    pub(super) n: usize,
    pub(super) m: usize,
    pub(super) values: Vec<f64>,
    row_log_max: Vec<f64>,
}

impl LikelihoodMatrix {
    /// Builds the matrix from log-likelihood values, row-major n × m.
    pub fn from_log(n: usize, m: usize, log_values: Vec<f64>) -> Result<Self> {
        if log_values.len() != n * m {
            return Err(Error::Input(format!("expected {} log-likelihood values, got {}", n * m, log_values.len())));
        }
        let mut values = log_values;
        let mut row_log_max = vec![0.0; n];
        values
            .par_chunks_mut(m.max(1))
            .zip(row_log_max.par_iter_mut())
            .enumerate()
            .try_for_each(|(i, (row, offset))| scale_row(i, row, offset))?;
        Ok(Self { n, m, values, row_log_max })
    }

    /// Builds the matrix by letting `fill(i, row)` write the log-likelihoods
    /// of row i.
    pub fn build<F>(n: usize, m: usize, fill: F) -> Result<Self>
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        if m == 0 {
            return Err(Error::Input("likelihood matrix needs at least one column".into()));
        }
        let mut values = vec![0.0; n * m];
        let mut row_log_max = vec![0.0; n];
        values
            .par_chunks_mut(m)
            .zip(row_log_max.par_iter_mut())
            .enumerate()
            .try_for_each(|(i, (row, offset))| {
                fill(i, row);
                scale_row(i, row, offset)
            })?;
        Ok(Self { n, m, values, row_log_max })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Scaled likelihood row i.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn row_log_max(&self) -> &[f64] {
        &self.row_log_max
    }

    /// (1/n)Σ_i log Σ_k w_k L_ik.
    pub fn log_likelihood(&self, weights: &[f64]) -> f64 {
        let cols: Vec<usize> = (0..self.m).collect();
        let (sum, _) = pass(&self.values, self.m, &cols, weights, false);
        (sum + self.offset_sum()) / self.n as f64
    }

    /// g_k = (1/n)Σ_i L_ik / f_i for every column, with f_i = Σ_k w_k L_ik.
    pub fn gradient(&self, weights: &[f64]) -> Vec<f64> {
        let cols: Vec<usize> = (0..self.m).collect();
        let (_, g) = pass(&self.values, self.m, &cols, weights, true);
        g.into_iter().map(|v| v / self.n as f64).collect()
    }

    pub(super) fn offset_sum(&self) -> f64 {
        self.row_log_max.iter().sum()
    }
}

fn scale_row(i: usize, row: &mut [f64], offset: &mut f64) -> Result<()> {
    if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Input(format!(
            "row {i} of the likelihood matrix has a NaN or infinite log-likelihood"
        )));
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Input(format!(
            "row {i} of the likelihood matrix is zero for every support point"
        )));
    }
    for v in row.iter_mut() {
        *v = (*v - max).exp();
    }
    *offset = max;
    Ok(())
}

/// One sweep over the rows, restricted to `cols` (with matching `weights`).
/// Returns Σ_i log f_i and, if asked, Σ_i L_ik / f_i for each k in `cols`.
/// `stride` is the row length of `values`; when `cols` is all columns in
/// order the inner loops run over contiguous memory.
pub(super) fn pass(values: &[f64], stride: usize, cols: &[usize], weights: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
    let mc = cols.len();
    let contiguous = mc == stride;
    let partials: Vec<(f64, Vec<f64>)> = values
        .par_chunks(CHUNK_ROWS * stride)
        .map(|block| {
            let mut ll = 0.0;
            let mut grad = if with_grad { vec![0.0; mc] } else { Vec::new() };
            for row in block.chunks(stride) {
                let f: f64 = if contiguous {
                    row.iter().zip(weights).map(|(l, w)| l * w).sum()
                } else {
                    cols.iter().zip(weights).map(|(&k, w)| row[k] * w).sum()
                };
                ll += f.ln();
                if with_grad {
                    let inv = 1.0 / f;
                    if contiguous {
                        for (g, l) in grad.iter_mut().zip(row) {
                            *g += l * inv;
                        }
                    } else {
                        for (g, &k) in grad.iter_mut().zip(cols) {
                            *g += row[k] * inv;
                        }
                    }
                }
            }
            (ll, grad)
        })
        .collect();
    let mut ll = 0.0;
    let mut grad = vec![0.0; if with_grad { mc } else { 0 }];
    for (l, g) in partials {
        ll += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    (ll, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpmleSolver {
    /// Sequential quadratic programming on a working set of columns.
    ActiveSetNewton,
    /// EM with SQUAREM extrapolation.
    Squarem,
    Em,
}

#[derive(Debug, Clone, Copy)]
pub struct NpmleOptions {
    /// Stop once |Δ log-lik| ≤ tol · max(1, |log-lik|) and the optimality gap
    /// is below `kkt_tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub kkt_tol: f64,
    /// Weights below this are zeroed (and the rest renormalized) at the end.
    pub prune: f64,
    pub solver: NpmleSolver,
}

impl Default for NpmleOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 5000,
            kkt_tol: 2e-5,
            prune: 1e-10,
            solver: NpmleSolver::ActiveSetNewton,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NpmleFit {
    /// Weights over all columns, pruned and renormalized.
    pub weights: Vec<f64>,
    /// Average log-likelihood at the final iterate, before pruning.
    pub loglik: f64,
    /// EM steps, or Newton steps for the active-set solver.
    pub iterations: usize,
    pub converged: bool,
    /// Average log-likelihood of every accepted iterate, starting with the
    /// initial weights.
    pub trace: Vec<f64>,
    /// (1/n)Σ_i L_ik/f_i at the final iterate, all columns.
    pub gradient: Vec<f64>,
    /// max(max_k g_k − 1, max over weights > 1e-8 of |g_k − 1|).
    pub kkt_gap: f64,
}

/// Weights below this, with a gradient below one, are set aside.
const INACTIVE_WEIGHT: f64 = 1e-14;
const SHRINK_EVERY: usize = 10;
/// Compact the working matrix once the active set is this fraction of it.
const COMPACT_RATIO: f64 = 0.6;

struct Working<'a> {
    full: &'a LikelihoodMatrix,
    /// Compacted copy holding only `cols`, or `None` to index the full matrix.
    compact: Option<Vec<f64>>,
    compact_cols: Vec<usize>,
    /// Active columns, as indices into the full matrix.
    cols: Vec<usize>,
}

impl<'a> Working<'a> {
    fn new(full: &'a LikelihoodMatrix) -> Self {
        let cols: Vec<usize> = (0..full.m).collect();
        Self { full, compact: None, compact_cols: cols.clone(), cols }
    }

    /// Runs a pass over the active columns with their weights `w`.
    /// Returns (average log-lik, average gradient).
    fn eval(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let n = self.full.n as f64;
        let (sum, grad) = match &self.compact {
            Some(values) => {
                let local = self.local_indices();
                pass(values, self.compact_cols.len(), &local, w, true)
            }
            None => pass(&self.full.values, self.full.m, &self.cols, w, true),
        };
        (
            (sum + self.full.offset_sum()) / n,
            grad.into_iter().map(|g| g / n).collect(),
        )
    }

    fn local_indices(&self) -> Vec<usize> {
        // Both lists are ascending and `cols` ⊆ `compact_cols`.
        let mut out = Vec::with_capacity(self.cols.len());
        let mut j = 0;
        for &c in &self.cols {
            while self.compact_cols[j] != c {
                j += 1;
            }
            out.push(j);
        }
        out
    }

    fn set_cols(&mut self, cols: Vec<usize>) {
        self.cols = cols;
        if (self.cols.len() as f64) < COMPACT_RATIO * self.compact_cols.len() as f64 {
            let m = self.full.m;
            let mc = self.cols.len();
            let mut values = vec![0.0; self.full.n * mc];
            values
                .par_chunks_mut(mc.max(1))
                .enumerate()
                .for_each(|(i, out)| {
                    let row = &self.full.values[i * m..(i + 1) * m];
                    for (o, &k) in out.iter_mut().zip(&self.cols) {
                        *o = row[k];
                    }
                });
            self.compact = Some(values);
            self.compact_cols = self.cols.clone();
        }
    }
}

pub(super) fn kkt_gap(weights: &[f64], grad: &[f64]) -> f64 {
    let mut gap: f64 = 0.0;
    for (w, g) in weights.iter().zip(grad) {
        gap = gap.max(g - 1.0);
        if *w > 1e-8 {
            gap = gap.max((g - 1.0).abs());
        }
    }
    gap
}

fn em_step(w: &[f64], g: &[f64]) -> Vec<f64> {
    let mut next: Vec<f64> = w.iter().zip(g).map(|(a, b)| a * b).collect();
    let total: f64 = next.iter().sum();
    for v in next.iter_mut() {
        *v /= total;
    }
    next
}

fn distance2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Maximizes the average log mixture likelihood over simplex weights.
pub fn solve_npmle(mat: &LikelihoodMatrix, init: Option<&[f64]>, opts: &NpmleOptions) -> Result<NpmleFit> {
    if mat.n == 0 {
        return Err(Error::Input("likelihood matrix has no rows".into()));
    }
    let init = match init {
        Some(w) => {
            if w.len() != mat.m {
                return Err(Error::Input("initial weights do not match the number of columns".into()));
            }
            let total: f64 = w.iter().sum();
            if w.iter().any(|v| !(*v >= 0.0)) || !(total > 0.0) {
                return Err(Error::Input("initial weights must be non-negative with positive sum".into()));
            }
            Some(w.iter().map(|v| v / total).collect::<Vec<f64>>())
        }
        None => None,
    };
    match opts.solver {
        NpmleSolver::ActiveSetNewton => super::active_set::solve(mat, init, opts),
        NpmleSolver::Squarem => npmle_em(mat, init, opts, true),
        NpmleSolver::Em => npmle_em(mat, init, opts, false),
    }
}

fn npmle_em(mat: &LikelihoodMatrix, init: Option<Vec<f64>>, opts: &NpmleOptions, accelerate: bool) -> Result<NpmleFit> {
    let m = mat.m;
    let w_full = init.unwrap_or_else(|| vec![1.0 / m as f64; m]);

    let mut work = Working::new(mat);
    let start: Vec<usize> = (0..m).filter(|&k| w_full[k] > 0.0).collect();
    work.set_cols(start);
    let mut w: Vec<f64> = work.cols.iter().map(|&k| w_full[k]).collect();
    let (mut ll, mut g) = work.eval(&w);
    if !ll.is_finite() {
        return Err(Error::Input("initial weights give zero likelihood to some row".into()));
    }
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut converged = false;
    let mut prev_ll = f64::NEG_INFINITY;

    while iterations < opts.max_iter {
        let settled = (ll - prev_ll).abs() <= opts.tol * ll.abs().max(1.0);
        if settled && kkt_gap(&w, &g) <= opts.kkt_tol {
            // Check the columns that were set aside before stopping.
            if work.cols.len() == m {
                converged = true;
                break;
            }
            let grad_full = mat.gradient(&scatter(&work.cols, &w, m));
            let revive: Vec<usize> = (0..m)
                .filter(|&k| grad_full[k] > 1.0 + opts.kkt_tol && work.cols.binary_search(&k).is_err())
                .collect();
            if revive.is_empty() {
                converged = true;
                break;
            }
            let (cols, weights, new_ll, new_g) = readmit(mat, &work, &w, ll, &revive, &grad_full);
            work.compact = None;
            work.compact_cols = (0..m).collect();
            work.set_cols(cols);
            w = weights;
            ll = new_ll;
            g = new_g;
            trace.push(ll);
            prev_ll = f64::NEG_INFINITY;
            iterations += 1;
            continue;
        }
        prev_ll = ll;
        iterations += 1;

        let w1 = em_step(&w, &g);
        let (ll1, g1) = work.eval(&w1);
        if !accelerate {
            w = w1;
            ll = ll1;
            g = g1;
            trace.push(ll);
            continue;
        }
        let w2 = em_step(&w1, &g1);
        let r2 = distance2(&w1, &w);
        let v: Vec<f64> = w2.iter().zip(&w1).zip(&w).map(|((c, b), a)| c - 2.0 * b + a).collect();
        let v2: f64 = v.iter().map(|x| x * x).sum();
        let mut accepted = false;
        if v2 > 0.0 && r2 > 0.0 {
            let mut alpha = (-(r2 / v2).sqrt()).min(-1.0);
            let mut candidate = Vec::with_capacity(w.len());
            for _ in 0..60 {
                candidate.clear();
                candidate.extend(
                    w.iter()
                        .zip(&w1)
                        .zip(&v)
                        .map(|((a, b), vv)| a - 2.0 * alpha * (b - a) + alpha * alpha * vv),
                );
                if candidate.iter().all(|x| *x > 0.0) || alpha >= -1.0 {
                    break;
                }
                alpha = 0.5 * (alpha - 1.0);
                if alpha > -1.0 + 1e-10 {
                    alpha = -1.0;
                }
            }
            if alpha < -1.0 && candidate.iter().all(|x| *x > 0.0) {
                let total: f64 = candidate.iter().sum();
                for c in candidate.iter_mut() {
                    *c /= total;
                }
                let (llc, gc) = work.eval(&candidate);
                if llc.is_finite() && llc >= ll1 {
                    w = candidate;
                    ll = llc;
                    g = gc;
                    accepted = true;
                }
            }
        }
        if !accepted {
            let (ll2, g2) = work.eval(&w2);
            w = w2;
            ll = ll2;
            g = g2;
        }
        trace.push(ll);

        if iterations % SHRINK_EVERY == 0 {
            let keep: Vec<usize> = (0..w.len()).filter(|&j| !(w[j] < INACTIVE_WEIGHT && g[j] < 1.0)).collect();
            if keep.len() < w.len() && !keep.is_empty() {
                let kept_total: f64 = keep.iter().map(|&j| w[j]).sum();
                let w_new: Vec<f64> = keep.iter().map(|&j| w[j] / kept_total).collect();
                let cols: Vec<usize> = keep.iter().map(|&j| work.cols[j]).collect();
                let old_cols = std::mem::replace(&mut work.cols, cols.clone());
                let (ll_new, g_new) = work.eval(&w_new);
                if ll_new >= ll {
                    work.cols = old_cols;
                    work.set_cols(cols);
                    w = w_new;
                    ll = ll_new;
                    g = g_new;
                } else {
                    work.cols = old_cols;
                }
            }
        }
    }

    let final_full = scatter(&work.cols, &w, m);
    Ok(finish(mat, final_full, ll, iterations, converged, trace, opts.prune))
}

/// Scores the final weights on every column, then prunes and renormalizes.
pub(super) fn finish(
    mat: &LikelihoodMatrix,
    mut weights: Vec<f64>,
    loglik: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
    prune: f64,
) -> NpmleFit {
    let gradient = mat.gradient(&weights);
    let gap = kkt_gap(&weights, &gradient);
    for v in weights.iter_mut() {
        if *v < prune {
            *v = 0.0;
        }
    }
    let total: f64 = weights.iter().sum();
    for v in weights.iter_mut() {
        *v /= total;
    }
    NpmleFit {
        weights,
        loglik,
        iterations,
        converged,
        trace,
        gradient,
        kkt_gap: gap,
    }
}

fn scatter(cols: &[usize], w: &[f64], m: usize) -> Vec<f64> {
    let mut full = vec![0.0; m];
    for (&k, &v) in cols.iter().zip(w) {
        full[k] = v;
    }
    full
}

/// Moves a little mass onto columns whose gradient exceeds one. The step is
/// halved until it improves the likelihood, which it must for a small
/// enough step since the directional derivative is positive.
fn readmit(
    mat: &LikelihoodMatrix,
    work: &Working<'_>,
    w: &[f64],
    ll: f64,
    revive: &[usize],
    grad_full: &[f64],
) -> (Vec<usize>, Vec<f64>, f64, Vec<f64>) {
    let m = mat.m;
    let mut cols: Vec<usize> = work.cols.iter().chain(revive).copied().collect();
    cols.sort_unstable();
    let base = scatter(&work.cols, w, m);
    let excess: f64 = revive.iter().map(|&k| grad_full[k] - 1.0).sum();
    let mut step = 1e-3;
    let full_cols: Vec<usize> = (0..m).collect();
    for _ in 0..60 {
        let mut trial = base.clone();
        for v in trial.iter_mut() {
            *v *= 1.0 - step;
        }
        for &k in revive {
            trial[k] += step * (grad_full[k] - 1.0) / excess;
        }
        let (sum, grad) = pass(&mat.values, m, &full_cols, &trial, true);
        let trial_ll = (sum + mat.offset_sum()) / mat.n as f64;
        if trial_ll > ll {
            let n = mat.n as f64;
            let w_new = cols.iter().map(|&k| trial[k]).collect();
            let g_new = cols.iter().map(|&k| grad[k] / n).collect();
            return (cols, w_new, trial_ll, g_new);
        }
        step *= 0.5;
    }
    let w_new = cols.iter().map(|&k| base[k]).collect();
    let (sum, grad) = pass(&mat.values, m, &full_cols, &base, true);
    let n = mat.n as f64;
    let g_new = cols.iter().map(|&k| grad[k] / n).collect();
    (cols, w_new, (sum + mat.offset_sum()) / n, g_new)
}
