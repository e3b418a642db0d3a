//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to the
//! terminal (bypassing output capture) and then asserts.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ebtrend::linmodel::{
    check_orthogonality, fit_units, intensity_contrast, manorm_contrast, Contrast, Design, SideSpec, UnitSummary,
    ORTHOGONALITY_TOL,
};
use ebtrend::multiplicity::{bh_adjust, bh_reject, error_metrics};
use ebtrend::nalgebra::DMatrix;
use ebtrend::pipeline::AnalysisOptions;
use ebtrend::priorfit::{
    fit_invchisq_untrended, fit_npmle_1d, grid_1d, ln_scaled_chisq_density, solve_npmle, DiscretePrior1D,
    DiscretePrior2D, InvChisqPrior, LikelihoodMatrix, NpmleOptions, NpmleSolver, PriorFitOptions,
};
use ebtrend::pvalues::{
    p_joint, p_limma_param, p_partially_bayes_1d, tweedie_joint, tweedie_reg, MethodId, DEFAULT_QUAD_TOL,
};
use ebtrend::sim::{gen_setting, monte_carlo, McSummary, OracleModel, PriorG, SimConfig, SimMethod, SimSide};
use ebtrend::special::{trigamma, trigamma_inverse};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Normal};
use statrs::distribution::{ContinuousCDF, StudentsT};

struct Report {
    id: usize,
    title: &'static str,
    checks: Vec<(String, bool)>,
    start: Instant,
}

impl Report {
    fn new(id: usize, title: &'static str) -> Self {
        Self { id, title, checks: Vec::new(), start: Instant::now() }
    }

    fn check(&mut self, ok: bool, detail: impl Into<String>) {
        self.checks.push((detail.into(), ok));
    }

    /// Prints the summary line and fails the test if any check failed.
    fn finish(self) {
        let ok = self.checks.iter().all(|c| c.1);
        let detail = self
            .checks
            .iter()
            .map(|(d, pass)| if *pass { d.clone() } else { format!("FAILED {d}") })
            .collect::<Vec<_>>()
            .join("; ");
        let line = format!(
            "acceptance criterion {:>2} [{}] {} ({:.1}s): {}\n",
            self.id,
            if ok { "PASS" } else { "FAIL" },
            self.title,
            self.start.elapsed().as_secs_f64(),
            detail
        );
        let mut err = std::io::stderr().lock();
        let _ = err.write_all(line.as_bytes());
        let _ = err.flush();
        assert!(ok, "{}", line.trim_end());
    }
}

fn nu(k_a: usize, k_b: usize) -> f64 {
    (1.0 / k_a as f64 + 1.0 / k_b as f64).sqrt()
}

/// sup |F_n(x) − x| against the uniform distribution.
fn ks_uniform(p: &[f64]) -> f64 {
    let mut s = p.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max)
}

/// Largest KS distance among the ten groups cut at deciles of `key`.
fn stratified_ks(p: &[f64], key: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| key[a].total_cmp(&key[b]));
    idx.chunks(p.len().div_ceil(10))
        .map(|c| ks_uniform(&c.iter().map(|&i| p[i]).collect::<Vec<_>>()))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_01_oracle_uniformity() {
    let mut r = Report::new(1, "oracle p-values are conditionally uniform under the null");
    let n = 20_000;
    let two_point = PriorG::TwoPoint { v1: 1.0, v2: 10.0, w: 0.5 };
    let cases = [
        ("two-point G, external M", SimConfig { side_mode: SimSide::ExternalMu, ..SimConfig::preset("setting2").unwrap() }),
        ("two-point G, joint with A", SimConfig::preset("setting2").unwrap()),
        ("dirac G, steep trend, external M", SimConfig::preset("setting4").unwrap()),
        ("two-point G, steep trend, joint with A", SimConfig { prior_g: two_point, ..SimConfig::preset("setting3").unwrap() }),
    ];
    let marginal_bound = 1.5 / (n as f64).sqrt();
    let strat_bound = 4.0 / (n as f64 / 10.0).sqrt();
    for (i, (name, base)) in cases.into_iter().enumerate() {
        let cfg = SimConfig { n, n0: n, ..base };
        let ds = gen_setting(&cfg, 1000 + i as u64).unwrap();
        let design = Design::two_group(cfg.k_a, cfg.k_b).unwrap();
        let theta = Contrast::new(vec![1.0, -1.0], &design).unwrap();
        let units = fit_units(&ds.y, &design, &theta, &SideSpec::AverageIntensity).unwrap();
        let oracle = OracleModel::new(&cfg, units.nu);
        let p: Vec<f64> = units
            .units
            .iter()
            .zip(&ds.truth)
            .map(|(u, t)| oracle.p_value(u, t.mu).unwrap())
            .collect();
        let s2: Vec<f64> = units.units.iter().map(|u| u.s2).collect();
        let side: Vec<f64> = match cfg.side_mode {
            SimSide::ExternalMu => ds.truth.iter().map(|t| t.mu).collect(),
            SimSide::AverageIntensity => units.units.iter().map(|u| u.a).collect(),
        };
        let d = ks_uniform(&p);
        let ds2 = stratified_ks(&p, &s2);
        let dm = stratified_ks(&p, &side);
        r.check(d <= marginal_bound, format!("{name}: KS {d:.4} (≤ {marginal_bound:.4})"));
        r.check(ds2 <= strat_bound, format!("{name}: S² deciles {ds2:.4} (≤ {strat_bound:.4})"));
        r.check(dm <= strat_bound, format!("{name}: side deciles {dm:.4} (≤ {strat_bound:.4})"));
    }
    r.finish();
}

fn random_prior_1d(rng: &mut ChaCha8Rng) -> DiscretePrior1D {
    let m = rng.random_range(1..7);
    let mut support: Vec<f64> = (0..m).map(|_| 10f64.powf(rng.random_range(-1.3..1.3))).collect();
    support.sort_by(f64::total_cmp);
    support.dedup();
    let w: Vec<f64> = support.iter().map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    DiscretePrior1D::new(support, w.iter().map(|v| v / total).collect()).unwrap()
}

fn random_prior_2d(rng: &mut ChaCha8Rng) -> DiscretePrior2D {
    let m = rng.random_range(1..10);
    let atoms: Vec<(f64, f64)> = (0..m)
        .map(|_| (rng.random_range(16.0..24.0), 10f64.powf(rng.random_range(-1.3..1.3))))
        .collect();
    let w: Vec<f64> = atoms.iter().map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    DiscretePrior2D::new(atoms, w.iter().map(|v| v / total).collect()).unwrap()
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

#[test]
fn criterion_02_tweedie_equivalence() {
    let mut r = Report::new(2, "integral and direct p-values agree");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_1d = 0.0f64;
    let mut max_2d = 0.0f64;
    for _ in 0..5 {
        let prior = random_prior_1d(&mut rng);
        let prior2 = random_prior_2d(&mut rng);
        for _ in 0..100 {
            let df = rng.random_range(1..12usize);
            let nu = rng.random_range(0.3..1.5);
            let chi = ChiSquared::new(df as f64).unwrap();

            let xi2 = 10f64.powf(rng.random_range(-1.0..1.0));
            let tau2 = prior.support()[pick(&mut rng, prior.weights())];
            let sigma2 = xi2 * tau2;
            let s2 = sigma2 * chi.sample(&mut rng) / df as f64;
            let shift = if rng.random_bool(0.3) { rng.random_range(-6.0..6.0) } else { 0.0 };
            let z = nu * sigma2.sqrt() * (Normal::new(0.0, 1.0).unwrap().sample(&mut rng) + shift);
            let u = UnitSummary { z, s2, a: 0.0, m: 0.0, df };
            let direct = p_partially_bayes_1d(&u, &prior, nu, xi2);
            let quad = tweedie_reg(&u, &prior, xi2, nu, DEFAULT_QUAD_TOL).unwrap();
            max_1d = max_1d.max((direct - quad).abs());

            let k = df + 2;
            let (mu, sigma2) = prior2.atoms()[pick(&mut rng, prior2.weights())];
            let a = mu + (sigma2 / k as f64).sqrt() * Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
            let s2 = sigma2 * chi.sample(&mut rng) / df as f64;
            let z = nu * sigma2.sqrt() * (Normal::new(0.0, 1.0).unwrap().sample(&mut rng) + shift);
            let u = UnitSummary { z, s2, a, m: a, df };
            let direct = p_joint(&u, &prior2, nu, k);
            let quad = tweedie_joint(&u, &prior2, nu, k, DEFAULT_QUAD_TOL).unwrap();
            max_2d = max_2d.max((direct - quad).abs());
        }
    }
    r.check(max_1d <= 1e-6, format!("1-D max diff {max_1d:.2e} (≤ 1e-6)"));
    r.check(max_2d <= 1e-6, format!("2-D max diff {max_2d:.2e} (≤ 1e-6)"));
    r.finish();
}

/// Scaled inverse-χ² law of τ² = κs²/X, X ~ χ²_κ, cut into `points` cells
/// in log τ² between the 1e-7 and 1 − 1e-7 quantiles. Each atom sits at the
/// log-centre of its cell and carries the cell's probability; the end cells
/// extend to 0 and ∞.
fn discretize_invchisq(kappa: f64, s0_sq: f64, points: usize) -> (Vec<f64>, Vec<f64>) {
    let chi = statrs::distribution::ChiSquared::new(kappa).unwrap();
    let quantile = |p: f64| kappa * s0_sq / chi.inverse_cdf(1.0 - p);
    let cdf = |t: f64| 1.0 - chi.cdf(kappa * s0_sq / t);
    let (lo, hi) = (quantile(1e-7).ln(), quantile(1.0 - 1e-7).ln());
    let h = (hi - lo) / (points - 1) as f64;
    let support: Vec<f64> = (0..points).map(|j| (lo + h * j as f64).exp()).collect();
    let weights: Vec<f64> = (0..points)
        .map(|j| {
            let left = if j == 0 { 0.0 } else { cdf((lo + h * (j as f64 - 0.5)).exp()) };
            let right = if j + 1 == points { 1.0 } else { cdf((lo + h * (j as f64 + 0.5)).exp()) };
            right - left
        })
        .collect();
    (support, weights)
}

fn t_tail(t: f64, df: f64) -> f64 {
    2.0 * StudentsT::new(0.0, 1.0, df).unwrap().sf(t.abs())
}

#[test]
fn criterion_03_closed_form_limits() {
    let mut r = Report::new(3, "fine-grid priors reproduce the conjugate closed forms");
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // (a) 1-D: discretized inverse-χ² against the moderated t.
    for (kappa, s0_sq, df) in [(4.0, 1.0, 4usize), (10.0, 0.5, 2), (25.0, 2.0, 8)] {
        let units: Vec<(UnitSummary, f64)> = (0..200)
            .map(|_| {
                let xi2 = 10f64.powf(rng.random_range(-0.5..0.5));
                let s2 = xi2 * 10f64.powf(rng.random_range(-1.0..1.0));
                let z = rng.random_range(-8.0..8.0);
                (UnitSummary { z, s2, a: 0.0, m: 0.0, df }, xi2)
            })
            .collect();
        let closed = InvChisqPrior::new(kappa, s0_sq).unwrap();
        let err = |points: usize| {
            let (support, weights) = discretize_invchisq(kappa, s0_sq, points);
            let prior = DiscretePrior1D::new(support, weights).unwrap();
            units
                .iter()
                .map(|(u, xi2)| {
                    let oracle = t_tail(u.z / (0.7 * closed.moderated_variance(u.s2, df as f64, *xi2).sqrt()), df as f64 + kappa);
                    let lib = p_limma_param(u, &closed, 0.7, *xi2);
                    assert!((oracle - lib).abs() <= 1e-10, "moderated t: {oracle} vs {lib}");
                    (p_partially_bayes_1d(u, &prior, 0.7, *xi2) - oracle).abs()
                })
                .fold(0.0, f64::max)
        };
        let (e200, e400) = (err(200), err(400));
        r.check(e200 <= 5e-3, format!("κ₀={kappa}: 200-pt error {e200:.2e} (≤ 5e-3)"));
        r.check(e400 <= 0.5 * e200, format!("κ₀={kappa}: 400-pt error {e400:.2e} (≤ half)"));
    }

    // (b) Joint: μ | σ² ~ N(a₀, b₀σ²), 1/σ² ~ χ²_κ₀/(κ₀s₀²), against the
    // t tail on d + κ₀ + 1 degrees of freedom.
    let (a0, b0, kappa, s0_sq) = (20.0, 0.5, 6.0, 1.5);
    let (k_a, k_b) = (3usize, 3usize);
    let (k, d) = ((k_a + k_b) as f64, (k_a + k_b - 2) as f64);
    let nu = nu(k_a, k_b);
    let (var_support, var_weights) = discretize_invchisq(kappa, s0_sq, 200);
    let mu_points = 200;
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    for (&s2, &w) in var_support.iter().zip(&var_weights) {
        let sd = (b0 * s2).sqrt();
        let h = 16.0 * sd / (mu_points - 1) as f64;
        let dens: Vec<f64> = (0..mu_points)
            .map(|j| {
                let x = -8.0 + 16.0 * j as f64 / (mu_points - 1) as f64;
                (-0.5 * x * x).exp()
            })
            .collect();
        let total: f64 = dens.iter().sum();
        for (j, p) in dens.iter().enumerate() {
            atoms.push((a0 - 8.0 * sd + h * j as f64, s2));
            weights.push(w * p / total);
        }
    }
    let h = DiscretePrior2D::new(atoms, weights).unwrap();
    let mut max_err = 0.0f64;
    for _ in 0..200 {
        let s2 = 10f64.powf(rng.random_range(-1.0..1.0)) * s0_sq;
        let a = a0 + rng.random_range(-3.0..3.0);
        let z = rng.random_range(-6.0..6.0);
        let u = UnitSummary { z, s2, a, m: a, df: d as usize };
        let s_check = ((kappa * s0_sq + d * s2 + (a - a0).powi(2) / (b0 + 1.0 / k)) / (d + kappa + 1.0)).sqrt();
        let closed = t_tail(z / (nu * s_check), d + kappa + 1.0);
        max_err = max_err.max((p_joint(&u, &h, nu, k_a + k_b) - closed).abs());
    }
    r.check(max_err <= 5e-3, format!("joint conjugate error {max_err:.2e} (≤ 5e-3)"));
    r.finish();
}

const MC_N: usize = 10_000;
const MC_REPS: usize = 20;

fn run_setting(name: &str, methods: &[SimMethod]) -> McSummary {
    let cfg = SimConfig { n: MC_N, n0: MC_N * 9 / 10, reps: MC_REPS, alpha: 0.05, ..SimConfig::preset(name).unwrap() };
    monte_carlo(&cfg, methods, &AnalysisOptions::default()).unwrap()
}

fn method(m: MethodId) -> SimMethod {
    SimMethod::Method(m)
}

/// (fdr, power) of a method that ran in every replicate.
fn rates(s: &McSummary, m: SimMethod) -> (f64, f64) {
    let row = s.row(m).unwrap();
    assert!(!row.skipped && row.failed == 0 && row.reps == MC_REPS, "{m}: {row:?}");
    (row.fdr, row.power)
}

#[test]
fn criterion_04_setting1() {
    let mut r = Report::new(4, "setting 1 error rates");
    let methods = [
        SimMethod::Oracle,
        method(MethodId::RegNpmle),
        method(MethodId::JointNpmle),
        method(MethodId::UntrendedNpmle),
        method(MethodId::Map),
        method(MethodId::TTest),
    ];
    let s = run_setting("setting1", &methods);
    for m in &methods[..4] {
        let (fdr, power) = rates(&s, *m);
        r.check(fdr <= 0.065, format!("{m} FDR {fdr:.4} (≤ 0.065), power {power:.4}"));
    }
    let (map_fdr, _) = rates(&s, method(MethodId::Map));
    r.check(map_fdr >= 0.30, format!("map FDR {map_fdr:.4} (≥ 0.30)"));
    let (_, joint) = rates(&s, method(MethodId::JointNpmle));
    let (_, t) = rates(&s, method(MethodId::TTest));
    r.check(joint >= t + 0.15, format!("joint power {joint:.4} ≥ t-test {t:.4} + 0.15"));
    r.finish();
}

#[test]
fn criterion_05_setting3() {
    let mut r = Report::new(5, "setting 3 error rates");
    let methods = [
        method(MethodId::Manorm2),
        method(MethodId::Map),
        method(MethodId::RegNpmle),
        method(MethodId::JointNpmle),
        method(MethodId::TTest),
    ];
    let s = run_setting("setting3", &methods);
    let (manorm, _) = rates(&s, method(MethodId::Manorm2));
    r.check(manorm >= 0.08, format!("manorm2 FDR {manorm:.4} (≥ 0.08)"));
    let (map_fdr, _) = rates(&s, method(MethodId::Map));
    r.check(map_fdr >= 0.20, format!("map FDR {map_fdr:.4} (≥ 0.20)"));
    for m in [MethodId::RegNpmle, MethodId::JointNpmle] {
        let (fdr, power) = rates(&s, method(m));
        r.check(fdr <= 0.065, format!("{m} FDR {fdr:.4} (≤ 0.065), power {power:.4}"));
    }
    let (_, joint) = rates(&s, method(MethodId::JointNpmle));
    let (_, t) = rates(&s, method(MethodId::TTest));
    r.check(joint >= t, format!("joint power {joint:.4} ≥ t-test {t:.4}"));
    r.finish();
}

#[test]
fn criterion_06_setting4() {
    let mut r = Report::new(6, "setting 4 error rates");
    let methods = SimMethod::table_default();
    let s = run_setting("setting4", &methods);
    let (_, oracle) = rates(&s, SimMethod::Oracle);
    let (_, reg) = rates(&s, method(MethodId::RegNpmle));
    let (_, untrended) = rates(&s, method(MethodId::UntrendedNpmle));
    r.check((reg - oracle).abs() <= 0.02, format!("reg_npmle power {reg:.4} within 0.02 of oracle {oracle:.4}"));
    r.check(reg >= untrended + 0.08, format!("reg_npmle power {reg:.4} ≥ untrended {untrended:.4} + 0.08"));
    for row in s.rows.iter().filter(|row| !row.skipped) {
        r.check(row.failed == 0 && row.fdr <= 0.065, format!("{} FDR {:.4} (≤ 0.065)", row.method, row.fdr));
    }
    r.finish();
}

/// Scaled-χ² likelihood on a log grid for data drawn from a random
/// discrete G.
fn random_problem(rng: &mut ChaCha8Rng) -> LikelihoodMatrix {
    let n = rng.random_range(200..2000);
    let df = rng.random_range(1..12) as f64;
    let prior = random_prior_1d(rng);
    let chi = ChiSquared::new(df).unwrap();
    let v2: Vec<f64> = (0..n)
        .map(|_| prior.support()[pick(rng, prior.weights())] * chi.sample(rng) / df)
        .collect();
    let grid = grid_1d(&v2, rng.random_range(30..160), 0.01).unwrap();
    LikelihoodMatrix::build(n, grid.len(), |i, row| {
        for (out, &t) in row.iter_mut().zip(&grid) {
            *out = ln_scaled_chisq_density(v2[i].max(1e-300), df, t);
        }
    })
    .unwrap()
}

#[test]
fn criterion_07_npmle_solver_quality() {
    let mut r = Report::new(7, "NPMLE solver monotonicity, optimality and recovery");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_drop = 0.0f64;
    let mut worst_grad = 0.0f64;
    let mut worst_support = 0.0f64;
    let mut all_converged = true;
    for _ in 0..50 {
        let mat = random_problem(&mut rng);
        for solver in [NpmleSolver::Em, NpmleSolver::Squarem] {
            let opts = NpmleOptions { solver, max_iter: 1000, ..NpmleOptions::default() };
            let fit = solve_npmle(&mat, None, &opts).unwrap();
            for w in fit.trace.windows(2) {
                worst_drop = worst_drop.max(w[0] - w[1]);
            }
        }
        let fit = solve_npmle(&mat, None, &NpmleOptions::default()).unwrap();
        all_converged &= fit.converged;
        let g = mat.gradient(&fit.weights);
        worst_grad = worst_grad.max(g.iter().copied().fold(f64::NEG_INFINITY, f64::max) - 1.0);
        for (gk, wk) in g.iter().zip(&fit.weights) {
            if *wk > 1e-8 {
                worst_support = worst_support.max((gk - 1.0).abs());
            }
        }
    }
    r.check(worst_drop <= 1e-12, format!("largest EM/SQUAREM decrease {worst_drop:.1e} (≤ 1e-12)"));
    r.check(all_converged, "Newton solver converged on all 50");
    r.check(worst_grad <= 1e-4, format!("max gradient − 1 = {worst_grad:.1e} (≤ 1e-4)"));
    r.check(worst_support <= 1e-4, format!("max |gradient − 1| on support {worst_support:.1e} (≤ 1e-4)"));

    let df = 4.0;
    let chi = ChiSquared::new(df).unwrap();
    for (lo, hi, w) in [(1.0, 10.0, 0.5), (1.0, 10.0, 0.3), (0.5, 8.0, 0.7)] {
        let v2: Vec<f64> = (0..5000)
            .map(|_| (if rng.random_bool(w) { lo } else { hi }) * chi.sample(&mut rng) / df)
            .collect();
        let (prior, _) = fit_npmle_1d(&v2, df, &PriorFitOptions::default()).unwrap();
        let cut = (lo * hi as f64).sqrt();
        let mass: f64 = prior.support().iter().zip(prior.weights()).filter(|(t, _)| **t < cut).map(|p| p.1).sum();
        r.check((mass - w).abs() <= 0.05, format!("{w}·δ{lo} + {}·δ{hi}: recovered {mass:.3}", 1.0 - w));
    }
    r.finish();
}

#[test]
fn criterion_08_moments_and_trigamma() {
    let mut r = Report::new(8, "method of moments and trigamma inversion");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (kappa, s0_sq, d, n) = (10.0, 1.0, 4.0, 100_000);
    let prior_chi = ChiSquared::new(kappa).unwrap();
    let chi = ChiSquared::new(d).unwrap();
    let s2: Vec<f64> = (0..n)
        .map(|_| {
            let sigma2 = kappa * s0_sq / prior_chi.sample(&mut rng);
            sigma2 * chi.sample(&mut rng) / d
        })
        .collect();
    let fit = fit_invchisq_untrended(&s2, d).unwrap();
    r.check((8.0..=12.0).contains(&fit.kappa0), format!("κ̂₀ = {:.3} in [8, 12]", fit.kappa0));
    r.check((0.9..=1.1).contains(&fit.s0_sq), format!("ŝ₀² = {:.4} in [0.9, 1.1]", fit.s0_sq));

    let worst = (0..=2000)
        .map(|i| 10f64.powf(-4.0 + 7.0 * i as f64 / 2000.0))
        .map(|y| (trigamma(trigamma_inverse(y)) - y).abs())
        .fold(0.0, f64::max);
    r.check(worst <= 1e-8, format!("max |ψ′(ψ′⁻¹(y)) − y| = {worst:.1e} (≤ 1e-8)"));
    r.finish();
}

#[test]
fn criterion_09_bh() {
    let mut r = Report::new(9, "Benjamini-Hochberg correctness");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..300);
        let signal = rng.random_range(0.0..0.5);
        let p: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let v = if rng.random_bool(signal) { 0.01 * u.powi(4) } else { u };
                if case % 4 == 0 { (v * 100.0).round() / 100.0 } else { v }
            })
            .collect();
        let alpha = [0.01, 0.05, 0.1, 0.25][case % 4];
        // Counting form of the step-up rule.
        let j_hat = (1..=n)
            .filter(|&j| p.iter().filter(|&&v| v <= j as f64 * alpha / n as f64).count() >= j)
            .max()
            .unwrap_or(0);
        let expect: Vec<bool> = p.iter().map(|&v| j_hat > 0 && v <= j_hat as f64 * alpha / n as f64).collect();
        let got = bh_reject(&p, alpha).unwrap();
        let q = bh_adjust(&p).unwrap();
        let by_q: Vec<bool> = q.iter().map(|&v| v <= alpha).collect();
        if got.rejected != expect || got.j_hat != j_hat || by_q != expect {
            mismatches += 1;
        }
    }
    r.check(mismatches == 0, format!("{mismatches} of 1000 vectors differ from brute force"));

    let (n, reps) = (10_000, 200);
    let null = vec![true; n];
    for alpha in [0.05, 0.1] {
        let fdp: Vec<f64> = (0..reps)
            .map(|_| {
                let p: Vec<f64> = (0..n).map(|_| rng.random()).collect();
                error_metrics(&bh_reject(&p, alpha).unwrap(), &null).unwrap().fdp
            })
            .collect();
        let mean = fdp.iter().sum::<f64>() / reps as f64;
        let sd = (fdp.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let bound = alpha + 2.0 * sd / (reps as f64).sqrt();
        r.check(mean <= bound, format!("α={alpha}: null FDR {mean:.4} (≤ {bound:.4})"));
    }
    r.finish();
}

#[test]
fn criterion_10_design_checks() {
    let mut r = Report::new(10, "orthogonality of the side information");
    let mut worst = 0.0f64;
    for k1 in 1..=12usize {
        for k2 in 1..=12usize {
            if k1 + k2 <= 3 {
                continue;
            }
            let d = Design::two_group(k1, k2).unwrap();
            let theta = Contrast::new(vec![1.0, -1.0], &d).unwrap();
            let rep = check_orthogonality(&d, &theta, &intensity_contrast(&d), ORTHOGONALITY_TOL).unwrap();
            worst = worst.max(rep.value.abs());
            let k = k1 + k2;
            let x = DMatrix::from_fn(k, 3, |i, j| match j {
                0 => 1.0,
                1 => f64::from(u8::from(i >= k1)),
                _ => (i as f64 * 1.3).sin() + 0.1 * i as f64,
            });
            let d = Design::new(x).unwrap();
            let theta = Contrast::new(vec![0.0, 1.0, 0.0], &d).unwrap();
            let rep = check_orthogonality(&d, &theta, &intensity_contrast(&d), ORTHOGONALITY_TOL).unwrap();
            worst = worst.max(rep.value.abs());
        }
    }
    r.check(worst <= 1e-12, format!("examples 1 and 2: max |value| {worst:.1e} (≤ 1e-12)"));
    let d = Design::two_group(2, 10).unwrap();
    let theta = Contrast::new(vec![1.0, -1.0], &d).unwrap();
    let rep = check_orthogonality(&d, &theta, &manorm_contrast(&d).unwrap(), ORTHOGONALITY_TOL).unwrap();
    r.check((rep.value - 0.2).abs() <= 1e-12 && !rep.ok, format!("MAnorm2 side at 2 vs 10: value {}", rep.value));
    r.finish();
}

fn cli(args: &[&str], threads: usize) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ebtrend"))
        .env_remove("EBTREND_THREADS")
        .args(args)
        .args(["--threads", &threads.to_string()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Every file in `dir` with its bytes, sorted by name.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_11_determinism() {
    let mut r = Report::new(11, "outputs are byte-identical across reruns and thread counts");
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let cfg = SimConfig { n: 3000, n0: 2700, ..SimConfig::preset("setting1").unwrap() };
    let ds = gen_setting(&cfg, 31).unwrap();
    let k = cfg.k();
    let mut matrix = String::from("unit\ta0\ta1\ta2\tb0\tb1\tb2\n");
    for (u, row) in ds.y.chunks(k).enumerate() {
        matrix.push_str(&format!("u{u}"));
        for v in row {
            matrix.push_str(&format!("\t{v}"));
        }
        matrix.push('\n');
    }
    fs::write(root.join("matrix.tsv"), matrix).unwrap();
    fs::write(root.join("design.csv"), "sample,A,B\na0,1,0\na1,1,0\na2,1,0\nb0,0,1\nb1,0,1\nb2,0,1\n").unwrap();
    let m = root.join("matrix.tsv");
    let d = root.join("design.csv");
    let (m, d) = (m.to_str().unwrap(), d.to_str().unwrap());

    let mut runs: Vec<(usize, Vec<(String, Vec<u8>)>)> = Vec::new();
    for (i, threads) in [1usize, 4, 1, 3].into_iter().enumerate() {
        let out = root.join(format!("run{i}"));
        let o = |sub: &str| out.join(sub).to_str().unwrap().to_string();
        let sim = o("sim");
        cli(&["simulate", "--preset", "setting3", "--n", "1500", "--reps", "4", "--seed", "5", "--per-rep", "--out", &sim], threads);
        let ana = o("analyze");
        cli(&["analyze", "--matrix", m, "--design", d, "--contrast", "diff=1,-1", "--out", &ana], threads);
        let dia = o("diagnose");
        cli(&["diagnose", "--matrix", m, "--design", d, "--contrast", "diff=1,-1", "--out", &dia], threads);
        let stdout = cli(&["analyze", "--matrix", m, "--design", d, "--contrast", "diff=1,-1", "--methods", "reg_npmle,joint_npmle"], threads).stdout;
        let mut snap = Vec::new();
        for sub in ["sim", "analyze", "diagnose"] {
            for (name, bytes) in snapshot(&out.join(sub)) {
                snap.push((format!("{sub}/{name}"), bytes));
            }
        }
        snap.push(("analyze stdout".into(), stdout));
        runs.push((threads, snap));
    }
    let (_, first) = &runs[0];
    r.check(first.len() >= 5, format!("{} outputs compared per run", first.len()));
    for (threads, snap) in &runs[1..] {
        let names: Vec<&str> = snap.iter().map(|f| f.0.as_str()).collect();
        let same_names = names == first.iter().map(|f| f.0.as_str()).collect::<Vec<_>>();
        let differing: Vec<&str> = first
            .iter()
            .zip(snap)
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0.as_str())
            .collect();
        r.check(
            same_names && differing.is_empty(),
            format!("{threads} threads vs 1: {}", if differing.is_empty() { "identical".to_string() } else { differing.join(", ") }),
        );
    }
    r.finish();
}
