//! The `ebtrend` command line.
//!
//! Exit codes: 0 success, 2 parse or configuration error, 3 design check
//! failure, 4 method not applicable, 5 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::diagnostics::{histogram, invchisq_marginal, joint_marginal, npmle_marginal, trend_curve};
use crate::error::{Error, Result};
use crate::io::{fmt_float, parse_contrast, read_design, read_matrix, write_output, ExpressionMatrix};
use crate::linmodel::{fit_units, Contrast, Design, SideSpec};
use crate::pipeline::{
    analyze_matrix, applicable_methods, not_applicable, side_orthogonality, Analysis, AnalysisOptions, SideKind,
};
use crate::priorfit::{InvChisqPrior, NpmleSolver};
use crate::pvalues::MethodId;
use crate::sim::{monte_carlo, SimConfig, SimMethod};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DESIGN: i32 = 3;
pub const EXIT_NOT_APPLICABLE: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } | Error::Config(_) | Error::Input(_) | Error::Io(_) => EXIT_CONFIG,
        Error::Design(_) => EXIT_DESIGN,
        Error::NotApplicable { .. } | Error::Binning(_) => EXIT_NOT_APPLICABLE,
        Error::Numerical(_) | Error::Quadrature { .. } => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "ebtrend", version, about = "Trended empirical partially-Bayes p-values for per-unit linear models")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, env = "EBTREND_THREADS")]
    pub threads: Option<usize>,

    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute p-values and BH q-values for every unit of a matrix.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo study from a preset or JSON config.
    Simulate(SimulateArgs),
    /// Check that a contrast is uncorrelated with the side value.
    CheckDesign(CheckDesignArgs),
    /// Write trend, prior and marginal-density tables for plotting.
    Diagnose(DiagnoseArgs),
}

/// Where the side information M comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SideArg {
    Intensity,
    Column(String),
    Manorm,
}

impl FromStr for SideArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "intensity" => Ok(SideArg::Intensity),
            "manorm" => Ok(SideArg::Manorm),
            _ => match s.strip_prefix("column:") {
                Some(name) if !name.is_empty() => Ok(SideArg::Column(name.to_string())),
                _ => Err(format!("expected intensity, manorm or column:NAME, got '{s}'")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Newton,
    Squarem,
    Em,
}

impl From<SolverArg> for NpmleSolver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Newton => NpmleSolver::ActiveSetNewton,
            SolverArg::Squarem => NpmleSolver::Squarem,
            SolverArg::Em => NpmleSolver::Em,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// τ² grid points for the 1-D NPMLEs.
    #[arg(long, default_value_t = 300)]
    pub grid_size: usize,

    /// Intensity bins of the joint NPMLE grid.
    #[arg(long, default_value_t = 50)]
    pub joint_bins: usize,

    #[arg(long, value_enum, default_value_t = SolverArg::Newton)]
    pub solver: SolverArg,
}

impl FitArgs {
    fn options(&self) -> Result<AnalysisOptions> {
        if self.grid_size < 2 || self.joint_bins < 1 {
            return Err(Error::Config("--grid-size must be ≥ 2 and --joint-bins ≥ 1".into()));
        }
        let mut opts = AnalysisOptions::default();
        opts.prior.grid_size = self.grid_size;
        opts.prior.joint_bins = self.joint_bins;
        opts.prior.npmle.solver = self.solver.into();
        Ok(opts)
    }
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Units × samples table; header holds sample IDs, first column unit IDs.
    #[arg(long)]
    pub matrix: PathBuf,

    /// Samples × covariates table.
    #[arg(long)]
    pub design: PathBuf,

    /// Contrast of interest as NAME=w1,w2,… (one weight per design column).
    #[arg(long)]
    pub contrast: String,

    /// Side information: intensity, manorm, or column:NAME of the matrix.
    #[arg(long, default_value = "intensity")]
    pub side: SideArg,

    /// Comma-separated methods (default: every applicable one).
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,

    /// Warn instead of failing when the side value is correlated with Z.
    #[arg(long)]
    pub allow_nonorthogonal: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub fit: FitArgs,

    /// Level at which discoveries are counted in the log.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,

    /// Accepted for uniformity; the analysis uses no randomness.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory (default: table on stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// setting1 … setting4, or a sweep-* preset.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,

    /// JSON simulation config.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub reps: Option<usize>,

    /// Number of units; the null count scales with it.
    #[arg(long)]
    pub n: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub alpha: Option<f64>,

    /// Comma-separated methods, `oracle` included (default: the full table).
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,

    #[command(flatten)]
    pub fit: FitArgs,

    /// Also write per-replicate metrics (needs --out).
    #[arg(long)]
    pub per_rep: bool,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckDesignArgs {
    #[arg(long)]
    pub design: PathBuf,

    #[arg(long)]
    pub contrast: String,

    /// intensity or manorm.
    #[arg(long, default_value = "intensity")]
    pub side: SideArg,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub fit: FitArgs,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn execute(cli: &Cli) -> Result<i32> {
    let work = || match &cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::CheckDesign(a) => cmd_check_design(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match cli.threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    }
}

fn parse_methods(names: &[String]) -> Result<Option<Vec<MethodId>>> {
    if names.is_empty() {
        return Ok(None);
    }
    names.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>().map(Some)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Parsed inputs shared by analyze and diagnose.
struct Inputs {
    matrix: ExpressionMatrix,
    design: Design,
    theta: Contrast,
    side: SideSpec,
    methods: Vec<MethodId>,
}

fn load_inputs(args: &InputArgs) -> Result<Inputs> {
    let table = read_design(&args.design)?;
    let side_column = match &args.side {
        SideArg::Column(name) => Some(name.as_str()),
        _ => None,
    };
    let mut matrix = read_matrix(&args.matrix, side_column)?;
    let design = Design::new(table.aligned_to(&matrix.sample_ids)?)?;
    let (name, weights) = parse_contrast(&args.contrast, design.p())?;
    let theta = Contrast::new(weights, &design)?;
    log::info!("contrast {name}: ν = {}", theta.nu());
    let side = match &args.side {
        SideArg::Intensity => SideSpec::AverageIntensity,
        SideArg::Manorm => SideSpec::ManormTilde,
        SideArg::Column(_) => SideSpec::External(matrix.side.take().expect("side column was read")),
    };
    let methods = match parse_methods(&args.methods)? {
        Some(m) => m,
        None => applicable_methods(&design, &side),
    };
    Ok(Inputs { matrix, design, theta, side, methods })
}

fn emit(out: Option<&Path>, name: &str, contents: &str) -> Result<()> {
    match out {
        Some(dir) => write_output(dir, name, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<i32> {
    check_alpha(args.alpha)?;
    let opts = args.fit.options()?;
    let inputs = load_inputs(&args.input)?;
    let results = analyze_matrix(
        &inputs.matrix.values,
        &inputs.design,
        &inputs.theta,
        &inputs.side,
        &inputs.methods,
        &opts,
        args.input.allow_nonorthogonal,
    )?;

    let mut s = String::from("unit_id");
    for r in &results {
        write!(s, "\tp_{}", r.method).unwrap();
    }
    for r in &results {
        write!(s, "\tq_{}", r.method).unwrap();
    }
    s.push('\n');
    for (i, id) in inputs.matrix.unit_ids.iter().enumerate() {
        s.push_str(id);
        for r in &results {
            write!(s, "\t{}", fmt_float(r.p[i])).unwrap();
        }
        for r in &results {
            write!(s, "\t{}", fmt_float(r.q[i])).unwrap();
        }
        s.push('\n');
    }
    for r in &results {
        let hits = r.q.iter().filter(|&&q| q <= args.alpha).count();
        log::info!("{}: {hits} discoveries at α = {}", r.method, args.alpha);
    }
    emit(args.out.as_deref(), "analyze.tsv", &s)?;
    Ok(EXIT_OK)
}

fn load_sim_config(args: &SimulateArgs) -> Result<SimConfig> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), None) => SimConfig::preset(name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?
        }
        _ => return Err(Error::Config("give exactly one of --preset and --config".into())),
    };
    if let Some(n) = args.n {
        cfg.n0 = ((cfg.n0 as f64) * n as f64 / cfg.n as f64).round() as usize;
        cfg.n = n;
    }
    if let Some(reps) = args.reps {
        cfg.reps = reps;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(alpha) = args.alpha {
        cfg.alpha = alpha;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let cfg = load_sim_config(args)?;
    let opts = args.fit.options()?;
    let methods = if args.methods.is_empty() {
        SimMethod::table_default()
    } else {
        let mut m = args.methods.iter().map(|s| s.parse()).collect::<Result<Vec<SimMethod>>>()?;
        m.sort();
        m.dedup();
        m
    };
    if args.per_rep && args.out.is_none() {
        return Err(Error::Config("--per-rep needs --out".into()));
    }
    let summary = monte_carlo(&cfg, &methods, &opts)?;
    emit(args.out.as_deref(), "summary.tsv", &summary.to_tsv())?;
    if args.per_rep {
        emit(args.out.as_deref(), "replicates.tsv", &summary.replicates_tsv())?;
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct DesignReport {
    ones_in_colspace: bool,
    #[serde(rename = "c_theta_gram_c_A")]
    c_theta_gram_c_a: f64,
    ok: bool,
}

fn cmd_check_design(args: &CheckDesignArgs) -> Result<i32> {
    let side = match args.side {
        SideArg::Intensity => SideSpec::AverageIntensity,
        SideArg::Manorm => SideSpec::ManormTilde,
        SideArg::Column(_) => {
            return Err(Error::Config("an external side column has no design contrast to check".into()))
        }
    };
    let table = read_design(&args.design)?;
    let design = Design::new(table.x.clone())?;
    let (_, weights) = parse_contrast(&args.contrast, design.p())?;
    let theta = Contrast::new(weights, &design)?;
    let report = side_orthogonality(&design, &theta, &side)?.expect("side is linear in the data");
    let out = DesignReport {
        ones_in_colspace: report.ones_in_colspace,
        c_theta_gram_c_a: report.value,
        ok: report.ok && report.ones_in_colspace,
    };
    let json = serde_json::to_string_pretty(&out).map_err(|e| Error::Numerical(e.to_string()))? + "\n";
    emit(args.out.as_deref(), "check_design.json", &json)?;
    Ok(if out.ok { EXIT_OK } else { EXIT_DESIGN })
}

const TREND_POINTS: usize = 200;
const MARGINAL_POINTS: usize = 400;
const HISTOGRAM_BINS: usize = 50;

fn curve_tsv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("x\tdensity\n");
    for (x, f) in curve {
        writeln!(s, "{}\t{}", fmt_float(*x), fmt_float(*f)).unwrap();
    }
    s
}

fn histogram_tsv(values: &[f64]) -> String {
    let n = values.len() as f64;
    let mut s = String::from("lo\thi\tcount\tdensity\n");
    for b in histogram(values, HISTOGRAM_BINS) {
        let width = b.hi - b.lo;
        let density = if width > 0.0 { b.count as f64 / (n * width) } else { f64::NAN };
        writeln!(s, "{}\t{}\t{}\t{}", fmt_float(b.lo), fmt_float(b.hi), b.count, fmt_float(density)).unwrap();
    }
    s
}

#[derive(Serialize)]
struct InvChisqJson {
    /// `null` when infinite.
    kappa0: Option<f64>,
    s0_sq: f64,
}

fn invchisq_json(prior: &InvChisqPrior) -> Result<String> {
    let j = InvChisqJson {
        kappa0: prior.kappa0.is_finite().then_some(prior.kappa0),
        s0_sq: prior.s0_sq,
    };
    Ok(serde_json::to_string_pretty(&j).map_err(|e| Error::Numerical(e.to_string()))? + "\n")
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<i32> {
    let opts = args.fit.options()?;
    let inputs = load_inputs(&args.input)?;
    if let Some(e) = inputs.methods.iter().find_map(|&m| not_applicable(m, &inputs.design, &inputs.side)) {
        return Err(e);
    }
    let units = fit_units(&inputs.matrix.values, &inputs.design, &inputs.theta, &inputs.side)?;
    let analysis = Analysis::new(&units, SideKind::of(&inputs.side), None, opts);
    let out = args.out.as_path();
    let df = units.df() as f64;
    let s2: Vec<f64> = units.units.iter().map(|u| u.s2).collect();

    let trend = analysis.trend()?;
    let (lo, hi) = units
        .units
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), u| (lo.min(u.m), hi.max(u.m)));
    let mut s = String::from("m\tm_hat\txi2_hat\n");
    for p in trend_curve(trend, lo, hi, TREND_POINTS) {
        writeln!(s, "{}\t{}\t{}", fmt_float(p.m), fmt_float(p.m_hat), fmt_float(p.xi2)).unwrap();
    }
    write_output(out, "trend.tsv", &s)?;

    let scaled: Vec<f64> = units.units.iter().map(|u| u.s2 / trend.xi2(u.m)).collect();
    let mut methods = inputs.methods.clone();
    methods.sort();
    methods.dedup();
    for method in methods {
        let name = method.name();
        let (curve, observed) = match method {
            MethodId::UntrendedInvChisq | MethodId::RegInvChisq => {
                let (prior, observed) = if method == MethodId::RegInvChisq {
                    (analysis.trended_invchisq()?, &scaled)
                } else {
                    (analysis.untrended_invchisq()?, &s2)
                };
                write_output(out, &format!("prior_{name}.json"), &invchisq_json(prior)?)?;
                (invchisq_marginal(prior, df, MARGINAL_POINTS)?, observed)
            }
            MethodId::UntrendedNpmle | MethodId::RegNpmle => {
                let (prior, observed) = if method == MethodId::RegNpmle {
                    (analysis.reg_npmle()?, &scaled)
                } else {
                    (analysis.untrended_npmle()?, &s2)
                };
                let mut p = String::from("tau2\tweight\n");
                for (t, w) in prior.support().iter().zip(prior.weights()) {
                    writeln!(p, "{}\t{}", fmt_float(*t), fmt_float(*w)).unwrap();
                }
                write_output(out, &format!("prior_{name}.tsv"), &p)?;
                (npmle_marginal(prior, df, MARGINAL_POINTS)?, observed)
            }
            MethodId::JointNpmle => {
                let prior = &analysis.joint()?.prior;
                let mut p = String::from("mu\tsigma2\tweight\n");
                for ((mu, v), w) in prior.atoms().iter().zip(prior.weights()) {
                    writeln!(p, "{}\t{}\t{}", fmt_float(*mu), fmt_float(*v), fmt_float(*w)).unwrap();
                }
                write_output(out, &format!("prior_{name}.tsv"), &p)?;
                (joint_marginal(prior, df, MARGINAL_POINTS)?, &s2)
            }
            MethodId::DiscreteJoint => {
                let set = analysis.discrete()?;
                let mut p = String::from("bin\ttau2\tweight\n");
                for (b, prior) in set.priors().iter().enumerate() {
                    for (t, w) in prior.support().iter().zip(prior.weights()) {
                        writeln!(p, "{b}\t{}\t{}", fmt_float(*t), fmt_float(*w)).unwrap();
                    }
                }
                write_output(out, &format!("prior_{name}.tsv"), &p)?;
                continue;
            }
            MethodId::TTest | MethodId::Map | MethodId::Manorm2 => {
                log::info!("{name} has no fitted prior; nothing to write");
                continue;
            }
        };
        write_output(out, &format!("marginal_{name}.tsv"), &curve_tsv(&curve))?;
        write_output(out, &format!("histogram_{name}.tsv"), &histogram_tsv(observed))?;
    }
    Ok(EXIT_OK)
}
