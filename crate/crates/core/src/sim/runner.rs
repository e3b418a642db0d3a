use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{fit_units, Contrast, Design, SideSpec};
use crate::multiplicity::{bh_reject, error_metrics, ErrorMetrics};
use crate::pipeline::{Analysis, AnalysisOptions, GroupData, SideKind};
use crate::pvalues::{group_stats, MethodId};

use super::{gen_setting, rep_seed, OracleModel, SimConfig, SimDataset, SimSide};

/// A method in a simulation: any production method or the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SimMethod {
    Oracle,
    Method(MethodId),
}

impl SimMethod {
    /// The table columns in order: oracle first, then every method except
    /// the discrete-side one.
    pub fn table_default() -> Vec<SimMethod> {
        std::iter::once(SimMethod::Oracle)
            .chain(
                MethodId::ALL
                    .into_iter()
                    .filter(|m| *m != MethodId::DiscreteJoint)
                    .map(SimMethod::Method),
            )
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            SimMethod::Oracle => "oracle",
            SimMethod::Method(m) => m.name(),
        }
    }
}

impl fmt::Display for SimMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("oracle") {
            Ok(SimMethod::Oracle)
        } else {
            s.parse().map(SimMethod::Method)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MethodOutcome {
    Metrics(ErrorMetrics),
    /// Not defined for this configuration.
    Skipped(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepResult {
    pub rep: usize,
    pub outcomes: Vec<(SimMethod, MethodOutcome)>,
}

fn applicable(method: SimMethod, cfg: &SimConfig) -> std::result::Result<(), String> {
    match (method, cfg.side_mode) {
        (SimMethod::Method(MethodId::JointNpmle), SimSide::ExternalMu) => {
            Err("joint prior needs the average intensity".into())
        }
        (SimMethod::Method(MethodId::Manorm2), SimSide::ExternalMu) => Err("uses its own side value".into()),
        (SimMethod::Method(MethodId::Manorm2), _) if cfg.k_a < 2 || cfg.k_b < 2 => {
            Err("needs two samples per group".into())
        }
        _ => Ok(()),
    }
}

/// Runs each method on one dataset and scores BH rejections against the
/// truth. Failures of one method do not stop the others.
pub fn run_methods(ds: &SimDataset, cfg: &SimConfig, methods: &[SimMethod], opts: &AnalysisOptions) -> Result<Vec<(SimMethod, MethodOutcome)>> {
    let design = Design::two_group(ds.k_a, ds.k_b)?;
    let contrast = Contrast::new(vec![1.0, -1.0], &design)?;
    let (side, kind) = match cfg.side_mode {
        SimSide::AverageIntensity => (SideSpec::AverageIntensity, SideKind::AverageIntensity),
        SimSide::ExternalMu => (SideSpec::External(ds.truth.iter().map(|t| t.mu).collect()), SideKind::External),
    };
    let units = fit_units(&ds.y, &design, &contrast, &side)?;
    let groups = if ds.k_a >= 2 && ds.k_b >= 2 {
        let (stats, k_a, k_b) = group_stats(&ds.y, &design)?;
        Some(GroupData { stats, k_a, k_b })
    } else {
        None
    };
    let analysis = Analysis::new(&units, kind, groups.as_ref(), opts.clone());
    let null = ds.null_mask();
    let oracle = OracleModel::new(cfg, units.nu);

    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        if let Err(reason) = applicable(method, cfg) {
            out.push((method, MethodOutcome::Skipped(reason)));
            continue;
        }
        let p = match method {
            SimMethod::Oracle => units
                .units
                .par_iter()
                .zip(&ds.truth)
                .map(|(u, t)| oracle.p_value(u, t.mu))
                .collect::<Result<Vec<f64>>>(),
            SimMethod::Method(m) => analysis.p_values(m).map(|v| v.p),
        };
        let outcome = p
            .and_then(|p| bh_reject(&p, cfg.alpha))
            .and_then(|bh| error_metrics(&bh, &null));
        out.push((
            method,
            match outcome {
                Ok(m) => MethodOutcome::Metrics(m),
                Err(e) => {
                    log::warn!("{method} failed: {e}");
                    MethodOutcome::Failed(e.to_string())
                }
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub method: String,
    pub fdr: f64,
    pub fdr_se: f64,
    pub power: f64,
    pub power_se: f64,
    /// Replicates that produced metrics.
    pub reps: usize,
    pub failed: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSummary {
    pub rows: Vec<McRow>,
    pub replicates: Vec<RepResult>,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Runs `cfg.reps` replicates concurrently and averages FDP and power per
/// method. Replicate r uses seed `rep_seed(cfg.seed, r)`.
pub fn monte_carlo(cfg: &SimConfig, methods: &[SimMethod], opts: &AnalysisOptions) -> Result<McSummary> {
    cfg.validate()?;
    let replicates = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let ds = gen_setting(cfg, rep_seed(cfg.seed, rep))?;
            let outcomes = run_methods(&ds, cfg, methods, opts)?;
            log::info!("replicate {rep} done");
            Ok(RepResult { rep, outcomes })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = methods
        .iter()
        .enumerate()
        .map(|(j, &method)| {
            let mut fdp = Vec::new();
            let mut power = Vec::new();
            let mut failed = 0;
            let mut skipped = false;
            for r in &replicates {
                match &r.outcomes[j].1 {
                    MethodOutcome::Metrics(m) => {
                        fdp.push(m.fdp);
                        power.push(m.power);
                    }
                    MethodOutcome::Skipped(_) => skipped = true,
                    MethodOutcome::Failed(_) => failed += 1,
                }
            }
            let (fdr, fdr_se) = mean_se(&fdp);
            let (pw, power_se) = mean_se(&power);
            McRow {
                method: method.to_string(),
                fdr,
                fdr_se,
                power: pw,
                power_se,
                reps: fdp.len(),
                failed,
                skipped,
            }
        })
        .collect();
    Ok(McSummary { rows, replicates })
}

impl McSummary {
    pub fn row(&self, method: SimMethod) -> Option<&McRow> {
        self.rows.iter().find(|r| r.method == method.name())
    }

    /// Summary table: method, fdr, fdr_se, power, power_se. Skipped methods
    /// print `NA`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("method\tfdr\tfdr_se\tpower\tpower_se\n");
        for r in &self.rows {
            if r.reps == 0 {
                s.push_str(&format!("{}\tNA\tNA\tNA\tNA\n", r.method));
            } else {
                s.push_str(&format!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                    r.method, r.fdr, r.fdr_se, r.power, r.power_se
                ));
            }
        }
        s
    }

    /// Per-replicate metrics: rep, method, status, v, r, fdp, power.
    pub fn replicates_tsv(&self) -> String {
        let mut s = String::from("rep\tmethod\tstatus\tv\tr\tfdp\tpower\n");
        for rep in &self.replicates {
            for (method, outcome) in &rep.outcomes {
                match outcome {
                    MethodOutcome::Metrics(m) => s.push_str(&format!(
                        "{}\t{}\tok\t{}\t{}\t{:.6}\t{:.6}\n",
                        rep.rep, method, m.v, m.r, m.fdp, m.power
                    )),
                    MethodOutcome::Skipped(_) => s.push_str(&format!("{}\t{}\tskipped\tNA\tNA\tNA\tNA\n", rep.rep, method)),
                    MethodOutcome::Failed(_) => s.push_str(&format!("{}\t{}\tfailed\tNA\tNA\tNA\tNA\n", rep.rep, method)),
                }
            }
        }
        s
    }
}
