//! Seeded two-group simulations and a Monte Carlo runner for FDR and power.

mod oracle;
mod runner;

pub use oracle::OracleModel;
pub use runner::{monte_carlo, run_methods, McRow, McSummary, MethodOutcome, RepResult, SimMethod};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distribution G of the residual scale τ².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PriorG {
    Dirac { v: f64 },
    /// τ² = df·scale/X with X ~ χ²_df.
    ScaledInvchisq { df: f64, scale: f64 },
    /// τ² = v1 with probability w, else v2.
    TwoPoint { v1: f64, v2: f64, w: f64 },
}

impl PriorG {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            PriorG::Dirac { v } => v > 0.0 && v.is_finite(),
            PriorG::ScaledInvchisq { df, scale } => df > 0.0 && scale > 0.0 && df.is_finite() && scale.is_finite(),
            PriorG::TwoPoint { v1, v2, w } => v1 > 0.0 && v2 > 0.0 && v1.is_finite() && v2.is_finite() && (0.0..=1.0).contains(&w),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid prior_g {self:?}")))
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            PriorG::Dirac { v } => v,
            PriorG::ScaledInvchisq { df, scale } => {
                let x: f64 = ChiSquared::new(df).expect("validated").sample(rng);
                df * scale / x
            }
            PriorG::TwoPoint { v1, v2, w } => {
                if rng.random::<f64>() < w {
                    v1
                } else {
                    v2
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            PriorG::Dirac { v } => v,
            PriorG::ScaledInvchisq { df, scale } => {
                if df > 2.0 {
                    df * scale / (df - 2.0)
                } else {
                    f64::INFINITY
                }
            }
            PriorG::TwoPoint { v1, v2, w } => w * v1 + (1.0 - w) * v2,
        }
    }
}

/// Log-variance trend m(μ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrendM {
    Constant { c: f64 },
    /// amplitude · logistic((μ − center)/width) + offset.
    Logistic { amplitude: f64, center: f64, width: f64, offset: f64 },
}

impl TrendM {
    pub fn eval(&self, mu: f64) -> f64 {
        match *self {
            TrendM::Constant { c } => c,
            TrendM::Logistic {
                amplitude,
                center,
                width,
                offset,
            } => amplitude / (1.0 + (-(mu - center) / width).exp()) + offset,
        }
    }

    /// Lower and upper bounds of m over the real line.
    pub fn range(&self) -> (f64, f64) {
        match *self {
            TrendM::Constant { c } => (c, c),
            TrendM::Logistic { amplitude, offset, .. } => (offset + amplitude.min(0.0), offset + amplitude.max(0.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuDist {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimSide {
    AverageIntensity,
    ExternalMu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub n0: usize,
    pub k_a: usize,
    pub k_b: usize,
    pub prior_g: PriorG,
    pub trend_m: TrendM,
    pub mu_dist: MuDist,
    /// Alternatives draw θ ~ N(0, theta_scale·σ²).
    pub theta_scale: f64,
    pub side_mode: SimSide,
    pub alpha: f64,
    pub reps: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n0 > self.n {
            return Err(Error::Config(format!("need 0 < n and n0 ≤ n, got n = {}, n0 = {}", self.n, self.n0)));
        }
        if self.k_a == 0 || self.k_b == 0 || self.k_a + self.k_b <= 2 {
            return Err(Error::Config(format!(
                "need k_a, k_b ≥ 1 and k_a + k_b > 2, got {} and {}",
                self.k_a, self.k_b
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.mu_dist.sd > 0.0 && self.mu_dist.sd.is_finite() && self.mu_dist.mean.is_finite()) {
            return Err(Error::Config("mu_dist needs a finite mean and a positive sd".into()));
        }
        if !(self.theta_scale >= 0.0 && self.theta_scale.is_finite()) {
            return Err(Error::Config("theta_scale must be finite and non-negative".into()));
        }
        if let TrendM::Logistic { width, .. } = self.trend_m {
            if !(width > 0.0) {
                return Err(Error::Config("logistic width must be positive".into()));
            }
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        self.prior_g.validate()
    }

    pub fn k(&self) -> usize {
        self.k_a + self.k_b
    }

    /// Named presets: `setting1` … `setting4`, and the balanced sweep
    /// `sweep-{dirac|invchisq|twopoint}-{flat|trend}-k{4|6|10|18}`.
    pub fn preset(name: &str) -> Result<Self> {
        let two_point = PriorG::TwoPoint { v1: 1.0, v2: 10.0, w: 0.5 };
        let inv = PriorG::ScaledInvchisq { df: 10.0, scale: 1.0 };
        let flat = TrendM::Constant { c: 0.0 };
        let slow = TrendM::Logistic {
            amplitude: -4.0,
            center: 16.0,
            width: 4.0,
            offset: 12.0,
        };
        let steep = TrendM::Logistic {
            amplitude: -6.0,
            center: 20.0,
            width: 0.15,
            offset: 0.0,
        };
        let base = SimConfig {
            n: 10_000,
            n0: 9_000,
            k_a: 3,
            k_b: 3,
            prior_g: two_point.clone(),
            trend_m: flat.clone(),
            mu_dist: MuDist { mean: 20.0, sd: 3.0 },
            theta_scale: 16.0,
            side_mode: SimSide::AverageIntensity,
            alpha: 0.05,
            reps: 100,
            seed: 1,
        };
        let narrow = MuDist { mean: 20.0, sd: 0.2 };
        match name {
            "setting1" => Ok(base),
            "setting2" => Ok(SimConfig { trend_m: slow, ..base }),
            "setting3" => Ok(SimConfig {
                k_a: 2,
                k_b: 10,
                prior_g: inv,
                trend_m: steep,
                mu_dist: narrow,
                ..base
            }),
            "setting4" => Ok(SimConfig {
                k_a: 3,
                k_b: 5,
                prior_g: PriorG::Dirac { v: 1.0 },
                trend_m: steep,
                mu_dist: narrow,
                side_mode: SimSide::ExternalMu,
                ..base
            }),
            _ => {
                let parts: Vec<&str> = name.split('-').collect();
                let parsed = match parts.as_slice() {
                    ["sweep", g, m, k] => {
                        let g = match *g {
                            "dirac" => Some(PriorG::Dirac { v: 1.0 }),
                            "invchisq" => Some(inv),
                            "twopoint" => Some(two_point),
                            _ => None,
                        };
                        let m = match *m {
                            "flat" => Some(flat),
                            "trend" => Some(slow),
                            _ => None,
                        };
                        let k = match *k {
                            "k4" => Some(2),
                            "k6" => Some(3),
                            "k10" => Some(5),
                            "k18" => Some(9),
                            _ => None,
                        };
                        g.zip(m).zip(k).map(|((g, m), half)| SimConfig {
                            k_a: half,
                            k_b: half,
                            prior_g: g,
                            trend_m: m,
                            ..base
                        })
                    }
                    _ => None,
                };
                parsed.ok_or_else(|| Error::Config(format!("unknown preset '{name}'")))
            }
        }
    }
}

/// Latent truth for one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitTruth {
    pub theta: f64,
    pub mu: f64,
    pub tau2: f64,
    pub sigma2: f64,
    pub is_null: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    /// Row-major n × K responses; the first k_a columns are group A.
    pub y: Vec<f64>,
    pub truth: Vec<UnitTruth>,
    pub k_a: usize,
    pub k_b: usize,
}

impl SimDataset {
    pub fn n(&self) -> usize {
        self.truth.len()
    }

    pub fn null_mask(&self) -> Vec<bool> {
        self.truth.iter().map(|t| t.is_null).collect()
    }
}

/// SplitMix64 finalizer, used to derive replicate seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of replicate `rep`.
pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    splitmix64(seed ^ splitmix64(rep as u64))
}

/// Draws one dataset. Unit i uses its own ChaCha stream, so the result does
/// not depend on the thread count. The first n0 units are null. Group means
/// are μ + θK_B/K and μ − θK_A/K, so θ is the A − B difference and μ the
/// grand mean.
pub fn gen_setting(cfg: &SimConfig, rep_seed: u64) -> Result<SimDataset> {
    use rayon::prelude::*;
    cfg.validate()?;
    let k = cfg.k();
    let kf = k as f64;
    let mu_dist = Normal::new(cfg.mu_dist.mean, cfg.mu_dist.sd).map_err(|e| Error::Config(e.to_string()))?;
    let rows: Vec<(Vec<f64>, UnitTruth)> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
            rng.set_stream(i as u64);
            let mu = mu_dist.sample(&mut rng);
            let tau2 = cfg.prior_g.sample(&mut rng);
            let sigma2 = cfg.trend_m.eval(mu).exp() * tau2;
            let is_null = i < cfg.n0;
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            let theta = if is_null { 0.0 } else { z * (cfg.theta_scale * sigma2).sqrt() };
            let mean_a = mu + theta * cfg.k_b as f64 / kf;
            let mean_b = mu - theta * cfg.k_a as f64 / kf;
            let sigma = sigma2.sqrt();
            let y: Vec<f64> = (0..k)
                .map(|j| {
                    let e: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    (if j < cfg.k_a { mean_a } else { mean_b }) + sigma * e
                })
                .collect();
            (y, UnitTruth { theta, mu, tau2, sigma2, is_null })
        })
        .collect();
    let mut y = Vec::with_capacity(cfg.n * k);
    let mut truth = Vec::with_capacity(cfg.n);
    for (row, t) in rows {
        y.extend(row);
        truth.push(t);
    }
    Ok(SimDataset {
        y,
        truth,
        k_a: cfg.k_a,
        k_b: cfg.k_b,
    })
}
