use ebtrend::linmodel::{fit_units, Contrast, Design, SideSpec};
use ebtrend::sim::{gen_setting, rep_seed, SimConfig};

const PRESETS: [&str; 5] = ["setting1", "setting2", "setting3", "setting4", "sweep-invchisq-trend-k10"];

#[test]
fn exactly_n0_null_units_with_zero_effect() {
    for name in PRESETS {
        let cfg = SimConfig { n: 3000, n0: 2700, ..SimConfig::preset(name).unwrap() };
        for rep in 0..3 {
            let ds = gen_setting(&cfg, rep_seed(cfg.seed, rep)).unwrap();
            assert_eq!(ds.n(), cfg.n);
            assert_eq!(ds.y.len(), cfg.n * cfg.k());
            let nulls: Vec<_> = ds.truth.iter().filter(|t| t.is_null).collect();
            assert_eq!(nulls.len(), cfg.n0, "{name}");
            assert!(nulls.iter().all(|t| t.theta == 0.0), "{name}");
            assert!(ds.truth.iter().filter(|t| !t.is_null).all(|t| t.theta != 0.0), "{name}");
            assert_eq!(ds.null_mask().iter().filter(|&&b| b).count(), cfg.n0);
        }
    }
}

#[test]
fn same_seed_reproduces_the_dataset() {
    let cfg = SimConfig { n: 500, n0: 450, ..SimConfig::preset("setting3").unwrap() };
    let a = gen_setting(&cfg, 11).unwrap();
    let b = gen_setting(&cfg, 11).unwrap();
    let c = gen_setting(&cfg, 12).unwrap();
    assert_eq!(a.y, b.y);
    assert_ne!(a.y, c.y);
}

/// Mean S² across units against the mean generating σ²; S² is unbiased for
/// each unit so the ratio is 1 up to Monte Carlo error.
#[test]
fn residual_variance_matches_sigma2() {
    for name in PRESETS {
        let cfg = SimConfig { n: 20_000, n0: 18_000, ..SimConfig::preset(name).unwrap() };
        let ds = gen_setting(&cfg, 5).unwrap();
        let design = Design::two_group(cfg.k_a, cfg.k_b).unwrap();
        let theta = Contrast::new(vec![1.0, -1.0], &design).unwrap();
        let units = fit_units(&ds.y, &design, &theta, &SideSpec::AverageIntensity).unwrap();
        let df = units.df() as f64;
        // Per unit S²/σ² ~ χ²_df/df: mean 1, variance 2/df.
        let ratios: Vec<f64> = units.units.iter().zip(&ds.truth).map(|(u, t)| u.s2 / t.sigma2).collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let se = (2.0 / df / ratios.len() as f64).sqrt();
        assert!((mean - 1.0).abs() <= 4.0 * se, "{name}: mean S²/σ² = {mean}, se {se}");

        // The contrast estimate of a null unit is N(0, ν²σ²).
        let nu2 = 1.0 / cfg.k_a as f64 + 1.0 / cfg.k_b as f64;
        let z2: Vec<f64> = units
            .units
            .iter()
            .zip(&ds.truth)
            .filter(|(_, t)| t.is_null)
            .map(|(u, t)| u.z * u.z / (nu2 * t.sigma2))
            .collect();
        let mean_z2 = z2.iter().sum::<f64>() / z2.len() as f64;
        let se_z2 = (2.0 / z2.len() as f64).sqrt();
        assert!((mean_z2 - 1.0).abs() <= 4.0 * se_z2, "{name}: mean Z²/(ν²σ²) = {mean_z2}");
    }
}
