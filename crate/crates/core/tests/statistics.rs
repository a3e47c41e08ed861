//! Statistical checks against independent oracles: closed-form Gaussian
//! laws, brute-force Monte Carlo and the Black-Scholes call price.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use smcprice_core::diffusion::simulate_path;
use smcprice_core::experiments::mean_sd;
use smcprice_core::rng::{stream, StreamRng};
use smcprice_core::scenario::{PilotCache, RunConfig};
use smcprice_core::smc::{Smc, SmcConfig, SmcModel};
use smcprice_core::{price, Result};

fn config(text: &str) -> RunConfig {
    RunConfig::from_toml(text).unwrap()
}

#[test]
fn terminal_log_price_has_gaussian_spread() {
    let c = config(
        "[model]\nvolatility = 0.08\n[product]\ntype = \"barrier\"\nmonitoring_days = [540]",
    );
    let d = c.diffusion().unwrap();
    let m = 100_000;
    let finals: Vec<f64> = (0..m)
        .map(|i| simulate_path(&d, &mut stream(3, i)).unwrap()[540].logprices[0])
        .collect();
    let (mean, sd) = mean_sd(&finals);
    let t: f64 = 540.0 / 360.0;
    let want_sd = 0.08 * t.sqrt();
    assert!((sd - 0.09798).abs() < 0.001, "sd {sd}");
    assert!((sd - want_sd).abs() < 0.001);
    let want_mean = 100f64.ln() - 0.5 * 0.0064 * t;
    assert!((mean - want_mean).abs() < 4.0 * want_sd / (m as f64).sqrt());
}

#[test]
fn independent_assets_are_uncorrelated() {
    let c = config(
        "[model]\ndimension = 2\nvolatility = 0.08\n[product]\ntype = \"barrier\"\nmonitoring_days = [90]",
    );
    let d = c.diffusion().unwrap();
    let pairs: Vec<(f64, f64)> = (0..10_000)
        .map(|i| {
            let p = simulate_path(&d, &mut stream(2024, i)).unwrap();
            let s = &p[90].logprices;
            (s[0], s[1])
        })
        .collect();
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (mx, sx) = mean_sd(&xs);
    let (my, sy) = mean_sd(&ys);
    let cov = pairs.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / 9_999.0;
    let rho = cov / (sx * sy);
    assert!(rho.abs() < 0.02, "rho {rho}");
}

/// One Gaussian step weighted by the indicator of `z > a`.
struct HalfLine {
    a: f64,
}

impl SmcModel for HalfLine {
    type State = f64;

    fn horizon(&self) -> usize {
        1
    }

    fn initial_state(&self) -> f64 {
        0.0
    }

    fn advance(&self, _step: usize, state: &mut f64, rng: &mut StreamRng) -> Result<f64> {
        *state = rng.sample(StandardNormal);
        Ok(if *state > self.a {
            0.0
        } else {
            f64::NEG_INFINITY
        })
    }
}

#[test]
fn normalizing_constant_estimates_half_line_mass() {
    let model = HalfLine { a: 0.5 };
    let p = 1.0 - Normal::standard().cdf(0.5);
    let runs: Vec<f64> = (0..200)
        .map(|r| {
            let out = Smc::new(&model, SmcConfig::adaptive(10_000, r))
                .run()
                .unwrap();
            out.system.c_hat()
        })
        .collect();
    let (mean, sd) = mean_sd(&runs);
    let se = sd / (runs.len() as f64).sqrt();
    assert!((mean - p).abs() <= 4.0 * se, "mean {mean} vs {p} (se {se})");
}

#[test]
fn monitored_survival_matches_plain_frequency() {
    let c = config(
        "[model]\ndimension = 2\nvolatility = 0.1\n[product]\ntype = \"barrier\"\n\
         monitoring_days = [60, 120, 180]\nlower = 92\nupper = 108\n[smc]\nparticles = 5000",
    );
    let d = c.diffusion().unwrap();
    let smcprice_core::Product::Barrier(opt) = c.product().unwrap() else {
        unreachable!()
    };
    let m = 200_000u64;
    let alive = (0..m)
        .filter(|&i| {
            let p = simulate_path(&d, &mut stream(17, i)).unwrap();
            opt.monitoring
                .iter()
                .enumerate()
                .all(|(k, &t)| opt.inside(k, &p[t].logprices))
        })
        .count() as f64;
    let freq = alive / m as f64;
    let freq_se = (freq * (1.0 - freq) / m as f64).sqrt();

    let cache = PilotCache::default();
    let req = c.request_for("smc_monitor", &cache).unwrap();
    let runs: Vec<f64> = (0..30)
        .map(|r| {
            let res = price(&req.clone().with_seed(r)).unwrap();
            res.log_c_hat.exp()
        })
        .collect();
    let (mean, sd) = mean_sd(&runs);
    let se = (sd * sd / runs.len() as f64 + freq_se * freq_se).sqrt();
    assert!(
        (mean - freq).abs() <= 4.0 * se,
        "smc {mean} vs plain {freq} (se {se})"
    );
}

fn black_scholes_call(s: f64, k: f64, sigma: f64, t: f64) -> f64 {
    let n = Normal::standard();
    let v = sigma * t.sqrt();
    let d1 = ((s / k).ln() + 0.5 * v * v) / v;
    s * n.cdf(d1) - k * n.cdf(d1 - v)
}

#[test]
fn wide_barrier_call_matches_closed_form() {
    let c = config(
        "[model]\nvolatility = 0.08\n[product]\ntype = \"barrier\"\nmonitoring_days = [540]\n\
         lower = 1e-6\nupper = 1e6\n[smc]\nparticles = 100000",
    );
    let oracle = black_scholes_call(100.0, 100.0, 0.08, 1.5);
    let cache = PilotCache::default();
    for method in ["plain_mc", "smc_monitor"] {
        let req = c.request_for(method, &cache).unwrap();
        let runs: Vec<f64> = (0..10)
            .map(|r| price(&req.clone().with_seed(r)).unwrap().estimate)
            .collect();
        let (mean, sd) = mean_sd(&runs);
        let se = sd / (runs.len() as f64).sqrt();
        assert!(
            (mean - oracle).abs() <= 3.0 * se,
            "{method}: {mean} vs {oracle} (se {se})"
        );
    }
}

#[test]
fn tarn_smc_agrees_with_large_plain_run() {
    let c = config("[model]\nvolatility = 0.05\n[product]\ntype = \"tarn\"");
    let cache = PilotCache::default();
    let mut plain = c.clone();
    plain.smc.particles = 1_000_000;
    let oracle = price(&plain.request_for("plain_mc", &cache).unwrap().with_seed(99)).unwrap();
    let oracle_se = oracle.se_hint.unwrap();

    let req = c.request_for("smc_weighted:tarn_density", &cache).unwrap();
    let runs: Vec<f64> = (0..20)
        .map(|r| price(&req.clone().with_seed(r)).unwrap().estimate)
        .collect();
    let (mean, sd) = mean_sd(&runs);
    let se = (sd * sd / runs.len() as f64 + oracle_se * oracle_se).sqrt();
    assert!(
        (mean - oracle.estimate).abs() <= 4.0 * se,
        "smc {mean} vs plain {} (se {se})",
        oracle.estimate
    );
}
