//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! with the measured numbers and then asserts the same condition.
//!
//! Run with `cargo test --release -p smcprice-core --test acceptance -- --nocapture`.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use smcprice_core::diffusion::simulate_path;
use smcprice_core::experiments::{emit_plot_data, emit_replicates, run_plan, ComparisonRow};
use smcprice_core::products::{tarn_payoff, BarrierOption};
use smcprice_core::rng::stream;
use smcprice_core::scenario::{PilotCache, RunConfig, WeightingKind};
use smcprice_core::smc::{ess, multinomial_indices};
use smcprice_core::unbiasedness::{BarrierToy, TarnToy, TestFunction, Verdict, IDENTITY_TOLERANCE};
use smcprice_core::weighting::{
    build_potentials, build_terminal_potentials, escape_split, PotentialSequence, TarnNaive,
    Weighting,
};
use smcprice_core::{Product, SmcConfig};

fn report(id: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    println!(
        "criterion {id:>2} {name}: {} {}",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
}

fn config(text: &str) -> RunConfig {
    RunConfig::from_toml(text).unwrap_or_else(|e| panic!("bad config: {e}\n{text}"))
}

fn barrier(d: usize, vol: &str, extra: &str) -> RunConfig {
    config(&format!(
        "seed = 2024\n[model]\ndimension = {d}\nvolatility = {vol}\n\
         [product]\ntype = \"barrier\"\nmonitoring_days = [540]\n{extra}"
    ))
}

fn tarn(vol: &str, extra: &str) -> RunConfig {
    config(&format!(
        "seed = 2024\n[model]\nvolatility = {vol}\n[product]\ntype = \"tarn\"\n{extra}"
    ))
}

fn row<'a>(rows: &'a [ComparisonRow], sweep: f64, method: &str) -> &'a ComparisonRow {
    rows.iter()
        .find(|r| r.sweep == sweep && r.method == method)
        .unwrap_or_else(|| panic!("no row for {method} at {sweep}"))
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Largest log-space gap between the telescoped potentials and the raw
/// path weight over `paths` simulated paths.
fn telescoping_gap(c: &RunConfig, kinds: &[WeightingKind], paths: u64) -> f64 {
    let cache = PilotCache::default();
    let diffusion = c.diffusion().unwrap();
    let product = c.product().unwrap();
    let mut worst: f64 = 0.0;
    for &kind in kinds {
        for scale in [None, Some(3.5)] {
            let mut w = c.weighting_of(kind, &cache).unwrap();
            if let Some(s) = scale {
                w = w.scaled(s);
            }
            let seq = match &product {
                Product::Barrier(opt) => build_potentials(w, opt),
                Product::Tarn(spec) => build_terminal_potentials(w, spec.last_weighted_step()),
            };
            for i in 0..paths {
                let path = simulate_path(&diffusion, &mut stream(77, i)).unwrap();
                let states: Vec<Vec<f64>> = path.into_iter().map(|p| p.logprices).collect();
                let got = seq.log_path_weight(&states);
                let raw = match (&seq, &product) {
                    (PotentialSequence::Monitored { .. }, Product::Barrier(opt)) => {
                        raw_barrier_weight(opt, &states)
                    }
                    _ => 0.0,
                };
                let gap = if got == f64::NEG_INFINITY && raw == f64::NEG_INFINITY {
                    0.0
                } else {
                    (got - raw).abs()
                };
                worst = worst.max(gap);
            }
        }
    }
    worst
}

fn raw_barrier_weight(opt: &BarrierOption, states: &[Vec<f64>]) -> f64 {
    let alive = opt
        .monitoring
        .iter()
        .enumerate()
        .all(|(i, &t)| opt.inside(i, &states[t]));
    if alive {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

#[test]
fn criterion_01_telescoping_identity() {
    let t = Instant::now();
    use WeightingKind::*;
    let monitored = barrier(2, "0.08", "");
    let mut multi = barrier(1, "0.2", "");
    multi.product = config(
        "[product]\ntype = \"barrier\"\nmonitoring_days = [10, 20, 30]\nlower = 97\nupper = 103",
    )
    .product;
    let local_barrier = barrier(1, "\"barrier_preset\"", "");
    let tarn_const = tarn("0.05", "");
    let tarn_local = tarn("\"tarn_preset\"", "fixings = 6");
    let gaps = [
        telescoping_gap(&monitored, &[Unit, Bridge, Pilot], 200),
        telescoping_gap(&multi, &[Unit, Bridge], 200),
        telescoping_gap(&local_barrier, &[Unit, Pilot], 100),
        telescoping_gap(&tarn_const, &[Unit, TarnNaive, TarnDensity, Mixture], 200),
        telescoping_gap(&tarn_local, &[TarnNaive, TarnDensity, Mixture], 100),
    ];
    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    let elapsed = t.elapsed();
    let pass = worst <= 1e-10 && elapsed < Duration::from_secs(60);
    report(
        1,
        "telescoping",
        pass,
        format!("max log gap {worst:.2e} over 2000 paths x scales, {elapsed:.1?}"),
    );
    assert!(pass);
}

fn toy_config() -> SmcConfig {
    let mut cfg = SmcConfig::adaptive(64, 2024);
    cfg.ess_threshold_fraction = 0.8;
    cfg
}

#[test]
fn criterion_02_and_03_unbiasedness_and_resampling_identity() {
    let t = Instant::now();
    let toy = BarrierToy::default();
    let mut all_pass = true;
    let mut worst_identity: f64 = 0.0;
    for psi in [TestFunction::One, TestFunction::Payoff] {
        let r = toy
            .run(toy.bridge().unwrap(), psi, &toy_config(), 2000)
            .unwrap();
        worst_identity = worst_identity.max(r.max_identity_error);
        let pass = r.verdict == Verdict::Pass
            && r.resample_rate >= 0.3
            && (r.mean - r.oracle).abs() <= 3.0 * r.se.hypot(r.oracle_se);
        all_pass &= pass;
        report(
            2,
            &format!("unbiasedness psi={psi:?}"),
            pass,
            format!(
                "mean {:.6} oracle {:.6} se {:.2e} z {:.2} resample rate {:.3}",
                r.mean,
                r.oracle,
                r.se,
                r.z_score(),
                r.resample_rate
            ),
        );
    }
    let tarn = TarnToy::default();
    let oracle = tarn.oracle(1_000_000, 99).unwrap();
    let naive = Weighting::TarnNaive(TarnNaive {
        s0: tarn.s0.ln(),
        last: tarn.spec().last_weighted_step(),
    });
    let r = tarn.run(naive, &toy_config(), 500, oracle).unwrap();
    worst_identity = worst_identity.max(r.max_identity_error);
    let elapsed = t.elapsed();
    let in_time = elapsed < Duration::from_secs(300);
    report(2, "runtime", in_time, format!("{elapsed:.1?}"));
    let identity = worst_identity <= IDENTITY_TOLERANCE;
    report(
        3,
        "pathwise resampling identity",
        identity,
        format!(
            "max error {worst_identity:.2e} over 4500 traced runs (TARN toy z {:.2})",
            r.z_score()
        ),
    );
    assert!(all_pass && in_time && identity);
}

#[test]
fn criterion_04_pilot_survival_calibration() {
    let pilot = barrier(1, "0.08", "").fit_pilot().unwrap();
    let fraction = pilot.qualifying_fraction();
    let frac_pass = (fraction - 0.39).abs() <= 0.03;
    report(
        4,
        "survivor fraction d=1",
        frac_pass,
        format!("{fraction:.4}"),
    );

    let cache = PilotCache::default();
    let req = barrier(10, "0.08", "")
        .request_for("smc_weighted:bridge", &cache)
        .unwrap();
    let r = smcprice_core::price(&req).unwrap();
    let survival = if r.extinct { 0.0 } else { r.log_c_hat.exp() };
    let target = 0.39f64.powi(10);
    let ratio = survival / target;
    let surv_pass = (0.5..=2.0).contains(&ratio);
    report(
        4,
        "survival d=10 via normalizing constant",
        surv_pass,
        format!("{survival:.3e} vs {target:.3e} (ratio {ratio:.2})"),
    );
    assert!(frac_pass && surv_pass);
}

#[test]
fn criterion_05_barrier_variance_reduction() {
    let c = barrier(
        10,
        "0.08",
        "[plan]\nsweep = \"dimension\"\nvalues = [5, 10, 15]\n\
         methods = [\"plain_mc\", \"smc_weighted:bridge\"]\nreplicates = 50",
    );
    let (plan, axis) = c.plan().unwrap();
    let cache = PilotCache::default();
    let out = run_plan(&plan, &|si, m| {
        c.at_sweep(axis, plan.sweep[si])?.request_for(m, &cache)
    })
    .unwrap();
    let rel: Vec<f64> = [5.0, 10.0, 15.0]
        .iter()
        .map(|&d| {
            row(&out.rows, d, "smc_weighted:bridge")
                .rel_sd
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let rho = spearman(&[5.0, 10.0, 15.0], &rel);
    let pass = rel[1] > 1.0 && rho > 0.0;
    for r in &out.rows {
        println!(
            "    d={} {:<22} mean {:.3e} sd {:.3e} rel_sd {:?}",
            r.sweep, r.method, r.mean, r.sd, r.rel_sd
        );
    }
    report(
        5,
        "barrier relative sd",
        pass,
        format!("rel_sd d=5,10,15 = {rel:.3?}, rank correlation {rho:.2}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_tarn_escape_split() {
    let c = tarn("0.05", "");
    let d = c.diffusion().unwrap();
    let Product::Tarn(spec) = c.product().unwrap() else {
        unreachable!()
    };
    let split = escape_split(&d, &spec, 4, 10_000, c.seed).unwrap();
    let left = split.left_fraction();
    let pass = (left - 0.2).abs() <= 0.05;
    let large = escape_split(&d, &spec, 4, 2_000_000, c.seed).unwrap();
    report(
        6,
        "TARN escape split",
        pass,
        format!(
            "left {left:.3} from {} escapers in 10^4 paths (2x10^6 paths: left {:.3} of {})",
            split.escaped(),
            large.left_fraction(),
            large.escaped()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_tarn_local_vol() {
    let c = tarn(
        "\"tarn_preset\"",
        "[plan]\nmethods = [\"plain_mc\", \"smc_weighted:tarn_naive\", \"smc_weighted:mixture\"]\n\
         replicates = 50",
    );
    let (plan, axis) = c.plan().unwrap();
    let cache = PilotCache::default();
    let out = run_plan(&plan, &|si, m| {
        c.at_sweep(axis, plan.sweep[si])?.request_for(m, &cache)
    })
    .unwrap();
    let naive = row(&out.rows, 0.0, "smc_weighted:tarn_naive")
        .rel_sd
        .unwrap_or(f64::INFINITY);
    let mixture = row(&out.rows, 0.0, "smc_weighted:mixture")
        .rel_sd
        .unwrap_or(f64::INFINITY);
    let naive_pass = (1.3..=2.4).contains(&naive);
    let mixture_pass = (1.7..=3.0).contains(&mixture);
    for r in &out.rows {
        println!(
            "    {:<24} mean {:.4e} sd {:.3e} rel_sd {:?}",
            r.method, r.mean, r.sd, r.rel_sd
        );
    }
    report(
        7,
        "TARN local vol naive rel_sd",
        naive_pass,
        format!("{naive:.3} (band 1.3..2.4)"),
    );
    report(
        7,
        "TARN local vol mixture rel_sd",
        mixture_pass,
        format!("{mixture:.3} (band 1.7..3.0)"),
    );
    assert!(naive_pass && mixture_pass);
}

#[test]
fn criterion_08_zero_volatility() {
    let plan_text = |methods: &str| {
        format!("[plan]\nmethods = [{methods}]\nreplicates = 5\n[smc]\nparticles = 500")
    };
    let b = barrier(
        2,
        "0.0",
        &format!(
            "strike = 90\n{}",
            plan_text(
                "\"plain_mc\", \"smc_monitor\", \"smc_weighted:bridge\", \"smc_weighted:pilot\""
            )
        ),
    );
    let t = tarn(
        "0.0",
        &plan_text(
            "\"plain_mc\", \"smc_weighted:tarn_naive\", \"smc_weighted:tarn_density\", \"smc_weighted:mixture\"",
        ),
    );
    let Product::Tarn(spec) = t.product().unwrap() else {
        unreachable!()
    };
    let fixings = vec![100f64.ln(); spec.m()];
    let tarn_exact = tarn_payoff(&fixings, &spec).unwrap();
    let cache = PilotCache::default();
    let mut pass = true;
    for (c, exact) in [(&b, 10.0), (&t, tarn_exact)] {
        let (plan, axis) = c.plan().unwrap();
        let out = run_plan(&plan, &|si, m| {
            c.at_sweep(axis, plan.sweep[si])?.request_for(m, &cache)
        })
        .unwrap();
        for r in &out.estimates {
            let ok = (r.estimate - exact).abs() <= 1e-9 * exact.abs().max(1.0);
            if !ok {
                println!(
                    "    {} replicate {}: {} != {exact}",
                    r.method, r.replicate, r.estimate
                );
            }
            pass &= ok;
        }
        for r in &out.rows {
            pass &= r.sd <= 1e-9 * exact.abs().max(1.0) && r.extinct == 0;
            println!("    {:<24} mean {} sd {:e}", r.method, r.mean, r.sd);
        }
    }
    report(
        8,
        "zero volatility",
        pass,
        format!("barrier exact 10, TARN exact {tarn_exact}"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_determinism_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        barrier(
            3,
            "0.08",
            "[smc]\nparticles = 2000\n[plan]\nsweep = \"volatility\"\nvalues = [0.06, 0.08]\n\
             methods = [\"plain_mc\", \"smc_monitor\", \"smc_weighted:bridge\", \"smc_weighted:pilot\"]\n\
             replicates = 4",
        ),
        tarn(
            "0.05",
            "[smc]\nparticles = 2000\n[plan]\n\
             methods = [\"plain_mc\", \"smc_weighted:tarn_naive\", \"smc_weighted:mixture\"]\n\
             replicates = 4",
        ),
    ];
    let mut pass = true;
    for (ci, base) in cases.iter().enumerate() {
        let mut outputs = Vec::new();
        for workers in [1usize, 4, 8] {
            let mut c = base.clone();
            c.workers = Some(workers);
            let (plan, axis) = c.plan().unwrap();
            let cache = PilotCache::default();
            let out = run_plan(&plan, &|si, m| {
                c.at_sweep(axis, plan.sweep[si])?.request_for(m, &cache)
            })
            .unwrap();
            let table = dir.path().join(format!("t{ci}_{workers}.csv"));
            let reps = dir.path().join(format!("r{ci}_{workers}.csv"));
            emit_plot_data(&out.rows, &table).unwrap();
            emit_replicates(&out.estimates, &reps).unwrap();
            outputs.push((
                std::fs::read(&table).unwrap(),
                std::fs::read(&reps).unwrap(),
            ));
        }
        pass &= outputs.windows(2).all(|w| w[0] == w[1]);
    }
    report(
        9,
        "byte-identical CSV for 1, 4, 8 workers",
        pass,
        "barrier and TARN plans",
    );
    assert!(pass);
}

#[test]
fn criterion_10_ess_and_resampling() {
    let mut pass = true;
    let uniform = vec![0.01; 100];
    let cases: [(&[f64], f64); 3] = [
        (&uniform, 100.0),
        (&[1.0, 0.0, 0.0, 0.0], 1.0),
        (&[0.5, 0.5, 0.0, 0.0], 2.0),
    ];
    for (w, want) in cases {
        let got = ess(w).unwrap();
        pass &= (got - want).abs() <= 1e-12 * want;
    }
    pass &= ess(&[0.0, 0.0]).is_err();

    let n = 10;
    let trials = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![0u64; n];
    for _ in 0..trials {
        for i in multinomial_indices(&vec![1.0 / n as f64; n], n, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let expected = trials as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p_value = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi2);
    pass &= p_value > 0.001;

    let degenerate = multinomial_indices(&[1.0, 0.0, 0.0, 0.0], 4, &mut rng).unwrap();
    pass &= degenerate.iter().all(|&i| i == 0);

    let np = 20;
    let raw: Vec<f64> = (0..np).map(|i| 1.0 + ((i * 7919) % 13) as f64).collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let trials = 10_000;
    let mut sums = vec![0.0; np];
    for _ in 0..trials {
        for i in multinomial_indices(&w, np, &mut rng).unwrap() {
            sums[i] += 1.0;
        }
    }
    let mut worst_z: f64 = 0.0;
    for j in 0..np {
        let mean = sums[j] / trials as f64;
        let want = np as f64 * w[j];
        let se = (np as f64 * w[j] * (1.0 - w[j]) / trials as f64).sqrt();
        worst_z = worst_z.max((mean - want).abs() / se);
    }
    pass &= worst_z <= 4.0;
    report(
        10,
        "ESS and multinomial resampling",
        pass,
        format!("chi-square p {p_value:.3}, worst offspring z {worst_z:.2}"),
    );
    assert!(pass);
}
