use proptest::prelude::*;

use smcprice_core::diffusion::simulate_path;
use smcprice_core::rng::{stream, StreamRng};
use smcprice_core::scenario::{PilotCache, RunConfig, WeightingKind};
use smcprice_core::smc::{ParticleSystem, ResampleMode, SmcObserver};
use smcprice_core::weighting::{build_potentials, build_terminal_potentials};
use smcprice_core::{price, Product, Result, Smc, SmcConfig, SmcModel};

fn barrier_config(d: usize, sigma: f64, days: &[usize], lower: f64, upper: f64) -> RunConfig {
    let days: Vec<String> = days.iter().map(|x| x.to_string()).collect();
    RunConfig::from_toml(&format!(
        "[model]\ndimension = {d}\nvolatility = {sigma}\n[product]\ntype = \"barrier\"\n\
         monitoring_days = [{}]\nlower = {lower}\nupper = {upper}\n[smc]\nparticles = 300",
        days.join(", ")
    ))
    .unwrap()
}

fn tarn_config(sigma: f64, fixings: usize) -> RunConfig {
    RunConfig::from_toml(&format!(
        "[model]\nvolatility = {sigma}\n[product]\ntype = \"tarn\"\nfixings = {fixings}\n\
         [smc]\nparticles = 300"
    ))
    .unwrap()
}

fn monitoring_days() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(5usize..60, 1..4).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 24,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn barrier_potentials_telescope(
        d in 1usize..4,
        sigma in 0.05f64..0.3,
        days in monitoring_days(),
        width in 2.0f64..15.0,
        seed in any::<u64>(),
        bridge in any::<bool>(),
    ) {
        let c = barrier_config(d, sigma, &days, 100.0 - width, 100.0 + width);
        let kind = if bridge { WeightingKind::Bridge } else { WeightingKind::Unit };
        let w = c.weighting_of(kind, &PilotCache::default()).unwrap();
        let Product::Barrier(opt) = c.product().unwrap() else { unreachable!() };
        let seq = build_potentials(w, &opt);
        let diff = c.diffusion().unwrap();
        for i in 0..20 {
            let path = simulate_path(&diff, &mut stream(seed, i)).unwrap();
            let states: Vec<Vec<f64>> = path.into_iter().map(|p| p.logprices).collect();
            let alive = opt.monitoring.iter().enumerate().all(|(k, &t)| opt.inside(k, &states[t]));
            let got = seq.log_path_weight(&states);
            if alive {
                prop_assert!(got.abs() <= 1e-10, "alive path weighs {got}");
            } else {
                prop_assert_eq!(got, f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn tarn_potentials_telescope(
        sigma in 0.02f64..0.2,
        fixings in 5usize..10,
        seed in any::<u64>(),
        density in any::<bool>(),
    ) {
        let c = tarn_config(sigma, fixings);
        let kind = if density { WeightingKind::TarnDensity } else { WeightingKind::TarnNaive };
        let w = c.weighting_of(kind, &PilotCache::default()).unwrap();
        let Product::Tarn(spec) = c.product().unwrap() else { unreachable!() };
        let seq = build_terminal_potentials(w, spec.last_weighted_step());
        let diff = c.diffusion().unwrap();
        for i in 0..20 {
            let path = simulate_path(&diff, &mut stream(seed, i)).unwrap();
            let states: Vec<Vec<f64>> = path.into_iter().map(|p| p.logprices).collect();
            let got = seq.log_path_weight(&states);
            prop_assert!(got.abs() <= 1e-10, "path weight {got}");
        }
    }

    #[test]
    fn scaling_the_weighting_leaves_the_estimate_unchanged(
        scale in 1e-3f64..1e3,
        seed in any::<u64>(),
        tarn in any::<bool>(),
    ) {
        let (c, kind, label) = if tarn {
            (tarn_config(0.05, 8), WeightingKind::TarnNaive, "smc_weighted:tarn_naive")
        } else {
            (barrier_config(2, 0.1, &[30, 60], 93.0, 107.0), WeightingKind::Bridge, "smc_weighted:bridge")
        };
        let cache = PilotCache::default();
        let base = c.request_for(label, &cache).unwrap().with_seed(seed);
        let w = c.weighting_of(kind, &cache).unwrap();
        let scaled = base.clone().with_weighting(w.clone().scaled(scale));
        let base = base.with_weighting(w);
        let a = price(&base).unwrap();
        let b = price(&scaled).unwrap();
        let steps = |r: &smcprice_core::PricingResult| -> Vec<usize> {
            r.diagnostics.iter().filter(|d| d.resampled).map(|d| d.step).collect()
        };
        prop_assert_eq!(steps(&a), steps(&b));
        prop_assert!(
            (a.estimate - b.estimate).abs() <= 1e-9 * a.estimate.abs().max(1e-12),
            "{} vs {}", a.estimate, b.estimate
        );
    }

    #[test]
    fn weights_stay_normalized(
        seed in any::<u64>(),
        n in 2usize..200,
        threshold in 0.1f64..1.0,
        rate in 0.1f64..3.0,
    ) {
        let model = Decay { rate };
        let mut config = SmcConfig::adaptive(n, seed);
        config.ess_threshold_fraction = threshold;
        let mut check = NormCheck { worst: 0.0 };
        let out = Smc::new(&model, config).run_observed(&mut check).unwrap();
        prop_assert!(check.worst <= 1e-12, "weights sum off by {}", check.worst);
        let ess = out.system.ess().unwrap();
        prop_assert!((1.0 - 1e-9..=n as f64 + 1e-9).contains(&ess));
    }

    #[test]
    fn unit_potentials_reproduce_plain_paths(
        seed in any::<u64>(),
        d in 1usize..3,
        sigma in 0.0f64..0.3,
    ) {
        let c = barrier_config(d, sigma, &[25], 1e-6, 1e6);
        let diff = c.diffusion().unwrap();
        let Product::Barrier(opt) = c.product().unwrap() else { unreachable!() };
        let model = smcprice_core::pricing::BarrierModel::new(
            &diff,
            &opt,
            smcprice_core::Weighting::Unit,
        );
        let out = Smc::new(&model, SmcConfig::adaptive(50, seed)).run().unwrap();
        prop_assert!(out.diagnostics.iter().all(|s| !s.resampled));
        for (i, p) in out.system.particles.iter().enumerate() {
            let path = simulate_path(&diff, &mut stream(seed, i as u64)).unwrap();
            prop_assert_eq!(&p.s, &path[25].logprices);
        }
    }
}

/// Random walk whose potential penalizes distance from the origin.
struct Decay {
    rate: f64,
}

impl SmcModel for Decay {
    type State = f64;

    fn horizon(&self) -> usize {
        12
    }

    fn initial_state(&self) -> f64 {
        0.0
    }

    fn advance(&self, _step: usize, state: &mut f64, rng: &mut StreamRng) -> Result<f64> {
        *state += rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng);
        Ok(-self.rate * *state * *state)
    }
}

struct NormCheck {
    worst: f64,
}

impl<S> SmcObserver<S> for NormCheck {
    fn weighted(&mut self, _step: usize, _lg: &[f64], system: &ParticleSystem<S>) {
        let sum: f64 = system.norm_weights.iter().sum();
        self.worst = self.worst.max((sum - 1.0).abs());
    }
}

#[test]
fn price_is_identical_across_worker_counts() {
    let c = barrier_config(3, 0.1, &[20, 40, 60], 94.0, 106.0);
    let cache = PilotCache::default();
    for method in ["plain_mc", "smc_monitor", "smc_weighted:bridge"] {
        let req = c.request_for(method, &cache).unwrap().with_seed(5);
        let results: Vec<(f64, f64)> = [1usize, 2, 7]
            .iter()
            .map(|&w| {
                let mut r = req.clone();
                r.smc.workers = Some(w);
                let out = price(&r).unwrap();
                (out.estimate, out.log_c_hat)
            })
            .collect();
        assert!(
            results.windows(2).all(|p| p[0] == p[1]),
            "{method}: {results:?}"
        );
    }
}

#[test]
fn forced_resampling_schedule_is_respected() {
    let c = barrier_config(1, 0.1, &[30], 90.0, 110.0);
    let cache = PilotCache::default();
    let mut req = c.request_for("smc_weighted:bridge", &cache).unwrap();
    req.smc.resample_mode = ResampleMode::AtSteps(vec![22, 27]);
    let out = price(&req).unwrap();
    let steps: Vec<usize> = out
        .diagnostics
        .iter()
        .filter(|d| d.resampled)
        .map(|d| d.step)
        .collect();
    assert_eq!(steps, vec![22, 27]);
}
