//! The three price estimators: plain Monte Carlo, SMC resampling at the
//! monitoring dates, and SMC with weighting functions.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::Diffusion;
use crate::error::{config_err, Result};
use crate::products::{BarrierOption, CashflowState, TarnSpec};
use crate::rng::{stream, StreamRng};
use crate::smc::{estimate, ResampleMode, Smc, SmcConfig, SmcModel, SmcOutput, StepDiagnostic};
use crate::weighting::{PotentialSequence, Weighting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PlainMc,
    /// Indicator potentials, resampling at every monitoring date.
    SmcMonitor,
    /// Potentials from a weighting function, adaptive resampling.
    SmcWeighted,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::PlainMc => "plain_mc",
            Method::SmcMonitor => "smc_monitor",
            Method::SmcWeighted => "smc_weighted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Product {
    Barrier(BarrierOption),
    Tarn(TarnSpec),
}

#[derive(Debug, Clone)]
pub struct PricingRequest {
    pub diffusion: Diffusion,
    pub product: Product,
    pub method: Method,
    /// Only used by [`Method::SmcWeighted`].
    pub weighting: Weighting,
    /// Particle count, seed, resampling rule and workers. Plain Monte Carlo
    /// uses only the count, seed and workers.
    pub smc: SmcConfig,
}

impl PricingRequest {
    pub fn new(diffusion: Diffusion, product: Product, method: Method, smc: SmcConfig) -> Self {
        Self {
            diffusion,
            product,
            method,
            weighting: Weighting::Unit,
            smc,
        }
    }

    pub fn with_weighting(mut self, weighting: Weighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.smc.master_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.smc.validate()?;
        let n = self.diffusion.grid().n_steps();
        match &self.product {
            Product::Barrier(opt) => {
                opt.validate(self.diffusion.dimension())?;
                if opt.monitoring.windows(2).any(|w| w[0] >= w[1]) || opt.monitoring[0] == 0 {
                    return Err(config_err(
                        "monitoring dates must be strictly increasing and positive",
                    ));
                }
                if *opt.monitoring.last().unwrap() != n {
                    return Err(config_err("the last monitoring date must be the horizon"));
                }
            }
            Product::Tarn(spec) => {
                spec.validate(n)?;
                if self.diffusion.dimension() != 1 {
                    return Err(config_err("TARNs are single-asset"));
                }
                if self.method == Method::SmcMonitor {
                    return Err(config_err(
                        "resampling at monitoring dates applies to barrier options only",
                    ));
                }
            }
        }
        if self.method != Method::SmcWeighted && self.weighting != Weighting::Unit {
            return Err(config_err(
                "weighting functions require the smc_weighted method",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingResult {
    pub estimate: f64,
    pub n_particles: usize,
    pub extinct: bool,
    pub diagnostics: Vec<StepDiagnostic>,
    /// `ln Ĉ_N` (zero for plain Monte Carlo).
    pub log_c_hat: f64,
    pub wall_time: f64,
    /// Rough standard error: the sample error for plain Monte Carlo, a
    /// weighted-spread proxy for SMC.
    pub se_hint: Option<f64>,
}

/// Particle state for barrier options.
#[derive(Debug, Clone)]
pub struct BarrierState {
    pub s: Vec<f64>,
    z: Vec<f64>,
    pub log_h: f64,
}

pub struct BarrierModel<'a> {
    diffusion: &'a Diffusion,
    potentials: PotentialSequence,
}

impl<'a> BarrierModel<'a> {
    pub fn new(diffusion: &'a Diffusion, option: &BarrierOption, weighting: Weighting) -> Self {
        Self {
            diffusion,
            potentials: PotentialSequence::Monitored {
                weighting,
                option: option.clone(),
            },
        }
    }

    pub fn potentials(&self) -> &PotentialSequence {
        &self.potentials
    }
}

impl SmcModel for BarrierModel<'_> {
    type State = BarrierState;

    fn horizon(&self) -> usize {
        self.diffusion.grid().n_steps()
    }

    fn initial_state(&self) -> BarrierState {
        let s = self.diffusion.basket().s0().to_vec();
        let log_h = self.potentials.log_h0(&s);
        BarrierState {
            z: vec![0.0; s.len()],
            s,
            log_h,
        }
    }

    #[inline]
    fn advance(&self, step: usize, state: &mut BarrierState, rng: &mut StreamRng) -> Result<f64> {
        self.diffusion
            .advance(step - 1, &mut state.s, &mut state.z, rng)?;
        let (log_g, log_h) = self.potentials.log_potential(step, state.log_h, &state.s);
        state.log_h = log_h;
        Ok(log_g)
    }
}

/// Particle state for TARNs: the price, the carried weighting value and
/// the cashflow accumulators.
#[derive(Debug, Clone, Copy)]
pub struct TarnState {
    pub s: f64,
    pub log_h: f64,
    pub cash: CashflowState,
}

pub struct TarnModel<'a> {
    diffusion: &'a Diffusion,
    spec: &'a TarnSpec,
    potentials: PotentialSequence,
}

impl<'a> TarnModel<'a> {
    pub fn new(diffusion: &'a Diffusion, spec: &'a TarnSpec, weighting: Weighting) -> Self {
        let last = spec.last_weighted_step();
        Self {
            diffusion,
            spec,
            potentials: PotentialSequence::Terminal { weighting, last },
        }
    }

    /// `g / h_{T_5}` for a finished particle.
    pub fn weighted_payoff(&self, state: &TarnState) -> f64 {
        state.cash.payoff(self.spec) * self.potentials.log_terminal_correction(state.log_h).exp()
    }

    pub fn potentials(&self) -> &PotentialSequence {
        &self.potentials
    }
}

impl SmcModel for TarnModel<'_> {
    type State = TarnState;

    fn horizon(&self) -> usize {
        *self.spec.fixings.last().expect("validated spec")
    }

    fn initial_state(&self) -> TarnState {
        let s = self.diffusion.basket().s0()[0];
        TarnState {
            s,
            log_h: self.potentials.log_h0(&[s]),
            cash: CashflowState::default(),
        }
    }

    #[inline]
    fn advance(&self, step: usize, state: &mut TarnState, rng: &mut StreamRng) -> Result<f64> {
        if state.cash.stopped() && step > self.spec.last_weighted_step() {
            return Ok(0.0);
        }
        let mut s = [state.s];
        self.diffusion.advance(step - 1, &mut s, &mut [0.0], rng)?;
        state.s = s[0];
        if !state.cash.stopped() && self.spec.fixing_index(step).is_some() {
            state.cash.update(self.spec, state.s.exp())?;
        }
        let (log_g, log_h) = self.potentials.log_potential(step, state.log_h, &s);
        state.log_h = log_h;
        Ok(log_g)
    }
}

/// Runs `f` inside a pool of `workers` threads, or on the global pool.
pub fn in_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| config_err(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn plain_result(payoffs: Vec<f64>, start: Instant) -> PricingResult {
    let (mean, se) = mean_and_se(&payoffs);
    PricingResult {
        estimate: mean,
        n_particles: payoffs.len(),
        extinct: false,
        diagnostics: Vec::new(),
        log_c_hat: 0.0,
        wall_time: start.elapsed().as_secs_f64(),
        se_hint: Some(se),
    }
}

fn smc_result<S: Clone>(
    out: SmcOutput<S>,
    log_h0: f64,
    payoff: impl Fn(&S) -> f64,
    start: Instant,
) -> PricingResult {
    let est = estimate(&out.system, &payoff);
    let scale = log_h0.exp();
    let se_hint = (!est.extinct).then(|| {
        let sys = &out.system;
        let mean = est.value / sys.c_hat();
        let spread: f64 = sys
            .particles
            .iter()
            .zip(&sys.norm_weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(p, &w)| w * (payoff(p) - mean).powi(2))
            .sum();
        let ess = sys.ess().unwrap_or(1.0);
        scale * sys.c_hat() * (spread / ess).sqrt()
    });
    PricingResult {
        estimate: scale * est.value,
        n_particles: out.system.len(),
        extinct: est.extinct,
        log_c_hat: out.system.log_c_hat,
        diagnostics: out.diagnostics,
        wall_time: start.elapsed().as_secs_f64(),
        se_hint,
    }
}

fn plain_barrier(
    diffusion: &Diffusion,
    option: &BarrierOption,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let d = diffusion.dimension();
    let horizon = diffusion.grid().n_steps();
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let mut s = diffusion.basket().s0().to_vec();
            let mut z = vec![0.0; d];
            let mut next = 0;
            for step in 1..=horizon {
                diffusion.advance(step - 1, &mut s, &mut z, &mut rng)?;
                if option.monitoring[next] == step {
                    if !option.inside(next, &s) {
                        return Ok(0.0);
                    }
                    next += 1;
                }
            }
            Ok(option.terminal_payoff(&s))
        })
        .collect()
}

fn plain_tarn(diffusion: &Diffusion, spec: &TarnSpec, n: usize, seed: u64) -> Result<Vec<f64>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let mut s = [diffusion.basket().s0()[0]];
            let mut cash = CashflowState::default();
            let mut step = 0;
            while !cash.stopped() {
                diffusion.advance(step, &mut s, &mut [0.0], &mut rng)?;
                step += 1;
                if spec.fixing_index(step).is_some() {
                    cash.update(spec, s[0].exp())?;
                }
            }
            Ok(cash.payoff(spec))
        })
        .collect()
}

/// Prices a barrier option or a TARN with the requested method.
pub fn price(request: &PricingRequest) -> Result<PricingResult> {
    request.validate()?;
    let start = Instant::now();
    let cfg = &request.smc;
    let diffusion = &request.diffusion;
    match &request.product {
        Product::Tarn(_) => price_tarn(request),
        Product::Barrier(option) => match request.method {
            Method::PlainMc => {
                let payoffs = in_pool(cfg.workers, || {
                    plain_barrier(diffusion, option, cfg.n_particles, cfg.master_seed)
                })??;
                Ok(plain_result(payoffs, start))
            }
            Method::SmcMonitor | Method::SmcWeighted => {
                let (weighting, config) = if request.method == Method::SmcMonitor {
                    let mut c = cfg.clone();
                    c.resample_mode = ResampleMode::AtSteps(option.monitoring.clone());
                    (Weighting::Unit, c)
                } else {
                    (request.weighting.clone(), cfg.clone())
                };
                let model = BarrierModel::new(diffusion, option, weighting);
                let out = Smc::new(&model, config).run()?;
                let log_h0 = model.potentials().log_h0(diffusion.basket().s0());
                Ok(smc_result(
                    out,
                    log_h0,
                    |p: &BarrierState| option.terminal_payoff(&p.s),
                    start,
                ))
            }
        },
    }
}

/// Prices a TARN: plain paths until the stopping fixing, or weighted SMC
/// with ratios up to the last weighted fixing and the payoff divided by
/// the weighting value there.
pub fn price_tarn(request: &PricingRequest) -> Result<PricingResult> {
    request.validate()?;
    let Product::Tarn(spec) = &request.product else {
        return Err(config_err("price_tarn needs a TARN product"));
    };
    let start = Instant::now();
    let cfg = &request.smc;
    let diffusion = &request.diffusion;
    match request.method {
        Method::PlainMc => {
            let payoffs = in_pool(cfg.workers, || {
                plain_tarn(diffusion, spec, cfg.n_particles, cfg.master_seed)
            })??;
            Ok(plain_result(payoffs, start))
        }
        Method::SmcWeighted => {
            let model = TarnModel::new(diffusion, spec, request.weighting.clone());
            let out = Smc::new(&model, cfg.clone()).run()?;
            let log_h0 = model.potentials().log_h0(diffusion.basket().s0());
            Ok(smc_result(
                out,
                log_h0,
                |p: &TarnState| model.weighted_payoff(p),
                start,
            ))
        }
        Method::SmcMonitor => Err(config_err(
            "resampling at monitoring dates applies to barrier options only",
        )),
    }
}
