//! Generic sequential Monte Carlo engine.
//!
//! A model supplies a proposal (one simulation step per particle) together
//! with the potential `G_n` of the new state. Each step the engine forms the
//! unnormalized weights `w_n = W̄_{n-1} G_n`, multiplies the running
//! normalizing-constant estimate by `Σ w_n`, normalizes, and resamples
//! multinomially when the configured rule fires. Weights live in log space:
//! indicator potentials produce exact zeros, and products over hundreds of
//! steps would underflow otherwise.
//!
//! Particle `i` always draws from stream `i` of the master seed and all
//! reductions run sequentially in index order, so results do not depend on
//! the number of worker threads.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::gaussian::ln_sum_exp;
use crate::rng::{particle_streams, stream, StreamRng, RESAMPLING_STREAM};

/// Proposal kernel plus potentials.
pub trait SmcModel: Sync {
    type State: Clone + Send + Sync;

    /// Number of steps `N`.
    fn horizon(&self) -> usize;

    fn initial_state(&self) -> Self::State;

    /// Moves `state` from step `step - 1` to `step` and returns `ln G_step`.
    /// `-∞` is a zero potential.
    fn advance(&self, step: usize, state: &mut Self::State, rng: &mut StreamRng) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    /// Resample when `ESS < threshold · N_p`.
    Adaptive,
    /// Resample at exactly these steps.
    AtSteps(Vec<usize>),
    /// Resample after every step.
    Always,
    /// Never resample (sequential importance sampling).
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    pub n_particles: usize,
    pub ess_threshold_fraction: f64,
    pub resample_mode: ResampleMode,
    pub master_seed: u64,
    /// Worker threads; `None` uses the ambient rayon pool.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl SmcConfig {
    pub fn adaptive(n_particles: usize, master_seed: u64) -> Self {
        Self {
            n_particles,
            ess_threshold_fraction: 0.5,
            resample_mode: ResampleMode::Adaptive,
            master_seed,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(config_err("need at least two particles"));
        }
        if !(self.ess_threshold_fraction > 0.0 && self.ess_threshold_fraction <= 1.0) {
            return Err(config_err("ESS threshold fraction must lie in (0, 1]"));
        }
        if self.workers == Some(0) {
            return Err(config_err("worker count must be positive"));
        }
        Ok(())
    }
}

/// All weights are zero: the particle system has died out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extinction;

/// Effective sample size `1 / Σ W²` of normalized weights.
pub fn ess(norm_weights: &[f64]) -> Result<f64, Extinction> {
    let sum_sq: f64 = norm_weights.iter().map(|w| w * w).sum();
    if sum_sq == 0.0 {
        return Err(Extinction);
    }
    Ok((1.0 / sum_sq).clamp(1.0, norm_weights.len() as f64))
}

/// Draws `n` ancestor indices i.i.d. from `Categorical(weights)`.
///
/// One uniform per draw is inverted through the cumulative sums taken in
/// index order. Zero-weight entries are never selected.
pub fn multinomial_indices<R: Rng + ?Sized>(
    weights: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>, Extinction> {
    let mut cum = Vec::with_capacity(weights.len());
    let mut total = 0.0;
    for &w in weights {
        total += w;
        cum.push(total);
    }
    if !(total > 0.0) {
        return Err(Extinction);
    }
    let last_live = weights.iter().rposition(|&w| w > 0.0).expect("total > 0");
    Ok((0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            cum.partition_point(|&c| c <= u).min(last_live)
        })
        .collect())
}

/// Per-step engine diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostic {
    pub step: usize,
    pub ess: f64,
    pub resampled: bool,
    pub log_c_hat: f64,
}

/// Writes diagnostics as CSV: `step,ess,resampled,log_c_hat`.
pub fn write_diagnostics<W: std::io::Write>(diags: &[StepDiagnostic], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for d in diags {
        w.serialize(d)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ParticleSystem<S> {
    pub particles: Vec<S>,
    /// `ln W̄`, normalized.
    pub log_weights: Vec<f64>,
    pub norm_weights: Vec<f64>,
    /// `ln Ĉ_n`.
    pub log_c_hat: f64,
    pub step: usize,
    pub resample_log: Vec<usize>,
    pub extinct: bool,
}

impl<S: Clone> ParticleSystem<S> {
    pub fn new(particles: Vec<S>) -> Self {
        let n = particles.len();
        Self {
            particles,
            log_weights: vec![-(n as f64).ln(); n],
            norm_weights: vec![1.0 / n as f64; n],
            log_c_hat: 0.0,
            step: 0,
            resample_log: Vec::new(),
            extinct: false,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn c_hat(&self) -> f64 {
        self.log_c_hat.exp()
    }

    pub fn ess(&self) -> Result<f64, Extinction> {
        ess(&self.norm_weights)
    }

    /// Multinomial resampling: copies particles by ancestor index and resets
    /// the weights to `1/N_p`. Returns the ancestors.
    pub fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<usize>, Extinction> {
        let n = self.len();
        let ancestors = multinomial_indices(&self.norm_weights, n, rng)?;
        self.particles = ancestors
            .iter()
            .map(|&a| self.particles[a].clone())
            .collect();
        self.log_weights = vec![-(n as f64).ln(); n];
        self.norm_weights = vec![1.0 / n as f64; n];
        self.resample_log.push(self.step);
        Ok(ancestors)
    }
}

/// Free-function form of [`ParticleSystem::resample`].
pub fn multinomial_resample<S: Clone, R: Rng + ?Sized>(
    mut system: ParticleSystem<S>,
    rng: &mut R,
) -> Result<ParticleSystem<S>, Extinction> {
    system.resample(rng)?;
    Ok(system)
}

/// Price-style estimate `Ĉ_N Σ W̄ H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub extinct: bool,
}

pub fn estimate<S: Clone>(system: &ParticleSystem<S>, test_fn: impl Fn(&S) -> f64) -> Estimate {
    if system.extinct {
        return Estimate {
            value: 0.0,
            extinct: true,
        };
    }
    let weighted: f64 = system
        .particles
        .iter()
        .zip(&system.norm_weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(p, &w)| w * test_fn(p))
        .sum();
    Estimate {
        value: system.c_hat() * weighted,
        extinct: false,
    }
}

/// Hooks into the engine loop, used by the unbiasedness instrumentation.
pub trait SmcObserver<S> {
    /// Called after the weights of `step` are normalized, before resampling.
    fn weighted(&mut self, _step: usize, _log_potentials: &[f64], _system: &ParticleSystem<S>) {}
    /// Called after resampling at `step`.
    fn resampled(&mut self, _step: usize, _ancestors: &[usize]) {}
}

impl<S> SmcObserver<S> for () {}

/// Final particle system plus per-step diagnostics.
#[derive(Debug, Clone)]
pub struct SmcOutput<S> {
    pub system: ParticleSystem<S>,
    pub diagnostics: Vec<StepDiagnostic>,
}

/// Running engine state: the particle system plus per-slot random streams.
pub struct SmcRun<'m, M: SmcModel> {
    model: &'m M,
    config: SmcConfig,
    pub system: ParticleSystem<M::State>,
    rngs: Vec<StreamRng>,
    resample_rng: StreamRng,
    log_potentials: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostic>,
}

impl<'m, M: SmcModel> SmcRun<'m, M> {
    pub fn new(model: &'m M, config: SmcConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_particles;
        let init = model.initial_state();
        Ok(Self {
            model,
            system: ParticleSystem::new(vec![init; n]),
            rngs: particle_streams(config.master_seed, n),
            resample_rng: stream(config.master_seed, RESAMPLING_STREAM),
            log_potentials: vec![0.0; n],
            diagnostics: Vec::with_capacity(model.horizon()),
            config,
        })
    }

    pub fn is_done(&self) -> bool {
        self.system.step >= self.model.horizon() || self.system.extinct
    }

    fn should_resample(&self, step: usize, ess: f64) -> bool {
        // Resampling at the horizon only adds noise to the final estimate.
        if step >= self.model.horizon() {
            return false;
        }
        match &self.config.resample_mode {
            ResampleMode::Adaptive => {
                ess < self.config.ess_threshold_fraction * self.system.len() as f64
            }
            ResampleMode::AtSteps(steps) => steps.contains(&step),
            ResampleMode::Always => true,
            ResampleMode::Never => false,
        }
    }

    /// One propagate-weight-resample cycle.
    pub fn step(&mut self, observer: &mut impl SmcObserver<M::State>) -> Result<()> {
        if self.system.step >= self.model.horizon() {
            return Err(Error::Precondition("SMC step past the horizon".into()));
        }
        if self.system.extinct {
            return Ok(());
        }
        let step = self.system.step + 1;
        let model = self.model;
        self.system
            .particles
            .par_iter_mut()
            .zip(self.rngs.par_iter_mut())
            .zip(self.log_potentials.par_iter_mut())
            .zip(self.system.log_weights.par_iter())
            .try_for_each(|(((state, rng), lg), &lw)| -> Result<()> {
                *lg = if lw == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    model.advance(step, state, rng)?
                };
                Ok(())
            })?;
        self.system.step = step;

        if let Some((i, &v)) = self
            .log_potentials
            .iter()
            .enumerate()
            .find(|(_, v)| v.is_nan() || **v == f64::INFINITY)
        {
            return Err(Error::InvalidPotential {
                particle: i,
                step,
                value: v,
            });
        }

        for (lw, lg) in self.system.log_weights.iter_mut().zip(&self.log_potentials) {
            *lw += *lg;
        }
        let log_sum = ln_sum_exp(&self.system.log_weights);
        if log_sum == f64::NEG_INFINITY {
            self.system.extinct = true;
            self.system.log_c_hat = f64::NEG_INFINITY;
            self.system.norm_weights.iter_mut().for_each(|w| *w = 0.0);
            self.diagnostics.push(StepDiagnostic {
                step,
                ess: 0.0,
                resampled: false,
                log_c_hat: f64::NEG_INFINITY,
            });
            return Ok(());
        }
        self.system.log_c_hat += log_sum;
        for (lw, w) in self
            .system
            .log_weights
            .iter_mut()
            .zip(self.system.norm_weights.iter_mut())
        {
            *lw -= log_sum;
            *w = lw.exp();
        }
        observer.weighted(step, &self.log_potentials, &self.system);

        let ess = self
            .system
            .ess()
            .expect("non-extinct system has a positive weight");
        let resampled = self.should_resample(step, ess);
        if resampled {
            let ancestors = self
                .system
                .resample(&mut self.resample_rng)
                .expect("non-extinct system has a positive weight");
            observer.resampled(step, &ancestors);
        }
        self.diagnostics.push(StepDiagnostic {
            step,
            ess,
            resampled,
            log_c_hat: self.system.log_c_hat,
        });
        Ok(())
    }

    pub fn finish(self) -> SmcOutput<M::State> {
        SmcOutput {
            system: self.system,
            diagnostics: self.diagnostics,
        }
    }
}

/// Runs a model to its horizon.
pub struct Smc<'m, M: SmcModel> {
    model: &'m M,
    config: SmcConfig,
}

impl<'m, M: SmcModel> Smc<'m, M> {
    pub fn new(model: &'m M, config: SmcConfig) -> Self {
        Self { model, config }
    }

    pub fn run(&self) -> Result<SmcOutput<M::State>> {
        self.run_observed(&mut ())
    }

    pub fn run_observed(
        &self,
        observer: &mut (impl SmcObserver<M::State> + Send),
    ) -> Result<SmcOutput<M::State>> {
        match self.config.workers {
            Some(w) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(w)
                    .build()
                    .map_err(|e| config_err(e.to_string()))?;
                pool.install(|| self.drive(observer))
            }
            None => self.drive(observer),
        }
    }

    fn drive(&self, observer: &mut impl SmcObserver<M::State>) -> Result<SmcOutput<M::State>> {
        let mut run = SmcRun::new(self.model, self.config.clone())?;
        while !run.is_done() {
            run.step(observer)?;
        }
        Ok(run.finish())
    }
}
