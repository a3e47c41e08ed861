//! Instrumented SMC runs and a statistical check that the normalizing
//! constant times the self-normalized average is an unbiased estimator.
//!
//! Between resampling times `τ_{s-1} < n ≤ τ_s` each lineage carries the
//! segment product `v_n = ∏ α_t` of its incremental weights. At `τ_s` the
//! resampling weights are `V = v / (N_p v̄)` and the estimator of the
//! normalizing constant is `Z^M_N = ∏_s v̄_{τ_s}`. The trace recomputes
//! these from the raw potentials, compares them with the engine's own
//! normalized weights and `Ĉ_N`, and checks pathwise that
//! `H̃_{τ_s} V_{τ_s} = H_{τ_{s-1}} / N_p`, where `H_{τ}` is `Z^M_{τ}` over the
//! lineage's cumulative weight up to `τ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffusion::{
    AssetBasket, Diffusion, MarginalLaw, TimeGrid, VolatilityModel, DAYS_PER_YEAR,
};
use crate::error::{config_err, Error, Result};
use crate::gaussian::ln_sum_exp;
use crate::pricing::{BarrierModel, TarnModel};
use crate::products::{BarrierOption, OptionKind, TarnSpec};
use crate::rng::{derive_seed, stream};
use crate::smc::{estimate, ParticleSystem, Smc, SmcConfig, SmcModel, SmcObserver, SmcOutput};
use crate::weighting::{brownian_bridge_target, Weighting, DEFAULT_BRIDGE_INFLATION};

/// Log-space tolerance for the exact identities.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;

/// Minimum fraction of replicates that must resample at least once.
pub const MIN_RESAMPLE_RATE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResamplingTrace {
    /// `τ_1 < … < τ_r`.
    pub times: Vec<usize>,
    /// `ln v̄_{τ_s}` for `s = 1..=r+1`, the last segment ending at `N`.
    pub log_segment_means: Vec<f64>,
    /// `Σ_i V_{τ_s}^{(i)}` at each resampling time.
    pub weight_sums: Vec<f64>,
    /// `ln Z^M_N`.
    pub log_z: f64,
    /// Largest violation of the pathwise identity, in log space.
    pub max_identity_error: f64,
}

impl ResamplingTrace {
    pub fn resampled(&self) -> bool {
        !self.times.is_empty()
    }
}

struct TraceObserver {
    n: usize,
    /// `ln v_n` per particle since the last resampling.
    segment: Vec<f64>,
    /// Lineage's cumulative `ln ∏ α` since time 0.
    cumulative: Vec<f64>,
    /// Lineage's cumulative value at the last resampling.
    at_last_resample: Vec<f64>,
    last_weights: Vec<f64>,
    log_z: f64,
    trace: ResamplingTrace,
}

impl TraceObserver {
    fn new(n: usize) -> Self {
        Self {
            n,
            segment: vec![0.0; n],
            cumulative: vec![0.0; n],
            at_last_resample: vec![0.0; n],
            last_weights: vec![1.0 / n as f64; n],
            log_z: 0.0,
            trace: ResamplingTrace::default(),
        }
    }

    fn segment_mean(&self) -> f64 {
        ln_sum_exp(&self.segment) - (self.n as f64).ln()
    }
}

impl<S> SmcObserver<S> for TraceObserver {
    fn weighted(&mut self, _step: usize, log_potentials: &[f64], system: &ParticleSystem<S>) {
        for ((v, c), &lg) in self
            .segment
            .iter_mut()
            .zip(&mut self.cumulative)
            .zip(log_potentials)
        {
            *v += lg;
            *c += lg;
        }
        self.last_weights.copy_from_slice(&system.norm_weights);
    }

    fn resampled(&mut self, step: usize, ancestors: &[usize]) {
        let log_vbar = self.segment_mean();
        let log_z_prev = self.log_z;
        self.log_z += log_vbar;
        let ln_n = (self.n as f64).ln();
        let mut worst = self.trace.max_identity_error;
        for i in 0..self.n {
            let v = self.last_weights[i];
            if v > 0.0 {
                let lhs = self.log_z - self.cumulative[i] + v.ln();
                let rhs = -ln_n + log_z_prev - self.at_last_resample[i];
                worst = worst.max((lhs - rhs).abs());
                let from_segment = self.segment[i] - ln_n - log_vbar;
                worst = worst.max((v.ln() - from_segment).abs());
            }
        }
        self.trace.max_identity_error = worst;
        self.trace.times.push(step);
        self.trace.log_segment_means.push(log_vbar);
        self.trace.weight_sums.push(self.last_weights.iter().sum());
        self.cumulative = ancestors.iter().map(|&a| self.cumulative[a]).collect();
        self.at_last_resample.clone_from(&self.cumulative);
        self.segment.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[derive(Debug, Clone)]
pub struct TracedRun<S> {
    pub trace: ResamplingTrace,
    /// `ψ̂_OR = Σ V_N ψ`.
    pub psi_hat: f64,
    /// `Z^M_N`.
    pub z: f64,
    pub output: SmcOutput<S>,
}

impl<S> TracedRun<S> {
    /// `Z^M_N ψ̂_OR`; zero after extinction.
    pub fn product(&self) -> f64 {
        if self.output.system.extinct {
            0.0
        } else {
            self.z * self.psi_hat
        }
    }
}

/// Runs the engine with the trace attached and checks the trace against
/// the engine. Any mismatch beyond [`IDENTITY_TOLERANCE`] is an error.
pub fn traced_run<M: SmcModel>(
    model: &M,
    config: SmcConfig,
    psi: impl Fn(&M::State) -> f64,
) -> Result<TracedRun<M::State>> {
    let mut obs = TraceObserver::new(config.n_particles);
    let output = Smc::new(model, config).run_observed(&mut obs)?;
    let system = &output.system;
    let mut trace = obs.trace.clone();
    let (log_z, psi_hat) = if system.extinct {
        (f64::NEG_INFINITY, 0.0)
    } else {
        let log_vbar = obs.segment_mean();
        trace.log_segment_means.push(log_vbar);
        let est = estimate(system, &psi);
        (obs.log_z + log_vbar, est.value / system.c_hat())
    };
    trace.log_z = log_z;
    let agree = if log_z == f64::NEG_INFINITY {
        system.log_c_hat == f64::NEG_INFINITY
    } else {
        (log_z - system.log_c_hat).abs() <= IDENTITY_TOLERANCE
    };
    if !agree {
        return Err(Error::TraceMismatch(format!(
            "ln Z^M = {log_z} but engine ln Ĉ = {}",
            system.log_c_hat
        )));
    }
    if trace.max_identity_error > IDENTITY_TOLERANCE {
        return Err(Error::TraceMismatch(format!(
            "resampling identity violated by {:e}",
            trace.max_identity_error
        )));
    }
    if let Some(s) = trace.weight_sums.iter().find(|s| (*s - 1.0).abs() > 1e-12) {
        return Err(Error::TraceMismatch(format!(
            "resampling weights sum to {s}"
        )));
    }
    Ok(TracedRun {
        trace,
        psi_hat,
        z: log_z.exp(),
        output,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Too few replicates resampled for the test to say anything.
    Inconclusive,
}

/// Reference value with its own standard error (zero for closed forms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasReport {
    pub mean: f64,
    pub se: f64,
    pub oracle: f64,
    pub oracle_se: f64,
    pub verdict: Verdict,
    /// Fraction of replicates that resampled at least once.
    pub resample_rate: f64,
    pub replicates: usize,
    pub n_particles: usize,
    pub max_identity_error: f64,
}

impl UnbiasReport {
    /// `(mean - oracle) / combined SE`.
    pub fn z_score(&self) -> f64 {
        (self.mean - self.oracle) / self.se.hypot(self.oracle_se)
    }
}

/// Runs `replicates` traced runs with seeds derived from
/// `config.master_seed` and compares the mean of `Z^M_N ψ̂_OR` with the
/// oracle at 3 standard errors.
pub fn unbiasedness_test<M: SmcModel>(
    model: &M,
    psi: impl Fn(&M::State) -> f64 + Sync,
    config: &SmcConfig,
    replicates: usize,
    oracle: Oracle,
) -> Result<UnbiasReport> {
    if replicates < 2 {
        return Err(config_err("need at least two replicates"));
    }
    let runs: Vec<(f64, bool, f64)> = crate::pricing::in_pool(config.workers, || {
        (0..replicates as u64)
            .into_par_iter()
            .map(|r| {
                let mut cfg = config.clone();
                cfg.master_seed = derive_seed(config.master_seed, &[r]);
                cfg.workers = None;
                let run = traced_run(model, cfg, &psi)?;
                Ok((
                    run.product(),
                    run.trace.resampled(),
                    run.trace.max_identity_error,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let n = replicates as f64;
    let mean = runs.iter().map(|r| r.0).sum::<f64>() / n;
    let var = runs.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let resample_rate = runs.iter().filter(|r| r.1).count() as f64 / n;
    let max_identity_error = runs.iter().map(|r| r.2).fold(0.0, f64::max);
    let verdict = if resample_rate < MIN_RESAMPLE_RATE {
        Verdict::Inconclusive
    } else if (mean - oracle.value).abs() <= 3.0 * se.hypot(oracle.se) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(UnbiasReport {
        mean,
        se,
        oracle: oracle.value,
        oracle_se: oracle.se,
        verdict,
        resample_rate,
        replicates,
        n_particles: config.n_particles,
        max_identity_error,
    })
}

/// Test function for the unbiasedness check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    /// `ψ ≡ 1`: the estimator is the survival probability.
    One,
    /// The product's payoff.
    Payoff,
}

/// Small single-asset barrier problem with one monitoring date at the
/// horizon, whose terminal law is Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierToy {
    pub sigma: f64,
    pub steps: usize,
    pub s0: f64,
    pub lower: f64,
    pub upper: f64,
    pub strike: f64,
}

impl Default for BarrierToy {
    fn default() -> Self {
        Self {
            sigma: 0.2,
            steps: 10,
            s0: 100.0,
            lower: 97.0,
            upper: 103.0,
            strike: 100.0,
        }
    }
}

impl BarrierToy {
    pub fn diffusion(&self) -> Result<Diffusion> {
        let grid = TimeGrid::new(self.steps, 1.0 / DAYS_PER_YEAR, vec![self.steps])?;
        Diffusion::new(
            AssetBasket::uniform_price(1, self.s0)?,
            VolatilityModel::Constant(vec![self.sigma]),
            grid,
        )
    }

    pub fn option(&self) -> Result<BarrierOption> {
        BarrierOption::uniform(
            1,
            vec![self.steps],
            self.lower,
            self.upper,
            self.strike,
            OptionKind::Call,
        )
    }

    /// Bridge weighting with the default inflation.
    pub fn bridge(&self) -> Result<Weighting> {
        let diff = self.diffusion()?;
        let marginal = MarginalLaw::for_diffusion(&diff)?;
        Ok(Weighting::Bridge(brownian_bridge_target(
            &self.option()?,
            marginal,
            diff.grid().dt(),
            DEFAULT_BRIDGE_INFLATION,
        )?))
    }

    /// Closed form over the Gaussian terminal law: `P(L < S < U)` or
    /// `E[(e^S - K)^+ 1{L < S < U}]`.
    pub fn oracle(&self, psi: TestFunction) -> Oracle {
        let t = self.steps as f64 / DAYS_PER_YEAR;
        let v = self.sigma * self.sigma * t;
        let m = self.s0.ln() - 0.5 * v;
        let sd = v.sqrt();
        let phi = Normal::standard();
        let (a, b) = (self.lower.ln(), self.upper.ln());
        let value = match psi {
            TestFunction::One => phi.cdf((b - m) / sd) - phi.cdf((a - m) / sd),
            TestFunction::Payoff => {
                let lo = a.max(self.strike.ln());
                if lo >= b {
                    0.0
                } else {
                    let exp_part = (m + 0.5 * v).exp()
                        * (phi.cdf((b - m - v) / sd) - phi.cdf((lo - m - v) / sd));
                    let prob = phi.cdf((b - m) / sd) - phi.cdf((lo - m) / sd);
                    exp_part - self.strike * prob
                }
            }
        };
        Oracle { value, se: 0.0 }
    }

    pub fn run(
        &self,
        weighting: Weighting,
        psi: TestFunction,
        config: &SmcConfig,
        replicates: usize,
    ) -> Result<UnbiasReport> {
        let diff = self.diffusion()?;
        let option = self.option()?;
        let model = BarrierModel::new(&diff, &option, weighting);
        let psi_fn = |s: &crate::pricing::BarrierState| match psi {
            TestFunction::One => 1.0,
            TestFunction::Payoff => option.terminal_payoff(&s.s),
        };
        unbiasedness_test(&model, psi_fn, config, replicates, self.oracle(psi))
    }
}

/// TARN with few monthly fixings simulated on 30-day steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TarnToy {
    pub sigma: f64,
    pub fixings: usize,
    pub s0: f64,
}

impl Default for TarnToy {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            fixings: 3,
            s0: 100.0,
        }
    }
}

impl TarnToy {
    pub fn diffusion(&self) -> Result<Diffusion> {
        let grid = TimeGrid::new(self.fixings, 30.0 / DAYS_PER_YEAR, vec![])?;
        Diffusion::new(
            AssetBasket::uniform_price(1, self.s0)?,
            VolatilityModel::Constant(vec![self.sigma]),
            grid,
        )
    }

    pub fn spec(&self) -> TarnSpec {
        let mut spec = TarnSpec::standard(1, self.fixings);
        spec.weighted_fixings = spec.weighted_fixings.min(self.fixings);
        spec
    }

    /// Plain Monte Carlo reference from `paths` paths.
    pub fn oracle(&self, paths: usize, seed: u64) -> Result<Oracle> {
        let diff = self.diffusion()?;
        let spec = self.spec();
        let payoffs: Vec<f64> = (0..paths as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(seed, i);
                let mut s = [diff.basket().s0()[0]];
                let mut cash = crate::products::CashflowState::default();
                let mut step = 0;
                while !cash.stopped() {
                    diff.advance(step, &mut s, &mut [0.0], &mut rng)?;
                    step += 1;
                    cash.update(&spec, s[0].exp())?;
                }
                Ok(cash.payoff(&spec))
            })
            .collect::<Result<_>>()?;
        let n = paths as f64;
        let mean = payoffs.iter().sum::<f64>() / n;
        let var = payoffs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Oracle {
            value: mean,
            se: (var / n).sqrt(),
        })
    }

    pub fn run(
        &self,
        weighting: Weighting,
        config: &SmcConfig,
        replicates: usize,
        oracle: Oracle,
    ) -> Result<UnbiasReport> {
        let diff = self.diffusion()?;
        let spec = self.spec();
        let model = TarnModel::new(&diff, &spec, weighting);
        unbiasedness_test(
            &model,
            |s| model.weighted_payoff(s),
            config,
            replicates,
            oracle,
        )
    }
}
