//! Weighting functions and the potentials built from them.
//!
//! A weighting function `h_n` is a positive function of the current state.
//! Writing the payoff weight as a telescoping product of ratios
//! `h_n(s_n) / h_{n-1}(s_{n-1})` leaves its expectation unchanged while the
//! ratios, used as SMC potentials, push particles towards the region where
//! the payoff is non-zero. With `p_n` the marginal of `s_n`, particles at
//! step `n` are (approximately) distributed as `h_n p_n`, so a target
//! density `p̃_n` is obtained with `h_n = p̃_n / p_n`.
//!
//! For barrier options the indicator of the corridor replaces `h` at each
//! monitoring date and the ratio restarts right after it. For TARNs the
//! ratios run up to the fifth fixing and the payoff is divided by the last
//! weighting value.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Diffusion, MarginalLaw};
use crate::error::{config_err, Error, Result};
use crate::gaussian::{ln_add_exp, ln_pdf};
use crate::products::{BarrierOption, TarnSpec, TARN_BAND};
use crate::rng::{stream, StreamRng};
use crate::smc::{Smc, SmcConfig, SmcModel};

/// Floor applied to `(s - s0)²` so the TARN weights stay positive.
pub const POSITIVITY_FLOOR: f64 = 1e-12;

/// Default standard-deviation inflation for bridge targets, in units of `σ√t_k`.
pub const DEFAULT_BRIDGE_INFLATION: f64 = 0.2;

pub trait WeightingFunction: Send + Sync {
    /// `ln h_n(s)`. Zero (h = 1) outside the active range.
    fn log_h(&self, step: usize, s: &[f64]) -> f64;

    fn is_active(&self, step: usize) -> bool;
}

/// `ln p̃ - ln p_n` for one asset; a degenerate (zero-variance) marginal
/// contributes nothing.
#[inline]
fn ln_ratio(
    marginal: &MarginalLaw,
    asset: usize,
    step: usize,
    x: f64,
    ln_target: impl FnOnce() -> f64,
) -> f64 {
    let (m, v) = marginal.moments(asset, step);
    if v == 0.0 {
        return 0.0;
    }
    ln_target() - ln_pdf(x, m, v)
}

/// First step of a bridge or pilot target for a horizon `k`: `⌈2k/3⌉`.
pub fn default_start(k: usize) -> usize {
    (2 * k).div_ceil(3)
}

/// Per-step Gaussian moments, stored as offsets from the initial log-price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSchedule {
    pub start: usize,
    pub mean_offsets: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GaussianSchedule {
    pub fn end(&self) -> usize {
        self.start + self.mean_offsets.len()
    }

    pub fn covers(&self, step: usize) -> bool {
        step >= self.start && step < self.end()
    }

    #[inline]
    pub fn ln_pdf(&self, step: usize, s0: f64, x: f64) -> f64 {
        let i = step - self.start;
        ln_pdf(x, s0 + self.mean_offsets[i], self.stds[i] * self.stds[i])
    }

    fn validate(&self) -> Result<()> {
        if self.mean_offsets.len() != self.stds.len() {
            return Err(config_err("schedule means and stds differ in length"));
        }
        if self.stds.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(config_err("target standard deviations must be positive"));
        }
        Ok(())
    }
}

/// Brownian bridge from `s0` to the corridor midpoint, standard deviation
/// inflated by `inflation · σ √t_k` so it stays non-degenerate at `t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBridgeTarget {
    marginal: MarginalLaw,
    endpoint: Vec<f64>,
    horizon: usize,
    start: usize,
    inflation: f64,
    dt: f64,
}

impl BrownianBridgeTarget {
    /// Bridge over `[0, k]`; the marginal carries `s0` and the volatility.
    pub fn new(
        marginal: MarginalLaw,
        endpoint: Vec<f64>,
        horizon: usize,
        inflation: f64,
        dt: f64,
    ) -> Result<Self> {
        if endpoint.len() != marginal.s0().len() {
            return Err(config_err("bridge endpoint dimension mismatch"));
        }
        if !(inflation > 0.0) {
            return Err(config_err("bridge inflation must be positive"));
        }
        Ok(Self {
            start: default_start(horizon),
            marginal,
            endpoint,
            horizon,
            inflation,
            dt,
        })
    }

    pub fn with_start(mut self, start: usize) -> Self {
        self.start = start;
        self
    }

    /// Mean and standard deviation of the target for asset `j` at step `n`.
    pub fn target_moments(&self, j: usize, n: usize) -> (f64, f64) {
        let s0 = self.marginal.s0()[j];
        let frac = n as f64 / self.horizon as f64;
        let mean = s0 + frac * (self.endpoint[j] - s0);
        let (t, tk) = (n as f64 * self.dt, self.horizon as f64 * self.dt);
        let sigma = self.marginal.vol_at(j, n);
        let bridge = sigma * (t * (tk - t) / tk).max(0.0).sqrt();
        (mean, bridge + self.inflation * sigma * tk.sqrt())
    }
}

impl WeightingFunction for BrownianBridgeTarget {
    fn log_h(&self, step: usize, s: &[f64]) -> f64 {
        if !self.is_active(step) {
            return 0.0;
        }
        s.iter()
            .enumerate()
            .map(|(j, &x)| {
                ln_ratio(&self.marginal, j, step, x, || {
                    let (m, sd) = self.target_moments(j, step);
                    ln_pdf(x, m, sd * sd)
                })
            })
            .sum()
    }

    fn is_active(&self, step: usize) -> bool {
        step >= self.start && step < self.horizon
    }
}

/// Builds the bridge target for a barrier option, tied down at the
/// corridor midpoint of the final monitoring date.
pub fn brownian_bridge_target(
    option: &BarrierOption,
    marginal: MarginalLaw,
    dt: f64,
    inflation: f64,
) -> Result<BrownianBridgeTarget> {
    let k = *option
        .monitoring
        .last()
        .ok_or_else(|| config_err("no monitoring dates"))?;
    let endpoint = option.final_midpoint();
    if !option.inside(option.monitoring.len() - 1, &endpoint) {
        return Err(config_err("bridge endpoint outside the barrier corridor"));
    }
    BrownianBridgeTarget::new(marginal, endpoint, k, inflation, dt)
}

/// Independent Gaussians per asset with moments from a one-dimensional
/// pilot run (the "optimal" survivor target).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    marginal: MarginalLaw,
    schedule: GaussianSchedule,
}

impl GaussianTarget {
    pub fn new(marginal: MarginalLaw, schedule: GaussianSchedule) -> Result<Self> {
        schedule.validate()?;
        if schedule.start == 0 {
            return Err(config_err("target schedule must start after step 0"));
        }
        Ok(Self { marginal, schedule })
    }
}

impl WeightingFunction for GaussianTarget {
    fn log_h(&self, step: usize, s: &[f64]) -> f64 {
        if !self.is_active(step) {
            return 0.0;
        }
        let s0 = self.marginal.s0();
        s.iter()
            .enumerate()
            .map(|(j, &x)| {
                ln_ratio(&self.marginal, j, step, x, || {
                    self.schedule.ln_pdf(step, s0[j], x)
                })
            })
            .sum()
    }

    fn is_active(&self, step: usize) -> bool {
        self.schedule.covers(step)
    }
}

#[inline]
fn ln_floored_square(d: f64) -> f64 {
    (d * d).max(POSITIVITY_FLOOR).ln()
}

/// `h_n(s) = (s - s0)²` on steps `1..=last`.
pub fn tarn_weight_naive(s: f64, s0: f64) -> f64 {
    ((s - s0) * (s - s0)).max(POSITIVITY_FLOOR)
}

/// `h_n(s) = (s - s0)² / p_n(s)`, evaluated in log space.
pub fn tarn_log_weight_density_corrected(
    step: usize,
    s: f64,
    s0: f64,
    marginal: &MarginalLaw,
) -> f64 {
    ln_ratio(marginal, 0, step, s, || ln_floored_square(s - s0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TarnNaive {
    pub s0: f64,
    pub last: usize,
}

impl WeightingFunction for TarnNaive {
    fn log_h(&self, step: usize, s: &[f64]) -> f64 {
        if !self.is_active(step) {
            return 0.0;
        }
        ln_floored_square(s[0] - self.s0)
    }

    fn is_active(&self, step: usize) -> bool {
        step >= 1 && step <= self.last
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TarnDensityCorrected {
    pub marginal: MarginalLaw,
    pub last: usize,
}

impl WeightingFunction for TarnDensityCorrected {
    fn log_h(&self, step: usize, s: &[f64]) -> f64 {
        if !self.is_active(step) {
            return 0.0;
        }
        tarn_log_weight_density_corrected(step, s[0], self.marginal.s0()[0], &self.marginal)
    }

    fn is_active(&self, step: usize) -> bool {
        step >= 1 && step <= self.last
    }
}

/// Two-component Gaussian mixture (left and right escapers) divided by the
/// marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTarget {
    marginal: MarginalLaw,
    ln_w_left: f64,
    ln_w_right: f64,
    left: GaussianSchedule,
    right: GaussianSchedule,
    last: usize,
}

impl MixtureTarget {
    pub fn new(
        marginal: MarginalLaw,
        weights: (f64, f64),
        left: GaussianSchedule,
        right: GaussianSchedule,
        last: usize,
    ) -> Result<Self> {
        let (wl, wr) = weights;
        if !(wl >= 0.0 && wr >= 0.0 && (wl + wr - 1.0).abs() < 1e-9) {
            return Err(config_err(format!(
                "mixture weights must be non-negative and sum to 1, got ({wl}, {wr})"
            )));
        }
        for comp in [&left, &right] {
            comp.validate()
                .map_err(|_| config_err("degenerate mixture component standard deviation"))?;
            if comp.start > 1 || comp.end() <= last {
                return Err(config_err(format!(
                    "mixture components must cover steps 1..={last}"
                )));
            }
        }
        Ok(Self {
            marginal,
            ln_w_left: wl.ln(),
            ln_w_right: wr.ln(),
            left,
            right,
            last,
        })
    }

    pub fn weights(&self) -> (f64, f64) {
        (self.ln_w_left.exp(), self.ln_w_right.exp())
    }
}

impl WeightingFunction for MixtureTarget {
    fn log_h(&self, step: usize, s: &[f64]) -> f64 {
        if !self.is_active(step) {
            return 0.0;
        }
        let s0 = self.marginal.s0()[0];
        let x = s[0];
        ln_ratio(&self.marginal, 0, step, x, || {
            ln_add_exp(
                self.ln_w_left + self.left.ln_pdf(step, s0, x),
                self.ln_w_right + self.right.ln_pdf(step, s0, x),
            )
        })
    }

    fn is_active(&self, step: usize) -> bool {
        step >= 1 && step <= self.last
    }
}

/// The weighting functions available to the pricing engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    /// `h ≡ 1`.
    Unit,
    Bridge(BrownianBridgeTarget),
    Pilot(GaussianTarget),
    TarnNaive(TarnNaive),
    TarnDensity(TarnDensityCorrected),
    Mixture(MixtureTarget),
    /// `c · h_n` for every `n`, including `h_0`.
    Scaled {
        inner: Box<Weighting>,
        log_scale: f64,
    },
}

impl Weighting {
    pub fn scaled(self, c: f64) -> Self {
        Weighting::Scaled {
            inner: Box::new(self),
            log_scale: c.ln(),
        }
    }
}

impl WeightingFunction for Weighting {
    #[inline]
    fn log_h(&self, step: usize, s: &[f64]) -> f64 {
        match self {
            Weighting::Unit => 0.0,
            Weighting::Bridge(w) => w.log_h(step, s),
            Weighting::Pilot(w) => w.log_h(step, s),
            Weighting::TarnNaive(w) => w.log_h(step, s),
            Weighting::TarnDensity(w) => w.log_h(step, s),
            Weighting::Mixture(w) => w.log_h(step, s),
            Weighting::Scaled { inner, log_scale } => inner.log_h(step, s) + log_scale,
        }
    }

    fn is_active(&self, step: usize) -> bool {
        match self {
            Weighting::Unit => false,
            Weighting::Bridge(w) => w.is_active(step),
            Weighting::Pilot(w) => w.is_active(step),
            Weighting::TarnNaive(w) => w.is_active(step),
            Weighting::TarnDensity(w) => w.is_active(step),
            Weighting::Mixture(w) => w.is_active(step),
            Weighting::Scaled { .. } => true,
        }
    }
}

/// `1{s ∈ (L_i, U_i)}` at monitoring date index `i`.
pub fn barrier_indicator_h(option: &BarrierOption, i: usize, s: &[f64]) -> f64 {
    if option.inside(i, s) {
        1.0
    } else {
        0.0
    }
}

/// Potentials `G_n` derived from a weighting function.
#[derive(Debug, Clone, PartialEq)]
pub enum PotentialSequence {
    /// Barrier form: indicator at each monitoring date, ratio restarted
    /// right after it (`G_{T_i+1} = h_{T_i+1}`).
    Monitored {
        weighting: Weighting,
        option: BarrierOption,
    },
    /// TARN form: ratios up to `last`, unit potentials afterwards, payoff
    /// divided by `h_last`.
    Terminal { weighting: Weighting, last: usize },
}

/// Barrier potentials on the option's monitoring schedule.
pub fn build_potentials(weighting: Weighting, option: &BarrierOption) -> PotentialSequence {
    PotentialSequence::Monitored {
        weighting,
        option: option.clone(),
    }
}

/// TARN potentials with ratios through step `last`.
pub fn build_terminal_potentials(weighting: Weighting, last: usize) -> PotentialSequence {
    PotentialSequence::Terminal { weighting, last }
}

impl PotentialSequence {
    pub fn weighting(&self) -> &Weighting {
        match self {
            PotentialSequence::Monitored { weighting, .. }
            | PotentialSequence::Terminal { weighting, .. } => weighting,
        }
    }

    /// `ln h_0(s_0)`, the prefactor of the price estimate.
    pub fn log_h0(&self, s0: &[f64]) -> f64 {
        self.weighting().log_h(0, s0)
    }

    /// Given `ln h_{n-1}(s_{n-1})` and the new state, returns
    /// `(ln G_n, ln h_n(s_n))`.
    #[inline]
    pub fn log_potential(&self, step: usize, log_h_prev: f64, s: &[f64]) -> (f64, f64) {
        match self {
            PotentialSequence::Monitored { weighting, option } => {
                let log_h = match option.monitoring.binary_search(&step) {
                    Ok(i) => {
                        if option.inside(i, s) {
                            0.0
                        } else {
                            f64::NEG_INFINITY
                        }
                    }
                    Err(_) => weighting.log_h(step, s),
                };
                let restart = step > 1 && option.monitoring.binary_search(&(step - 1)).is_ok();
                let log_g = if restart { log_h } else { log_h - log_h_prev };
                (log_g, log_h)
            }
            PotentialSequence::Terminal { weighting, last } => {
                if step <= *last {
                    let log_h = weighting.log_h(step, s);
                    (log_h - log_h_prev, log_h)
                } else {
                    (0.0, log_h_prev)
                }
            }
        }
    }

    /// `ln` of the factor applied to the payoff at the horizon given the
    /// last carried `ln h`: `-ln h_last` for TARNs, `0` for barriers.
    pub fn log_terminal_correction(&self, log_h_last: f64) -> f64 {
        match self {
            PotentialSequence::Monitored { .. } => 0.0,
            PotentialSequence::Terminal { .. } => -log_h_last,
        }
    }

    /// `ln [h_0(s_0) ∏_{n=1}^{N} G_n · correction]` along a whole path
    /// (`path[n]` is `s_n`).
    pub fn log_path_weight(&self, path: &[Vec<f64>]) -> f64 {
        let mut log_h = self.log_h0(&path[0]);
        let mut acc = log_h;
        for (n, s) in path.iter().enumerate().skip(1) {
            let (g, h) = self.log_potential(n, log_h, s);
            acc += g;
            log_h = h;
        }
        acc + self.log_terminal_correction(log_h)
    }
}

/// Which paths of a pilot run qualify, and which statistics to keep.
#[derive(Debug, Clone, Copy)]
pub enum PilotMode<'a> {
    /// Keep paths alive at every monitoring date; moments on `start..N`.
    Survivors {
        option: &'a BarrierOption,
        start: usize,
    },
    /// Keep paths that leave the TARN band within the first `window`
    /// fixings, split by exit side; moments on `1..=last weighted step`.
    Escapers { spec: &'a TarnSpec, window: usize },
}

/// Minimum number of qualifying pilot paths.
pub const MIN_PILOT_PATHS: usize = 30;

/// Moments estimated from a pilot run, serializable so fitting and pricing
/// can run separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PilotTarget {
    Survivors {
        schedule: GaussianSchedule,
        qualifying: usize,
        total: usize,
    },
    Escapers {
        left: GaussianSchedule,
        right: GaussianSchedule,
        left_count: usize,
        right_count: usize,
        total: usize,
        /// Probability of a left exit given an exit.
        left_fraction: f64,
    },
}

impl PilotTarget {
    /// Empirical fraction of qualifying paths.
    pub fn qualifying_fraction(&self) -> f64 {
        match self {
            PilotTarget::Survivors {
                qualifying, total, ..
            } => *qualifying as f64 / *total as f64,
            PilotTarget::Escapers {
                left_count,
                right_count,
                total,
                ..
            } => (left_count + right_count) as f64 / *total as f64,
        }
    }

    /// Left/right proportions among escapers.
    pub fn mixture_weights(&self) -> Option<(f64, f64)> {
        match self {
            PilotTarget::Escapers { left_fraction, .. } => {
                Some((*left_fraction, 1.0 - left_fraction))
            }
            PilotTarget::Survivors { .. } => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EscapeSide {
    Left,
    Right,
}

/// Counts of pilot paths by escape side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EscapeCounts {
    pub left: usize,
    pub right: usize,
    pub total: usize,
}

impl EscapeCounts {
    pub fn escaped(&self) -> usize {
        self.left + self.right
    }

    pub fn left_fraction(&self) -> f64 {
        self.left as f64 / self.escaped() as f64
    }
}

/// Side on which `s` leaves the band if `step` is one of the first
/// `window` fixings.
pub fn escape_side(spec: &TarnSpec, window: usize, step: usize, s: f64) -> Option<EscapeSide> {
    spec.fixing_index(step).filter(|&i| i < window)?;
    let r = s.exp();
    if r < TARN_BAND.0 {
        Some(EscapeSide::Left)
    } else if r > TARN_BAND.1 {
        Some(EscapeSide::Right)
    } else {
        None
    }
}

/// Outcome of one pilot path.
type Qualifier = Option<EscapeSide>;

fn pilot_horizon(diffusion: &Diffusion, mode: PilotMode<'_>) -> Result<usize> {
    Ok(match mode {
        PilotMode::Survivors { option, start } => {
            let n = diffusion.grid().n_steps();
            if start == 0 || start >= n {
                return Err(config_err("pilot start must lie in 1..N"));
            }
            option.validate(1)?;
            n
        }
        PilotMode::Escapers { spec, window } => {
            spec.validate(diffusion.grid().n_steps())?;
            if window == 0 || window > spec.m() {
                return Err(config_err("escape window must lie in 1..=m"));
            }
            spec.last_weighted_step().max(spec.fixings[window - 1])
        }
    })
}

/// Simulates path `index` of a pilot run, calling `visit(step, s)` after
/// every step, and returns whether (and how) it qualifies.
fn pilot_path(
    diffusion: &Diffusion,
    mode: PilotMode<'_>,
    horizon: usize,
    seed: u64,
    index: u64,
    mut visit: impl FnMut(usize, f64),
) -> Result<Qualifier> {
    let mut rng = stream(seed, index);
    let mut s = [diffusion.basket().s0()[0]];
    let mut z = [0.0];
    let mut alive = true;
    let mut escape: Qualifier = None;
    for n in 0..horizon {
        diffusion.advance(n, &mut s, &mut z, &mut rng)?;
        let step = n + 1;
        visit(step, s[0]);
        match mode {
            PilotMode::Survivors { option, .. } => {
                if let Ok(i) = option.monitoring.binary_search(&step) {
                    alive &= option.inside(i, &s);
                }
            }
            PilotMode::Escapers { spec, window } => {
                if escape.is_none() {
                    escape = escape_side(spec, window, step, s[0]);
                }
            }
        }
    }
    Ok(match mode {
        PilotMode::Survivors { .. } => alive.then_some(EscapeSide::Right),
        PilotMode::Escapers { .. } => escape,
    })
}

fn classify(
    diffusion: &Diffusion,
    mode: PilotMode<'_>,
    m1: usize,
    seed: u64,
) -> Result<(usize, Vec<Qualifier>)> {
    if diffusion.dimension() != 1 {
        return Err(config_err("pilot runs are one-dimensional"));
    }
    if m1 < 1000 {
        return Err(config_err("pilot needs at least 1000 paths"));
    }
    let horizon = pilot_horizon(diffusion, mode)?;
    let outcomes = (0..m1 as u64)
        .into_par_iter()
        .map(|i| pilot_path(diffusion, mode, horizon, seed, i, |_, _| {}))
        .collect::<Result<Vec<_>>>()?;
    Ok((horizon, outcomes))
}

/// Counts left/right escapers among `m1` plain TARN paths.
pub fn escape_split(
    diffusion: &Diffusion,
    spec: &TarnSpec,
    window: usize,
    m1: usize,
    seed: u64,
) -> Result<EscapeCounts> {
    let (_, outcomes) = classify(diffusion, PilotMode::Escapers { spec, window }, m1, seed)?;
    let left = outcomes
        .iter()
        .filter(|o| **o == Some(EscapeSide::Left))
        .count();
    let right = outcomes
        .iter()
        .filter(|o| **o == Some(EscapeSide::Right))
        .count();
    Ok(EscapeCounts {
        left,
        right,
        total: m1,
    })
}

/// Welford accumulators over a range of steps.
struct StepMoments {
    start: usize,
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StepMoments {
    fn new(start: usize, end: usize) -> Self {
        Self {
            start,
            count: 0,
            mean: vec![0.0; end - start],
            m2: vec![0.0; end - start],
        }
    }

    fn push(&mut self, step: usize, x: f64) {
        if step < self.start || step >= self.start + self.mean.len() {
            return;
        }
        let i = step - self.start;
        // count already incremented for this path
        let delta = x - self.mean[i];
        self.mean[i] += delta / self.count as f64;
        self.m2[i] += delta * (x - self.mean[i]);
    }

    fn into_schedule(self, s0: f64) -> Result<GaussianSchedule> {
        if self.count < 2 {
            return Err(Error::PilotTooSmall {
                found: self.count,
                needed: 2,
            });
        }
        let n = self.count as f64;
        let schedule = GaussianSchedule {
            start: self.start,
            mean_offsets: self.mean.iter().map(|m| m - s0).collect(),
            stds: self.m2.iter().map(|v| (v / (n - 1.0)).sqrt()).collect(),
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Fits a pilot target from `m1` one-dimensional plain paths.
///
/// Paths are classified first; qualifying ones are then replayed from their
/// own streams to accumulate per-step means and standard deviations.
pub fn fit_pilot_target(
    diffusion: &Diffusion,
    m1: usize,
    seed: u64,
    mode: PilotMode<'_>,
) -> Result<PilotTarget> {
    let (horizon, outcomes) = classify(diffusion, mode, m1, seed)?;
    let qualifying = outcomes.iter().filter(|o| o.is_some()).count();
    if qualifying < MIN_PILOT_PATHS {
        return Err(Error::PilotTooSmall {
            found: qualifying,
            needed: MIN_PILOT_PATHS,
        });
    }
    let s0 = diffusion.basket().s0()[0];
    let (start, end) = match mode {
        PilotMode::Survivors { start, .. } => (start, horizon),
        PilotMode::Escapers { spec, .. } => (1, spec.last_weighted_step() + 1),
    };
    let mut left = StepMoments::new(start, end);
    let mut right = StepMoments::new(start, end);
    for (i, outcome) in outcomes.iter().enumerate() {
        let Some(side) = outcome else { continue };
        let acc = match side {
            EscapeSide::Left => &mut left,
            EscapeSide::Right => &mut right,
        };
        acc.count += 1;
        pilot_path(diffusion, mode, horizon, seed, i as u64, |step, x| {
            acc.push(step, x)
        })?;
    }
    Ok(match mode {
        PilotMode::Survivors { .. } => PilotTarget::Survivors {
            schedule: right.into_schedule(s0)?,
            qualifying,
            total: m1,
        },
        PilotMode::Escapers { .. } => {
            let (left_count, right_count) = (left.count, right.count);
            PilotTarget::Escapers {
                left: left.into_schedule(s0)?,
                right: right.into_schedule(s0)?,
                left_count,
                right_count,
                total: m1,
                left_fraction: left_count as f64 / (left_count + right_count) as f64,
            }
        }
    })
}

/// Particle carrying its whole (one-dimensional) path for the weighted
/// pilot.
#[derive(Debug, Clone)]
struct PilotParticle {
    path: Vec<f64>,
    log_h: f64,
}

struct WeightedPilotModel<'a> {
    diffusion: &'a Diffusion,
    potentials: PotentialSequence,
    horizon: usize,
}

impl SmcModel for WeightedPilotModel<'_> {
    type State = PilotParticle;

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn initial_state(&self) -> PilotParticle {
        let s0 = self.diffusion.basket().s0()[0];
        let mut path = Vec::with_capacity(self.horizon + 1);
        path.push(s0);
        PilotParticle {
            path,
            log_h: self.potentials.log_h0(&[s0]),
        }
    }

    fn advance(&self, step: usize, state: &mut PilotParticle, rng: &mut StreamRng) -> Result<f64> {
        let mut s = [*state.path.last().expect("path starts at s0")];
        self.diffusion.advance(step - 1, &mut s, &mut [0.0], rng)?;
        state.path.push(s[0]);
        let (log_g, log_h) = self.potentials.log_potential(step, state.log_h, &s);
        state.log_h = log_h;
        Ok(log_g)
    }
}

/// Weighted per-step moments.
fn weighted_schedule(
    s0: f64,
    last: usize,
    members: &[(&PilotParticle, f64)],
) -> Result<GaussianSchedule> {
    if members.len() < 2 {
        return Err(Error::PilotTooSmall {
            found: members.len(),
            needed: 2,
        });
    }
    let v1: f64 = members.iter().map(|m| m.1).sum();
    let v2: f64 = members.iter().map(|m| m.1 * m.1).sum();
    let mut mean_offsets = Vec::with_capacity(last);
    let mut stds = Vec::with_capacity(last);
    for n in 1..=last {
        let mean = members.iter().map(|(p, w)| w * p.path[n]).sum::<f64>() / v1;
        let ss = members
            .iter()
            .map(|(p, w)| w * (p.path[n] - mean).powi(2))
            .sum::<f64>();
        // unbiased for reliability weights
        let var = ss / (v1 - v2 / v1);
        mean_offsets.push(mean - s0);
        stds.push(var.sqrt());
    }
    let schedule = GaussianSchedule {
        start: 1,
        mean_offsets,
        stds,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Escaper pilot from an SMC run with `proposal` as weighting function.
///
/// Plain paths rarely leave the band when the volatility is low. Here the
/// particles are pushed out by `proposal`, and each final particle's path
/// is weighted by its normalized weight over `h_last`, which makes the
/// ancestral paths a weighted sample of the unweighted path law. Escaper
/// moments and the left/right split are weighted accordingly.
pub fn fit_weighted_escaper_pilot(
    diffusion: &Diffusion,
    spec: &TarnSpec,
    window: usize,
    m1: usize,
    seed: u64,
    proposal: Weighting,
) -> Result<PilotTarget> {
    if diffusion.dimension() != 1 {
        return Err(config_err("pilot runs are one-dimensional"));
    }
    if m1 < 1000 {
        return Err(config_err("pilot needs at least 1000 paths"));
    }
    let horizon = pilot_horizon(diffusion, PilotMode::Escapers { spec, window })?;
    let last = spec.last_weighted_step();
    let model = WeightedPilotModel {
        diffusion,
        potentials: PotentialSequence::Terminal {
            weighting: proposal,
            last,
        },
        horizon,
    };
    let out = Smc::new(&model, SmcConfig::adaptive(m1, seed)).run()?;
    let sys = &out.system;
    if sys.extinct {
        return Err(Error::PilotTooSmall {
            found: 0,
            needed: MIN_PILOT_PATHS,
        });
    }
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (p, &w) in sys.particles.iter().zip(&sys.norm_weights) {
        if w == 0.0 {
            continue;
        }
        let side = spec.fixings[..window]
            .iter()
            .find_map(|&t| escape_side(spec, window, t, p.path[t]));
        let omega = w * (-p.log_h).exp();
        match side {
            Some(EscapeSide::Left) => left.push((p, omega)),
            Some(EscapeSide::Right) => right.push((p, omega)),
            None => {}
        }
    }
    let found = left.len() + right.len();
    if found < MIN_PILOT_PATHS {
        return Err(Error::PilotTooSmall {
            found,
            needed: MIN_PILOT_PATHS,
        });
    }
    let wl: f64 = left.iter().map(|m| m.1).sum();
    let wr: f64 = right.iter().map(|m| m.1).sum();
    let s0 = diffusion.basket().s0()[0];
    Ok(PilotTarget::Escapers {
        left: weighted_schedule(s0, last, &left)?,
        right: weighted_schedule(s0, last, &right)?,
        left_count: left.len(),
        right_count: right.len(),
        total: m1,
        left_fraction: wl / (wl + wr),
    })
}

/// Survivor target from a fitted pilot.
pub fn pilot_target(pilot: &PilotTarget, marginal: MarginalLaw) -> Result<Weighting> {
    match pilot {
        PilotTarget::Survivors { schedule, .. } => Ok(Weighting::Pilot(GaussianTarget::new(
            marginal,
            schedule.clone(),
        )?)),
        PilotTarget::Escapers { .. } => {
            Err(config_err("escaper pilot cannot build a survivor target"))
        }
    }
}

/// Mixture target from an escaper pilot. `weights` overrides the pilot's
/// empirical side proportions.
pub fn mixture_target(
    pilot: &PilotTarget,
    marginal: MarginalLaw,
    last: usize,
    weights: Option<(f64, f64)>,
) -> Result<Weighting> {
    match pilot {
        PilotTarget::Escapers { left, right, .. } => {
            let w = weights
                .or_else(|| pilot.mixture_weights())
                .expect("escaper pilot has weights");
            Ok(Weighting::Mixture(MixtureTarget::new(
                marginal,
                w,
                left.clone(),
                right.clone(),
                last,
            )?))
        }
        PilotTarget::Survivors { .. } => Err(config_err("mixture target needs an escaper pilot")),
    }
}
