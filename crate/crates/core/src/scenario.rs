//! Run configuration file (TOML) and its translation into pricing
//! requests, pilot fits and experiment plans.
//!
//! ```toml
//! seed = 2024
//!
//! [model]
//! dimension = 10
//! s0 = 100.0
//! volatility = 0.08            # or [0.08, 0.1], "barrier_preset", "tarn_preset",
//!                              # or { knots = [[1e-6, 0.1], [1e6, 0.1]] }
//!
//! [product]
//! type = "barrier"
//! monitoring_days = [540]
//! lower = 95.0
//! upper = 105.0
//! strike = 100.0
//!
//! [weighting]
//! kind = "bridge"
//!
//! [plan]
//! sweep = "dimension"
//! values = [5, 10, 15]
//! methods = ["plain_mc", "smc_weighted"]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{
    AssetBasket, Diffusion, LocalVolCurve, MarginalLaw, TimeGrid, VolatilityModel, DAYS_PER_YEAR,
};
use crate::error::{config_err, Result};
use crate::experiments::ExperimentPlan;
use crate::pricing::{Method, PricingRequest, Product};
use crate::products::{BarrierOption, OptionKind, TarnSpec};
use crate::rng::derive_seed;
use crate::smc::{ResampleMode, SmcConfig};
use crate::unbiasedness::{BarrierToy, TarnToy, TestFunction, UnbiasReport};
use crate::weighting::{
    brownian_bridge_target, default_start, fit_pilot_target, fit_weighted_escaper_pilot,
    mixture_target, pilot_target, PilotMode, PilotTarget, TarnDensityCorrected, TarnNaive,
    Weighting,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub model: ModelConfig,
    pub product: ProductConfig,
    #[serde(default)]
    pub smc: SmcSection,
    #[serde(default)]
    pub weighting: WeightingConfig,
    #[serde(default)]
    pub plan: Option<PlanConfig>,
    #[serde(default)]
    pub unbias: Option<UnbiasConfig>,
}

fn default_seed() -> u64 {
    2024
}

fn default_method() -> Method {
    Method::SmcWeighted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VolatilitySpec {
    Scalar(f64),
    PerAsset(Vec<f64>),
    Preset(String),
    Curve { knots: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "one")]
    pub dimension: usize,
    #[serde(default = "hundred")]
    pub s0: f64,
    #[serde(default = "default_vol")]
    pub volatility: VolatilitySpec,
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub correlation: Option<Vec<Vec<f64>>>,
}

fn one() -> usize {
    1
}

fn hundred() -> f64 {
    100.0
}

fn default_vol() -> VolatilitySpec {
    VolatilitySpec::Scalar(0.08)
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dimension: 1,
            s0: 100.0,
            volatility: default_vol(),
            drift: 0.0,
            correlation: None,
        }
    }
}

impl ModelConfig {
    pub fn volatility_model(&self) -> Result<VolatilityModel> {
        Ok(match &self.volatility {
            VolatilitySpec::Scalar(s) => VolatilityModel::Constant(vec![*s; self.dimension]),
            VolatilitySpec::PerAsset(v) => VolatilityModel::Constant(v.clone()),
            VolatilitySpec::Preset(name) => VolatilityModel::Local(match name.as_str() {
                "barrier_preset" => LocalVolCurve::barrier_preset(),
                "tarn_preset" => LocalVolCurve::tarn_preset(),
                other => return Err(config_err(format!("unknown volatility preset {other:?}"))),
            }),
            VolatilitySpec::Curve { knots } => VolatilityModel::Local(LocalVolCurve::new(knots)?),
        })
    }

    pub fn is_local(&self) -> bool {
        matches!(
            self.volatility,
            VolatilitySpec::Preset(_) | VolatilitySpec::Curve { .. }
        )
    }

    pub fn basket(&self) -> Result<AssetBasket> {
        let s0 = vec![self.s0.ln(); self.dimension];
        match &self.correlation {
            Some(c) => AssetBasket::correlated(s0, c),
            None => AssetBasket::independent(s0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProductConfig {
    Barrier {
        /// Monitoring dates in days; the last one is the horizon.
        monitoring_days: Vec<usize>,
        #[serde(default = "default_lower")]
        lower: f64,
        #[serde(default = "default_upper")]
        upper: f64,
        #[serde(default = "hundred")]
        strike: f64,
        #[serde(default = "default_kind")]
        kind: OptionKind,
    },
    Tarn {
        #[serde(default = "default_period")]
        period_days: usize,
        #[serde(default = "default_fixings")]
        fixings: usize,
        /// Days per simulation step: defaults to the period under constant
        /// volatility and to one day under local volatility.
        #[serde(default)]
        step_days: Option<usize>,
        #[serde(default = "default_gain")]
        gain_cap: f64,
        #[serde(default = "hundred")]
        loss_cap: f64,
        #[serde(default = "hundred")]
        shift: f64,
        #[serde(default = "default_weighted")]
        weighted_fixings: usize,
    },
}

fn default_lower() -> f64 {
    95.0
}
fn default_upper() -> f64 {
    105.0
}
fn default_kind() -> OptionKind {
    OptionKind::Call
}
fn default_period() -> usize {
    30
}
fn default_fixings() -> usize {
    24
}
fn default_gain() -> f64 {
    200.0
}
fn default_weighted() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcSection {
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_threshold")]
    pub ess_threshold: f64,
    #[serde(default = "default_resample")]
    pub resample: ResampleMode,
}

fn default_particles() -> usize {
    10_000
}
fn default_threshold() -> f64 {
    0.5
}
fn default_resample() -> ResampleMode {
    ResampleMode::Adaptive
}

impl Default for SmcSection {
    fn default() -> Self {
        Self {
            particles: default_particles(),
            ess_threshold: default_threshold(),
            resample: default_resample(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingKind {
    Unit,
    Bridge,
    Pilot,
    TarnNaive,
    TarnDensity,
    Mixture,
}

impl std::str::FromStr for WeightingKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "unit" => Self::Unit,
            "bridge" => Self::Bridge,
            "pilot" => Self::Pilot,
            "tarn_naive" => Self::TarnNaive,
            "tarn_density" => Self::TarnDensity,
            "mixture" => Self::Mixture,
            other => return Err(config_err(format!("unknown weighting {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingConfig {
    #[serde(default = "default_weighting")]
    pub kind: WeightingKind,
    #[serde(default = "default_inflation")]
    pub bridge_inflation: f64,
    /// Pilot size `M₁`; defaults to 10⁴, or 10⁵ for the TARN pilot under
    /// local volatility.
    #[serde(default)]
    pub pilot_paths: Option<usize>,
    /// Constant volatility of the pilot run; `None` runs the pilot on the
    /// priced model itself (one asset).
    #[serde(default)]
    pub pilot_sigma: Option<f64>,
    #[serde(default)]
    pub pilot_seed: Option<u64>,
    /// Load a saved pilot instead of fitting one.
    #[serde(default)]
    pub pilot_file: Option<PathBuf>,
    /// Fixings within which a TARN pilot path counts as escaped; defaults
    /// to 4, or to the weighted fixings under local volatility.
    #[serde(default)]
    pub escape_window: Option<usize>,
    /// Weighting that pushes TARN pilot particles out of the band; `unit`
    /// fits from plain paths.
    #[serde(default = "default_proposal")]
    pub pilot_proposal: WeightingKind,
    #[serde(default)]
    pub mixture_weights: Option<(f64, f64)>,
    /// Volatility of the approximate marginal used under local volatility
    /// by the density-corrected and mixture TARN weights.
    #[serde(default = "default_crude")]
    pub crude_vol: f64,
    /// Multiplies every `h_n`, including `h_0`.
    #[serde(default)]
    pub scale: Option<f64>,
}

fn default_weighting() -> WeightingKind {
    WeightingKind::Bridge
}
fn default_inflation() -> f64 {
    crate::weighting::DEFAULT_BRIDGE_INFLATION
}
fn default_proposal() -> WeightingKind {
    WeightingKind::TarnNaive
}
fn default_crude() -> f64 {
    0.04
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            kind: default_weighting(),
            bridge_inflation: default_inflation(),
            pilot_paths: None,
            pilot_sigma: None,
            pilot_seed: None,
            pilot_file: None,
            escape_window: None,
            pilot_proposal: default_proposal(),
            mixture_weights: None,
            crude_vol: default_crude(),
            scale: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    None,
    Dimension,
    Volatility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    #[serde(default = "default_axis")]
    pub sweep: SweepAxis,
    #[serde(default)]
    pub values: Vec<f64>,
    /// `plain_mc`, `smc_monitor`, `smc_weighted` or `smc_weighted:<kind>`.
    pub methods: Vec<String>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub record_runtime: bool,
}

fn default_axis() -> SweepAxis {
    SweepAxis::None
}
fn default_replicates() -> usize {
    50
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnbiasInstance {
    BarrierToy,
    TarnToy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnbiasConfig {
    #[serde(default = "default_instance")]
    pub instance: UnbiasInstance,
    #[serde(default = "default_psi")]
    pub psi: TestFunction,
    #[serde(default = "default_weighting")]
    pub weighting: WeightingKind,
    #[serde(default = "default_unbias_reps")]
    pub replicates: usize,
    #[serde(default = "default_unbias_particles")]
    pub particles: usize,
    #[serde(default = "default_unbias_threshold")]
    pub ess_threshold: f64,
    #[serde(default = "default_oracle_paths")]
    pub oracle_paths: usize,
}

fn default_instance() -> UnbiasInstance {
    UnbiasInstance::BarrierToy
}
fn default_psi() -> TestFunction {
    TestFunction::One
}
fn default_unbias_reps() -> usize {
    2000
}
fn default_unbias_particles() -> usize {
    64
}
fn default_unbias_threshold() -> f64 {
    0.8
}
fn default_oracle_paths() -> usize {
    10_000_000
}

impl Default for UnbiasConfig {
    fn default() -> Self {
        Self {
            instance: default_instance(),
            psi: default_psi(),
            weighting: default_weighting(),
            replicates: default_unbias_reps(),
            particles: default_unbias_particles(),
            ess_threshold: default_unbias_threshold(),
            oracle_paths: default_oracle_paths(),
        }
    }
}

impl UnbiasConfig {
    /// Runs the unbiasedness check on the configured toy instance.
    pub fn run(&self, seed: u64) -> Result<UnbiasReport> {
        let mut smc = SmcConfig::adaptive(self.particles, seed);
        smc.ess_threshold_fraction = self.ess_threshold;
        match self.instance {
            UnbiasInstance::BarrierToy => {
                let toy = BarrierToy::default();
                let w = match self.weighting {
                    WeightingKind::Unit => Weighting::Unit,
                    WeightingKind::Bridge => toy.bridge()?,
                    other => {
                        return Err(config_err(format!(
                            "the barrier toy takes unit or bridge weighting, not {other:?}"
                        )))
                    }
                };
                toy.run(w, self.psi, &smc, self.replicates)
            }
            UnbiasInstance::TarnToy => {
                let toy = TarnToy::default();
                let diff = toy.diffusion()?;
                let spec = toy.spec();
                let last = spec.last_weighted_step();
                let s0 = toy.s0.ln();
                let w = match self.weighting {
                    WeightingKind::Unit => Weighting::Unit,
                    WeightingKind::TarnNaive => Weighting::TarnNaive(TarnNaive { s0, last }),
                    WeightingKind::TarnDensity => Weighting::TarnDensity(TarnDensityCorrected {
                        marginal: MarginalLaw::for_diffusion(&diff)?,
                        last,
                    }),
                    other => {
                        return Err(config_err(format!(
                            "the TARN toy takes unit, tarn_naive or tarn_density weighting, not {other:?}"
                        )))
                    }
                };
                let oracle = toy.oracle(self.oracle_paths, derive_seed(seed, &[u64::MAX]))?;
                toy.run(w, &smc, self.replicates, oracle)
            }
        }
    }
}

/// Hex SHA-256 of the compact JSON text of `value`.
pub fn hash_json(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses a dotted `key=value` override; the value is read as TOML and
/// falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(format!("{p} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(toml::from_str(text)?)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        Ok(table.try_into()?)
    }

    /// Reads `path` (if any), applies overrides, then parses.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    /// SHA-256 of the canonical serialized configuration.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn smc_config(&self) -> SmcConfig {
        SmcConfig {
            n_particles: self.smc.particles,
            ess_threshold_fraction: self.smc.ess_threshold,
            resample_mode: self.smc.resample.clone(),
            master_seed: self.seed,
            workers: self.workers,
        }
    }

    fn grid(&self) -> Result<TimeGrid> {
        let dt = 1.0 / DAYS_PER_YEAR;
        match &self.product {
            ProductConfig::Barrier {
                monitoring_days, ..
            } => {
                let n = *monitoring_days
                    .last()
                    .ok_or_else(|| config_err("no monitoring dates"))?;
                TimeGrid::new(n, dt, monitoring_days.clone())
            }
            ProductConfig::Tarn {
                period_days,
                fixings,
                step_days,
                ..
            } => {
                let step = self.tarn_step_days(*period_days, *step_days)?;
                let per = period_days / step;
                TimeGrid::new(
                    per * fixings,
                    step as f64 * dt,
                    (1..=*fixings).map(|i| i * per).collect(),
                )
            }
        }
    }

    fn tarn_step_days(&self, period: usize, step: Option<usize>) -> Result<usize> {
        let step = step.unwrap_or(if self.model.is_local() { 1 } else { period });
        if step == 0 || !period.is_multiple_of(step) {
            return Err(config_err("step_days must divide period_days"));
        }
        Ok(step)
    }

    pub fn diffusion(&self) -> Result<Diffusion> {
        Ok(Diffusion::new(
            self.model.basket()?,
            self.model.volatility_model()?,
            self.grid()?,
        )?
        .with_drift(self.model.drift))
    }

    pub fn product(&self) -> Result<Product> {
        let grid = self.grid()?;
        Ok(match &self.product {
            ProductConfig::Barrier {
                monitoring_days,
                lower,
                upper,
                strike,
                kind,
            } => Product::Barrier(BarrierOption::uniform(
                self.model.dimension,
                monitoring_days.clone(),
                *lower,
                *upper,
                *strike,
                *kind,
            )?),
            ProductConfig::Tarn {
                gain_cap,
                loss_cap,
                shift,
                weighted_fixings,
                ..
            } => {
                let spec = TarnSpec {
                    fixings: grid.monitoring().to_vec(),
                    gain_cap: *gain_cap,
                    loss_cap: *loss_cap,
                    shift: *shift,
                    weighted_fixings: *weighted_fixings,
                };
                spec.validate(grid.n_steps())?;
                Product::Tarn(spec)
            }
        })
    }

    /// Same configuration with the swept parameter set to `value`.
    pub fn at_sweep(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut c = self.clone();
        match axis {
            SweepAxis::None => {}
            SweepAxis::Dimension => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(config_err(format!(
                        "dimension sweep value {value} is not a positive integer"
                    )));
                }
                c.model.dimension = value as usize;
                if let VolatilitySpec::PerAsset(_) = c.model.volatility {
                    return Err(config_err(
                        "dimension sweep needs a scalar or local volatility",
                    ));
                }
            }
            SweepAxis::Volatility => {
                if !(value >= 0.0) {
                    return Err(config_err("volatility sweep values must be non-negative"));
                }
                c.model.volatility = VolatilitySpec::Scalar(value);
            }
        }
        Ok(c)
    }

    fn pilot_config(&self) -> Self {
        let mut one = self.clone();
        one.model.dimension = 1;
        one.model.correlation = None;
        let default_sigma = match self.product {
            ProductConfig::Barrier { .. } => Some(0.08),
            ProductConfig::Tarn { .. } if !self.model.is_local() => Some(0.05),
            ProductConfig::Tarn { .. } => None,
        };
        if let Some(s) = self.weighting.pilot_sigma.or(default_sigma) {
            one.model.volatility = VolatilitySpec::Scalar(s);
        } else if let VolatilitySpec::PerAsset(v) = &one.model.volatility {
            one.model.volatility = VolatilitySpec::Scalar(v[0]);
        }
        one
    }

    fn pilot_diffusion(&self) -> Result<Diffusion> {
        self.pilot_config().diffusion()
    }

    /// Fits the pilot target this configuration calls for.
    pub fn fit_pilot(&self) -> Result<PilotTarget> {
        let diff = self.pilot_diffusion()?;
        let seed = self.weighting.pilot_seed.unwrap_or(self.seed);
        match self.product()? {
            Product::Barrier(_) => {
                let ProductConfig::Barrier {
                    monitoring_days,
                    lower,
                    upper,
                    strike,
                    kind,
                } = &self.product
                else {
                    unreachable!()
                };
                let opt1 = BarrierOption::uniform(
                    1,
                    monitoring_days.clone(),
                    *lower,
                    *upper,
                    *strike,
                    *kind,
                )?;
                let k = *monitoring_days.last().unwrap();
                fit_pilot_target(
                    &diff,
                    self.weighting.pilot_paths.unwrap_or(10_000),
                    seed,
                    PilotMode::Survivors {
                        option: &opt1,
                        start: default_start(k),
                    },
                )
            }
            Product::Tarn(spec) => {
                let local = self.model.is_local();
                let m1 = self
                    .weighting
                    .pilot_paths
                    .unwrap_or(if local { 100_000 } else { 10_000 });
                let window = self.weighting.escape_window.unwrap_or(if local {
                    spec.weighted_fixings
                } else {
                    4
                });
                match self.weighting.pilot_proposal {
                    WeightingKind::Unit => fit_pilot_target(
                        &diff,
                        m1,
                        seed,
                        PilotMode::Escapers {
                            spec: &spec,
                            window,
                        },
                    ),
                    WeightingKind::Mixture => {
                        Err(config_err("the mixture cannot propose its own pilot"))
                    }
                    kind => {
                        let proposal = self
                            .pilot_config()
                            .weighting_of(kind, &PilotCache::default())?;
                        fit_weighted_escaper_pilot(&diff, &spec, window, m1, seed, proposal)
                    }
                }
            }
        }
    }

    fn pilot(&self, cache: &PilotCache) -> Result<PilotTarget> {
        if let Some(p) = &self.weighting.pilot_file {
            return PilotTarget::load(p);
        }
        cache.get_or_fit(self)
    }

    /// Marginal used to turn TARN targets into weights: exact under
    /// constant volatility, the fixed-volatility proxy under local volatility.
    fn tarn_marginal(&self, diffusion: &Diffusion) -> Result<MarginalLaw> {
        if self.model.is_local() {
            Ok(MarginalLaw::fixed_vol(
                diffusion.basket().s0().to_vec(),
                self.weighting.crude_vol,
                diffusion.grid().dt(),
            ))
        } else {
            MarginalLaw::for_diffusion(diffusion)
        }
    }

    pub fn weighting_of(&self, kind: WeightingKind, cache: &PilotCache) -> Result<Weighting> {
        let diffusion = self.diffusion()?;
        let product = self.product()?;
        let w = match (kind, &product) {
            (WeightingKind::Unit, _) => Weighting::Unit,
            (WeightingKind::Bridge, Product::Barrier(opt)) => {
                Weighting::Bridge(brownian_bridge_target(
                    opt,
                    MarginalLaw::for_diffusion(&diffusion)?,
                    diffusion.grid().dt(),
                    self.weighting.bridge_inflation,
                )?)
            }
            (WeightingKind::Pilot, Product::Barrier(_)) => {
                pilot_target(&self.pilot(cache)?, MarginalLaw::for_diffusion(&diffusion)?)?
            }
            (WeightingKind::TarnNaive, Product::Tarn(spec)) => Weighting::TarnNaive(TarnNaive {
                s0: diffusion.basket().s0()[0],
                last: spec.last_weighted_step(),
            }),
            (WeightingKind::TarnDensity, Product::Tarn(spec)) => {
                Weighting::TarnDensity(TarnDensityCorrected {
                    marginal: self.tarn_marginal(&diffusion)?,
                    last: spec.last_weighted_step(),
                })
            }
            (WeightingKind::Mixture, Product::Tarn(spec)) => {
                let weights = self
                    .weighting
                    .mixture_weights
                    .or(self.model.is_local().then_some((0.3, 0.7)));
                mixture_target(
                    &self.pilot(cache)?,
                    self.tarn_marginal(&diffusion)?,
                    spec.last_weighted_step(),
                    weights,
                )?
            }
            (k, _) => {
                return Err(config_err(format!(
                    "weighting {k:?} does not apply to this product"
                )))
            }
        };
        Ok(match self.weighting.scale {
            Some(c) if c > 0.0 => w.scaled(c),
            Some(_) => return Err(config_err("weighting scale must be positive")),
            None => w,
        })
    }

    /// Request for a method label (`plain_mc`, `smc_monitor`,
    /// `smc_weighted`, `smc_weighted:<kind>`).
    pub fn request_for(&self, label: &str, cache: &PilotCache) -> Result<PricingRequest> {
        let (method, kind) = parse_method_label(label, self.weighting.kind)?;
        let mut req = PricingRequest::new(
            self.diffusion()?,
            self.product()?,
            method,
            self.smc_config(),
        );
        if method == Method::SmcWeighted {
            req = req.with_weighting(self.weighting_of(kind, cache)?);
        }
        Ok(req)
    }

    pub fn request(&self, cache: &PilotCache) -> Result<PricingRequest> {
        self.request_for(self.method.label(), cache)
    }

    pub fn plan(&self) -> Result<(ExperimentPlan, SweepAxis)> {
        let p = self
            .plan
            .as_ref()
            .ok_or_else(|| config_err("missing [plan] section"))?;
        let sweep = match p.sweep {
            SweepAxis::None => vec![0.0],
            _ if p.values.is_empty() => return Err(config_err("sweep is empty")),
            _ => p.values.clone(),
        };
        Ok((
            ExperimentPlan {
                sweep,
                methods: p.methods.clone(),
                replicates: p.replicates,
                master_seed: self.seed,
                workers: self.workers,
                record_runtime: p.record_runtime,
            },
            p.sweep,
        ))
    }
}

pub fn parse_method_label(
    label: &str,
    default_kind: WeightingKind,
) -> Result<(Method, WeightingKind)> {
    let (name, kind) = match label.split_once(':') {
        Some((n, k)) => (n, k.parse()?),
        None => (label, default_kind),
    };
    let method = match name {
        "plain_mc" => Method::PlainMc,
        "smc_monitor" => Method::SmcMonitor,
        "smc_weighted" => Method::SmcWeighted,
        other => return Err(config_err(format!("unknown method {other:?}"))),
    };
    Ok((method, kind))
}

/// Pilot fits keyed by the configuration that produced them, so a sweep
/// fits each distinct pilot once.
#[derive(Debug, Default)]
pub struct PilotCache {
    fitted: Mutex<BTreeMap<String, PilotTarget>>,
}

impl PilotCache {
    pub fn get_or_fit(&self, config: &RunConfig) -> Result<PilotTarget> {
        let key = serde_json::to_string(&(
            &config.product,
            &config.weighting,
            config.pilot_diffusion()?.vol(),
            config.seed,
        ))
        .map_err(crate::Error::from)
        .unwrap_or_default();
        if let Some(p) = self.fitted.lock().expect("pilot cache poisoned").get(&key) {
            return Ok(p.clone());
        }
        let p = config.fit_pilot()?;
        self.fitted
            .lock()
            .expect("pilot cache poisoned")
            .insert(key, p.clone());
        Ok(p)
    }
}
