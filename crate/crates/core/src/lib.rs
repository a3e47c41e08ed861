//! Sequential Monte Carlo pricing of path-dependent options.
//!
//! The crate prices discretely monitored knock-out barrier options and
//! target accrual redemption notes (TARNs) under zero-drift Black-Scholes
//! dynamics with constant or local volatility. Besides plain Monte Carlo it
//! provides two particle estimators: resampling at monitoring dates, and a
//! weighting-function scheme where positive functions `h_n` steer particles
//! towards the region where the payoff is non-zero. Ratios of successive
//! weighting functions become the SMC potentials, so the weighting changes
//! the variance of the estimator but never its expectation.
//!
//! Module map:
//!
//! * [`diffusion`]: Euler-Maruyama paths and marginal laws.
//! * [`smc`]: the generic particle engine (ESS, multinomial resampling,
//!   normalizing constant).
//! * [`weighting`]: weighting functions, potentials and pilot targets.
//! * [`products`]: barrier and TARN payoffs.
//! * [`pricing`]: the three estimators wired together.
//! * [`unbiasedness`]: instrumented runs and the unbiasedness check.
//! * [`experiments`]: replicate harness and CSV output.
//! * [`scenario`]: the run-configuration file format.

pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod gaussian;
pub mod pricing;
pub mod products;
pub mod rng;
pub mod scenario;
pub mod smc;
pub mod unbiasedness;
pub mod weighting;

pub use diffusion::{AssetBasket, Diffusion, LocalVolCurve, PathState, TimeGrid, VolatilityModel};
pub use error::{Error, Result};
pub use pricing::{price, price_tarn, Method, PricingRequest, PricingResult, Product};
pub use products::{BarrierOption, CashflowState, OptionKind, TarnSpec};
pub use smc::{ParticleSystem, ResampleMode, Smc, SmcConfig, SmcModel};
pub use weighting::{PilotTarget, PotentialSequence, Weighting, WeightingFunction};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
