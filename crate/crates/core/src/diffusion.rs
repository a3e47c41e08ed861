//! Log-price dynamics.
//!
//! Assets follow `dR = σ(t, R) R dW` with zero drift; we simulate the
//! log-price `s = ln R` with the explicit Euler-Maruyama scheme
//!
//! ```text
//! s_{n+1} = s_n + (μ - σ²(n, s_n) / 2) δt + σ(n, s_n) √δt Z_n,    Z_n ~ N(0, Σ)
//! ```
//!
//! where the volatility is frozen at the start of each step. `Σ` has unit
//! diagonal and is factorized once when the basket is built.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::gaussian::ln_pdf;

/// Days per year: one simulation step is one day, `δt = 1/360`.
pub const DAYS_PER_YEAR: f64 = 360.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    n_steps: usize,
    dt: f64,
    monitoring: Vec<usize>,
}

impl TimeGrid {
    pub fn new(n_steps: usize, dt: f64, monitoring: Vec<usize>) -> Result<Self> {
        if n_steps == 0 {
            return Err(config_err("time grid needs at least one step"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(config_err(format!(
                "step length must be positive, got {dt}"
            )));
        }
        if monitoring.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("monitoring steps must be strictly increasing"));
        }
        if monitoring.iter().any(|&t| t == 0 || t > n_steps) {
            return Err(config_err(format!(
                "monitoring steps must lie in 1..={n_steps}"
            )));
        }
        Ok(Self {
            n_steps,
            dt,
            monitoring,
        })
    }

    /// `m` periods of `k` days each, monitored at `T_i = i k`.
    pub fn daily_periods(k: usize, m: usize) -> Result<Self> {
        Self::new(k * m, 1.0 / DAYS_PER_YEAR, (1..=m).map(|i| i * k).collect())
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn monitoring(&self) -> &[usize] {
        &self.monitoring
    }

    /// Year fraction at step `n`.
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn is_monitoring(&self, n: usize) -> bool {
        self.monitoring.binary_search(&n).is_ok()
    }
}

/// Piecewise-linear volatility curve `σ(R)` in price space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalVolCurve {
    prices: Vec<f64>,
    vols: Vec<f64>,
}

impl LocalVolCurve {
    pub fn new(knots: &[(f64, f64)]) -> Result<Self> {
        if knots.len() < 2 {
            return Err(config_err(
                "local volatility curve needs at least two knots",
            ));
        }
        let (prices, vols): (Vec<f64>, Vec<f64>) = knots.iter().copied().unzip();
        if prices.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(config_err(
                "local volatility knot prices must be strictly increasing",
            ));
        }
        if vols.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(config_err("local volatility values must be positive"));
        }
        Ok(Self { prices, vols })
    }

    /// The curve used for the local-volatility barrier experiments.
    pub fn barrier_preset() -> Self {
        let prices = [
            1e-6, 60.0, 70.0, 80.0, 90.0, 100.0, 110.0, 120.0, 130.0, 140.0, 1e6,
        ];
        let vols = [
            0.12, 0.11, 0.105, 0.101, 0.097, 0.093, 0.098, 0.10, 0.105, 0.11, 0.17,
        ];
        Self {
            prices: prices.to_vec(),
            vols: vols.to_vec(),
        }
    }

    /// The curve used for the local-volatility TARN: minimum 0.035 at 100.
    pub fn tarn_preset() -> Self {
        let prices = [
            1e-6, 60.0, 90.0, 93.0, 98.0, 100.0, 103.0, 107.0, 110.0, 140.0, 1e6,
        ];
        let vols = [
            0.055, 0.051, 0.045, 0.041, 0.037, 0.035, 0.038, 0.04, 0.045, 0.05, 0.055,
        ];
        Self {
            prices: prices.to_vec(),
            vols: vols.to_vec(),
        }
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.prices.iter().copied().zip(self.vols.iter().copied())
    }

    /// Linear interpolation between the bracketing knots.
    pub fn vol(&self, price: f64) -> Result<f64> {
        let (min, max) = (self.prices[0], self.prices[self.prices.len() - 1]);
        if !(price >= min && price <= max) {
            return Err(Error::OutOfKnotRange { price, min, max });
        }
        let hi = self.prices.partition_point(|&p| p < price).max(1);
        let lo = hi - 1;
        let (p0, p1) = (self.prices[lo], self.prices[hi]);
        let w = (price - p0) / (p1 - p0);
        Ok(self.vols[lo] + w * (self.vols[hi] - self.vols[lo]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VolatilityModel {
    /// Annualized volatility per asset.
    Constant(Vec<f64>),
    /// One curve shared by every asset.
    Local(LocalVolCurve),
}

impl VolatilityModel {
    /// Volatility of asset `asset` at log-price `s`.
    #[inline]
    pub fn vol(&self, asset: usize, s: f64) -> Result<f64> {
        match self {
            VolatilityModel::Constant(sig) => Ok(sig[asset]),
            VolatilityModel::Local(curve) => curve.vol(s.exp()),
        }
    }

    pub fn constant_sigma(&self) -> Option<&[f64]> {
        match self {
            VolatilityModel::Constant(sig) => Some(sig),
            VolatilityModel::Local(_) => None,
        }
    }
}

/// Local volatility lookup for a model that must be of the local kind.
pub fn local_vol(model: &VolatilityModel, price: f64) -> Result<f64> {
    match model {
        VolatilityModel::Local(curve) => curve.vol(price),
        VolatilityModel::Constant(_) => Err(Error::Precondition(
            "local_vol needs a local volatility model".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum CorrelationFactor {
    Identity,
    /// Row-major `d × d` square root `B` with `B Bᵀ = Σ`.
    Dense(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetBasket {
    s0: Vec<f64>,
    factor: CorrelationFactor,
}

impl AssetBasket {
    /// Independent assets (`Σ = I`) starting at the given log-prices.
    pub fn independent(s0: Vec<f64>) -> Result<Self> {
        if s0.is_empty() {
            return Err(config_err("basket needs at least one asset"));
        }
        if s0.iter().any(|x| !x.is_finite()) {
            return Err(config_err("initial log-prices must be finite"));
        }
        Ok(Self {
            s0,
            factor: CorrelationFactor::Identity,
        })
    }

    /// `d` identical assets at price `price`.
    pub fn uniform_price(d: usize, price: f64) -> Result<Self> {
        if !(price > 0.0) {
            return Err(config_err("initial price must be positive"));
        }
        Self::independent(vec![price.ln(); d])
    }

    /// Basket with correlation matrix `Σ` (symmetric PSD, unit diagonal).
    pub fn correlated(s0: Vec<f64>, correlation: &[Vec<f64>]) -> Result<Self> {
        let mut basket = Self::independent(s0)?;
        let d = basket.dimension();
        if correlation.len() != d || correlation.iter().any(|r| r.len() != d) {
            return Err(config_err(format!("correlation matrix must be {d}×{d}")));
        }
        let is_identity =
            (0..d).all(|i| (0..d).all(|j| correlation[i][j] == if i == j { 1.0 } else { 0.0 }));
        if is_identity {
            return Ok(basket);
        }
        for i in 0..d {
            if (correlation[i][i] - 1.0).abs() > 1e-12 {
                return Err(config_err("correlation matrix must have unit diagonal"));
            }
            for j in 0..i {
                if (correlation[i][j] - correlation[j][i]).abs() > 1e-12 {
                    return Err(config_err("correlation matrix must be symmetric"));
                }
            }
        }
        let m = DMatrix::from_fn(d, d, |i, j| correlation[i][j]);
        let eig = SymmetricEigen::new(m);
        if eig.eigenvalues.iter().any(|&l| l < -1e-10) {
            return Err(config_err(
                "correlation matrix is not positive semi-definite",
            ));
        }
        let mut b = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                b[i * d + k] = eig.eigenvectors[(i, k)] * eig.eigenvalues[k].max(0.0).sqrt();
            }
        }
        basket.factor = CorrelationFactor::Dense(b);
        Ok(basket)
    }

    pub fn dimension(&self) -> usize {
        self.s0.len()
    }

    pub fn s0(&self) -> &[f64] {
        &self.s0
    }

    /// Fills `z` with one `N(0, Σ)` draw.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64]) {
        match &self.factor {
            CorrelationFactor::Identity => {
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
            }
            CorrelationFactor::Dense(b) => {
                let d = self.s0.len();
                let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                for (i, zi) in z.iter_mut().enumerate() {
                    *zi = b[i * d..(i + 1) * d]
                        .iter()
                        .zip(&eps)
                        .map(|(a, e)| a * e)
                        .sum();
                }
            }
        }
    }
}

/// Log-prices of the basket at grid step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub step: usize,
    pub logprices: Vec<f64>,
}

pub type ParticlePath = Vec<PathState>;

/// A basket, its volatility, and the time grid it is simulated on.
#[derive(Debug, Clone, PartialEq)]
pub struct Diffusion {
    basket: AssetBasket,
    vol: VolatilityModel,
    grid: TimeGrid,
    drift: f64,
}

impl Diffusion {
    pub fn new(basket: AssetBasket, vol: VolatilityModel, grid: TimeGrid) -> Result<Self> {
        if let VolatilityModel::Constant(sig) = &vol {
            if sig.len() != basket.dimension() {
                return Err(config_err(format!(
                    "{} volatilities given for {} assets",
                    sig.len(),
                    basket.dimension()
                )));
            }
            if sig.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
                return Err(config_err("volatilities must be non-negative"));
            }
        }
        Ok(Self {
            basket,
            vol,
            grid,
            drift: 0.0,
        })
    }

    /// Constant annual drift applied to every asset. Defaults to zero and
    /// is not exercised by the pricing experiments.
    pub fn with_drift(mut self, drift: f64) -> Self {
        self.drift = drift;
        self
    }

    pub fn basket(&self) -> &AssetBasket {
        &self.basket
    }

    pub fn vol(&self) -> &VolatilityModel {
        &self.vol
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dimension(&self) -> usize {
        self.basket.dimension()
    }

    /// Moves `s` from step `n` to `n + 1` given a correlated draw `z`.
    #[inline]
    pub fn step_in_place(&self, n: usize, s: &mut [f64], z: &[f64]) -> Result<()> {
        if n >= self.grid.n_steps {
            return Err(Error::Precondition(format!(
                "cannot step past the horizon ({n} >= {})",
                self.grid.n_steps
            )));
        }
        let dt = self.grid.dt;
        let sqrt_dt = dt.sqrt();
        for (j, (sj, zj)) in s.iter_mut().zip(z).enumerate() {
            if !sj.is_finite() {
                return Err(Error::NonFiniteState { step: n });
            }
            let sig = self.vol.vol(j, *sj)?;
            *sj += (self.drift - 0.5 * sig * sig) * dt + sig * sqrt_dt * zj;
        }
        Ok(())
    }

    /// Draws the noise and advances `s` from step `n` to `n + 1`.
    #[inline]
    pub fn advance<R: Rng + ?Sized>(
        &self,
        n: usize,
        s: &mut [f64],
        z: &mut [f64],
        rng: &mut R,
    ) -> Result<()> {
        self.basket.draw(rng, z);
        self.step_in_place(n, s, z)
    }
}

/// One Euler-Maruyama step from `state` with the correlated draw `z`.
pub fn euler_step(state: &PathState, diffusion: &Diffusion, z: &[f64]) -> Result<PathState> {
    if z.len() != state.logprices.len() {
        return Err(Error::Precondition(
            "draw and state dimensions differ".into(),
        ));
    }
    let mut next = state.logprices.clone();
    diffusion.step_in_place(state.step, &mut next, z)?;
    Ok(PathState {
        step: state.step + 1,
        logprices: next,
    })
}

/// A full path `s_0, …, s_N`. Deterministic given the stream.
pub fn simulate_path<R: Rng + ?Sized>(diffusion: &Diffusion, rng: &mut R) -> Result<ParticlePath> {
    let d = diffusion.dimension();
    let mut s = diffusion.basket.s0.clone();
    let mut z = vec![0.0; d];
    let mut path = Vec::with_capacity(diffusion.grid.n_steps + 1);
    path.push(PathState {
        step: 0,
        logprices: s.clone(),
    });
    for n in 0..diffusion.grid.n_steps {
        diffusion.advance(n, &mut s, &mut z, rng)?;
        path.push(PathState {
            step: n + 1,
            logprices: s.clone(),
        });
    }
    Ok(path)
}

/// Exact density of `s_n` for constant volatility: a product of Gaussians
/// with mean `s0 - σ² t_n / 2` and variance `σ² t_n`.
pub fn marginal_density_constant_vol(
    basket: &AssetBasket,
    sigma: &[f64],
    grid: &TimeGrid,
    n: usize,
    s: &[f64],
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Precondition(
            "marginal at step 0 is a point mass".into(),
        ));
    }
    let law = MarginalLaw::constant(basket.s0().to_vec(), sigma.to_vec(), grid.dt());
    Ok(law.ln_density(n, s).exp())
}

/// Iterated mean/volatility schedule approximating the marginals of a
/// local-volatility model: `E S_n ≈ E S_{n-1} - δt σ²(E S_{n-1}) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalVolMarginals {
    dt: f64,
    /// `means[j][n] ≈ E S_{n,j}`, `n = 0..=N`.
    means: Vec<Vec<f64>>,
    /// `vols[j][n] = σ(exp(E S_{n,j}))`.
    vols: Vec<Vec<f64>>,
}

impl LocalVolMarginals {
    pub fn n_steps(&self) -> usize {
        self.means[0].len() - 1
    }

    pub fn mean(&self, asset: usize, n: usize) -> f64 {
        self.means[asset][n]
    }

    /// `σ(E S_n)` for asset `asset`.
    pub fn vol_at(&self, asset: usize, n: usize) -> f64 {
        self.vols[asset][n]
    }

    /// Mean and variance of the approximate Gaussian marginal at step `n ≥ 1`.
    pub fn moments(&self, asset: usize, n: usize) -> (f64, f64) {
        let v = self.vols[asset][n - 1];
        let mean = self.means[asset][n - 1] - 0.5 * v * v * self.dt;
        (mean, v * v * n as f64 * self.dt)
    }
}

pub fn approx_marginal_local_vol(
    curve: &LocalVolCurve,
    grid: &TimeGrid,
    s0: &[f64],
) -> Result<LocalVolMarginals> {
    let dt = grid.dt();
    let n_steps = grid.n_steps();
    let mut means = Vec::with_capacity(s0.len());
    let mut vols = Vec::with_capacity(s0.len());
    for &start in s0 {
        let mut m = Vec::with_capacity(n_steps + 1);
        let mut v = Vec::with_capacity(n_steps + 1);
        let mut cur = start;
        for _ in 0..=n_steps {
            let sig = curve.vol(cur.exp())?;
            m.push(cur);
            v.push(sig);
            cur -= 0.5 * dt * sig * sig;
        }
        means.push(m);
        vols.push(v);
    }
    Ok(LocalVolMarginals { dt, means, vols })
}

/// Gaussian marginal law of `s_n` used to turn target densities into
/// weighting functions `h_n = p̃_n / p_n`.
#[derive(Debug, Clone, PartialEq)]
pub enum MarginalLaw {
    /// Exact law under constant volatility (per asset).
    Constant {
        s0: Vec<f64>,
        sigma: Vec<f64>,
        dt: f64,
    },
    /// Iterated approximation for local volatility.
    LocalApprox {
        s0: Vec<f64>,
        schedule: LocalVolMarginals,
    },
}

impl MarginalLaw {
    pub fn constant(s0: Vec<f64>, sigma: Vec<f64>, dt: f64) -> Self {
        MarginalLaw::Constant { s0, sigma, dt }
    }

    /// The law the diffusion would have if its volatility were the
    /// constant `vol` for every asset.
    pub fn fixed_vol(s0: Vec<f64>, vol: f64, dt: f64) -> Self {
        let sigma = vec![vol; s0.len()];
        MarginalLaw::Constant { s0, sigma, dt }
    }

    /// Exact law for constant volatility, iterated approximation otherwise.
    pub fn for_diffusion(diffusion: &Diffusion) -> Result<Self> {
        let s0 = diffusion.basket().s0().to_vec();
        Ok(match diffusion.vol() {
            VolatilityModel::Constant(sig) => {
                Self::constant(s0, sig.clone(), diffusion.grid().dt())
            }
            VolatilityModel::Local(curve) => {
                let schedule = approx_marginal_local_vol(curve, diffusion.grid(), &s0)?;
                MarginalLaw::LocalApprox { s0, schedule }
            }
        })
    }

    pub fn s0(&self) -> &[f64] {
        match self {
            MarginalLaw::Constant { s0, .. } | MarginalLaw::LocalApprox { s0, .. } => s0,
        }
    }

    /// Volatility used for asset `asset` at step `n` (for bridge targets).
    pub fn vol_at(&self, asset: usize, n: usize) -> f64 {
        match self {
            MarginalLaw::Constant { sigma, .. } => sigma[asset],
            MarginalLaw::LocalApprox { schedule, .. } => schedule.vol_at(asset, n),
        }
    }

    /// Mean and variance of `s_{n,j}`, `n ≥ 1`.
    #[inline]
    pub fn moments(&self, asset: usize, n: usize) -> (f64, f64) {
        match self {
            MarginalLaw::Constant { s0, sigma, dt } => {
                let t = n as f64 * dt;
                let v = sigma[asset] * sigma[asset];
                (s0[asset] - 0.5 * v * t, v * t)
            }
            MarginalLaw::LocalApprox { schedule, .. } => schedule.moments(asset, n),
        }
    }

    #[inline]
    pub fn ln_density_component(&self, asset: usize, n: usize, x: f64) -> f64 {
        let (m, v) = self.moments(asset, n);
        ln_pdf(x, m, v)
    }

    /// `ln p_n(s)` as a product over assets.
    pub fn ln_density(&self, n: usize, s: &[f64]) -> f64 {
        s.iter()
            .enumerate()
            .map(|(j, &x)| self.ln_density_component(j, n, x))
            .sum()
    }
}
