//! Payoff definitions: discretely monitored knock-out barrier options and
//! a single-asset TARN with gain/loss cutoffs.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}

/// Knock-out barrier option on the arithmetic mean of a basket.
///
/// Alive at monitoring date `T_i` iff every asset's log-price lies strictly
/// inside `(L_{i,j}, U_{i,j})`; touching a barrier knocks the option out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierOption {
    pub monitoring: Vec<usize>,
    /// `lower[i][j]`: log barrier for date `i`, asset `j`.
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    pub kind: OptionKind,
    /// Strike in price space.
    pub strike: f64,
}

impl BarrierOption {
    /// Same price-space corridor for every asset and date.
    pub fn uniform(
        d: usize,
        monitoring: Vec<usize>,
        lower_price: f64,
        upper_price: f64,
        strike: f64,
        kind: OptionKind,
    ) -> Result<Self> {
        if !(lower_price > 0.0 && lower_price < upper_price) {
            return Err(config_err(format!(
                "barriers need 0 < L < U, got ({lower_price}, {upper_price})"
            )));
        }
        let m = monitoring.len();
        let opt = Self {
            lower: vec![vec![lower_price.ln(); d]; m],
            upper: vec![vec![upper_price.ln(); d]; m],
            monitoring,
            kind,
            strike,
        };
        opt.validate(d)?;
        Ok(opt)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.monitoring.is_empty() {
            return Err(config_err(
                "barrier option needs at least one monitoring date",
            ));
        }
        if self.lower.len() != self.monitoring.len() || self.upper.len() != self.monitoring.len() {
            return Err(config_err("one barrier pair per monitoring date"));
        }
        for (lo, hi) in self.lower.iter().zip(&self.upper) {
            if lo.len() != d || hi.len() != d {
                return Err(config_err(format!("barriers must have {d} components")));
            }
            if lo.iter().zip(hi).any(|(l, u)| !(l < u)) {
                return Err(config_err("lower barrier must be below upper barrier"));
            }
        }
        if !(self.strike >= 0.0) {
            return Err(config_err("strike must be non-negative"));
        }
        Ok(())
    }

    /// Corridor midpoint `K_j = (L_j + U_j) / 2` at the final date, in log space.
    pub fn final_midpoint(&self) -> Vec<f64> {
        let m = self.monitoring.len() - 1;
        self.lower[m]
            .iter()
            .zip(&self.upper[m])
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    /// `1{s ∈ (L_i, U_i)}` for monitoring date index `i`.
    #[inline]
    pub fn inside(&self, i: usize, s: &[f64]) -> bool {
        s.iter()
            .zip(self.lower[i].iter().zip(&self.upper[i]))
            .all(|(&x, (&l, &u))| l < x && x < u)
    }

    /// Terminal payoff `H` on the mean terminal price.
    pub fn terminal_payoff(&self, s_final: &[f64]) -> f64 {
        let mean = s_final.iter().map(|x| x.exp()).sum::<f64>() / s_final.len() as f64;
        match self.kind {
            OptionKind::Call => (mean - self.strike).max(0.0),
            OptionKind::Put => (self.strike - mean).max(0.0),
        }
    }
}

/// `alive · H(s_N)`.
pub fn barrier_payoff(s_final: &[f64], alive: bool, spec: &BarrierOption) -> f64 {
    if alive {
        spec.terminal_payoff(s_final)
    } else {
        0.0
    }
}

/// Price band `[90, 110]` where a fixing pays `-20`.
pub const TARN_BAND: (f64, f64) = (90.0, 110.0);

/// TARN cashflow per fixing: two jumps of size ≈20 at 90 and 110.
pub fn tarn_f(r: f64) -> f64 {
    if r > TARN_BAND.1 {
        2.0 * (r - 110.0) + 20.0
    } else if r < TARN_BAND.0 {
        2.0 * (80.0 - r) + 20.0
    } else {
        -20.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TarnSpec {
    /// Fixing steps `T_1 < … < T_m` on the simulation grid.
    pub fixings: Vec<usize>,
    pub gain_cap: f64,
    pub loss_cap: f64,
    /// Constant added to the cashflow sum so the no-escape payoff is zero.
    pub shift: f64,
    /// Number of leading fixings carrying weighting functions.
    pub weighted_fixings: usize,
}

impl TarnSpec {
    /// `m` fixings every `k` steps, cutoffs `Γ_G = 200`, `Γ_L = 100`.
    pub fn standard(k: usize, m: usize) -> Self {
        Self {
            fixings: (1..=m).map(|i| i * k).collect(),
            gain_cap: 200.0,
            loss_cap: 100.0,
            shift: 100.0,
            weighted_fixings: 5,
        }
    }

    pub fn validate(&self, n_steps: usize) -> Result<()> {
        if self.fixings.is_empty() || self.fixings.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err(
                "fixings must be non-empty and strictly increasing",
            ));
        }
        if self.fixings[0] == 0 || *self.fixings.last().unwrap() > n_steps {
            return Err(config_err("fixings must lie on the grid"));
        }
        if !(self.gain_cap > 0.0 && self.loss_cap > 0.0) {
            return Err(config_err("cutoffs must be positive"));
        }
        if self.weighted_fixings == 0 || self.weighted_fixings > self.fixings.len() {
            return Err(config_err("weighted fixings must lie in 1..=m"));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.fixings.len()
    }

    /// Last step carrying a weighting function (`T_5` by default).
    pub fn last_weighted_step(&self) -> usize {
        self.fixings[self.weighted_fixings - 1]
    }

    /// Index (0-based) of the fixing at `step`, if any.
    pub fn fixing_index(&self, step: usize) -> Option<usize> {
        self.fixings.binary_search(&step).ok()
    }
}

/// Accumulated gains/losses and the stopping index.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CashflowState {
    pub gain: f64,
    pub loss: f64,
    /// Fixings processed so far.
    pub k: usize,
    /// `Σ_{i ≤ k} f(R_{T_i})`.
    pub total: f64,
    pub tau: Option<usize>,
}

impl CashflowState {
    /// Processes fixing `k + 1` at price `price`.
    pub fn update(&mut self, spec: &TarnSpec, price: f64) -> Result<()> {
        if self.tau.is_some() {
            return Err(Error::Precondition("TARN already stopped".into()));
        }
        let f = tarn_f(price);
        self.k += 1;
        self.gain += f.max(0.0);
        self.loss += (-f).max(0.0);
        self.total += f;
        if self.gain >= spec.gain_cap || self.loss >= spec.loss_cap || self.k == spec.m() {
            self.tau = Some(self.k);
        }
        Ok(())
    }

    pub fn stopped(&self) -> bool {
        self.tau.is_some()
    }

    /// `shift + Σ_{i ≤ τ} f`.
    pub fn payoff(&self, spec: &TarnSpec) -> f64 {
        spec.shift + self.total
    }
}

/// Functional form of [`CashflowState::update`].
pub fn tarn_update(state: CashflowState, spec: &TarnSpec, price: f64) -> Result<CashflowState> {
    let mut next = state;
    next.update(spec, price)?;
    Ok(next)
}

/// Payoff from the fixing log-prices of a path (at least `τ` of them).
pub fn tarn_payoff(fixing_logprices: &[f64], spec: &TarnSpec) -> Result<f64> {
    let mut st = CashflowState::default();
    for &s in fixing_logprices {
        st.update(spec, s.exp())?;
        if st.stopped() {
            return Ok(st.payoff(spec));
        }
    }
    Err(Error::Precondition(
        "path ended before the TARN stopped".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tarn_f_values() {
        assert_eq!(tarn_f(100.0), -20.0);
        assert_eq!(tarn_f(120.0), 40.0);
        assert!((tarn_f(89.99) - 0.02).abs() < 1e-9);
        assert!((tarn_f(90.0) - tarn_f(89.999_999)).abs() > 19.99);
        assert_eq!(tarn_f(90.0), -20.0);
        assert_eq!(tarn_f(110.0), -20.0);
    }

    #[test]
    fn five_inside_fixings_stop_with_zero_payoff() {
        let spec = TarnSpec::standard(30, 24);
        let mut st = CashflowState::default();
        for _ in 0..5 {
            st.update(&spec, 100.0).unwrap();
        }
        assert_eq!(st.loss, 100.0);
        assert_eq!(st.tau, Some(5));
        assert_eq!(st.payoff(&spec), 0.0);
        assert!(st.update(&spec, 100.0).is_err());
    }

    #[test]
    fn big_first_gain_stops_at_one() {
        let spec = TarnSpec::standard(30, 24);
        let st = tarn_update(CashflowState::default(), &spec, 220.0).unwrap();
        assert_eq!(st.gain, 240.0);
        assert_eq!(st.tau, Some(1));
        assert!((tarn_payoff(&[220f64.ln()], &spec).unwrap() - 340.0).abs() < 1e-9);
    }

    #[test]
    fn horizon_stop() {
        let mut spec = TarnSpec::standard(30, 24);
        spec.loss_cap = 1e9;
        spec.gain_cap = 1e9;
        let mut st = CashflowState::default();
        for _ in 0..24 {
            st.update(&spec, 100.0).unwrap();
        }
        assert_eq!(st.tau, Some(24));
    }

    #[test]
    fn barrier_examples() {
        let opt =
            BarrierOption::uniform(1, vec![540], 95.0, 105.0, 100.0, OptionKind::Call).unwrap();
        assert_eq!(barrier_payoff(&[104f64.ln()], false, &opt), 0.0);
        assert!((barrier_payoff(&[104f64.ln()], true, &opt) - 4.0).abs() < 1e-12);
        assert!(opt.inside(0, &[100f64.ln()]));
        assert!(!opt.inside(0, &[95f64.ln()]));
        let ten =
            BarrierOption::uniform(10, vec![540], 95.0, 105.0, 100.0, OptionKind::Put).unwrap();
        let mut s = vec![100f64.ln(); 10];
        assert!(ten.inside(0, &s));
        s[7] = 110f64.ln();
        assert!(!ten.inside(0, &s));
        assert!(BarrierOption::uniform(1, vec![5], 105.0, 95.0, 100.0, OptionKind::Call).is_err());
    }

    fn brute_force(prices: &[f64]) -> f64 {
        // Cashflows summed up to the first date where a cutoff is reached.
        let (mut g, mut l, mut sum) = (0.0, 0.0, 0.0);
        for (i, &r) in prices.iter().enumerate() {
            let f = tarn_f(r);
            sum += f;
            if f > 0.0 {
                g += f;
            } else {
                l -= f;
            }
            if g >= 200.0 || l >= 100.0 || i + 1 == prices.len() {
                break;
            }
        }
        100.0 + sum
    }

    proptest! {
        #[test]
        fn payoff_matches_brute_force(prices in prop::collection::vec(60.0f64..160.0, 24)) {
            let spec = TarnSpec::standard(30, 24);
            let logs: Vec<f64> = prices.iter().map(|p| p.ln()).collect();
            let fast = tarn_payoff(&logs, &spec).unwrap();
            let slow = brute_force(&prices.iter().map(|s| s.ln().exp()).collect::<Vec<_>>());
            prop_assert!((fast - slow).abs() < 1e-9);
            prop_assert!(fast >= -1e-9);
        }

        #[test]
        fn accumulators_are_monotone(prices in prop::collection::vec(60.0f64..160.0, 1..24)) {
            let spec = TarnSpec::standard(30, 24);
            let mut st = CashflowState::default();
            for &r in &prices {
                if st.stopped() { break; }
                let before = st;
                st.update(&spec, r).unwrap();
                prop_assert!(st.gain >= before.gain && st.loss >= before.loss);
            }
        }
    }
}
