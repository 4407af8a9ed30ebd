//! Radio channel math: path loss, thermal noise, small-scale fading,
//! line-of-sight blockage, SINR, and the decode decision.
//!
//! Everything here is pure (the fading/blockage draws take the RNG
//! explicitly), which keeps the radio arithmetic unit-testable in isolation
//! from the event loop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// SINR floor in dB used to represent "no signal" (signal power of zero).
pub const SINR_FLOOR_DB: f64 = -200.0;

/// Distances below this are clamped before entering a path-loss formula;
/// the log-distance models blow up near zero and the near field is not
/// meaningful at the fidelity simulated here.
pub const NEAR_FIELD_CLAMP_M: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("path loss undefined for non-positive distance {0} m")]
    NonPositiveDistance(f64),
    #[error("noise bandwidth must be positive, got {0} Hz")]
    NonPositiveBandwidth(f64),
    #[error("sinr denominator must be positive (interference {i} mW + noise {o} mW)")]
    NonPositiveDenominator { i: f64, o: f64 },
    #[error("negative power {0} mW is not physical")]
    NegativePower(f64),
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Free-space (Friis) path loss in dB at distance `d_m` and carrier `f_hz`:
/// `20 log10(d) + 20 log10(f) + 20 log10(4 pi / c)`.
///
/// Distances inside the near-field clamp are treated as 1 m; non-positive
/// distance is a caller bug.
pub fn friis_path_loss(d_m: f64, f_hz: f64) -> Result<f64, ChannelError> {
    if d_m <= 0.0 {
        return Err(ChannelError::NonPositiveDistance(d_m));
    }
    let d = d_m.max(NEAR_FIELD_CLAMP_M);
    Ok(20.0 * d.log10() + 20.0 * f_hz.log10() + 20.0 * (4.0 * std::f64::consts::PI / SPEED_OF_LIGHT).log10())
}

/// Line-of-sight condition of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Los {
    Clear,
    Blocked,
}

/// Coefficients of a log-distance fit `a + b log10(d)`, one pair per LOS
/// condition. Defaults are measurement fits for a 28 GHz urban street.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmwavePathLoss {
    pub los_a_db: f64,
    pub los_b: f64,
    pub nlos_a_db: f64,
    pub nlos_b: f64,
}

impl Default for MmwavePathLoss {
    fn default() -> Self {
        MmwavePathLoss { los_a_db: 61.4, los_b: 20.0, nlos_a_db: 72.0, nlos_b: 29.2 }
    }
}

impl MmwavePathLoss {
    /// Path loss in dB at distance `d_m` under `los`; distance is clamped to
    /// the 1 m reference the fit is anchored on.
    pub fn path_loss(&self, d_m: f64, los: Los) -> Result<f64, ChannelError> {
        if d_m <= 0.0 {
            return Err(ChannelError::NonPositiveDistance(d_m));
        }
        let d = d_m.max(NEAR_FIELD_CLAMP_M);
        let (a, b) = match los {
            Los::Clear => (self.los_a_db, self.los_b),
            Los::Blocked => (self.nlos_a_db, self.nlos_b),
        };
        Ok(a + b * d.log10())
    }
}

/// Thermal noise power in dBm over `bandwidth_hz` with receiver noise figure
/// `noise_figure_db`: `-174 + 10 log10(B) + NF`.
pub fn noise_power_dbm(bandwidth_hz: f64, noise_figure_db: f64) -> Result<f64, ChannelError> {
    if bandwidth_hz <= 0.0 {
        return Err(ChannelError::NonPositiveBandwidth(bandwidth_hz));
    }
    Ok(-174.0 + 10.0 * bandwidth_hz.log10() + noise_figure_db)
}

/// Distance-dependent Nakagami-m fading profile: shape `m0` out to `d1`
/// meters, `m1` out to `d2`, `m2` beyond. Unit mean power in every zone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NakagamiProfile {
    pub d1_m: f64,
    pub d2_m: f64,
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
}

impl Default for NakagamiProfile {
    fn default() -> Self {
        NakagamiProfile { d1_m: 80.0, d2_m: 200.0, m0: 1.5, m1: 0.75, m2: 0.75 }
    }
}

impl NakagamiProfile {
    pub fn shape_at(&self, d_m: f64) -> f64 {
        if d_m <= self.d1_m {
            self.m0
        } else if d_m <= self.d2_m {
            self.m1
        } else {
            self.m2
        }
    }

    /// Draw a power fading gain (linear, unit mean) for a link of length
    /// `d_m`: Gamma with shape `m(d)` and scale `1/m(d)`. `m = 1` reduces to
    /// Rayleigh power fading (exponential with mean 1).
    pub fn sample_gain(&self, d_m: f64, rng: &mut ChaCha8Rng) -> f64 {
        let m = self.shape_at(d_m);
        let gamma = Gamma::new(m, 1.0 / m).expect("nakagami shape and scale are positive");
        gamma.sample(rng)
    }
}

/// Two-state (clear/blocked) continuous-time Markov link state, sampled at
/// discrete instants: over a step of `dt` seconds the transition fires with
/// probability `1 - exp(-lambda dt)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LosState {
    pub state: Los,
    pub lambda_block_per_s: f64,
    pub lambda_clear_per_s: f64,
}

impl LosState {
    pub fn new(initial: Los, lambda_block_per_s: f64, lambda_clear_per_s: f64) -> Self {
        LosState { state: initial, lambda_block_per_s, lambda_clear_per_s }
    }

    /// Advance the state by `dt_s` seconds; at most one transition per step,
    /// so steps should be small relative to 1/lambda.
    pub fn step(&mut self, dt_s: f64, rng: &mut ChaCha8Rng) -> Los {
        let lambda = match self.state {
            Los::Clear => self.lambda_block_per_s,
            Los::Blocked => self.lambda_clear_per_s,
        };
        let p_transition = 1.0 - (-lambda * dt_s).exp();
        if rng.gen::<f64>() < p_transition {
            self.state = match self.state {
                Los::Clear => Los::Blocked,
                Los::Blocked => Los::Clear,
            };
        }
        self.state
    }
}

/// One SINR evaluation: received signal power `signal_mw` against the sum of
/// concurrent co-channel interference `interference_mw` and noise `noise_mw`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinrSample {
    pub signal_mw: f64,
    pub interference_mw: f64,
    pub noise_mw: f64,
    pub sinr_db: f64,
}

/// Compute SINR = M / (I + O) in dB. A zero signal maps to the
/// [`SINR_FLOOR_DB`] floor instead of negative infinity.
pub fn sinr(signal_mw: f64, interference_mw: f64, noise_mw: f64) -> Result<SinrSample, ChannelError> {
    if signal_mw < 0.0 {
        return Err(ChannelError::NegativePower(signal_mw));
    }
    let denom = interference_mw + noise_mw;
    if denom <= 0.0 {
        return Err(ChannelError::NonPositiveDenominator { i: interference_mw, o: noise_mw });
    }
    let sinr_db = if signal_mw == 0.0 {
        SINR_FLOOR_DB
    } else {
        (10.0 * (signal_mw / denom).log10()).max(SINR_FLOOR_DB)
    };
    Ok(SinrSample { signal_mw, interference_mw, noise_mw, sinr_db })
}

/// A reception decodes iff its SINR meets the stack's threshold.
pub fn decode(sample: &SinrSample, threshold_db: f64) -> bool {
    sample.sinr_db >= threshold_db
}

/// Radio front-end budget of one stack: transmit power, antenna gains, and
/// the receiver noise context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub tx_power_dbm: f64,
    pub tx_gain_dbi: f64,
    pub rx_gain_dbi: f64,
    pub frequency_hz: f64,
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
}

impl LinkBudget {
    /// Received power in dBm over a path of `path_loss_db` with a linear
    /// fading power gain (1.0 = no fading).
    pub fn received_dbm(&self, path_loss_db: f64, fading_gain: f64) -> f64 {
        self.tx_power_dbm + self.tx_gain_dbi + self.rx_gain_dbi - path_loss_db
            + 10.0 * fading_gain.log10()
    }

    pub fn noise_dbm(&self) -> f64 {
        noise_power_dbm(self.bandwidth_hz, self.noise_figure_db)
            .expect("budget bandwidth validated at construction")
    }

    pub fn noise_mw(&self) -> f64 {
        dbm_to_mw(self.noise_dbm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    const EPS: f64 = 1e-9;

    #[test]
    fn friis_reference_points() {
        // Independently computed: 20log10(d) + 20log10(f) + 20log10(4pi/c).
        let at_100m = friis_path_loss(100.0, 5.9e9).unwrap();
        assert!((at_100m - 87.86482345472626).abs() < 1e-2, "got {at_100m}");
        let at_1m = friis_path_loss(1.0, 5.9e9).unwrap();
        assert!((at_1m - 47.86482345472626).abs() < 1e-2, "got {at_1m}");
    }

    #[test]
    fn friis_monotonicity_and_doubling() {
        // +6.0206 dB per distance doubling, strictly increasing in d and f.
        let d1 = friis_path_loss(50.0, 5.9e9).unwrap();
        let d2 = friis_path_loss(100.0, 5.9e9).unwrap();
        assert!((d2 - d1 - 6.020599913279624).abs() < EPS);
        assert!(friis_path_loss(100.0, 28e9).unwrap() > friis_path_loss(100.0, 5.9e9).unwrap());
    }

    #[test]
    fn friis_near_field_and_errors() {
        assert_eq!(
            friis_path_loss(0.25, 5.9e9).unwrap(),
            friis_path_loss(1.0, 5.9e9).unwrap(),
            "sub-meter distances clamp to the 1 m reference"
        );
        assert!(friis_path_loss(0.0, 5.9e9).is_err());
        assert!(friis_path_loss(-4.0, 5.9e9).is_err());
    }

    #[test]
    fn mmwave_fit_reference_points() {
        let pl = MmwavePathLoss::default();
        assert!((pl.path_loss(100.0, Los::Clear).unwrap() - 101.4).abs() < EPS);
        assert!((pl.path_loss(100.0, Los::Blocked).unwrap() - 130.4).abs() < EPS);
        // Blocked always costs more at equal distance (for d >= 1 m).
        for d in [1.0, 3.0, 10.0, 250.0, 900.0] {
            assert!(pl.path_loss(d, Los::Blocked).unwrap() >= pl.path_loss(d, Los::Clear).unwrap());
        }
        assert_eq!(pl.path_loss(0.5, Los::Clear).unwrap(), pl.los_a_db);
        assert!(pl.path_loss(0.0, Los::Clear).is_err());
    }

    #[test]
    fn noise_power_reference_points() {
        assert!((noise_power_dbm(10e6, 5.0).unwrap() - -99.0).abs() < EPS);
        assert!((noise_power_dbm(1e9, 5.0).unwrap() - -79.0).abs() < EPS);
        assert!(noise_power_dbm(0.0, 5.0).is_err());
    }

    #[test]
    fn sinr_arithmetic_and_floor() {
        let s = sinr(1.0, 1.0, 1.0).unwrap();
        assert!((s.sinr_db - -3.010299956639812).abs() < EPS);
        let zero = sinr(0.0, 0.5, 0.5).unwrap();
        assert_eq!(zero.sinr_db, SINR_FLOOR_DB);
        assert!(sinr(1.0, 0.0, 0.0).is_err());
        assert!(sinr(-1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn decode_is_a_threshold_comparison() {
        let s = sinr(10.0, 0.0, 1.0).unwrap(); // 10 dB exactly
        assert!(decode(&s, 10.0), "boundary counts as success");
        assert!(!decode(&s, 10.0 + 1e-9));
    }

    #[test]
    fn nakagami_zone_shapes() {
        let p = NakagamiProfile::default();
        assert_eq!(p.shape_at(10.0), 1.5);
        assert_eq!(p.shape_at(80.0), 1.5);
        assert_eq!(p.shape_at(80.1), 0.75);
        assert_eq!(p.shape_at(200.0), 0.75);
        assert_eq!(p.shape_at(1000.0), 0.75);
    }

    #[test]
    fn nakagami_unit_mean() {
        // Sample mean within 2% of 1.0 over 1e5 draws in both shape zones.
        let p = NakagamiProfile::default();
        for d in [40.0, 150.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let n = 100_000;
            let mean: f64 = (0..n).map(|_| p.sample_gain(d, &mut rng)).sum::<f64>() / n as f64;
            assert!((mean - 1.0).abs() < 0.02, "mean at {d} m was {mean}");
        }
    }

    #[test]
    fn nakagami_m1_matches_exponential_cdf() {
        // m = 1 is Rayleigh power fading: P(gain <= 1) = 1 - e^-1.
        let p = NakagamiProfile { d1_m: 80.0, d2_m: 200.0, m0: 1.0, m1: 1.0, m2: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 200_000;
        let below = (0..n).filter(|_| p.sample_gain(10.0, &mut rng) <= 1.0).count();
        let frac = below as f64 / n as f64;
        assert!((frac - 0.6321205588285577).abs() < 0.01, "got {frac}");
    }

    #[test]
    fn blockage_two_state_stationary_split() {
        // Symmetric rates → long-run occupancy 0.5 per state.
        let mut state = LosState::new(Los::Clear, 0.2, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let steps = 100_000;
        let mut clear = 0u64;
        for _ in 0..steps {
            if state.step(1.0, &mut rng) == Los::Clear {
                clear += 1;
            }
        }
        let frac = clear as f64 / steps as f64;
        assert!((frac - 0.5).abs() < 0.02, "got {frac}");
    }

    #[test]
    fn blockage_default_rates_favor_clear() {
        // block 0.1/s, clear 0.4/s → stationary clear fraction 0.8.
        let mut state = LosState::new(Los::Clear, 0.1, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let steps = 200_000;
        let mut clear = 0u64;
        for _ in 0..steps {
            if state.step(0.5, &mut rng) == Los::Clear {
                clear += 1;
            }
        }
        let frac = clear as f64 / steps as f64;
        assert!((frac - 0.8).abs() < 0.02, "got {frac}");
    }

    #[test]
    fn link_budget_chain_is_exact_without_fading() {
        let b = LinkBudget {
            tx_power_dbm: 20.0,
            tx_gain_dbi: 1.0,
            rx_gain_dbi: 1.0,
            frequency_hz: 5.9e9,
            bandwidth_hz: 10e6,
            noise_figure_db: 6.0,
        };
        let pl = friis_path_loss(100.0, b.frequency_hz).unwrap();
        let rx = b.received_dbm(pl, 1.0);
        assert!((rx - (20.0 + 1.0 + 1.0 - pl)).abs() < EPS);
        assert!((b.noise_dbm() - -98.0).abs() < EPS);
    }

    #[test]
    fn dbm_mw_roundtrip() {
        for dbm in [-120.0, -30.0, 0.0, 23.0] {
            assert!((mw_to_dbm(dbm_to_mw(dbm)) - dbm).abs() < EPS);
        }
    }
}
