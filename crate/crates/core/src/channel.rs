//! Wireless uplink model: log-distance path loss, Rayleigh block fading,
//! Shannon capacity and the resulting outage events.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ChannelError {
    #[error("invalid link parameter: {0}")]
    InvalidParams(String),
}

/// Link budget of one plant's dedicated channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    /// m
    #[serde(default = "defaults::ref_distance")]
    pub ref_distance: f64,
    /// dB
    #[serde(default = "defaults::ref_path_loss_db")]
    pub ref_path_loss_db: f64,
    #[serde(default = "defaults::path_loss_exponent")]
    pub path_loss_exponent: f64,
    /// m
    #[serde(default = "defaults::distance")]
    pub distance: f64,
    /// W
    #[serde(default = "defaults::tx_power")]
    pub tx_power: f64,
    /// W
    pub noise_power: f64,
    /// Hz
    #[serde(default = "defaults::bandwidth")]
    pub bandwidth: f64,
    /// bit/s
    #[serde(default = "defaults::target_rate")]
    pub target_rate: f64,
}

pub mod defaults {
    pub fn ref_distance() -> f64 {
        1.0
    }
    pub fn ref_path_loss_db() -> f64 {
        30.0
    }
    pub fn path_loss_exponent() -> f64 {
        3.0
    }
    pub fn distance() -> f64 {
        50.0
    }
    pub fn tx_power() -> f64 {
        0.1
    }
    pub fn bandwidth() -> f64 {
        20e6
    }
    /// About 2% outage at 15 dB mean SNR and 18% at 5 dB.
    pub fn target_rate() -> f64 {
        14e6
    }
}

impl LinkParams {
    /// Default geometry with the noise power chosen so that the mean SNR
    /// (unit fading gain) equals `mean_snr_db`.
    pub fn calibrated(mean_snr_db: f64) -> Self {
        let mut lp = Self {
            ref_distance: defaults::ref_distance(),
            ref_path_loss_db: defaults::ref_path_loss_db(),
            path_loss_exponent: defaults::path_loss_exponent(),
            distance: defaults::distance(),
            tx_power: defaults::tx_power(),
            noise_power: 1.0,
            bandwidth: defaults::bandwidth(),
            target_rate: defaults::target_rate(),
        };
        lp.calibrate_noise(mean_snr_db);
        lp
    }

    /// Solves for the noise power that puts the mean SNR at `mean_snr_db`.
    pub fn calibrate_noise(&mut self, mean_snr_db: f64) {
        let target = db_to_linear(mean_snr_db);
        self.noise_power = 1.0;
        let unit = snr(self, 1.0);
        self.noise_power = unit / target;
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.path_loss_exponent >= 2.0) {
            return Err(ChannelError::InvalidParams(format!(
                "path_loss_exponent must be >= 2, got {}",
                self.path_loss_exponent
            )));
        }
        let positive = [
            ("ref_distance", self.ref_distance),
            ("distance", self.distance),
            ("tx_power", self.tx_power),
            ("noise_power", self.noise_power),
            ("bandwidth", self.bandwidth),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ChannelError::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.target_rate.is_finite() && self.target_rate >= 0.0) {
            return Err(ChannelError::InvalidParams("target_rate must be >= 0".into()));
        }
        if !self.ref_path_loss_db.is_finite() {
            return Err(ChannelError::InvalidParams("ref_path_loss_db must be finite".into()));
        }
        Ok(())
    }

    pub fn mean_snr_db(&self) -> f64 {
        linear_to_db(snr(self, 1.0))
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Log-distance path loss in dB at the link distance.
pub fn path_loss_db(lp: &LinkParams) -> f64 {
    lp.ref_path_loss_db + 10.0 * lp.path_loss_exponent * (lp.distance / lp.ref_distance).log10()
}

/// Received SNR (linear) for fading power gain `h2 = |H|^2`.
pub fn snr(lp: &LinkParams, h2: f64) -> f64 {
    10f64.powf(-lp.ref_path_loss_db / 10.0)
        * (lp.tx_power * h2 / lp.noise_power)
        * (lp.ref_distance / lp.distance).powf(lp.path_loss_exponent)
}

/// Shannon capacity in bit/s.
pub fn capacity(lp: &LinkParams, snr_linear: f64) -> f64 {
    lp.bandwidth * (1.0 + snr_linear).log2()
}

/// Closed-form outage probability `P(capacity < target_rate)` under
/// unit-mean Rayleigh power fading.
///
/// The distance term is `D^eta` without the reference distance, so the
/// expression agrees with [`snr`] for `ref_distance = 1 m` (the default).
pub fn outage_prob(lp: &LinkParams) -> f64 {
    let threshold = 2f64.powf(lp.target_rate / lp.bandwidth) - 1.0;
    let exponent = 10f64.powf(lp.ref_path_loss_db / 10.0)
        * (lp.noise_power * lp.distance.powf(lp.path_loss_exponent) / lp.tx_power)
        * threshold;
    -(-exponent).exp_m1()
}

/// Rayleigh fading power gain: exponential with unit mean.
pub fn sample_fading<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Exp1.sample(rng)
}

/// Realization of the channel for one transmitted sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelRealization {
    pub fading_gain: f64,
    pub snr: f64,
    pub delivered: bool,
}

pub fn realize<R: Rng + ?Sized>(lp: &LinkParams, rng: &mut R) -> ChannelRealization {
    let h2 = sample_fading(rng);
    let gamma = snr(lp, h2);
    ChannelRealization {
        fading_gain: h2,
        snr: gamma,
        delivered: capacity(lp, gamma) >= lp.target_rate,
    }
}

/// Delivery mask for `n` independently faded uplink samples.
pub fn sample_erasures<R: Rng + ?Sized>(lp: &LinkParams, n: usize, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| realize(lp, rng).delivered).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn link() -> LinkParams {
        LinkParams {
            ref_distance: 1.0,
            ref_path_loss_db: 30.0,
            path_loss_exponent: 3.0,
            distance: 50.0,
            tx_power: 0.1,
            noise_power: 1e-13,
            bandwidth: 20e6,
            target_rate: 14e6,
        }
    }

    #[test]
    fn path_loss_values() {
        let mut lp = link();
        lp.distance = lp.ref_distance;
        assert_eq!(path_loss_db(&lp), 30.0);
        let lp = link();
        // 30 + 30 log10(50)
        assert!((path_loss_db(&lp) - 80.969_100_130_080_56).abs() < 1e-9);
        let mut far = link();
        far.distance *= 2.0;
        assert!((path_loss_db(&far) - path_loss_db(&lp) - 30.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn snr_values() {
        let lp = link();
        assert_eq!(snr(&lp, 0.0), 0.0);
        assert!((snr(&lp, 2.0) - 2.0 * snr(&lp, 1.0)).abs() < 1e-9);
        // 1e-3 * (0.1 / 1e-13) * 50^-3 = 8000
        assert!((snr(&lp, 1.0) - 8000.0).abs() < 1e-6);
        assert!((linear_to_db(snr(&lp, 1.0)) - 39.03).abs() < 0.01);
    }

    #[test]
    fn capacity_values() {
        let lp = link();
        assert_eq!(capacity(&lp, 0.0), 0.0);
        assert_eq!(capacity(&lp, 1.0), 20e6);
        assert_eq!(capacity(&lp, 3.0), 40e6);
    }

    #[test]
    fn outage_limits() {
        let mut lp = link();
        lp.target_rate = 0.0;
        assert_eq!(outage_prob(&lp), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_erasures(&lp, 1000, &mut rng).iter().all(|d| *d));
        let mut strong = link();
        strong.tx_power = 1e30;
        assert!(outage_prob(&strong) < 1e-20);
    }

    #[test]
    fn calibration_hits_requested_snr() {
        for db in [5.0, 15.0] {
            let lp = LinkParams::calibrated(db);
            assert!((lp.mean_snr_db() - db).abs() < 1e-9);
            lp.validate().unwrap();
        }
        let hi = outage_prob(&LinkParams::calibrated(15.0));
        let lo = outage_prob(&LinkParams::calibrated(5.0));
        assert!(hi > 0.005 && hi < 0.03, "{hi}");
        assert!(lo > 0.15 && lo < 0.25, "{lo}");
    }

    #[test]
    fn validation_rejects_shallow_exponent() {
        let mut lp = link();
        lp.path_loss_exponent = 1.5;
        assert!(lp.validate().is_err());
        let mut lp = link();
        lp.noise_power = 0.0;
        assert!(lp.validate().is_err());
    }

    #[test]
    fn erasures_are_seeded() {
        let lp = LinkParams::calibrated(5.0);
        let a = sample_erasures(&lp, 500, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_erasures(&lp, 500, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.iter().any(|d| !d));
    }
}
