use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::{ExperimentError, RunConfig, SystemSpec};
use crate::channel::{self, LinkParams};
use crate::koopman::Batch;
use crate::plant::{self, Dithered, PlantState, Trajectory};

/// Independent random stream for one purpose, derived from a root seed.
///
/// Streams are keyed by name and system index, so adding a consumer never
/// shifts the numbers another consumer sees.
pub fn substream(seed: u64, name: &str, system: usize) -> ChaCha8Rng {
    // FNV-1a over the name, then mixed with the system index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^= (system as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Initial state near upright at the origin.
pub fn initial_state<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> PlantState {
    let theta = if cfg.init_theta > 0.0 {
        Uniform::new_inclusive(-cfg.init_theta, cfg.init_theta)
            .expect("positive bound")
            .sample(rng)
    } else {
        0.0
    };
    PlantState::new(0.0, 0.0, theta, 0.0)
}

/// One operating trajectory of `horizon` samples under the plant's own
/// stabilizing controller, with force excitation proportional to its mass.
pub fn operating_trajectory(
    sys: &SystemSpec,
    cfg: &RunConfig,
    seed: u64,
    purpose: &str,
    horizon: usize,
) -> Result<Trajectory, ExperimentError> {
    let ctrl = plant::lqr_controller(&sys.plant, sys.beta, cfg.lqr_q, cfg.lqr_r, sys.plant.step)?;
    let mut init_rng = substream(seed, &format!("{purpose}/init"), sys.plant.id);
    let x0 = initial_state(cfg, &mut init_rng);
    let mut dithered = Dithered {
        inner: ctrl,
        std: cfg.dither_accel * sys.plant.total_mass(),
        rng: substream(seed, &format!("{purpose}/dither"), sys.plant.id),
    };
    let mut noise = substream(seed, &format!("{purpose}/noise"), sys.plant.id);
    let tr = plant::simulate_trajectory(&sys.plant, &mut dithered, x0, horizon, &mut noise);
    if let Some(k) = tr.diverged_at {
        return Err(ExperimentError::Diverged {
            system: sys.plant.id,
            step: k,
        });
    }
    Ok(tr)
}

/// Uplink delivery mask for `n` transmissions of one system.
pub fn delivery_mask(link: &LinkParams, seed: u64, purpose: &str, system: usize, n: usize) -> Vec<bool> {
    let mut rng = substream(seed, &format!("{purpose}/fading"), system);
    channel::sample_erasures(link, n, &mut rng)
}

/// Turns the first `len` samples of a trajectory into a training batch.
pub fn batch_from(tr: &Trajectory, delivered: &[bool], len: usize) -> Result<Batch, ExperimentError> {
    let len = len.min(tr.len()).min(delivered.len());
    let states: Vec<Vec<f64>> = tr.samples[..len].iter().map(|s| s.state.to_array().to_vec()).collect();
    let controls: Vec<Vec<f64>> = tr.samples[..len].iter().map(|s| vec![s.u]).collect();
    Ok(Batch::new(&states, &controls, &delivered[..len])?)
}
