use super::ExperimentError;
use crate::koopman::{KoopmanModel, LatentPolicy};
use crate::plant::{self, PlantParams, PlantState, Trajectory};

/// Normalized RMSE in percent over the first `k_p` rows:
/// `100 * sqrt(mean_k |pred_k - actual_k|^2) / |max(actual) - min(actual)|`,
/// with max and min taken per state dimension over those rows.
pub fn nrmse(predicted: &[Vec<f64>], actual: &[Vec<f64>], k_p: usize) -> Result<f64, ExperimentError> {
    if k_p == 0 || predicted.len() < k_p || actual.len() < k_p {
        return Err(ExperimentError::Metric(format!(
            "nrmse needs {k_p} rows, got {} predicted and {} actual",
            predicted.len(),
            actual.len()
        )));
    }
    let n = actual[0].len();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let mut sq = 0.0;
    for (p, a) in predicted[..k_p].iter().zip(&actual[..k_p]) {
        if p.len() != n || a.len() != n {
            return Err(ExperimentError::Metric("ragged state rows".into()));
        }
        for i in 0..n {
            lo[i] = lo[i].min(a[i]);
            hi[i] = hi[i].max(a[i]);
            sq += (p[i] - a[i]).powi(2);
        }
    }
    let range = lo.iter().zip(&hi).map(|(l, h)| (h - l).powi(2)).sum::<f64>().sqrt();
    if !(range > 0.0) {
        return Err(ExperimentError::Metric("actual trajectory has zero range".into()));
    }
    Ok(100.0 * (sq / k_p as f64).sqrt() / range)
}

/// Fraction of states that meet the score rule for `target_x`.
pub fn average_score(states: &[PlantState], target_x: f64) -> Result<f64, ExperimentError> {
    if states.is_empty() {
        return Err(ExperimentError::Metric("empty trajectory".into()));
    }
    let hits: u32 = states.iter().map(|s| u32::from(plant::score(s, target_x))).sum();
    Ok(f64::from(hits) / states.len() as f64)
}

/// Latent estimate the remote side holds at each step: the encoded sample
/// when it arrived, otherwise the model's own one-step prediction from the
/// previous estimate. The first sample is always taken as delivered.
fn held_latents(
    m: &KoopmanModel,
    states: &[Vec<f64>],
    controls: &[Vec<f64>],
    delivered: &[bool],
    use_lsk: bool,
) -> Result<Vec<Vec<f64>>, ExperimentError> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(states.len());
    for k in 0..states.len() {
        let z = if k == 0 || delivered[k] {
            m.encode(&states[k])?
        } else {
            m.predict_latent(&out[k - 1], &controls[k - 1], use_lsk)?
        };
        out.push(z);
    }
    Ok(out)
}

/// Prediction accuracy on a test trajectory seen through a lossy uplink.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionScores {
    /// One-step NRMSE (percent) over `k_p` transitions.
    pub one_step: f64,
    /// NRMSE of `depth`-step open-loop predictions from the held estimate.
    pub multi_step: f64,
}

pub fn prediction_scores(
    m: &KoopmanModel,
    use_lsk: bool,
    test: &Trajectory,
    delivered: &[bool],
    k_p: usize,
    depth: usize,
) -> Result<PredictionScores, ExperimentError> {
    if test.len() < k_p + depth.max(1) || delivered.len() < test.len() {
        return Err(ExperimentError::Metric(format!(
            "test trajectory of {} samples is too short for {k_p} steps at depth {depth}",
            test.len()
        )));
    }
    let states: Vec<Vec<f64>> = test.samples.iter().map(|s| s.state.to_array().to_vec()).collect();
    let controls: Vec<Vec<f64>> = test.samples.iter().map(|s| vec![s.u]).collect();
    let z = held_latents(m, &states, &controls, delivered, use_lsk)?;
    let mut one = Vec::with_capacity(k_p);
    let mut multi = Vec::with_capacity(k_p);
    for k in 0..k_p {
        let next = m.predict_latent(&z[k], &controls[k], use_lsk)?;
        one.push(m.decode(&next)?);
        let (_, decoded) = m.rollout(&z[k], &controls[k..k + depth.max(1)], use_lsk)?;
        multi.push(decoded.last().expect("non-empty").clone());
    }
    let actual_one = &states[1..=k_p];
    let actual_multi = &states[depth.max(1)..depth.max(1) + k_p];
    Ok(PredictionScores {
        one_step: nrmse(&one, actual_one, k_p)?,
        multi_step: nrmse(&multi, actual_multi, k_p)?,
    })
}

/// Closed loop of the real plant driven by a latent controller over a lossy
/// uplink. Returns the visited states; if the plant blows up, the remaining
/// steps are filled with the last finite state so they score zero.
#[allow(clippy::too_many_arguments)]
pub fn latent_closed_loop<R: rand::Rng + ?Sized>(
    m: &KoopmanModel,
    use_lsk: bool,
    policy: Option<&LatentPolicy>,
    p: &PlantParams,
    x0: PlantState,
    delivered: &[bool],
    steps: usize,
    noise: &mut R,
) -> Result<Vec<PlantState>, ExperimentError> {
    let mut states = Vec::with_capacity(steps);
    let mut state = x0;
    let mut z_prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for k in 0..steps {
        if state.diverged() {
            let fallen = PlantState::new(f64::INFINITY, 0.0, f64::INFINITY, 0.0);
            states.resize(steps, fallen);
            break;
        }
        states.push(state);
        let z = match (&z_prev, delivered.get(k).copied().unwrap_or(true)) {
            (Some((z, u)), false) => m.predict_latent(z, u, use_lsk)?,
            _ => m.encode(&state.to_array())?,
        };
        let u = match policy {
            Some(pol) => pol.command(&z),
            None => vec![0.0],
        };
        let force = if u[0].is_finite() { u[0] } else { 0.0 };
        state = plant::rk4_step(&state, force, p, noise);
        z_prev = Some((z, vec![force]));
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nrmse_of_exact_prediction_is_zero() {
        let actual = vec![vec![0.0, 1.0], vec![1.0, 3.0], vec![2.0, 2.0]];
        assert_eq!(nrmse(&actual, &actual, 3).unwrap(), 0.0);
    }

    #[test]
    fn nrmse_by_hand() {
        // Ranges 3 and 4 give a norm of 5; each row is off by (0.3, 0.4).
        let actual = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        let pred = vec![vec![0.3, 0.4], vec![3.3, 4.4]];
        assert!((nrmse(&pred, &actual, 2).unwrap() - 10.0).abs() < 1e-12);
        // Only the first k_p rows count.
        let mut longer = pred.clone();
        longer.push(vec![100.0, 100.0]);
        let mut actual3 = actual.clone();
        actual3.push(vec![0.0, 0.0]);
        assert_eq!(nrmse(&longer, &actual3, 2).unwrap(), nrmse(&pred, &actual, 2).unwrap());
    }

    #[test]
    fn nrmse_rejects_degenerate_input() {
        let flat = vec![vec![1.0, 1.0]; 3];
        assert!(nrmse(&flat, &flat, 3).is_err());
        assert!(nrmse(&flat, &flat, 0).is_err());
        assert!(nrmse(&flat, &flat, 4).is_err());
    }

    #[test]
    fn average_score_counts_hits() {
        let on = PlantState::new(2.1, 0.0, 0.01, 0.0);
        let off = PlantState::new(2.5, 0.0, 0.0, 0.0);
        assert_eq!(average_score(&[on, off, on, on], 2.0).unwrap(), 0.75);
        assert!(average_score(&[], 0.0).is_err());
    }
}
