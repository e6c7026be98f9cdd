//! Training objectives.
//!
//! * `L1` reconstruction: mean of `|x - dec(enc(x))|^2` over loss samples.
//! * `L2` latent linearity: mean over samples `k` and depths `j = 1..=k_max` of
//!   `|enc(x_{k+j}) - zhat_{k,j}|^2`, where `zhat_{k,0} = enc(x_k)` and
//!   `zhat_{k,j+1} = A zhat_{k,j} + B u_{k+j}`.
//! * `L3` prediction: the same pairs scored as `|x_{k+j} - dec(zhat_{k,j})|^2`.
//! * `L4` logic: `max(0, -rho)` of a rule on latent coordinate 0 along a
//!   closed-loop latent rollout.
//!
//! Pairs whose end point was not delivered, or lies past the batch, are
//! skipped. Totals add an L2 penalty on every trainable parameter.

use serde::{Deserialize, Serialize};

use super::{KoopmanError, KoopmanModel, LatentPolicy};
use crate::diffcore::{Graph, MinMode, Tensor, Var};
use crate::stl::{self, Formula};

use super::Batch;

/// Coefficients of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub linear: f64,
    pub pred: f64,
    pub logic: f64,
    pub reg: f64,
}

impl LossWeights {
    /// Shared-model phase.
    pub const DSK: Self = Self {
        recon: 0.1,
        linear: 0.75,
        pred: 0.75,
        logic: 0.0,
        reg: 1e-6,
    };

    /// Adapter phase, and rule-aware individual models.
    pub const LSK: Self = Self {
        recon: 0.1,
        linear: 0.75,
        pred: 0.75,
        logic: 0.1,
        reg: 1e-6,
    };

    pub fn validate(&self) -> Result<(), KoopmanError> {
        let all = [self.recon, self.linear, self.pred, self.logic, self.reg];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(KoopmanError::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Which signal of the closed-loop latent rollout the rule is checked on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "index")]
pub enum TraceSource {
    /// A latent coordinate, as produced by the rollout.
    Latent(usize),
    /// A physical state coordinate, decoded from each latent.
    Physical(usize),
}

impl Default for TraceSource {
    fn default() -> Self {
        TraceSource::Latent(0)
    }
}

/// A rule imposed on one signal of a closed-loop latent rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct LogicTerm {
    pub rule: Formula,
    pub source: TraceSource,
    /// Physical state the latent controller steers towards.
    pub target: Vec<f64>,
    /// Number of trace samples, including the initial latent.
    pub horizon: usize,
    pub eval_time: usize,
    pub min_mode: MinMode,
}

impl LogicTerm {
    pub fn new(rule: Formula, target: Vec<f64>, horizon: usize) -> Self {
        Self {
            rule,
            source: TraceSource::default(),
            target,
            horizon,
            eval_time: 0,
            min_mode: MinMode::Hard,
        }
    }
}

/// Nodes of one evaluation of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub recon: Var,
    pub linear: Var,
    pub pred: Var,
    pub logic: Option<Var>,
    pub reg: Var,
}

/// `sum(w_r * |row_r|^2) / count` with a constant weight per row.
fn weighted_row_sq(g: &mut Graph, diff: Var, row_w: &[f64]) -> Result<Var, KoopmanError> {
    let [rows, cols] = g.shape(diff);
    debug_assert_eq!(rows, row_w.len());
    let sq = g.square(diff);
    let w = Tensor::new(rows, cols, row_w.iter().flat_map(|w| std::iter::repeat_n(*w, cols)).collect())?;
    let w = g.constant(w);
    let prod = g.mul(sq, w)?;
    Ok(g.sum(prod))
}

fn recon_from(g: &mut Graph, m: &KoopmanModel, batch: &Batch, z: Var) -> Result<Var, KoopmanError> {
    let w: Vec<f64> = batch.starts().iter().map(|s| f64::from(u8::from(*s))).collect();
    let count: f64 = w.iter().sum();
    if count == 0.0 {
        return Err(KoopmanError::EmptyBatch("reconstruction loss"));
    }
    let x = g.constant(batch.states().clone());
    let xr = m.decode_var(g, z)?;
    let diff = g.sub(x, xr)?;
    let s = weighted_row_sq(g, diff, &w)?;
    Ok(g.scale(s, 1.0 / count))
}

/// Returns `(L2, L3)` from a shared rollout of the encoded batch `z`.
fn rollout_from(
    g: &mut Graph,
    m: &KoopmanModel,
    batch: &Batch,
    z: Var,
    k_max: usize,
    use_lsk: bool,
) -> Result<(Var, Var), KoopmanError> {
    if k_max == 0 {
        return Err(KoopmanError::Config("k_max must be at least 1".into()));
    }
    let t = batch.len();
    let (at, bt) = m.transition_vars(g, use_lsk)?;
    let x = g.constant(batch.states().clone());
    let u = g.constant(batch.controls().clone());
    let mut zhat = z;
    let mut lin_terms = Vec::new();
    let mut pred_terms = Vec::new();
    let mut count = 0.0;
    for j in 1..=k_max.min(t.saturating_sub(1)) {
        let prev = g.rows(zhat, 0, t - j)?;
        let uj = g.rows(u, j - 1, t - 1)?;
        let az = g.matmul(prev, at)?;
        let bu = g.matmul(uj, bt)?;
        zhat = g.add(az, bu)?;
        let w: Vec<f64> = (0..t - j)
            .map(|k| f64::from(u8::from(batch.starts()[k] && batch.delivered()[k + j])))
            .collect();
        let n: f64 = w.iter().sum();
        if n == 0.0 {
            continue;
        }
        count += n;
        let z_true = g.rows(z, j, t)?;
        let dz = g.sub(z_true, zhat)?;
        lin_terms.push(weighted_row_sq(g, dz, &w)?);
        let x_true = g.rows(x, j, t)?;
        let x_hat = m.decode_var(g, zhat)?;
        let dx = g.sub(x_true, x_hat)?;
        pred_terms.push(weighted_row_sq(g, dx, &w)?);
    }
    if count == 0.0 {
        return Err(KoopmanError::EmptyBatch("multi-step losses"));
    }
    let lin = sum_all(g, &lin_terms)?;
    let pred = sum_all(g, &pred_terms)?;
    Ok((g.scale(lin, 1.0 / count), g.scale(pred, 1.0 / count)))
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Var, KoopmanError> {
    let stacked = g.concat_rows(terms)?;
    Ok(g.sum(stacked))
}

pub fn loss_recon(g: &mut Graph, m: &KoopmanModel, batch: &Batch) -> Result<Var, KoopmanError> {
    let z = m.encode_var(g, batch.states())?;
    recon_from(g, m, batch, z)
}

pub fn loss_linear(g: &mut Graph, m: &KoopmanModel, batch: &Batch, k_max: usize, use_lsk: bool) -> Result<Var, KoopmanError> {
    let z = m.encode_var(g, batch.states())?;
    Ok(rollout_from(g, m, batch, z, k_max, use_lsk)?.0)
}

pub fn loss_pred(g: &mut Graph, m: &KoopmanModel, batch: &Batch, k_max: usize, use_lsk: bool) -> Result<Var, KoopmanError> {
    let z = m.encode_var(g, batch.states())?;
    Ok(rollout_from(g, m, batch, z, k_max, use_lsk)?.1)
}

/// `L4` for the closed-loop latent trace that starts at `enc(x0)` and is
/// driven by `policy`, whose gain and feed-forward are held constant.
pub fn loss_logic(
    g: &mut Graph,
    m: &KoopmanModel,
    term: &LogicTerm,
    policy: &LatentPolicy,
    x0: &[f64],
    use_lsk: bool,
) -> Result<Var, KoopmanError> {
    if term.horizon < 2 {
        return Err(KoopmanError::Config("logic horizon must be at least 2".into()));
    }
    let (at, bt) = m.transition_vars(g, use_lsk)?;
    let mut z = m.encode_var(g, &Tensor::row(x0.to_vec()))?;
    let z_ref = m.encode_var(g, &Tensor::row(term.target.clone()))?;
    let kt = g.constant(policy.gain.transpose());
    let u_ref = g.constant(Tensor::row(policy.u_ref.clone()));
    let mut latents = Vec::with_capacity(term.horizon);
    latents.push(z);
    for _ in 1..term.horizon {
        let err = g.sub(z, z_ref)?;
        let fb = g.matmul(err, kt)?;
        let u = g.sub(u_ref, fb)?;
        let az = g.matmul(z, at)?;
        let bu = g.matmul(u, bt)?;
        z = g.add(az, bu)?;
        latents.push(z);
    }
    let latents = g.concat_rows(&latents)?;
    let trace = match term.source {
        TraceSource::Latent(i) => g.column(latents, i)?,
        TraceSource::Physical(i) => {
            let states = m.decode_var(g, latents)?;
            g.column(states, i)?
        }
    };
    Ok(stl::logic_loss(g, &term.rule, trace, term.eval_time, term.min_mode)?)
}

/// Sum of squared entries of every trainable parameter.
pub fn regularizer(g: &mut Graph, m: &KoopmanModel) -> Result<Var, KoopmanError> {
    let names: Vec<String> = m
        .params()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut terms = Vec::with_capacity(names.len());
    for name in &names {
        let p = g.param(m.params(), name)?;
        terms.push(g.l2_norm_sq(p));
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    sum_all(g, &terms)
}

/// Weighted objective; `logic` adds `L4` when present.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    m: &KoopmanModel,
    batch: &Batch,
    weights: &LossWeights,
    k_max: usize,
    use_lsk: bool,
    logic: Option<(&LogicTerm, &LatentPolicy, &[f64])>,
) -> Result<LossBreakdown, KoopmanError> {
    let z = m.encode_var(g, batch.states())?;
    let recon = recon_from(g, m, batch, z)?;
    let (linear, pred) = rollout_from(g, m, batch, z, k_max, use_lsk)?;
    let logic = match logic {
        Some((term, policy, x0)) => Some(loss_logic(g, m, term, policy, x0, use_lsk)?),
        None => None,
    };
    let reg = regularizer(g, m)?;
    let mut parts = vec![
        g.scale(recon, weights.recon),
        g.scale(linear, weights.linear),
        g.scale(pred, weights.pred),
        g.scale(reg, weights.reg),
    ];
    if let Some(l4) = logic {
        parts.push(g.scale(l4, weights.logic));
    }
    let total = sum_all(g, &parts)?;
    Ok(LossBreakdown {
        total,
        recon,
        linear,
        pred,
        logic,
        reg,
    })
}

/// `c1 L1 + c2 L2 + c3 L3 + c4 |W|^2` on the shared model.
pub fn total_loss_dsk(
    g: &mut Graph,
    m: &KoopmanModel,
    batch: &Batch,
    weights: &LossWeights,
    k_max: usize,
) -> Result<LossBreakdown, KoopmanError> {
    total_loss(g, m, batch, weights, k_max, false, None)
}

/// `c1 L1 + c2 L2 + c3 L3 + c4 L4 + c5 |W|^2` on the adapted model.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_lsk(
    g: &mut Graph,
    m: &KoopmanModel,
    batch: &Batch,
    term: &LogicTerm,
    policy: &LatentPolicy,
    x0: &[f64],
    weights: &LossWeights,
    k_max: usize,
) -> Result<LossBreakdown, KoopmanError> {
    if !m.has_lsk() {
        return Err(KoopmanError::MissingLsk);
    }
    total_loss(g, m, batch, weights, k_max, true, Some((term, policy, x0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::koopman::{ModelSpec, Normalization, DSK_A, DSK_B};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> KoopmanModel {
        let spec = ModelSpec {
            hidden: 8,
            ..ModelSpec::cart_pole(3)
        };
        KoopmanModel::new(spec, &Normalization::identity(4), &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn batch() -> Batch {
        let states: Vec<Vec<f64>> = (0..10).map(|k| vec![0.1 * k as f64, -0.2, 0.05 * k as f64, 0.3]).collect();
        let controls: Vec<Vec<f64>> = (0..10).map(|k| vec![(k as f64).sin()]).collect();
        let delivered: Vec<bool> = (0..10).map(|k| k != 4).collect();
        Batch::new(&states, &controls, &delivered).unwrap()
    }

    #[test]
    fn all_losses_are_non_negative() {
        let mut m = model();
        m.attach_lsk();
        let b = batch();
        let term = LogicTerm::new(Formula::tracking_rule(0.5, 2, 6), vec![0.5, 0.0, 0.0, 0.0], 8);
        let pol = LatentPolicy::design(&m, true, &term.target, Some(&[0.0]), &[1.0; 4], 1.0).unwrap();
        let mut g = Graph::new();
        let parts = total_loss_lsk(&mut g, &m, &b, &term, &pol, &[0.1, 0.0, 0.0, 0.0], &LossWeights::LSK, 3).unwrap();
        for v in [parts.total, parts.recon, parts.linear, parts.pred, parts.reg, parts.logic.unwrap()] {
            assert!(g.item(v) >= 0.0);
        }
    }

    #[test]
    fn dsk_total_skips_the_logic_term() {
        let m = model();
        let mut g = Graph::new();
        let parts = total_loss_dsk(&mut g, &m, &batch(), &LossWeights::DSK, 2).unwrap();
        assert!(parts.logic.is_none());
        let w = LossWeights::DSK;
        let sum = w.recon * g.item(parts.recon) + w.linear * g.item(parts.linear) + w.pred * g.item(parts.pred) + w.reg * g.item(parts.reg);
        assert!((g.item(parts.total) - sum).abs() < 1e-12);
    }

    #[test]
    fn adapter_objective_needs_adapters() {
        let m = model();
        let term = LogicTerm::new(Formula::tracking_rule(0.0, 0, 1), vec![0.0; 4], 4);
        let pol = LatentPolicy {
            gain: Tensor::zeros(1, 3),
            z_ref: vec![0.0; 3],
            u_ref: vec![0.0],
        };
        let mut g = Graph::new();
        let res = total_loss_lsk(&mut g, &m, &batch(), &term, &pol, &[0.0; 4], &LossWeights::LSK, 1);
        assert!(matches!(res, Err(KoopmanError::MissingLsk)));
    }

    #[test]
    fn logic_loss_vanishes_when_the_trace_rests_on_target() {
        let mut m = model();
        m.params_mut().set_value(DSK_A, Tensor::identity(3)).unwrap();
        m.params_mut().set_value(DSK_B, Tensor::zeros(3, 1)).unwrap();
        let target = vec![0.5, 0.0, 0.0, 0.0];
        let z = m.encode(&target).unwrap();
        let pol = LatentPolicy {
            gain: Tensor::zeros(1, 3),
            z_ref: z.clone(),
            u_ref: vec![0.0],
        };
        for source in [TraceSource::Latent(1), TraceSource::Physical(0)] {
            let level = match source {
                TraceSource::Latent(i) => z[i],
                TraceSource::Physical(_) => m.decode(&z).unwrap()[0],
            };
            let term = LogicTerm {
                source,
                ..LogicTerm::new(Formula::tracking_rule(level, 1, 5), target.clone(), 7)
            };
            let mut g = Graph::new();
            let l4 = loss_logic(&mut g, &m, &term, &pol, &target, false).unwrap();
            assert_eq!(g.item(l4), 0.0, "{source:?}");
        }
    }

    #[test]
    fn deeper_rollouts_need_a_positive_depth() {
        let mut g = Graph::new();
        assert!(loss_linear(&mut g, &model(), &batch(), 0, false).is_err());
    }
}
