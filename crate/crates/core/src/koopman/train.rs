use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    total_loss, Batch, KoopmanError, KoopmanModel, LatentPolicy, LogicTerm, LossWeights, DSK_A, DSK_B,
    NETWORK_PARAMS,
};
use crate::diffcore::{AdamState, Graph, ParamStore};
use crate::plant::{DEFAULT_LQR_Q, DEFAULT_LQR_R};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Shared-model objective. A rule-aware shared model borrows the logic
    /// weight from `lsk_weights`.
    pub dsk_weights: LossWeights,
    pub lsk_weights: LossWeights,
    pub lr: f64,
    /// Learning rate of the adapter phase.
    pub adapter_lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Deepest rollout scored by the linearity and prediction losses. On
    /// records of an unstable plant, deep rollouts are dominated by the
    /// growth of the unstable mode.
    pub k_max: usize,
    /// Autoencoder-only epochs before the shared model is fitted.
    pub pretrain_epochs: usize,
    pub val_fraction: f64,
    /// Learning-rate multiplier for encoder and decoder during adaptation.
    pub finetune_lr_scale: f64,
    /// Physical state weights for the latent controller used by the logic loss.
    pub policy_q: Vec<f64>,
    pub policy_r: f64,
    /// Input that holds the plant at the rule's target. Leave empty when it
    /// is unknown and the controller should solve for it from the model.
    pub policy_target_input: Vec<f64>,
    /// Epochs between redesigns of that controller.
    pub policy_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dsk_weights: LossWeights::DSK,
            lsk_weights: LossWeights::LSK,
            lr: 1e-2,
            adapter_lr: 2e-3,
            max_epochs: 5000,
            patience: 200,
            k_max: 1,
            pretrain_epochs: 50,
            val_fraction: 0.2,
            finetune_lr_scale: 0.1,
            policy_q: DEFAULT_LQR_Q.to_vec(),
            policy_r: DEFAULT_LQR_R,
            policy_target_input: vec![0.0],
            policy_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn target_input(&self) -> Option<&[f64]> {
        (!self.policy_target_input.is_empty()).then_some(self.policy_target_input.as_slice())
    }

    pub fn validate(&self) -> Result<(), KoopmanError> {
        self.dsk_weights.validate()?;
        self.lsk_weights.validate()?;
        let bad = |field: &str, why: &str| Err(KoopmanError::Config(format!("{field}: {why}")));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(self.adapter_lr.is_finite() && self.adapter_lr > 0.0) {
            return bad("adapter_lr", "must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1");
        }
        if self.k_max == 0 {
            return bad("k_max", "must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction", "must lie in (0, 1)");
        }
        if !(self.finetune_lr_scale.is_finite() && self.finetune_lr_scale >= 0.0) {
            return bad("finetune_lr_scale", "must be >= 0");
        }
        if self.policy_every == 0 {
            return bad("policy_every", "must be at least 1");
        }
        if !(self.policy_r > 0.0) || self.policy_q.iter().any(|w| !(*w >= 0.0)) {
            return bad("policy_q/policy_r", "need Q >= 0 and R > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub pretrain: bool,
    pub train_total: f64,
    pub recon: f64,
    pub linear: f64,
    pub pred: f64,
    pub logic: Option<f64>,
    pub val_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    /// Delivered uplink samples the run consumed.
    pub delivered_samples: usize,
    /// Epochs where no latent controller could be designed, so `L4` was left out.
    pub logic_skipped: usize,
}

impl TrainLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train_total)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_total)
    }
}

fn snapshot(store: &ParamStore) -> Vec<(String, crate::diffcore::Tensor)> {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| (n.to_string(), p.value.clone()))
        .collect()
}

fn restore(store: &mut ParamStore, snap: &[(String, crate::diffcore::Tensor)]) -> Result<(), KoopmanError> {
    for (name, value) in snap {
        store.set_value(name, value.clone())?;
    }
    Ok(())
}

struct Session<'a> {
    model: &'a mut KoopmanModel,
    train: Batch,
    val: Batch,
    logic: Option<&'a LogicTerm>,
    x0: Option<Vec<f64>>,
    cfg: &'a TrainConfig,
    use_lsk: bool,
    log: TrainLog,
}

impl Session<'_> {
    fn policy(&mut self) -> Option<LatentPolicy> {
        let term = self.logic?;
        LatentPolicy::design(
            self.model,
            self.use_lsk,
            &term.target,
            self.cfg.target_input(),
            &self.cfg.policy_q,
            self.cfg.policy_r,
        ).ok()
    }

    fn run(&mut self, epochs: std::ops::Range<usize>, weights: LossWeights, pretrain: bool, adam: &mut AdamState) -> Result<(), KoopmanError> {
        let mut best = (f64::INFINITY, 0usize, snapshot(self.model.params()));
        let mut policy = None;
        for epoch in epochs.clone() {
            if !pretrain && self.logic.is_some() && (epoch - epochs.start).is_multiple_of(self.cfg.policy_every) {
                policy = self.policy();
            }
            let logic = match (self.logic, &policy, &self.x0) {
                (Some(t), Some(p), Some(x0)) if !pretrain => Some((t, p, x0.as_slice())),
                _ => None,
            };
            if self.logic.is_some() && !pretrain && logic.is_none() {
                self.log.logic_skipped += 1;
            }
            let mut g = Graph::new();
            let parts = total_loss(&mut g, self.model, &self.train, &weights, self.cfg.k_max, self.use_lsk, logic)?;
            let train_total = g.item(parts.total);
            let entry = EpochLog {
                epoch,
                pretrain,
                train_total,
                recon: g.item(parts.recon),
                linear: g.item(parts.linear),
                pred: g.item(parts.pred),
                logic: parts.logic.map(|v| g.item(v)),
                val_total: f64::NAN,
            };
            if !train_total.is_finite() {
                return Err(KoopmanError::Diverged {
                    epoch,
                    detail: format!(
                        "total={} recon={} linear={} pred={} logic={:?}",
                        entry.train_total, entry.recon, entry.linear, entry.pred, entry.logic
                    ),
                });
            }
            g.backward(parts.total, self.model.params_mut())?;
            // The logic term does not depend on the split, so it is reused.
            let val_total = match validation_total(self.model, &self.val, &weights, self.cfg.k_max, self.use_lsk)? {
                Some(v) => v + weights.logic * entry.logic.unwrap_or(0.0),
                None => train_total,
            };
            self.log.epochs.push(EpochLog { val_total, ..entry });
            if val_total < best.0 {
                best = (val_total, epoch, snapshot(self.model.params()));
            }
            adam.step(self.model.params_mut())?;
            if !pretrain && epoch - best.1 >= self.cfg.patience {
                self.log.stopped_early = true;
                break;
            }
        }
        if !pretrain {
            restore(self.model.params_mut(), &best.2)?;
            self.log.best_epoch = best.1;
            self.log.best_val = best.0;
        }
        Ok(())
    }
}

/// Validation objective without the logic term, or `None` when the split
/// leaves no usable pairs.
fn validation_total(
    m: &KoopmanModel,
    batch: &Batch,
    weights: &LossWeights,
    k_max: usize,
    use_lsk: bool,
) -> Result<Option<f64>, KoopmanError> {
    let mut g = Graph::new();
    match total_loss(&mut g, m, batch, weights, k_max, use_lsk, None) {
        Ok(parts) => Ok(Some(g.item(parts.total))),
        Err(KoopmanError::EmptyBatch(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn session<'a>(
    model: &'a mut KoopmanModel,
    data: &Batch,
    logic: Option<&'a LogicTerm>,
    cfg: &'a TrainConfig,
    use_lsk: bool,
) -> Result<Session<'a>, KoopmanError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, val) = data.split(cfg.val_fraction, &mut rng)?;
    Ok(Session {
        model,
        train,
        val,
        logic,
        x0: data.first_delivered(),
        cfg,
        use_lsk,
        log: TrainLog {
            epochs: Vec::new(),
            best_epoch: 0,
            best_val: f64::INFINITY,
            stopped_early: false,
            delivered_samples: data.delivered_count(),
            logic_skipped: 0,
        },
    })
}

/// Fits encoder, decoder and `(D_A, D_B)` with Adam.
///
/// The first `pretrain_epochs` train the autoencoder alone with the latent
/// matrices frozen. The main phase minimizes the weighted objective (with
/// the logic loss when `logic` is given), stops once the validation total
/// has not improved for `patience` epochs, and restores the best epoch.
pub fn train_dsk(
    model: &mut KoopmanModel,
    data: &Batch,
    logic: Option<&LogicTerm>,
    cfg: &TrainConfig,
) -> Result<TrainLog, KoopmanError> {
    if model.has_lsk() {
        return Err(KoopmanError::Config("train_dsk expects a model without adapters".into()));
    }
    let mut s = session(model, data, logic, cfg, false)?;
    let mut adam = AdamState::new(cfg.lr);
    if cfg.pretrain_epochs > 0 {
        let pre = LossWeights {
            linear: 0.0,
            pred: 0.0,
            logic: 0.0,
            ..cfg.dsk_weights
        };
        s.model.params_mut().set_trainable(DSK_A, false)?;
        s.model.params_mut().set_trainable(DSK_B, false)?;
        let res = s.run(0..cfg.pretrain_epochs, pre, true, &mut adam);
        s.model.params_mut().set_trainable(DSK_A, true)?;
        s.model.params_mut().set_trainable(DSK_B, true)?;
        res?;
    }
    let weights = LossWeights {
        logic: if logic.is_some() { cfg.lsk_weights.logic } else { 0.0 },
        ..cfg.dsk_weights
    };
    let start = cfg.pretrain_epochs;
    s.run(start..start + cfg.max_epochs, weights, false, &mut adam)?;
    Ok(s.log)
}

/// Fits the adapters `(L_A, L_B)` on top of a frozen shared model, with the
/// encoder and decoder fine-tuned at `finetune_lr_scale` times the rate.
/// Adapters start at identity when the model has none yet.
pub fn train_lsk(
    model: &mut KoopmanModel,
    data: &Batch,
    logic: Option<&LogicTerm>,
    cfg: &TrainConfig,
) -> Result<TrainLog, KoopmanError> {
    if !model.has_lsk() {
        model.attach_lsk();
    }
    for name in NETWORK_PARAMS {
        let p = model.params_mut();
        p.set_trainable(name, cfg.finetune_lr_scale > 0.0)?;
        p.set_lr_scale(name, cfg.finetune_lr_scale)?;
    }
    let mut s = session(model, data, logic, cfg, true)?;
    let mut adam = AdamState::new(cfg.adapter_lr);
    s.run(0..cfg.max_epochs, cfg.lsk_weights, false, &mut adam)?;
    let log = s.log;
    for name in NETWORK_PARAMS {
        let p = model.params_mut();
        p.set_trainable(name, true)?;
        p.set_lr_scale(name, 1.0)?;
    }
    Ok(log)
}
