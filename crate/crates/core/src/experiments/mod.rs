//! The five-plant protocol: data generation over a fading uplink, the
//! proposed shared-plus-adapter method, two baselines, and their metrics.

mod data;
mod eval;
mod report;
mod run;

use serde::{Deserialize, Serialize};

pub use data::{batch_from, delivery_mask, initial_state, operating_trajectory, substream};
pub use eval::{average_score, latent_closed_loop, nrmse, prediction_scores, PredictionScores};
pub use report::{read_records, summarize, write_records, write_summary, write_svg, Headline, Summary, SummaryRow};
pub use run::{
    evaluate_model, evaluation_record, phase2_batch, phase2_windows, prepare_seed, run_baseline1, run_baseline2, run_methods, run_proposed, train_adapted, train_individual,
    train_reference, SeedData, SystemData,
};

use crate::channel::{ChannelError, LinkParams};
use crate::koopman::{Activation, KoopmanError, ModelSpec, TraceSource, TrainConfig};
use crate::plant::{PlantError, PlantParams, DEFAULT_LQR_Q, DEFAULT_LQR_R};
use crate::stl::{Formula, StlError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("plant: {0}")]
    Plant(#[from] PlantError),
    #[error("channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("model: {0}")]
    Koopman(#[from] KoopmanError),
    #[error("rule: {0}")]
    Stl(#[from] StlError),
    #[error("metric: {0}")]
    Metric(String),
    #[error("system {system} diverged at step {step} while generating data")]
    Diverged { system: usize, step: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reference,
    Adapted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Proposed,
    Baseline1,
    Baseline2,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Proposed, Method::Baseline1, Method::Baseline2];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Baseline1 => "baseline1",
            Method::Baseline2 => "baseline2",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ExperimentError::Config(format!("unknown method `{s}`, expected proposed, baseline1 or baseline2")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Input scaling fitted to a model's training samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputScaling {
    None,
    /// Per-dimension mean and standard deviation.
    Standardize,
    /// Mean and inverse square root of the covariance.
    Whiten,
}

/// One plant of the suite together with its uplink and its rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub plant: PlantParams,
    /// Cart position the rule asks for.
    pub beta: f64,
    /// `None` for the reference plant.
    #[serde(default)]
    pub rule: Option<String>,
    pub role: Role,
    /// Uplink; calibrated from the run's SNR when absent.
    #[serde(default)]
    pub link: Option<LinkParams>,
}

impl SystemSpec {
    pub fn id(&self) -> usize {
        self.plant.id
    }

    pub fn formula(&self) -> Result<Option<Formula>, ExperimentError> {
        self.rule.as_deref().map(Formula::parse).transpose().map_err(ExperimentError::from)
    }

    /// Physical set point `(beta, 0, 0, 0)`.
    pub fn target(&self) -> Vec<f64> {
        vec![self.beta, 0.0, 0.0, 0.0]
    }

    pub fn link(&self, snr_db: f64) -> LinkParams {
        self.link.clone().unwrap_or_else(|| LinkParams::calibrated(snr_db))
    }
}

/// Rule asking the cart to sit at `beta` throughout steps 151 to 251.
pub fn tracking_rule_text(beta: f64) -> String {
    format!("alw[151,251]((s0 >= {beta:?}) and (s0 <= {beta:?}))")
}

/// The five cart-poles: a light reference plant without a rule and four
/// heavier, longer plants, each asked to hold its own cart position.
pub fn standard_suite() -> Vec<SystemSpec> {
    let rows = [(1.0, 5.0, 0.2, 0.0), (3.0, 15.0, 0.6, 2.0), (4.0, 20.0, 0.8, 3.0), (5.0, 25.0, 1.0, 4.0), (6.0, 30.0, 1.2, 5.0)];
    rows.iter()
        .enumerate()
        .map(|(i, &(mp, mc, l, beta))| {
            let reference = i == 0;
            SystemSpec {
                plant: PlantParams::new(i + 1, mp, mc, l),
                beta,
                rule: (!reference).then(|| tracking_rule_text(beta)),
                role: if reference { Role::Reference } else { Role::Adapted },
                link: None,
            }
        })
        .collect()
}

fn default_systems() -> Vec<SystemSpec> {
    standard_suite()
}

/// Everything a reproduction run needs. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub output_activation: Activation,
    pub snr_db: f64,
    pub seeds: Vec<u64>,
    /// Transmissions in one operating record.
    pub horizon: usize,
    /// Share of `horizon` an adapted plant may transmit for its adapters.
    pub phase2_fraction: f64,
    /// Number of evenly spaced bursts that budget is split into.
    pub phase2_windows: usize,
    /// How each model rescales its inputs, fitted to the samples it is
    /// trained on.
    pub normalization: InputScaling,
    /// Prediction steps scored by the NRMSE.
    pub eval_steps: usize,
    /// Open-loop depth of the multi-step NRMSE.
    pub prediction_depth: usize,
    /// Closed-loop steps scored by the average score.
    pub score_steps: usize,
    /// Initial pole angles are drawn from `[-init_theta, init_theta]`.
    pub init_theta: f64,
    /// Excitation standard deviation in m/s^2; the force std scales with mass.
    pub dither_accel: f64,
    pub lqr_q: [f64; 4],
    pub lqr_r: f64,
    /// Signal the rule of each adapted plant is checked on during training.
    pub logic_trace: TraceSource,
    pub out_dir: String,
    pub train: TrainConfig,
    #[serde(default = "default_systems")]
    pub systems: Vec<SystemSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            hidden: 32,
            output_activation: Activation::Linear,
            snr_db: 15.0,
            seeds: (0..5).collect(),
            horizon: 252,
            phase2_fraction: 0.1,
            phase2_windows: 5,
            normalization: InputScaling::Standardize,
            eval_steps: 100,
            prediction_depth: 10,
            score_steps: 252,
            init_theta: 0.1,
            dither_accel: 2.0,
            lqr_q: DEFAULT_LQR_Q,
            lqr_r: DEFAULT_LQR_R,
            logic_trace: TraceSource::Physical(0),
            out_dir: "out".into(),
            train: TrainConfig::default(),
            systems: standard_suite(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        toml::to_string(self).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            hidden: self.hidden,
            output_activation: self.output_activation,
            ..ModelSpec::cart_pole(self.latent_dim)
        }
    }

    /// Transmissions an adapted plant may spend in the adapter phase.
    pub fn phase2_budget(&self) -> usize {
        ((self.phase2_fraction * self.horizon as f64).round() as usize).max(2)
    }

    pub fn reference(&self) -> Result<&SystemSpec, ExperimentError> {
        self.systems
            .iter()
            .find(|s| s.role == Role::Reference)
            .ok_or_else(|| ExperimentError::Config("systems: no reference system".into()))
    }

    pub fn system(&self, id: usize) -> Result<&SystemSpec, ExperimentError> {
        self.systems
            .iter()
            .find(|s| s.id() == id)
            .ok_or_else(|| ExperimentError::Config(format!("systems: no system with id {id}")))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |field: &str, why: String| Err(ExperimentError::Config(format!("{field}: {why}")));
        if let Err(e) = self.model_spec().validate() {
            return bad("latent_dim/hidden", e.to_string());
        }
        if !self.snr_db.is_finite() {
            return bad("snr_db", "must be finite".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "need at least one seed".into());
        }
        if self.horizon < 3 {
            return bad("horizon", "must be at least 3".into());
        }
        if !(self.phase2_fraction > 0.0 && self.phase2_fraction <= 1.0) {
            return bad("phase2_fraction", "must lie in (0, 1]".into());
        }
        if self.phase2_windows == 0 || self.phase2_windows > self.phase2_budget() {
            return bad("phase2_windows", format!("must lie in 1..={}", self.phase2_budget()));
        }
        if self.eval_steps == 0 || self.score_steps == 0 {
            return bad("eval_steps/score_steps", "must be at least 1".into());
        }
        if self.prediction_depth == 0 {
            return bad("prediction_depth", "must be at least 1".into());
        }
        if !(self.init_theta >= 0.0 && self.init_theta < 1.0) {
            return bad("init_theta", "must lie in [0, 1) rad".into());
        }
        if !(self.dither_accel.is_finite() && self.dither_accel >= 0.0) {
            return bad("dither_accel", "must be >= 0".into());
        }
        if !(self.lqr_r > 0.0) || self.lqr_q.iter().any(|q| !(*q >= 0.0)) {
            return bad("lqr_q/lqr_r", "need Q >= 0 and R > 0".into());
        }
        if let Err(e) = self.train.validate() {
            return bad("train", e.to_string());
        }
        let refs = self.systems.iter().filter(|s| s.role == Role::Reference).count();
        if refs != 1 {
            return bad("systems", format!("need exactly one reference system, found {refs}"));
        }
        let mut ids: Vec<usize> = self.systems.iter().map(SystemSpec::id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.systems.len() {
            return bad("systems", "ids must be unique".into());
        }
        for (i, s) in self.systems.iter().enumerate() {
            let field = format!("systems[{i}]");
            if let Err(e) = s.plant.validate() {
                return bad(&format!("{field}.plant"), e.to_string());
            }
            if let Some(link) = &s.link {
                if let Err(e) = link.validate() {
                    return bad(&format!("{field}.link"), e.to_string());
                }
            }
            match (s.role, &s.rule) {
                (Role::Reference, Some(_)) => return bad(&format!("{field}.rule"), "the reference system has no rule".into()),
                (Role::Adapted, None) => return bad(&format!("{field}.rule"), "adapted systems need a rule".into()),
                _ => {}
            }
            if let Err(e) = s.formula() {
                return bad(&format!("{field}.rule"), e.to_string());
            }
            if let Some(f) = s.formula()? {
                if f.max_signal() > 0 {
                    return bad(&format!("{field}.rule"), "rules may only use signal s0".into());
                }
                if f.horizon() >= self.horizon {
                    return bad(&format!("{field}.rule"), format!("rule horizon {} exceeds the record", f.horizon()));
                }
            }
        }
        Ok(())
    }
}

/// One (method, system, seed) cell of the results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub method: Method,
    pub system: usize,
    pub d: usize,
    pub snr_db: f64,
    pub seed: u64,
    /// One-step prediction NRMSE in percent.
    pub nrmse_pct: f64,
    pub avg_score: f64,
    /// Delivered uplink samples consumed by training for this system.
    pub samples: usize,
    /// NRMSE of `prediction_depth`-step open-loop predictions, in percent.
    pub nrmse_multi_pct: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_has_one_reference_without_rule() {
        let suite = standard_suite();
        assert_eq!(suite.len(), 5);
        let refs: Vec<_> = suite.iter().filter(|s| s.role == Role::Reference).collect();
        assert_eq!(refs.len(), 1);
        assert!(refs[0].rule.is_none());
        let betas: Vec<f64> = suite.iter().map(|s| s.beta).collect();
        assert_eq!(betas, vec![0.0, 2.0, 3.0, 4.0, 5.0]);
        for s in &suite[1..] {
            let f = s.formula().unwrap().unwrap();
            assert_eq!(f.horizon(), 251);
        }
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn budget_is_ten_percent_of_record() {
        assert_eq!(RunConfig::default().phase2_budget(), 25);
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = RunConfig::default();
        cfg.systems[2].rule = None;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("systems[2].rule"), "{msg}");
        let msg = RunConfig::from_toml("latent_dim = 4\nbogus = 1\n").unwrap_err().to_string();
        assert!(msg.contains("bogus"), "{msg}");
        let mut cfg = RunConfig::default();
        cfg.seeds.clear();
        assert!(cfg.validate().unwrap_err().to_string().starts_with("config: seeds"));
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("baseline3".parse::<Method>().is_err());
    }
}
