use rand::RngCore;
use rayon::prelude::*;

use super::data::{batch_from, delivery_mask, initial_state, operating_trajectory, substream};
use super::eval::{average_score, latent_closed_loop, prediction_scores, PredictionScores};
use super::{InputScaling, ExperimentError, ExperimentRecord, Method, Role, RunConfig, SystemSpec};
use crate::koopman::{Batch, train_dsk, train_lsk, KoopmanModel, LatentPolicy, LogicTerm, Normalization, TrainConfig, TrainLog};
use crate::plant::{PlantState, Trajectory};

/// Smallest per-dimension scale a fitted normalization may use.
const NORM_FLOOR: f64 = 1e-3;

/// Everything one plant sees for one seed: its training record, a separate
/// test record, and the conditions of the closed-loop score run.
#[derive(Clone, Debug)]
pub struct SystemData {
    pub spec: SystemSpec,
    pub train: Trajectory,
    pub train_mask: Vec<bool>,
    pub test: Trajectory,
    pub test_mask: Vec<bool>,
    pub score_x0: PlantState,
    pub score_mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SeedData {
    pub seed: u64,
    pub systems: Vec<SystemData>,
}

impl SeedData {
    pub fn system(&self, id: usize) -> Result<&SystemData, ExperimentError> {
        self.systems
            .iter()
            .find(|s| s.spec.id() == id)
            .ok_or_else(|| ExperimentError::Config(format!("no data for system {id}")))
    }

    pub fn reference(&self) -> Result<&SystemData, ExperimentError> {
        self.systems
            .iter()
            .find(|s| s.spec.role == Role::Reference)
            .ok_or_else(|| ExperimentError::Config("no reference system".into()))
    }
}

/// Simulates every plant and draws every erasure for `seed`.
pub fn prepare_seed(cfg: &RunConfig, seed: u64) -> Result<SeedData, ExperimentError> {
    let test_len = cfg.eval_steps + cfg.prediction_depth + 1;
    let systems = cfg
        .systems
        .iter()
        .map(|spec| {
            let id = spec.id();
            let link = spec.link(cfg.snr_db);
            let train = operating_trajectory(spec, cfg, seed, "train", cfg.horizon)?;
            let test = operating_trajectory(spec, cfg, seed, "test", test_len)?;
            Ok(SystemData {
                spec: spec.clone(),
                train_mask: delivery_mask(&link, seed, "train", id, cfg.horizon),
                train,
                test_mask: delivery_mask(&link, seed, "test", id, test_len),
                test,
                score_x0: initial_state(cfg, &mut substream(seed, "score/init", id)),
                score_mask: delivery_mask(&link, seed, "score", id, cfg.score_steps),
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(SeedData { seed, systems })
}

fn train_config(cfg: &RunConfig, seed: u64, purpose: &str, system: usize) -> TrainConfig {
    TrainConfig {
        seed: substream(seed, &format!("{purpose}/split"), system).next_u64(),
        ..cfg.train.clone()
    }
}

fn logic_term(cfg: &RunConfig, spec: &SystemSpec) -> Result<Option<LogicTerm>, ExperimentError> {
    Ok(spec.formula()?.map(|f| LogicTerm {
        source: cfg.logic_trace,
        ..LogicTerm::new(f, spec.target(), cfg.horizon)
    }))
}

/// An individually trained model on the full record: the shared model's
/// training for the reference plant, with the plant's rule when it has one.
pub fn train_individual(cfg: &RunConfig, sys: &SystemData, seed: u64) -> Result<(KoopmanModel, TrainLog), ExperimentError> {
    let id = sys.spec.id();
    let spec = cfg.model_spec();
    let norm = Normalization::identity(spec.state_dim);
    let mut model = KoopmanModel::new(spec, &norm, &mut substream(seed, "model/init", id))?;
    let batch = batch_from(&sys.train, &sys.train_mask, cfg.horizon)?;
    if let Some(norm) = fit_normalization(cfg.normalization, &batch)? {
        model.set_normalization(&norm)?;
    }
    let logic = logic_term(cfg, &sys.spec)?;
    let log = train_dsk(&mut model, &batch, logic.as_ref(), &train_config(cfg, seed, "individual", id))?;
    Ok((model, log))
}

/// Transmission windows of the adapter phase: `phase2_windows` evenly
/// spaced bursts over the record that together span `phase2_budget`
/// transmissions.
pub fn phase2_windows(cfg: &RunConfig) -> Vec<std::ops::Range<usize>> {
    let windows = cfg.phase2_windows;
    let budget = cfg.phase2_budget();
    let stride = cfg.horizon / windows;
    (0..windows)
        .map(|w| {
            let len = budget / windows + usize::from(w < budget % windows);
            let start = w * stride;
            start..(start + len).min(cfg.horizon)
        })
        .collect()
}

/// Adapter-phase batch: the delivered samples of each window, with
/// undelivered filler rows between windows so that no prediction pair
/// spans two bursts.
pub fn phase2_batch(cfg: &RunConfig, sys: &SystemData) -> Result<Batch, ExperimentError> {
    let (mut states, mut controls, mut delivered) = (Vec::new(), Vec::new(), Vec::new());
    let windows = phase2_windows(cfg);
    for (i, w) in windows.iter().enumerate() {
        if i > 0 {
            for _ in 0..cfg.train.k_max {
                states.push(vec![0.0; 4]);
                controls.push(vec![0.0]);
                delivered.push(false);
            }
        }
        for k in w.clone() {
            let s = &sys.train.samples[k];
            states.push(s.state.to_array().to_vec());
            controls.push(vec![s.u]);
            delivered.push(sys.train_mask[k]);
        }
    }
    Ok(Batch::new(&states, &controls, &delivered)?)
}

fn fit_normalization(mode: InputScaling, batch: &Batch) -> Result<Option<Normalization>, ExperimentError> {
    let states = batch.states();
    let rows: Vec<Vec<f64>> = (0..batch.len())
        .filter(|&k| batch.delivered()[k])
        .map(|k| states.row_slice(k).to_vec())
        .collect();
    Ok(match mode {
        InputScaling::None => None,
        InputScaling::Standardize => Some(Normalization::fit_diagonal(&rows, NORM_FLOOR)?),
        InputScaling::Whiten => Some(Normalization::fit_whitening(&rows, NORM_FLOOR)?),
    })
}

/// Phase 1: the shared model fitted on the reference plant.
pub fn train_reference(cfg: &RunConfig, data: &SeedData) -> Result<(KoopmanModel, TrainLog), ExperimentError> {
    train_individual(cfg, data.reference()?, data.seed)
}

/// Phase 2: adapters for one plant from `phase2_budget` transmissions of
/// its record, on a copy of the shared model. The copy refits its input
/// scaling to this plant's samples.
pub fn train_adapted(
    cfg: &RunConfig,
    shared: &KoopmanModel,
    sys: &SystemData,
    seed: u64,
) -> Result<(KoopmanModel, TrainLog), ExperimentError> {
    let id = sys.spec.id();
    let mut model = shared.clone();
    let batch = phase2_batch(cfg, sys)?;
    if let Some(norm) = fit_normalization(cfg.normalization, &batch)? {
        model.set_normalization(&norm)?;
    }
    let logic = logic_term(cfg, &sys.spec)?;
    let log = train_lsk(&mut model, &batch, logic.as_ref(), &train_config(cfg, seed, "adapter", id))?;
    Ok((model, log))
}

/// Prediction scores on the test record and the closed-loop average score
/// under a latent controller designed on the model.
pub fn evaluate_model(
    cfg: &RunConfig,
    model: &KoopmanModel,
    use_lsk: bool,
    sys: &SystemData,
    seed: u64,
) -> Result<(PredictionScores, f64), ExperimentError> {
    let pred = prediction_scores(model, use_lsk, &sys.test, &sys.test_mask, cfg.eval_steps, cfg.prediction_depth)?;
    let policy = LatentPolicy::design(
        model,
        use_lsk,
        &sys.spec.target(),
        cfg.train.target_input(),
        &cfg.train.policy_q,
        cfg.train.policy_r,
    ).ok();
    let mut noise = substream(seed, "score/noise", sys.spec.id());
    let states = latent_closed_loop(
        model,
        use_lsk,
        policy.as_ref(),
        &sys.spec.plant,
        sys.score_x0,
        &sys.score_mask,
        cfg.score_steps,
        &mut noise,
    )?;
    Ok((pred, average_score(&states, sys.spec.beta)?))
}

/// Scores one trained model on one plant as a result row.
pub fn evaluation_record(
    cfg: &RunConfig,
    method: Method,
    sys: &SystemData,
    seed: u64,
    model: &KoopmanModel,
    use_lsk: bool,
    samples: usize,
) -> Result<ExperimentRecord, ExperimentError> {
    let (pred, score) = evaluate_model(cfg, model, use_lsk, sys, seed)?;
    Ok(ExperimentRecord {
        method,
        system: sys.spec.id(),
        d: cfg.latent_dim,
        snr_db: cfg.snr_db,
        seed,
        nrmse_pct: pred.one_step,
        avg_score: score,
        samples,
        nrmse_multi_pct: pred.multi_step,
    })
}

enum Job<'a> {
    Adapter(&'a SystemData),
    Individual(&'a SystemData),
}

fn run_seed(cfg: &RunConfig, seed: u64, methods: &[Method]) -> Result<Vec<ExperimentRecord>, ExperimentError> {
    let data = prepare_seed(cfg, seed)?;
    let reference = data.reference()?;
    let (shared, shared_log) = train_reference(cfg, &data)?;
    let adapted: Vec<&SystemData> = data.systems.iter().filter(|s| s.spec.role == Role::Adapted).collect();

    let mut jobs = Vec::new();
    if methods.contains(&Method::Proposed) {
        jobs.extend(adapted.iter().map(|s| Job::Adapter(s)));
    }
    if methods.contains(&Method::Baseline1) {
        jobs.extend(adapted.iter().map(|s| Job::Individual(s)));
    }
    let outcomes = jobs
        .par_iter()
        .map(|job| match job {
            Job::Adapter(sys) => {
                let (m, log) = train_adapted(cfg, &shared, sys, seed)?;
                evaluation_record(cfg, Method::Proposed, sys, seed, &m, true, log.delivered_samples)
            }
            Job::Individual(sys) => {
                let (m, log) = train_individual(cfg, sys, seed)?;
                evaluation_record(cfg, Method::Baseline1, sys, seed, &m, false, log.delivered_samples)
            }
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;

    let mut records = outcomes;
    // The reference plant is served by the same shared model in every method,
    // so it is evaluated once and its record copied.
    let ref_record = evaluation_record(cfg, Method::Proposed, reference, seed, &shared, false, shared_log.delivered_samples)?;
    for &method in methods {
        records.push(ExperimentRecord {
            method,
            ..ref_record.clone()
        });
    }
    if methods.contains(&Method::Baseline2) {
        let b2 = adapted
            .par_iter()
            .map(|sys| evaluation_record(cfg, Method::Baseline2, sys, seed, &shared, false, 0))
            .collect::<Result<Vec<_>, ExperimentError>>()?;
        records.extend(b2);
    }
    Ok(records)
}

/// Runs the requested methods for every configured seed. Seeds and the
/// per-plant trainings inside a seed run in parallel; the result is sorted
/// by method, system and seed, and does not depend on the thread count.
pub fn run_methods(cfg: &RunConfig, methods: &[Method]) -> Result<Vec<ExperimentRecord>, ExperimentError> {
    cfg.validate()?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, seed, methods))
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let mut records: Vec<ExperimentRecord> = per_seed.into_iter().flatten().collect();
    records.sort_by_key(|r| (r.method, r.system, r.seed));
    Ok(records)
}

/// Shared model on the reference plant plus per-plant adapters.
pub fn run_proposed(cfg: &RunConfig) -> Result<Vec<ExperimentRecord>, ExperimentError> {
    run_methods(cfg, &[Method::Proposed])
}

/// One model per plant, each on its full record.
pub fn run_baseline1(cfg: &RunConfig) -> Result<Vec<ExperimentRecord>, ExperimentError> {
    run_methods(cfg, &[Method::Baseline1])
}

/// The reference plant's model used unchanged on every plant.
pub fn run_baseline2(cfg: &RunConfig) -> Result<Vec<ExperimentRecord>, ExperimentError> {
    run_methods(cfg, &[Method::Baseline2])
}
