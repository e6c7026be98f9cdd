use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lkae::diffcore::write_checkpoint;
use lkae::experiments::{
    evaluation_record, operating_trajectory, prepare_seed, run_methods, summarize, train_adapted, train_individual,
    write_records, write_summary, write_svg, ExperimentRecord, Method, Role, RunConfig, SeedData, Summary,
};
use lkae::koopman::{KoopmanModel, TrainLog};
use lkae::stl::{robustness, Formula, TimedTrace};

#[derive(Parser, Debug)]
#[command(name = "lkae", version, about = "Shared latent linear models for networked cart-poles")]
struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed. Defaults to the first seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Overrides `out_dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// STL rule text, for `monitor` or to override a plant's rule in `train`.
    #[arg(long, global = true)]
    rule: Option<String>,
    /// Mean uplink SNR in dB. Overrides `snr_db` from the configuration.
    #[arg(long = "snr-db", global = true, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    /// Latent dimension. Overrides `latent_dim` from the configuration.
    #[arg(long = "latent-dim", global = true)]
    latent_dim: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write its checkpoint and per-epoch log.
    Train {
        #[arg(long, value_enum)]
        phase: Phase,
        /// Plant to train; `dsk` always uses the reference plant.
        #[arg(long)]
        system: Option<usize>,
    },
    /// Score trained checkpoints and write a metrics CSV.
    Evaluate {
        #[arg(long, default_value = "proposed")]
        method: Method,
    },
    /// Run all three methods at the settings of one figure.
    Reproduce {
        #[arg(long, value_enum, default_value = "all")]
        figure: Figure,
    },
    /// Roll out one plant under its own LQR controller and write the record.
    Simulate {
        #[arg(long, default_value_t = 1)]
        system: usize,
        /// Number of samples; the configured horizon when omitted.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Robustness of a rule over a trace CSV.
    Monitor {
        /// CSV with a header. Columns `k` (timestamps) and `t` are time
        /// columns; every other column is a signal, numbered s0, s1, ... in
        /// file order.
        #[arg(long)]
        trace: PathBuf,
        /// Evaluation time.
        #[arg(long, default_value_t = 0)]
        at: i64,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Phase {
    /// Shared model on the reference plant.
    Dsk,
    /// Adapters for one plant on top of the shared model.
    Lsk,
    /// A stand-alone model for one plant on its full record.
    Individual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Figure {
    #[value(name = "3")]
    Three,
    #[value(name = "4")]
    Four,
    #[value(name = "5")]
    Five,
    All,
}

impl Figure {
    /// `(latent dim, SNR dB)` panels of the figure.
    fn panels(self) -> Vec<(usize, f64)> {
        match self {
            Figure::Three | Figure::Four => vec![(4, 15.0), (2, 15.0)],
            Figure::Five => vec![(4, 15.0), (4, 5.0)],
            Figure::All => vec![(4, 15.0), (2, 15.0), (4, 5.0)],
        }
    }

    fn numbers(self) -> Vec<u8> {
        match self {
            Figure::Three => vec![3],
            Figure::Four => vec![4],
            Figure::Five => vec![5],
            Figure::All => vec![3, 4, 5],
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = PathBuf::from(&cfg.out_dir);
    let seed = cli.seed.unwrap_or(cfg.seeds[0]);
    match cli.command {
        Command::Train { phase, system } => cmd_train(&cfg, &out, seed, phase, system),
        Command::Evaluate { method } => cmd_evaluate(&cfg, &out, seed, method),
        Command::Reproduce { figure } => cmd_reproduce(&cfg, &out, cli.seed, figure),
        Command::Simulate { system, steps } => cmd_simulate(&cfg, &out, seed, system, steps),
        Command::Monitor { trace, at } => cmd_monitor(cli.rule.as_deref(), &trace, at),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("{}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(snr) = cli.snr_db {
        cfg.snr_db = snr;
    }
    if let Some(d) = cli.latent_dim {
        cfg.latent_dim = d;
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let (Some(rule), Command::Train { system: Some(id), .. }) = (&cli.rule, &cli.command) {
        let sys = cfg
            .systems
            .iter_mut()
            .find(|s| s.id() == *id)
            .ok_or_else(|| anyhow!("no system {id} in the configuration"))?;
        sys.rule = Some(rule.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed{seed}"))
}

fn checkpoint_path(out: &Path, seed: u64, phase: Phase, system: usize) -> PathBuf {
    let name = match phase {
        Phase::Dsk => "dsk.ckpt".to_string(),
        Phase::Lsk => format!("lsk_{system}.ckpt"),
        Phase::Individual => format!("individual_{system}.ckpt"),
    };
    seed_dir(out, seed).join(name)
}

/// Writes through a temporary file in the same directory, then renames, so
/// readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().ok_or_else(|| anyhow!("{} has no parent directory", path.display()))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn save_model(path: &Path, model: &KoopmanModel, rule: Option<&str>, seed: u64, samples: usize) -> Result<()> {
    let mut meta = model.metadata(rule, seed);
    meta.insert("samples".into(), samples.to_string());
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, model.params(), &meta)?;
    write_atomic(path, &bytes)
}

/// Loads a checkpoint and the number of delivered samples its training used.
fn load_model(path: &Path) -> Result<(KoopmanModel, usize)> {
    let bytes = fs::read(path).with_context(|| format!("missing checkpoint {}", path.display()))?;
    let (model, meta) = KoopmanModel::load(bytes.as_slice()).with_context(|| format!("{}", path.display()))?;
    let samples = meta
        .get("samples")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| anyhow!("{}: checkpoint does not record its sample count", path.display()))?;
    Ok((model, samples))
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "epoch,pretrain,train_total,recon,linear,pred,logic,val_total")?;
    for e in &log.epochs {
        let logic = e.logic.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            buf,
            "{},{},{},{},{},{},{},{}",
            e.epoch, e.pretrain, e.train_total, e.recon, e.linear, e.pred, logic, e.val_total
        )?;
    }
    write_atomic(path, &buf)
}

fn cmd_train(cfg: &RunConfig, out: &Path, seed: u64, phase: Phase, system: Option<usize>) -> Result<()> {
    let data = prepare_seed(cfg, seed)?;
    let reference_id = cfg.reference()?.id();
    let id = match (phase, system) {
        (Phase::Dsk, Some(id)) if id != reference_id => {
            bail!("the dsk phase trains the reference plant {reference_id}, not system {id}")
        }
        (Phase::Dsk, _) => reference_id,
        (_, Some(id)) => id,
        (_, None) => bail!("--system is required for the {phase:?} phase"),
    };
    let sys = data.system(id)?;
    let (model, log) = match phase {
        Phase::Dsk | Phase::Individual => train_individual(cfg, sys, seed)?,
        Phase::Lsk => {
            if sys.spec.role == Role::Reference {
                bail!("system {id} is the reference plant and has no adapters");
            }
            let (shared, _) = load_model(&checkpoint_path(out, seed, Phase::Dsk, reference_id))
                .context("the lsk phase needs the dsk checkpoint; run `train --phase dsk` first")?;
            train_adapted(cfg, &shared, sys, seed)?
        }
    };
    let path = checkpoint_path(out, seed, phase, id);
    save_model(&path, &model, sys.spec.rule.as_deref(), seed, log.delivered_samples)?;
    write_log(&path.with_extension("log.csv"), &log)?;
    println!(
        "{}: {} epochs, best {} (validation {:.4e}), {} delivered samples",
        path.display(),
        log.epochs.len(),
        log.best_epoch,
        log.best_val,
        log.delivered_samples
    );
    Ok(())
}

fn evaluate_seed(cfg: &RunConfig, out: &Path, data: &SeedData, method: Method) -> Result<Vec<ExperimentRecord>> {
    let seed = data.seed;
    let reference_id = cfg.reference()?.id();
    let (shared, shared_samples) = load_model(&checkpoint_path(out, seed, Phase::Dsk, reference_id))?;
    let mut records = Vec::new();
    for sys in &data.systems {
        let record = if sys.spec.role == Role::Reference {
            evaluation_record(cfg, method, sys, seed, &shared, false, shared_samples)?
        } else {
            let id = sys.spec.id();
            match method {
                Method::Proposed => {
                    let (m, samples) = load_model(&checkpoint_path(out, seed, Phase::Lsk, id))?;
                    evaluation_record(cfg, method, sys, seed, &m, true, samples)?
                }
                Method::Baseline1 => {
                    let (m, samples) = load_model(&checkpoint_path(out, seed, Phase::Individual, id))?;
                    evaluation_record(cfg, method, sys, seed, &m, false, samples)?
                }
                Method::Baseline2 => evaluation_record(cfg, method, sys, seed, &shared, false, 0)?,
            }
        };
        records.push(record);
    }
    Ok(records)
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path, seed: u64, method: Method) -> Result<()> {
    let data = prepare_seed(cfg, seed)?;
    let records = evaluate_seed(cfg, out, &data, method)?;
    let path = seed_dir(out, seed).join(format!("{method}_metrics.csv"));
    fs::create_dir_all(seed_dir(out, seed))?;
    write_records(&path, &records)?;
    for r in &records {
        println!(
            "{} system {}: nrmse {:.3}% score {:.3} samples {}",
            r.method, r.system, r.nrmse_pct, r.avg_score, r.samples
        );
    }
    println!("{}", path.display());
    Ok(())
}

fn panel_tag(d: usize, snr_db: f64) -> String {
    format!("d{d}_snr{snr_db}")
}

fn cmd_reproduce(cfg: &RunConfig, out: &Path, seed: Option<u64>, figure: Figure) -> Result<()> {
    let reference = cfg.reference()?.id();
    let mut runs: BTreeMap<String, (usize, f64, Summary)> = BTreeMap::new();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (d, snr_db) in figure.panels() {
        let tag = panel_tag(d, snr_db);
        if runs.contains_key(&tag) {
            continue;
        }
        let mut panel = cfg.clone();
        panel.latent_dim = d;
        panel.snr_db = snr_db;
        if let Some(s) = seed {
            panel.seeds = vec![s];
        }
        let records = run_methods(&panel, &Method::ALL)?;
        write_records(&out.join(format!("records_{tag}.csv")), &records)?;
        let summary = summarize(&records, Some(reference))?;
        write_summary(&out.join(format!("summary_{tag}.csv")), &summary)?;
        for h in &summary.headlines {
            println!(
                "d={} snr={}dB: sample reduction {} (adapted {}), nrmse improvement over baseline 2 {}, score ratio to baseline 1 {}",
                h.d,
                h.snr_db,
                pct(h.sample_reduction_pct),
                pct(h.adapted_sample_reduction_pct),
                pct(h.nrmse_improvement_pct),
                h.score_ratio_vs_baseline1.map_or("n/a".into(), |v| format!("{v:.3}")),
            );
        }
        runs.insert(tag, (d, snr_db, summary));
    }
    for fig in figure.numbers() {
        let (metrics, panels): (&[&str], Vec<(usize, f64)>) = match fig {
            3 => (&["nrmse", "samples"], Figure::Three.panels()),
            4 => (&["score"], Figure::Four.panels()),
            _ => (&["nrmse", "samples"], Figure::Five.panels()),
        };
        for (d, snr_db) in panels {
            let (_, _, summary) = &runs[&panel_tag(d, snr_db)];
            for metric in metrics {
                let path = out.join(format!("fig{fig}_{metric}_{}.svg", panel_tag(d, snr_db)));
                let title = format!("Figure {fig}: {metric}, d = {d}, SNR = {snr_db} dB");
                write_svg(&path, summary, d, snr_db, metric, &title)?;
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.2}%"))
}

fn cmd_simulate(cfg: &RunConfig, out: &Path, seed: u64, system: usize, steps: Option<usize>) -> Result<()> {
    let spec = cfg.system(system)?;
    let steps = steps.unwrap_or(cfg.horizon);
    if steps == 0 {
        bail!("--steps must be positive");
    }
    let tr = operating_trajectory(spec, cfg, seed, "simulate", steps)?;
    let mut buf = Vec::new();
    tr.write_csv(&mut buf)?;
    let path = out.join(format!("simulate_sys{system}_seed{seed}.csv"));
    write_atomic(&path, &buf)?;
    println!("{}", path.display());
    Ok(())
}

/// Reads a headed numeric CSV into a timed trace. Column `k` supplies the
/// timestamps (row numbers otherwise) and column `t` is dropped.
fn read_trace(path: &Path) -> Result<TimedTrace> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let k_col = headers.iter().position(|h| h.trim() == "k");
    let signals: Vec<usize> = (0..headers.len())
        .filter(|&i| !matches!(headers[i].trim(), "k" | "t"))
        .collect();
    if signals.is_empty() {
        bail!("{}: no signal columns", path.display());
    }
    let mut stamps = Vec::new();
    let mut samples = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| anyhow!("line {line}: missing column {}", headers[i].trim()))?
                .trim()
                .parse::<f64>()
                .map_err(|e| anyhow!("line {line}, column {}: {e}", headers[i].trim()))
        };
        stamps.push(match k_col {
            Some(i) => {
                let v = field(i)?;
                if v.fract() != 0.0 {
                    bail!("line {line}: timestamp {v} is not an integer");
                }
                v as i64
            }
            None => row as i64,
        });
        samples.push(signals.iter().map(|&i| field(i)).collect::<Result<Vec<_>>>()?);
    }
    Ok(TimedTrace::new(stamps, samples)?)
}

fn cmd_monitor(rule: Option<&str>, trace: &Path, at: i64) -> Result<()> {
    let rule = rule.ok_or_else(|| anyhow!("monitor needs --rule"))?;
    let formula = Formula::parse(rule)?;
    let tr = read_trace(trace)?;
    let rho = robustness(&formula, &tr, at)?;
    println!("robustness {rho}");
    println!("satisfied {}", rho > 0.0);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figures_share_panels() {
        assert_eq!(Figure::Three.panels(), Figure::Four.panels());
        assert!(Figure::Five.panels().contains(&(4, 5.0)));
        assert_eq!(Figure::All.panels().len(), 3);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn checkpoint_names_depend_on_phase() {
        let out = Path::new("o");
        assert_eq!(checkpoint_path(out, 3, Phase::Dsk, 1), Path::new("o/seed3/dsk.ckpt"));
        assert_eq!(checkpoint_path(out, 3, Phase::Lsk, 2), Path::new("o/seed3/lsk_2.ckpt"));
        assert_eq!(checkpoint_path(out, 0, Phase::Individual, 4), Path::new("o/seed0/individual_4.ckpt"));
    }
}
