//! `lqrf`: generate LQR datasets, train the transformer policy, evaluate,
//! fine-tune and run ablations.
//!
//! Exit codes: 0 success, 2 usage, 3 data or format, 4 numeric failure.

mod config;

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lqrf::catalog::catalog;
use lqrf::datagen::{self, TrajectoryDataset};
use lqrf::eval::{self, AblationModel, TransformerPolicy};
use lqrf::io::{self, CheckpointHeader, CODE_VERSION};
use lqrf::model;
use lqrf::pipeline::NormStats;
use lqrf::rng;
use lqrf::training::{self, EpochRecord, OptimizerKind, TrainError, TrainState, TrainingData};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "lqrf", version, about = "Transformer policies imitating LQR feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out optimal controllers and write a dataset file.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a policy on a dataset file.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Relative sub-optimality on freshly perturbed variants.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rollouts per evaluated system.
        #[arg(long = "j-eval")]
        j_eval: Option<usize>,
    },
    /// Few-shot fine-tuning on data from unseen systems.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long = "j-eval")]
        j_eval: Option<usize>,
    },
    /// Validation loss versus window length or trajectories per system.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Swept values; defaults to the configured list for the axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Window,
    Data,
}

#[derive(Args)]
struct Common {
    /// TOML file with any RunConfig fields; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// seen, unseen, all, or a comma-separated list of names.
    #[arg(long)]
    systems: Option<String>,
    #[arg(long = "n-variants")]
    n_variants: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long = "J")]
    j: Option<usize>,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long = "d-model")]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long = "d-ff")]
    d_ff: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long, env = "LQRF_WORKERS")]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p).map_err(Failure::Usage)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$f = v; } )* };
        }
        set!(seed, systems, n_variants, delta, j, t, dt, window, d_model, heads, blocks, d_ff, epochs, batch, lr, xi, optimizer);
        if self.workers.is_some() {
            c.workers = self.workers;
        }
        c.out = self.out.clone();
        c.validate().map_err(Failure::Usage)?;
        Ok(c)
    }
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn data(e: impl Into<anyhow::Error>) -> Self {
        Self::Data(e.into())
    }

    fn numeric(e: impl Into<anyhow::Error>) -> Self {
        Self::Numeric(e.into())
    }

    fn train(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Shape(_) | TrainError::Tape(_) => Self::numeric(e),
            TrainError::Config(_) => Self::Usage(e.into()),
            _ => Self::data(e),
        }
    }

    fn eval(e: eval::EvalError) -> Self {
        match e {
            eval::EvalError::Train(t) => Self::train(t),
            eval::EvalError::Lqr(_) | eval::EvalError::System(_) | eval::EvalError::Shape(_) => Self::numeric(e),
            _ => Self::data(e),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common } => generate(&common),
        Command::Train { common, dataset, resume } => train(&common, &dataset, resume.as_deref()),
        Command::Evaluate { common, checkpoint, j_eval } => evaluate(&common, &checkpoint, j_eval),
        Command::Finetune { common, checkpoint, dataset, j_eval } => finetune(&common, &checkpoint, &dataset, j_eval),
        Command::Ablate { common, dataset, axis, values } => ablate(&common, &dataset, axis, values),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, e) = match f {
                Failure::Usage(e) => (2, e),
                Failure::Data(e) => (3, e),
                Failure::Numeric(e) => (4, e),
            };
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn setup(common: &Common) -> Result<RunConfig, Failure> {
    let cfg = common.resolve()?;
    if let Some(n) = cfg.workers {
        // a second call in one process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display())).map_err(Failure::data)?;
    let json = serde_json::json!({ "code_version": CODE_VERSION, "run_config": cfg.to_json() });
    write_text(&cfg.out.join("run_config.json"), &serde_json::to_string_pretty(&json).expect("json"))?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::data)
}

fn create(path: &Path) -> Result<fs::File, Failure> {
    fs::File::create(path).with_context(|| format!("creating {}", path.display())).map_err(Failure::data)
}

fn generate(common: &Common) -> Outcome {
    let cfg = setup(common)?;
    let cat = catalog();
    let entries = cat.select(&cfg.systems).map_err(|e| Failure::Usage(e.into()))?;
    let systems = cat.population(&entries, cfg.n_variants, cfg.delta, cfg.dt, cfg.seed).map_err(Failure::numeric)?;
    let ds = datagen::build_dataset(systems, cfg.j, cfg.t, cfg.seed).map_err(Failure::numeric)?;
    let stats = training::system_stats(&ds).map_err(Failure::data)?;
    let path = cfg.out.join("dataset.lqrf");
    io::save_dataset(&path, &ds, Some(&stats), Some(&cfg.to_json())).map_err(Failure::data)?;
    println!("{:<32} {:>4} {:>4} {:>12} {:>10}", "system", "n_x", "n_u", "residual", "iterations");
    for (s, sol) in ds.systems.iter().zip(&ds.solutions) {
        println!("{:<32} {:>4} {:>4} {:>12.3e} {:>10}", s.name, s.n_x(), s.n_u(), sol.residual, sol.iterations);
    }
    let worst = ds.solutions.iter().map(|s| s.residual).fold(0.0, f64::max);
    println!(
        "{} systems, {} trajectories of {} steps; max Riccati residual {worst:.3e}; wrote {}",
        ds.systems.len(),
        ds.trajectories.len(),
        cfg.t,
        path.display()
    );
    Ok(())
}

fn load_dataset(path: &Path) -> Result<(TrajectoryDataset, Vec<NormStats>), Failure> {
    let file = io::load_dataset(path).map_err(Failure::data)?;
    let stats = match file.stats {
        Some(s) => s,
        None => training::system_stats(&file.dataset).map_err(Failure::data)?,
    };
    Ok((file.dataset, stats))
}

fn family_stats(ds: &TrajectoryDataset) -> Result<std::collections::BTreeMap<String, NormStats>, Failure> {
    training::family_stats(ds).map_err(Failure::data)
}

struct Log {
    writer: csv::Writer<fs::File>,
}

impl Log {
    fn open(path: &Path, append: bool) -> Result<Self, Failure> {
        let exists = append && path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .truncate(false)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))
            .map_err(Failure::data)?;
        if !append {
            file.set_len(0).map_err(Failure::data)?;
        }
        let mut writer = csv::Writer::from_writer(file);
        if !exists {
            writer.write_record(["epoch", "train_loss", "val_loss", "wall_seconds", "checkpoint_path"]).map_err(Failure::data)?;
        }
        Ok(Self { writer })
    }

    fn row(&mut self, r: &EpochRecord, checkpoint: Option<&Path>) -> anyhow::Result<()> {
        self.writer.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            format!("{:.3}", r.wall_seconds),
            checkpoint.map(|p| p.display().to_string()).unwrap_or_default(),
        ])?;
        self.writer.flush()?;
        Ok(())
    }
}

fn header_for(state: &TrainState, cfg: &RunConfig, base: &CheckpointHeader) -> CheckpointHeader {
    CheckpointHeader {
        epoch: state.epoch,
        optimizer: state.optimizer.kind,
        optimizer_step: state.optimizer.step,
        run_config: Some(cfg.to_json()),
        ..base.clone()
    }
}

/// Runs `training::train`, logging every epoch and writing periodic and final checkpoints.
fn run_training(
    data: &TrainingData,
    state: &mut TrainState,
    cfg: &RunConfig,
    train_cfg: &training::TrainConfig,
    base: &CheckpointHeader,
    prefix: &str,
    append_log: bool,
) -> Result<PathBuf, Failure> {
    let mut log = Log::open(&cfg.out.join(format!("{prefix}_log.csv")), append_log)?;
    let mut io_error: Option<anyhow::Error> = None;
    let result = training::train(data, state, train_cfg, |rec, st| {
        if io_error.is_some() {
            return;
        }
        let periodic = cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0;
        let path = periodic.then(|| cfg.out.join(format!("{prefix}_epoch{:04}.lqrc", rec.epoch)));
        let res = (|| -> anyhow::Result<()> {
            if let Some(p) = &path {
                io::save_checkpoint(p, &header_for(st, cfg, base), st)?;
            }
            log.row(rec, path.as_deref())
        })();
        if let Err(e) = res {
            io_error = Some(e);
        }
        println!("epoch {:>4}  train {:.6e}  val {:.6e}  {:.1}s", rec.epoch, rec.train_loss, rec.val_loss, rec.wall_seconds);
    });
    if let Some(e) = io_error {
        return Err(Failure::Data(e));
    }
    match result {
        Ok(_) => {}
        Err(TrainError::NonFinite { epoch, batch, state: bad }) => {
            let path = cfg.out.join(format!("{prefix}_diverged.lqrc"));
            io::save_checkpoint(&path, &header_for(&bad, cfg, base), &bad).map_err(Failure::data)?;
            return Err(Failure::Numeric(anyhow!(
                "non-finite loss at epoch {epoch}, batch {batch}; diagnostic checkpoint {}",
                path.display()
            )));
        }
        Err(e) => return Err(Failure::train(e)),
    }
    let path = cfg.out.join(format!("{prefix}_final.lqrc"));
    io::save_checkpoint(&path, &header_for(state, cfg, base), state).map_err(Failure::data)?;
    Ok(path)
}

fn train(common: &Common, dataset: &Path, resume: Option<&Path>) -> Outcome {
    let cfg = setup(common)?;
    let (ds, stats) = load_dataset(dataset)?;
    let pcfg = cfg.pipeline();
    let train_cfg = cfg.train();
    let mut state = match resume {
        Some(p) => {
            let ck = io::load_checkpoint(p).map_err(Failure::data)?;
            if ck.header.model != cfg.model() {
                return Err(Failure::Data(anyhow!("checkpoint architecture {:?} differs from the requested {:?}", ck.header.model, cfg.model())));
            }
            ck.state
        }
        None => TrainState::new(model::init_params(&cfg.model(), cfg.seed).map_err(|e| Failure::Usage(e.into()))?, cfg.optimizer),
    };
    let data = TrainingData::new(pcfg, &ds.trajectories, stats, train_cfg.split, train_cfg.seed).map_err(Failure::train)?;
    let base = CheckpointHeader {
        model: cfg.model(),
        pipeline: pcfg,
        epoch: 0,
        optimizer: cfg.optimizer,
        optimizer_step: 0,
        train: Some(train_cfg),
        stats: family_stats(&ds)?,
        run_config: None,
    };
    println!(
        "{} training and {} validation windows, {} parameters, optimizer {}",
        data.train.len(),
        data.val.len(),
        cfg.model().param_count(),
        cfg.optimizer
    );
    let path = run_training(&data, &mut state, &cfg, &train_cfg, &base, "train", resume.is_some())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_report(cfg: &RunConfig, name: &str, report: &eval::EvalReport, extra: serde_json::Value) -> Outcome {
    report.write_rows_csv(create(&cfg.out.join(format!("{name}_rows.csv")))?).map_err(Failure::data)?;
    report.write_summary_csv(create(&cfg.out.join(format!("{name}_summary.csv")))?).map_err(Failure::data)?;
    let json = serde_json::json!({
        "code_version": CODE_VERSION,
        "run_config": cfg.to_json(),
        "meta": report.meta,
        "summary": report.summary(),
        "warnings": report.warnings,
        "extra": extra,
    });
    write_text(&cfg.out.join(format!("{name}_report.json")), &serde_json::to_string_pretty(&json).expect("json"))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("{:<32} {:>4} {:>10} {:>10} {:>10} {:>10} {:>8}", "family", "n", "median", "q1", "q3", "max", "stable");
    for s in report.summary() {
        println!(
            "{:<32} {:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8.3}",
            s.family, s.n_systems, s.median_delta, s.q1_delta, s.q3_delta, s.max_delta, s.stabilized_fraction
        );
    }
    Ok(())
}

fn evaluate(common: &Common, checkpoint: &Path, j_eval: Option<usize>) -> Outcome {
    let cfg = setup(common)?;
    let ck = io::load_checkpoint(checkpoint).map_err(Failure::data)?;
    let cat = catalog();
    let entries = cat.select(&cfg.systems).map_err(|e| Failure::Usage(e.into()))?;
    let bases = cat.population(&entries, 0, 0.0, cfg.dt, cfg.seed).map_err(Failure::numeric)?;
    let policy = TransformerPolicy::new(ck.params(), ck.header.pipeline).map_err(Failure::eval)?;
    let n_variants = common.n_variants.unwrap_or(cfg.eval_variants);
    let report = eval::robustness_study(
        &bases,
        cfg.delta,
        n_variants,
        &policy,
        |family| ck.header.stats.get(family).copied(),
        j_eval.unwrap_or(cfg.j_eval),
        cfg.t,
        rng::derive_seed(cfg.seed, rng::EVAL, 0),
    )
    .map_err(Failure::eval)?;
    write_report(&cfg, "eval", &report, serde_json::json!({ "checkpoint": checkpoint.display().to_string() }))
}

fn finetune(common: &Common, checkpoint: &Path, dataset: &Path, j_eval: Option<usize>) -> Outcome {
    let cfg = setup(common)?;
    let ck = io::load_checkpoint(checkpoint).map_err(Failure::data)?;
    let (ds, stats) = load_dataset(dataset)?;
    let mut train_cfg = cfg.train();
    train_cfg.n_epochs = common.epochs.unwrap_or(1);
    let data = TrainingData::new(ck.header.pipeline, &ds.trajectories, stats.clone(), train_cfg.split, train_cfg.seed).map_err(Failure::train)?;
    let j = j_eval.unwrap_or(cfg.j_eval);
    let out = eval::few_shot_study(ck.params(), &data, &train_cfg, &ds.systems, &stats, j, cfg.t, rng::derive_seed(cfg.seed, rng::EVAL, 1))
        .map_err(Failure::eval)?;
    let mut header = ck.header.clone();
    header.stats.extend(family_stats(&ds)?);
    header.train = Some(train_cfg);
    let state = TrainState::new(out.params.clone(), train_cfg.optimizer);
    let state = TrainState { epoch: 0, ..state };
    let header = CheckpointHeader { model: out.params.config, ..header_for(&state, &cfg, &header) };
    let path = cfg.out.join("finetune_final.lqrc");
    io::save_checkpoint(&path, &header, &state).map_err(Failure::data)?;
    let losses = serde_json::json!({ "val_loss_before": out.val_loss_before, "val_loss_after": out.val_loss_after, "epochs": train_cfg.n_epochs });
    println!("validation loss {:.6e} -> {:.6e}", out.val_loss_before, out.val_loss_after);
    println!("zero-shot:");
    write_report(&cfg, "zero_shot", &out.zero_shot, losses.clone())?;
    println!("after fine-tuning:");
    write_report(&cfg, "finetuned", &out.finetuned, losses)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn ablate(common: &Common, dataset: &Path, axis: Axis, values: Option<Vec<usize>>) -> Outcome {
    let cfg = setup(common)?;
    let (ds, _) = load_dataset(dataset)?;
    let arch = AblationModel { d_model: cfg.d_model, heads: cfg.heads, blocks: cfg.blocks, d_ff: cfg.d_ff };
    let train_cfg = cfg.train();
    let (name, rows) = match axis {
        Axis::Window => {
            let ws = values.unwrap_or_else(|| cfg.window_values.clone());
            ("w", eval::ablation_window(&ds, &ws, &cfg.pipeline(), &arch, &train_cfg))
        }
        Axis::Data => {
            let js = values.unwrap_or_else(|| cfg.data_values.clone());
            ("J", eval::ablation_data_volume(&ds, &js, &cfg.pipeline(), &arch, &train_cfg))
        }
    };
    let rows = rows.map_err(Failure::eval)?;
    let file = match axis {
        Axis::Window => "ablation_window.csv",
        Axis::Data => "ablation_data.csv",
    };
    eval::write_ablation_csv(&rows, name, create(&cfg.out.join(file))?).map_err(Failure::data)?;
    println!("{name:>6} {:>14} {:>14}", "train_loss", "val_loss");
    for r in &rows {
        println!("{:>6} {:>14.6e} {:>14.6e}", r.value, r.train_loss, r.val_loss);
    }
    Ok(())
}
