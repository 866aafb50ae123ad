//! `crossres`: dataset generation, training, evaluation and reporting.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 when a
//! command aborts at run time (non-finite loss, corrupt checkpoint, I/O).

mod manifest;
mod plot;
mod report;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use crossres::checkpoint::{load_checkpoint, read_checkpoint_manifest};
use crossres::datapipe::{build_mlr_split, generate_toy_dataset, load_split_dir, write_dataset_dir, DatasetConfig};
use crossres::evaluator::{evaluate_setting, EvalReport, Setting};
use crossres::kv::{KvDoc, KvWriter};
use crossres::network::{EmbeddingMode, NetworkConfig};
use crossres::run::{append_csv, config_text, run_training, RunLayout};
use crossres::trainer::{TrainConfig, Trainer};
use crossres::Error;

use manifest::{RunManifest, MANIFEST_FILE};

const RUN_ROOT_ENV: &str = "CRR_RUN_ROOT";
const DEFAULT_RUN_ROOT: &str = "runs";
const CONFIG_SECTIONS: [&str; 3] = ["data", "network", "train"];

#[derive(Parser, Debug)]
#[command(name = "crossres", version, about = "Cross-resolution person re-identification")]
struct Cli {
    /// Override every seed in the resolved configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the procedural toy dataset and its split manifest.
    GenData {
        /// Config file; only its [data] section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to a directory under $CRR_RUN_ROOT named by the config hash.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// cross, standard or unseen:<r>; repeat for several settings.
        #[arg(long, default_value = "cross")]
        setting: Vec<Setting>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Plots, a recovery grid and a summary table for a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; defaults to the one recorded by `train`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Down-sampling rates of the grid columns (1 is the HR image).
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
        rates: Vec<u32>,
        /// Identities shown in the grid.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Ablation {
    #[value(name = "f_only")]
    FOnly,
    #[value(name = "g_only")]
    GOnly,
    #[value(name = "no_rec")]
    NoRec,
    #[value(name = "no_advF")]
    NoAdvF,
    #[value(name = "no_advI")]
    NoAdvI,
    #[value(name = "no_consist")]
    NoConsist,
    #[value(name = "single_scale")]
    SingleScale,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.to_possible_value().expect("no skipped variants");
        f.write_str(v.get_name())
    }
}

impl Ablation {
    fn apply(self, net: &mut NetworkConfig, train: &mut TrainConfig) {
        match self {
            Ablation::FOnly => net.embedding = EmbeddingMode::FOnly,
            Ablation::GOnly => net.embedding = EmbeddingMode::GOnly,
            Ablation::NoRec => train.weights.rec = 0.0,
            Ablation::NoAdvF => train.weights.adv_f = 0.0,
            Ablation::NoAdvI => train.weights.adv_i = 0.0,
            Ablation::NoConsist => train.weights.consist = 0.0,
            Ablation::SingleScale => net.align_levels = vec![1],
        }
    }
}

/// A mistake in how the command was invoked, as opposed to a failure while
/// doing the work.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::ManifestMismatch(_) | Error::Dataset(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { config, out, force } => gen_data(config.as_deref(), &out, force, seed),
        Command::Train {
            data,
            config,
            run_dir,
            resume,
            ablate,
            force,
        } => train(&TrainArgs {
            data,
            config,
            run_dir,
            resume,
            ablate,
            force,
            seed,
        }),
        Command::Eval {
            ckpt,
            data,
            setting,
            out,
            force,
        } => eval(&ckpt, &data, &setting, &out, force, seed),
        Command::Report {
            run_dir,
            out,
            data,
            rates,
            samples,
            force,
        } => report::report(&report::ReportArgs {
            run_dir,
            out,
            data,
            rates,
            samples,
            force,
            seed,
        }),
    }
}

/// Parse a config file (absent means all defaults) and reject sections no
/// command reads.
fn read_config(path: Option<&Path>) -> Result<KvDoc> {
    let Some(path) = path else { return Ok(KvDoc::default()) };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(|e| usage(format!("{e:#}")))?;
    let doc = KvDoc::parse(&text).with_context(|| format!("in {}", path.display()))?;
    doc.expect_sections(&CONFIG_SECTIONS)
        .with_context(|| format!("in {}", path.display()))?;
    Ok(doc)
}

/// Make `dir` an empty directory. A non-empty one is cleared only with
/// `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(usage(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .next()
            .is_some();
        if occupied {
            if !force {
                return Err(usage(format!(
                    "{} is not empty; pass --force to replace its contents",
                    dir.display()
                )));
            }
            log::warn!("clearing {}", dir.display());
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(config: Option<&Path>, out: &Path, force: bool, seed: Option<u64>) -> Result<()> {
    let doc = read_config(config)?;
    let mut cfg = DatasetConfig::from_kv(&doc, "data")?;
    // the other sections must be valid too, even though only [data] is used
    resolve_train_config(&doc, &cfg)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    // fail before touching the output directory
    let records = generate_toy_dataset(&cfg);
    let split = build_mlr_split(&records, &cfg)?;

    prepare_output_dir(out, force)?;
    let mut w = KvWriter::new();
    w.section("data");
    cfg.write_kv(&mut w);
    RunManifest::new("gen-data", cfg.seed, w.finish(), vec![]).write_new(out)?;
    write_dataset_dir(out, &cfg, &records, &split)?;
    log::info!(
        "wrote {} images ({} train ids, {} queries, {} gallery) to {}",
        records.len(),
        split.train_ids.len(),
        split.query.len(),
        split.gallery.len(),
        out.display()
    );
    Ok(())
}

struct TrainArgs {
    data: PathBuf,
    config: Option<PathBuf>,
    run_dir: Option<PathBuf>,
    resume: Option<PathBuf>,
    ablate: Vec<Ablation>,
    force: bool,
    seed: Option<u64>,
}

/// Network and training configuration for `data`: image size and class count
/// default to the dataset's, and a `[data]` section must agree with it.
fn resolve_train_config(doc: &KvDoc, data: &DatasetConfig) -> Result<(NetworkConfig, TrainConfig)> {
    if doc.has_section("data") {
        let stated = DatasetConfig::from_kv(doc, "data")?;
        if stated != *data {
            return Err(Error::Config("[data] does not describe the dataset directory".into()).into());
        }
    }
    let defaults = NetworkConfig {
        height: data.height,
        width: data.width,
        num_classes: data.num_identities,
        ..NetworkConfig::default()
    };
    let net = NetworkConfig::from_kv_over(doc, "network", defaults)?;
    if net.height != data.height || net.width != data.width {
        return Err(Error::Config(format!(
            "network input {}x{} differs from the {}x{} dataset",
            net.height, net.width, data.height, data.width
        ))
        .into());
    }
    if net.num_classes < data.num_identities {
        return Err(Error::Config(format!(
            "num_classes {} cannot label {} identities",
            net.num_classes, data.num_identities
        ))
        .into());
    }
    Ok((net, TrainConfig::from_kv(doc, "train")?))
}

/// Fields of a training config that may change across a resume.
fn resumable(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        iterations: 0,
        eval_every: 0,
        checkpoint_every: 0,
        ..cfg.clone()
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let (data_cfg, split) = load_split_dir(&args.data, None)?;
    let (mut net_cfg, mut train_cfg) = match (&args.config, &args.resume) {
        (None, Some(ckpt)) => {
            let m = read_checkpoint_manifest(ckpt)?;
            (m.network, m.train)
        }
        (config, _) => resolve_train_config(&read_config(config.as_deref())?, &data_cfg)?,
    };
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }
    for a in &args.ablate {
        a.apply(&mut net_cfg, &mut train_cfg);
    }
    net_cfg.validate()?;
    train_cfg.validate()?;

    let mut trainer: Trainer<f32> = match &args.resume {
        Some(ckpt) => {
            let mut t = load_checkpoint(ckpt, Some(&net_cfg))?;
            if resumable(&t.cfg) != resumable(&train_cfg) {
                return Err(Error::ManifestMismatch(format!(
                    "[train] of {} differs from the checkpoint beyond iterations, eval_every and checkpoint_every",
                    ckpt.display()
                ))
                .into());
            }
            t.cfg = train_cfg;
            t
        }
        None => Trainer::new(net_cfg, train_cfg)?,
    };

    let snapshot = config_text(&data_cfg, &trainer);
    let run_dir = match &args.run_dir {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT), PathBuf::from);
            let hash = manifest::git_blob_hash(&snapshot);
            root.join(format!("train-{}", &hash[..12]))
        }
    };
    // a resume may continue inside the run directory that produced it
    let continuing = args.resume.is_some() && !args.force && run_dir.join(MANIFEST_FILE).exists();
    if continuing {
        let m = RunManifest::read(&run_dir)?;
        if m.command != "train" {
            return Err(usage(format!("{} was written by `{}`, not `train`", run_dir.display(), m.command)));
        }
        log::info!("resuming at iteration {} in {}", trainer.iteration, run_dir.display());
    } else {
        prepare_output_dir(&run_dir, args.force)?;
        let mut inputs = vec![("data".to_string(), absolute(&args.data).display().to_string())];
        if let Some(r) = &args.resume {
            inputs.push(("resume".into(), absolute(r).display().to_string()));
        }
        if !args.ablate.is_empty() {
            let names: Vec<String> = args.ablate.iter().map(ToString::to_string).collect();
            inputs.push(("ablate".into(), names.join(", ")));
        }
        RunManifest::new("train", trainer.cfg.seed, snapshot, inputs).write_new(&run_dir)?;
    }

    let mut settings = vec![Setting::Cross, Setting::Standard];
    settings.extend(data_cfg.unseen_rates.iter().map(|&r| Setting::Unseen(r)));
    let summary = run_training(&mut trainer, &data_cfg, &split, &RunLayout::new(&run_dir), &settings)?;
    log::info!(
        "{} iterations run; final checkpoint {}",
        summary.steps_run,
        summary.final_checkpoint.display()
    );
    for r in &summary.evals {
        println!("{}", r.summary_line());
    }
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// File stem for the embedding dump of `setting`.
fn dump_stem(setting: Setting) -> String {
    format!("embeddings_{}", setting.to_string().replace(':', "_"))
}

fn eval(ckpt: &Path, data: &Path, settings: &[Setting], out: &Path, force: bool, seed: Option<u64>) -> Result<()> {
    let ck = read_checkpoint_manifest(ckpt)?;
    let (data_cfg, split) = load_split_dir(data, None)?;
    if (ck.network.height, ck.network.width) != (data_cfg.height, data_cfg.width) {
        return Err(Error::ManifestMismatch(format!(
            "checkpoint expects {}x{} images, dataset has {}x{}",
            ck.network.height, ck.network.width, data_cfg.height, data_cfg.width
        ))
        .into());
    }
    let trainer: Trainer<f32> = load_checkpoint(ckpt, None)?;

    prepare_output_dir(out, force)?;
    let mut w = KvWriter::new();
    w.section("eval").list("settings", settings);
    let config = format!("{}\n{}", w.finish(), ck.to_text());
    let inputs = vec![
        ("ckpt".to_string(), absolute(ckpt).display().to_string()),
        ("data".to_string(), absolute(data).display().to_string()),
    ];
    RunManifest::new("eval", seed.unwrap_or(ck.train.seed), config, inputs).write_new(out)?;

    let csv = out.join("eval.csv");
    for &s in settings {
        let r = evaluate_setting(&trainer.net, &trainer.params, &split, s)?;
        println!("{}", r.summary_line());
        append_csv(&csv, EvalReport::CSV_HEADER, &r.csv_row())?;
        r.write_embedding_dump(&out.join(dump_stem(s)))?;
    }
    Ok(())
}
