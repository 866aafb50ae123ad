//! The training loop and its run directory.
//!
//! ```text
//! <run>/config.txt                 [data], [network] and [train] sections
//! <run>/losses.csv                 one row per completed iteration
//! <run>/eval_history.csv           periodic evaluations, prefixed by iteration
//! <run>/eval.csv                   evaluations of the final parameters
//! <run>/checkpoints/iter_<n>.ckpt  periodic snapshots
//! <run>/final.ckpt                 state after the last iteration
//! <run>/nan_dump.ckpt              state at a non-finite abort
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::datapipe::{mask_labels, Batch, DatasetConfig, MlrSplit, Prefetcher, TrainPool};
use crate::error::{Error, IoContext, Result};
use crate::evaluator::{evaluate_setting, EvalReport, Setting};
use crate::kv::KvWriter;
use crate::losses::LossReport;
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::checkpoint::save_checkpoint;
use crate::trainer::Trainer;

const PREFETCH_BOUND: usize = 4;

/// Paths inside one run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.csv")
    }

    pub fn eval_history(&self) -> PathBuf {
        self.root.join("eval_history.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn iteration_checkpoint(&self, iteration: usize) -> PathBuf {
        self.checkpoints().join(format!("iter_{iteration}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.ckpt")
    }

    pub fn nan_dump(&self) -> PathBuf {
        self.root.join("nan_dump.ckpt")
    }
}

/// Render the `[data]`, `[network]` and `[train]` sections of a run.
pub fn config_text<T: Scalar>(data: &DatasetConfig, trainer: &Trainer<T>) -> String {
    let mut w = KvWriter::new();
    w.section("data");
    data.write_kv(&mut w);
    w.section("network");
    trainer.net.config().write_kv(&mut w);
    w.section("train");
    trainer.cfg.write_kv(&mut w);
    w.finish()
}

/// Append a row to `path`, writing `header` first when the file is new.
pub fn append_csv(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    if fresh {
        writeln!(f, "{header}").at(path)?;
    }
    writeln!(f, "{row}").at(path)
}

/// Keep the header and the rows whose first field is an iteration below
/// `keep_below`, so a resumed run does not duplicate rows.
fn truncate_rows(path: &Path, keep_below: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).at(path)?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.at(path)?;
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|v| v.parse::<usize>().ok())
                .is_some_and(|it| it < keep_below);
        if keep {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text).at(path)
}

/// What one call to [`run_training`] did.
#[derive(Debug)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub steps_run: usize,
    pub last_report: Option<LossReport>,
    /// Evaluations of the final parameters, one per requested setting.
    pub evals: Vec<EvalReport>,
}

enum BatchSource {
    Serial(TrainPool),
    Threaded(Prefetcher),
}

impl BatchSource {
    fn next<T: Scalar>(&mut self, trainer: &mut Trainer<T>) -> Result<Batch> {
        match self {
            BatchSource::Serial(pool) => trainer.sample_batch(pool),
            BatchSource::Threaded(p) => p.next_batch(),
        }
    }
}

/// Train until `trainer.cfg.iterations` iterations are complete, writing the
/// run directory as it goes, then evaluate the final parameters on each of
/// `final_settings`.
///
/// A trainer restored from a checkpoint continues from its iteration count;
/// in deterministic mode the continuation matches an uninterrupted run.
pub fn run_training<T: Scalar>(
    trainer: &mut Trainer<T>,
    data: &DatasetConfig,
    split: &MlrSplit,
    layout: &RunLayout,
    final_settings: &[Setting],
) -> Result<RunSummary> {
    fs::create_dir_all(layout.checkpoints()).at(layout.checkpoints())?;
    let start = trainer.iteration;
    if start == 0 || !layout.config().exists() {
        fs::write(layout.config(), config_text(data, trainer)).at(layout.config())?;
    }
    truncate_rows(&layout.losses(), start)?;
    truncate_rows(&layout.eval_history(), start + 1)?;
    if start == 0 && layout.losses().exists() {
        fs::remove_file(layout.losses()).at(layout.losses())?;
    }

    let cfg = trainer.cfg.clone();
    let train = mask_labels(&split.train, cfg.label_percent, derive_seed(cfg.seed, &[22]))?;
    let pool = TrainPool::new(train, &data.seen_rates)?;
    let mut source = if cfg.deterministic {
        BatchSource::Serial(pool)
    } else {
        let seed = derive_seed(cfg.seed, &[23, start as u64]);
        BatchSource::Threaded(Prefetcher::spawn(Arc::new(pool), cfg.batch, seed, PREFETCH_BOUND))
    };

    let mut last_report = None;
    while trainer.iteration < cfg.iterations {
        let batch = source.next(trainer)?;
        let iter = trainer.iteration;
        let report = match trainer.train_step(&batch) {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => {
                let dump = layout.nan_dump();
                save_checkpoint(trainer, &dump)?;
                return Err(Error::NonFinite(format!(
                    "{what} at iteration {iter}; state written to {}",
                    dump.display()
                )));
            }
            Err(e) => return Err(e),
        };
        append_csv(&layout.losses(), LossReport::CSV_HEADER, &report.csv_row(iter))?;
        log::debug!("iter {iter}: total {:.4}", report.total);
        last_report = Some(report);
        let done = trainer.iteration;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_checkpoint(trainer, &layout.iteration_checkpoint(done))?;
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            let r = evaluate_setting(&trainer.net, &trainer.params, split, Setting::Cross)?;
            log::info!("iter {done}: {}", r.summary_line());
            append_csv(
                &layout.eval_history(),
                &format!("iter,{}", EvalReport::CSV_HEADER),
                &format!("{done},{}", r.csv_row()),
            )?;
        }
    }

    save_checkpoint(trainer, &layout.final_checkpoint())?;
    let mut evals = Vec::with_capacity(final_settings.len());
    for &s in final_settings {
        let r = evaluate_setting(&trainer.net, &trainer.params, split, s)?;
        append_csv(&layout.eval(), EvalReport::CSV_HEADER, &r.csv_row())?;
        evals.push(r);
    }
    Ok(RunSummary {
        final_checkpoint: layout.final_checkpoint(),
        steps_run: trainer.iteration - start,
        last_report,
        evals,
    })
}
