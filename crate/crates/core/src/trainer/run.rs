//! Run directories: resolved config, per-step CSV log, checkpoints, resume.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;

use super::{crop_image, IsolationCheck, TrainConfig, TrainError, Trainer};
use crate::datagen::{Dataset, Sample};
use crate::labels::LabelMap;
use crate::losses::{LossReport, Term};
use crate::nets::{Checkpoint, Model};

pub const CONFIG_FILE: &str = "config.resolved.json";
pub const LOG_FILE: &str = "log.csv";
const LOCK_FILE: &str = ".lock";
const CHECKPOINT_DIR: &str = "checkpoints";
pub const TRAIN_SPLIT: &str = "train";

/// Exclusive ownership of a run directory for one process.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, TrainError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(TrainError::Locked(dir.to_path_buf())),
            Err(source) => Err(TrainError::Io { path, source }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Written verbatim as `config.resolved.json` instead of the trainer's own echo.
    pub resolved_config: Option<serde_json::Value>,
    /// Run the isolation and detachment checks on every step.
    pub verify_isolation: bool,
    /// Stop after this many steps (the schedule still spans `iterations`).
    pub stop_after: Option<usize>,
}

/// One line of `log.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub sgd_lr: f64,
    pub adam_lr: f64,
    pub terms: Vec<(Term, f64)>,
}

impl LogRow {
    fn from_report(step: usize, sgd_lr: f64, adam_lr: f64, report: &LossReport) -> Self {
        Self {
            step,
            sgd_lr,
            adam_lr,
            terms: Term::ALL.iter().map(|&t| (t, report.get(t).unwrap_or(0.0))).collect(),
        }
    }

    pub fn get(&self, term: Term) -> Option<f64> {
        self.terms.iter().find(|(t, _)| *t == term).map(|&(_, v)| v)
    }

    fn header() -> String {
        let mut cols = vec!["step".to_string(), "sgd_lr".into(), "adam_lr".into()];
        cols.extend(Term::ALL.iter().map(|t| t.name().to_string()));
        cols.join(",")
    }

    /// Shortest round-trip formatting, so values parse back bit-exactly.
    fn to_line(&self) -> String {
        let mut cols = vec![self.step.to_string(), self.sgd_lr.to_string(), self.adam_lr.to_string()];
        cols.extend(self.terms.iter().map(|(_, v)| v.to_string()));
        cols.join(",")
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub model: Model,
    /// Rows produced by this invocation.
    pub log: Vec<LogRow>,
    pub isolation: Vec<IsolationCheck>,
}

/// Parses a `log.csv`.
pub fn read_log(path: &Path) -> Result<Vec<LogRow>, TrainError> {
    let file = File::open(path).map_err(io_err(path))?;
    let bad = |reason: String| TrainError::File {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().ok_or_else(|| bad("empty log".into()))?.map_err(io_err(path))?;
    let names: Vec<&str> = header.split(',').collect();
    if names.len() < 3 || names[..3] != ["step", "sgd_lr", "adam_lr"] {
        return Err(bad(format!("unexpected header {header}")));
    }
    let terms = names[3..]
        .iter()
        .map(|n| Term::from_name(n).ok_or_else(|| bad(format!("unknown column {n}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(bad(format!("line {} has {} cells", i + 2, cells.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 2)));
        rows.push(LogRow {
            step: cells[0].parse().map_err(|e| bad(format!("line {}: {e}", i + 2)))?,
            sgd_lr: num(cells[1])?,
            adam_lr: num(cells[2])?,
            terms: terms
                .iter()
                .zip(&cells[3..])
                .map(|(&t, c)| num(c).map(|v| (t, v)))
                .collect::<Result<_, _>>()?,
        });
    }
    Ok(rows)
}

struct TrainingData<'a> {
    source: &'a [Sample],
    target: &'a [Sample],
    size: (usize, usize),
}

fn training_data<'a>(config: &TrainConfig, source: &'a Dataset, target: &'a Dataset) -> Result<TrainingData<'a>, TrainError> {
    let bad = |m: String| Err(TrainError::Data(m));
    if source.num_classes() != target.num_classes() {
        return bad(format!(
            "source has {} classes, target {}",
            source.num_classes(),
            target.num_classes()
        ));
    }
    let src = source.split(TRAIN_SPLIT).unwrap_or(&[]);
    let tgt = target.split(TRAIN_SPLIT).unwrap_or(&[]);
    if src.is_empty() {
        return Err(TrainError::Config("source dataset has no training samples".into()));
    }
    if tgt.is_empty() {
        return Err(TrainError::Config("target dataset has no training samples".into()));
    }
    if let Some(s) = src.iter().find(|s| s.labels.is_none()) {
        return bad(format!("source sample {} has no labels", s.id));
    }
    let size = (source.scene.image_height, source.scene.image_width);
    if size != (target.scene.image_height, target.scene.image_width) {
        return bad("source and target image sizes differ".into());
    }
    if config.crop_height > size.0 || config.crop_width > size.1 {
        return bad(format!(
            "crop {}x{} exceeds images of {}x{}",
            config.crop_height, config.crop_width, size.0, size.1
        ));
    }
    Ok(TrainingData {
        source: src,
        target: tgt,
        size,
    })
}

/// Crops for step `step`. Target labels never leave this function.
fn step_batch(trainer: &Trainer, data: &TrainingData<'_>, step: usize) -> (Array3<f64>, LabelMap, Array3<f64>) {
    let plan = trainer.batch_plan(step, data.source.len(), data.target.len(), data.size);
    let (ch, cw) = (trainer.config().crop_height, trainer.config().crop_width);
    let s = &data.source[plan.source];
    let t = &data.target[plan.target];
    let (sy, sx) = plan.source_origin;
    let (ty, tx) = plan.target_origin;
    (
        crop_image(&s.image, sy, sx, ch, cw),
        s.labels.as_ref().expect("validated").crop(sy, sx, ch, cw),
        crop_image(&t.image, ty, tx, ch, cw),
    )
}

fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("step-{step}.ckpt"))
}

/// Trains from scratch into `run_dir`.
pub fn train(config: &TrainConfig, source: &Dataset, target: &Dataset, run_dir: &Path) -> Result<RunSummary, TrainError> {
    train_with(config, source, target, run_dir, &RunOptions::default())
}

pub fn train_with(
    config: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    run_dir: &Path,
    options: &RunOptions,
) -> Result<RunSummary, TrainError> {
    let data = training_data(config, source, target)?;
    let trainer = Trainer::new(config.clone(), source.num_classes())?;
    let _lock = RunLock::acquire(run_dir)?;
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let resolved = options.resolved_config.clone().unwrap_or_else(|| {
        serde_json::json!({
            "train": config,
            "provenance": config.provenance(),
        })
    });
    let cfg_path = run_dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(&resolved).expect("config serializes");
    fs::write(&cfg_path, text + "\n").map_err(io_err(&cfg_path))?;

    let log_path = run_dir.join(LOG_FILE);
    let mut log = File::create(&log_path).map_err(io_err(&log_path))?;
    writeln!(log, "{}", LogRow::header()).map_err(io_err(&log_path))?;
    run_loop(trainer, &data, run_dir, log, options)
}

/// Continues the run in `run_dir` from its latest checkpoint.
///
/// Rows logged after that checkpoint are discarded and recomputed, so the
/// finished log equals an uninterrupted run's.
pub fn resume(run_dir: &Path, source: &Dataset, target: &Dataset, options: &RunOptions) -> Result<RunSummary, TrainError> {
    let _lock = RunLock::acquire(run_dir)?;
    let latest = latest_checkpoint(run_dir)?
        .ok_or_else(|| TrainError::Config(format!("no checkpoint under {}", run_dir.join(CHECKPOINT_DIR).display())))?;
    let ckpt = Checkpoint::load(&latest)?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    let data = training_data(trainer.config(), source, target)?;
    if source.num_classes() != ckpt.num_classes {
        return Err(TrainError::Data(format!(
            "dataset has {} classes, checkpoint {}",
            source.num_classes(),
            ckpt.num_classes
        )));
    }
    let log_path = run_dir.join(LOG_FILE);
    let kept: Vec<LogRow> = read_log(&log_path)?
        .into_iter()
        .filter(|r| r.step < trainer.step_count())
        .collect();
    let mut log = File::create(&log_path).map_err(io_err(&log_path))?;
    writeln!(log, "{}", LogRow::header()).map_err(io_err(&log_path))?;
    for row in &kept {
        writeln!(log, "{}", row.to_line()).map_err(io_err(&log_path))?;
    }
    run_loop(trainer, &data, run_dir, log, options)
}

fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>, TrainError> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-")?.strip_suffix(".ckpt")?.parse::<usize>().ok());
        if let Some(step) = step {
            if best.as_ref().map_or(true, |(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn run_loop(
    mut trainer: Trainer,
    data: &TrainingData<'_>,
    run_dir: &Path,
    log: File,
    options: &RunOptions,
) -> Result<RunSummary, TrainError> {
    trainer.verify_isolation = options.verify_isolation;
    let log_path = run_dir.join(LOG_FILE);
    let mut log = BufWriter::new(log);
    let total = trainer.config().iterations;
    let end = options.stop_after.map_or(total, |n| n.min(total));
    let every = trainer.config().checkpoint_every;
    let mut rows = Vec::new();
    let mut isolation = Vec::new();
    let mut last_ckpt = None;
    while trainer.step_count() < end {
        let step = trainer.step_count();
        let (image_s, labels_s, image_t) = step_batch(&trainer, data, step);
        let outcome = trainer.train_step(&image_s, &labels_s, &image_t)?;
        let row = LogRow::from_report(step, outcome.sgd_lr, outcome.adam_lr, &outcome.report);
        writeln!(log, "{}", row.to_line()).map_err(io_err(&log_path))?;
        rows.push(row);
        isolation.extend(outcome.isolation);
        let done = trainer.step_count();
        if (every > 0 && done % every == 0) || done == end {
            log.flush().map_err(io_err(&log_path))?;
            let path = checkpoint_path(run_dir, done);
            trainer.checkpoint().save(&path)?;
            last_ckpt = Some(path);
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    let final_checkpoint = match last_ckpt {
        Some(p) => p,
        None => {
            let path = checkpoint_path(run_dir, trainer.step_count());
            trainer.checkpoint().save(&path)?;
            path
        }
    };
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        final_checkpoint,
        model: trainer.into_model(),
        log: rows,
        isolation,
    })
}
