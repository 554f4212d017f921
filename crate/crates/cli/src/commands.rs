use std::fs;
use std::path::{Path, PathBuf};

use ccda::datagen::{self, Dataset, DatagenError, MANIFEST_FILE};
use ccda::eval::{self, DatasetPair, EvalReport};
use ccda::gradcheck::{self, Sizes};
use ccda::losses::Term;
use ccda::nets::{Checkpoint, Model, NetError};
use ccda::trainer::{self, RunLock, RunOptions, TrainError, Variant, CONFIG_FILE, TRAIN_SPLIT};

use crate::config::RunConfigFile;
use crate::{plot, CliError, Common};

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOLERANCE: f64 = 1e-4;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::Data(_) | TrainError::Net(_) => invalid(e),
        other => runtime(other),
    }
}

/// Loads the config, applies flag overrides and validates the result.
fn resolve(common: &Common) -> Result<RunConfigFile, CliError> {
    if common.device != "cpu" {
        return Err(CliError::Validation(format!(
            "device {:?} is not available; only \"cpu\" is supported",
            common.device
        )));
    }
    let mut config = RunConfigFile::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.scene.seed = seed;
        config.train.seed = seed;
    }
    if let Some(v) = common.variant {
        config.train.variant = v.into();
    }
    if let Some(n) = common.iterations {
        config.train.iterations = n;
    }
    config.validate()?;
    Ok(config)
}

fn write_resolved(dir: &Path, config: &RunConfigFile) -> Result<(), CliError> {
    let path = dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(&config.resolved()).expect("config serializes");
    fs::write(&path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn read_input(path: &Path) -> Result<Dataset, CliError> {
    datagen::read_dataset(&manifest_path(path)).map_err(|e| match e {
        DatagenError::InvalidSpec(_) => invalid(e),
        other => invalid(format!("cannot load dataset: {other}")),
    })
}

fn lock(dir: &Path) -> Result<RunLock, CliError> {
    RunLock::acquire(dir).map_err(runtime)
}

fn writing(e: DatagenError) -> CliError {
    runtime(e)
}

pub fn generate(common: &Common, out: &Path) -> Result<(), CliError> {
    let config = resolve(common)?;
    let _lock = lock(out)?;
    let spec = config.scene_spec(config.input_multiple());
    let sizes = [
        (TRAIN_SPLIT, config.scene.train_images),
        (config.eval.split.as_str(), config.scene.eval_images),
    ];
    let (source, target) = datagen::generate_pair(&spec, &config.shift_spec(), &sizes).map_err(invalid)?;
    let src = datagen::write_dataset(&source, &out.join("source")).map_err(writing)?;
    let tgt = datagen::write_dataset(&target, &out.join("target")).map_err(writing)?;
    write_resolved(out, &config)?;
    println!("{}", src.display());
    println!("{}", tgt.display());
    Ok(())
}

pub fn train(
    common: &Common,
    source: &Path,
    target: &Path,
    out: &Path,
    resume: bool,
    verify_isolation: bool,
) -> Result<(), CliError> {
    let config = resolve(common)?;
    let source = read_input(source)?;
    let mut target = read_input(target)?;
    for samples in target.splits.values_mut() {
        for s in samples {
            s.labels = None;
        }
    }
    if source.num_classes() != config.scene.num_classes {
        return Err(invalid(format!(
            "dataset has {} classes but scene.num_classes is {}",
            source.num_classes(),
            config.scene.num_classes
        )));
    }
    let options = RunOptions {
        resolved_config: Some(config.resolved()),
        verify_isolation,
        stop_after: None,
    };
    let summary = if resume {
        trainer::resume(out, &source, &target, &options)
    } else {
        trainer::train_with(&config.train_config(), &source, &target, out, &options)
    }
    .map_err(train_error)?;
    if let Some(bad) = summary.isolation.iter().find(|c| !c.passed()) {
        return Err(runtime(format!("update isolation check failed: {bad:?}")));
    }
    if common.plots {
        let rows = trainer::read_log(&out.join(trainer::LOG_FILE)).map_err(runtime)?;
        let series: Vec<Vec<f64>> = [Term::TotalEs, Term::TotalD]
            .iter()
            .map(|&t| rows.iter().filter_map(|r| r.get(t)).collect())
            .collect();
        plot::lines(&out.join("loss.png"), &series).map_err(runtime)?;
    }
    println!("{}", summary.final_checkpoint.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    let ckpt = Checkpoint::load(path).map_err(|e| invalid(format!("cannot load checkpoint: {e}")))?;
    Model::from_checkpoint(&ckpt).map_err(invalid)
}

pub fn eval(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    split: Option<&str>,
    reference: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let config = resolve(common)?;
    let model = load_model(checkpoint)?;
    let dataset = read_input(data)?;
    if dataset.num_classes() != model.num_classes() {
        return Err(invalid(format!(
            "checkpoint has {} classes, dataset {}",
            model.num_classes(),
            dataset.num_classes()
        )));
    }
    let (h, w) = (dataset.scene.image_height, dataset.scene.image_width);
    model.check_input(h, w).map_err(|e: NetError| invalid(format!("checkpoint does not fit the data: {e}")))?;
    let split = split.unwrap_or(&config.eval.split);
    let samples = dataset
        .split(split)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| invalid(format!("dataset has no split {split:?}")))?;
    let counts = match reference {
        Some(path) => {
            let r = read_input(path)?;
            if r.num_classes() != dataset.num_classes() {
                return Err(invalid("reference dataset has a different class count"));
            }
            r.class_pixel_counts(TRAIN_SPLIT)
        }
        None => dataset.class_pixel_counts(split),
    };
    let _lock = lock(out)?;
    let report = eval::evaluate(&model, samples, &counts).map_err(|e| match e {
        eval::EvalError::Unlabeled(_) => invalid(e),
        other => runtime(other),
    })?;
    report.write(out).map_err(runtime)?;
    if common.plots {
        let groups: Vec<Vec<Option<f64>>> = report.per_class_iou.iter().map(|v| vec![*v]).collect();
        plot::grouped_bars(&out.join("iou.png"), &groups).map_err(runtime)?;
    }
    print_eval(&report);
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn print_eval(r: &EvalReport) {
    println!("class  iou");
    for (k, v) in r.per_class_iou.iter().enumerate() {
        let rare = if r.rare_classes.contains(&k) { "  (rare)" } else { "" };
        println!("{k:>5}  {}{rare}", fmt(*v));
    }
    println!("mIoU {}  rare-class IoU {}", fmt(r.miou), fmt(r.rare_class_iou));
}

pub fn gradcheck(seed: u64, instances: usize, sizes: Sizes, out: Option<&Path>, inject_sign_flip: bool) -> Result<(), CliError> {
    let mut cases = gradcheck::loss_cases();
    if inject_sign_flip {
        cases.push(gradcheck::sign_flipped_case());
    }
    let results =
        gradcheck::run_gradcheck(&cases, seed, sizes, instances, GRAD_STEP, GRAD_TOLERANCE).map_err(|e| match e {
            gradcheck::GradCheckError::Build { .. } => runtime(e),
            other => invalid(other),
        })?;
    println!("{:<28} {:>9} {:>14}  result", "loss", "instances", "max rel err");
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        println!("{:<28} {:>9} {:>14.3e}  {verdict}", r.name, r.instances, r.max_relative_error);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join("gradcheck.json");
        let doc = serde_json::json!({
            "seed": seed,
            "sizes": sizes,
            "step": GRAD_STEP,
            "tolerance": GRAD_TOLERANCE,
            "results": results,
        });
        fs::write(&path, serde_json::to_string_pretty(&doc).expect("json") + "\n")
            .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(runtime(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

pub fn ablate(common: &Common, seeds: Option<Vec<u64>>, data: Option<(&Path, &Path)>, out: &Path) -> Result<(), CliError> {
    let mut config = resolve(common)?;
    if let Some(seeds) = seeds {
        config.eval.seeds = seeds;
    }
    if config.eval.seeds.is_empty() {
        return Err(invalid("at least one seed is required"));
    }
    let (source, mut target) = match data {
        Some((s, t)) => (read_input(s)?, read_input(t)?),
        None => {
            let spec = config.scene_spec(config.input_multiple());
            let sizes = [
                (TRAIN_SPLIT, config.scene.train_images),
                (config.eval.split.as_str(), config.scene.eval_images),
            ];
            datagen::generate_pair(&spec, &config.shift_spec(), &sizes).map_err(invalid)?
        }
    };
    if let Some(train) = target.splits.get_mut(TRAIN_SPLIT) {
        for s in train {
            s.labels = None;
        }
    }
    let _lock = lock(out)?;
    write_resolved(out, &config)?;
    let pair = DatasetPair {
        source: &source,
        target: &target,
        eval_split: &config.eval.split,
    };
    let table = eval::run_ablation(&config.train_config(), pair, &config.eval.seeds, &out.join("runs")).map_err(invalid)?;
    table.write(out).map_err(runtime)?;
    if common.plots {
        let groups: Vec<Vec<Option<f64>>> = table
            .summary
            .iter()
            .map(|s| vec![s.miou_mean, s.rare_class_iou_mean])
            .collect();
        plot::grouped_bars(&out.join("ablation.png"), &groups).map_err(runtime)?;
    }
    println!("{:<8} {:>5} {:>16} {:>16} {:>10}", "variant", "runs", "mIoU", "rare-class IoU", "published mIoU");
    for s in &table.summary {
        println!(
            "{:<8} {:>5} {:>7} ± {:<6} {:>7} ± {:<6} {:>10.1}",
            s.variant.name(),
            s.runs,
            fmt(s.miou_mean),
            fmt(s.miou_std),
            fmt(s.rare_class_iou_mean),
            fmt(s.rare_class_iou_std),
            s.published_miou
        );
    }
    for c in table.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!("{} seed {}: {}", c.variant, c.seed, c.error.as_deref().unwrap_or(""));
    }
    if Variant::ALL.iter().all(|&v| table.summary_for(v).map_or(true, |s| s.runs == 0)) {
        return Err(runtime("every ablation cell failed"));
    }
    Ok(())
}
