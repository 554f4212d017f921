//! Confusion matrices, per-class IoU and the three-row ablation ladder.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Sample};
use crate::labels::{LabelMap, ProbMap, IGNORE};
use crate::nets::{Model, NetError};
use crate::trainer::{self, TrainConfig, Variant, TRAIN_SPLIT};

/// Published ablation ladder (mIoU, GTA5 → Cityscapes), shown for context only.
pub const PUBLISHED_LADDER: [(Variant, f64); 3] = [(Variant::Basic, 34.9), (Variant::Class, 37.0), (Variant::Full, 37.7)];

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("class count mismatch: {0}")]
    Classes(String),
    #[error("shape mismatch: truth {truth:?}, prediction {pred:?}")]
    Shape { truth: (usize, usize), pred: (usize, usize) },
    #[error("sample {0} has no labels")]
    Unlabeled(String),
    #[error("split {0} is missing or empty")]
    Split(String),
    #[error("at least one seed is required")]
    NoSeeds,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Joint pixel counts, rows = truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn from_counts(counts: Array2<u64>) -> Result<Self, EvalError> {
        if counts.nrows() != counts.ncols() {
            return Err(EvalError::Classes(format!("{}x{} is not square", counts.nrows(), counts.ncols())));
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    /// Number of scored pixels.
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Adds every pixel whose truth is not [`IGNORE`].
    pub fn accumulate(&mut self, truth: &LabelMap, pred: &LabelMap) -> Result<(), EvalError> {
        let c = self.num_classes();
        if truth.num_classes() != c || pred.num_classes() != c {
            return Err(EvalError::Classes(format!(
                "matrix has {c}, truth {}, prediction {}",
                truth.num_classes(),
                pred.num_classes()
            )));
        }
        if truth.data().dim() != pred.data().dim() {
            return Err(EvalError::Shape {
                truth: truth.data().dim(),
                pred: pred.data().dim(),
            });
        }
        let counts = &mut self.counts;
        Zip::from(truth.data()).and(pred.data()).for_each(|&t, &p| {
            if t != IGNORE && p != IGNORE {
                counts[[t as usize, p as usize]] += 1;
            }
        });
        Ok(())
    }

    /// Elementwise sum; shards of a dataset merge into the whole.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), EvalError> {
        if other.num_classes() != self.num_classes() {
            return Err(EvalError::Classes(format!("{} vs {}", self.num_classes(), other.num_classes())));
        }
        self.counts += &other.counts;
        Ok(())
    }
}

/// Per-pixel argmax; ties go to the lower class index.
pub fn argmax_labels(probs: &ProbMap) -> LabelMap {
    let p = probs.view();
    let (c, h, w) = p.dim();
    let data = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if p[[k, y, x]] > p[[best, y, x]] {
                best = k;
            }
        }
        best as u8
    });
    LabelMap::new(data, c).expect("argmax is a valid class")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` where the class is absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the defined classes; `None` if there are none.
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
}

pub fn iou_report(cm: &ConfusionMatrix) -> IouReport {
    let m = cm.counts();
    let c = cm.num_classes();
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = m[[k, k]];
            let union = m.row(k).sum() + m.column(k).sum() - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let total = cm.total();
    IouReport {
        miou: mean(per_class.iter().flatten().copied()),
        pixel_accuracy: (total > 0).then(|| m.diag().sum() as f64 / total as f64),
        per_class,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Bottom tercile (`⌈C/3⌉` classes) by pixel frequency, rarest first; ties go to the higher index.
pub fn rare_classes(pixel_counts: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pixel_counts.len()).collect();
    order.sort_by_key(|&k| (pixel_counts[k], std::cmp::Reverse(k)));
    order.truncate(pixel_counts.len().div_ceil(3));
    order
}

/// Mean IoU over `classes`, skipping undefined ones.
pub fn rare_class_iou(report: &IouReport, classes: &[usize]) -> Option<f64> {
    mean(classes.iter().filter_map(|&k| report.per_class.get(k).copied().flatten()))
}

/// Confusion matrix of `model`'s argmax predictions over labelled samples.
pub fn confusion(model: &Model, samples: &[Sample]) -> Result<ConfusionMatrix, EvalError> {
    let c = model.num_classes();
    samples
        .par_iter()
        .map(|s| {
            let truth = s.labels.as_ref().ok_or_else(|| EvalError::Unlabeled(s.id.clone()))?;
            let pred = argmax_labels(&model.predict(&s.image)?);
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(truth, &pred)?;
            Ok(cm)
        })
        .try_reduce(
            || ConfusionMatrix::new(c),
            |mut a, b| {
                a.merge(&b)?;
                Ok(a)
            },
        )
}

/// Everything `report.json` carries for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub images: usize,
    pub pixels: u64,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub pixel_accuracy: Option<f64>,
    pub rare_classes: Vec<usize>,
    pub rare_class_iou: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn new(cm: &ConfusionMatrix, images: usize, rare: Vec<usize>) -> Self {
        let iou = iou_report(cm);
        Self {
            num_classes: cm.num_classes(),
            images,
            pixels: cm.total(),
            rare_class_iou: rare_class_iou(&iou, &rare),
            per_class_iou: iou.per_class,
            miou: iou.miou,
            pixel_accuracy: iou.pixel_accuracy,
            rare_classes: rare,
            confusion: cm.counts().rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    /// `metric,value` rows: one per class, then the summaries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.per_class_iou.iter().enumerate() {
            out += &format!("iou_class_{k},{}\n", fmt_opt(*v));
        }
        out += &format!("miou,{}\n", fmt_opt(self.miou));
        out += &format!("rare_class_iou,{}\n", fmt_opt(self.rare_class_iou));
        out += &format!("pixel_accuracy,{}\n", fmt_opt(self.pixel_accuracy));
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
        write_pair(dir, &serde_json::to_value(self).expect("report serializes"), &self.to_csv())
    }
}

/// Evaluates `model` on a labelled split; rare classes come from `reference_counts`.
pub fn evaluate(model: &Model, samples: &[Sample], reference_counts: &[u64]) -> Result<EvalReport, EvalError> {
    if reference_counts.len() != model.num_classes() {
        return Err(EvalError::Classes(format!(
            "model has {}, frequency table {}",
            model.num_classes(),
            reference_counts.len()
        )));
    }
    let cm = confusion(model, samples)?;
    Ok(EvalReport::new(&cm, samples.len(), rare_classes(reference_counts)))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn write_pair(dir: &Path, json: &serde_json::Value, csv: &str) -> Result<(PathBuf, PathBuf), EvalError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let jp = dir.join(REPORT_JSON);
    let cp = dir.join(REPORT_CSV);
    fs::write(&jp, serde_json::to_string_pretty(json).expect("json") + "\n").map_err(io(&jp))?;
    fs::write(&cp, csv).map_err(io(&cp))?;
    Ok((jp, cp))
}

/// Datasets for one ablation: labelled source `train`, target `train` for
/// adaptation and a labelled target split for scoring.
#[derive(Debug, Clone, Copy)]
pub struct DatasetPair<'a> {
    pub source: &'a Dataset,
    pub target: &'a Dataset,
    pub eval_split: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub miou: Option<f64>,
    pub rare_class_iou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    /// Set when training or evaluation failed; the other cells still run.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    /// Cells that completed.
    pub runs: usize,
    pub miou_mean: Option<f64>,
    pub miou_std: Option<f64>,
    pub rare_class_iou_mean: Option<f64>,
    pub rare_class_iou_std: Option<f64>,
    /// Published mIoU for the same ladder row, not comparable in scale.
    pub published_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rare_classes: Vec<usize>,
    pub cells: Vec<AblationCell>,
    pub summary: Vec<VariantSummary>,
}

impl AblationTable {
    pub fn cell(&self, variant: Variant, seed: u64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.variant == variant && c.seed == seed)
    }

    pub fn summary_for(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,miou,rare_class_iou,error\n");
        for c in &self.cells {
            let err = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            out += &format!("{},{},{},{},{err}\n", c.variant, c.seed, fmt_opt(c.miou), fmt_opt(c.rare_class_iou));
        }
        for s in &self.summary {
            out += &format!("{},mean,{},{},\n", s.variant, fmt_opt(s.miou_mean), fmt_opt(s.rare_class_iou_mean));
            out += &format!("{},std,{},{},\n", s.variant, fmt_opt(s.miou_std), fmt_opt(s.rare_class_iou_std));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
        write_pair(dir, &serde_json::to_value(self).expect("table serializes"), &self.to_csv())
    }
}

/// Population mean and standard deviation.
fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let Some(m) = mean(values.iter().copied()) else {
        return (None, None);
    };
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    (Some(m), Some(var.sqrt()))
}

/// Trains and scores every variant for every seed.
///
/// Each cell trains into `runs_dir/{variant}-seed{seed}`. A failing cell is
/// recorded with its error and the ladder carries on.
pub fn run_ablation(base: &TrainConfig, data: DatasetPair<'_>, seeds: &[u64], runs_dir: &Path) -> Result<AblationTable, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let eval_samples = data
        .target
        .split(data.eval_split)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| EvalError::Split(data.eval_split.to_string()))?;
    let reference = data.source.class_pixel_counts(TRAIN_SPLIT);
    let rare = rare_classes(&reference);

    let mut cells = Vec::new();
    for &seed in seeds {
        for variant in Variant::ALL {
            let config = TrainConfig {
                seed,
                variant,
                ..base.clone()
            };
            let run_dir = runs_dir.join(format!("{variant}-seed{seed}"));
            let outcome = trainer::train(&config, data.source, data.target, &run_dir)
                .map_err(|e| e.to_string())
                .and_then(|run| evaluate(&run.model, eval_samples, &reference).map_err(|e| e.to_string()));
            cells.push(match outcome {
                Ok(r) => AblationCell {
                    variant,
                    seed,
                    miou: r.miou,
                    rare_class_iou: r.rare_class_iou,
                    per_class_iou: r.per_class_iou,
                    error: None,
                },
                Err(e) => AblationCell {
                    variant,
                    seed,
                    miou: None,
                    rare_class_iou: None,
                    per_class_iou: Vec::new(),
                    error: Some(e),
                },
            });
        }
    }
    Ok(summarize(seeds.to_vec(), rare, cells))
}

pub fn summarize(seeds: Vec<u64>, rare_classes: Vec<usize>, cells: Vec<AblationCell>) -> AblationTable {
    let summary = PUBLISHED_LADDER
        .iter()
        .map(|&(variant, published_miou)| {
            let ok: Vec<&AblationCell> = cells.iter().filter(|c| c.variant == variant && c.error.is_none()).collect();
            let miou: Vec<f64> = ok.iter().filter_map(|c| c.miou).collect();
            let rare: Vec<f64> = ok.iter().filter_map(|c| c.rare_class_iou).collect();
            let (miou_mean, miou_std) = mean_std(&miou);
            let (rare_class_iou_mean, rare_class_iou_std) = mean_std(&rare);
            VariantSummary {
                variant,
                runs: ok.len(),
                miou_mean,
                miou_std,
                rare_class_iou_mean,
                rare_class_iou_std,
                published_miou,
            }
        })
        .collect();
    AblationTable {
        seeds,
        rare_classes,
        cells,
        summary,
    }
}
