//! The run configuration file: six optional sections, unknown keys rejected.

use std::path::Path;

use ccda::datagen::{DomainShiftSpec, SceneSpec};
use ccda::losses::LossWeights;
use ccda::nets::EncoderSpec;
use ccda::trainer::{published, TrainConfig, UpdateOrder, Variant};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
    pub class_frequency_skew: f64,
    pub shapes_per_image: (usize, usize),
    pub seed: u64,
    /// Images in each domain's `train` split.
    pub train_images: usize,
    /// Images in each domain's held-out split.
    pub eval_images: usize,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            image_height: s.image_height,
            image_width: s.image_width,
            num_classes: s.num_classes,
            class_frequency_skew: s.class_frequency_skew,
            shapes_per_image: s.shapes_per_image,
            seed: s.seed,
            train_images: 200,
            eval_images: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSection {
    pub brightness_offset: f64,
    pub contrast_scale: f64,
    pub hue_rotation: f64,
    pub noise_stddev: f64,
    pub texture_frequency: f64,
}

impl Default for ShiftSection {
    fn default() -> Self {
        let s = DomainShiftSpec::desk_target();
        Self {
            brightness_offset: s.brightness_offset,
            contrast_scale: s.contrast_scale,
            hue_rotation: s.hue_rotation,
            noise_stddev: s.noise_stddev,
            texture_frequency: s.texture_frequency,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub feature_channels: usize,
    pub stride: usize,
    pub depth: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = TrainConfig::default().encoder;
        Self {
            feature_channels: e.feature_channels,
            stride: e.stride,
            depth: e.depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub sgd_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lr_decay_power: f64,
    pub seed: u64,
    pub variant: Variant,
    pub update_order: UpdateOrder,
    pub checkpoint_every: usize,
    pub encoder: EncoderSection,
    pub disc_fine_hidden: Vec<usize>,
    pub disc_coarse_hidden: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iterations: t.iterations,
            crop_height: t.crop_height,
            crop_width: t.crop_width,
            sgd_lr: t.sgd_lr,
            sgd_momentum: t.sgd_momentum,
            weight_decay: t.weight_decay,
            adam_lr: t.adam_lr,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            lr_decay_power: t.lr_decay_power,
            seed: t.seed,
            variant: t.variant,
            update_order: t.update_order,
            checkpoint_every: t.checkpoint_every,
            encoder: EncoderSection::default(),
            disc_fine_hidden: t.disc_fine_hidden,
            disc_coarse_hidden: t.disc_coarse_hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub lambda_n: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        let w = TrainConfig::default().weights;
        Self {
            lambda_s: w.lambda_s,
            lambda_t: w.lambda_t,
            lambda_c: w.lambda_c,
            lambda_n: w.lambda_n,
            alpha: w.alpha,
            beta: w.beta,
            epsilon: w.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdsSection {
    pub th_w: f64,
    pub th_n: f64,
}

impl Default for ThresholdsSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { th_w: t.th_w, th_n: t.th_n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Labelled split scored by `eval` and `ablate`.
    pub split: String,
    /// Training seeds of the ablation ladder.
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: "val".into(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub scene: SceneSection,
    pub shift: ShiftSection,
    pub train: TrainSection,
    pub weights: WeightsSection,
    pub thresholds: ThresholdsSection,
    pub eval: EvalSection,
    /// Written into resolved configs; accepted and recomputed on load.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Value>,
}

/// Published values, keyed by dotted path.
fn published_values() -> Vec<(&'static str, Value)> {
    use serde_json::json;
    vec![
        ("train.crop_height", json!(published::CROP_HEIGHT)),
        ("train.crop_width", json!(published::CROP_WIDTH)),
        ("train.sgd_lr", json!(published::SGD_LR)),
        ("train.sgd_momentum", json!(published::SGD_MOMENTUM)),
        ("train.weight_decay", json!(published::WEIGHT_DECAY)),
        ("train.adam_lr", json!(published::ADAM_LR)),
        ("train.adam_beta1", json!(published::ADAM_BETA1)),
        ("train.adam_beta2", json!(published::ADAM_BETA2)),
        ("train.encoder.stride", json!(EncoderSpec::default().stride)),
        ("train.disc_fine_hidden", json!([64, 128, 256, 512])),
        ("train.disc_coarse_hidden", json!([256, 512])),
        ("weights.lambda_s", json!(published::LAMBDA_S)),
        ("weights.lambda_t", json!(published::LAMBDA_T)),
    ]
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        config.provenance = None;
        Ok(config)
    }

    /// `source` marker per field: `paper` when it equals a published value,
    /// `default` when it equals the built-in default, `user` otherwise.
    pub fn provenance(&self) -> Value {
        let mut bare = self.clone();
        bare.provenance = None;
        let mut fields = Vec::new();
        flatten("", &serde_json::to_value(&bare).expect("config serializes"), &mut fields);
        let mut defaults = Vec::new();
        flatten("", &serde_json::to_value(Self::default()).expect("config serializes"), &mut defaults);
        let published = published_values();
        let mut out = Map::new();
        for (key, value) in fields {
            let is_published = published.iter().any(|(k, v)| *k == key && json_eq(v, &value));
            let is_default = defaults.iter().any(|(k, v)| *k == key && json_eq(v, &value));
            let mark = if is_published {
                "paper"
            } else if is_default {
                "default"
            } else {
                "user"
            };
            out.insert(key, Value::from(mark));
        }
        Value::Object(out)
    }

    /// The config with every default materialised plus its provenance markers.
    pub fn resolved(&self) -> Value {
        let mut bare = self.clone();
        bare.provenance = Some(self.provenance());
        serde_json::to_value(bare).expect("config serializes")
    }

    pub fn scene_spec(&self, stride: usize) -> SceneSpec {
        let s = &self.scene;
        SceneSpec {
            image_height: s.image_height,
            image_width: s.image_width,
            num_classes: s.num_classes,
            class_frequency_skew: s.class_frequency_skew,
            shapes_per_image: s.shapes_per_image,
            seed: s.seed,
            stride,
        }
    }

    pub fn shift_spec(&self) -> DomainShiftSpec {
        let s = &self.shift;
        DomainShiftSpec {
            brightness_offset: s.brightness_offset,
            contrast_scale: s.contrast_scale,
            hue_rotation: s.hue_rotation,
            noise_stddev: s.noise_stddev,
            texture_frequency: s.texture_frequency,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let w = &self.weights;
        TrainConfig {
            iterations: t.iterations,
            crop_height: t.crop_height,
            crop_width: t.crop_width,
            sgd_lr: t.sgd_lr,
            sgd_momentum: t.sgd_momentum,
            weight_decay: t.weight_decay,
            adam_lr: t.adam_lr,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            lr_decay_power: t.lr_decay_power,
            seed: t.seed,
            weights: LossWeights {
                lambda_s: w.lambda_s,
                lambda_t: w.lambda_t,
                lambda_c: w.lambda_c,
                lambda_n: w.lambda_n,
                alpha: w.alpha,
                beta: w.beta,
                epsilon: w.epsilon,
            },
            th_w: self.thresholds.th_w,
            th_n: self.thresholds.th_n,
            variant: t.variant,
            update_order: t.update_order,
            checkpoint_every: t.checkpoint_every,
            encoder: EncoderSpec {
                in_channels: 3,
                feature_channels: t.encoder.feature_channels,
                stride: t.encoder.stride,
                depth: t.encoder.depth,
            },
            disc_fine_hidden: t.disc_fine_hidden.clone(),
            disc_coarse_hidden: t.disc_coarse_hidden.clone(),
        }
    }

    /// Input multiple the data must satisfy for this model.
    pub fn input_multiple(&self) -> usize {
        let t = self.train_config();
        t.encoder.stride * t.disc_spec(self.scene.num_classes).coarse_factor()
    }

    /// Checks every section; errors are validation failures.
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: &dyn std::fmt::Display| CliError::Validation(e.to_string());
        self.train_config().validate(self.scene.num_classes).map_err(|e| invalid(&e))?;
        self.scene_spec(self.input_multiple()).validate().map_err(|e| invalid(&e))?;
        self.shift_spec().validate().map_err(|e| invalid(&e))?;
        if self.scene.train_images == 0 {
            return Err(CliError::Validation("scene.train_images must be positive".into()));
        }
        if self.eval.split.is_empty() || self.eval.split == ccda::trainer::TRAIN_SPLIT {
            return Err(CliError::Validation(format!(
                "eval.split must name a held-out split, got {:?}",
                self.eval.split
            )));
        }
        Ok(())
    }
}

/// Numeric comparison that treats `5` and `5.0` alike.
fn json_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64() == y.as_f64(),
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| json_eq(p, q)),
        _ => a == b,
    }
}
