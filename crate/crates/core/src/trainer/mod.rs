//! Alternating optimisation of `E,S` (SGD) against `D` (Adam).
//!
//! One [`Trainer::train_step`] forwards a source and a target crop once,
//! builds every derived label, evaluates all loss terms and then runs the two
//! updates in the configured order. The discriminator update reuses the same
//! forward pass with its feature inputs detached.

mod optim;
mod run;

use ndarray::{concatenate, s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optim::{poly_lr, Adam, Sgd};
pub use run::{read_log, resume, train, train_with, LogRow, RunLock, RunOptions, RunSummary, CONFIG_FILE, LOG_FILE, TRAIN_SPLIT};

use crate::labels::{self, LabelError, LabelMap, ProbMap};
use crate::losses::{self, CoarseLosses, CoarseScores, FineLosses, LossError, LossReport, LossWeights, Term};
use crate::nets::{Checkpoint, ConvGrad, DiscCache, DiscOutput, DiscSpec, EncoderCache, EncoderSpec, Model, NetError, SegCache};

/// Published optimizer settings.
pub mod published {
    pub const SGD_LR: f64 = 2.5e-4;
    pub const SGD_MOMENTUM: f64 = 0.9;
    pub const WEIGHT_DECAY: f64 = 5e-4;
    pub const ADAM_LR: f64 = 1e-4;
    pub const ADAM_BETA1: f64 = 0.9;
    pub const ADAM_BETA2: f64 = 0.99;
    pub const CROP_HEIGHT: usize = 512;
    pub const CROP_WIDTH: usize = 1024;
    pub const LAMBDA_S: f64 = 0.0003;
    pub const LAMBDA_T: f64 = 0.0003;
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset problem: {0}")]
    Data(String),
    #[error("step {step}: loss term {term} is not finite")]
    NonFinite { step: usize, term: Term },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    File { path: std::path::PathBuf, reason: String },
    #[error("run directory {0} is locked by another process")]
    Locked(std::path::PathBuf),
}

/// Rows of the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Pixel-level adversarial alignment only, CE segmentation loss.
    Basic,
    /// Adds the class-conditional fine losses and the dice blend.
    Class,
    /// Adds the coarse class-presence branch.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Basic, Variant::Class, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::Class => "class",
            Variant::Full => "full",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn class_conditional(self) -> bool {
        self != Variant::Basic
    }

    pub fn coarse(self) -> bool {
        self == Variant::Full
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    EncoderFirst,
    DiscriminatorFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub sgd_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Power of the polynomial decay applied to both learning rates.
    pub lr_decay_power: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub th_w: f64,
    pub th_n: f64,
    pub variant: Variant,
    pub update_order: UpdateOrder,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub encoder: EncoderSpec,
    /// Hidden widths of the fine branch; the 1-channel output layer is appended.
    pub disc_fine_hidden: Vec<usize>,
    /// Hidden widths of the coarse tail; the `2C` output layer is appended.
    pub disc_coarse_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    /// Desk-scale settings for 64×64 synthetic images.
    fn default() -> Self {
        Self {
            iterations: 2000,
            crop_height: 64,
            crop_width: 64,
            sgd_lr: 0.01,
            sgd_momentum: published::SGD_MOMENTUM,
            weight_decay: published::WEIGHT_DECAY,
            adam_lr: published::ADAM_LR,
            adam_beta1: published::ADAM_BETA1,
            adam_beta2: published::ADAM_BETA2,
            lr_decay_power: 0.9,
            seed: 0,
            weights: LossWeights::default(),
            th_w: 0.9,
            th_n: 0.5,
            variant: Variant::Full,
            update_order: UpdateOrder::EncoderFirst,
            checkpoint_every: 0,
            encoder: EncoderSpec {
                in_channels: 3,
                feature_channels: 32,
                stride: 4,
                depth: 4,
            },
            disc_fine_hidden: vec![32, 32, 32, 32],
            disc_coarse_hidden: vec![32, 32],
        }
    }
}

impl TrainConfig {
    /// Published settings: full-size crops, backbone stride 8 and the published discriminator.
    pub fn published() -> Self {
        Self {
            crop_height: published::CROP_HEIGHT,
            crop_width: published::CROP_WIDTH,
            sgd_lr: published::SGD_LR,
            encoder: EncoderSpec::default(),
            disc_fine_hidden: vec![64, 128, 256, 512],
            disc_coarse_hidden: vec![256, 512],
            ..Self::default()
        }
    }

    pub fn disc_spec(&self, num_classes: usize) -> DiscSpec {
        DiscSpec::with_widths(&self.disc_fine_hidden, &self.disc_coarse_hidden, num_classes)
    }

    /// Loss weights after applying the variant: the basic row is pure CE with `β = 1`.
    pub fn effective_weights(&self) -> LossWeights {
        match self.variant {
            Variant::Basic => LossWeights {
                alpha: 1.0,
                beta: 1.0,
                ..self.weights
            },
            _ => self.weights,
        }
    }

    /// True when any adversarial or presence term has a non-zero weight.
    pub fn adversarial(&self) -> bool {
        let w = self.effective_weights();
        w.lambda_s != 0.0 || w.lambda_t != 0.0 || (self.variant.coarse() && w.lambda_c != 0.0)
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [("sgd_lr", self.sgd_lr), ("adam_lr", self.adam_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name}={v} must be positive"));
            }
        }
        for (name, v) in [
            ("sgd_momentum", self.sgd_momentum),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name}={v} must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_decay_power >= 0.0) {
            return bad("weight_decay and lr_decay_power must be non-negative".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(self.th_w > 0.0 && self.th_w < 1.0) {
            return bad(format!("th_w={} must lie in (0, 1)", self.th_w));
        }
        if !(self.th_n > 0.0 && self.th_n <= 1.0) {
            return bad(format!("th_n={} must lie in (0, 1]", self.th_n));
        }
        self.weights.validate()?;
        self.encoder.validate()?;
        let disc = self.disc_spec(num_classes);
        disc.validate(num_classes)?;
        let multiple = self.encoder.stride * disc.coarse_factor();
        if self.crop_height == 0
            || self.crop_width == 0
            || self.crop_height % multiple != 0
            || self.crop_width % multiple != 0
        {
            return bad(format!(
                "crop {}x{} is not divisible by the model's input multiple {multiple}",
                self.crop_height, self.crop_width
            ));
        }
        Ok(())
    }

    /// `"paper"` for settings that equal a published value, `"default"` otherwise.
    pub fn provenance(&self) -> serde_json::Value {
        let mark = |is_published: bool| if is_published { "paper" } else { "default" };
        let published_disc = self.disc_fine_hidden == [64, 128, 256, 512] && self.disc_coarse_hidden == [256, 512];
        serde_json::json!({
            "iterations": "default",
            "crop_height": mark(self.crop_height == published::CROP_HEIGHT),
            "crop_width": mark(self.crop_width == published::CROP_WIDTH),
            "sgd_lr": mark(self.sgd_lr == published::SGD_LR),
            "sgd_momentum": mark(self.sgd_momentum == published::SGD_MOMENTUM),
            "weight_decay": mark(self.weight_decay == published::WEIGHT_DECAY),
            "adam_lr": mark(self.adam_lr == published::ADAM_LR),
            "adam_beta1": mark(self.adam_beta1 == published::ADAM_BETA1),
            "adam_beta2": mark(self.adam_beta2 == published::ADAM_BETA2),
            "lr_decay_power": "default",
            "seed": "default",
            "weights.lambda_s": mark(self.weights.lambda_s == published::LAMBDA_S),
            "weights.lambda_t": mark(self.weights.lambda_t == published::LAMBDA_T),
            "weights.lambda_c": "default",
            "weights.lambda_n": "default",
            "weights.alpha": "default",
            "weights.beta": "default",
            "weights.epsilon": "default",
            "th_w": "default",
            "th_n": "default",
            "variant": "default",
            "update_order": "default",
            "checkpoint_every": "default",
            "encoder": "default",
            "disc_fine_hidden": mark(published_disc),
            "disc_coarse_hidden": mark(published_disc),
        })
    }
}

/// Outcome of the per-step update-isolation and detachment checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationCheck {
    /// The `E,S` update left every `D` parameter bit-identical.
    pub d_unchanged_by_es_update: bool,
    /// The `D` update left every `E,S` parameter bit-identical.
    pub es_unchanged_by_d_update: bool,
    /// Every encoder-parameter gradient produced by the `D` objective was exactly zero.
    pub encoder_grad_zero_in_d_update: bool,
    pub es_hash_before: String,
    pub es_hash_after: String,
    pub d_hash_before: String,
    pub d_hash_after: String,
}

impl IsolationCheck {
    pub fn passed(&self) -> bool {
        self.d_unchanged_by_es_update && self.es_unchanged_by_d_update && self.encoder_grad_zero_in_d_update
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub sgd_lr: f64,
    pub adam_lr: f64,
    pub isolation: Option<IsolationCheck>,
}

/// SHA-256 over every parameter's little-endian bytes, in layer order.
pub fn parameter_hash<'a>(layers: impl IntoIterator<Item = &'a crate::nets::Conv2d>) -> String {
    let mut h = Sha256::new();
    for l in layers {
        for v in l.weight.iter().chain(l.bias.iter()) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn es_hash(model: &Model) -> String {
    parameter_hash(model.es_layers().into_iter().map(|(_, l)| l))
}

fn d_hash(model: &Model) -> String {
    parameter_hash(model.d_layers().into_iter().map(|(_, l)| l))
}

fn snapshot(model: &Model, enabled: bool) -> Option<(String, String)> {
    enabled.then(|| (es_hash(model), d_hash(model)))
}

/// Discriminator forward on both domains plus every domain loss.
struct DomainPass {
    cache_s: DiscCache,
    cache_t: DiscCache,
    fine: FineLosses,
    coarse: Option<CoarseLosses>,
}

/// Segmentation forward on both domains plus the source losses.
struct SegPass {
    features_s: Array3<f64>,
    features_t: Array3<f64>,
    enc_s: EncoderCache,
    enc_t: EncoderCache,
    seg_s: SegCache,
    probs_t: ProbMap,
    onehot_s: Array3<f64>,
    seg_ce: f64,
    dice: f64,
    pred_grad: Array3<f64>,
}

fn stack(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    concatenate(Axis(0), &[a.view(), b.view()]).expect("matching coarse shapes")
}

/// Which pieces of the coarse gradient to use.
enum Objective {
    Discriminator,
    Adversarial,
}

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    es_opt: Sgd,
    d_opt: Adam,
    step: usize,
    /// Run the isolation/detachment checks on every step.
    pub verify_isolation: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig, num_classes: usize) -> Result<Self, TrainError> {
        config.validate(num_classes)?;
        let model = Model::new(num_classes, config.encoder, config.disc_spec(num_classes), config.seed)?;
        Ok(Self::with_model(config, model))
    }

    fn with_model(config: TrainConfig, model: Model) -> Self {
        let es_layers: Vec<_> = model.es_layers().into_iter().map(|(_, l)| l).collect();
        let d_layers: Vec<_> = model.d_layers().into_iter().map(|(_, l)| l).collect();
        let es_opt = Sgd::new(&es_layers, config.sgd_momentum, config.weight_decay);
        let d_opt = Adam::new(&d_layers, config.adam_beta1, config.adam_beta2);
        Self {
            config,
            model,
            es_opt,
            d_opt,
            step: 0,
            verify_isolation: false,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn learning_rates(&self) -> (f64, f64) {
        let c = &self.config;
        (
            poly_lr(c.sgd_lr, self.step, c.iterations, c.lr_decay_power),
            poly_lr(c.adam_lr, self.step, c.iterations, c.lr_decay_power),
        )
    }

    /// Model, optimizer state, step and config in one container.
    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "train_config": self.config });
        let mut ckpt = self.model.to_checkpoint(self.step as u64, meta);
        let mut extra = Vec::new();
        self.es_opt.export("optim.es", &mut extra);
        self.d_opt.export("optim.d", &mut extra);
        ckpt.tensors.extend(extra);
        ckpt
    }

    /// Restores a trainer from [`checkpoint`](Self::checkpoint) output.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let config: TrainConfig = ckpt
            .metadata
            .get("train_config")
            .cloned()
            .ok_or_else(|| TrainError::Config("checkpoint carries no training configuration".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| TrainError::Config(e.to_string())))?;
        config.validate(ckpt.num_classes)?;
        if config.encoder != ckpt.encoder || config.disc_spec(ckpt.num_classes) != ckpt.disc {
            return Err(TrainError::Config("checkpoint specs disagree with its configuration".into()));
        }
        let model = Model::from_checkpoint(ckpt)?;
        let mut trainer = Self::with_model(config, model);
        let get = |k: &str| ckpt.tensors.get(k).cloned();
        trainer
            .es_opt
            .import("optim.es", &get)
            .and_then(|_| trainer.d_opt.import("optim.d", &get))
            .ok_or_else(|| TrainError::Config("checkpoint optimizer state is missing or malformed".into()))?;
        trainer.step = ckpt.step as usize;
        Ok(trainer)
    }

    /// Source index, target index and crop origins for step `step`.
    ///
    /// Each step draws from its own RNG stream, so a resumed run sees the same batches.
    pub fn batch_plan(&self, step: usize, n_source: usize, n_target: usize, image: (usize, usize)) -> BatchPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64 + 1);
        let (h, w) = image;
        let (ch, cw) = (self.config.crop_height, self.config.crop_width);
        let origin = |rng: &mut ChaCha8Rng| (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw));
        let source = rng.gen_range(0..n_source);
        let source_origin = origin(&mut rng);
        let target = rng.gen_range(0..n_target);
        let target_origin = origin(&mut rng);
        BatchPlan {
            source,
            source_origin,
            target,
            target_origin,
        }
    }

    fn segmentation_pass(&self, image_s: &Array3<f64>, labels_s: &LabelMap, image_t: &Array3<f64>) -> Result<SegPass, TrainError> {
        let (_, h, w) = image_s.dim();
        let weights = self.config.effective_weights();
        let (features_s, enc_s) = self.model.encoder.encode(image_s)?;
        let (features_t, enc_t) = self.model.encoder.encode(image_t)?;
        let (probs_s, seg_s) = self.model.seg_head.segment(&features_s, h, w);
        let (probs_t, _) = self.model.seg_head.segment(&features_t, h, w);
        let onehot_s = labels_s.one_hot();
        let (seg_ce, ce_grad) = losses::seg_cross_entropy_with_grad(probs_s.view(), labels_s)?;
        let (dice, dice_grad) = losses::dice_loss_with_grad(probs_s.view(), onehot_s.view(), weights.epsilon)?;
        let pred_grad = ce_grad * weights.alpha + dice_grad * (1.0 - weights.alpha);
        Ok(SegPass {
            features_s,
            features_t,
            enc_s,
            enc_t,
            seg_s,
            probs_t,
            onehot_s,
            seg_ce,
            dice,
            pred_grad,
        })
    }

    fn domain_pass(&self, seg: &SegPass, labels_s: &LabelMap) -> Result<DomainPass, TrainError> {
        let (h, w) = (labels_s.height(), labels_s.width());
        let weights = self.config.effective_weights();
        let variant = self.config.variant;
        let disc = &self.model.disc;
        let (out_s, cache_s) = disc.forward(&seg.features_s, h, w, variant.coarse())?;
        let (out_t, cache_t) = disc.forward(&seg.features_t, h, w, variant.coarse())?;
        let fine = losses::fine_losses(
            out_s.fine.view(),
            out_t.fine.view(),
            seg.onehot_s.view(),
            &seg.probs_t,
            &weights,
            self.config.th_n,
            variant.class_conditional(),
        )?;
        let coarse = if variant.coarse() {
            Some(self.coarse_pass(&out_s, &out_t, labels_s, &seg.probs_t, &weights)?)
        } else {
            None
        };
        Ok(DomainPass {
            cache_s,
            cache_t,
            fine,
            coarse,
        })
    }

    fn coarse_pass(
        &self,
        out_s: &DiscOutput,
        out_t: &DiscOutput,
        labels_s: &LabelMap,
        probs_t: &ProbMap,
        weights: &LossWeights,
    ) -> Result<CoarseLosses, TrainError> {
        let grid = self.model.patch_grid(labels_s.height(), labels_s.width())?;
        let w_src = labels::coarse_labels_from_truth(labels_s, &grid)?;
        let w_tgt = labels::coarse_labels_from_prediction(probs_t, &grid, self.config.th_w)?;
        let scores = CoarseScores {
            os_src: out_s.source_scores().expect("coarse forward"),
            ot_src: out_s.target_scores().expect("coarse forward"),
            os_tgt: out_t.source_scores().expect("coarse forward"),
            ot_tgt: out_t.target_scores().expect("coarse forward"),
        };
        Ok(losses::coarse_losses(scores, &w_src, &w_tgt, weights)?)
    }

    /// Backpropagates one domain objective through `D`.
    ///
    /// With `param_grads` the discriminator's parameter gradients are
    /// accumulated. With `detach == false` the feature gradients are also
    /// returned as `(dF_s, dF_t)`.
    fn disc_backward(
        &self,
        pass: &DomainPass,
        objective: Objective,
        param_grads: Option<&mut [ConvGrad]>,
        detach: bool,
    ) -> Option<(Array3<f64>, Array3<f64>)> {
        let (fine, coarse) = match objective {
            Objective::Discriminator => (&pass.fine.d_grad, pass.coarse.as_ref().map(|c| &c.d_grad)),
            Objective::Adversarial => (&pass.fine.adv_grad, pass.coarse.as_ref().map(|c| &c.adv_grad)),
        };
        let go_s = coarse.map(|g| stack(&g.os_src, &g.ot_src));
        let go_t = coarse.map(|g| stack(&g.os_tgt, &g.ot_tgt));
        let disc = &self.model.disc;
        match param_grads {
            Some(grads) => {
                let fs = disc.backward(&pass.cache_s, &fine.source, go_s.as_ref(), Some(&mut *grads), !detach);
                let ft = disc.backward(&pass.cache_t, &fine.target, go_t.as_ref(), Some(grads), !detach);
                fs.zip(ft)
            }
            None => {
                let fs = disc.backward(&pass.cache_s, &fine.source, go_s.as_ref(), None, !detach);
                let ft = disc.backward(&pass.cache_t, &fine.target, go_t.as_ref(), None, !detach);
                fs.zip(ft)
            }
        }
    }

    /// `E,S` gradients of `pred + adv_fine + adv_coarse` with `D` frozen.
    fn es_gradients(&self, seg: &SegPass, pass: Option<&DomainPass>) -> Vec<ConvGrad> {
        let mut grads = self.model.es_grad_buffers();
        let n_enc = self.model.encoder.layers().len();
        let mut df_s = self.model.seg_head.backward(&seg.seg_s, &seg.pred_grad, &mut grads[n_enc]);
        let mut df_t = None;
        if let Some(pass) = pass {
            let (ds, dt) = self
                .disc_backward(pass, Objective::Adversarial, None, false)
                .expect("feature gradients requested");
            df_s += &ds;
            df_t = Some(dt);
        }
        self.model.encoder.backward(&seg.enc_s, df_s, &mut grads[..n_enc]);
        if let Some(dt) = df_t {
            self.model.encoder.backward(&seg.enc_t, dt, &mut grads[..n_enc]);
        }
        grads
    }

    /// `D` parameter gradients of `d_fine + d_coarse`, plus the encoder
    /// gradients that objective induces: identically zero when `detach` holds.
    fn d_gradients(&self, seg: &SegPass, pass: &DomainPass, detach: bool) -> (Vec<ConvGrad>, Vec<ConvGrad>) {
        let mut d = self.model.d_grad_buffers();
        let n_enc = self.model.encoder.layers().len();
        let mut enc: Vec<ConvGrad> = self.model.es_grad_buffers().into_iter().take(n_enc).collect();
        if let Some((ds, dt)) = self.disc_backward(pass, Objective::Discriminator, Some(&mut d), detach) {
            self.model.encoder.backward(&seg.enc_s, ds, &mut enc);
            self.model.encoder.backward(&seg.enc_t, dt, &mut enc);
        }
        (d, enc)
    }

    fn apply_es(&mut self, grads: &[ConvGrad], lr: f64) {
        let mut layers = self.model.es_layers_mut();
        self.es_opt.step(&mut layers, grads, lr);
    }

    fn apply_d(&mut self, grads: &[ConvGrad], lr: f64) {
        let mut layers = self.model.d_layers_mut();
        self.d_opt.step(&mut layers, grads, lr);
    }

    /// One alternating update on a labelled source crop and an unlabelled target crop.
    pub fn train_step(&mut self, image_s: &Array3<f64>, labels_s: &LabelMap, image_t: &Array3<f64>) -> Result<StepOutcome, TrainError> {
        let (_, h, w) = image_s.dim();
        if (labels_s.height(), labels_s.width()) != (h, w) || image_t.dim().1 != h || image_t.dim().2 != w {
            return Err(TrainError::Data("source image, source labels and target image must share a size".into()));
        }
        let (sgd_lr, adam_lr) = self.learning_rates();
        let weights = self.config.effective_weights();
        let adversarial = self.config.adversarial();

        let seg = self.segmentation_pass(image_s, labels_s, image_t)?;
        let first = if adversarial { Some(self.domain_pass(&seg, labels_s)?) } else { None };

        let mut report = LossReport::new(weights);
        report
            .set(Term::SegCe, seg.seg_ce)
            .set(Term::Dice, seg.dice)
            .set(Term::Pred, losses::blend_pred(seg.seg_ce, seg.dice, weights.alpha));
        let fill_d = |report: &mut LossReport, pass: Option<&DomainPass>| {
            let (d1, d2, d_fine, d_coarse) = pass.map_or((0.0, 0.0, 0.0, 0.0), |p| {
                (p.fine.d1, p.fine.d2, p.fine.d_fine, p.coarse.as_ref().map_or(0.0, |c| c.d_coarse))
            });
            report.set(Term::D1, d1).set(Term::D2, d2).set(Term::DFine, d_fine).set(Term::DCoarse, d_coarse);
        };
        let fill_adv = |report: &mut LossReport, pass: Option<&DomainPass>| {
            let (a1, a2, a_fine, a_coarse) = pass.map_or((0.0, 0.0, 0.0, 0.0), |p| {
                (p.fine.adv1, p.fine.adv2, p.fine.adv_fine, p.coarse.as_ref().map_or(0.0, |c| c.adv_coarse))
            });
            report
                .set(Term::Adv1, a1)
                .set(Term::Adv2, a2)
                .set(Term::AdvFine, a_fine)
                .set(Term::AdvCoarse, a_coarse);
        };
        fill_d(&mut report, first.as_ref());

        let verify = self.verify_isolation;
        let snap0 = snapshot(&self.model, verify);
        let mut encoder_grad_zero = true;
        let (snap1, snap2);
        match self.config.update_order {
            UpdateOrder::EncoderFirst => {
                fill_adv(&mut report, first.as_ref());
                self.check_finite(&report)?;
                let es_grads = self.es_gradients(&seg, first.as_ref());
                self.apply_es(&es_grads, sgd_lr);
                snap1 = snapshot(&self.model, verify);
                if let Some(pass) = &first {
                    let (d_grads, enc) = self.d_gradients(&seg, pass, true);
                    encoder_grad_zero = enc.iter().all(ConvGrad::is_zero);
                    self.apply_d(&d_grads, adam_lr);
                }
                snap2 = snapshot(&self.model, verify);
            }
            UpdateOrder::DiscriminatorFirst => {
                if let Some(pass) = &first {
                    let (d_grads, enc) = self.d_gradients(&seg, pass, true);
                    encoder_grad_zero = enc.iter().all(ConvGrad::is_zero);
                    self.apply_d(&d_grads, adam_lr);
                }
                snap1 = snapshot(&self.model, verify);
                // the adversarial objective sees the updated discriminator
                let second = if adversarial { Some(self.domain_pass(&seg, labels_s)?) } else { None };
                fill_adv(&mut report, second.as_ref());
                self.check_finite(&report)?;
                let es_grads = self.es_gradients(&seg, second.as_ref());
                self.apply_es(&es_grads, sgd_lr);
                snap2 = snapshot(&self.model, verify);
            }
        }

        let report = losses::compose_totals(report)?;
        self.check_finite(&report)?;
        report.verify_composition(1e-10)?;

        let isolation = match (snap0, snap1, snap2) {
            (Some((es0, d0)), Some((es1, d1)), Some((es2, d2))) => {
                let (d_unchanged, es_unchanged) = match self.config.update_order {
                    UpdateOrder::EncoderFirst => (d1 == d0, es2 == es1),
                    UpdateOrder::DiscriminatorFirst => (d2 == d1, es1 == es0),
                };
                Some(IsolationCheck {
                    d_unchanged_by_es_update: d_unchanged,
                    es_unchanged_by_d_update: es_unchanged,
                    encoder_grad_zero_in_d_update: encoder_grad_zero,
                    es_hash_before: es0,
                    es_hash_after: es2,
                    d_hash_before: d0,
                    d_hash_after: d2,
                })
            }
            _ => None,
        };

        self.step += 1;
        Ok(StepOutcome {
            report,
            sgd_lr,
            adam_lr,
            isolation,
        })
    }

    fn check_finite(&self, report: &LossReport) -> Result<(), TrainError> {
        match report.non_finite() {
            Some(term) => Err(TrainError::NonFinite { step: self.step, term }),
            None => Ok(()),
        }
    }

    /// Encoder gradients of the `D` objective for the current parameters.
    ///
    /// With `detach == true` (what training uses) these are exactly zero;
    /// `false` shows what would leak into the encoder without the detach.
    pub fn discriminator_encoder_gradients(
        &self,
        image_s: &Array3<f64>,
        labels_s: &LabelMap,
        image_t: &Array3<f64>,
        detach: bool,
    ) -> Result<Vec<ConvGrad>, TrainError> {
        let seg = self.segmentation_pass(image_s, labels_s, image_t)?;
        let pass = self.domain_pass(&seg, labels_s)?;
        Ok(self.d_gradients(&seg, &pass, detach).1)
    }
}

/// Indices and crop origins chosen for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub source: usize,
    pub source_origin: (usize, usize),
    pub target: usize,
    pub target_origin: (usize, usize),
}

/// `C × h × w` window of an image.
pub fn crop_image(image: &Array3<f64>, top: usize, left: usize, height: usize, width: usize) -> Array3<f64> {
    image.slice(s![.., top..top + height, left..left + width]).to_owned()
}
