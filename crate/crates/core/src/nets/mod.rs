//! Encoder `E`, segmentation head `S` and the two-branch discriminator `D`.
//!
//! Every network is a stack of [`ops::Conv2d`] layers with hand-written
//! backward passes. Forward calls return a cache that the matching backward
//! call consumes; parameter gradients are accumulated into caller-owned
//! [`ops::ConvGrad`] buffers so the trainer decides which parameters move.

mod checkpoint;
mod discriminator;
mod encoder;
pub mod ops;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

pub use checkpoint::{Checkpoint, Tensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use discriminator::{DiscCache, DiscOutput, Discriminator};
pub use encoder::{Encoder, EncoderCache, SegCache, SegHead};
pub use ops::{Conv2d, ConvGrad};

use crate::labels::{PatchGrid, ProbMap};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input {height}x{width} is not divisible by {multiple}")]
    Geometry { height: usize, width: usize, multiple: usize },
    #[error("expected {expected} input channels, got {actual}")]
    Channels { expected: usize, actual: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("checkpoint does not match the model: {0}")]
    SpecMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub feature_channels: usize,
    /// Total downsampling factor; a power of two.
    pub stride: usize,
    /// Number of 3×3 conv blocks. The first `log2(stride)` have stride 2.
    pub depth: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            feature_channels: 64,
            stride: 8,
            depth: 4,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.in_channels == 0 || self.feature_channels == 0 {
            return Err(NetError::InvalidSpec("channel counts must be positive".into()));
        }
        if !self.stride.is_power_of_two() {
            return Err(NetError::InvalidSpec(format!("stride {} is not a power of two", self.stride)));
        }
        if self.depth < self.downsampling_blocks() || self.depth == 0 {
            return Err(NetError::InvalidSpec(format!(
                "depth {} cannot reach stride {}",
                self.depth, self.stride
            )));
        }
        Ok(())
    }

    pub fn downsampling_blocks(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscSpec {
    pub fine_channels: Vec<usize>,
    pub coarse_tail_channels: Vec<usize>,
    pub shared_prefix_layers: usize,
    pub leaky_slope: f64,
    pub fine_kernel: usize,
    pub fine_stride: usize,
    pub coarse_kernel: usize,
    pub coarse_stride: usize,
}

impl DiscSpec {
    /// The published discriminator for `num_classes` classes.
    pub fn published(num_classes: usize) -> Self {
        Self::with_widths(&[64, 128, 256, 512], &[256, 512], num_classes)
    }

    /// Hidden widths for both branches; the output widths (1 and `2C`) are appended.
    pub fn with_widths(fine_hidden: &[usize], coarse_hidden: &[usize], num_classes: usize) -> Self {
        let mut fine_channels = fine_hidden.to_vec();
        fine_channels.push(1);
        let mut coarse_tail_channels = coarse_hidden.to_vec();
        coarse_tail_channels.push(2 * num_classes);
        Self {
            fine_channels,
            coarse_tail_channels,
            shared_prefix_layers: 2,
            leaky_slope: 0.2,
            fine_kernel: 3,
            fine_stride: 1,
            coarse_kernel: 3,
            coarse_stride: 2,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidSpec(m));
        if self.fine_channels.last() != Some(&1) {
            return bad("last fine channel must be 1".into());
        }
        if self.coarse_tail_channels.last() != Some(&(2 * num_classes)) {
            return bad(format!("last coarse channel must be 2C = {}", 2 * num_classes));
        }
        if self.shared_prefix_layers == 0 || self.shared_prefix_layers >= self.fine_channels.len() {
            return bad("shared prefix must be a strict, non-empty prefix of the fine branch".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope.is_finite()) {
            return bad(format!("leaky slope {} must be positive", self.leaky_slope));
        }
        if self.fine_stride != 1 {
            return bad("fine branch must keep feature resolution (stride 1)".into());
        }
        if self.coarse_stride < 2 || self.fine_kernel % 2 == 0 || self.coarse_kernel % 2 == 0 {
            return bad("coarse stride must be ≥ 2 and kernels odd".into());
        }
        if self.fine_channels.iter().chain(&self.coarse_tail_channels).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    /// Downsampling of the coarse tail relative to the feature map.
    pub fn coarse_factor(&self) -> usize {
        self.coarse_stride.pow(self.coarse_tail_channels.len() as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Softmax,
    Identity,
}

/// One row of the inspectable architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub path: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
    /// Marks the final layer of a discriminator branch.
    pub branch_output: bool,
}

/// The full segmentation/adaptation model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub seg_head: SegHead,
    pub disc: Discriminator,
}

impl Model {
    pub fn new(num_classes: usize, encoder: EncoderSpec, disc: DiscSpec, seed: u64) -> Result<Self, NetError> {
        if num_classes < 2 {
            return Err(NetError::InvalidSpec(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(encoder, &mut rng)?;
        let seg_head = SegHead::new(encoder.spec().feature_channels, num_classes, &mut rng);
        let disc = Discriminator::new(disc, encoder.spec().feature_channels, num_classes, &mut rng)?;
        Ok(Self { encoder, seg_head, disc })
    }

    pub fn num_classes(&self) -> usize {
        self.seg_head.num_classes()
    }

    /// Images must be divisible by the encoder stride times the coarse-tail downsampling.
    pub fn input_multiple(&self) -> usize {
        self.encoder.spec().stride * self.disc.spec().coarse_factor()
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<(), NetError> {
        let multiple = self.input_multiple();
        if height == 0 || width == 0 || height % multiple != 0 || width % multiple != 0 {
            return Err(NetError::Geometry { height, width, multiple });
        }
        Ok(())
    }

    /// The coarse grid over an input image: one patch per coarse output cell.
    pub fn patch_grid(&self, height: usize, width: usize) -> Result<PatchGrid, NetError> {
        self.check_input(height, width)?;
        let p = self.input_multiple();
        Ok(PatchGrid::covering(height, width, p, p))
    }

    /// `S(E(image))`.
    pub fn predict(&self, image: &Array3<f64>) -> Result<ProbMap, NetError> {
        let (_, h, w) = image.dim();
        self.check_input(h, w)?;
        let (features, _) = self.encoder.encode(image)?;
        Ok(self.seg_head.segment(&features, h, w).0)
    }

    pub fn es_layers(&self) -> Vec<(String, &Conv2d)> {
        let mut out = self.encoder.named_layers();
        out.push(("seg_head.classifier".to_string(), self.seg_head.conv()));
        out
    }

    pub fn es_layers_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out: Vec<&mut Conv2d> = self.encoder.layers_mut().iter_mut().collect();
        out.push(self.seg_head.conv_mut());
        out
    }

    pub fn d_layers(&self) -> Vec<(String, &Conv2d)> {
        self.disc.named_layers()
    }

    pub fn d_layers_mut(&mut self) -> Vec<&mut Conv2d> {
        self.disc.layers_mut()
    }

    pub fn es_grad_buffers(&self) -> Vec<ConvGrad> {
        self.es_layers().into_iter().map(|(_, l)| ConvGrad::zeros_like(l)).collect()
    }

    pub fn d_grad_buffers(&self) -> Vec<ConvGrad> {
        self.d_layers().into_iter().map(|(_, l)| ConvGrad::zeros_like(l)).collect()
    }

    pub fn describe(&self) -> Vec<LayerInfo> {
        let mut out = self.encoder.describe();
        out.push(self.seg_head.describe());
        out.extend(self.disc.describe());
        out
    }
}
