use ndarray::Array3;
use rand::Rng;

use super::ops::{leaky_relu, leaky_relu_backward, softmax_channels, softmax_channels_backward, Conv2d, ConvCache, ConvGrad, Resize};
use super::{Activation, EncoderSpec, LayerInfo, NetError};
use crate::labels::ProbMap;

const ENCODER_SLOPE: f64 = 0.2;

/// Stack of 3×3 conv + leaky ReLU blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    layers: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    convs: Vec<ConvCache>,
    activations: Vec<Array3<f64>>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self, NetError> {
        spec.validate()?;
        let down = spec.downsampling_blocks();
        let layers = (0..spec.depth)
            .map(|i| {
                let cin = if i == 0 { spec.in_channels } else { spec.feature_channels };
                let stride = if i < down { 2 } else { 1 };
                Conv2d::new(cin, spec.feature_channels, 3, stride, rng)
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Conv2d] {
        &mut self.layers
    }

    pub(crate) fn named_layers(&self) -> Vec<(String, &Conv2d)> {
        self.layers.iter().enumerate().map(|(i, l)| (format!("encoder.block{i}"), l)).collect()
    }

    pub(crate) fn describe(&self) -> Vec<LayerInfo> {
        self.named_layers()
            .into_iter()
            .map(|(path, l)| LayerInfo {
                path,
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
                stride: l.stride,
                activation: Activation::LeakyRelu(ENCODER_SLOPE),
                branch_output: false,
            })
            .collect()
    }

    /// Features at `H/stride × W/stride`. Pixel values in `[0,1]` are mapped to `[-1,1]` first.
    pub fn encode(&self, image: &Array3<f64>) -> Result<(Array3<f64>, EncoderCache), NetError> {
        let (c, h, w) = image.dim();
        if c != self.spec.in_channels {
            return Err(NetError::Channels {
                expected: self.spec.in_channels,
                actual: c,
            });
        }
        if h % self.spec.stride != 0 || w % self.spec.stride != 0 || h == 0 || w == 0 {
            return Err(NetError::Geometry {
                height: h,
                width: w,
                multiple: self.spec.stride,
            });
        }
        let mut x = image.mapv(|v| 2.0 * v - 1.0);
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (z, cache) = layer.forward(&x);
            x = leaky_relu(z, ENCODER_SLOPE);
            convs.push(cache);
            activations.push(x.clone());
        }
        Ok((x, EncoderCache { convs, activations }))
    }

    /// Accumulates parameter gradients from `grad_features` into `grads` (one per block).
    pub fn backward(&self, cache: &EncoderCache, grad_features: Array3<f64>, grads: &mut [ConvGrad]) {
        let mut g = grad_features;
        for i in (0..self.layers.len()).rev() {
            leaky_relu_backward(&cache.activations[i], &mut g, ENCODER_SLOPE);
            match self.layers[i].backward(&cache.convs[i], &g, Some(&mut grads[i]), i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }
}

/// 1×1 conv to class logits, bilinear upsampling, per-pixel softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct SegHead {
    conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct SegCache {
    conv: ConvCache,
    resize: Resize,
    probs: Array3<f64>,
}

impl SegHead {
    pub fn new<R: Rng + ?Sized>(feature_channels: usize, num_classes: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(feature_channels, num_classes, 1, 1, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.conv.out_channels
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn conv_mut(&mut self) -> &mut Conv2d {
        &mut self.conv
    }

    pub(crate) fn describe(&self) -> LayerInfo {
        LayerInfo {
            path: "seg_head.classifier".into(),
            in_channels: self.conv.in_channels,
            out_channels: self.conv.out_channels,
            kernel: 1,
            stride: 1,
            activation: Activation::Softmax,
            branch_output: false,
        }
    }

    pub fn segment(&self, features: &Array3<f64>, height: usize, width: usize) -> (ProbMap, SegCache) {
        let (logits, conv) = self.conv.forward(features);
        let (_, fh, fw) = logits.dim();
        let resize = Resize::new(fh, fw, height, width);
        let probs = softmax_channels(&resize.forward(&logits));
        let map = ProbMap::from_normalized(probs.clone());
        (map, SegCache { conv, resize, probs })
    }

    /// Returns the feature gradient; head parameter gradients go into `grad`.
    pub fn backward(&self, cache: &SegCache, grad_probs: &Array3<f64>, grad: &mut ConvGrad) -> Array3<f64> {
        let dz = softmax_channels_backward(&cache.probs, grad_probs);
        let dlogits = cache.resize.backward(&dz);
        self.conv
            .backward(&cache.conv, &dlogits, Some(grad), true)
            .expect("input gradient requested")
    }
}
