use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::Rng;

use super::ops::{leaky_relu, leaky_relu_backward, Conv2d, ConvCache, ConvGrad, Resize};
use super::{Activation, DiscSpec, LayerInfo, NetError};

/// Fine branch: stride-1 convs, sigmoid, bilinear upsample to the image.
/// Coarse branch: the first `shared_prefix_layers` fine layers, then strided convs.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    spec: DiscSpec,
    num_classes: usize,
    fine: Vec<Conv2d>,
    coarse: Vec<Conv2d>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscOutput {
    /// `U`: per-pixel domain score in `(0,1)` at image resolution.
    pub fine: Array2<f64>,
    /// `2C × rows × cols` raw scores; `None` when the coarse branch was skipped.
    pub coarse: Option<Array3<f64>>,
}

impl DiscOutput {
    /// `O^s`: the first `C` coarse channels.
    pub fn source_scores(&self) -> Option<ArrayView3<'_, f64>> {
        self.coarse.as_ref().map(|o| {
            let c = o.dim().0 / 2;
            o.slice(s![..c, .., ..])
        })
    }

    /// `O^t`: the last `C` coarse channels.
    pub fn target_scores(&self) -> Option<ArrayView3<'_, f64>> {
        self.coarse.as_ref().map(|o| {
            let c = o.dim().0 / 2;
            o.slice(s![c.., .., ..])
        })
    }
}

#[derive(Debug, Clone)]
pub struct DiscCache {
    fine: Vec<ConvCache>,
    fine_acts: Vec<Array3<f64>>,
    sigmoid: Array3<f64>,
    resize: Resize,
    coarse: Vec<ConvCache>,
    coarse_acts: Vec<Array3<f64>>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        spec: DiscSpec,
        in_channels: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        spec.validate(num_classes)?;
        let mut cin = in_channels;
        let mut fine = Vec::with_capacity(spec.fine_channels.len());
        for &cout in &spec.fine_channels {
            fine.push(Conv2d::new(cin, cout, spec.fine_kernel, spec.fine_stride, rng));
            cin = cout;
        }
        let mut cin = spec.fine_channels[spec.shared_prefix_layers - 1];
        let mut coarse = Vec::with_capacity(spec.coarse_tail_channels.len());
        for &cout in &spec.coarse_tail_channels {
            coarse.push(Conv2d::new(cin, cout, spec.coarse_kernel, spec.coarse_stride, rng));
            cin = cout;
        }
        Ok(Self {
            spec,
            num_classes,
            fine,
            coarse,
        })
    }

    pub fn spec(&self) -> &DiscSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn fine_layers(&self) -> &[Conv2d] {
        &self.fine
    }

    pub fn coarse_layers(&self) -> &[Conv2d] {
        &self.coarse
    }

    /// Zeroes the last layer of both branches, so `U ≡ 0.5` and `O ≡ 0`.
    pub fn zero_output_layers(&mut self) {
        if let Some(l) = self.fine.last_mut() {
            l.zero_parameters();
        }
        if let Some(l) = self.coarse.last_mut() {
            l.zero_parameters();
        }
    }

    fn fine_path(&self, i: usize) -> String {
        if i < self.spec.shared_prefix_layers {
            format!("disc.shared{i}")
        } else {
            format!("disc.fine{i}")
        }
    }

    /// Fine layers (shared prefix included) followed by the coarse tail.
    pub(crate) fn named_layers(&self) -> Vec<(String, &Conv2d)> {
        let fine = self.fine.iter().enumerate().map(|(i, l)| (self.fine_path(i), l));
        let coarse = self.coarse.iter().enumerate().map(|(i, l)| (format!("disc.coarse{i}"), l));
        fine.chain(coarse).collect()
    }

    pub(crate) fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        self.fine.iter_mut().chain(self.coarse.iter_mut()).collect()
    }

    pub(crate) fn describe(&self) -> Vec<LayerInfo> {
        let nf = self.fine.len();
        let nc = self.coarse.len();
        self.named_layers()
            .into_iter()
            .enumerate()
            .map(|(i, (path, l))| {
                let (activation, branch_output) = if i == nf - 1 {
                    (Activation::Sigmoid, true)
                } else if i == nf + nc - 1 {
                    (Activation::Identity, true)
                } else {
                    (Activation::LeakyRelu(self.spec.leaky_slope), false)
                };
                LayerInfo {
                    path,
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    kernel: l.kernel,
                    stride: l.stride,
                    activation,
                    branch_output,
                }
            })
            .collect()
    }

    /// Runs both branches; `U` is upsampled to `height × width`.
    pub fn discriminate(&self, features: &Array3<f64>, height: usize, width: usize) -> Result<(DiscOutput, DiscCache), NetError> {
        self.forward(features, height, width, true)
    }

    /// As [`discriminate`](Self::discriminate), optionally skipping the coarse branch.
    pub fn forward(
        &self,
        features: &Array3<f64>,
        height: usize,
        width: usize,
        with_coarse: bool,
    ) -> Result<(DiscOutput, DiscCache), NetError> {
        let (c, fh, fw) = features.dim();
        let first = &self.fine[0];
        if c != first.in_channels {
            return Err(NetError::Channels {
                expected: first.in_channels,
                actual: c,
            });
        }
        let factor = self.spec.coarse_factor();
        if fh % factor != 0 || fw % factor != 0 || fh == 0 || fw == 0 {
            return Err(NetError::Geometry {
                height: fh,
                width: fw,
                multiple: factor,
            });
        }
        let slope = self.spec.leaky_slope;
        let last = self.fine.len() - 1;
        let mut fine = Vec::with_capacity(self.fine.len());
        let mut fine_acts = Vec::with_capacity(last);
        let mut x = features.clone();
        for (i, layer) in self.fine.iter().enumerate() {
            let (z, cache) = layer.forward(&x);
            fine.push(cache);
            if i == last {
                x = z;
            } else {
                x = leaky_relu(z, slope);
                fine_acts.push(x.clone());
            }
        }
        let sigmoid = x.mapv(crate::losses::sigmoid);
        let resize = Resize::new(fh, fw, height, width);
        let u = resize.forward(&sigmoid).index_axis_move(Axis(0), 0);

        let mut coarse = Vec::new();
        let mut coarse_acts = Vec::new();
        let mut o = None;
        if with_coarse {
            let mut x = fine_acts[self.spec.shared_prefix_layers - 1].clone();
            let tail_last = self.coarse.len() - 1;
            for (i, layer) in self.coarse.iter().enumerate() {
                let (z, cache) = layer.forward(&x);
                coarse.push(cache);
                if i == tail_last {
                    x = z;
                } else {
                    x = leaky_relu(z, slope);
                    coarse_acts.push(x.clone());
                }
            }
            o = Some(x);
        }
        Ok((
            DiscOutput { fine: u, coarse: o },
            DiscCache {
                fine,
                fine_acts,
                sigmoid,
                resize,
                coarse,
                coarse_acts,
            },
        ))
    }

    /// Backpropagates `dL/dU` and `dL/dO`.
    ///
    /// Parameter gradients are accumulated into `grads` (fine layers then
    /// coarse layers) when given; the feature gradient is returned when
    /// `need_input` is set.
    pub fn backward(
        &self,
        cache: &DiscCache,
        grad_fine: &Array2<f64>,
        grad_coarse: Option<&Array3<f64>>,
        mut grads: Option<&mut [ConvGrad]>,
        need_input: bool,
    ) -> Option<Array3<f64>> {
        let slope = self.spec.leaky_slope;
        let nf = self.fine.len();
        let shared = self.spec.shared_prefix_layers;

        let mut from_coarse = None;
        if let Some(go) = grad_coarse {
            assert!(!cache.coarse.is_empty(), "coarse gradient without a coarse forward pass");
            let mut g = go.clone();
            for i in (0..self.coarse.len()).rev() {
                if i + 1 < self.coarse.len() {
                    leaky_relu_backward(&cache.coarse_acts[i], &mut g, slope);
                }
                let acc = grads.as_mut().map(|gr| &mut gr[nf + i]);
                g = self.coarse[i]
                    .backward(&cache.coarse[i], &g, acc, true)
                    .expect("input gradient requested");
            }
            from_coarse = Some(g);
        }

        let du = grad_fine.clone().insert_axis(Axis(0));
        let mut g = cache.resize.backward(&du);
        ndarray::Zip::from(&mut g).and(&cache.sigmoid).for_each(|g, &s| *g *= s * (1.0 - s));
        for i in (0..nf).rev() {
            if i + 1 < nf {
                if i + 1 == shared {
                    if let Some(extra) = from_coarse.take() {
                        g += &extra;
                    }
                }
                leaky_relu_backward(&cache.fine_acts[i], &mut g, slope);
            }
            let acc = grads.as_mut().map(|gr| &mut gr[i]);
            match self.fine[i].backward(&cache.fine[i], &g, acc, i > 0 || need_input) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }
}
