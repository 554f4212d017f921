//! Layer primitives with explicit forward caches and backward passes.
//!
//! Feature maps are `C × H × W` arrays in standard layout. Convolutions go
//! through im2col so both passes are single matrix products.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `out_channels × (in_channels · kernel²)`, rows laid out as `(ci, ky, kx)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_height: usize,
    in_width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: Array2::zeros(conv.weight.raw_dim()),
            bias: Array1::zeros(conv.bias.raw_dim()),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|&v| v == 0.0)
    }
}

impl Conv2d {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero bias, "same" padding.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let weight = Array2::from_shape_simple_fn((out_channels, fan_in), || normal.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn zero_parameters(&mut self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let out = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (out(height), out(width))
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, input: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = input.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(h, w);
        let cols = im2col(input, self.kernel, self.stride, self.padding, oh, ow);
        let mut out = self.weight.dot(&cols);
        for (mut row, &b) in out.outer_iter_mut().zip(self.bias.iter()) {
            row += b;
        }
        let out = out
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("conv output shape");
        (
            out,
            ConvCache {
                cols,
                in_height: h,
                in_width: w,
            },
        )
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns
    /// the input gradient when `need_input` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &Array3<f64>,
        grad: Option<&mut ConvGrad>,
        need_input: bool,
    ) -> Option<Array3<f64>> {
        let (oc, oh, ow) = grad_out.dim();
        let g = grad_out
            .view()
            .into_shape_with_order((oc, oh * ow))
            .expect("standard layout gradient");
        if let Some(acc) = grad {
            acc.weight += &g.dot(&cache.cols.t());
            acc.bias += &g.sum_axis(Axis(1));
        }
        need_input.then(|| {
            let dcols = self.weight.t().dot(&g);
            col2im(
                dcols.view(),
                self.in_channels,
                cache.in_height,
                cache.in_width,
                self.kernel,
                self.stride,
                self.padding,
                oh,
                ow,
            )
        })
    }
}

fn im2col(input: &Array3<f64>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let src = input.as_standard_layout();
    let src = src.as_slice().expect("contiguous");
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    let dst = cols.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out_row = &mut dst[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out_seg = &mut out_row[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out_seg.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = in_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("contiguous");
    let mut out = Array3::<f64>::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col_row = &src[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += col_row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn leaky_relu(mut x: Array3<f64>, slope: f64) -> Array3<f64> {
    x.mapv_inplace(|v| if v > 0.0 { v } else { slope * v });
    x
}

/// Backward through a leaky ReLU given its output (sign is preserved for `slope > 0`).
pub fn leaky_relu_backward(output: &Array3<f64>, grad: &mut Array3<f64>, slope: f64) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g *= slope;
        }
    });
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels(logits: &Array3<f64>) -> Array3<f64> {
    let max = logits.fold_axis(Axis(0), f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = logits - &max.insert_axis(Axis(0));
    out.mapv_inplace(f64::exp);
    let sum = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    out /= &sum;
    out
}

/// `dL/dz` from `dL/dp` for `p = softmax(z)` over channels.
pub fn softmax_channels_backward(probs: &Array3<f64>, grad_probs: &Array3<f64>) -> Array3<f64> {
    let dot = (probs * grad_probs).sum_axis(Axis(0)).insert_axis(Axis(0));
    probs * &(grad_probs - &dot)
}

/// One axis of a bilinear resize: each output index blends two input indices.
#[derive(Debug, Clone, PartialEq)]
struct AxisTaps {
    taps: Vec<(usize, usize, f64)>,
}

impl AxisTaps {
    /// Half-pixel-centre mapping (`align_corners = false`), clamped at the borders.
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect();
        Self { taps }
    }
}

/// Bilinear resize of every channel to a fixed output size.
#[derive(Debug, Clone, PartialEq)]
pub struct Resize {
    in_height: usize,
    in_width: usize,
    rows: AxisTaps,
    cols: AxisTaps,
}

impl Resize {
    pub fn new(in_height: usize, in_width: usize, out_height: usize, out_width: usize) -> Self {
        Self {
            in_height,
            in_width,
            rows: AxisTaps::new(in_height, out_height),
            cols: AxisTaps::new(in_width, out_width),
        }
    }

    pub fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = input.dim();
        assert_eq!((h, w), (self.in_height, self.in_width), "resize input size");
        let (oh, ow) = (self.rows.taps.len(), self.cols.taps.len());
        // rows first, then columns
        let mut tmp = Array3::<f64>::zeros((c, oh, w));
        for (oy, &(y0, y1, t)) in self.rows.taps.iter().enumerate() {
            let a = input.slice(s![.., y0, ..]);
            let b = input.slice(s![.., y1, ..]);
            let mut dst = tmp.slice_mut(s![.., oy, ..]);
            ndarray::Zip::from(&mut dst)
                .and(&a)
                .and(&b)
                .for_each(|d, &a, &b| *d = (1.0 - t) * a + t * b);
        }
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        for (ox, &(x0, x1, t)) in self.cols.taps.iter().enumerate() {
            let a = tmp.slice(s![.., .., x0]);
            let b = tmp.slice(s![.., .., x1]);
            let mut dst = out.slice_mut(s![.., .., ox]);
            ndarray::Zip::from(&mut dst)
                .and(&a)
                .and(&b)
                .for_each(|d, &a, &b| *d = (1.0 - t) * a + t * b);
        }
        out
    }

    pub fn backward(&self, grad_out: &Array3<f64>) -> Array3<f64> {
        let (c, oh, _) = grad_out.dim();
        let mut tmp = Array3::<f64>::zeros((c, oh, self.in_width));
        for (ox, &(x0, x1, t)) in self.cols.taps.iter().enumerate() {
            let g = grad_out.slice(s![.., .., ox]);
            tmp.slice_mut(s![.., .., x0]).scaled_add(1.0 - t, &g);
            tmp.slice_mut(s![.., .., x1]).scaled_add(t, &g);
        }
        let mut out = Array3::<f64>::zeros((c, self.in_height, self.in_width));
        for (oy, &(y0, y1, t)) in self.rows.taps.iter().enumerate() {
            let g = tmp.slice(s![.., oy, ..]);
            out.slice_mut(s![.., y0, ..]).scaled_add(1.0 - t, &g);
            out.slice_mut(s![.., y1, ..]).scaled_add(t, &g);
        }
        out
    }
}
