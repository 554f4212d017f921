//! SGD with momentum and Adam, with PyTorch update semantics.

use ndarray::{Array1, Array2, Zip};

use crate::nets::{Conv2d, ConvGrad, Tensor};

/// Per-layer optimizer slots shaped like the layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Slots {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Slots {
    fn zeros_like(layer: &Conv2d) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }
}

/// `buf = μ·buf + (g + λ·p)`, `p -= lr·buf`; the first step seeds `buf` with the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Slots>,
    started: bool,
}

impl Sgd {
    pub fn new(layers: &[&Conv2d], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: layers.iter().map(|l| Slots::zeros_like(l)).collect(),
            started: false,
        }
    }

    pub fn step(&mut self, layers: &mut [&mut Conv2d], grads: &[ConvGrad], lr: f64) {
        let (mu, wd, first) = (self.momentum, self.weight_decay, !self.started);
        for ((layer, g), v) in layers.iter_mut().zip(grads).zip(&mut self.velocity) {
            let update = |p: &mut f64, &g: &f64, b: &mut f64| {
                let d = g + wd * *p;
                *b = if first { d } else { mu * *b + d };
                *p -= lr * *b;
            };
            Zip::from(&mut layer.weight).and(&g.weight).and(&mut v.weight).for_each(update);
            Zip::from(&mut layer.bias).and(&g.bias).and(&mut v.bias).for_each(update);
        }
        self.started = true;
    }

    pub(crate) fn export(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, v) in self.velocity.iter().enumerate() {
            out.push((format!("{prefix}.{i}.velocity.weight"), Tensor::from_array2(&v.weight)));
            out.push((format!("{prefix}.{i}.velocity.bias"), Tensor::from_array1(&v.bias)));
        }
        out.push((format!("{prefix}.started"), scalar(f64::from(u8::from(self.started)))));
    }

    pub(crate) fn import(&mut self, prefix: &str, get: &dyn Fn(&str) -> Option<Tensor>) -> Option<()> {
        for (i, v) in self.velocity.iter_mut().enumerate() {
            restore2(&mut v.weight, get(&format!("{prefix}.{i}.velocity.weight"))?)?;
            restore1(&mut v.bias, get(&format!("{prefix}.{i}.velocity.bias"))?)?;
        }
        self.started = get(&format!("{prefix}.started"))?.data.first()? != &0.0;
        Some(())
    }
}

/// Adam without weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<Slots>,
    second: Vec<Slots>,
    steps: u64,
}

impl Adam {
    pub const EPSILON: f64 = 1e-8;

    pub fn new(layers: &[&Conv2d], beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon: Self::EPSILON,
            first: layers.iter().map(|l| Slots::zeros_like(l)).collect(),
            second: layers.iter().map(|l| Slots::zeros_like(l)).collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, layers: &mut [&mut Conv2d], grads: &[ConvGrad], lr: f64) {
        self.steps += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        for (((layer, g), m), v) in layers.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let update = |p: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(update);
            Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(update);
        }
    }

    pub(crate) fn export(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            out.push((format!("{prefix}.{i}.m.weight"), Tensor::from_array2(&m.weight)));
            out.push((format!("{prefix}.{i}.m.bias"), Tensor::from_array1(&m.bias)));
            out.push((format!("{prefix}.{i}.v.weight"), Tensor::from_array2(&v.weight)));
            out.push((format!("{prefix}.{i}.v.bias"), Tensor::from_array1(&v.bias)));
        }
        out.push((format!("{prefix}.steps"), scalar(self.steps as f64)));
    }

    pub(crate) fn import(&mut self, prefix: &str, get: &dyn Fn(&str) -> Option<Tensor>) -> Option<()> {
        for (i, (m, v)) in self.first.iter_mut().zip(&mut self.second).enumerate() {
            restore2(&mut m.weight, get(&format!("{prefix}.{i}.m.weight"))?)?;
            restore1(&mut m.bias, get(&format!("{prefix}.{i}.m.bias"))?)?;
            restore2(&mut v.weight, get(&format!("{prefix}.{i}.v.weight"))?)?;
            restore1(&mut v.bias, get(&format!("{prefix}.{i}.v.bias"))?)?;
        }
        self.steps = *get(&format!("{prefix}.steps"))?.data.first()? as u64;
        Some(())
    }
}

fn scalar(v: f64) -> Tensor {
    Tensor {
        shape: vec![1],
        data: vec![v],
    }
}

fn restore2(dst: &mut Array2<f64>, t: Tensor) -> Option<()> {
    if t.shape != dst.shape() {
        return None;
    }
    dst.assign(&Array2::from_shape_vec(dst.raw_dim(), t.data).ok()?);
    Some(())
}

fn restore1(dst: &mut Array1<f64>, t: Tensor) -> Option<()> {
    if t.shape != dst.shape() {
        return None;
    }
    dst.assign(&Array1::from(t.data));
    Some(())
}

/// `lr·(1 − step/total)^power`.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total as f64).max(0.0).powf(power)
}
