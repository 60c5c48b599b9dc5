//! Parameterized building blocks. Every layer owns its tensors and emits
//! graph nodes on demand; parameter names are fully qualified.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{AutodiffError, Graph, NormMode, Parameterized, Scalar, Tensor, Var};

use super::Mode;

pub(crate) const BN_EPS: f64 = 1e-5;
/// Running statistics keep this fraction of their old value per update.
pub(crate) const BN_MOMENTUM: f64 = 0.9;

fn leaf<T: Scalar>(g: &mut Graph<T>, name: &str, t: &Tensor<T>, mode: Mode) -> Result<Var, AutodiffError> {
    if mode.trainable {
        g.param(name, t.clone())
    } else {
        g.input(t.clone())
    }
}

/// Normal(0, std) truncated to two standard deviations.
fn truncated_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

fn he_uniform<R: Rng>(rng: &mut R, n: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

pub(crate) const CONV_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let w = truncated_normal(rng, c_out * c_in * k * k, CONV_INIT_STD);
        Self {
            name: name.to_string(),
            weight: Tensor::from_f64(&[c_out, c_in, k, k], &w).expect("shape"),
            bias: Tensor::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var, AutodiffError> {
        let w = leaf(g, &format!("{}.weight", self.name), &self.weight, mode)?;
        let b = leaf(g, &format!("{}.bias", self.name), &self.bias, mode)?;
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.weight", self.name), &self.weight);
        f(&format!("{}.bias", self.name), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

/// Transposed convolution; weight layout `[C_in, C_out, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let w = truncated_normal(rng, c_in * c_out * k * k, CONV_INIT_STD);
        Self {
            name: name.to_string(),
            weight: Tensor::from_f64(&[c_in, c_out, k, k], &w).expect("shape"),
            bias: Tensor::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var, AutodiffError> {
        let w = leaf(g, &format!("{}.weight", self.name), &self.weight, mode)?;
        let b = leaf(g, &format!("{}.bias", self.name), &self.bias, mode)?;
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.weight", self.name), &self.weight);
        f(&format!("{}.bias", self.name), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

/// Fully connected layer, weight `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self::with_gain(name, d_in, d_out, 1.0, rng)
    }

    pub fn with_gain<R: Rng>(name: &str, d_in: usize, d_out: usize, gain: f64, rng: &mut R) -> Self {
        let w = he_uniform(rng, d_out * d_in, d_in, gain);
        Self {
            name: name.to_string(),
            weight: Tensor::from_f64(&[d_out, d_in], &w).expect("shape"),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var, AutodiffError> {
        let w = leaf(g, &format!("{}.weight", self.name), &self.weight, mode)?;
        let b = leaf(g, &format!("{}.bias", self.name), &self.bias, mode)?;
        g.linear(x, w, Some(b))
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.weight", self.name), &self.weight);
        f(&format!("{}.bias", self.name), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var, AutodiffError> {
        let gamma = leaf(g, &format!("{}.gamma", self.name), &self.gamma, mode)?;
        let beta = leaf(g, &format!("{}.beta", self.name), &self.beta, mode)?;
        let norm = if mode.batch_stats {
            NormMode::Train { name: &self.name }
        } else {
            NormMode::Eval {
                mean: &self.running_mean,
                var: &self.running_var,
            }
        };
        g.batch_norm(x, gamma, beta, BN_EPS, norm)
    }

    /// Folds recorded batch statistics into the running averages.
    pub fn absorb(&mut self, mean: &[T], var: &[T]) {
        let m = T::lit(BN_MOMENTUM);
        let k = T::one() - m;
        for (r, b) in self.running_mean.iter_mut().zip(mean) {
            *r = m * *r + k * *b;
        }
        for (r, b) in self.running_var.iter_mut().zip(var) {
            *r = m * *r + k * *b;
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.gamma", self.name), &self.gamma);
        f(&format!("{}.beta", self.name), &self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
    }
}

/// Uniform access to parameters and batch-norm buffers of composite nets.
pub trait Module<T: Scalar>: Parameterized<T> {
    fn norms(&self) -> Vec<&BatchNorm<T>>;
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>>;
}

/// A single layer inside a sequential stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    ConvT(ConvTranspose2d<T>),
    Dense(Dense<T>),
    Norm(BatchNorm<T>),
    Relu,
    LeakyRelu(f64),
    MaxPool,
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var, AutodiffError> {
        match self {
            Layer::Conv(l) => l.forward(g, x, mode),
            Layer::ConvT(l) => l.forward(g, x, mode),
            Layer::Dense(l) => l.forward(g, x, mode),
            Layer::Norm(l) => l.forward(g, x, mode),
            Layer::Relu => g.relu(x),
            Layer::LeakyRelu(s) => g.leaky_relu(x, *s),
            Layer::MaxPool => g.max_pool2d(x),
        }
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: Layer<T>) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn forward(&self, g: &mut Graph<T>, mut x: Var, mode: Mode) -> Result<Var, AutodiffError> {
        for l in &self.layers {
            x = l.forward(g, x, mode)?;
        }
        Ok(x)
    }
}

impl<T: Scalar> Parameterized<T> for Sequential<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for l in &self.layers {
            match l {
                Layer::Conv(c) => c.visit(f),
                Layer::ConvT(c) => c.visit(f),
                Layer::Dense(d) => d.visit(f),
                Layer::Norm(n) => n.visit(f),
                _ => {}
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => c.visit_mut(f),
                Layer::ConvT(c) => c.visit_mut(f),
                Layer::Dense(d) => d.visit_mut(f),
                Layer::Norm(n) => n.visit_mut(f),
                _ => {}
            }
        }
    }

}

impl<T: Scalar> Module<T> for Sequential<T> {
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Norm(n) => Some(n),
                _ => None,
            })
            .collect()
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Norm(n) => Some(n),
                _ => None,
            })
            .collect()
    }
}

fn cast_tensor<T: Scalar, U: Scalar>(t: &Tensor<T>) -> Tensor<U> {
    t.cast()
}

impl<T: Scalar> Layer<T> {
    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect::<Vec<U>>();
        match self {
            Layer::Conv(c) => Layer::Conv(Conv2d {
                name: c.name.clone(),
                weight: cast_tensor(&c.weight),
                bias: cast_tensor(&c.bias),
                stride: c.stride,
                pad: c.pad,
            }),
            Layer::ConvT(c) => Layer::ConvT(ConvTranspose2d {
                name: c.name.clone(),
                weight: cast_tensor(&c.weight),
                bias: cast_tensor(&c.bias),
                stride: c.stride,
                pad: c.pad,
            }),
            Layer::Dense(d) => Layer::Dense(Dense {
                name: d.name.clone(),
                weight: cast_tensor(&d.weight),
                bias: cast_tensor(&d.bias),
            }),
            Layer::Norm(n) => Layer::Norm(BatchNorm {
                name: n.name.clone(),
                gamma: cast_tensor(&n.gamma),
                beta: cast_tensor(&n.beta),
                running_mean: cv(&n.running_mean),
                running_var: cv(&n.running_var),
            }),
            Layer::Relu => Layer::Relu,
            Layer::LeakyRelu(s) => Layer::LeakyRelu(*s),
            Layer::MaxPool => Layer::MaxPool,
        }
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }
}
