//! Trainable layers. Each layer owns its [`Param`]s; before a forward pass
//! the parameters are bound to leaves of the current [`Tape`] and the layer
//! records its computation on that tape.

mod activation;

pub use activation::{activate, ActivationSpec, ValueRange};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor plus its binding to the current tape.
#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub value: Tensor<T>,
    /// Whether weight decay applies (conv and linear weights only).
    pub decay: bool,
    var: Option<Var>,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>, decay: bool) -> Self {
        Param { value, decay, var: None }
    }

    pub fn bind(&mut self, tape: &mut Tape<T>, requires_grad: bool) -> Var {
        let v = tape.leaf(self.value.clone(), requires_grad);
        self.var = Some(v);
        v
    }

    /// Binds to an existing node, e.g. a leaf created by a gradient checker.
    pub fn bind_to(&mut self, var: Var) {
        self.var = Some(var);
    }

    pub fn var(&self) -> Result<Var> {
        self.var.ok_or_else(|| Error::InvalidArgument("parameter used before being bound to a tape".into()))
    }
}

/// Whether a named tensor is trained or only tracked (batch-norm running stats).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Param,
    Buffer,
}

/// Named access to every tensor a layer owns, in a fixed order. Names are
/// dotted paths such as `stage1.block0.conv1.weight`.
pub trait Module<T: Element> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot, &'a Tensor<T>)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn named_tensors(&self) -> Vec<(String, Slot, &Tensor<T>)> {
        let mut out = Vec::new();
        self.tensors("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.buffers_mut("", &mut out);
        out
    }

    /// Total trainable scalars.
    fn param_count(&self) -> usize {
        self.named_tensors().iter().filter(|(_, s, _)| *s == Slot::Param).map(|(_, _, t)| t.numel()).sum()
    }

    fn bind_params(&mut self, tape: &mut Tape<T>, requires_grad: bool) {
        for (_, p) in self.named_params_mut() {
            p.bind(tape, requires_grad);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// 3x3 convolution, padding 1, no bias.
#[derive(Clone, Debug)]
pub struct ConvLayer<T: Element> {
    pub weight: Param<T>,
    pub stride: usize,
}

impl<T: Element> ConvLayer<T> {
    pub const KERNEL: usize = 3;
    pub const PADDING: usize = 1;

    /// He (fan-in) normal initialization: std = sqrt(2 / (in_channels * 9)).
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, seed: u64) -> Result<Self> {
        if stride == 0 || stride > 2 {
            return Err(Error::InvalidArgument(format!("conv stride must be 1 or 2, got {stride}")));
        }
        let fan_in = in_channels * Self::KERNEL * Self::KERNEL;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = tensor::seeded_normal(vec![out_channels, in_channels, 3, 3], 0.0, std, seed)?;
        Ok(ConvLayer { weight: Param::new(w, true), stride })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight.var()?, self.stride, Self::PADDING)
    }

    /// Tape-free evaluation.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::conv2d(x, &self.weight.value, self.stride, Self::PADDING)
    }
}

impl<T: Element> Module<T> for ConvLayer<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot, &'a Tensor<T>)>) {
        out.push((join(prefix, "weight"), Slot::Param, &self.weight.value));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
    }
    fn buffers_mut<'a>(&'a mut self, _: &str, _: &mut Vec<(String, &'a mut Tensor<T>)>) {}
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormLayer<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Element> BatchNormLayer<T> {
    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormLayer {
            gamma: Param::new(Tensor::ones(vec![channels])?, false),
            beta: Param::new(Tensor::zeros(vec![channels])?, false),
            running_mean: Tensor::zeros(vec![channels])?,
            running_var: Tensor::ones(vec![channels])?,
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// estimates (variance with the unbiased correction); eval mode uses the
    /// running estimates.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let (g, b) = (self.gamma.var()?, self.beta.var()?);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b, self.epsilon)?;
                let m = self.momentum;
                let correction = stats.count as f64 / (stats.count as f64 - 1.0);
                for (r, &mu) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = T::from_f64((1.0 - m) * r.as_f64() + m * mu);
                }
                for (r, &var) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = T::from_f64((1.0 - m) * r.as_f64() + m * var * correction);
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean: Vec<f64> = self.running_mean.data().iter().map(|v| v.as_f64()).collect();
                let var: Vec<f64> = self.running_var.data().iter().map(|v| v.as_f64()).collect();
                tape.batch_norm_eval(x, g, b, &mean, &var, self.epsilon)
            }
        }
    }

    /// Tape-free evaluation; still updates running statistics in train mode.
    pub fn apply(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        self.gamma.bind(&mut tape, false);
        self.beta.bind(&mut tape, false);
        let y = self.forward(&mut tape, xv, mode)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Element> Module<T> for BatchNormLayer<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot, &'a Tensor<T>)>) {
        out.push((join(prefix, "gamma"), Slot::Param, &self.gamma.value));
        out.push((join(prefix, "beta"), Slot::Param, &self.beta.value));
        out.push((join(prefix, "running_mean"), Slot::Buffer, &self.running_mean));
        out.push((join(prefix, "running_var"), Slot::Buffer, &self.running_var));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

/// Fully connected classifier: `[N, features] -> [N, classes]`.
#[derive(Clone, Debug)]
pub struct LinearLayer<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> LinearLayer<T> {
    /// Weight uniform in `±1/sqrt(features)`, bias zero.
    pub fn new(features: usize, classes: usize, seed: u64) -> Result<Self> {
        let bound = 1.0 / (features as f64).sqrt();
        Ok(LinearLayer {
            weight: Param::new(tensor::seeded_uniform(vec![classes, features], -bound, bound, seed)?, true),
            bias: Param::new(Tensor::zeros(vec![classes])?, false),
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.weight.var()?, self.bias.var()?)
    }
}

impl<T: Element> Module<T> for LinearLayer<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot, &'a Tensor<T>)>) {
        out.push((join(prefix, "weight"), Slot::Param, &self.weight.value));
        out.push((join(prefix, "bias"), Slot::Param, &self.bias.value));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
    fn buffers_mut<'a>(&'a mut self, _: &str, _: &mut Vec<(String, &'a mut Tensor<T>)>) {}
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let y = tape.global_avg_pool(v)?;
    Ok(tape.value(y).clone())
}

/// Batch-mean cross-entropy of `logits` `[N, classes]` against class indices.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let v = tape.leaf(logits.clone(), false);
    let l = tape.softmax_cross_entropy(v, labels)?;
    tape.value(l).item()
}
