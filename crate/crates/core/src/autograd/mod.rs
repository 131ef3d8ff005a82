//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the rule that maps an upstream gradient to its parents.
//! Nodes are appended in execution order, so the tape is always a valid
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! `backward` never mutates the tape: it returns a fresh [`Gradients`] map, so
//! running it twice on the same tape yields identical results. Call
//! [`Tape::clear`] (or drop the tape) between training steps.

mod gradcheck;
pub mod suite;

pub use gradcheck::{grad_check, GradCheckError, GradCheckReport};

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::layers::ActivationSpec;
use crate::tensor::{self, gemm, Element, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined node: receives the parent values and the
/// upstream gradient, returns one gradient per parent.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Conv2d { input: Var, weight: Var, stride: usize, padding: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Activation { input: Var, spec: ActivationSpec },
    GlobalAvgPool(Var),
    Linear { input: Var, weight: Var, bias: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients of a scalar loss with respect to the leaves that require them.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// `None` when the leaf does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::elementwise_add(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product; the gradient reaches both factors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::elementwise_mul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = tensor::conv2d(self.value(input), self.value(weight), stride, padding)?;
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(value, Op::Conv2d { input, weight, stride, padding }, rg))
    }

    /// Normalizes each channel of an NCHW tensor by its batch statistics,
    /// then applies `gamma * x_hat + beta`.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let x = self.value(input);
        let [n, c, h, w] = x.shape().nchw("batch_norm")?;
        self.check_channel_param(gamma, c)?;
        self.check_channel_param(beta, c)?;
        let count = n * h * w;
        if n < 2 && h * w < 2 {
            return Err(Error::InvalidArgument(
                "batch_norm: training mode needs more than one value per channel".into(),
            ));
        }
        let plane = h * w;
        let planes = |ch: usize| (0..n).map(move |b| (b * c + ch) * plane..(b * c + ch + 1) * plane);
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            mean[ch] = planes(ch).map(|r| lane_sum(&x.data()[r], |v| v)).sum::<f64>() / count as f64;
            // Centring on the T-rounded mean m; the `(m - mean)^2` term
            // corrects for the rounding exactly.
            let m = T::from_f64(mean[ch]);
            let ss: f64 = planes(ch).map(|r| lane_sum(&x.data()[r], |v| (v - m) * (v - m))).sum();
            var[ch] = (ss / count as f64 - (m.as_f64() - mean[ch]).powi(2)).max(0.0);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let value = self.normalize(input, gamma, beta, &mean, &inv_std);
        let rg = self.any_grad(&[input, gamma, beta]);
        let op = Op::BatchNorm { input, gamma, beta, mean: mean.clone(), inv_std, batch_stats: true };
        Ok((self.push(value, op, rg), BatchStats { mean, var, count }))
    }

    /// Normalizes with fixed (running) statistics: an affine map per channel.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let [_, c, _, _] = self.value(input).shape().nchw("batch_norm")?;
        self.check_channel_param(gamma, c)?;
        self.check_channel_param(beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::InvalidArgument(format!("batch_norm: running stats do not have {c} channels")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let value = self.normalize(input, gamma, beta, running_mean, &inv_std);
        let rg = self.any_grad(&[input, gamma, beta]);
        let op = Op::BatchNorm { input, gamma, beta, mean: running_mean.to_vec(), inv_std, batch_stats: false };
        Ok(self.push(value, op, rg))
    }

    fn check_channel_param(&self, p: Var, c: usize) -> Result<()> {
        let s = self.value(p).shape();
        if s.dims() != [c] {
            return Err(Error::ShapeMismatch { op: "batch_norm", left: s.clone(), right: Shape::new(vec![c])? });
        }
        Ok(())
    }

    fn normalize(&self, input: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> Tensor<T> {
        let x = self.value(input);
        let [_, c, h, w] = x.shape().nchw("batch_norm").expect("checked by caller");
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let scale: Vec<T> = (0..c).map(|ch| T::from_f64(g[ch].as_f64() * inv_std[ch])).collect();
        let shift: Vec<T> =
            (0..c).map(|ch| T::from_f64(b[ch].as_f64() - g[ch].as_f64() * inv_std[ch] * mean[ch])).collect();
        let mut out = x.clone();
        for (i, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
            let ch = i % c;
            for v in plane {
                *v = *v * scale[ch] + shift[ch];
            }
        }
        out
    }

    pub fn activation(&mut self, input: Var, spec: &ActivationSpec) -> Var {
        let value = crate::layers::activate(self.value(input), spec);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Activation { input, spec: spec.clone() }, rg)
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.shape().nchw("global_avg_pool")?;
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let data = x.data().chunks_exact(h * w).map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv).collect();
        let value = Tensor::from_vec(vec![n, c], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    /// `[N, F] x [C, F]^T + [C] -> [N, C]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, f, c) = match (x.dims(), wt.dims(), b.dims()) {
            (&[n, f], &[c, wf], &[cb]) if wf == f && cb == c => (n, f, c),
            _ => {
                return Err(Error::ShapeMismatch { op: "linear", left: x.shape().clone(), right: wt.shape().clone() });
            }
        };
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        gemm(n, f, c, x.data(), false, wt.data(), true, T::one(), &mut out);
        let value = Tensor::from_vec(vec![n, c], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, max-shifted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let &[n, c] = z.dims() else {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy: logits must be [N, C], got {}",
                z.shape()
            )));
        };
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!("softmax_cross_entropy: {} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0f64;
        for (row, &label) in z.data().chunks_exact(c).zip(labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            loss += total.ln() - (row[label].as_f64() - max);
            probs.extend(exps.iter().map(|e| T::from_f64(e / total)));
        }
        let value = Tensor::scalar(T::from_f64(loss / n as f64));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Records a node whose value and backward rule are supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Gradients that meet at a node are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().clone()));
        }
        let mut pending: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(Tensor::ones(root.value.dims().to_vec())?);
        let mut grads = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads.insert(Var(i), g);
                continue;
            }
            for (parent, pg) in self.local_grads(node, &g)? {
                match &mut pending[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    out.push((a, tensor::elementwise_mul(g, self.value(b))?));
                }
                if wants(b) {
                    out.push((b, tensor::elementwise_mul(g, self.value(a))?));
                }
            }
            &Op::Sum(a) => {
                if wants(a) {
                    out.push((a, Tensor::full(self.value(a).dims().to_vec(), g.item()?)?));
                }
            }
            &Op::Conv2d { input, weight, stride, padding } => {
                let (x, w) = (self.value(input), self.value(weight));
                if wants(input) {
                    out.push((input, tensor::conv2d_backward_input(g, x.shape(), w, stride, padding)?));
                }
                if wants(weight) {
                    out.push((weight, tensor::conv2d_backward_weight(g, x, w.shape(), stride, padding)?));
                }
            }
            Op::BatchNorm { input, gamma, beta, mean, inv_std, batch_stats } => {
                out.extend(self.batch_norm_backward(*input, *gamma, *beta, mean, inv_std, *batch_stats, g)?);
            }
            Op::Activation { input, spec } => {
                if wants(*input) {
                    let y = &node.value;
                    let mut data = vec![T::zero(); y.numel()];
                    spec.backward_from_output(y.data(), g.data(), &mut data);
                    out.push((*input, Tensor::from_parts(y.shape().clone(), data)));
                }
            }
            &Op::GlobalAvgPool(input) => {
                if wants(input) {
                    let x = self.value(input);
                    let [_, _, h, w] = x.shape().nchw("global_avg_pool")?;
                    let inv = T::from_f64(1.0 / (h * w) as f64);
                    let mut data = Vec::with_capacity(x.numel());
                    for &gv in g.data() {
                        data.extend(std::iter::repeat_n(gv * inv, h * w));
                    }
                    out.push((input, Tensor::from_parts(x.shape().clone(), data)));
                }
            }
            &Op::Linear { input, weight, bias } => {
                let (x, w) = (self.value(input), self.value(weight));
                let (n, f) = (x.dims()[0], x.dims()[1]);
                let c = w.dims()[0];
                if wants(input) {
                    let mut dx = vec![T::zero(); n * f];
                    gemm(n, c, f, g.data(), false, w.data(), false, T::zero(), &mut dx);
                    out.push((input, Tensor::from_parts(x.shape().clone(), dx)));
                }
                if wants(weight) {
                    let mut dw = vec![T::zero(); c * f];
                    gemm(c, n, f, g.data(), true, x.data(), false, T::zero(), &mut dw);
                    out.push((weight, Tensor::from_parts(w.shape().clone(), dw)));
                }
                if wants(bias) {
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks_exact(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    out.push((bias, Tensor::from_parts(self.value(bias).shape().clone(), db)));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if wants(*logits) {
                    let z = self.value(*logits);
                    let c = z.dims()[1];
                    let scale = g.item()? / T::from_f64(labels.len() as f64);
                    let mut d = probs.clone();
                    for (row, &label) in d.chunks_exact_mut(c).zip(labels) {
                        row[label] = row[label] - T::one();
                        for v in row.iter_mut() {
                            *v = *v * scale;
                        }
                    }
                    out.push((*logits, Tensor::from_parts(z.shape().clone(), d)));
                }
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = backward(&values, g);
                if grads.len() != inputs.len() {
                    return Err(Error::InvalidArgument("custom backward returned wrong gradient count".into()));
                }
                for (&v, gv) in inputs.iter().zip(grads) {
                    if wants(v) {
                        self.value(v).expect_same_shape(&gv, "custom backward")?;
                        out.push((v, gv));
                    }
                }
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
        g: &Tensor<T>,
    ) -> Result<Vec<(Var, Tensor<T>)>> {
        let x = self.value(input);
        let [n, c, h, w] = x.shape().nchw("batch_norm")?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let gam = self.value(gamma).data();
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for (i, (xp, gp)) in x.data().chunks_exact(plane).zip(g.data().chunks_exact(plane)).enumerate() {
            let ch = i % c;
            let m = T::from_f64(mean[ch]);
            let (sg, sgx) = lane_dot(xp, gp, m);
            dbeta[ch] += sg;
            dgamma[ch] += sgx * inv_std[ch];
        }
        let mut out = Vec::new();
        if self.nodes[input.0].requires_grad {
            let mut dx = vec![T::zero(); x.numel()];
            let chunks = x.data().chunks_exact(plane).zip(g.data().chunks_exact(plane));
            for (i, ((xp, gp), dp)) in chunks.zip(dx.chunks_exact_mut(plane)).enumerate() {
                let ch = i % c;
                let k = T::from_f64(gam[ch].as_f64() * inv_std[ch]);
                if batch_stats {
                    let (m, is) = (T::from_f64(mean[ch]), T::from_f64(inv_std[ch]));
                    let a = T::from_f64(dbeta[ch] / count);
                    let b = T::from_f64(dgamma[ch] / count);
                    for ((d, &xv), &gv) in dp.iter_mut().zip(xp).zip(gp) {
                        *d = k * (gv - a - (xv - m) * is * b);
                    }
                } else {
                    for (d, &gv) in dp.iter_mut().zip(gp) {
                        *d = k * gv;
                    }
                }
            }
            out.push((input, Tensor::from_parts(x.shape().clone(), dx)));
        }
        if self.nodes[gamma.0].requires_grad {
            out.push((gamma, Tensor::from_vec(vec![c], dgamma.into_iter().map(T::from_f64).collect())?));
        }
        if self.nodes[beta.0].requires_grad {
            out.push((beta, Tensor::from_vec(vec![c], dbeta.into_iter().map(T::from_f64).collect())?));
        }
        Ok(out)
    }
}

const LANES: usize = 8;

/// `sum f(x)` with independent partial sums, so the loop vectorizes; the
/// lanes are combined in f64.
#[inline]
fn lane_sum<T: Element>(xs: &[T], f: impl Fn(T) -> T) -> f64 {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for ch in chunks {
        for l in 0..LANES {
            acc[l] = acc[l] + f(ch[l]);
        }
    }
    acc.iter().map(|v| v.as_f64()).sum::<f64>() + tail.iter().map(|&v| f(v).as_f64()).sum::<f64>()
}

/// `(sum g, sum g * (x - m))` over one plane.
#[inline]
fn lane_dot<T: Element>(xs: &[T], gs: &[T], m: T) -> (f64, f64) {
    let mut sg = [T::zero(); LANES];
    let mut sgx = [T::zero(); LANES];
    let (xc, gc) = (xs.chunks_exact(LANES), gs.chunks_exact(LANES));
    let (xt, gt) = (xc.remainder(), gc.remainder());
    for (x, g) in xc.zip(gc) {
        for l in 0..LANES {
            sg[l] = sg[l] + g[l];
            sgx[l] = sgx[l] + g[l] * (x[l] - m);
        }
    }
    let mut a: f64 = sg.iter().map(|v| v.as_f64()).sum();
    let mut b: f64 = sgx.iter().map(|v| v.as_f64()).sum();
    for (&x, &g) in xt.iter().zip(gt) {
        a += g.as_f64();
        b += g.as_f64() * (x - m).as_f64();
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_uniform;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 5.0]).unwrap(), true);
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_accumulates_over_fan_out() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![2]).unwrap(), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(seeded_uniform(vec![4], -1.0, 1.0, 3).unwrap(), true);
        let y = tape.leaf(seeded_uniform(vec![4], -1.0, 1.0, 4).unwrap(), true);
        let p = tape.mul(x, y).unwrap();
        let l = tape.sum(p);
        let first = tape.backward(l).unwrap();
        let second = tape.backward(l).unwrap();
        assert_eq!(first.get(x), second.get(x));
        assert_eq!(first.get(y), second.get(y));
    }

    #[test]
    fn multiply_routes_gradient_to_both_factors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(vec![2], vec![2.0, 3.0]).unwrap(), true);
        let b = tape.leaf(Tensor::from_vec(vec![2], vec![5.0, 7.0]).unwrap(), true);
        let p = tape.mul(a, b).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(vec![2]).unwrap(), false);
        let b = tape.leaf(Tensor::ones(vec![2]).unwrap(), true);
        let p = tape.mul(a, b).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn softmax_cross_entropy_uniform_and_labels() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(vec![2, 10]).unwrap(), true);
        let l = tape.softmax_cross_entropy(z, &[3, 9]).unwrap();
        assert!((tape.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(tape.softmax_cross_entropy(z, &[3, 10]).is_err());

        let mut margin = Tensor::<f64>::zeros(vec![1, 10]).unwrap();
        margin.data_mut()[4] = 1e4;
        let z = tape.leaf(margin, false);
        let l = tape.softmax_cross_entropy(z, &[4]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-12);
    }

    #[test]
    fn batch_norm_rejects_single_value_per_channel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![1, 2, 1, 1]).unwrap(), true);
        let g = tape.leaf(Tensor::ones(vec![2]).unwrap(), true);
        let b = tape.leaf(Tensor::zeros(vec![2]).unwrap(), true);
        assert!(tape.batch_norm_train(x, g, b, 1e-5).is_err());
    }
}
