//! Quotient and residual blocks, plus the network head.
//!
//! A quotient block multiplies its input by a learned, bounded quotient map:
//! `out = q * s` with `q = act(bn2(conv2(inner(bn1(conv1(x))))))`. With
//! zero-initialized transforms `q = act(0) = 1`, so the block starts as the
//! identity for inputs of either sign. The residual block adds instead and
//! applies relu after the merge.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{join, ActivationSpec, BatchNormLayer, ConvLayer, Mode, Module, Param, Slot};
use crate::tensor::{derive_seed, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Quotient,
    Residual,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Quotient => "quotient",
            BlockKind::Residual => "residual",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quotient" => Ok(BlockKind::Quotient),
            "residual" => Ok(BlockKind::Residual),
            _ => Err(Error::InvalidArgument(format!("unknown block kind `{s}` (expected quotient or residual)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Last activation of the quotient branch; unused by residual blocks.
    pub quotient_activation: ActivationSpec,
    /// Activation between the two convolutions.
    pub inner_activation: ActivationSpec,
    /// Activation after the stride-2 shortcut's batch norm. `None` leaves
    /// the shortcut linear (the residual baseline).
    pub shortcut_activation: Option<ActivationSpec>,
    pub batch_norm: bool,
}

impl BlockSpec {
    /// Quotient block using `sigmoid(x - ln(alpha - 1)) * alpha` on the
    /// branch and on the channel-increasing shortcut.
    pub fn quotient(in_channels: usize, out_channels: usize, stride: usize, alpha: f64) -> Result<Self> {
        let act = ActivationSpec::quotient(alpha)?;
        Ok(BlockSpec {
            kind: BlockKind::Quotient,
            in_channels,
            out_channels,
            stride,
            quotient_activation: act.clone(),
            inner_activation: ActivationSpec::Relu,
            shortcut_activation: Some(act),
            batch_norm: true,
        })
    }

    pub fn residual(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Residual,
            in_channels,
            out_channels,
            stride,
            quotient_activation: ActivationSpec::Relu,
            inner_activation: ActivationSpec::Relu,
            shortcut_activation: None,
            batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("block spec: {m}")));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        match self.stride {
            1 if self.out_channels != self.in_channels => {
                bad(format!("stride 1 keeps the width, got {} -> {}", self.in_channels, self.out_channels))
            }
            2 if self.out_channels != 2 * self.in_channels => {
                bad(format!("stride 2 doubles the width, got {} -> {}", self.in_channels, self.out_channels))
            }
            1 | 2 => {
                self.quotient_activation.validate()?;
                self.inner_activation.validate()?;
                if let Some(a) = &self.shortcut_activation {
                    a.validate()?;
                }
                Ok(())
            }
            s => bad(format!("stride must be 1 or 2, got {s}")),
        }
    }
}

/// Channel-increasing shortcut: 3x3 stride-2 convolution and batch norm.
#[derive(Clone, Debug)]
pub struct Shortcut<T: Element> {
    pub conv: ConvLayer<T>,
    pub bn: Option<BatchNormLayer<T>>,
}

#[derive(Clone, Debug)]
pub struct Block<T: Element> {
    pub spec: BlockSpec,
    pub conv1: ConvLayer<T>,
    pub bn1: Option<BatchNormLayer<T>>,
    pub conv2: ConvLayer<T>,
    pub bn2: Option<BatchNormLayer<T>>,
    pub shortcut: Option<Shortcut<T>>,
}

/// Result of a block on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    /// The branch map before the merge: `q` for quotient blocks, `r` for residual ones.
    pub branch: Var,
}

/// Builds a block with He-normal convolution weights, `gamma = 1` and `beta = 0`.
pub fn make_block<T: Element>(spec: BlockSpec, seed: u64) -> Result<Block<T>> {
    spec.validate()?;
    let bn =
        |c: usize| -> Result<Option<BatchNormLayer<T>>> { spec.batch_norm.then(|| BatchNormLayer::new(c)).transpose() };
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let shortcut = if spec.stride == 2 {
        Some(Shortcut { conv: ConvLayer::new(cin, cout, 2, derive_seed(seed, 3))?, bn: bn(cout)? })
    } else {
        None
    };
    Ok(Block {
        conv1: ConvLayer::new(cin, cout, spec.stride, derive_seed(seed, 1))?,
        bn1: bn(cout)?,
        conv2: ConvLayer::new(cout, cout, 1, derive_seed(seed, 2))?,
        bn2: bn(cout)?,
        shortcut,
        spec,
    })
}

fn norm<T: Element>(bn: &mut Option<BatchNormLayer<T>>, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
    match bn {
        Some(layer) => layer.forward(tape, x, mode),
        None => Ok(x),
    }
}

fn check_channels<T: Element>(tape: &Tape<T>, x: Var, expected: usize, what: &str) -> Result<()> {
    let [_, c, _, _] = tape.value(x).shape().nchw(what)?;
    if c != expected {
        return Err(Error::InvalidArgument(format!("{what}: expected {expected} input channels, got {c}")));
    }
    Ok(())
}

impl<T: Element> Block<T> {
    /// Records the block on `tape`; parameters must already be bound.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<BlockOutput> {
        check_channels(tape, x, self.spec.in_channels, "block")?;
        let h = self.conv1.forward(tape, x)?;
        let h = norm(&mut self.bn1, tape, h, mode)?;
        let h = tape.activation(h, &self.spec.inner_activation);
        let h = self.conv2.forward(tape, h)?;
        let h = norm(&mut self.bn2, tape, h, mode)?;

        let s = match &mut self.shortcut {
            None => x,
            Some(sc) => {
                let s = sc.conv.forward(tape, x)?;
                let s = norm(&mut sc.bn, tape, s, mode)?;
                match &self.spec.shortcut_activation {
                    Some(act) => tape.activation(s, act),
                    None => s,
                }
            }
        };

        match self.spec.kind {
            BlockKind::Quotient => {
                let q = tape.activation(h, &self.spec.quotient_activation);
                Ok(BlockOutput { out: tape.mul(q, s)?, branch: q })
            }
            BlockKind::Residual => {
                let sum = tape.add(h, s)?;
                Ok(BlockOutput { out: tape.activation(sum, &ActivationSpec::Relu), branch: h })
            }
        }
    }

    /// Tape-free evaluation returning `(output, branch map)`.
    pub fn apply(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        self.bind_params(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let o = self.forward(&mut tape, xv, mode)?;
        Ok((tape.value(o.out).clone(), tape.value(o.branch).clone()))
    }

    /// Sets every convolution weight and batch-norm `beta` to zero.
    pub fn zero_transform(&mut self) {
        for (name, p) in self.named_params_mut() {
            if name.ends_with("weight") || name.ends_with("beta") {
                p.value.data_mut().fill(T::zero());
            }
        }
    }
}

impl<T: Element> Module<T> for Block<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot, &'a Tensor<T>)>) {
        self.conv1.tensors(&join(prefix, "conv1"), out);
        if let Some(bn) = &self.bn1 {
            bn.tensors(&join(prefix, "bn1"), out);
        }
        self.conv2.tensors(&join(prefix, "conv2"), out);
        if let Some(bn) = &self.bn2 {
            bn.tensors(&join(prefix, "bn2"), out);
        }
        if let Some(sc) = &self.shortcut {
            sc.conv.tensors(&join(prefix, "shortcut.conv"), out);
            if let Some(bn) = &sc.bn {
                bn.tensors(&join(prefix, "shortcut.bn"), out);
            }
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv1.params_mut(&join(prefix, "conv1"), out);
        if let Some(bn) = &mut self.bn1 {
            bn.params_mut(&join(prefix, "bn1"), out);
        }
        self.conv2.params_mut(&join(prefix, "conv2"), out);
        if let Some(bn) = &mut self.bn2 {
            bn.params_mut(&join(prefix, "bn2"), out);
        }
        if let Some(sc) = &mut self.shortcut {
            sc.conv.params_mut(&join(prefix, "shortcut.conv"), out);
            if let Some(bn) = &mut sc.bn {
                bn.params_mut(&join(prefix, "shortcut.bn"), out);
            }
        }
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        if let Some(bn) = &mut self.bn1 {
            bn.buffers_mut(&join(prefix, "bn1"), out);
        }
        if let Some(bn) = &mut self.bn2 {
            bn.buffers_mut(&join(prefix, "bn2"), out);
        }
        if let Some(Shortcut { bn: Some(bn), .. }) = &mut self.shortcut {
            bn.buffers_mut(&join(prefix, "shortcut.bn"), out);
        }
    }
}

/// First layer: 3x3 convolution from RGB, batch norm, activation.
#[derive(Clone, Debug)]
pub struct Head<T: Element> {
    pub conv: ConvLayer<T>,
    pub bn: Option<BatchNormLayer<T>>,
    pub activation: ActivationSpec,
}

impl<T: Element> Head<T> {
    pub fn new(out_channels: usize, activation: ActivationSpec, batch_norm: bool, seed: u64) -> Result<Self> {
        activation.validate()?;
        Ok(Head {
            conv: ConvLayer::new(3, out_channels, 1, seed)?,
            bn: batch_norm.then(|| BatchNormLayer::new(out_channels)).transpose()?,
            activation,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        check_channels(tape, x, 3, "head")?;
        let h = self.conv.forward(tape, x)?;
        let h = norm(&mut self.bn, tape, h, mode)?;
        Ok(tape.activation(h, &self.activation))
    }

    pub fn apply(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        self.bind_params(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let y = self.forward(&mut tape, xv, mode)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Element> Module<T> for Head<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot, &'a Tensor<T>)>) {
        self.conv.tensors(&join(prefix, "conv"), out);
        if let Some(bn) = &self.bn {
            bn.tensors(&join(prefix, "bn"), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        if let Some(bn) = &mut self.bn {
            bn.params_mut(&join(prefix, "bn"), out);
        }
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        if let Some(bn) = &mut self.bn {
            bn.buffers_mut(&join(prefix, "bn"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_uniform;

    #[test]
    fn structure_follows_stride() {
        let b = make_block::<f32>(BlockSpec::quotient(16, 16, 1, 2.0).unwrap(), 0).unwrap();
        assert!(b.shortcut.is_none());
        let b = make_block::<f32>(BlockSpec::quotient(16, 32, 2, 2.0).unwrap(), 0).unwrap();
        assert_eq!(b.shortcut.unwrap().conv.weight.value.dims(), &[32, 16, 3, 3]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(make_block::<f32>(BlockSpec::residual(16, 32, 1), 0).is_err());
        assert!(make_block::<f32>(BlockSpec::residual(16, 16, 2), 0).is_err());
        assert!(make_block::<f32>(BlockSpec::residual(16, 32, 3), 0).is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut b = make_block::<f64>(BlockSpec::residual(4, 4, 1), 0).unwrap();
        let x = Tensor::zeros(vec![2, 3, 4, 4]).unwrap();
        assert!(b.apply(&x, Mode::Train).is_err());
    }

    #[test]
    fn zero_quotient_block_is_identity_for_signed_input() {
        let mut b = make_block::<f64>(BlockSpec::quotient(4, 4, 1, 1.7).unwrap(), 5).unwrap();
        b.zero_transform();
        let x = seeded_uniform(vec![2, 4, 6, 6], -3.0, 3.0, 1).unwrap();
        let (y, q) = b.apply(&x, Mode::Train).unwrap();
        assert!(q.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_residual_block_is_relu() {
        let mut b = make_block::<f64>(BlockSpec::residual(4, 4, 1), 5).unwrap();
        b.zero_transform();
        let x = seeded_uniform(vec![2, 4, 6, 6], -3.0, 3.0, 1).unwrap();
        let (y, _) = b.apply(&x, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b.max(0.0));
        }
    }

    #[test]
    fn zero_heads() {
        let x = seeded_uniform::<f64>(vec![2, 3, 8, 8], 0.0, 1.0, 2).unwrap();
        let mut q = Head::<f64>::new(16, ActivationSpec::quotient(2.0).unwrap(), true, 0).unwrap();
        q.conv.weight.value.data_mut().fill(0.0);
        assert!(q.apply(&x, Mode::Train).unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let mut r = Head::<f64>::new(16, ActivationSpec::Relu, true, 0).unwrap();
        r.conv.weight.value.data_mut().fill(0.0);
        assert!(r.apply(&x, Mode::Train).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(q.apply(&Tensor::zeros(vec![1, 1, 8, 8]).unwrap(), Mode::Eval).is_err());
    }
}
