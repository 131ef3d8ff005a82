//! Whole networks: head, three stages of blocks, global pooling and a linear
//! classifier, built from a declarative [`NetworkConfig`].

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Loaded, CHECKPOINT_MAGIC};

use crate::autograd::{Tape, Var};
use crate::blocks::{make_block, Block, BlockKind, BlockSpec, Head};
use crate::error::{Error, Result};
use crate::layers::{join, ActivationSpec, LinearLayer, Mode, Module, Param, Slot};
use crate::tensor::{derive_seed, Element, Tensor};

/// Quotient-activation bound for a given depth: 1.8, 1.7 and 1.5 for 44, 56
/// and 110 layers, 2.0 otherwise.
pub fn default_alpha(depth: usize) -> f64 {
    match depth {
        44 => 1.8,
        56 => 1.7,
        110 => 1.5,
        _ => 2.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub kind: BlockKind,
    /// `6n + 2` layers: `n` blocks per stage.
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub alpha: f64,
    /// Overrides `sigmoid(x - ln(alpha - 1)) * alpha` as the quotient activation
    /// (ablations). Ignored by residual networks.
    pub quotient_activation: Option<ActivationSpec>,
    pub inner_activation: ActivationSpec,
    pub head_uses_quotient_activation: bool,
    pub shortcuts_use_quotient_activation: bool,
    pub batch_norm: bool,
    pub seed: u64,
}

impl NetworkConfig {
    /// CIFAR-10 defaults: base width 16, the per-depth alpha, quotient
    /// activation at head and shortcuts.
    pub fn new(kind: BlockKind, depth: usize) -> Self {
        NetworkConfig {
            kind,
            depth,
            base_channels: 16,
            num_classes: 10,
            alpha: default_alpha(depth),
            quotient_activation: None,
            inner_activation: ActivationSpec::Relu,
            head_uses_quotient_activation: true,
            shortcuts_use_quotient_activation: true,
            batch_norm: true,
            seed: 0,
        }
    }

    pub fn blocks_per_stage(&self) -> usize {
        (self.depth.saturating_sub(2)) / 6
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, message: String| Err(Error::InvalidConfig { key: key.into(), message });
        if self.depth < 8 || self.depth % 6 != 2 {
            return invalid(
                "model.depth",
                format!("depth ≡ 2 (mod 6) is required (6n+2 with n ≥ 1), got {}", self.depth),
            );
        }
        if self.base_channels == 0 {
            return invalid("model.base_channels", "must be positive".into());
        }
        if self.num_classes < 2 {
            return invalid("model.num_classes", format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return invalid("model.alpha", format!("alpha must be > 1, got {}", self.alpha));
        }
        if let Some(a) = &self.quotient_activation {
            a.validate().or_else(|e| invalid("model.quotient_activation", e.to_string()))?;
        }
        self.inner_activation.validate().or_else(|e| invalid("model.inner_activation", e.to_string()))
    }

    /// The activation used on quotient branches (and head/shortcuts when enabled).
    pub fn quotient_spec(&self) -> Result<ActivationSpec> {
        match &self.quotient_activation {
            Some(a) => Ok(a.clone()),
            None => ActivationSpec::quotient(self.alpha),
        }
    }

    fn head_activation(&self) -> Result<ActivationSpec> {
        match self.kind {
            BlockKind::Quotient if self.head_uses_quotient_activation => self.quotient_spec(),
            _ => Ok(ActivationSpec::Relu),
        }
    }

    fn block_spec(&self, in_channels: usize, out_channels: usize, stride: usize) -> Result<BlockSpec> {
        let mut spec = match self.kind {
            BlockKind::Quotient => {
                let q = self.quotient_spec()?;
                let shortcut = if self.shortcuts_use_quotient_activation { q.clone() } else { ActivationSpec::Relu };
                BlockSpec {
                    kind: BlockKind::Quotient,
                    in_channels,
                    out_channels,
                    stride,
                    quotient_activation: q,
                    inner_activation: ActivationSpec::Relu,
                    shortcut_activation: Some(shortcut),
                    batch_norm: true,
                }
            }
            BlockKind::Residual => BlockSpec::residual(in_channels, out_channels, stride),
        };
        spec.inner_activation = self.inner_activation.clone();
        spec.batch_norm = self.batch_norm;
        Ok(spec)
    }
}

#[derive(Clone, Debug)]
pub struct Network<T: Element> {
    pub config: NetworkConfig,
    pub head: Head<T>,
    pub stages: Vec<Vec<Block<T>>>,
    pub classifier: LinearLayer<T>,
}

/// Tape handles produced by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub head: Var,
    /// Branch maps of the requested blocks, in request order.
    pub captured: Vec<Var>,
    /// Largest absolute feature value over the head and every block output;
    /// infinite when any value is non-finite.
    pub sup_norm: f64,
}

/// Builds a network; construction is deterministic in `config.seed`.
pub fn build<T: Element>(config: &NetworkConfig) -> Result<Network<T>> {
    config.validate()?;
    let n = config.blocks_per_stage();
    let base = config.base_channels;
    let head = Head::new(base, config.head_activation()?, config.batch_norm, derive_seed(config.seed, 0))?;
    let mut stages = Vec::with_capacity(3);
    let mut in_ch = base;
    for s in 0..3 {
        let out_ch = base << s;
        let mut blocks = Vec::with_capacity(n);
        for b in 0..n {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let spec = config.block_spec(in_ch, out_ch, stride)?;
            blocks.push(make_block(spec, derive_seed(config.seed, (1 + s * 1000 + b) as u64))?);
            in_ch = out_ch;
        }
        stages.push(blocks);
    }
    let classifier = LinearLayer::new(4 * base, config.num_classes, derive_seed(config.seed, 9999))?;
    Ok(Network { config: config.clone(), head, stages, classifier })
}

/// Total trainable scalars: convolution weights, batch-norm gamma/beta and
/// the classifier's weight and bias.
pub fn count_params<T: Element>(net: &Network<T>) -> usize {
    net.param_count()
}

fn sup(t: &Tensor<impl Element>) -> f64 {
    let m = t.max_abs().as_f64();
    if m.is_finite() {
        m
    } else {
        f64::INFINITY
    }
}

impl<T: Element> Network<T> {
    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block<T>> {
        self.stages.iter_mut().flatten()
    }

    /// Binds every parameter as a fresh leaf (trainable in train mode) and
    /// records the full forward pass.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode, capture: &[usize]) -> Result<ForwardPass> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != 32 || dims[3] != 32 {
            return Err(Error::InvalidArgument(format!("network input must be [N, 3, 32, 32], got {}", x.shape())));
        }
        let total = self.num_blocks();
        if let Some(&bad) = capture.iter().find(|&&i| i >= total) {
            return Err(Error::InvalidArgument(format!("block index {bad} out of range (network has {total} blocks)")));
        }
        self.bind_params(tape, mode == Mode::Train);
        let xv = tape.leaf(x.clone(), false);
        let mut h = self.head.forward(tape, xv, mode)?;
        let head = h;
        let mut sup_norm = sup(tape.value(h));
        let mut branches = Vec::with_capacity(total);
        for block in self.stages.iter_mut().flatten() {
            let out = block.forward(tape, h, mode)?;
            h = out.out;
            sup_norm = sup_norm.max(sup(tape.value(h)));
            branches.push(out.branch);
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = self.classifier.forward(tape, pooled)?;
        let captured = capture.iter().map(|&i| branches[i]).collect();
        Ok(ForwardPass { logits, head, captured, sup_norm })
    }

    /// Eval-mode logits.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x, Mode::Eval, &[])?;
        Ok(tape.value(f.logits).clone())
    }

    /// Eval-mode branch maps (quotient `q` or residual `r`) of the given blocks.
    pub fn capture_intermediates(&mut self, x: &Tensor<T>, blocks: &[usize]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x, Mode::Eval, blocks)?;
        Ok(f.captured.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Sets all convolution weights and batch-norm betas to zero.
    pub fn zero_transforms(&mut self) {
        self.head.conv.weight.value.data_mut().fill(T::zero());
        if let Some(bn) = &mut self.head.bn {
            bn.beta.value.data_mut().fill(T::zero());
        }
        for b in self.blocks_mut() {
            b.zero_transform();
        }
    }
}

impl<T: Element> Module<T> for Network<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Slot, &'a Tensor<T>)>) {
        self.head.tensors(&join(prefix, "head"), out);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.tensors(&join(prefix, &format!("stage{}.block{b}", s + 1)), out);
            }
        }
        self.classifier.tensors(&join(prefix, "fc"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.head.params_mut(&join(prefix, "head"), out);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.params_mut(&join(prefix, &format!("stage{}.block{b}", s + 1)), out);
            }
        }
        self.classifier.params_mut(&join(prefix, "fc"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.head.buffers_mut(&join(prefix, "head"), out);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.buffers_mut(&join(prefix, &format!("stage{}.block{b}", s + 1)), out);
            }
        }
    }
}
