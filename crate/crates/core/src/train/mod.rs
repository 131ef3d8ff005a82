//! SGD with momentum, the step learning-rate schedule, the epoch loop and
//! evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::data::{assemble_batch, LabeledImage, NormStats};
use crate::error::{Error, Result};
use crate::layers::{Mode, Module, Param};
use crate::model::Network;
use crate::tensor::{derive_seed, Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epochs (0-based) at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub total_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    /// Feature sup-norm above which a forward pass counts as diverged.
    pub divergence_threshold: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    /// The full protocol: 182 epochs, lr 0.1 divided by 10 at epochs 92 and 136.
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            batch_size: 128,
            milestones: vec![92, 136],
            gamma: 0.1,
            total_epochs: 182,
            weight_decay: 1e-4,
            seed: 0,
            augment: true,
            divergence_threshold: 1e6,
            eval_batch_size: 250,
        }
    }
}

impl TrainConfig {
    /// Same recipe compressed to `epochs`, milestones scaled proportionally.
    pub fn scaled_to(epochs: usize) -> Self {
        let full = TrainConfig::default();
        TrainConfig { milestones: full.rescaled_milestones(epochs), total_epochs: epochs, ..full }
    }

    /// Milestones moved proportionally onto an `epochs`-long run. Short runs
    /// can round two milestones together or onto the end; those collapse.
    pub fn rescaled_milestones(&self, epochs: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .milestones
            .iter()
            .map(|&m| ((m * epochs) as f64 / self.total_epochs as f64).round() as usize)
            .filter(|&m| m < epochs)
            .collect();
        out.dedup();
        out
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, message: String| Err(Error::InvalidConfig { key: key.into(), message });
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return invalid("train.lr0", format!("must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("train.momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return invalid("train.batch_size", "must be positive".into());
        }
        if self.eval_batch_size == 0 {
            return invalid("train.eval_batch_size", "must be positive".into());
        }
        if self.total_epochs == 0 {
            return invalid("train.epochs", "must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("train.milestones", format!("must be strictly increasing, got {:?}", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.total_epochs) {
            return invalid("train.milestones", format!("must be below the epoch count {}", self.total_epochs));
        }
        if !(self.gamma > 0.0) {
            return invalid("train.gamma", format!("must be positive, got {}", self.gamma));
        }
        if !(self.weight_decay >= 0.0) {
            return invalid("train.weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if !(self.divergence_threshold > 0.0) {
            return invalid("train.divergence_threshold", "must be positive".into());
        }
        Ok(())
    }
}

/// `lr0 * gamma^(number of milestones <= epoch)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.total_epochs {
        return Err(Error::InvalidArgument(format!("epoch {epoch} outside 0..{}", config.total_epochs)));
    }
    let passed = config.milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(config.lr0 * config.gamma.powi(passed as i32))
}

/// Per-parameter momentum buffers, created as zeros on first use.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T: Element> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState { velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// One SGD step: `g' = g + wd*w` (decayed parameters only), `v = momentum*v + g'`,
/// `w -= lr*v`. A missing gradient counts as zero. Any non-finite gradient
/// aborts the step before a parameter changes.
pub fn sgd_step<T: Element>(
    params: &mut [(String, &mut Param<T>)],
    grads: &[Option<&Tensor<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            p.value.expect_same_shape(g, "sgd_step")?;
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|(_, p)| Tensor::zeros_like(&p.value)).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::InvalidArgument("optimizer state belongs to a different parameter set".into()));
    }
    let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
    for (((_, p), g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let wd = T::from_f64(if p.decay { weight_decay } else { 0.0 });
        let w = p.value.data_mut();
        let v = v.data_mut();
        match g {
            Some(g) => {
                for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vi = mu * *vi + gi + wd * *wi;
                    *wi = *wi - lr * *vi;
                }
            }
            None => {
                for (wi, vi) in w.iter_mut().zip(v.iter_mut()) {
                    *vi = mu * *vi + wd * *wi;
                    *wi = *wi - lr * *vi;
                }
            }
        }
    }
    Ok(())
}

/// A model the epoch loop can train: batch in, logits out.
pub trait Classifier<T: Element>: Module<T> {
    /// Binds parameters, records the forward pass and returns the logits
    /// node together with the largest absolute intermediate feature.
    fn forward_logits(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<(Var, f64)>;
}

impl<T: Element> Classifier<T> for Network<T> {
    fn forward_logits(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<(Var, f64)> {
        let f = self.forward(tape, x, mode, &[])?;
        Ok((f.logits, f.sup_norm))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-example training loss over the epoch.
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub batch: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub history: Vec<EpochRecord>,
    /// Model snapshot at the epoch with the highest validation accuracy.
    pub best: Option<(EpochRecord, M)>,
    pub divergence: Option<Divergence>,
}

impl<M> TrainOutcome<M> {
    pub fn best_val_acc(&self) -> Option<f64> {
        self.best.as_ref().map(|(r, _)| r.val_acc)
    }

    pub fn final_val_acc(&self) -> Option<f64> {
        self.history.last().map(|r| r.val_acc)
    }
}

/// Trains `model` in place. Each epoch shuffles by `(seed, epoch)`, augments
/// each example with its own `(seed, epoch, index)` stream, steps once per
/// batch (the last partial batch included) and evaluates on `val`. A last
/// batch of a single example is skipped: batch statistics need two.
///
/// Divergence (non-finite loss, or a feature sup-norm above the threshold)
/// stops training and is reported in the outcome, not as an error.
pub fn train_loop<T, M>(
    model: &mut M,
    train: &[LabeledImage],
    val: &[LabeledImage],
    norm: &NormStats,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<M>>
where
    T: Element,
    M: Classifier<T> + Clone,
{
    config.validate()?;
    norm.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut state = OptimizerState::new();
    let mut outcome = TrainOutcome { history: Vec::new(), best: None, divergence: None };
    let shuffle_seed = derive_seed(config.seed, 0x5_u64 << 40);
    for epoch in 0..config.total_epochs {
        let lr = lr_at(epoch, config)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(shuffle_seed, epoch as u64)));
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() == 1 && b > 0 {
                continue;
            }
            let items: Vec<(usize, &LabeledImage)> = chunk.iter().map(|&i| (i, &train[i])).collect();
            let batch = assemble_batch::<T>(&items, norm, config.augment.then_some((config.seed, epoch)))?;
            let mut tape = Tape::new();
            let (logits, sup_norm) = model.forward_logits(&mut tape, &batch.images, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            let loss_value = tape.value(loss).item()?.as_f64();
            let reason = if !loss_value.is_finite() {
                Some(format!("non-finite loss {loss_value}"))
            } else if sup_norm > config.divergence_threshold {
                Some(format!("feature sup-norm {sup_norm:e} exceeds {:e}", config.divergence_threshold))
            } else {
                None
            };
            if let Some(reason) = reason {
                outcome.divergence = Some(Divergence { epoch, batch: b, reason });
                return Ok(outcome);
            }
            loss_sum += loss_value * chunk.len() as f64;
            seen += chunk.len();
            let grads = tape.backward(loss)?;
            let mut params = model.named_params_mut();
            let g: Vec<Option<&Tensor<T>>> =
                params.iter().map(|(_, p)| p.var().ok().and_then(|v| grads.get(v))).collect();
            sgd_step(&mut params, &g, &mut state, lr, config.momentum, config.weight_decay)?;
        }
        let val_acc = if val.is_empty() { f64::NAN } else { evaluate(model, val, norm, config.eval_batch_size)? };
        let record = EpochRecord { epoch, lr, train_loss: loss_sum / seen as f64, val_acc };
        on_epoch(&record);
        if outcome.best.as_ref().is_none_or(|(r, _)| val_acc > r.val_acc) {
            outcome.best = Some((record.clone(), model.clone()));
        }
        outcome.history.push(record);
    }
    Ok(outcome)
}

/// Index of the largest logit; ties go to the lowest index and NaN never wins.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] || (row[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of an arbitrary batch predictor.
pub fn evaluate_with<F>(data: &[LabeledImage], batch_size: usize, mut predict: F) -> Result<f64>
where
    F: FnMut(&[&LabeledImage]) -> Result<Vec<usize>>,
{
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut correct = 0usize;
    for chunk in data.chunks(batch_size) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let pred = predict(&refs)?;
        if pred.len() != chunk.len() {
            return Err(Error::InvalidArgument("predictor returned the wrong number of labels".into()));
        }
        correct += pred.iter().zip(chunk).filter(|(p, img)| **p == img.label).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Eval-mode top-1 accuracy on single, unaugmented views.
pub fn evaluate<T: Element, M: Classifier<T>>(
    model: &mut M,
    data: &[LabeledImage],
    norm: &NormStats,
    batch_size: usize,
) -> Result<f64> {
    evaluate_with(data, batch_size, |batch| {
        let items: Vec<(usize, &LabeledImage)> = batch.iter().copied().enumerate().collect();
        let b = assemble_batch::<T>(&items, norm, None)?;
        let mut tape = Tape::new();
        let (logits, _) = model.forward_logits(&mut tape, &b.images, Mode::Eval)?;
        let z = tape.value(logits);
        let classes = z.dims()[1];
        Ok(z.data().chunks_exact(classes).map(argmax).collect())
    })
}

/// Tab-separated history with a `#` header line recording the recipe.
pub fn history_tsv(history: &[EpochRecord], config: &TrainConfig) -> String {
    let mut s = String::new();
    let milestones: Vec<String> = config.milestones.iter().map(usize::to_string).collect();
    let _ = writeln!(
        s,
        "# weight_decay={} lr0={} momentum={} batch_size={} milestones={} gamma={} epochs={} seed={}",
        config.weight_decay,
        config.lr0,
        config.momentum,
        config.batch_size,
        milestones.join(","),
        config.gamma,
        config.total_epochs,
        config.seed
    );
    s.push_str("epoch\tlr\ttrain_loss\tval_acc\n");
    for r in history {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.epoch, r.lr, r.train_loss, r.val_acc);
    }
    s
}

/// Parses [`history_tsv`] output, skipping `#` lines and the column header.
pub fn parse_history(text: &str) -> Result<Vec<EpochRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("epoch") || line.trim().is_empty() {
            continue;
        }
        let bad = || Error::InvalidArgument(format!("history line {}: cannot parse `{line}`", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            lr: f[1].parse().map_err(|_| bad())?,
            train_loss: f[2].parse().map_err(|_| bad())?,
            val_acc: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_protocol() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c).unwrap(), 0.1);
        assert_eq!(lr_at(91, &c).unwrap(), 0.1);
        assert!((lr_at(92, &c).unwrap() - 0.01).abs() < 1e-15);
        assert!((lr_at(136, &c).unwrap() - 0.001).abs() < 1e-15);
        assert!((lr_at(181, &c).unwrap() - 0.001).abs() < 1e-15);
        assert!(lr_at(182, &c).is_err());
    }

    #[test]
    fn smoke_schedule_scales_milestones() {
        let c = TrainConfig::scaled_to(10);
        assert_eq!(c.milestones, vec![5, 7]);
        c.validate().unwrap();
        for epochs in 1..=12 {
            TrainConfig::scaled_to(epochs).validate().unwrap();
        }
        assert_eq!(TrainConfig::scaled_to(2).milestones, vec![1]);
        assert!(TrainConfig::scaled_to(1).milestones.is_empty());
    }

    #[test]
    fn bad_milestones_rejected() {
        let c = TrainConfig { milestones: vec![5, 5], ..TrainConfig::scaled_to(10) };
        assert!(c.validate().is_err());
        let c = TrainConfig { milestones: vec![10], ..TrainConfig::scaled_to(10) };
        assert!(c.validate().is_err());
    }

    #[test]
    fn argmax_ignores_nan() {
        assert_eq!(argmax(&[f32::NAN, 1.0, 3.0, 3.0]), 2);
        assert_eq!(argmax(&[0.0f32, 0.0]), 0);
    }

    #[test]
    fn history_round_trips() {
        let h = vec![
            EpochRecord { epoch: 0, lr: 0.1, train_loss: 2.0000000000000004, val_acc: 0.25 },
            EpochRecord { epoch: 1, lr: 0.010000000000000002, train_loss: 1.5, val_acc: 0.375 },
        ];
        let c = TrainConfig::default();
        let text = history_tsv(&h, &c);
        assert!(text.starts_with("# weight_decay=0.0001"));
        assert_eq!(parse_history(&text).unwrap(), h);
    }
}
