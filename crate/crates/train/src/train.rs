//! AdamW training on summary tokens with linear warmup and cosine decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use qfsum_core::model::{forward, ForwardOptions};
use qfsum_core::params::is_adapter_param;
use qfsum_core::prompt::Prompted;
use qfsum_core::{ArchConfig, Error, ParamStore, Result};
use qfsum_tensor::{Rng, Scalar, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    WarmupCosine,
    Constant,
}

/// Which tensors the optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainable {
    /// Everything outside the frozen backbone.
    Adapters,
    /// Every tensor (used to build the backbone itself).
    All,
}

impl Trainable {
    pub fn includes(self, name: &str) -> bool {
        match self {
            Trainable::Adapters => is_adapter_param(name),
            Trainable::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_epochs: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub trainable: Trainable,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 1.0,
            batch_size: 32,
            lr: 0.006,
            weight_decay: 0.02,
            epochs: 5,
            seed: 0,
            schedule: Schedule::WarmupCosine,
            clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            trainable: Trainable::Adapters,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train.{m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.warmup_epochs >= 0.0) {
            return bad("lr, weight_decay and warmup_epochs must be non-negative");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam_beta1/adam_beta2 must be in [0, 1) and adam_eps positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.batch_size).max(1)
    }
}

/// Learning rate at optimizer step `step` (0-based) of `total`, with
/// `warmup` warmup steps: `lr·(step+1)/warmup` during warmup, then
/// `lr·½(1 + cos(π·(step−warmup)/(total−warmup)))`.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize, warmup: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::WarmupCosine => {
            if step < warmup {
                cfg.lr * (step + 1) as f64 / warmup as f64
            } else if total <= warmup {
                cfg.lr
            } else {
                let progress = (step - warmup) as f64 / (total - warmup) as f64;
                cfg.lr * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// Mean cross-entropy of `logits` rows against `targets` where `mask` is set.
pub fn masked_loss<'t, T: Scalar>(logits: Var<'t, T>, targets: &[usize], mask: &[bool]) -> Result<Var<'t, T>> {
    if targets.len() != mask.len() || logits.shape()[0] != mask.len() {
        return Err(Error::Tensor(TensorError::ShapeMismatch {
            op: "masked_loss",
            left: logits.shape(),
            right: vec![targets.len(), mask.len()],
        }));
    }
    let pairs: Vec<(usize, usize)> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| (i, targets[i]))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Tensor(TensorError::EmptyMask));
    }
    Ok(logits.cross_entropy(&pairs)?)
}

/// Summary-token loss of one templated example.
pub fn example_loss<'t, T: Scalar>(
    arch: &ArchConfig,
    bound: &qfsum_core::params::Bound<'t, T>,
    ex: &Prompted,
    train: bool,
    rng: &mut Rng,
) -> Result<Var<'t, T>> {
    let pairs = ex.target_pairs();
    let Some(&(first, _)) = pairs.first() else {
        return Err(Error::Spans("example has no summary tokens".into()));
    };
    let opts = ForwardOptions {
        train,
        logits_from: first,
        ..ForwardOptions::default()
    };
    let out = forward(arch, bound, &ex.tokens, Some(&ex.spans), None, opts, rng)?;
    let shifted: Vec<(usize, usize)> = pairs.iter().map(|&(p, t)| (p - first, t)).collect();
    Ok(out.logits.cross_entropy(&shifted)?)
}

/// Mean eval-mode loss over `data`.
pub fn mean_loss<T: Scalar>(arch: &ArchConfig, params: &ParamStore<T>, data: &[Prompted]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("no examples to evaluate".into()));
    }
    let mut rng = Rng::seed(0);
    let mut total = 0.0;
    for ex in data {
        let tape = Tape::new();
        let bound = params.bind(&tape, &|_| false);
        let loss = example_loss(arch, &bound, ex, false, &mut rng)?;
        total += loss.value().item().to_f64().unwrap_or(f64::NAN);
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone)]
struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// AdamW with decoupled weight decay over a fixed set of named tensors.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    state: BTreeMap<String, AdamState<T>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            state: BTreeMap::new(),
            step: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn apply(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let c = |x: f64| T::from_f64_lossy(x);
        let (b1, b2, eps, lr_t, decay) = (
            c(self.beta1),
            c(self.beta2),
            c(self.eps),
            c(lr),
            c(1.0 - lr * self.weight_decay),
        );
        let (bc1, bc2) = (c(bc1), c(bc2));
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("gradient for unknown tensor `{name}`")))?;
            let st = self.state.entry(name.clone()).or_insert_with(|| AdamState {
                m: vec![T::zero(); g.numel()],
                v: vec![T::zero(); g.numel()],
            });
            let pd = p.data_mut();
            for (((x, &gi), m), v) in pd.iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *x = *x * decay - lr_t * update;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters of the epoch with the lowest validation loss (the last
    /// epoch when there is no validation data).
    pub best: ParamStore<T>,
    pub last: ParamStore<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl<T> TrainOutcome<T> {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |m| m.train_loss)
    }
}

/// Gradients of the mean loss over `batch`, with the batch's mean loss.
fn batch_gradients<T: Scalar>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    batch: &[&Prompted],
    trainable: Trainable,
    rng: &mut Rng,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let mut loss_sum = 0.0;
    let inv = T::from_f64_lossy(1.0 / batch.len() as f64);
    for ex in batch {
        let tape = Tape::new();
        let bound = params.bind(&tape, &|n| trainable.includes(n));
        let loss = example_loss(arch, &bound, ex, true, rng)?;
        loss_sum += loss.value().item().to_f64().unwrap_or(f64::NAN);
        let grads = loss.backward()?;
        for (name, v) in bound.iter() {
            if !v.requires_grad() {
                continue;
            }
            if let Some(g) = grads.get(*v) {
                match acc.get_mut(name) {
                    Some(a) => a.axpy(inv, g)?,
                    None => {
                        acc.insert(name.clone(), g.scale(inv));
                    }
                }
            }
        }
    }
    Ok((loss_sum / batch.len() as f64, acc))
}

fn clip<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.sq_norm().to_f64().unwrap_or(f64::NAN)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Train `params` on `train` and select the best epoch on `val`.
///
/// `on_epoch` sees each epoch's metrics as soon as they are known.
pub fn train<T: Scalar>(
    arch: &ArchConfig,
    mut params: ParamStore<T>,
    train: &[Prompted],
    val: &[Prompted],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    arch.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let per_epoch = cfg.steps_per_epoch(train.len());
    let total = per_epoch * cfg.epochs;
    let warmup = (cfg.warmup_epochs * per_epoch as f64).round() as usize;
    let root = Rng::seed(cfg.seed);
    let mut opt = AdamW::new(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.fork(2 * epoch as u64).shuffle(&mut order);
        let mut dropout_rng = root.fork(2 * epoch as u64 + 1);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prompted> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = batch_gradients(arch, &params, &batch, cfg.trainable, &mut dropout_rng)?;
            let norm = clip(&mut grads, cfg.clip_norm);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {loss}, gradient norm {norm}"),
                });
            }
            lr = lr_at(cfg, step, total, warmup);
            opt.apply(&mut params, &grads, lr)?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_loss(arch, &params, val)?)
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            lr,
        };
        on_epoch(&m);
        let score = val_loss.unwrap_or(f64::NEG_INFINITY);
        let better = match &best {
            None => true,
            Some((b, _, _)) => val_loss.is_none() || score < *b,
        };
        if better {
            best = Some((score, epoch + 1, params.clone()));
        }
        history.push(m);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        last: params,
        best_epoch,
        history,
    })
}
