//! Masked step modeling: mask sampling, the step-classification and
//! distribution-matching losses, finite-difference gradient checks,
//! optimizers with step schedules, and the pre-training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::VideoRecord;
use crate::error::{Error, Result};
use crate::model::{backward, forward, log_softmax, softmax_logits, ModelConfig, ParamGroup, SequenceInput, TransformerParams};
use crate::seed;
use crate::weaklabel::{argmax, best_label, LabelDistribution};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub ratio: f64,
    #[serde(default = "default_true")]
    pub resample_if_empty: bool,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(ratio: f64, seed: u64) -> Self {
        MaskSpec {
            ratio,
            resample_if_empty: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio > 0.0 && self.ratio <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("mask ratio {} outside (0, 1]", self.ratio)))
        }
    }
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self::new(0.15, 0)
    }
}

/// Includes each of `0..k` independently with probability `spec.ratio`.
/// Deterministic in `(spec.seed, draw)`.
pub fn sample_mask(k: usize, spec: &MaskSpec, draw: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidInput("cannot mask an empty sequence".into()));
    }
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, "mask", draw);
    loop {
        let mask: Vec<usize> = (0..k).filter(|_| rng.random::<f64>() < spec.ratio).collect();
        if !mask.is_empty() || !spec.resample_if_empty {
            return Ok(mask);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy against the most probable weak label.
    StepClassification,
    /// KL divergence against the truncated weak label distribution.
    DistributionMatching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn weight(self, masked: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / masked as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// Cross-entropy at the masked positions. Returns the loss and its
/// gradient w.r.t. every logit row (zero outside the mask).
pub fn step_classification_loss(
    logits: ArrayView2<f64>,
    targets: &BTreeMap<usize, usize>,
    mask: &[usize],
    reduction: Reduction,
) -> Result<(f64, Array2<f64>)> {
    if mask.is_empty() {
        return Err(Error::InvalidTarget("empty mask".into()));
    }
    let labels = logits.ncols();
    let w = reduction.weight(mask.len());
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for &i in mask {
        let &y = targets
            .get(&i)
            .ok_or_else(|| Error::InvalidTarget(format!("no target for masked position {i}")))?;
        if y >= labels || i >= logits.nrows() {
            return Err(Error::InvalidTarget(format!("target {y} at position {i} out of range")));
        }
        let row = logits.row(i);
        loss -= w * log_softmax(row)[y];
        let mut g = softmax_logits(row);
        g[y] -= 1.0;
        grad.row_mut(i).assign(&(g * w));
    }
    Ok((loss, grad))
}

/// KL(p ‖ softmax(logits)) at the masked positions, with `p` given as
/// dense distributions.
pub fn distribution_matching_loss(
    logits: ArrayView2<f64>,
    targets: &BTreeMap<usize, Vec<f64>>,
    mask: &[usize],
    reduction: Reduction,
) -> Result<(f64, Array2<f64>)> {
    if mask.is_empty() {
        return Err(Error::InvalidTarget("empty mask".into()));
    }
    let w = reduction.weight(mask.len());
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for &i in mask {
        let p = targets
            .get(&i)
            .ok_or_else(|| Error::InvalidTarget(format!("no target for masked position {i}")))?;
        if p.len() != logits.ncols() || i >= logits.nrows() {
            return Err(Error::InvalidDistribution(format!(
                "target at position {i} has {} entries for {} logits",
                p.len(),
                logits.ncols()
            )));
        }
        let total: f64 = p.iter().sum();
        if p.iter().any(|x| !(*x >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!("target at position {i} sums to {total}")));
        }
        let row = logits.row(i);
        let log_q = log_softmax(row);
        let kl: f64 = p
            .iter()
            .zip(log_q.iter())
            .filter(|(pj, _)| **pj > 0.0)
            .map(|(pj, lq)| pj * (pj.ln() - lq))
            .sum();
        loss += w * kl;
        let q = softmax_logits(row);
        let g = (q - &Array1::from(p.clone())) * w;
        grad.row_mut(i).assign(&g);
    }
    Ok((loss, grad))
}

/// Supervision for the masked positions of one video.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Hard(BTreeMap<usize, usize>),
    Soft(BTreeMap<usize, Vec<f64>>),
}

/// One pre-training example: a video's clip features, its mask and the
/// weak-label targets of every clip.
#[derive(Debug, Clone)]
pub struct MaskedExample {
    pub clips: Array2<f64>,
    pub mask: Vec<usize>,
    pub targets: Targets,
}

impl MaskedExample {
    pub fn from_video(video: &VideoRecord, mask: Vec<usize>, kind: LossKind, num_labels: usize) -> Result<Self> {
        let dim = video.clips.first().map_or(0, |c| c.feature.len());
        let clips = Array2::from_shape_fn((video.len(), dim), |(i, j)| video.clips[i].feature[j]);
        let targets = weak_targets(video.clips.iter().map(|c| &c.weak), kind, num_labels)?;
        Ok(MaskedExample { clips, mask, targets })
    }
}

pub fn weak_targets<'a>(
    weak: impl Iterator<Item = &'a LabelDistribution>,
    kind: LossKind,
    num_labels: usize,
) -> Result<Targets> {
    Ok(match kind {
        LossKind::StepClassification => Targets::Hard(
            weak.enumerate()
                .map(|(i, d)| best_label(d).map(|y| (i, y)))
                .collect::<Result<_>>()?,
        ),
        LossKind::DistributionMatching => Targets::Soft(
            weak.enumerate()
                .map(|(i, d)| d.to_dense(num_labels).map(|p| (i, p)))
                .collect::<Result<_>>()?,
        ),
    })
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub grads: TransformerParams,
    /// (correct, total) argmax predictions at masked positions.
    pub correct: usize,
    pub total: usize,
}

/// Masked-step loss of one example. The CLS token is always prepended so
/// pre-training sees the same token layout as sequence-level fine-tuning.
pub fn example_loss(
    params: &TransformerParams,
    cfg: &ModelConfig,
    example: &MaskedExample,
    reduction: Reduction,
) -> Result<(f64, Array2<f64>, crate::model::ForwardTrace)> {
    let input = SequenceInput::new(example.clips.view(), &example.mask).with_cls(true);
    let trace = forward(params, cfg, &input)?;
    let rows: Vec<usize> = example
        .mask
        .iter()
        .map(|&i| trace.clip_row(i).expect("masked clip has a row"))
        .collect();
    let (loss, grad) = match &example.targets {
        Targets::Hard(t) => {
            let remapped = remap(t, &example.mask, &rows)?;
            step_classification_loss(trace.logits.view(), &remapped, &rows, reduction)?
        }
        Targets::Soft(t) => {
            let remapped = remap(t, &example.mask, &rows)?;
            distribution_matching_loss(trace.logits.view(), &remapped, &rows, reduction)?
        }
    };
    Ok((loss, grad, trace))
}

fn remap<T: Clone>(targets: &BTreeMap<usize, T>, mask: &[usize], rows: &[usize]) -> Result<BTreeMap<usize, T>> {
    mask.iter()
        .zip(rows)
        .map(|(i, r)| {
            targets
                .get(i)
                .cloned()
                .map(|t| (*r, t))
                .ok_or_else(|| Error::InvalidTarget(format!("no target for masked clip {i}")))
        })
        .collect()
}

/// Forward, loss and exact backward for one example.
pub fn loss_and_grad(
    params: &TransformerParams,
    cfg: &ModelConfig,
    example: &MaskedExample,
    reduction: Reduction,
) -> Result<StepOutcome> {
    let (loss, d_logits, trace) = example_loss(params, cfg, example, reduction)?;
    let grads = backward(params, cfg, &trace, Some(d_logits.view()), None)?;
    let mut correct = 0;
    for &i in &example.mask {
        let row = trace.clip_row(i).expect("masked clip has a row");
        let logits = trace.logits.row(row).to_vec();
        let predicted = argmax(&logits);
        let target = match &example.targets {
            Targets::Hard(t) => t[&i],
            Targets::Soft(t) => argmax(&t[&i]),
        };
        correct += usize::from(predicted == target);
    }
    Ok(StepOutcome {
        loss,
        grads,
        correct,
        total: example.mask.len(),
    })
}

/// Argmax label at each clip when that clip alone is masked.
pub fn single_mask_predictions(params: &TransformerParams, cfg: &ModelConfig, video: &VideoRecord) -> Result<Vec<usize>> {
    let dim = video.clips.first().map_or(0, |c| c.feature.len());
    let clips = Array2::from_shape_fn((video.len(), dim), |(i, j)| video.clips[i].feature[j]);
    (0..video.len())
        .map(|i| {
            let mask = [i];
            let trace = forward(params, cfg, &SequenceInput::new(clips.view(), &mask).with_cls(true))?;
            let row = trace.clip_row(i).expect("masked clip has a row");
            Ok(argmax(&trace.logits.row(row).to_vec()))
        })
        .collect()
}

/// Denominator floor of the relative error used by [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares analytic gradients to central differences on up to
/// `per_array` random coordinates of every parameter array and returns the
/// largest `|a - n| / max(floor, |a| + |n|)`.
pub fn grad_check_with<F>(
    params: &TransformerParams,
    analytic: &TransformerParams,
    epsilon: f64,
    per_array: usize,
    floor: f64,
    seed_value: u64,
    mut loss: F,
) -> Result<f64>
where
    F: FnMut(&TransformerParams) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let analytic_views = analytic.tensors();
    let count = analytic_views.len();
    for t in 0..count {
        let len = analytic_views[t].data.len();
        let mut coords: Vec<usize> = (0..len).collect();
        if len > per_array {
            coords.shuffle(&mut seed::rng(seed_value, &analytic_views[t].name, 0));
            coords.truncate(per_array);
        }
        for c in coords {
            let original = *probe.tensors()[t].data.iter().nth(c).expect("coordinate in range");
            set_coord(&mut probe, t, c, original + epsilon);
            let plus = loss(&probe)?;
            set_coord(&mut probe, t, c, original - epsilon);
            let minus = loss(&probe)?;
            set_coord(&mut probe, t, c, original);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = *analytic_views[t].data.iter().nth(c).expect("coordinate in range");
            let rel = (a - numeric).abs() / f64::max(floor, a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn set_coord(params: &mut TransformerParams, tensor: usize, coord: usize, value: f64) {
    let mut views = params.tensors_mut();
    *views[tensor].data.iter_mut().nth(coord).expect("coordinate in range") = value;
}

/// Gradient check of the masked-step loss on one example.
pub fn grad_check(
    params: &TransformerParams,
    cfg: &ModelConfig,
    example: &MaskedExample,
    epsilon: f64,
    seed_value: u64,
) -> Result<f64> {
    grad_check_floored(params, cfg, example, epsilon, GRAD_CHECK_FLOOR, seed_value)
}

/// [`grad_check`] with a caller-chosen denominator floor. Central
/// differences carry about `ulp(L) / epsilon` of absolute roundoff, so a
/// floor well above that isolates genuine backward errors from coordinates
/// whose gradient is too small to resolve.
pub fn grad_check_floored(
    params: &TransformerParams,
    cfg: &ModelConfig,
    example: &MaskedExample,
    epsilon: f64,
    floor: f64,
    seed_value: u64,
) -> Result<f64> {
    let analytic = loss_and_grad(params, cfg, example, Reduction::Mean)?.grads;
    grad_check_with(params, &analytic, epsilon, 200, floor, seed_value, |p| {
        example_loss(p, cfg, example, Reduction::Mean).map(|(l, _, _)| l)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adamw {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adamw(lr: f64) -> Self {
        OptimizerKind::Adamw {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerKind::SgdMomentum {
            lr,
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn base_lr(&self) -> f64 {
        match self {
            OptimizerKind::SgdMomentum { lr, .. } | OptimizerKind::Adamw { lr, .. } => *lr,
        }
    }
}

/// Unknown keys are rejected by the flattened [`OptimizerKind`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    /// `(epoch, multiplier)`: from `epoch` on, the rate is multiplied by `multiplier`.
    #[serde(default)]
    pub schedule: Vec<(usize, f64)>,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kind.base_lr() > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.kind.base_lr(), |lr, (_, m)| lr * m)
    }
}

pub struct OptimizerState {
    pub config: OptimizerConfig,
    first: TransformerParams,
    second: Option<TransformerParams>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &TransformerParams) -> Result<Self> {
        config.validate()?;
        let second = match config.kind {
            OptimizerKind::Adamw { .. } => Some(params.zeros_like()),
            OptimizerKind::SgdMomentum { .. } => None,
        };
        Ok(OptimizerState {
            config,
            first: params.zeros_like(),
            second,
            step_count: 0,
        })
    }

    /// Updates the arrays whose group passes `trainable`; others are untouched.
    pub fn step(
        &mut self,
        params: &mut TransformerParams,
        grads: &TransformerParams,
        epoch: usize,
        trainable: &dyn Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        let shapes = |p: &TransformerParams| p.tensors().iter().map(|t| t.data.shape().to_vec()).collect::<Vec<_>>();
        let want = shapes(params);
        if shapes(grads) != want || shapes(&self.first) != want {
            return Err(Error::Dimension {
                expected: params.num_parameters(),
                got: grads.num_parameters(),
            });
        }
        self.step_count += 1;
        let lr = self.config.lr_at(epoch);
        let step = self.step_count as i32;
        let mut first = self.first.tensors_mut();
        let mut second = self.second.as_mut().map(|s| s.tensors_mut());
        for (idx, (mut p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            if !trainable(p.group) {
                continue;
            }
            let m = &mut first[idx].data;
            match self.config.kind {
                OptimizerKind::SgdMomentum {
                    momentum,
                    weight_decay,
                    ..
                } => {
                    ndarray::Zip::from(&mut p.data)
                        .and(m)
                        .and(&g.data)
                        .for_each(|theta, v, &grad| {
                            *v = momentum * *v + grad;
                            *theta -= lr * (*v + weight_decay * *theta);
                        });
                }
                OptimizerKind::Adamw {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                } => {
                    let v = &mut second.as_mut().expect("adamw keeps second moments")[idx].data;
                    let c1 = 1.0 - beta1.powi(step);
                    let c2 = 1.0 - beta2.powi(step);
                    ndarray::Zip::from(&mut p.data)
                        .and(m)
                        .and(v)
                        .and(&g.data)
                        .for_each(|theta, m, v, &grad| {
                            *m = beta1 * *m + (1.0 - beta1) * grad;
                            *v = beta2 * *v + (1.0 - beta2) * grad * grad;
                            let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                            *theta -= lr * (update + weight_decay * *theta);
                        });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub masked_step_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub config_digest: String,
    pub seed: u64,
    /// Wall time is logged but kept out of the serialized report so reruns
    /// compare byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,masked_acc,lr\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.masked_step_accuracy, e.lr));
        }
        out
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.masked_step_accuracy)
    }
}

fn default_accumulate() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub loss: LossKind,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default)]
    pub reduction: Reduction,
    /// Videos per optimizer step.
    #[serde(default = "default_accumulate")]
    pub accumulate: usize,
}

impl PretrainConfig {
    /// Single-phase AdamW at 1e-3.
    pub fn desk(loss: LossKind, epochs: usize) -> Self {
        PretrainConfig {
            loss,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::adamw(1e-3),
                schedule: Vec::new(),
            },
            epochs,
            reduction: Reduction::Mean,
            accumulate: 1,
        }
    }

    /// Two phases: 20 epochs of SGD with momentum at 0.01 decayed ×0.1 at
    /// epochs 15 and 19, then 15 epochs of AdamW at 5e-5.
    pub fn full_recipe(loss: LossKind) -> Vec<Self> {
        vec![
            PretrainConfig {
                loss,
                optimizer: OptimizerConfig {
                    kind: OptimizerKind::SgdMomentum {
                        lr: 0.01,
                        momentum: 0.9,
                        weight_decay: 1e-4,
                    },
                    schedule: vec![(15, 0.1), (19, 0.1)],
                },
                epochs: 20,
                reduction: Reduction::Mean,
                accumulate: 1,
            },
            PretrainConfig {
                loss,
                optimizer: OptimizerConfig {
                    kind: OptimizerKind::adamw(5e-5),
                    schedule: Vec::new(),
                },
                epochs: 15,
                reduction: Reduction::Mean,
                accumulate: 1,
            },
        ]
    }
}

/// Pre-training only moves the transformer and the step head.
pub fn pretrain_trainable(group: ParamGroup) -> bool {
    matches!(group, ParamGroup::Transformer | ParamGroup::StepHead)
}

/// Masked step pre-training. `on_boundary` is called with the epoch index
/// and parameters whenever the learning-rate schedule changes.
pub fn pretrain(
    videos: &[VideoRecord],
    model_cfg: &ModelConfig,
    init: TransformerParams,
    mask_spec: &MaskSpec,
    cfg: &PretrainConfig,
    seed_value: u64,
    mut on_boundary: impl FnMut(usize, &TransformerParams),
) -> Result<(TransformerParams, TrainReport)> {
    if videos.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    if cfg.accumulate == 0 {
        return Err(Error::Config("accumulate must be at least 1".into()));
    }
    mask_spec.validate()?;
    model_cfg.validate()?;
    let capacity = model_cfg.max_positions - 1;
    if let Some(v) = videos.iter().find(|v| v.len() > capacity) {
        return Err(Error::Capacity {
            tokens: v.len() + 1,
            capacity: model_cfg.max_positions,
        });
    }
    let started = Instant::now();
    let digest = seed::digest_hex(
        serde_json::to_string(&(model_cfg, mask_spec, cfg, seed_value))?.as_bytes(),
    );
    let mut params = init;
    let mut optimizer = OptimizerState::new(cfg.optimizer.clone(), &params)?;
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        config_digest: digest,
        seed: seed_value,
        wall_time_secs: 0.0,
    };
    let mut draw = 0u64;
    for epoch in 0..cfg.epochs {
        if cfg.optimizer.schedule.iter().any(|(e, _)| *e == epoch) {
            on_boundary(epoch, &params);
        }
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut seed::rng(seed_value, "epoch-order", epoch as u64));
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        let (mut correct, mut total) = (0usize, 0usize);
        let mut pending: Option<TransformerParams> = None;
        let mut pending_count = 0;
        let last_good = params.clone();
        for &vi in &order {
            let video = &videos[vi];
            let mask = sample_mask(video.len(), mask_spec, draw)?;
            draw += 1;
            if mask.is_empty() {
                continue;
            }
            let example = MaskedExample::from_video(video, mask, cfg.loss, model_cfg.num_labels)?;
            let outcome = match loss_and_grad(&params, model_cfg, &example, cfg.reduction) {
                Ok(o) if o.loss.is_finite() => o,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    return Err(Error::Divergence {
                        epoch,
                        checkpoint: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            loss_sum += outcome.loss;
            used += 1;
            correct += outcome.correct;
            total += outcome.total;
            match pending.as_mut() {
                Some(acc) => acc.add_assign(&outcome.grads),
                None => pending = Some(outcome.grads),
            }
            pending_count += 1;
            if pending_count == cfg.accumulate {
                let mut g = pending.take().expect("pending gradient");
                g.scale(1.0 / pending_count as f64);
                optimizer.step(&mut params, &g, epoch, &pretrain_trainable)?;
                pending_count = 0;
            }
        }
        if let Some(mut g) = pending.take() {
            g.scale(1.0 / pending_count as f64);
            optimizer.step(&mut params, &g, epoch, &pretrain_trainable)?;
        }
        if !params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                checkpoint: Box::new(last_good),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: if used == 0 { 0.0 } else { loss_sum / used as f64 },
            masked_step_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            lr: cfg.optimizer.lr_at(epoch),
        };
        log::debug!(
            "epoch {epoch}: loss {:.4} masked acc {:.3}",
            record.train_loss,
            record.masked_step_accuracy
        );
        report.epochs.push(record);
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((params, report))
}
