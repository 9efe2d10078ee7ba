//! Fine-tuning and evaluation on the downstream benchmarks.

use std::borrow::Cow;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{BenchmarkInstance, TaskKind, Target};
use crate::corpus::{fit_dim, Corpus};
use crate::error::{Error, Result};
use crate::model::{
    backward, forward, log_softmax, pooled, pooled_backward, softmax_logits, ForwardTrace, Linear, ModelConfig,
    ParamGroup, SequenceInput, TransformerParams, FORECAST_SLOTS,
};
use crate::seed;
use crate::training::{grad_check_with, EpochRecord, OptimizerConfig, OptimizerKind, OptimizerState, TrainReport};
use crate::weaklabel::{argmax, TextEmbedder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Only the task head moves.
    LinearProbe,
    /// The transformer and the task head move.
    Finetune,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    #[default]
    Sgd,
    Adamw,
}

fn default_lr() -> f64 {
    0.005
}

fn default_epochs() -> usize {
    50
}

fn default_batch() -> usize {
    8
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub task_kind: TaskKind,
    pub mode: Mode,
    #[serde(default)]
    pub use_task_label: bool,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// `(epoch, multiplier)` pairs; `None` decays ×0.1 at 75% and 95% of
    /// the epochs.
    #[serde(default)]
    pub schedule: Option<Vec<(usize, f64)>>,
    #[serde(default)]
    pub optimizer: OptimizerChoice,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Shifts the long-term clip's positional encoding by its index in the
    /// source video.
    #[serde(default)]
    pub long_term_position: bool,
    /// Standard deviation of Gaussian noise added to every clip feature of
    /// a training instance, redrawn each epoch. Zero disables it.
    #[serde(default)]
    pub feature_jitter: f64,
}

impl FinetuneConfig {
    pub fn new(task_kind: TaskKind, mode: Mode) -> Self {
        FinetuneConfig {
            task_kind,
            mode,
            use_task_label: false,
            lr: default_lr(),
            epochs: default_epochs(),
            schedule: None,
            optimizer: OptimizerChoice::Sgd,
            momentum: default_momentum(),
            weight_decay: 0.0,
            batch_size: default_batch(),
            seed: 0,
            long_term_position: false,
            feature_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.feature_jitter >= 0.0 && self.feature_jitter.is_finite()) {
            return Err(Error::Config("feature_jitter must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Vec<(usize, f64)> {
        self.schedule.clone().unwrap_or_else(|| {
            let at = |f: f64| (self.epochs as f64 * f).floor() as usize;
            vec![(at(0.75), 0.1), (at(0.95), 0.1)]
        })
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let kind = match self.optimizer {
            OptimizerChoice::Sgd => OptimizerKind::SgdMomentum {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            OptimizerChoice::Adamw => match OptimizerKind::adamw(self.lr) {
                OptimizerKind::Adamw {
                    lr, beta1, beta2, eps, ..
                } => OptimizerKind::Adamw {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    weight_decay: self.weight_decay,
                },
                other => other,
            },
        };
        OptimizerConfig {
            kind,
            schedule: self.schedule(),
        }
    }

    /// Parameter group holding the readout for this task.
    pub fn head_group(&self) -> ParamGroup {
        head_group(self.task_kind)
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        group == self.head_group() || (self.mode == Mode::Finetune && group == ParamGroup::Transformer)
    }
}

pub fn head_group(kind: TaskKind) -> ParamGroup {
    match kind {
        TaskKind::StepCls | TaskKind::ShortTerm => ParamGroup::StepHead,
        TaskKind::LongTerm => ParamGroup::ForecastHeads,
        TaskKind::ProcRec => ParamGroup::TaskHead,
        TaskKind::MistakeStep => ParamGroup::MistakeHead,
        TaskKind::MistakeOrder => ParamGroup::OrderHead,
    }
}

/// Conditioning vector for a task name, sized to the clip feature width.
pub fn embed_task_label(task_name: &str, embedder: &TextEmbedder, d_in: usize) -> Result<Vec<f64>> {
    if task_name.trim().is_empty() {
        return Err(Error::InvalidInput("empty task name".into()));
    }
    Ok(fit_dim(&embedder.embed(task_name)?, d_in))
}

/// Task-name token of every task in `corpus`, indexed by task id.
pub fn task_tokens(corpus: &Corpus, d_in: usize) -> Result<Vec<Vec<f64>>> {
    (0..corpus.num_tasks())
        .map(|t| embed_task_label(&corpus.task_name(t), &corpus.embedder, d_in))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prediction {
    Label(usize),
    Position(usize),
    Permuted(bool),
    Task(usize),
    Forecast([Option<usize>; FORECAST_SLOTS]),
}

/// `(correct, total)` of one prediction; NULL forecast slots are not counted.
pub fn score(prediction: &Prediction, target: &Target) -> Result<(usize, usize)> {
    let hit = |b: bool| (usize::from(b), 1);
    Ok(match (prediction, target) {
        (Prediction::Label(p), Target::StepCls(y) | Target::ShortTerm(y)) => hit(p == y),
        (Prediction::Position(p), Target::MistakeStep(j)) => hit(p == j),
        (Prediction::Permuted(p), Target::MistakeOrder { permuted }) => hit(p == permuted),
        (Prediction::Task(p), Target::ProcRec(t)) => hit(p == t),
        (Prediction::Forecast(p), Target::LongTerm(slots)) => {
            let mut correct = 0;
            let mut total = 0;
            for (guess, truth) in p.iter().zip(slots) {
                if let Some(y) = truth {
                    total += 1;
                    correct += usize::from(*guess == Some(*y));
                }
            }
            (correct, total)
        }
        _ => return Err(Error::InvalidInput("prediction does not match the target kind".into())),
    })
}

/// The forward pass for one instance and the raw outputs of its head.
struct Readout {
    trace: ForwardTrace,
    /// One score vector per predicted slot.
    scores: Vec<Array1<f64>>,
}

fn check_instance(cfg: &FinetuneConfig, inst: &BenchmarkInstance) -> Result<()> {
    if inst.kind != cfg.task_kind {
        return Err(Error::InvalidInput(format!(
            "instance of kind {} given to a {} model",
            inst.kind, cfg.task_kind
        )));
    }
    if inst.is_empty() {
        return Err(Error::InvalidInput(format!("instance from {} has no clips", inst.video_id)));
    }
    Ok(())
}

fn read_out(params: &TransformerParams, model_cfg: &ModelConfig, cfg: &FinetuneConfig, inst: &BenchmarkInstance) -> Result<Readout> {
    check_instance(cfg, inst)?;
    let d_in = model_cfg.d_in;
    let k = inst.len();
    let extra = usize::from(inst.kind == TaskKind::ShortTerm);
    let mut clips = Array2::zeros((k + extra, d_in));
    for (mut row, f) in clips.rows_mut().into_iter().zip(&inst.features) {
        if f.len() != d_in {
            return Err(Error::Dimension {
                expected: d_in,
                got: f.len(),
            });
        }
        row.assign(&ndarray::ArrayView1::from(f.as_slice()));
    }
    let mask: Vec<usize> = if extra == 1 { vec![k] } else { Vec::new() };
    let token = if cfg.use_task_label {
        Some(
            inst.task_token
                .as_deref()
                .ok_or_else(|| Error::Config("use_task_label is set but the instance has no task token".into()))?,
        )
    } else {
        None
    };
    let offset = match inst.kind {
        TaskKind::LongTerm if cfg.long_term_position => inst.clip_refs.first().map_or(0, |r| r.clip),
        _ => 0,
    };
    let input = SequenceInput::new(clips.view(), &mask)
        .with_cls(true)
        .with_task_token(token.map(ndarray::ArrayView1::from))
        .with_clip_position_offset(offset);
    let trace = forward(params, model_cfg, &input)?;
    let scores = match inst.kind {
        TaskKind::StepCls => vec![trace.logits.row(trace.clip_row(0).expect("clip row")).to_owned()],
        TaskKind::ShortTerm => vec![trace.logits.row(trace.clip_row(k).expect("masked row")).to_owned()],
        TaskKind::MistakeStep => {
            let rows = trace.clip_rows();
            let s: Vec<f64> = rows
                .iter()
                .map(|&r| params.mistake_head.forward_row(trace.hidden.row(r))[0])
                .collect();
            vec![Array1::from(s)]
        }
        TaskKind::MistakeOrder => vec![params.order_head.forward_row(pooled(model_cfg, &trace)?.view())],
        TaskKind::ProcRec => vec![params.task_head.forward_row(pooled(model_cfg, &trace)?.view())],
        TaskKind::LongTerm => {
            let p = pooled(model_cfg, &trace)?;
            params.forecast_heads.iter().map(|h| h.forward_row(p.view())).collect()
        }
    };
    Ok(Readout { trace, scores })
}

fn first_max(v: &Array1<f64>) -> usize {
    argmax(v.as_slice().expect("contiguous scores"))
}

fn prediction_of(kind: TaskKind, scores: &[Array1<f64>], num_labels: usize) -> Prediction {
    match kind {
        TaskKind::StepCls | TaskKind::ShortTerm => Prediction::Label(first_max(&scores[0])),
        TaskKind::MistakeStep => Prediction::Position(first_max(&scores[0])),
        TaskKind::MistakeOrder => Prediction::Permuted(first_max(&scores[0]) == 1),
        TaskKind::ProcRec => Prediction::Task(first_max(&scores[0])),
        TaskKind::LongTerm => {
            let mut slots = [None; FORECAST_SLOTS];
            for (slot, s) in slots.iter_mut().zip(scores) {
                let c = first_max(s);
                *slot = (c < num_labels).then_some(c);
            }
            Prediction::Forecast(slots)
        }
    }
}

pub fn predict(
    params: &TransformerParams,
    model_cfg: &ModelConfig,
    cfg: &FinetuneConfig,
    inst: &BenchmarkInstance,
) -> Result<Prediction> {
    let readout = read_out(params, model_cfg, cfg, inst)?;
    Ok(prediction_of(inst.kind, &readout.scores, model_cfg.num_labels))
}

/// Training class of every slot. Padded forecast slots train towards the
/// extra NULL class.
fn training_targets(target: &Target, num_labels: usize, k: usize) -> Result<Vec<usize>> {
    let targets = match target {
        Target::StepCls(y) | Target::ShortTerm(y) | Target::ProcRec(y) | Target::MistakeStep(y) => vec![*y],
        Target::MistakeOrder { permuted } => vec![usize::from(*permuted)],
        Target::LongTerm(slots) => slots.iter().map(|s| s.unwrap_or(num_labels)).collect(),
    };
    if let Target::MistakeStep(j) = target {
        if *j >= k {
            return Err(Error::InvalidTarget(format!("mistake position {j} outside 0..{k}")));
        }
    }
    Ok(targets)
}

/// Cross-entropy of one instance and its gradient. Only the groups passing
/// `trainable` receive gradient; the transformer backward pass is skipped
/// when it is frozen.
pub fn instance_loss_and_grad(
    params: &TransformerParams,
    model_cfg: &ModelConfig,
    cfg: &FinetuneConfig,
    inst: &BenchmarkInstance,
    trainable: &dyn Fn(ParamGroup) -> bool,
) -> Result<(f64, TransformerParams, Prediction)> {
    let readout = read_out(params, model_cfg, cfg, inst)?;
    let targets = training_targets(&inst.target, model_cfg.num_labels, inst.len())?;
    let mut loss = 0.0;
    let mut d_scores = Vec::with_capacity(targets.len());
    for (s, &y) in readout.scores.iter().zip(&targets) {
        if y >= s.len() {
            return Err(Error::InvalidTarget(format!("class {y} outside 0..{}", s.len())));
        }
        loss -= log_softmax(s.view())[y];
        let mut g = softmax_logits(s.view());
        g[y] -= 1.0;
        d_scores.push(g);
    }
    let trace = &readout.trace;
    let mut head_grads = params.zeros_like();
    let mut d_hidden = Array2::zeros(trace.hidden.dim());
    let mut d_pooled = Array1::zeros(trace.hidden.ncols());
    let row_readout = |head: &Linear, grad: &mut Linear, row: usize, d: &Array1<f64>, d_hidden: &mut Array2<f64>| {
        let dx = head.backward_row(grad, trace.hidden.row(row), d.view());
        let mut r = d_hidden.row_mut(row);
        r += &dx;
    };
    match inst.kind {
        TaskKind::StepCls => row_readout(&params.head, &mut head_grads.head, trace.clip_row(0).expect("clip row"), &d_scores[0], &mut d_hidden),
        TaskKind::ShortTerm => {
            let row = trace.clip_row(inst.len()).expect("masked row");
            row_readout(&params.head, &mut head_grads.head, row, &d_scores[0], &mut d_hidden)
        }
        TaskKind::MistakeStep => {
            for (i, r) in trace.clip_rows().into_iter().enumerate() {
                let d = Array1::from(vec![d_scores[0][i]]);
                row_readout(&params.mistake_head, &mut head_grads.mistake_head, r, &d, &mut d_hidden);
            }
        }
        TaskKind::MistakeOrder | TaskKind::ProcRec | TaskKind::LongTerm => {
            let p = pooled(model_cfg, trace)?;
            let pairs: Vec<(&Linear, &mut Linear)> = match inst.kind {
                TaskKind::MistakeOrder => vec![(&params.order_head, &mut head_grads.order_head)],
                TaskKind::ProcRec => vec![(&params.task_head, &mut head_grads.task_head)],
                _ => params.forecast_heads.iter().zip(head_grads.forecast_heads.iter_mut()).collect(),
            };
            for ((head, grad), d) in pairs.into_iter().zip(&d_scores) {
                d_pooled += &head.backward_row(grad, p.view(), d.view());
            }
            pooled_backward(model_cfg, trace, d_pooled.view(), &mut d_hidden)?;
        }
    }
    let mut grads = if trainable(ParamGroup::Transformer) {
        backward(params, model_cfg, trace, None, Some(d_hidden.view()))?
    } else {
        params.zeros_like()
    };
    grads.add_assign(&head_grads);
    let prediction = prediction_of(inst.kind, &readout.scores, model_cfg.num_labels);
    Ok((loss, grads, prediction))
}

/// Some attention coordinates of single-clip inputs carry gradients near
/// 1e-9, below what central differences resolve; they are compared against
/// this floor instead of their own magnitude.
pub const DOWNSTREAM_GRAD_FLOOR: f64 = 1e-4;

/// Largest relative error between analytic and central-difference
/// gradients of the fine-tuning loss on one instance.
pub fn grad_check(
    params: &TransformerParams,
    model_cfg: &ModelConfig,
    cfg: &FinetuneConfig,
    inst: &BenchmarkInstance,
    epsilon: f64,
    seed_value: u64,
) -> Result<f64> {
    let (_, analytic, _) = instance_loss_and_grad(params, model_cfg, cfg, inst, &|_| true)?;
    grad_check_with(params, &analytic, epsilon, 200, DOWNSTREAM_GRAD_FLOOR, seed_value, |p| {
        instance_loss_and_grad(p, model_cfg, cfg, inst, &|_| false).map(|(l, _, _)| l)
    })
}

pub fn config_digest(model_cfg: &ModelConfig, cfg: &FinetuneConfig) -> Result<String> {
    Ok(seed::digest_hex(serde_json::to_string(&(model_cfg, cfg))?.as_bytes()))
}

/// Fine-tunes a copy of `pretrained` on `dataset`. Each epoch is a seeded
/// shuffle split into mini-batches; per-instance gradients are computed in
/// parallel and summed in instance order.
pub fn finetune(
    pretrained: &TransformerParams,
    model_cfg: &ModelConfig,
    cfg: &FinetuneConfig,
    dataset: &[BenchmarkInstance],
) -> Result<(TransformerParams, TrainReport)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if let Some(bad) = dataset.iter().find(|i| i.kind != cfg.task_kind) {
        return Err(Error::InvalidInput(format!(
            "dataset holds {} instances, config expects {}",
            bad.kind, cfg.task_kind
        )));
    }
    let started = Instant::now();
    let mut params = pretrained.clone();
    let mut optimizer = OptimizerState::new(cfg.optimizer_config(), &params)?;
    let trainable = |g: ParamGroup| cfg.is_trainable(g);
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        config_digest: config_digest(model_cfg, cfg)?,
        seed: cfg.seed,
        wall_time_secs: 0.0,
    };
    for epoch in 0..cfg.epochs {
        let last_good = params.clone();
        let diverged = || Error::Divergence {
            epoch,
            checkpoint: Box::new(last_good.clone()),
        };
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, "finetune-order", epoch as u64));
        let mut loss_sum = 0.0;
        let (mut correct, mut total) = (0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let outcomes: Vec<Result<(f64, TransformerParams, Prediction)>> = batch
                .par_iter()
                .map(|&i| {
                    let inst = jittered(&dataset[i], cfg, epoch, i)?;
                    instance_loss_and_grad(&params, model_cfg, cfg, &inst, &trainable)
                })
                .collect();
            let mut sum: Option<TransformerParams> = None;
            for (outcome, &i) in outcomes.into_iter().zip(batch) {
                let (loss, grads, prediction) = match outcome {
                    Ok(o) if o.0.is_finite() => o,
                    Ok(_) | Err(Error::NonFinite(_)) => return Err(diverged()),
                    Err(e) => return Err(e),
                };
                loss_sum += loss;
                let (c, t) = score(&prediction, &dataset[i].target)?;
                correct += c;
                total += t;
                match sum.as_mut() {
                    Some(acc) => acc.add_assign(&grads),
                    None => sum = Some(grads),
                }
            }
            let mut g = sum.expect("non-empty batch");
            g.scale(1.0 / batch.len() as f64);
            optimizer.step(&mut params, &g, epoch, &trainable)?;
        }
        if !params.is_finite() {
            return Err(diverged());
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / dataset.len() as f64,
            masked_step_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            lr: optimizer.config.lr_at(epoch),
        };
        log::debug!(
            "{} epoch {epoch}: loss {:.4} train acc {:.3}",
            cfg.task_kind,
            record.train_loss,
            record.masked_step_accuracy
        );
        report.epochs.push(record);
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Copy of `inst` with fresh feature noise for this epoch; seeded by epoch
/// and dataset index so parallel batches stay reproducible.
fn jittered<'a>(inst: &'a BenchmarkInstance, cfg: &FinetuneConfig, epoch: usize, index: usize) -> Result<Cow<'a, BenchmarkInstance>> {
    if cfg.feature_jitter == 0.0 {
        return Ok(Cow::Borrowed(inst));
    }
    let normal = Normal::new(0.0, cfg.feature_jitter).map_err(|e| Error::Config(format!("feature_jitter: {e}")))?;
    let mut rng = seed::rng(cfg.seed, &format!("jitter/{epoch}"), index as u64);
    let mut out = inst.clone();
    for x in out.features.iter_mut().flatten() {
        *x += normal.sample(&mut rng);
    }
    Ok(Cow::Owned(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub split: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_digest: Option<String>,
}

/// Accuracy of `params` on `dataset`. Instances are scored in parallel and
/// the integer counts summed, so the result does not depend on order.
pub fn evaluate(
    params: &TransformerParams,
    model_cfg: &ModelConfig,
    cfg: &FinetuneConfig,
    dataset: &[BenchmarkInstance],
    split: &str,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let counts: Vec<Result<(usize, usize)>> = dataset
        .par_iter()
        .map(|inst| predict(params, model_cfg, cfg, inst).and_then(|p| score(&p, &inst.target)))
        .collect();
    let (mut correct, mut total) = (0, 0);
    for c in counts {
        let (a, b) = c?;
        correct += a;
        total += b;
    }
    Ok(EvalReport {
        task: cfg.task_kind,
        split: split.to_string(),
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        config_digest: config_digest(model_cfg, cfg)?,
        corpus_digest: None,
    })
}

/// One CSV row per report.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("task,split,accuracy,correct,total,config_digest\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.6},{},{},{}\n",
            r.task, r.split, r.accuracy, r.correct, r.total, r.config_digest
        ));
    }
    out
}
