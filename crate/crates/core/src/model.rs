//! Step transformer: input projection, mask/CLS tokens, learnable positional
//! encodings, pre-norm self-attention blocks, the step-label head and the
//! downstream heads, with a forward pass that caches every intermediate
//! needed for exact reverse-mode differentiation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const FORECAST_SLOTS: usize = 5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
    /// Size of the step-label vocabulary.
    pub num_labels: usize,
    /// Number of task (procedure) classes for the recognition head.
    pub num_tasks: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_true")]
    pub use_positional: bool,
    #[serde(default)]
    pub pooling: Pooling,
}

impl ModelConfig {
    /// Default desk-scale model.
    pub fn desk(d_in: usize, num_labels: usize, num_tasks: usize) -> Self {
        ModelConfig {
            d_in,
            d_model: 64,
            layers: 2,
            heads: 4,
            max_positions: 16,
            num_labels,
            num_tasks,
            mlp_ratio: 4.0,
            use_positional: true,
            pooling: Pooling::Cls,
        }
    }

    /// Small model used for finite-difference gradient checks.
    pub fn gradcheck(d_in: usize, num_labels: usize, num_tasks: usize) -> Self {
        ModelConfig {
            d_model: 16,
            heads: 2,
            max_positions: 8,
            ..Self::desk(d_in, num_labels, num_tasks)
        }
    }

    /// Two layers, width 768, 12 heads, 12 segments plus CLS and task token.
    pub fn full(d_in: usize, num_labels: usize, num_tasks: usize) -> Self {
        ModelConfig {
            d_in,
            d_model: 768,
            layers: 2,
            heads: 12,
            max_positions: 14,
            num_labels,
            num_tasks,
            mlp_ratio: 4.0,
            use_positional: true,
            pooling: Pooling::Cls,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.d_model as f64) * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_in == 0 || self.d_model == 0 || self.num_labels == 0 || self.num_tasks == 0 {
            return fail("d_in, d_model, num_labels and num_tasks must be positive");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail("d_model must be divisible by heads");
        }
        if self.layers == 0 {
            return fail("layers must be at least 1");
        }
        if self.max_positions < 3 {
            return fail("max_positions must leave room for CLS, task token and a clip");
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail("mlp_ratio must be positive");
        }
        Ok(())
    }
}

/// Affine map `x W + b` with `W` stored as in × out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn forward_row(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, grad: &mut Linear, input: ArrayView2<f64>, d_out: ArrayView2<f64>) -> Array2<f64> {
        grad.weight += &input.t().dot(&d_out);
        grad.bias += &d_out.sum_axis(Axis(0));
        d_out.dot(&self.weight.t())
    }

    /// Single-row version of [`Linear::backward`].
    pub fn backward_row(&self, grad: &mut Linear, input: ArrayView1<f64>, d_out: ArrayView1<f64>) -> Array1<f64> {
        outer_add(&mut grad.weight, input, d_out);
        grad.bias += &d_out;
        self.weight.dot(&d_out)
    }
}

fn outer_add(target: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            target.row_mut(i).scaled_add(ai, &b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let dim = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / dim;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / dim;
            *r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *r;
        }
        let out = &xhat * &self.gain + &self.bias;
        (out, LayerNormCache { xhat, rstd })
    }

    fn backward(&self, grad: &mut LayerNorm, cache: &LayerNormCache, d_out: ArrayView2<f64>) -> Array2<f64> {
        grad.gain += &(&d_out * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &d_out.sum_axis(Axis(0));
        let dim = d_out.ncols() as f64;
        let mut dx = &d_out * &self.gain;
        for ((mut row, xhat), &rstd) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
            let mean_d = row.sum() / dim;
            let mean_dx = row.dot(&xhat) / dim;
            Zip::from(&mut row)
                .and(&xhat)
                .for_each(|d, &xh| *d = rstd * (*d - mean_d - xh * mean_dx));
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub query: Linear,
    /// No bias: it would add the same amount to every score in a row and
    /// cancel in the softmax.
    pub key: Array2<f64>,
    pub value: Linear,
    pub output: Linear,
    pub ln_mlp: LayerNorm,
    pub fc_in: Linear,
    pub fc_out: Linear,
}

impl Block {
    fn zeros(d: usize, hidden: usize) -> Self {
        Block {
            ln_attn: LayerNorm::zeros(d),
            query: Linear::zeros(d, d),
            key: Array2::zeros((d, d)),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
            ln_mlp: LayerNorm::zeros(d),
            fc_in: Linear::zeros(d, hidden),
            fc_out: Linear::zeros(hidden, d),
        }
    }
}

/// Which optimizer group a parameter array belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Everything inside the step transformer: projection, tokens,
    /// positional encodings and blocks.
    Transformer,
    StepHead,
    TaskHead,
    OrderHead,
    MistakeHead,
    ForecastHeads,
}

pub struct ParamView<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub data: ArrayViewD<'a, f64>,
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub data: ArrayViewMutD<'a, f64>,
}

/// All learnable arrays. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub input_projection: Linear,
    pub mask_token: Array1<f64>,
    pub cls_token: Array1<f64>,
    pub positional: Array2<f64>,
    pub blocks: Vec<Block>,
    pub head: Linear,
    pub task_head: Linear,
    pub order_head: Linear,
    pub mistake_head: Linear,
    pub forecast_heads: Vec<Linear>,
}

macro_rules! visit_params {
    ($self:ident, $view:ident, $conv:ident, $iter:ident, $push:ident) => {{
        use ParamGroup::*;
        let mut out = Vec::new();
        let mut $push = |name: String, group: ParamGroup, data| out.push($view { name, group, data });
        $push("input_projection.weight".into(), Transformer, $self.input_projection.weight.$conv().into_dyn());
        $push("input_projection.bias".into(), Transformer, $self.input_projection.bias.$conv().into_dyn());
        $push("mask_token".into(), Transformer, $self.mask_token.$conv().into_dyn());
        $push("cls_token".into(), Transformer, $self.cls_token.$conv().into_dyn());
        $push("positional".into(), Transformer, $self.positional.$conv().into_dyn());
        for (l, b) in $self.blocks.$iter().enumerate() {
            let p = |n: &str| format!("blocks.{l}.{n}");
            $push(p("ln_attn.gain"), Transformer, b.ln_attn.gain.$conv().into_dyn());
            $push(p("ln_attn.bias"), Transformer, b.ln_attn.bias.$conv().into_dyn());
            $push(p("query.weight"), Transformer, b.query.weight.$conv().into_dyn());
            $push(p("query.bias"), Transformer, b.query.bias.$conv().into_dyn());
            $push(p("key.weight"), Transformer, b.key.$conv().into_dyn());
            $push(p("value.weight"), Transformer, b.value.weight.$conv().into_dyn());
            $push(p("value.bias"), Transformer, b.value.bias.$conv().into_dyn());
            $push(p("output.weight"), Transformer, b.output.weight.$conv().into_dyn());
            $push(p("output.bias"), Transformer, b.output.bias.$conv().into_dyn());
            $push(p("ln_mlp.gain"), Transformer, b.ln_mlp.gain.$conv().into_dyn());
            $push(p("ln_mlp.bias"), Transformer, b.ln_mlp.bias.$conv().into_dyn());
            $push(p("fc_in.weight"), Transformer, b.fc_in.weight.$conv().into_dyn());
            $push(p("fc_in.bias"), Transformer, b.fc_in.bias.$conv().into_dyn());
            $push(p("fc_out.weight"), Transformer, b.fc_out.weight.$conv().into_dyn());
            $push(p("fc_out.bias"), Transformer, b.fc_out.bias.$conv().into_dyn());
        }
        $push("head.weight".into(), StepHead, $self.head.weight.$conv().into_dyn());
        $push("head.bias".into(), StepHead, $self.head.bias.$conv().into_dyn());
        $push("task_head.weight".into(), TaskHead, $self.task_head.weight.$conv().into_dyn());
        $push("task_head.bias".into(), TaskHead, $self.task_head.bias.$conv().into_dyn());
        $push("order_head.weight".into(), OrderHead, $self.order_head.weight.$conv().into_dyn());
        $push("order_head.bias".into(), OrderHead, $self.order_head.bias.$conv().into_dyn());
        $push("mistake_head.weight".into(), MistakeHead, $self.mistake_head.weight.$conv().into_dyn());
        $push("mistake_head.bias".into(), MistakeHead, $self.mistake_head.bias.$conv().into_dyn());
        for (s, h) in $self.forecast_heads.$iter().enumerate() {
            $push(format!("forecast_heads.{s}.weight"), ForecastHeads, h.weight.$conv().into_dyn());
            $push(format!("forecast_heads.{s}.bias"), ForecastHeads, h.bias.$conv().into_dyn());
        }
        out
    }};
}

impl TransformerParams {
    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        TransformerParams {
            input_projection: Linear::zeros(cfg.d_in, d),
            mask_token: Array1::zeros(d),
            cls_token: Array1::zeros(d),
            positional: Array2::zeros((cfg.max_positions, d)),
            blocks: (0..cfg.layers).map(|_| Block::zeros(d, cfg.mlp_hidden())).collect(),
            head: Linear::zeros(d, cfg.num_labels),
            task_head: Linear::zeros(d, cfg.num_tasks),
            order_head: Linear::zeros(d, 2),
            mistake_head: Linear::zeros(d, 1),
            forecast_heads: (0..FORECAST_SLOTS)
                .map(|_| Linear::zeros(d, cfg.num_labels + 1))
                .collect(),
        }
    }

    /// Weights, tokens and positional encodings ~ N(0, 0.02²); biases 0;
    /// layer-norm gains 1. Every array draws from its own seeded stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = Self::zeros(cfg);
        for b in params.blocks.iter_mut() {
            b.ln_attn = LayerNorm::new(cfg.d_model);
            b.ln_mlp = LayerNorm::new(cfg.d_model);
        }
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for view in params.tensors_mut() {
            let is_random = !(view.name.ends_with(".bias") || view.name.ends_with(".gain"));
            if is_random {
                let mut rng = seed::rng(seed, &view.name, 0);
                let mut data = view.data;
                data.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            }
        }
        Ok(params)
    }

    pub fn tensors(&self) -> Vec<ParamView<'_>> {
        visit_params!(self, ParamView, view, iter, push)
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        visit_params!(self, ParamViewMut, view_mut, iter_mut, push)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for mut t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    pub fn scale(&mut self, factor: f64) {
        for mut t in self.tensors_mut() {
            t.data.mapv_inplace(|x| x * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (mut a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.data += &b.data;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// SHA-256 over the little-endian bytes of every array in `groups`.
    pub fn digest_groups(&self, groups: &[ParamGroup]) -> String {
        let mut bytes = Vec::new();
        for t in self.tensors() {
            if groups.contains(&t.group) {
                bytes.extend(t.name.as_bytes());
                for x in t.data.iter() {
                    bytes.extend(x.to_le_bytes());
                }
            }
        }
        seed::digest_hex(&bytes)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().map(|x| x.abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }
}

/// Kind of each row in the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Cls,
    Task,
    Clip(usize),
    Masked(usize),
}

/// One sequence to encode.
#[derive(Debug, Clone)]
pub struct SequenceInput<'a> {
    /// K × d_in clip features.
    pub clips: ArrayView2<'a, f64>,
    /// Clip indices whose content is replaced by the mask token.
    pub mask: &'a [usize],
    pub prepend_cls: bool,
    pub task_token: Option<ArrayView1<'a, f64>>,
    /// Added to the positional index of every clip row.
    pub clip_position_offset: usize,
}

impl<'a> SequenceInput<'a> {
    pub fn new(clips: ArrayView2<'a, f64>, mask: &'a [usize]) -> Self {
        SequenceInput {
            clips,
            mask,
            prepend_cls: false,
            task_token: None,
            clip_position_offset: 0,
        }
    }

    pub fn with_cls(mut self, cls: bool) -> Self {
        self.prepend_cls = cls;
        self
    }

    pub fn with_task_token(mut self, token: Option<ArrayView1<'a, f64>>) -> Self {
        self.task_token = token;
        self
    }

    pub fn with_clip_position_offset(mut self, offset: usize) -> Self {
        self.clip_position_offset = offset;
        self
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    ln_attn: LayerNormCache,
    normed_attn: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    mid: Array2<f64>,
    ln_mlp: LayerNormCache,
    normed_mlp: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Output of [`forward`] with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<Token>,
    pub positions: Vec<usize>,
    /// T × D outputs of the final block.
    pub hidden: Array2<f64>,
    /// T × S step-label logits.
    pub logits: Array2<f64>,
    clips: Array2<f64>,
    task_input: Option<Array1<f64>>,
    layers: Vec<LayerCache>,
}

impl ForwardTrace {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Row of clip `i` (masked or not).
    pub fn clip_row(&self, i: usize) -> Option<usize> {
        self.tokens
            .iter()
            .position(|t| matches!(t, Token::Clip(j) | Token::Masked(j) if *j == i))
    }

    pub fn cls_row(&self) -> Option<usize> {
        self.tokens.iter().position(|t| *t == Token::Cls)
    }

    /// Attention probabilities of layer `layer`, head `head` (T × T).
    pub fn attention(&self, layer: usize, head: usize) -> Option<&Array2<f64>> {
        self.layers.get(layer).and_then(|l| l.probs.get(head))
    }

    /// Rows holding clips, in clip order.
    pub fn clip_rows(&self) -> Vec<usize> {
        let mut rows: Vec<(usize, usize)> = self
            .tokens
            .iter()
            .enumerate()
            .filter_map(|(r, t)| match t {
                Token::Clip(i) | Token::Masked(i) => Some((*i, r)),
                _ => None,
            })
            .collect();
        rows.sort_unstable();
        rows.into_iter().map(|(_, r)| r).collect()
    }

    /// Bitwise equality of every observable and cached array.
    pub fn bit_equal(&self, other: &Self) -> bool {
        fn same(a: &Array2<f64>, b: &Array2<f64>) -> bool {
            a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.tokens == other.tokens
            && self.positions == other.positions
            && same(&self.hidden, &other.hidden)
            && same(&self.logits, &other.logits)
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                same(&a.input, &b.input)
                    && same(&a.q, &b.q)
                    && same(&a.k, &b.k)
                    && same(&a.v, &b.v)
                    && same(&a.mid, &b.mid)
                    && same(&a.act, &b.act)
                    && a.probs.iter().zip(&b.probs).all(|(x, y)| same(x, y))
            })
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Max-subtracted softmax of one logit vector.
pub fn softmax_logits(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.mapv(|x| (x - max).exp());
    let total = p.sum();
    p /= total;
    p
}

/// Natural log of the softmax.
pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.mapv(|x| x - lse)
}

fn check_finite(a: &Array2<f64>, what: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// Encodes one sequence.
pub fn forward(params: &TransformerParams, cfg: &ModelConfig, input: &SequenceInput<'_>) -> Result<ForwardTrace> {
    let k = input.clips.nrows();
    if input.clips.ncols() != cfg.d_in {
        return Err(Error::Dimension {
            expected: cfg.d_in,
            got: input.clips.ncols(),
        });
    }
    let reserved = usize::from(input.prepend_cls) + usize::from(input.task_token.is_some());
    let total = reserved + k;
    let last_position = reserved + input.clip_position_offset + k;
    if k == 0 || last_position > cfg.max_positions {
        return Err(Error::Capacity {
            tokens: last_position.max(total),
            capacity: cfg.max_positions,
        });
    }
    if let Some(&bad) = input.mask.iter().find(|&&i| i >= k) {
        return Err(Error::InvalidInput(format!("mask index {bad} outside 0..{k}")));
    }
    if let Some(t) = &input.task_token {
        if t.len() != cfg.d_in {
            return Err(Error::Dimension {
                expected: cfg.d_in,
                got: t.len(),
            });
        }
    }

    let d = cfg.d_model;
    let mut tokens = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    let mut x = Array2::zeros((total, d));
    let mut row = 0;
    if input.prepend_cls {
        tokens.push(Token::Cls);
        positions.push(row);
        x.row_mut(row).assign(&params.cls_token);
        row += 1;
    }
    if let Some(t) = &input.task_token {
        tokens.push(Token::Task);
        positions.push(row);
        x.row_mut(row).assign(&params.input_projection.forward_row(t.view()));
        row += 1;
    }
    for i in 0..k {
        positions.push(reserved + input.clip_position_offset + i);
        if input.mask.contains(&i) {
            tokens.push(Token::Masked(i));
            x.row_mut(row).assign(&params.mask_token);
        } else {
            tokens.push(Token::Clip(i));
            x.row_mut(row).assign(&params.input_projection.forward_row(input.clips.row(i)));
        }
        row += 1;
    }
    if cfg.use_positional {
        for (r, &p) in positions.iter().enumerate() {
            let mut xr = x.row_mut(r);
            xr += &params.positional.row(p);
        }
    }

    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(params.blocks.len());
    for (l, block) in params.blocks.iter().enumerate() {
        let (normed_attn, ln_attn) = block.ln_attn.forward(x.view());
        let q = block.query.forward(normed_attn.view());
        let kk = normed_attn.dot(&block.key);
        let v = block.value.forward(normed_attn.view());
        let mut context = Array2::zeros((total, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&kk.slice(cols).t());
            scores *= scale;
            for mut r in scores.rows_mut() {
                let p = softmax_logits(r.view());
                r.assign(&p);
            }
            context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let mid = &x + &block.output.forward(context.view());
        let (normed_mlp, ln_mlp) = block.ln_mlp.forward(mid.view());
        let pre_act = block.fc_in.forward(normed_mlp.view());
        let act = pre_act.mapv(gelu);
        let out = &mid + &block.fc_out.forward(act.view());
        check_finite(&out, || format!("block {l}"))?;
        layers.push(LayerCache {
            input: std::mem::replace(&mut x, out),
            ln_attn,
            normed_attn,
            q,
            k: kk,
            v,
            probs,
            context,
            mid,
            ln_mlp,
            normed_mlp,
            pre_act,
            act,
        });
    }
    let logits = params.head.forward(x.view());
    check_finite(&logits, || "step head".into())?;
    Ok(ForwardTrace {
        tokens,
        positions,
        hidden: x,
        logits,
        clips: input.clips.to_owned(),
        task_input: input.task_token.map(|t| t.to_owned()),
        layers,
    })
}

/// Sequence-level representation: the CLS row or the mean over clip rows.
pub fn pooled(cfg: &ModelConfig, trace: &ForwardTrace) -> Result<Array1<f64>> {
    match cfg.pooling {
        Pooling::Cls => trace
            .cls_row()
            .map(|r| trace.hidden.row(r).to_owned())
            .ok_or_else(|| Error::Trace("CLS pooling needs a CLS token".into())),
        Pooling::Mean => {
            let rows = trace.clip_rows();
            let mut acc = Array1::zeros(trace.hidden.ncols());
            for &r in &rows {
                acc += &trace.hidden.row(r);
            }
            Ok(acc / rows.len() as f64)
        }
    }
}

/// Adds the gradient of [`pooled`] w.r.t. the hidden states into `d_hidden`.
pub fn pooled_backward(
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    d_pooled: ArrayView1<f64>,
    d_hidden: &mut Array2<f64>,
) -> Result<()> {
    match cfg.pooling {
        Pooling::Cls => {
            let r = trace
                .cls_row()
                .ok_or_else(|| Error::Trace("CLS pooling needs a CLS token".into()))?;
            let mut row = d_hidden.row_mut(r);
            row += &d_pooled;
        }
        Pooling::Mean => {
            let rows = trace.clip_rows();
            let w = 1.0 / rows.len() as f64;
            for r in rows {
                d_hidden.row_mut(r).scaled_add(w, &d_pooled);
            }
        }
    }
    Ok(())
}

/// Reverse-mode gradients of a scalar loss given its gradient w.r.t. the
/// step-head logits and/or the hidden states. Heads other than the step
/// head receive zero gradient here; callers owning them add their own.
pub fn backward(
    params: &TransformerParams,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    d_logits: Option<ArrayView2<f64>>,
    d_hidden: Option<ArrayView2<f64>>,
) -> Result<TransformerParams> {
    let t = trace.num_tokens();
    let d = cfg.d_model;
    if trace.layers.len() != params.blocks.len() || trace.hidden.dim() != (t, d) {
        return Err(Error::Trace("trace does not match the parameters".into()));
    }
    let mut grads = TransformerParams::zeros(cfg);
    let mut dx: Array2<f64> = match d_hidden {
        Some(g) if g.dim() != (t, d) => {
            return Err(Error::Trace(format!("hidden gradient has shape {:?}, trace has {:?}", g.dim(), (t, d))))
        }
        Some(g) => g.to_owned(),
        None => Array2::zeros((t, d)),
    };
    if let Some(g) = d_logits {
        if g.dim() != (t, cfg.num_labels) {
            return Err(Error::Trace(format!(
                "logit gradient has shape {:?}, trace has {:?}",
                g.dim(),
                trace.logits.dim()
            )));
        }
        dx += &params.head.backward(&mut grads.head, trace.hidden.view(), g);
    }

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for (l, (block, cache)) in params.blocks.iter().zip(&trace.layers).enumerate().rev() {
        let g = &mut grads.blocks[l];
        // MLP branch
        let d_act = block.fc_out.backward(&mut g.fc_out, cache.act.view(), dx.view());
        let d_pre = &d_act * &cache.pre_act.mapv(gelu_derivative);
        let d_normed_mlp = block.fc_in.backward(&mut g.fc_in, cache.normed_mlp.view(), d_pre.view());
        let d_mid = &dx + &block.ln_mlp.backward(&mut g.ln_mlp, &cache.ln_mlp, d_normed_mlp.view());
        // attention branch
        let d_context = block.output.backward(&mut g.output, cache.context.view(), d_mid.view());
        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dc = d_context.slice(cols);
            let dp = dc.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dc));
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let inner = row.sum();
                Zip::from(&mut row).and(&prow).for_each(|x, &pp| *x -= pp * inner);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut d_normed_attn = block.query.backward(&mut g.query, cache.normed_attn.view(), dq.view());
        g.key += &cache.normed_attn.t().dot(&dk);
        d_normed_attn += &dk.dot(&block.key.t());
        d_normed_attn += &block.value.backward(&mut g.value, cache.normed_attn.view(), dv.view());
        dx = &d_mid + &block.ln_attn.backward(&mut g.ln_attn, &cache.ln_attn, d_normed_attn.view());
    }

    for (r, token) in trace.tokens.iter().enumerate() {
        let row = dx.row(r);
        if cfg.use_positional {
            let mut p = grads.positional.row_mut(trace.positions[r]);
            p += &row;
        }
        match token {
            Token::Cls => grads.cls_token += &row,
            Token::Masked(_) => grads.mask_token += &row,
            Token::Task => {
                let input = trace
                    .task_input
                    .as_ref()
                    .ok_or_else(|| Error::Trace("task row without task input".into()))?;
                params
                    .input_projection
                    .backward_row(&mut grads.input_projection, input.view(), row);
            }
            Token::Clip(i) => {
                params
                    .input_projection
                    .backward_row(&mut grads.input_projection, trace.clips.row(*i), row);
            }
        }
    }
    Ok(grads)
}
