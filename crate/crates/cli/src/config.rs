use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use stepmask::benchmarks::{MistakeStepOptions, SplitName, SynthesisOptions, TaskKind};
use stepmask::corpus::CorpusConfig;
use stepmask::downstream::{FinetuneConfig, Mode};
use stepmask::model::{ModelConfig, Pooling};
use stepmask::seed;
use stepmask::training::{MaskSpec, PretrainConfig};

use crate::CliError;

fn default_d_model() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_max_positions() -> usize {
    16
}
fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_true() -> bool {
    true
}
fn default_ratio() -> f64 {
    0.15
}
fn default_split() -> (f64, f64, f64) {
    (0.7, 0.15, 0.15)
}
fn default_half() -> f64 {
    0.5
}

/// Model shape; input width and label counts come from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_true")]
    pub use_positional: bool,
    #[serde(default)]
    pub pooling: Pooling,
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("all model fields have defaults")
    }
}

impl ModelSection {
    pub fn resolve(&self, d_in: usize, num_labels: usize, num_tasks: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            max_positions: self.max_positions,
            num_labels,
            num_tasks,
            mlp_ratio: self.mlp_ratio,
            use_positional: self.use_positional,
            pooling: self.pooling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_true")]
    pub resample_if_empty: bool,
}

impl Default for MaskSection {
    fn default() -> Self {
        MaskSection {
            ratio: default_ratio(),
            resample_if_empty: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    /// Train, validation and test fractions of each task's videos.
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    #[serde(default = "default_half")]
    pub positive_probability: f64,
    #[serde(default)]
    pub same_task_donor: bool,
    #[serde(default = "all_kinds")]
    pub kinds: Vec<TaskKind>,
    /// Mistake-step and mistake-order draws per training video.
    #[serde(default = "default_draws")]
    pub train_draws_per_video: usize,
    /// Same for the validation and test splits.
    #[serde(default = "default_draws")]
    pub eval_draws_per_video: usize,
}

fn default_draws() -> usize {
    1
}

fn all_kinds() -> Vec<TaskKind> {
    TaskKind::ALL.to_vec()
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("all benchmark fields have defaults")
    }
}

impl BenchmarkSection {
    pub fn synthesis(&self, split: SplitName) -> SynthesisOptions {
        SynthesisOptions {
            mistake_step: MistakeStepOptions {
                same_task_donor: self.same_task_donor,
            },
            positive_probability: self.positive_probability,
            draws_per_video: if split == SplitName::Train {
                self.train_draws_per_video
            } else {
                self.eval_draws_per_video
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub benchmarks_dir: PathBuf,
    pub checkpoints_dir: PathBuf,
    pub reports_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub mask: MaskSection,
    pub pretrain: PretrainConfig,
    /// Keyed by task kind; a missing `task_kind` is filled from the key.
    #[serde(default)]
    pub finetune: BTreeMap<TaskKind, FinetuneConfig>,
    #[serde(default)]
    pub benchmarks: BenchmarkSection,
    pub paths: Paths,
}

impl RunConfig {
    /// Reads `path`, applies `--set` overrides and `--seed`, and resolves
    /// relative paths against the config file's directory.
    pub fn load(path: &Path, overrides: &[String], seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Some(s) = seed_override {
            set_path(&mut value, &["seed"], Value::from(s))?;
        }
        fill_finetune_defaults(&mut value);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            CliError::Usage(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.corpus_dir,
            &mut cfg.paths.benchmarks_dir,
            &mut cfg.paths.checkpoints_dir,
            &mut cfg.paths.reports_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.corpus.validate()?;
        for (kind, f) in &self.finetune {
            if f.task_kind != *kind {
                return Err(CliError::Usage(format!(
                    "finetune.{kind}.task_kind is {}, expected {kind}",
                    f.task_kind
                )));
            }
            f.validate()?;
        }
        self.mask_spec().validate()?;
        Ok(())
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            ratio: self.mask.ratio,
            resample_if_empty: self.mask.resample_if_empty,
            seed: seed::derive(self.seed, "mask", 0),
        }
    }

    pub fn finetune_config(&self, kind: TaskKind) -> FinetuneConfig {
        self.finetune.get(&kind).cloned().unwrap_or_else(|| {
            let mut f = FinetuneConfig::new(kind, Mode::Finetune);
            f.seed = finetune_seed(self.seed, kind);
            f
        })
    }

    /// Digest of the resolved configuration.
    pub fn digest(&self) -> String {
        seed::digest_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Fills `task_kind` from each finetune key and a missing `seed` from the
/// global seed, so configured and unconfigured tasks seed alike.
fn fill_finetune_defaults(value: &mut Value) {
    let global = value.get("seed").and_then(Value::as_u64);
    if let Some(Value::Object(map)) = value.get_mut("finetune") {
        for (key, entry) in map.iter_mut() {
            if let Value::Object(fields) = entry {
                fields.entry("task_kind").or_insert_with(|| Value::from(key.clone()));
                let kind: Option<TaskKind> = key.parse().ok();
                if let (Some(global), Some(kind)) = (global, kind) {
                    fields
                        .entry("seed")
                        .or_insert_with(|| Value::from(finetune_seed(global, kind)));
                }
            }
        }
    }
}

fn finetune_seed(global: u64, kind: TaskKind) -> u64 {
    seed::derive(global, "finetune", kind as u64)
}

/// Applies one `section.key=value` override. The value is parsed as JSON
/// and falls back to a plain string.
pub fn apply_override(value: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not of the form key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("override {spec:?} has an empty key")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::from(raw));
    set_path(value, &keys, parsed)
}

fn set_path(value: &mut Value, keys: &[&str], new: Value) -> Result<(), CliError> {
    let mut cur = value;
    for (i, key) in keys.iter().enumerate() {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("`{}` is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            map.insert((*key).to_string(), new);
            return Ok(());
        }
        cur = map.entry((*key).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys is non-empty")
}
