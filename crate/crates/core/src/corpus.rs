//! Procedural-task corpora: synthetic generation from a task grammar and
//! loading of COIN-style step annotations.
//!
//! A clip feature stands in for a frozen video backbone: the embedding of the
//! realized step (zero-padded or truncated to `feature_dim`) plus isotropic
//! Gaussian noise. Features are rounded to `f32` so the binary sidecar
//! round-trips exactly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::weaklabel::{
    weak_label_distribution, EmbedderSpec, LabelDistribution, StepEntry, StepVocabulary,
    TextEmbedder,
};

pub const FEATURE_MAGIC: &[u8; 4] = b"STPF";
pub const FEATURE_VERSION: u32 = 1;

const VERBS: &[&str] = &[
    "whisk", "pour", "cut", "drill", "attach", "remove", "tighten", "sand", "paint", "mix",
    "heat", "fold", "press", "rinse", "measure", "insert", "align", "peel", "spread", "clamp",
];
const NOUNS: &[&str] = &[
    "batter", "bread", "board", "screw", "valve", "tire", "glue", "paper", "lid", "frame",
    "nozzle", "cable", "sauce", "dough", "shelf", "hinge", "filter", "string", "lock", "panel",
    "bolt", "pipe", "fabric", "tile", "brush",
];
const FILLERS: &[&str] = &["uh", "um", "so", "okay", "like", "right", "now", "just"];

fn default_k() -> usize {
    5
}
fn default_embed_dim() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_tasks: usize,
    /// Maximum (and, without `min_steps_per_task`, exact) template length.
    pub steps_per_task: usize,
    /// When set, each template length is uniform in `[min, steps_per_task]`.
    #[serde(default)]
    pub min_steps_per_task: Option<usize>,
    pub vocab_size: usize,
    pub videos_per_task: usize,
    #[serde(default)]
    pub feature_noise_sigma: f64,
    #[serde(default)]
    pub asr_noise: f64,
    pub feature_dim: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub skip_probability: f64,
    /// Fraction of template positions that receive one alternative label.
    #[serde(default)]
    pub alternative_rate: f64,
    /// Probability that a template position reuses a label of another task.
    #[serde(default)]
    pub label_share_rate: f64,
    /// Number of label pairs whose clip features share one prototype.
    #[serde(default)]
    pub ambiguous_twins: usize,
    #[serde(default = "default_k")]
    pub topk: usize,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_tasks == 0 {
            return fail("num_tasks must be positive");
        }
        if self.steps_per_task < 2 {
            return fail("steps_per_task must be at least 2");
        }
        if let Some(min) = self.min_steps_per_task {
            if min < 2 || min > self.steps_per_task {
                return fail("min_steps_per_task must lie in [2, steps_per_task]");
            }
        }
        if self.vocab_size < self.num_tasks {
            return fail("vocab_size must be at least num_tasks");
        }
        if self.feature_dim == 0 || self.embed_dim == 0 {
            return fail("feature_dim and embed_dim must be positive");
        }
        if !(self.feature_noise_sigma >= 0.0) {
            return fail("feature_noise_sigma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.asr_noise) {
            return fail("asr_noise must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.skip_probability) {
            return fail("skip_probability must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alternative_rate) || !(0.0..=1.0).contains(&self.label_share_rate) {
            return fail("alternative_rate and label_share_rate must lie in [0, 1]");
        }
        if 2 * self.ambiguous_twins > self.num_tasks {
            return fail("ambiguous_twins needs two tasks per pair");
        }
        if self.topk == 0 {
            return fail("topk must be at least 1");
        }
        Ok(())
    }

    pub fn embedder_spec(&self) -> EmbedderSpec {
        EmbedderSpec::Synthetic {
            seed: self.seed,
            dim: self.embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub task_id: usize,
    pub name: String,
    pub canonical_steps: Vec<usize>,
    pub alternatives: BTreeMap<usize, Vec<usize>>,
    pub skip_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub feature: Vec<f64>,
    pub asr: String,
    pub weak: LabelDistribution,
    pub truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub task_id: usize,
    pub clips: Vec<Clip>,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.truth).collect()
    }
}

/// Zero-pads or truncates `v` to `dim` components.
pub fn fit_dim(v: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let n = dim.min(v.len());
    out[..n].copy_from_slice(&v[..n]);
    out
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Deterministic vocabulary of `size` steps with unique titles. The
/// description equals the title, so clean ASR matches its own step.
pub fn synthetic_vocabulary(size: usize, embedder: &TextEmbedder) -> Result<StepVocabulary> {
    let per_round = VERBS.len() * NOUNS.len();
    let entries = (0..size)
        .map(|i| {
            let verb = VERBS[i % VERBS.len()];
            let noun = NOUNS[(i / VERBS.len()) % NOUNS.len()];
            let mut title = format!("{verb} the {noun}");
            if i >= per_round {
                title.push_str(&format!(" again {}", i / per_round));
            }
            StepEntry {
                id: i,
                title: title.clone(),
                description: title,
            }
        })
        .collect();
    StepVocabulary::new(entries, embedder)
}

pub fn generate_task_library(cfg: &CorpusConfig, vocab: &StepVocabulary) -> Result<Vec<TaskTemplate>> {
    cfg.validate()?;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} steps but vocab_size is {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    let mut rng = seed::rng(cfg.seed, "library", 0);
    let mut pool: Vec<usize> = (0..vocab.len()).collect();
    pool.shuffle(&mut rng);
    let mut pool = pool.into_iter();
    let mut used: Vec<usize> = Vec::new();
    let mut templates = Vec::with_capacity(cfg.num_tasks);

    for task_id in 0..cfg.num_tasks {
        let len = match cfg.min_steps_per_task {
            Some(min) => rng.random_range(min..=cfg.steps_per_task),
            None => cfg.steps_per_task,
        };
        let mut steps: Vec<usize> = Vec::with_capacity(len);
        for _ in 0..len {
            let share = rng.random::<f64>() < cfg.label_share_rate;
            let shareable: Vec<usize> = used.iter().copied().filter(|l| !steps.contains(l)).collect();
            let label = if share && !shareable.is_empty() {
                shareable[rng.random_range(0..shareable.len())]
            } else {
                let label = pool.next().ok_or_else(|| {
                    Error::Config(format!(
                        "vocabulary of {} steps is too small for {} tasks of {} steps",
                        vocab.len(),
                        cfg.num_tasks,
                        cfg.steps_per_task
                    ))
                })?;
                used.push(label);
                label
            };
            steps.push(label);
        }
        let mut alternatives = BTreeMap::new();
        for (pos, &canonical) in steps.iter().enumerate() {
            if rng.random::<f64>() >= cfg.alternative_rate {
                continue;
            }
            let alt = match pool.next() {
                Some(fresh) => {
                    used.push(fresh);
                    fresh
                }
                None => {
                    let others: Vec<usize> = (0..vocab.len()).filter(|l| !steps.contains(l)).collect();
                    if others.is_empty() {
                        continue;
                    }
                    others[rng.random_range(0..others.len())]
                }
            };
            debug_assert_ne!(alt, canonical);
            alternatives.insert(pos, vec![alt]);
        }
        templates.push(TaskTemplate {
            task_id,
            name: format!("task-{task_id}"),
            canonical_steps: steps,
            alternatives,
            skip_probability: cfg.skip_probability,
        });
    }
    Ok(templates)
}

/// Label whose embedding serves as each label's feature prototype. Twin
/// pairs place one label of task `2t` and one of task `2t + 1` at different
/// template positions and give them a single prototype.
pub fn prototype_sources(
    cfg: &CorpusConfig,
    templates: &[TaskTemplate],
    vocab_size: usize,
) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
    let mut sources: Vec<usize> = (0..vocab_size).collect();
    let mut twins = Vec::new();
    for t in 0..cfg.ambiguous_twins {
        let a_task = &templates[2 * t];
        let b_task = &templates[2 * t + 1];
        let a_pos = t % a_task.canonical_steps.len();
        let b_pos = (t + 1) % b_task.canonical_steps.len();
        let a = a_task.canonical_steps[a_pos];
        let b = b_task.canonical_steps[b_pos];
        if a == b || sources[a] != a || sources[b] != b {
            return Err(Error::Config(format!(
                "cannot form ambiguous twin pair {t} from labels {a} and {b}"
            )));
        }
        sources[b] = a;
        twins.push((a, b));
    }
    Ok((sources, twins))
}

fn corrupt_asr(title: &str, noise: f64, rng: &mut impl Rng) -> String {
    title
        .split_whitespace()
        .map(|tok| {
            if noise > 0.0 && rng.random::<f64>() < noise {
                FILLERS[rng.random_range(0..FILLERS.len())].to_string()
            } else {
                tok.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Everything needed to realize clips for a vocabulary.
pub struct ClipFactory<'a> {
    pub vocab: &'a StepVocabulary,
    pub embedder: &'a TextEmbedder,
    pub prototype_source: &'a [usize],
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub asr_noise: f64,
    pub topk: usize,
}

impl ClipFactory<'_> {
    pub fn prototype(&self, label: usize) -> Result<Vec<f64>> {
        let source = *self
            .prototype_source
            .get(label)
            .ok_or(Error::VocabularyMismatch {
                label,
                vocab_size: self.vocab.len(),
            })?;
        let step = self.vocab.step(source).ok_or(Error::VocabularyMismatch {
            label: source,
            vocab_size: self.vocab.len(),
        })?;
        Ok(fit_dim(&step.embedding, self.feature_dim)
            .into_iter()
            .map(round_f32)
            .collect())
    }

    pub fn clip(&self, label: usize, rng: &mut impl Rng) -> Result<Clip> {
        let mut feature = self.prototype(label)?;
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma)
                .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
            for x in feature.iter_mut() {
                *x = round_f32(*x + normal.sample(rng));
            }
        }
        let title = &self.vocab.step(label).expect("checked by prototype").title;
        let asr = corrupt_asr(title, self.asr_noise, rng);
        let weak = weak_label_distribution(&asr, self.vocab, self.embedder, self.topk)?;
        Ok(Clip {
            feature,
            asr,
            weak,
            truth: label,
        })
    }
}

/// Realizes one video from a template; deterministic in `draw_seed`.
pub fn sample_video(
    template: &TaskTemplate,
    factory: &ClipFactory<'_>,
    video_id: String,
    draw_seed: u64,
) -> Result<VideoRecord> {
    let mut rng = seed::rng(draw_seed, "video", 0);
    let len = template.canonical_steps.len();
    let mut labels = Vec::with_capacity(len);
    for (pos, &canonical) in template.canonical_steps.iter().enumerate() {
        let remaining_after = len - pos - 1;
        let drop = rng.random::<f64>() < template.skip_probability;
        if drop && labels.len() + remaining_after >= 2 {
            continue;
        }
        let label = match template.alternatives.get(&pos) {
            Some(alts) if !alts.is_empty() => {
                let pick = rng.random_range(0..=alts.len());
                if pick == 0 {
                    canonical
                } else {
                    alts[pick - 1]
                }
            }
            _ => canonical,
        };
        labels.push(label);
    }
    let clips = labels
        .into_iter()
        .map(|label| factory.clip(label, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoRecord {
        video_id,
        task_id: template.task_id,
        clips,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub embedder: EmbedderSpec,
    pub templates: Vec<TaskTemplate>,
    pub prototype_source: Vec<usize>,
    pub twins: Vec<(usize, usize)>,
    pub num_videos: usize,
    pub digest: String,
}

/// A generated or loaded corpus with its vocabulary and task grammar.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub embedder: TextEmbedder,
    pub embedder_spec: EmbedderSpec,
    pub vocab: StepVocabulary,
    pub templates: Vec<TaskTemplate>,
    pub prototype_source: Vec<usize>,
    pub twins: Vec<(usize, usize)>,
    pub videos: Vec<VideoRecord>,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.embedder_spec();
        let embedder = TextEmbedder::from_spec(&spec)?;
        let vocab = synthetic_vocabulary(cfg.vocab_size, &embedder)?;
        let templates = generate_task_library(cfg, &vocab)?;
        let (prototype_source, twins) = prototype_sources(cfg, &templates, vocab.len())?;
        let factory = ClipFactory {
            vocab: &vocab,
            embedder: &embedder,
            prototype_source: &prototype_source,
            feature_dim: cfg.feature_dim,
            noise_sigma: cfg.feature_noise_sigma,
            asr_noise: cfg.asr_noise,
            topk: cfg.topk,
        };
        let mut videos = Vec::with_capacity(cfg.num_tasks * cfg.videos_per_task);
        for template in &templates {
            for v in 0..cfg.videos_per_task {
                let id = format!("v{:03}-{:04}", template.task_id, v);
                let draw = seed::derive(cfg.seed, "draw", (template.task_id * 1_000_003 + v) as u64);
                videos.push(sample_video(template, &factory, id, draw)?);
            }
        }
        Ok(Corpus {
            config: cfg.clone(),
            embedder,
            embedder_spec: spec,
            vocab,
            templates,
            prototype_source,
            twins,
            videos,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.templates.len()
    }

    pub fn task_name(&self, task_id: usize) -> String {
        self.templates
            .get(task_id)
            .map_or_else(|| format!("task-{task_id}"), |t| t.name.clone())
    }

    pub fn clip_factory(&self) -> ClipFactory<'_> {
        ClipFactory {
            vocab: &self.vocab,
            embedder: &self.embedder,
            prototype_source: &self.prototype_source,
            feature_dim: self.config.feature_dim,
            noise_sigma: self.config.feature_noise_sigma,
            asr_noise: self.config.asr_noise,
            topk: self.config.topk,
        }
    }

    pub fn annotations(&self) -> AnnotationFile {
        annotations_for(&self.videos, |t| self.task_name(t))
    }

    /// SHA-256 over the annotation JSON and the feature sidecar bytes.
    pub fn digest(&self) -> Result<String> {
        let mut bytes = serde_json::to_vec(&self.annotations())?;
        write_features(&mut bytes, &self.videos, self.config.feature_dim)?;
        Ok(seed::digest_hex(&bytes))
    }

    pub fn manifest(&self) -> Result<CorpusManifest> {
        Ok(CorpusManifest {
            config: self.config.clone(),
            embedder: self.embedder_spec.clone(),
            templates: self.templates.clone(),
            prototype_source: self.prototype_source.clone(),
            twins: self.twins.clone(),
            num_videos: self.videos.len(),
            digest: self.digest()?,
        })
    }

    /// Writes `vocab.json`, `annotations.json`, `features.stpf` and
    /// `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<CorpusManifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(dir.join("vocab.json"))?;
        write_json(dir.join("annotations.json"), &self.annotations())?;
        let path = dir.join("features.stpf");
        let mut buf = Vec::new();
        write_features(&mut buf, &self.videos, self.config.feature_dim)?;
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        let manifest = self.manifest()?;
        write_json(dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: CorpusManifest = read_json(dir.join("manifest.json"))?;
        let embedder = TextEmbedder::from_spec(&manifest.embedder)?;
        let vocab = StepVocabulary::load(dir.join("vocab.json"), &embedder)?;
        let features = FeatureTable::load(dir.join("features.stpf"))?;
        let options = LoadOptions {
            feature_dim: manifest.config.feature_dim,
            topk: manifest.config.topk,
        };
        let videos = load_annotations(dir.join("annotations.json"), &vocab, &embedder, Some(&features), &options)?;
        let corpus = Corpus {
            config: manifest.config.clone(),
            embedder,
            embedder_spec: manifest.embedder.clone(),
            vocab,
            templates: manifest.templates.clone(),
            prototype_source: manifest.prototype_source.clone(),
            twins: manifest.twins.clone(),
            videos,
        };
        let digest = corpus.digest()?;
        if digest != manifest.digest {
            return Err(Error::InvalidAnnotation(format!(
                "corpus digest {digest} does not match manifest {}",
                manifest.digest
            )));
        }
        Ok(corpus)
    }
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedStep {
    pub label_id: usize,
    pub start: f64,
    pub end: f64,
    pub asr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedVideo {
    pub video_id: String,
    pub task_id: usize,
    pub task_name: String,
    pub steps: Vec<AnnotatedStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub videos: Vec<AnnotatedVideo>,
}

fn annotations_for(videos: &[VideoRecord], task_name: impl Fn(usize) -> String) -> AnnotationFile {
    AnnotationFile {
        videos: videos
            .iter()
            .map(|v| AnnotatedVideo {
                video_id: v.video_id.clone(),
                task_id: v.task_id,
                task_name: task_name(v.task_id),
                steps: v
                    .clips
                    .iter()
                    .enumerate()
                    .map(|(i, c)| AnnotatedStep {
                        label_id: c.truth,
                        start: 10.0 * i as f64,
                        end: 10.0 * i as f64 + 8.0,
                        asr: c.asr.clone(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

pub struct LoadOptions {
    pub feature_dim: usize,
    pub topk: usize,
}

/// Parses an annotation file into video records. Features come from the
/// sidecar when given, otherwise from the label embeddings.
pub fn load_annotations(
    path: impl AsRef<Path>,
    vocab: &StepVocabulary,
    embedder: &TextEmbedder,
    features: Option<&FeatureTable>,
    options: &LoadOptions,
) -> Result<Vec<VideoRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, vocab, embedder, features, options)
}

pub fn parse_annotations(
    text: &str,
    vocab: &StepVocabulary,
    embedder: &TextEmbedder,
    features: Option<&FeatureTable>,
    options: &LoadOptions,
) -> Result<Vec<VideoRecord>> {
    let file: AnnotationFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    if let Some(table) = features {
        if table.dim != options.feature_dim {
            return Err(Error::Dimension {
                expected: options.feature_dim,
                got: table.dim,
            });
        }
    }
    let mut videos = Vec::with_capacity(file.videos.len());
    for video in file.videos {
        if video.steps.len() < 2 {
            return Err(Error::InvalidAnnotation(format!(
                "video {} has {} steps; at least 2 required",
                video.video_id,
                video.steps.len()
            )));
        }
        let mut prev_end = f64::NEG_INFINITY;
        for (i, step) in video.steps.iter().enumerate() {
            if step.label_id >= vocab.len() {
                return Err(Error::VocabularyMismatch {
                    label: step.label_id,
                    vocab_size: vocab.len(),
                });
            }
            if !(step.start <= step.end) || step.start < prev_end {
                return Err(Error::InvalidAnnotation(format!(
                    "video {} step {i}: segment [{}, {}] is not monotone or overlaps the previous one",
                    video.video_id, step.start, step.end
                )));
            }
            prev_end = step.end;
        }
        let video_hash = seed::hash_text(&video.video_id);
        let mut clips = Vec::with_capacity(video.steps.len());
        for (i, step) in video.steps.into_iter().enumerate() {
            let feature = match features.and_then(|t| t.get(video_hash, i as u32)) {
                Some(f) => f.to_vec(),
                None => fit_dim(&vocab.steps()[step.label_id].embedding, options.feature_dim)
                    .into_iter()
                    .map(round_f32)
                    .collect(),
            };
            let weak = weak_label_distribution(&step.asr, vocab, embedder, options.topk)?;
            clips.push(Clip {
                feature,
                asr: step.asr,
                weak,
                truth: step.label_id,
            });
        }
        videos.push(VideoRecord {
            video_id: video.video_id,
            task_id: video.task_id,
            clips,
        });
    }
    Ok(videos)
}

/// Clip features keyed by (video hash, clip index).
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    pub dim: usize,
    pub features: HashMap<(u64, u32), Vec<f64>>,
}

impl FeatureTable {
    pub fn get(&self, video_hash: u64, clip_index: u32) -> Option<&[f64]> {
        self.features.get(&(video_hash, clip_index)).map(Vec::as_slice)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        read_features(&mut bytes.as_slice())
    }
}

/// Writes the little-endian feature sidecar.
pub fn write_features(out: &mut impl Write, videos: &[VideoRecord], dim: usize) -> Result<()> {
    let count: usize = videos.iter().map(VideoRecord::len).sum();
    let io = |e| Error::io("<feature sidecar>", e);
    out.write_all(FEATURE_MAGIC).map_err(io)?;
    out.write_all(&FEATURE_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&(count as u64).to_le_bytes()).map_err(io)?;
    for video in videos {
        let hash = seed::hash_text(&video.video_id);
        for (i, clip) in video.clips.iter().enumerate() {
            if clip.feature.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: clip.feature.len(),
                });
            }
            out.write_all(&hash.to_le_bytes()).map_err(io)?;
            out.write_all(&(i as u32).to_le_bytes()).map_err(io)?;
            for &x in &clip.feature {
                out.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
            }
        }
    }
    Ok(())
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(|e| Error::Parse {
        location: "feature sidecar".into(),
        message: e.to_string(),
    })?;
    Ok(buf)
}

pub fn read_features(input: &mut impl Read) -> Result<FeatureTable> {
    let parse_err = |m: String| Error::Parse {
        location: "feature sidecar header".into(),
        message: m,
    };
    let magic: [u8; 4] = read_array(input)?;
    if &magic != FEATURE_MAGIC {
        return Err(parse_err(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array(input)?);
    if version != FEATURE_VERSION {
        return Err(parse_err(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(read_array(input)?) as usize;
    let count = u64::from_le_bytes(read_array(input)?);
    let mut features = HashMap::new();
    for _ in 0..count {
        let hash = u64::from_le_bytes(read_array(input)?);
        let index = u32::from_le_bytes(read_array(input)?);
        let v = (0..dim)
            .map(|_| read_array::<4>(input).map(|b| f32::from_le_bytes(b) as f64))
            .collect::<Result<Vec<_>>>()?;
        features.insert((hash, index), v);
    }
    Ok(FeatureTable { dim, features })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

fn split_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize) {
    let train = ((n as f64) * ratios.0).round() as usize;
    let train = train.min(n);
    let val = ((n as f64) * ratios.1).round() as usize;
    let val = val.min(n - train);
    (train, val)
}

/// Task-stratified train/val/test partition, deterministic in `seed`.
/// Tasks with fewer than three videos are pooled and split together.
pub fn split_corpus(videos: &[VideoRecord], ratios: (f64, f64, f64), seed: u64) -> Result<Split<VideoRecord>> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split ratios ({a}, {b}, {c}) must be non-negative and sum to 1"
        )));
    }
    let mut by_task: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, v) in videos.iter().enumerate() {
        by_task.entry(v.task_id).or_default().push(i);
    }
    let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
    let mut pooled = Vec::new();
    for (task, idx) in by_task {
        if idx.len() < 3 {
            log::warn!("task {task} has {} videos; splitting it unstratified", idx.len());
            pooled.extend(idx);
        } else {
            groups.push((task as u64, idx));
        }
    }
    if !pooled.is_empty() {
        groups.push((u64::MAX, pooled));
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (tag, mut idx) in groups {
        idx.shuffle(&mut seed::rng(seed, "split", tag));
        let (n_train, n_val) = split_counts(idx.len(), ratios);
        for (pos, i) in idx.into_iter().enumerate() {
            let v = videos[i].clone();
            if pos < n_train {
                split.train.push(v);
            } else if pos < n_train + n_val {
                split.val.push(v);
            } else {
                split.test.push(v);
            }
        }
    }
    let sort = |list: &mut Vec<VideoRecord>| list.sort_by(|x, y| x.video_id.cmp(&y.video_id));
    sort(&mut split.train);
    sort(&mut split.val);
    sort(&mut split.test);
    Ok(split)
}

/// Distinct label ids across a set of templates.
pub fn distinct_labels(templates: &[TaskTemplate]) -> HashSet<usize> {
    templates
        .iter()
        .flat_map(|t| {
            t.canonical_steps
                .iter()
                .copied()
                .chain(t.alternatives.values().flatten().copied())
        })
        .collect()
}
