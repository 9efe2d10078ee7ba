//! Weak supervision: text embeddings, similarity scores, label
//! distributions over the step vocabulary, and the ASR-clustering baseline.
//!
//! A clip's ASR sentence is embedded and compared (dot product) against the
//! embedding of every step description. A softmax over those similarities is
//! the weak label distribution; only its top-k entries are kept and the
//! retained mass is rescaled to one.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

const NORM_TOLERANCE: f64 = 1e-6;

/// Lowercases and collapses runs of whitespace to a single space.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Synthetic { seed: u64, dim: usize },
    Table { path: String },
}

/// Sentence embedder. `Synthetic` hashes the normalized text into a Gaussian
/// draw; `Table` looks vectors up in a precomputed file.
#[derive(Debug, Clone)]
pub enum TextEmbedder {
    Synthetic {
        seed: u64,
        dim: usize,
    },
    Table {
        dim: usize,
        vectors: HashMap<String, Vec<f64>>,
    },
}

impl TextEmbedder {
    pub fn synthetic(seed: u64, dim: usize) -> Self {
        TextEmbedder::Synthetic { seed, dim }
    }

    pub fn from_spec(spec: &EmbedderSpec) -> Result<Self> {
        match spec {
            EmbedderSpec::Synthetic { seed, dim } => {
                if *dim == 0 {
                    return Err(Error::Config("embedding dim must be positive".into()));
                }
                Ok(Self::synthetic(*seed, *dim))
            }
            EmbedderSpec::Table { path } => Self::load_table(path),
        }
    }

    /// Reads `<text>\t<f> <f> ...` lines. Keys are normalized; vectors are
    /// rescaled to unit norm.
    pub fn load_table(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_table(&text)
    }

    pub fn parse_table(text: &str) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let location = format!("line {}", lineno + 1);
            let (key, values) = line.split_once('\t').ok_or_else(|| Error::Parse {
                location: location.clone(),
                message: "expected <text>\\t<floats>".into(),
            })?;
            let v = values
                .split_whitespace()
                .map(|tok| tok.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    location: location.clone(),
                    message: e.to_string(),
                })?;
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Dimension {
                        expected: d,
                        got: v.len(),
                    })
                }
                _ => {}
            }
            let v = unit_normalize(v).ok_or_else(|| Error::Parse {
                location,
                message: "zero vector".into(),
            })?;
            vectors.insert(normalize_text(key), v);
        }
        let dim = dim.ok_or_else(|| Error::InvalidInput("empty embedding table".into()))?;
        if dim == 0 {
            return Err(Error::InvalidInput("embedding table has zero width".into()));
        }
        Ok(TextEmbedder::Table { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        match self {
            TextEmbedder::Synthetic { dim, .. } | TextEmbedder::Table { dim, .. } => *dim,
        }
    }

    /// Unit-norm embedding of `text`.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let key = normalize_text(text);
        if key.is_empty() {
            return Err(Error::InvalidInput("empty text".into()));
        }
        match self {
            TextEmbedder::Synthetic { seed, dim } => {
                let mut rng = seed::rng(*seed, "embed", seed::hash_text(&key));
                // A Gaussian draw of positive dimension is zero with probability 0;
                // redraw just in case.
                loop {
                    let v: Vec<f64> = (0..*dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    if let Some(v) = unit_normalize(v) {
                        return Ok(v);
                    }
                }
            }
            TextEmbedder::Table { vectors, .. } => vectors
                .get(&key)
                .cloned()
                .ok_or(Error::MissingEmbedding(key)),
        }
    }
}

fn unit_normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

/// Dot-product similarity.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step {
    pub id: usize,
    pub title: String,
    pub description: String,
    #[serde(skip)]
    pub embedding: Vec<f64>,
}

/// The finite label set with the embedding of each step description.
#[derive(Debug, Clone)]
pub struct StepVocabulary {
    steps: Vec<Step>,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub id: usize,
    pub title: String,
    pub description: String,
}

impl StepVocabulary {
    pub fn new(entries: Vec<StepEntry>, embedder: &TextEmbedder) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("empty vocabulary".into()));
        }
        let mut entries = entries;
        entries.sort_by_key(|e| e.id);
        let mut titles = HashSet::new();
        let mut steps = Vec::with_capacity(entries.len());
        for (expected, entry) in entries.into_iter().enumerate() {
            if entry.id != expected {
                return Err(Error::InvalidInput(format!(
                    "vocabulary ids must be 0..S-1 without gaps; found {} where {} expected",
                    entry.id, expected
                )));
            }
            if !titles.insert(entry.title.clone()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate step title {:?}",
                    entry.title
                )));
            }
            let embedding = embedder.embed(&entry.description)?;
            steps.push(Step {
                id: entry.id,
                title: entry.title,
                description: entry.description,
                embedding,
            });
        }
        Ok(StepVocabulary {
            steps,
            dim: embedder.dim(),
        })
    }

    /// Reads a JSON array of `{id, title, description}`.
    pub fn load(path: impl AsRef<Path>, embedder: &TextEmbedder) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<StepEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })?;
        Self::new(entries, embedder)
    }

    pub fn entries(&self) -> Vec<StepEntry> {
        self.steps
            .iter()
            .map(|s| StepEntry {
                id: s.id,
                title: s.title.clone(),
                description: s.description.clone(),
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.entries())?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn step(&self, id: usize) -> Option<&Step> {
        self.steps.get(id)
    }

    /// Similarity of `query` against every step description.
    pub fn similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| similarity(query, &s.embedding))
            .collect()
    }
}

/// Sparse categorical distribution over step ids: strictly positive
/// probabilities, sorted descending (ties by ascending id), summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    entries: Vec<(usize, f64)>,
    k: usize,
}

impl LabelDistribution {
    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn one_hot(label: usize) -> Self {
        LabelDistribution {
            entries: vec![(label, 1.0)],
            k: 1,
        }
    }

    pub fn prob(&self, label: usize) -> f64 {
        self.entries
            .iter()
            .find(|(id, _)| *id == label)
            .map_or(0.0, |(_, p)| *p)
    }

    /// Dense vector of length `size`.
    pub fn to_dense(&self, size: usize) -> Result<Vec<f64>> {
        let mut dense = vec![0.0; size];
        for &(id, p) in &self.entries {
            if id >= size {
                return Err(Error::VocabularyMismatch {
                    label: id,
                    vocab_size: size,
                });
            }
            dense[id] = p;
        }
        Ok(dense)
    }
}

/// Keeps the `k` most probable entries of a dense distribution and rescales
/// them to sum to one.
pub fn truncate_topk(dist: &[f64], k: usize) -> Result<LabelDistribution> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if dist.is_empty() {
        return Err(Error::InvalidDistribution("empty distribution".into()));
    }
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("sums to {total}")));
    }
    let mut order: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    order.truncate(k);
    let kept: f64 = order.iter().map(|&i| dist[i]).sum();
    let entries = order.into_iter().map(|i| (i, dist[i] / kept)).collect();
    Ok(LabelDistribution { entries, k })
}

/// Softmax over raw similarities followed by top-k truncation.
pub fn distribution_from_similarities(similarities: &[f64], k: usize) -> Result<LabelDistribution> {
    if similarities.is_empty() {
        return Err(Error::InvalidInput("no similarities".into()));
    }
    truncate_topk(&softmax(similarities), k)
}

/// Weak label distribution of one ASR sentence over the vocabulary.
pub fn weak_label_distribution(
    asr_sentence: &str,
    vocab: &StepVocabulary,
    embedder: &TextEmbedder,
    k: usize,
) -> Result<LabelDistribution> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if vocab.is_empty() {
        return Err(Error::InvalidInput("empty vocabulary".into()));
    }
    let query = embedder.embed(asr_sentence)?;
    let sims = vocab.similarities(&query)?;
    distribution_from_similarities(&sims, k)
}

/// Most probable label; ties go to the lowest id.
pub fn best_label(dist: &LabelDistribution) -> Result<usize> {
    let mut iter = dist.entries.iter();
    let &(mut best_id, mut best_p) = iter
        .next()
        .ok_or_else(|| Error::InvalidDistribution("empty distribution".into()))?;
    for &(id, p) in iter {
        if p > best_p || (p == best_p && id < best_id) {
            best_id = id;
            best_p = p;
        }
    }
    Ok(best_id)
}

/// Groups adjacent sentences whose similarity exceeds
/// `threshold_scale` times the mean similarity over all sentence pairs.
pub fn cluster_asr(
    sentences: &[&str],
    embedder: &TextEmbedder,
    threshold_scale: f64,
) -> Result<Vec<Range<usize>>> {
    let embeddings = sentences
        .iter()
        .map(|s| embedder.embed(s))
        .collect::<Result<Vec<_>>>()?;
    cluster_embeddings(&embeddings, threshold_scale)
}

/// [`cluster_asr`] over precomputed embeddings.
pub fn cluster_embeddings(embeddings: &[Vec<f64>], threshold_scale: f64) -> Result<Vec<Range<usize>>> {
    let n = embeddings.len();
    if n == 0 {
        return Err(Error::InvalidInput("no sentences".into()));
    }
    if !(threshold_scale > 0.0) {
        return Err(Error::InvalidInput("threshold_scale must be positive".into()));
    }
    if n == 1 {
        return Ok(vec![0..1]);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += similarity(&embeddings[i], &embeddings[j])?;
            pairs += 1;
        }
    }
    let threshold = threshold_scale * total / pairs as f64;
    let mut segments = Vec::new();
    let mut start = 0;
    for i in 0..n - 1 {
        if similarity(&embeddings[i], &embeddings[i + 1])? <= threshold {
            segments.push(start..i + 1);
            start = i + 1;
        }
    }
    segments.push(start..n);
    Ok(segments)
}
