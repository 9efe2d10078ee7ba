//! Downstream benchmark synthesis: mistake-step and mistake-ordering
//! detection, short- and long-term forecasting, procedure recognition and
//! step classification.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::VideoRecord;
use crate::error::{Error, Result};
use crate::model::FORECAST_SLOTS;
use crate::seed;

/// Maximum number of permutations drawn for one mistake-order instance.
pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MistakeStep,
    MistakeOrder,
    ShortTerm,
    LongTerm,
    ProcRec,
    StepCls,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::MistakeStep,
        TaskKind::MistakeOrder,
        TaskKind::ShortTerm,
        TaskKind::LongTerm,
        TaskKind::ProcRec,
        TaskKind::StepCls,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::MistakeStep => "mistake_step",
            TaskKind::MistakeOrder => "mistake_order",
            TaskKind::ShortTerm => "short_term",
            TaskKind::LongTerm => "long_term",
            TaskKind::ProcRec => "proc_rec",
            TaskKind::StepCls => "step_cls",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    MistakeStep(usize),
    MistakeOrder { permuted: bool },
    ShortTerm(usize),
    /// Next labels; `None` is the NULL padding after the last real step.
    LongTerm([Option<usize>; FORECAST_SLOTS]),
    ProcRec(usize),
    StepCls(usize),
}

impl Target {
    pub fn kind(&self) -> TaskKind {
        match self {
            Target::MistakeStep(_) => TaskKind::MistakeStep,
            Target::MistakeOrder { .. } => TaskKind::MistakeOrder,
            Target::ShortTerm(_) => TaskKind::ShortTerm,
            Target::LongTerm(_) => TaskKind::LongTerm,
            Target::ProcRec(_) => TaskKind::ProcRec,
            Target::StepCls(_) => TaskKind::StepCls,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Target::MistakeStep(j) => Value::from(*j),
            Target::MistakeOrder { permuted } => Value::from(*permuted),
            Target::ShortTerm(y) | Target::ProcRec(y) | Target::StepCls(y) => Value::from(*y),
            Target::LongTerm(slots) => Value::from(slots.iter().map(|s| s.map_or(Value::Null, Value::from)).collect::<Vec<_>>()),
        }
    }

    fn from_json(kind: TaskKind, v: &Value) -> Result<Self> {
        let bad = || Error::Parse {
            location: "target".into(),
            message: format!("invalid {kind} target {v}"),
        };
        let index = || v.as_u64().map(|x| x as usize).ok_or_else(bad);
        Ok(match kind {
            TaskKind::MistakeStep => Target::MistakeStep(index()?),
            TaskKind::MistakeOrder => Target::MistakeOrder {
                permuted: v.as_bool().ok_or_else(bad)?,
            },
            TaskKind::ShortTerm => Target::ShortTerm(index()?),
            TaskKind::ProcRec => Target::ProcRec(index()?),
            TaskKind::StepCls => Target::StepCls(index()?),
            TaskKind::LongTerm => {
                let arr = v.as_array().filter(|a| a.len() == FORECAST_SLOTS).ok_or_else(bad)?;
                let mut slots = [None; FORECAST_SLOTS];
                for (slot, x) in slots.iter_mut().zip(arr) {
                    *slot = match x {
                        Value::Null => None,
                        other => Some(other.as_u64().ok_or_else(bad)? as usize),
                    };
                }
                Target::LongTerm(slots)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipRef {
    pub video_id: String,
    pub clip: usize,
}

/// One downstream example with its clip features resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkInstance {
    pub kind: TaskKind,
    pub video_id: String,
    pub task_id: usize,
    pub clip_refs: Vec<ClipRef>,
    pub features: Vec<Vec<f64>>,
    /// Ground-truth label of every clip as arranged in the instance.
    pub labels: Vec<usize>,
    /// Sentence embedding of the task name, attached on request.
    pub task_token: Option<Vec<f64>>,
    pub target: Target,
    pub seed: u64,
}

impl BenchmarkInstance {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn from_clips(video: &VideoRecord, refs: Vec<(&VideoRecord, usize)>, target: Target, seed: u64) -> Self {
        BenchmarkInstance {
            kind: target.kind(),
            video_id: video.video_id.clone(),
            task_id: video.task_id,
            clip_refs: refs
                .iter()
                .map(|(v, i)| ClipRef {
                    video_id: v.video_id.clone(),
                    clip: *i,
                })
                .collect(),
            features: refs.iter().map(|(v, i)| v.clips[*i].feature.clone()).collect(),
            labels: refs.iter().map(|(v, i)| v.clips[*i].truth).collect(),
            task_token: None,
            target,
            seed,
        }
    }

    fn record(&self) -> InstanceRecord {
        InstanceRecord {
            kind: self.kind,
            video_id: self.video_id.clone(),
            clip_refs: self.clip_refs.clone(),
            target: self.target.to_json(),
            seed: self.seed,
        }
    }
}

/// One JSON line of a benchmark file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    kind: TaskKind,
    video_id: String,
    clip_refs: Vec<ClipRef>,
    target: Value,
    seed: u64,
}

fn own_clips(video: &VideoRecord, range: impl Iterator<Item = usize>) -> Vec<(&VideoRecord, usize)> {
    range.map(|i| (video, i)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MistakeStepOptions {
    /// Restrict donors to other videos of the same task.
    #[serde(default)]
    pub same_task_donor: bool,
}

/// Replaces one uniformly chosen clip with a clip from another video whose
/// label differs from the replaced one.
pub fn make_mistake_step(
    video: &VideoRecord,
    corpus: &[VideoRecord],
    seed_value: u64,
    options: MistakeStepOptions,
) -> Result<BenchmarkInstance> {
    if video.is_empty() {
        return Err(Error::InvalidInput(format!("video {} has no clips", video.video_id)));
    }
    let mut rng = seed::rng(seed_value, "mistake-step", 0);
    let j = rng.random_range(0..video.len());
    let replaced = video.clips[j].truth;
    let donors: Vec<(&VideoRecord, usize)> = corpus
        .iter()
        .filter(|d| d.video_id != video.video_id && (!options.same_task_donor || d.task_id == video.task_id))
        .flat_map(|d| (0..d.len()).map(move |i| (d, i)))
        .filter(|(d, i)| d.clips[*i].truth != replaced)
        .collect();
    if donors.is_empty() {
        return Err(Error::Synthesis(format!(
            "no donor clip with a label other than {replaced} for video {}",
            video.video_id
        )));
    }
    let donor = donors[rng.random_range(0..donors.len())];
    let mut refs = own_clips(video, 0..video.len());
    refs[j] = donor;
    Ok(BenchmarkInstance::from_clips(video, refs, Target::MistakeStep(j), seed_value))
}

/// Label sequences of every video of `task_id` in `corpus`.
fn task_orderings(corpus: &[VideoRecord], task_id: usize) -> Vec<Vec<usize>> {
    corpus.iter().filter(|v| v.task_id == task_id).map(VideoRecord::labels).collect()
}

/// With probability `positive_probability` returns the video unchanged;
/// otherwise permutes its clips until the label sequence differs from the
/// original and from every same-task ordering in `corpus`.
pub fn make_mistake_order(
    video: &VideoRecord,
    corpus: &[VideoRecord],
    seed_value: u64,
    positive_probability: f64,
) -> Result<BenchmarkInstance> {
    if video.len() < 2 {
        return Err(Error::InvalidInput(format!("video {} has fewer than 2 clips", video.video_id)));
    }
    if !(0.0..=1.0).contains(&positive_probability) {
        return Err(Error::InvalidInput("positive_probability outside [0, 1]".into()));
    }
    let mut rng = seed::rng(seed_value, "mistake-order", 0);
    if rng.random::<f64>() < positive_probability {
        let refs = own_clips(video, 0..video.len());
        return Ok(BenchmarkInstance::from_clips(
            video,
            refs,
            Target::MistakeOrder { permuted: false },
            seed_value,
        ));
    }
    let original = video.labels();
    let mut forbidden = task_orderings(corpus, video.task_id);
    forbidden.push(original.clone());
    let mut perm: Vec<usize> = (0..video.len()).collect();
    for _ in 0..MAX_REDRAWS {
        perm.shuffle(&mut rng);
        let labels: Vec<usize> = perm.iter().map(|&i| original[i]).collect();
        if forbidden.iter().all(|f| *f != labels) {
            let refs = own_clips(video, perm.iter().copied());
            return Ok(BenchmarkInstance::from_clips(
                video,
                refs,
                Target::MistakeOrder { permuted: true },
                seed_value,
            ));
        }
    }
    Err(Error::Synthesis(format!(
        "no permutation of video {} differs from every valid ordering after {MAX_REDRAWS} draws",
        video.video_id
    )))
}

/// First `n` clips; the target is the label of clip `n`.
pub fn make_short_term(video: &VideoRecord, n: usize, seed_value: u64) -> Result<BenchmarkInstance> {
    if n == 0 || n >= video.len() {
        return Err(Error::InvalidInput(format!(
            "short-term context {n} outside 1..{}",
            video.len()
        )));
    }
    let target = Target::ShortTerm(video.clips[n].truth);
    Ok(BenchmarkInstance::from_clips(video, own_clips(video, 0..n), target, seed_value))
}

/// Clip `i` alone; the targets are the next five labels, NULL-padded.
pub fn make_long_term(video: &VideoRecord, i: usize, seed_value: u64) -> Result<BenchmarkInstance> {
    if video.len() < 2 || i > video.len() - 2 {
        return Err(Error::InvalidInput(format!(
            "long-term index {i} outside 0..={}",
            video.len().saturating_sub(2)
        )));
    }
    let mut slots = [None; FORECAST_SLOTS];
    for (s, slot) in slots.iter_mut().enumerate() {
        *slot = video.clips.get(i + 1 + s).map(|c| c.truth);
    }
    Ok(BenchmarkInstance::from_clips(
        video,
        own_clips(video, i..i + 1),
        Target::LongTerm(slots),
        seed_value,
    ))
}

pub fn make_proc_rec(video: &VideoRecord) -> Result<BenchmarkInstance> {
    if video.is_empty() {
        return Err(Error::InvalidInput(format!("video {} has no clips", video.video_id)));
    }
    Ok(BenchmarkInstance::from_clips(
        video,
        own_clips(video, 0..video.len()),
        Target::ProcRec(video.task_id),
        0,
    ))
}

pub fn make_step_cls(video: &VideoRecord, i: usize) -> Result<BenchmarkInstance> {
    if i >= video.len() {
        return Err(Error::InvalidInput(format!("clip index {i} outside 0..{}", video.len())));
    }
    let target = Target::StepCls(video.clips[i].truth);
    Ok(BenchmarkInstance::from_clips(video, own_clips(video, i..i + 1), target, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    #[serde(default)]
    pub mistake_step: MistakeStepOptions,
    pub positive_probability: f64,
    /// Independent mistake-step and mistake-order draws per video.
    pub draws_per_video: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            mistake_step: MistakeStepOptions::default(),
            positive_probability: 0.5,
            draws_per_video: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSet {
    pub kind: TaskKind,
    pub instances: Vec<BenchmarkInstance>,
    pub source_split: SplitName,
    pub seed: u64,
    /// Digest of the corpus the set was built from.
    pub manifest_digest: String,
}

/// Seed of the `index`-th instance drawn from `video_id`.
pub fn instance_seed(set_seed: u64, kind: TaskKind, video_id: &str, index: usize) -> u64 {
    seed::derive(set_seed, &format!("{kind}/{video_id}"), index as u64)
}

/// Builds every instance of `kind` from `videos`. `corpus` supplies donor
/// clips and the valid orderings to avoid. Videos that cannot be
/// synthesized are skipped with a warning.
pub fn build_set(
    kind: TaskKind,
    videos: &[VideoRecord],
    corpus: &[VideoRecord],
    split: SplitName,
    set_seed: u64,
    corpus_digest: &str,
    options: &SynthesisOptions,
) -> Result<BenchmarkSet> {
    let mut instances = Vec::new();
    for video in videos {
        let seed_of = |i: usize| instance_seed(set_seed, kind, &video.video_id, i);
        let made: Vec<Result<BenchmarkInstance>> = match kind {
            TaskKind::MistakeStep => (0..options.draws_per_video)
                .map(|d| make_mistake_step(video, corpus, seed_of(d), options.mistake_step))
                .collect(),
            TaskKind::MistakeOrder => (0..options.draws_per_video)
                .map(|d| make_mistake_order(video, corpus, seed_of(d), options.positive_probability))
                .collect(),
            TaskKind::ShortTerm => (1..video.len()).map(|n| make_short_term(video, n, seed_of(n))).collect(),
            TaskKind::LongTerm => (0..video.len().saturating_sub(1))
                .map(|i| make_long_term(video, i, seed_of(i)))
                .collect(),
            TaskKind::ProcRec => vec![make_proc_rec(video)],
            TaskKind::StepCls => (0..video.len()).map(|i| make_step_cls(video, i)).collect(),
        };
        for m in made {
            match m {
                Ok(inst) => instances.push(inst),
                Err(Error::Synthesis(msg)) => log::warn!("skipping: {msg}"),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(BenchmarkSet {
        kind,
        instances,
        source_split: split,
        seed: set_seed,
        manifest_digest: corpus_digest.to_string(),
    })
}

impl BenchmarkSet {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for inst in &self.instances {
            out.push_str(&serde_json::to_string(&inst.record())?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Attaches a task-name embedding to every instance.
    pub fn attach_task_tokens(&mut self, tokens: &[Vec<f64>]) -> Result<()> {
        for inst in self.instances.iter_mut() {
            let token = tokens.get(inst.task_id).ok_or_else(|| {
                Error::InvalidInput(format!("no task token for task {}", inst.task_id))
            })?;
            inst.task_token = Some(token.clone());
        }
        Ok(())
    }
}

/// Parses JSON lines, resolving clip features and labels from `corpus`.
pub fn parse_jsonl(text: &str, corpus: &[VideoRecord]) -> Result<Vec<BenchmarkInstance>> {
    let index: HashMap<&str, &VideoRecord> = corpus.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("line {}", lineno + 1);
        let rec: InstanceRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            location: location.clone(),
            message: e.to_string(),
        })?;
        let source = index
            .get(rec.video_id.as_str())
            .ok_or_else(|| Error::Parse {
                location: location.clone(),
                message: format!("unknown video {}", rec.video_id),
            })?;
        let mut refs = Vec::with_capacity(rec.clip_refs.len());
        for r in &rec.clip_refs {
            let v = index.get(r.video_id.as_str()).filter(|v| r.clip < v.len()).ok_or_else(|| Error::Parse {
                location: location.clone(),
                message: format!("unresolvable clip {}#{}", r.video_id, r.clip),
            })?;
            refs.push((*v, r.clip));
        }
        let target = Target::from_json(rec.kind, &rec.target)?;
        out.push(BenchmarkInstance::from_clips(source, refs, target, rec.seed));
    }
    Ok(out)
}

/// Reads a benchmark file written by [`BenchmarkSet::write_jsonl`].
pub fn read_jsonl(path: impl AsRef<Path>, corpus: &[VideoRecord]) -> Result<Vec<BenchmarkInstance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Clip;
    use crate::weaklabel::LabelDistribution;

    fn video(id: &str, task: usize, labels: &[usize]) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            task_id: task,
            clips: labels
                .iter()
                .map(|&l| Clip {
                    feature: vec![l as f64, 1.0],
                    asr: format!("step {l}"),
                    weak: LabelDistribution::one_hot(l),
                    truth: l,
                })
                .collect(),
        }
    }

    #[test]
    fn mistake_step_replaces_one_clip() {
        let v = video("a", 0, &[0, 1, 2, 3]);
        let corpus = vec![v.clone(), video("b", 1, &[4, 5, 6]), video("c", 0, &[0, 1, 2, 3])];
        for s in 0..50 {
            let inst = make_mistake_step(&v, &corpus, s, MistakeStepOptions::default()).unwrap();
            let Target::MistakeStep(j) = inst.target else { panic!() };
            let diffs: Vec<usize> = (0..4).filter(|&i| inst.labels[i] != v.clips[i].truth).collect();
            assert_eq!(diffs, vec![j]);
            assert_ne!(inst.clip_refs[j].video_id, "a");
            assert_eq!(inst, make_mistake_step(&v, &corpus, s, MistakeStepOptions::default()).unwrap());
        }
    }

    #[test]
    fn mistake_step_without_donor_fails() {
        let v = video("a", 0, &[0, 0]);
        let corpus = vec![v.clone(), video("b", 0, &[0, 0])];
        assert!(matches!(
            make_mistake_step(&v, &corpus, 1, MistakeStepOptions::default()),
            Err(Error::Synthesis(_))
        ));
        let corpus = vec![v.clone(), video("b", 1, &[3, 3])];
        let same = MistakeStepOptions { same_task_donor: true };
        assert!(make_mistake_step(&v, &corpus, 1, same).is_err());
        assert!(make_mistake_step(&v, &corpus, 1, MistakeStepOptions::default()).is_ok());
    }

    #[test]
    fn two_step_order_swaps() {
        let v = video("a", 0, &[7, 8]);
        let corpus = vec![v.clone()];
        for s in 0..30 {
            let inst = make_mistake_order(&v, &corpus, s, 0.0).unwrap();
            assert_eq!(inst.labels, vec![8, 7]);
            assert_eq!(inst.target, Target::MistakeOrder { permuted: true });
        }
        // the swapped order is another video's valid order
        let corpus = vec![v.clone(), video("b", 0, &[8, 7])];
        assert!(matches!(make_mistake_order(&v, &corpus, 0, 0.0), Err(Error::Synthesis(_))));
    }

    #[test]
    fn identical_labels_cannot_be_misordered() {
        let v = video("a", 0, &[3, 3, 3]);
        assert!(matches!(make_mistake_order(&v, &[v.clone()], 5, 0.0), Err(Error::Synthesis(_))));
        let kept = make_mistake_order(&v, &[v.clone()], 5, 1.0).unwrap();
        assert_eq!(kept.target, Target::MistakeOrder { permuted: false });
    }

    #[test]
    fn short_term_examples() {
        let v = video("a", 0, &[10, 11, 12]);
        let inst = make_short_term(&v, 2, 0).unwrap();
        assert_eq!(inst.labels, vec![10, 11]);
        assert_eq!(inst.target, Target::ShortTerm(12));
        assert!(make_short_term(&v, 0, 0).is_err());
        assert!(make_short_term(&v, 3, 0).is_err());
        let set = build_set(TaskKind::ShortTerm, &[v], &[], SplitName::Train, 0, "", &SynthesisOptions::default()).unwrap();
        assert_eq!(set.instances.len(), 2);
    }

    #[test]
    fn long_term_null_padding() {
        let v = video("a", 0, &[1, 2, 3, 4]);
        let inst = make_long_term(&v, 0, 0).unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(inst.target, Target::LongTerm([Some(2), Some(3), Some(4), None, None]));
        let last = make_long_term(&v, 2, 0).unwrap();
        assert_eq!(last.target, Target::LongTerm([Some(4), None, None, None, None]));
        assert!(make_long_term(&v, 3, 0).is_err());
        let long = video("b", 0, &[1, 2, 3, 4, 5, 6]);
        let Target::LongTerm(slots) = make_long_term(&long, 0, 0).unwrap().target else { panic!() };
        assert!(slots.iter().all(Option::is_some));
    }

    #[test]
    fn proc_rec_and_step_cls() {
        let v = video("a", 4, &[1, 2, 3]);
        let p = make_proc_rec(&v).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.target, Target::ProcRec(4));
        let c = make_step_cls(&v, 1).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.target, Target::StepCls(2));
        let videos = vec![v, video("b", 0, &[5, 6])];
        let set = build_set(TaskKind::StepCls, &videos, &videos, SplitName::Test, 0, "", &SynthesisOptions::default()).unwrap();
        assert_eq!(set.instances.len(), 5);
    }

    #[test]
    fn jsonl_round_trip() {
        let videos = vec![video("a", 0, &[0, 1, 2, 3]), video("b", 1, &[4, 5, 6])];
        for kind in TaskKind::ALL {
            let set = build_set(kind, &videos, &videos, SplitName::Train, 3, "d", &SynthesisOptions::default()).unwrap();
            let text = set.to_jsonl().unwrap();
            let back = parse_jsonl(&text, &videos).unwrap();
            assert_eq!(back, set.instances, "{kind}");
        }
        let line = r#"{"kind":"long_term","video_id":"a","clip_refs":[{"video_id":"a","clip":0}],"target":[1,null,null,null,null],"seed":0}"#;
        let parsed = parse_jsonl(line, &videos).unwrap();
        assert_eq!(parsed[0].target, Target::LongTerm([Some(1), None, None, None, None]));
        assert!(parse_jsonl(r#"{"kind":"step_cls","video_id":"zz","clip_refs":[],"target":1,"seed":0}"#, &videos).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(k.as_str().parse::<TaskKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert!("nope".parse::<TaskKind>().is_err());
    }
}
