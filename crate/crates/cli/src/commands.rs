use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use stepmask::benchmarks::{self, BenchmarkInstance, SplitName, TaskKind};
use stepmask::checkpoint;
use stepmask::corpus::{split_corpus, Corpus, Split, VideoRecord};
use stepmask::downstream::{self, EvalReport};
use stepmask::model::{ModelConfig, TransformerParams};
use stepmask::training::{self, LossKind, MaskedExample, TrainReport};
use stepmask::{seed, Error};

use crate::config::RunConfig;
use crate::CliError;

const GRAD_TOLERANCE: f64 = 1e-5;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string(value).map_err(Error::from)?);
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    Ok(Corpus::load(&cfg.paths.corpus_dir)?)
}

fn splits(cfg: &RunConfig, corpus: &Corpus) -> Result<Split<VideoRecord>, CliError> {
    Ok(split_corpus(&corpus.videos, cfg.benchmarks.split, seed::derive(cfg.seed, "split", 0))?)
}

fn model_config(cfg: &RunConfig, corpus: &Corpus) -> ModelConfig {
    cfg.model.resolve(corpus.config.feature_dim, corpus.vocab.len(), corpus.num_tasks())
}

fn benchmark_path(dir: &Path, kind: TaskKind, split: SplitName) -> PathBuf {
    dir.join(format!("{kind}.{}.jsonl", split.as_str()))
}

pub fn gen_corpus(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let dir = out.unwrap_or(&cfg.paths.corpus_dir);
    create_dir(dir)?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    let manifest = corpus.save(dir)?;
    log::info!("wrote {} videos to {}", manifest.num_videos, dir.display());
    print_json(&json!({
        "corpus_dir": dir,
        "num_videos": manifest.num_videos,
        "digest": manifest.digest,
        "config_digest": cfg.digest(),
    }))
}

pub fn gen_benchmarks(cfg: &RunConfig, kinds: &[TaskKind], out: Option<&Path>) -> Result<(), CliError> {
    let dir = out.unwrap_or(&cfg.paths.benchmarks_dir);
    create_dir(dir)?;
    let corpus = load_corpus(cfg)?;
    let digest = corpus.digest()?;
    let split = splits(cfg, &corpus)?;
    let kinds = if kinds.is_empty() { &cfg.benchmarks.kinds[..] } else { kinds };
    let set_seed = seed::derive(cfg.seed, "benchmarks", 0);
    let mut manifests = Vec::new();
    for &kind in kinds {
        for (name, videos) in [
            (SplitName::Train, &split.train),
            (SplitName::Val, &split.val),
            (SplitName::Test, &split.test),
        ] {
            // Donor clips stay inside the split; orderings are checked
            // against the whole corpus.
            let pool = if kind == TaskKind::MistakeStep { &videos[..] } else { &corpus.videos[..] };
            let set = benchmarks::build_set(kind, videos, pool, name, set_seed, &digest, &cfg.benchmarks.synthesis(name))?;
            let path = benchmark_path(dir, kind, name);
            set.write_jsonl(&path)?;
            let manifest = json!({
                "kind": kind,
                "split": name,
                "seed": set_seed,
                "count": set.instances.len(),
                "corpus_digest": digest,
                "config_digest": cfg.digest(),
            });
            write_json(&path.with_extension("json"), &manifest)?;
            log::info!("{kind}/{}: {} instances", name.as_str(), set.instances.len());
            manifests.push(manifest);
        }
    }
    print_json(&manifests)
}

#[derive(Serialize)]
struct StageReport<'a> {
    #[serde(flatten)]
    report: &'a TrainReport,
    run_config_digest: String,
    corpus_digest: String,
    checkpoint_digest: String,
}

pub fn pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    create_dir(&cfg.paths.checkpoints_dir)?;
    create_dir(&cfg.paths.reports_dir)?;
    let corpus = load_corpus(cfg)?;
    let corpus_digest = corpus.digest()?;
    let split = splits(cfg, &corpus)?;
    let model_cfg = model_config(cfg, &corpus);
    let init = TransformerParams::init(&model_cfg, seed::derive(cfg.seed, "init", 0))?;
    let provenance = json!({
        "stage": "pretrain",
        "config_digest": cfg.digest(),
        "corpus_digest": corpus_digest,
    });
    let result = training::pretrain(
        &split.train,
        &model_cfg,
        init,
        &cfg.mask_spec(),
        &cfg.pretrain,
        seed::derive(cfg.seed, "pretrain", 0),
        |epoch, _| log::info!("learning-rate boundary at epoch {epoch}"),
    );
    let (params, report) = match result {
        Err(Error::Divergence { epoch, checkpoint }) => {
            let path = cfg.paths.checkpoints_dir.join("pretrained.diverged.ckpt");
            checkpoint::save(&path, &model_cfg, &checkpoint, provenance)?;
            log::error!("diverged at epoch {epoch}; last good parameters in {}", path.display());
            return Err(Error::Divergence { epoch, checkpoint }.into());
        }
        other => other?,
    };
    let path = cfg.paths.checkpoints_dir.join("pretrained.ckpt");
    let digest = checkpoint::save(&path, &model_cfg, &params, provenance)?;
    log::info!("pre-training took {:.1}s", report.wall_time_secs);
    let stage = StageReport {
        report: &report,
        run_config_digest: cfg.digest(),
        corpus_digest,
        checkpoint_digest: digest.clone(),
    };
    write_json(&cfg.paths.reports_dir.join("pretrain.json"), &stage)?;
    write_text(&cfg.paths.reports_dir.join("pretrain.csv"), &report.to_csv())?;
    print_json(&json!({
        "checkpoint": path,
        "checkpoint_digest": digest,
        "final_masked_accuracy": report.final_accuracy(),
    }))
}

fn read_instances(cfg: &RunConfig, corpus: &Corpus, path: &Path, use_task_label: bool) -> Result<Vec<BenchmarkInstance>, CliError> {
    let mut instances = benchmarks::read_jsonl(path, &corpus.videos)?;
    if use_task_label {
        let tokens = downstream::task_tokens(corpus, corpus.config.feature_dim)?;
        for inst in instances.iter_mut() {
            inst.task_token = Some(tokens[inst.task_id].clone());
        }
    }
    log::debug!("read {} instances from {} (seed {})", instances.len(), path.display(), cfg.seed);
    Ok(instances)
}

pub fn finetune(cfg: &RunConfig, checkpoint_path: &Path, kind: TaskKind) -> Result<(), CliError> {
    create_dir(&cfg.paths.checkpoints_dir)?;
    create_dir(&cfg.paths.reports_dir)?;
    let corpus = load_corpus(cfg)?;
    let corpus_digest = corpus.digest()?;
    let (model_cfg, params, source_digest) = checkpoint::load(checkpoint_path)?;
    let fc = cfg.finetune_config(kind);
    let path = benchmark_path(&cfg.paths.benchmarks_dir, kind, SplitName::Train);
    let data = read_instances(cfg, &corpus, &path, fc.use_task_label)?;
    if data.is_empty() {
        return Err(CliError::Usage(format!("{}: empty dataset", path.display())));
    }
    let provenance = json!({
        "stage": "finetune",
        "task": kind,
        "source_checkpoint": source_digest,
        "config_digest": cfg.digest(),
        "corpus_digest": corpus_digest,
    });
    let (tuned, report) = match downstream::finetune(&params, &model_cfg, &fc, &data) {
        Err(Error::Divergence { epoch, checkpoint }) => {
            let out = cfg.paths.checkpoints_dir.join(format!("{kind}.diverged.ckpt"));
            checkpoint::save(&out, &model_cfg, &checkpoint, provenance)?;
            return Err(Error::Divergence { epoch, checkpoint }.into());
        }
        other => other?,
    };
    let out = cfg.paths.checkpoints_dir.join(format!("{kind}.ckpt"));
    let digest = checkpoint::save(&out, &model_cfg, &tuned, provenance)?;
    let stage = StageReport {
        report: &report,
        run_config_digest: cfg.digest(),
        corpus_digest,
        checkpoint_digest: digest.clone(),
    };
    write_json(&cfg.paths.reports_dir.join(format!("finetune-{kind}.json")), &stage)?;
    print_json(&json!({
        "checkpoint": out,
        "checkpoint_digest": digest,
        "final_train_accuracy": report.final_accuracy(),
    }))
}

pub fn eval(cfg: &RunConfig, checkpoint_path: &Path, benchmark: &Path, split: &str) -> Result<(), CliError> {
    let corpus = load_corpus(cfg)?;
    let probe = benchmarks::read_jsonl(benchmark, &corpus.videos)?;
    let kind = match probe.first() {
        Some(inst) => inst.kind,
        None => return Err(CliError::Usage(format!("{}: empty dataset", benchmark.display()))),
    };
    if probe.iter().any(|i| i.kind != kind) {
        return Err(CliError::Usage(format!("{}: mixed task kinds", benchmark.display())));
    }
    let fc = cfg.finetune_config(kind);
    let data = read_instances(cfg, &corpus, benchmark, fc.use_task_label)?;
    let (model_cfg, params, _) = checkpoint::load(checkpoint_path)?;
    let mut report = downstream::evaluate(&params, &model_cfg, &fc, &data, split)?;
    report.corpus_digest = Some(corpus.digest()?);
    create_dir(&cfg.paths.reports_dir)?;
    write_json(&cfg.paths.reports_dir.join(format!("eval-{kind}-{split}.json")), &report)?;
    print_json(&report)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = Corpus::generate(&cfg.corpus)?;
    let model_cfg = ModelConfig::gradcheck(corpus.config.feature_dim, corpus.vocab.len(), corpus.num_tasks());
    let params = TransformerParams::init(&model_cfg, seed::derive(cfg.seed, "gradcheck", 0))?;
    let capacity = model_cfg.max_positions - 1;
    let mut video = corpus.videos[0].clone();
    video.clips.truncate(capacity.min(4));
    let mask = vec![0, video.len() - 1];
    let mut errors = serde_json::Map::new();
    let mut worst = 0.0f64;
    for kind in [LossKind::StepClassification, LossKind::DistributionMatching] {
        let example = MaskedExample::from_video(&video, mask.clone(), kind, model_cfg.num_labels)?;
        let err = training::grad_check(&params, &model_cfg, &example, 1e-5, cfg.seed)?;
        errors.insert(serde_json::to_value(kind).map_err(Error::from)?.as_str().unwrap_or("loss").to_string(), json!(err));
        worst = worst.max(err);
    }
    errors.insert("max".into(), json!(worst));
    print_json(&errors)?;
    if worst > GRAD_TOLERANCE {
        return Err(CliError::GradCheck(worst));
    }
    Ok(())
}

pub fn report(dir: &Path) -> Result<(), CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("eval-") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no eval-*.json reports in {}", dir.display())));
    }
    let mut reports = Vec::with_capacity(paths.len());
    for p in &paths {
        let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        let r: EvalReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    let digest = reports[0].corpus_digest.clone();
    if let Some((p, r)) = paths.iter().zip(&reports).find(|(_, r)| r.corpus_digest != digest || r.corpus_digest.is_none()) {
        return Err(CliError::Usage(format!(
            "{} has corpus digest {:?}, expected {:?}",
            p.display(),
            r.corpus_digest,
            digest
        )));
    }
    let csv = downstream::reports_to_csv(&reports);
    write_text(&dir.join("summary.csv"), &csv)?;
    write_json(&dir.join("summary.json"), &reports)?;
    print!("{csv}");
    Ok(())
}
