use stepmask::benchmarks::{build_set, BenchmarkInstance, SplitName, SynthesisOptions, TaskKind};
use stepmask::corpus::{Corpus, CorpusConfig};
use stepmask::downstream::{evaluate, finetune, FinetuneConfig, Mode, OptimizerChoice};
use stepmask::model::{ModelConfig, ParamGroup, TransformerParams};

fn noiseless_corpus() -> Corpus {
    let cfg: CorpusConfig = serde_json::from_value(serde_json::json!({
        "num_tasks": 4, "steps_per_task": 5, "vocab_size": 24, "videos_per_task": 5,
        "feature_dim": 16, "seed": 12
    }))
    .unwrap();
    Corpus::generate(&cfg).unwrap()
}

fn mistake_steps(corpus: &Corpus) -> Vec<BenchmarkInstance> {
    let options = SynthesisOptions {
        draws_per_video: 2,
        ..SynthesisOptions::default()
    };
    build_set(TaskKind::MistakeStep, &corpus.videos, &corpus.videos, SplitName::Train, 1, "", &options)
        .unwrap()
        .instances
}

#[test]
fn noiseless_mistake_step_overfits_within_fifty_epochs() {
    let corpus = noiseless_corpus();
    let data = mistake_steps(&corpus);
    assert_eq!(data.len(), 40);
    let model = ModelConfig::desk(16, corpus.vocab.len(), corpus.num_tasks());
    let init = TransformerParams::init(&model, 3).unwrap();
    let mut fc = FinetuneConfig::new(TaskKind::MistakeStep, Mode::Finetune);
    fc.optimizer = OptimizerChoice::Adamw;
    fc.lr = 1e-3;
    fc.epochs = 50;
    fc.seed = 5;
    let (params, report) = finetune(&init, &model, &fc, &data).unwrap();
    assert_eq!(report.epochs.len(), 50);
    let train = evaluate(&params, &model, &fc, &data, "train").unwrap();
    assert!(train.accuracy >= 0.99, "train accuracy {}", train.accuracy);
}

#[test]
fn linear_probe_moves_only_its_head() {
    let corpus = noiseless_corpus();
    let data = mistake_steps(&corpus);
    let model = ModelConfig::desk(16, corpus.vocab.len(), corpus.num_tasks());
    let init = TransformerParams::init(&model, 4).unwrap();
    let mut fc = FinetuneConfig::new(TaskKind::MistakeStep, Mode::LinearProbe);
    fc.epochs = 2;
    let (params, _) = finetune(&init, &model, &fc, &data).unwrap();
    let others = [
        ParamGroup::Transformer,
        ParamGroup::StepHead,
        ParamGroup::TaskHead,
        ParamGroup::OrderHead,
        ParamGroup::ForecastHeads,
    ];
    assert_eq!(params.digest_groups(&others), init.digest_groups(&others));
    assert_ne!(
        params.digest_groups(&[ParamGroup::MistakeHead]),
        init.digest_groups(&[ParamGroup::MistakeHead])
    );
}

#[test]
fn jittered_finetuning_is_reproducible() {
    let corpus = noiseless_corpus();
    let data = mistake_steps(&corpus);
    let model = ModelConfig::desk(16, corpus.vocab.len(), corpus.num_tasks());
    let init = TransformerParams::init(&model, 6).unwrap();
    let mut fc = FinetuneConfig::new(TaskKind::MistakeStep, Mode::Finetune);
    fc.epochs = 2;
    fc.feature_jitter = 0.2;
    let (a, ra) = finetune(&init, &model, &fc, &data).unwrap();
    let (b, rb) = finetune(&init, &model, &fc, &data).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.epochs, rb.epochs);
    fc.feature_jitter = 0.0;
    let (c, _) = finetune(&init, &model, &fc, &data).unwrap();
    assert_ne!(a, c);
}
