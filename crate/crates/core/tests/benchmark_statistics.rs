use statrs::distribution::{ChiSquared, ContinuousCDF};
use stepmask::benchmarks::{build_set, SplitName, SynthesisOptions, TaskKind, Target};
use stepmask::corpus::{Corpus, CorpusConfig};
use stepmask::downstream::{score, Prediction};

fn corpus(value: serde_json::Value) -> Corpus {
    let cfg: CorpusConfig = serde_json::from_value(value).unwrap();
    Corpus::generate(&cfg).unwrap()
}

#[test]
fn mistake_position_is_uniform() {
    let c = corpus(serde_json::json!({
        "num_tasks": 5, "steps_per_task": 6, "vocab_size": 30, "videos_per_task": 20,
        "feature_dim": 4, "embed_dim": 8, "seed": 31
    }));
    assert!(c.videos.iter().all(|v| v.len() == 6));
    let options = SynthesisOptions {
        draws_per_video: 60,
        ..SynthesisOptions::default()
    };
    let set = build_set(TaskKind::MistakeStep, &c.videos, &c.videos, SplitName::Train, 3, "", &options).unwrap();
    let mut counts = [0usize; 6];
    for inst in &set.instances {
        match inst.target {
            Target::MistakeStep(j) => counts[j] += 1,
            _ => unreachable!(),
        }
    }
    let n = set.instances.len() as f64;
    assert_eq!(n, 6000.0);
    let expected = n / 6.0;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p_value = 1.0 - ChiSquared::new(5.0).unwrap().cdf(chi2);
    assert!(p_value > 1e-3, "counts {counts:?}, chi2 {chi2:.2}, p {p_value:.2e}");
}

#[test]
fn constant_ordered_predictor_scores_the_positive_fraction() {
    let c = corpus(serde_json::json!({
        "num_tasks": 10, "steps_per_task": 6, "min_steps_per_task": 3, "vocab_size": 60,
        "videos_per_task": 20, "feature_dim": 4, "embed_dim": 8, "skip_probability": 0.2, "seed": 32
    }));
    let options = SynthesisOptions {
        draws_per_video: 50,
        ..SynthesisOptions::default()
    };
    let set = build_set(TaskKind::MistakeOrder, &c.videos, &c.videos, SplitName::Test, 9, "", &options).unwrap();
    assert_eq!(set.instances.len(), 10_000);
    let positives = set
        .instances
        .iter()
        .filter(|i| i.target == Target::MistakeOrder { permuted: false })
        .count();
    let (mut correct, mut total) = (0, 0);
    for inst in &set.instances {
        let (a, b) = score(&Prediction::Permuted(false), &inst.target).unwrap();
        correct += a;
        total += b;
    }
    assert_eq!(correct, positives);
    let accuracy = correct as f64 / total as f64;
    assert!((accuracy - 0.5).abs() <= 0.02, "accuracy {accuracy}");
}
