use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tvg_core::encoder::ModelDims;
use tvg_core::harness::{assemble_batch, batch_loss, evaluate, TrainConfig};
use tvg_core::losses::{hungarian_match, LossWeights, TermWeights};
use tvg_core::metrics::map_over_thresholds;
use tvg_core::model::Model;
use tvg_core::nn::Ctx;
use tvg_core::synthetic::{generate_corpus, GenerationConfig};
use tvg_core::{MomentSpan, RankedPredictions};

fn setup() -> (tvg_core::Dataset, Model) {
    let data = generate_corpus(&GenerationConfig::default()).unwrap().dataset;
    let cfg = TrainConfig {
        model: ModelDims {
            dropout: 0.0,
            ..ModelDims::test_scale()
        },
        ..TrainConfig::default()
    };
    let inputs = tvg_core::harness::input_dims(&data).unwrap();
    let model = Model::new(cfg.model_config(inputs), cfg.precision.dtype(), 0).unwrap();
    (data, model)
}

fn model_benches(c: &mut Criterion) {
    let (data, model) = setup();
    let samples: Vec<_> = data.positives().take(16).collect();
    let batch = assemble_batch(&data, &samples, None, model.dtype()).unwrap();

    c.bench_function("forward_batch16", |b| {
        b.iter(|| model.forward(&batch.input, None, &Ctx::eval()).unwrap())
    });

    let weights = LossWeights::default();
    c.bench_function("forward_backward_batch16", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(0),
            |mut rng| {
                let out = model.forward(&batch.input, None, &Ctx::eval()).unwrap();
                let (loss, _) = batch_loss(&out, &batch, None, &weights, model.config().k, &mut rng).unwrap();
                loss.backward().unwrap()
            },
            BatchSize::SmallInput,
        )
    });

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    group.bench_function("evaluate_64_videos", |b| b.iter(|| evaluate(&model, &data).unwrap()));
    group.finish();
}

fn matching_benches(c: &mut Criterion) {
    let span = |i: usize| MomentSpan::from_start_end((i % 7) as f64 * 0.1, (i % 7) as f64 * 0.1 + 0.2 + (i % 3) as f64 * 0.05).unwrap();
    let preds: Vec<MomentSpan> = (0..10).map(span).collect();
    let probs: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let gts: Vec<MomentSpan> = (3..7).map(|i| span(i * 5)).collect();
    let w = TermWeights::new(10.0, 1.0, 4.0);
    c.bench_function("hungarian_k10_g4", |b| b.iter(|| hungarian_match(&preds, &probs, &gts, &w)));

    let ranked: Vec<RankedPredictions> = (0..256)
        .map(|q| RankedPredictions::new(format!("q{q}"), (0..10).map(|i| (span(i + q), 1.0 / (1.0 + i as f64))).collect()))
        .collect();
    let all_gts: Vec<Vec<MomentSpan>> = (0..256).map(|q| vec![span(q * 3), span(q * 3 + 1)]).collect();
    c.bench_function("map_256_queries", |b| b.iter(|| map_over_thresholds(&ranked, &all_gts).unwrap()));
}

criterion_group!(benches, model_benches, matching_benches);
criterion_main!(benches);
