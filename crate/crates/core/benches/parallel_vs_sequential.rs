//! Batch gradients and utterance scoring with one worker against all
//! available workers. Build with `--no-default-features` to benchmark the
//! sequential fallback, where both variants run on the calling thread.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tastas::numerics::par;
use tastas::pipeline::{example_gradient, score_model, Example};
use tastas::sepnet::{StageConfig, TasTasModel};
use tastas::signal::{mix_at_snr, synth_speaker_source, DEFAULT_SAMPLE_RATE};

fn examples(n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let a = synth_speaker_source(i % 8, 0.5, i as u64, DEFAULT_SAMPLE_RATE).unwrap();
            let b = synth_speaker_source((i + 3) % 8, 0.5, 100 + i as u64, DEFAULT_SAMPLE_RATE).unwrap();
            let (mix, s1, s2) = mix_at_snr(&a, &b, 2.5).unwrap();
            Example::new(format!("bench{i}"), mix, vec![s1, s2], vec!["a".into(), "b".into()]).unwrap()
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let model = TasTasModel::new(vec![StageConfig::sized(16, 20, 16, 1); 2], false, 0).unwrap();
    let batch = examples(3);
    let eval = examples(8);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let variants = [("sequential", 1), ("parallel", workers)];

    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for (name, threads) in variants {
        group.bench_with_input(BenchmarkId::new(name, threads), &threads, |b, &t| {
            b.iter(|| par::install(t, || par::map_indexed(batch.len(), |i| example_gradient(&model, &batch[i], None).unwrap())))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("score_utterances");
    group.sample_size(10);
    for (name, threads) in variants {
        group.bench_with_input(BenchmarkId::new(name, threads), &threads, |b, &t| {
            b.iter(|| par::install(t, || par::map_indexed(eval.len(), |i| score_model(&model, &eval[i], None).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
