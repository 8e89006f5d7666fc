use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use simulmt::data::{gen_toy_corpus, ToyTask};
use simulmt::model::{ModelConfig, Parameters};
use simulmt::online::{decode_corpus, OnlinePolicy};
use simulmt::par::Execution;
use simulmt::training::{train, AdamConfig, LossConfig, TrainConfig, WaitK};
use simulmt::TokenId;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn bench_training(c: &mut Criterion) {
    let corpus = gen_toy_corpus(1, 256, ToyTask::DigitToWord).unwrap();
    let dev = gen_toy_corpus(2, 32, ToyTask::DigitToWord).unwrap();
    let model = ModelConfig::desk(corpus.vocab.len());
    let cfg = TrainConfig {
        model: model.clone(),
        loss: LossConfig::default(),
        optimizer: AdamConfig::default(),
        batch_size: 32,
        epochs: 1,
        seed: 1,
    };
    let init = Parameters::init(&model, 1).unwrap();
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train(init.clone(), &cfg, &corpus.pairs, &dev.pairs, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_decoding(c: &mut Criterion) {
    let test = gen_toy_corpus(3, 200, ToyTask::DigitToWord).unwrap();
    let params = Parameters::init(&ModelConfig::desk(test.vocab.len()), 2).unwrap();
    let sources: Vec<Vec<TokenId>> = test.pairs.iter().map(|p| p.source.clone()).collect();
    let policy = OnlinePolicy::new(WaitK::Finite(3));
    let models = [params];
    let mut group = c.benchmark_group("decode_corpus");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| decode_corpus(&models, &sources, &policy, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_training, bench_decoding);
criterion_main!(benches);
