mod common;

use common::{check_exhaustive_case, check_path_gradients, check_sampled_path_gradients};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simulmt::data::{gen_toy_corpus, ToyTask};
use simulmt::model::{ModelConfig, Parameters};
use simulmt::par::Execution;
use simulmt::training::{sample_k, train, AdamConfig, LossConfig, LossMode, TrainConfig, WaitK};

#[test]
fn path_loss_gradients_match_finite_differences() {
    check_path_gradients(150);
}

#[test]
fn sampled_path_gradients_match_finite_differences() {
    check_sampled_path_gradients(150);
}

#[test]
fn exhaustive_objective_is_mean_of_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        check_exhaustive_case(&mut rng);
    }
}

#[test]
fn path_sampler_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 6;
    let mut counts = [0usize; 6];
    let draws = 60_000;
    for _ in 0..draws {
        match sample_k(n, &mut rng) {
            WaitK::Finite(k) => counts[k - 1] += 1,
            WaitK::Infinite => panic!("sampler returned an infinite lag"),
        }
    }
    for c in counts {
        assert!(
            (c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.01,
            "{counts:?}"
        );
    }
}

#[test]
fn training_reduces_loss_and_is_execution_independent() {
    let c = gen_toy_corpus(1, 64, ToyTask::Copy).unwrap();
    let dev = gen_toy_corpus(2, 16, ToyTask::Copy).unwrap();
    let model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        n_enc_layers: 1,
        n_dec_layers: 1,
        ..ModelConfig::desk(c.vocab.len())
    };
    let cfg = TrainConfig {
        model: model.clone(),
        loss: LossConfig {
            smoothing: 0.1,
            mode: LossMode::MultiPath,
        },
        optimizer: AdamConfig {
            warmup_steps: 10,
            ..AdamConfig::default()
        },
        batch_size: 8,
        epochs: 3,
        seed: 3,
    };
    let init = Parameters::init(&model, 3).unwrap();
    let seq = train(
        init.clone(),
        &cfg,
        &c.pairs,
        &dev.pairs,
        Execution::Sequential,
    )
    .unwrap();
    let par = train(init, &cfg, &c.pairs, &dev.pairs, Execution::Parallel).unwrap();
    assert!(seq.params == par.params);
    assert_eq!(seq.log, par.log);
    assert!(seq.log.last().unwrap().dev_loss < seq.log[0].dev_loss);
}
