use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_update, AdamConfig, OptimizerState};
use super::loss::{label_smoothed_nll, path_loss_and_grad, sample_k, LossConfig, LossMode};
use super::waitk::{WaitK, WaitKPath};
use crate::data::SentencePair;
use crate::model::{forward_teacher_forced, Gradients, ModelConfig, Parameters};
use crate::par::{self, Execution};
use crate::{Error, Result};

/// Sentences per gradient chunk. Chunks are the unit of parallel work and
/// are reduced in order, so results do not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest dev loss (initial weights when no
    /// epoch ran).
    pub params: Parameters,
    /// 1-based epoch of `params`, 0 for the initial weights.
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub updates: u64,
}

/// 1-based index of the first minimum.
pub fn best_epoch(dev_losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in dev_losses.iter().enumerate() {
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((i + 1, l));
        }
    }
    best.map(|(i, _)| i)
}

fn chunk_grads(
    params: &Parameters,
    items: &[(&SentencePair, WaitK)],
    eps: f64,
    weight: f64,
) -> Result<(f64, Gradients)> {
    let mut g = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for (p, k) in items {
        loss += path_loss_and_grad(params, &p.source, &p.target, *k, eps, weight, &mut g)?;
    }
    Ok((loss, g))
}

/// Token-averaged loss and gradient over a batch of `(pair, k)` items.
pub(crate) fn batch_gradients(
    params: &Parameters,
    items: &[(&SentencePair, WaitK)],
    eps: f64,
    exec: Execution,
) -> Result<(f64, usize, Gradients)> {
    let tokens: usize = items.iter().map(|(p, _)| p.target.len()).sum();
    let weight = 1.0 / tokens.max(1) as f64;
    let chunks: Vec<&[(&SentencePair, WaitK)]> = items.chunks(CHUNK).collect();
    let parts = par::map(exec, &chunks, |c| chunk_grads(params, c, eps, weight));
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss / tokens.max(1) as f64, tokens, total))
}

fn dev_paths(dev: &[SentencePair], mode: LossMode, seed: u64) -> Vec<WaitK> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_dde7);
    dev.iter()
        .map(|p| match mode {
            LossMode::SingleK(k) => k,
            LossMode::MultiPath => sample_k(p.source.len(), &mut rng),
        })
        .collect()
}

/// Unsmoothed NLL per target token along fixed per-sentence paths.
fn dev_loss(
    params: &Parameters,
    dev: &[SentencePair],
    paths: &[WaitK],
    exec: Execution,
) -> Result<f64> {
    if dev.is_empty() {
        return Ok(f64::NAN);
    }
    let idx: Vec<usize> = (0..dev.len()).collect();
    let parts = par::try_map(exec, &idx, |&i| -> Result<(f64, usize)> {
        let p = &dev[i];
        let path = WaitKPath::new(paths[i], p.source.len())?.steps(p.target.len());
        let lp = forward_teacher_forced(params, &p.source, &p.target, &path)?;
        Ok((-lp.iter().sum::<f64>(), lp.len()))
    })?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, n), (l, c)| (s + l, n + c));
    Ok(sum / n as f64)
}

/// Mini-batch training with best-dev checkpoint selection. Deterministic
/// given `config.seed`, independent of the execution strategy.
pub fn train(
    init: Parameters,
    config: &TrainConfig,
    train_set: &[SentencePair],
    dev_set: &[SentencePair],
    exec: Execution,
) -> Result<TrainOutcome> {
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    if config.epochs > 0 && train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let eps = config.loss.smoothing;
    label_smoothed_nll(&[0.0], 0, eps)?;
    let mut params = init;
    let mut best = params.clone();
    let mut best_dev = f64::INFINITY;
    let mut best_ep = 0;
    let mut opt = OptimizerState::new(&params, config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dev_k = dev_paths(dev_set, config.loss.mode, config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut tok_sum = 0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<(&SentencePair, WaitK)> = batch
                .iter()
                .map(|&i| {
                    let p = &train_set[i];
                    let k = match config.loss.mode {
                        LossMode::SingleK(k) => k,
                        LossMode::MultiPath => sample_k(p.source.len(), &mut rng),
                    };
                    (p, k)
                })
                .collect();
            let (loss, tokens, grads) = batch_gradients(&params, &items, eps, exec)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            adam_update(&mut params, &grads, &mut opt)?;
            loss_sum += loss * tokens as f64;
            tok_sum += tokens;
        }
        let dev = dev_loss(&params, dev_set, &dev_k, exec)?;
        if !dev.is_nan() && !dev.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: usize::MAX,
            });
        }
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / tok_sum.max(1) as f64,
            dev_loss: dev,
            lr: opt.current_lr(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} dev {:.4} lr {:.2e}",
            entry.train_loss,
            entry.dev_loss,
            entry.lr
        );
        log.push(entry);
        // without a dev set the latest weights win
        if dev.is_nan() || dev < best_dev {
            best_dev = if dev.is_nan() { best_dev } else { dev };
            best = params.clone();
            best_ep = epoch;
        }
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch: best_ep,
        log,
        updates: opt.step,
    })
}

/// CSV `epoch,train_loss,dev_loss,lr`.
pub fn write_training_log<W: Write>(mut w: W, log: &[EpochLog]) -> Result<()> {
    writeln!(w, "epoch,train_loss,dev_loss,lr")?;
    for e in log {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6e}",
            e.epoch, e.train_loss, e.dev_loss, e.lr
        )?;
    }
    Ok(())
}
