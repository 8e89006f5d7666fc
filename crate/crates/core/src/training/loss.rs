use rand::Rng;
use serde::{Deserialize, Serialize};

use super::waitk::{WaitK, WaitKPath};
use crate::model::{DecoderGraph, EncoderGraph, Gradients, Parameters};
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Train along one fixed wait-k path.
    SingleK(WaitK),
    /// Sample `k` uniformly from `1..=|x|` per sentence.
    MultiPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub smoothing: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            smoothing: 0.1,
            mode: LossMode::MultiPath,
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(format!(
            "smoothing must lie in [0, 1), got {eps}"
        )));
    }
    Ok(())
}

/// `-[(1-eps) log p(gold) + eps/(V-1) * sum_{v != gold} log p(v)]`.
pub fn label_smoothed_nll(log_probs: &[f64], gold: TokenId, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let v = log_probs.len();
    let g = gold as usize;
    if g >= v {
        return Err(Error::TokenOutOfRange { id: gold, size: v });
    }
    let gold_lp = log_probs[g];
    if eps == 0.0 || v < 2 {
        return Ok(-gold_lp);
    }
    let others: f64 = log_probs.iter().sum::<f64>() - gold_lp;
    Ok(-((1.0 - eps) * gold_lp + eps / (v - 1) as f64 * others))
}

/// Writes `weight * (softmax - smoothed_target)` into `dlogits`, the gradient
/// of the label-smoothed loss with respect to the logits.
fn smoothed_grad(log_probs: &[f64], gold: usize, eps: f64, weight: f64, dlogits: &mut [f64]) {
    let v = log_probs.len();
    let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
    for (i, (d, lp)) in dlogits.iter_mut().zip(log_probs).enumerate() {
        let target = if i == gold { 1.0 - eps } else { off };
        *d = weight * (lp.exp() - target);
    }
}

/// Loss summed over target steps along `path`, accumulating
/// `weight * d(sum)/d(params)` into `grads` and the memory gradient into `dmem`.
#[allow(clippy::too_many_arguments)]
fn decoder_loss_and_grad(
    params: &Parameters,
    enc: &EncoderGraph,
    y: &[TokenId],
    path: &[usize],
    eps: f64,
    weight: f64,
    grads: &mut Gradients,
    dmem: &mut [f64],
) -> Result<f64> {
    let dec = DecoderGraph::forward(params, enc, y, path)?;
    let v = dec.vocab();
    let mut dlogits = vec![0.0; y.len() * v];
    let mut total = 0.0;
    for (t, &g) in y.iter().enumerate() {
        let lp = dec.logprobs(t);
        total += label_smoothed_nll(lp, g, eps)?;
        smoothed_grad(
            lp,
            g as usize,
            eps,
            weight,
            &mut dlogits[t * v..(t + 1) * v],
        );
    }
    dec.backward(params, enc, &dlogits, grads, dmem);
    Ok(total)
}

fn path_for(k: WaitK, x: &[TokenId], y: &[TokenId]) -> Result<Vec<usize>> {
    Ok(WaitKPath::new(k, x.len())?.steps(y.len()))
}

/// Mean label-smoothed NLL per target token along the wait-k path.
pub fn path_loss(
    params: &Parameters,
    x: &[TokenId],
    y: &[TokenId],
    k: WaitK,
    eps: f64,
) -> Result<f64> {
    check_eps(eps)?;
    let enc = EncoderGraph::forward(params, x)?;
    path_loss_on(params, &enc, x, y, k, eps)
}

fn path_loss_on(
    params: &Parameters,
    enc: &EncoderGraph,
    x: &[TokenId],
    y: &[TokenId],
    k: WaitK,
    eps: f64,
) -> Result<f64> {
    let dec = DecoderGraph::forward(params, enc, y, &path_for(k, x, y)?)?;
    let mut total = 0.0;
    for (t, &g) in y.iter().enumerate() {
        total += label_smoothed_nll(dec.logprobs(t), g, eps)?;
    }
    Ok(total / y.len() as f64)
}

/// Summed (not averaged) path loss; accumulates `weight` times its gradient
/// into `grads`. Pass `weight = 1/|y|` to differentiate [`path_loss`].
pub fn path_loss_and_grad(
    params: &Parameters,
    x: &[TokenId],
    y: &[TokenId],
    k: WaitK,
    eps: f64,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    check_eps(eps)?;
    let enc = EncoderGraph::forward(params, x)?;
    let mut dmem = vec![0.0; enc.memory().len()];
    let loss = decoder_loss_and_grad(
        params,
        &enc,
        y,
        &path_for(k, x, y)?,
        eps,
        weight,
        grads,
        &mut dmem,
    )?;
    enc.backward(params, &dmem, grads);
    Ok(loss)
}

/// Uniform draw of `k` from `1..=src_len`.
pub fn sample_k<R: Rng + ?Sized>(src_len: usize, rng: &mut R) -> WaitK {
    WaitK::Finite(rng.gen_range(1..=src_len.max(1)))
}

/// Encodes the source once, samples one wait-k path uniformly and returns
/// its mean per-token loss with the sampled `k`.
pub fn multi_path_loss<R: Rng + ?Sized>(
    params: &Parameters,
    x: &[TokenId],
    y: &[TokenId],
    eps: f64,
    rng: &mut R,
) -> Result<(f64, WaitK)> {
    check_eps(eps)?;
    let enc = EncoderGraph::forward(params, x)?;
    let k = sample_k(x.len(), rng);
    Ok((path_loss_on(params, &enc, x, y, k, eps)?, k))
}

/// Gradient version of [`multi_path_loss`]; returns the summed loss.
pub fn multi_path_loss_and_grad<R: Rng + ?Sized>(
    params: &Parameters,
    x: &[TokenId],
    y: &[TokenId],
    eps: f64,
    weight: f64,
    rng: &mut R,
    grads: &mut Gradients,
) -> Result<(f64, WaitK)> {
    let k = sample_k(x.len(), rng);
    Ok((path_loss_and_grad(params, x, y, k, eps, weight, grads)?, k))
}

/// Mean over every `k` in `1..=|x|` of the per-path loss, reusing one source
/// encoding: the exact value of the sampled multi-path objective.
pub fn exhaustive_multi_path_loss(
    params: &Parameters,
    x: &[TokenId],
    y: &[TokenId],
    eps: f64,
) -> Result<f64> {
    check_eps(eps)?;
    let enc = EncoderGraph::forward(params, x)?;
    let mut sum = 0.0;
    for k in 1..=x.len() {
        sum += path_loss_on(params, &enc, x, y, WaitK::Finite(k), eps)?;
    }
    Ok(sum / x.len() as f64)
}
