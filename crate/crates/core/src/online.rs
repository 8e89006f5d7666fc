//! Greedy wait-k decoding over an incrementally revealed source.
//!
//! The decoder alternates READ and WRITE actions following the wait-k
//! schedule and records every action in an [`ActionTrace`], which is the
//! only input the lagging metrics need. Several models can be decoded as an
//! ensemble; their per-step log-distributions are averaged and renormalized.

use serde::{Deserialize, Serialize};

use crate::data::{Vocabulary, BOS, EOS};
use crate::model::ops::log_softmax;
use crate::model::{decode_step, DecoderState, EncoderState, Parameters};
use crate::par::{self, Execution};
use crate::training::{wait_k_z, WaitK};
use crate::{Error, Result, TokenId};

/// One READ or WRITE event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    /// Source unit `index` (0-based) became visible, optionally at a time.
    Read { index: usize, ms: Option<f64> },
    /// `token` was emitted after `g` source units had been read.
    Write {
        token: TokenId,
        g: usize,
        g_ms: Option<f64>,
    },
}

/// Ordered READ/WRITE events of one decode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActionTrace {
    events: Vec<Action>,
    reads: usize,
}

impl ActionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read(&mut self, ms: Option<f64>) {
        self.events.push(Action::Read {
            index: self.reads,
            ms,
        });
        self.reads += 1;
    }

    /// Records a write; `g` is the number of reads so far.
    pub fn write(&mut self, token: TokenId, g_ms: Option<f64>) {
        self.events.push(Action::Write {
            token,
            g: self.reads,
            g_ms,
        });
    }

    pub fn events(&self) -> &[Action] {
        &self.events
    }

    pub fn num_reads(&self) -> usize {
        self.reads
    }

    /// `(token, g, g_ms)` for every write in order.
    pub fn writes(&self) -> Vec<(TokenId, usize, Option<f64>)> {
        self.events
            .iter()
            .filter_map(|e| match *e {
                Action::Write { token, g, g_ms } => Some((token, g, g_ms)),
                Action::Read { .. } => None,
            })
            .collect()
    }

    /// Checks that each write's `g` counts the preceding reads, that `g` and
    /// `g_ms` never decrease and that the last write is EOS.
    pub fn validate(&self) -> Result<()> {
        let mut reads = 0;
        let mut last_ms = f64::NEG_INFINITY;
        let mut last_token = None;
        for e in &self.events {
            match *e {
                Action::Read { index, .. } => {
                    if index != reads {
                        return Err(Error::invalid(format!(
                            "read index {index}, expected {reads}"
                        )));
                    }
                    reads += 1;
                }
                Action::Write { token, g, g_ms } => {
                    if g != reads {
                        return Err(Error::invalid(format!(
                            "write has g={g} after {reads} reads"
                        )));
                    }
                    if let Some(ms) = g_ms {
                        if !(ms >= last_ms) {
                            return Err(Error::invalid("g_ms decreased"));
                        }
                        last_ms = ms;
                    }
                    last_token = Some(token);
                }
            }
        }
        if last_token != Some(EOS) {
            return Err(Error::invalid("trace does not end with an EOS write"));
        }
        Ok(())
    }

    /// Compact serializable form.
    pub fn entries(&self) -> Vec<TraceEntry> {
        let mut reads = 0;
        self.events
            .iter()
            .map(|e| match *e {
                Action::Read { ms, .. } => {
                    reads += 1;
                    TraceEntry {
                        a: 'R',
                        g: reads,
                        g_ms: ms,
                    }
                }
                Action::Write { g, g_ms, .. } => TraceEntry { a: 'W', g, g_ms },
            })
            .collect()
    }
}

/// Serialized trace event: `a` is `R` or `W`, `g` the reads so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub a: char,
    pub g: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_ms: Option<f64>,
}

/// Decoding schedule and hypothesis length cap `α_len·|x| + β_len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlinePolicy {
    pub k_eval: WaitK,
    #[serde(default = "default_alpha_len")]
    pub alpha_len: f64,
    #[serde(default = "default_beta_len")]
    pub beta_len: usize,
}

fn default_alpha_len() -> f64 {
    1.0
}

fn default_beta_len() -> usize {
    50
}

impl OnlinePolicy {
    pub fn new(k_eval: WaitK) -> Self {
        OnlinePolicy {
            k_eval,
            alpha_len: default_alpha_len(),
            beta_len: default_beta_len(),
        }
    }

    /// Maximum number of non-EOS tokens for a source of `src_len` tokens.
    pub fn max_len(&self, src_len: usize) -> usize {
        (self.alpha_len * src_len as f64).floor() as usize + self.beta_len
    }
}

/// A model that can be fed source tokens and queried step by step.
pub trait StepModel: Sync {
    type State: Send;

    fn vocab_size(&self) -> usize;

    fn start(&self) -> Self::State;

    /// Makes `tokens` visible after the already read prefix.
    fn read(&self, state: &mut Self::State, tokens: &[TokenId]) -> Result<()>;

    /// Feeds `prev` and returns the next-token log-distribution while
    /// attending to the first `z` source tokens.
    fn step(&self, state: &mut Self::State, prev: TokenId, z: usize) -> Result<Vec<f64>>;
}

impl StepModel for Parameters {
    type State = (EncoderState, DecoderState);

    fn vocab_size(&self) -> usize {
        self.config().tgt_vocab_size
    }

    fn start(&self) -> Self::State {
        (EncoderState::empty(self), DecoderState::new(self))
    }

    fn read(&self, state: &mut Self::State, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        state.0.extend(self, tokens)
    }

    fn step(&self, state: &mut Self::State, prev: TokenId, z: usize) -> Result<Vec<f64>> {
        decode_step(self, &state.0, &mut state.1, prev, z)
    }
}

/// Mean of log-probabilities renormalized with a log-softmax. A single
/// distribution is returned unchanged.
pub fn ensemble_logprobs(per_model: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::invalid("no distributions to ensemble"))?;
    if per_model.len() == 1 {
        return Ok(first.clone());
    }
    let v = first.len();
    if let Some(bad) = per_model.iter().find(|d| d.len() != v) {
        return Err(Error::Shape(format!(
            "vocabulary sizes {v} and {} differ",
            bad.len()
        )));
    }
    let n = per_model.len() as f64;
    let mut out: Vec<f64> = (0..v)
        .map(|i| per_model.iter().map(|d| d[i]).sum::<f64>() / n)
        .collect();
    log_softmax(&mut out);
    Ok(out)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Several models decoded in lockstep, each with its own state.
pub struct Ensemble<'a, M: StepModel> {
    models: &'a [M],
    states: Vec<M::State>,
    prev: TokenId,
}

impl<'a, M: StepModel> Ensemble<'a, M> {
    pub fn new(models: &'a [M]) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::invalid("at least one model is required"))?;
        if models.iter().any(|m| m.vocab_size() != first.vocab_size()) {
            return Err(Error::Shape(
                "ensemble members have different target vocabularies".into(),
            ));
        }
        Ok(Ensemble {
            models,
            states: models.iter().map(|m| m.start()).collect(),
            prev: BOS,
        })
    }

    pub fn read(&mut self, tokens: &[TokenId]) -> Result<()> {
        for (m, s) in self.models.iter().zip(self.states.iter_mut()) {
            m.read(s, tokens)?;
        }
        Ok(())
    }

    /// Greedy next token given the first `z` source tokens.
    pub fn predict(&mut self, z: usize) -> Result<TokenId> {
        let mut dists = Vec::with_capacity(self.models.len());
        for (m, s) in self.models.iter().zip(self.states.iter_mut()) {
            dists.push(m.step(s, self.prev, z)?);
        }
        let tok = argmax(&ensemble_logprobs(&dists)?) as TokenId;
        self.prev = tok;
        Ok(tok)
    }
}

/// Result of decoding one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Hypothesis without the final EOS.
    pub tokens: Vec<TokenId>,
    pub trace: ActionTrace,
    /// The length cap was hit and EOS was forced.
    pub truncated: bool,
}

/// Wait-k greedy decoding of `x` (which should end with the end-of-source
/// marker). Reads follow `z_t = min(k + t - 1, |x|)`; after the source is
/// depleted the decoder writes until EOS or the length cap.
pub fn online_greedy_decode<M: StepModel>(
    models: &[M],
    x: &[TokenId],
    policy: &OnlinePolicy,
) -> Result<Decoded> {
    if x.is_empty() {
        return Err(Error::invalid("source must contain at least one token"));
    }
    if let WaitK::Finite(0) = policy.k_eval {
        return Err(Error::invalid("k_eval must be at least 1"));
    }
    let mut ens = Ensemble::new(models)?;
    let cap = policy.max_len(x.len());
    let mut trace = ActionTrace::new();
    let mut tokens = Vec::new();
    let mut read = 0;
    loop {
        let t = tokens.len() + 1;
        let z = wait_k_z(policy.k_eval, t, x.len());
        if z > read {
            ens.read(&x[read..z])?;
            for _ in read..z {
                trace.read(None);
            }
            read = z;
        }
        if tokens.len() >= cap {
            trace.write(EOS, None);
            return Ok(Decoded {
                tokens,
                trace,
                truncated: true,
            });
        }
        let tok = ens.predict(z)?;
        trace.write(tok, None);
        if tok == EOS {
            return Ok(Decoded {
                tokens,
                trace,
                truncated: false,
            });
        }
        tokens.push(tok);
    }
}

/// Decodes every source independently, in input order.
pub fn decode_corpus<M: StepModel>(
    models: &[M],
    sources: &[Vec<TokenId>],
    policy: &OnlinePolicy,
    exec: Execution,
) -> Result<Vec<Decoded>> {
    par::try_map(exec, sources, |x| online_greedy_decode(models, x, policy))
}

/// One JSON line of hypothesis output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub id: usize,
    pub tokens: Vec<String>,
    pub detok: String,
    pub trace: Vec<TraceEntry>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl HypothesisRecord {
    pub fn new(id: usize, decoded: &Decoded, vocab: &Vocabulary) -> Self {
        HypothesisRecord {
            id,
            tokens: decoded
                .tokens
                .iter()
                .map(|&t| vocab.token(t).unwrap_or("<unk>").to_string())
                .collect(),
            detok: vocab.detokenize(&decoded.tokens),
            trace: decoded.trace.entries(),
            truncated: decoded.truncated,
        }
    }
}
