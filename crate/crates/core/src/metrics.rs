//! Corpus BLEU, Average Lagging and latency/quality sweep records.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cascade::{cascade_decode, stream_duration_ms, CascadeConfig, CascadeMt, TimedWord};
use crate::data::{NumberLexicon, SourceTokenizer, Vocabulary, EOS};
use crate::online::{decode_corpus, ActionTrace, OnlinePolicy, StepModel};
use crate::par::{self, Execution};
use crate::training::WaitK;
use crate::{Error, Result, TokenId};

/// How zero n-gram matches are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Standard corpus BLEU: any empty precision gives a score of 0.
    #[default]
    None,
    /// Non-canonical: `(m + 1) / (c + 1)` for orders above 1. Useful on tiny
    /// corpora where higher-order matches are sparse.
    AddOne,
}

impl FromStr for Smoothing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Smoothing::None),
            "add_one" | "add-one" => Ok(Smoothing::AddOne),
            _ => Err(Error::invalid(format!("unknown smoothing `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuBreakdown {
    /// Clipped precision per order, 1..=max_n.
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub brevity_penalty: f64,
    /// In `[0, 1]`.
    pub score: f64,
}

fn ngram_counts<T: Eq + Hash>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Single-reference corpus BLEU with clipped n-gram counts and the usual
/// brevity penalty `exp(1 - r/h)` for `h < r`.
pub fn corpus_bleu<T: Eq + Hash>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BleuBreakdown> {
    if hyps.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::invalid("max_n must be at least 1"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if ref_len == 0 {
        return Err(Error::invalid("references are empty"));
    }
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| match smoothing {
            Smoothing::AddOne if i > 0 => (matches[i] + 1) as f64 / (totals[i] + 1) as f64,
            _ if totals[i] == 0 => 0.0,
            _ => matches[i] as f64 / totals[i] as f64,
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    Ok(BleuBreakdown {
        precisions,
        matches,
        totals,
        hyp_len,
        ref_len,
        brevity_penalty,
        score,
    })
}

/// Whitespace tokenization used for detokenized scoring.
pub fn split_words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Average Lagging over a delay sequence `g`:
/// `AL = 1/τ · Σ_{t=1..τ} [g(t) − (t−1)·rate]`, where `τ` is the first step
/// whose delay reaches `full` (or the last step when none does) and `rate`
/// is the source consumed per ideal target step. This is the definition of
/// Ma et al. (2019), "STACL".
fn average_lagging(g: &[f64], full: f64, rate: f64) -> f64 {
    let tau = g.iter().position(|&d| d >= full).map_or(g.len(), |i| i + 1);
    let sum: f64 = g[..tau]
        .iter()
        .enumerate()
        .map(|(t, &d)| d - t as f64 * rate)
        .sum();
    sum / tau as f64
}

/// Delays of the non-EOS writes; when the hypothesis is empty the EOS write
/// itself stands in.
fn write_delays<F>(trace: &ActionTrace, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, Option<f64>) -> Result<f64>,
{
    let writes = trace.writes();
    let mut g: Vec<f64> = Vec::with_capacity(writes.len());
    for &(tok, gt, gms) in &writes {
        if tok != EOS {
            g.push(f(gt, gms)?);
        }
    }
    if g.is_empty() {
        let &(_, gt, gms) = writes
            .last()
            .ok_or_else(|| Error::invalid("trace has no writes"))?;
        g.push(f(gt, gms)?);
    }
    Ok(g)
}

/// Word-level Average Lagging of a trace. `src_len` counts every readable
/// source unit (including an end-of-source marker) and `tgt_len` is the
/// hypothesis length without EOS (at least 1). The EOS write is not a step.
pub fn average_lagging_words(trace: &ActionTrace, src_len: usize, tgt_len: usize) -> Result<f64> {
    if src_len == 0 || tgt_len == 0 {
        return Err(Error::invalid("source and target lengths must be positive"));
    }
    let mut g = write_delays(trace, |gt, _| {
        if gt > src_len {
            Err(Error::invalid(format!(
                "delay {gt} exceeds source length {src_len}"
            )))
        } else {
            Ok(gt as f64)
        }
    })?;
    g.truncate(tgt_len);
    Ok(average_lagging(
        &g,
        src_len as f64,
        src_len as f64 / tgt_len as f64,
    ))
}

/// Millisecond Average Lagging: delays are the audio consumed at each write
/// and the ideal writer spends `total_src_ms / tgt_len` per token.
pub fn average_lagging_ms(trace: &ActionTrace, total_src_ms: f64, tgt_len: usize) -> Result<f64> {
    if !(total_src_ms > 0.0) || tgt_len == 0 {
        return Err(Error::invalid("total_src_ms and tgt_len must be positive"));
    }
    let mut g = write_delays(trace, |_, gms| {
        gms.ok_or_else(|| Error::invalid("write without g_ms"))
    })?;
    g.truncate(tgt_len);
    Ok(average_lagging(
        &g,
        total_src_ms,
        total_src_ms / tgt_len as f64,
    ))
}

/// Number of non-EOS writes, at least 1.
pub fn hypothesis_steps(trace: &ActionTrace) -> usize {
    trace.writes().iter().filter(|w| w.0 != EOS).count().max(1)
}

/// One point of a latency/quality curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub system_id: String,
    pub k_eval: WaitK,
    pub bleu: f64,
    pub al_words: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub al_ms: Option<f64>,
}

/// Per-sentence observation feeding a [`TradeoffRecord`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSentence {
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
    pub al_words: f64,
    pub al_ms: Option<f64>,
}

/// Scores one sentence from its detokenized hypothesis and trace.
pub fn score_sentence(
    hypothesis: &str,
    reference: &str,
    trace: &ActionTrace,
    src_len: usize,
    total_src_ms: Option<f64>,
) -> Result<ScoredSentence> {
    let steps = hypothesis_steps(trace);
    let al_words = average_lagging_words(trace, src_len, steps)?;
    let al_ms = match total_src_ms {
        Some(ms) => Some(average_lagging_ms(trace, ms, steps)?),
        None => None,
    };
    Ok(ScoredSentence {
        hypothesis: split_words(hypothesis),
        reference: split_words(reference),
        al_words,
        al_ms,
    })
}

/// Corpus BLEU plus mean lagging over sentences given in corpus order.
pub fn aggregate(
    system_id: &str,
    k_eval: WaitK,
    sentences: &[ScoredSentence],
) -> Result<TradeoffRecord> {
    if sentences.is_empty() {
        return Err(Error::invalid("no sentences to score"));
    }
    let hyps: Vec<Vec<String>> = sentences.iter().map(|s| s.hypothesis.clone()).collect();
    let refs: Vec<Vec<String>> = sentences.iter().map(|s| s.reference.clone()).collect();
    let bleu = corpus_bleu(&hyps, &refs, 4, Smoothing::None)?.score;
    let n = sentences.len() as f64;
    let al_words = sentences.iter().map(|s| s.al_words).sum::<f64>() / n;
    let al_ms = if sentences.iter().all(|s| s.al_ms.is_some()) {
        Some(
            sentences
                .iter()
                .map(|s| s.al_ms.unwrap_or(0.0))
                .sum::<f64>()
                / n,
        )
    } else {
        None
    };
    Ok(TradeoffRecord {
        system_id: system_id.to_string(),
        k_eval,
        bleu,
        al_words,
        al_ms,
    })
}

impl fmt::Display for TradeoffRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},",
            self.system_id, self.k_eval, self.bleu, self.al_words
        )?;
        if let Some(ms) = self.al_ms {
            write!(f, "{ms}")?;
        }
        Ok(())
    }
}

pub const SWEEP_HEADER: &str = "system,k,bleu,al_words,al_ms";

/// Writes `system,k,bleu,al_words,al_ms` rows at full precision.
pub fn write_sweep_csv<W: Write>(mut w: W, records: &[TradeoffRecord]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in records {
        writeln!(w, "{r}")?;
    }
    Ok(())
}

/// Orders records by system id, then k (finite before infinite).
pub fn sort_records(records: &mut [TradeoffRecord]) {
    records.sort_by(|a, b| a.system_id.cmp(&b.system_id).then(a.k_eval.cmp(&b.k_eval)));
}

/// A named model (or ensemble) taking part in a sweep.
pub struct SweepSystem<M> {
    pub id: String,
    pub models: Vec<M>,
}

/// Evaluation data for one sweep mode.
pub enum TestSet<'a> {
    /// Text input: token-id sources ending with the end-of-source marker.
    Text {
        sources: &'a [Vec<TokenId>],
        references: &'a [String],
        target_vocab: &'a Vocabulary,
        alpha_len: f64,
        beta_len: usize,
    },
    /// Timed word streams decoded through the cascade. The swept value sets
    /// the write-budget offset β.
    Speech {
        streams: &'a [Vec<TimedWord>],
        references: &'a [String],
        target_vocab: &'a Vocabulary,
        tokenizer: &'a dyn SourceTokenizer,
        lexicon: &'a NumberLexicon,
        cascade: &'a CascadeConfig,
    },
}

/// Scores every sentence of a text test set decoded with `policy`.
pub fn evaluate_text<M: StepModel>(
    models: &[M],
    sources: &[Vec<TokenId>],
    references: &[String],
    target_vocab: &Vocabulary,
    policy: &OnlinePolicy,
    exec: Execution,
) -> Result<Vec<ScoredSentence>> {
    if sources.len() != references.len() {
        return Err(Error::invalid("sources and references differ in length"));
    }
    let decoded = decode_corpus(models, sources, policy, exec)?;
    decoded
        .iter()
        .zip(sources)
        .zip(references)
        .map(|((d, x), r)| {
            score_sentence(
                &target_vocab.detokenize(&d.tokens),
                r,
                &d.trace,
                x.len(),
                None,
            )
        })
        .collect()
}

/// Scores every document of a speech test set run through the cascade.
pub fn evaluate_speech<M: StepModel>(
    models: &[M],
    streams: &[Vec<TimedWord>],
    references: &[String],
    target_vocab: &Vocabulary,
    tokenizer: &dyn SourceTokenizer,
    lexicon: &NumberLexicon,
    cascade: &CascadeConfig,
    exec: Execution,
) -> Result<Vec<ScoredSentence>> {
    if streams.len() != references.len() {
        return Err(Error::invalid("streams and references differ in length"));
    }
    let mt = CascadeMt {
        models,
        tokenizer,
        lexicon,
    };
    let idx: Vec<usize> = (0..streams.len()).collect();
    par::try_map(exec, &idx, |&i| {
        let out = cascade_decode(&streams[i], &mt, cascade, None, None)?;
        let total_ms = stream_duration_ms(&streams[i]);
        let ms = if total_ms > 0.0 { Some(total_ms) } else { None };
        score_sentence(
            &target_vocab.detokenize(&out.tokens),
            &references[i],
            &out.trace,
            out.source_len,
            ms,
        )
    })
}

/// One record per `(system, k)`, ordered by system id and then k.
pub fn sweep<M: StepModel>(
    systems: &[SweepSystem<M>],
    k_values: &[WaitK],
    testset: &TestSet<'_>,
    exec: Execution,
) -> Result<Vec<TradeoffRecord>> {
    if systems.is_empty() || k_values.is_empty() {
        return Err(Error::invalid("sweep needs at least one system and one k"));
    }
    let points: Vec<(usize, WaitK)> = (0..systems.len())
        .flat_map(|s| k_values.iter().map(move |&k| (s, k)))
        .collect();
    let mut records = par::try_map(exec, &points, |&(s, k)| {
        let sys = &systems[s];
        let sentences = match *testset {
            TestSet::Text {
                sources,
                references,
                target_vocab,
                alpha_len,
                beta_len,
            } => {
                let policy = OnlinePolicy {
                    k_eval: k,
                    alpha_len,
                    beta_len,
                };
                evaluate_text(
                    &sys.models,
                    sources,
                    references,
                    target_vocab,
                    &policy,
                    Execution::Sequential,
                )?
            }
            TestSet::Speech {
                streams,
                references,
                target_vocab,
                tokenizer,
                lexicon,
                cascade,
            } => {
                let WaitK::Finite(beta) = k else {
                    return Err(Error::invalid("speech sweeps need finite values"));
                };
                let cfg = CascadeConfig {
                    beta: beta as f64,
                    ..cascade.clone()
                };
                evaluate_speech(
                    &sys.models,
                    streams,
                    references,
                    target_vocab,
                    tokenizer,
                    lexicon,
                    &cfg,
                    Execution::Sequential,
                )?
            }
        };
        aggregate(&sys.id, k, &sentences)
    })?;
    sort_records(&mut records);
    Ok(records)
}
