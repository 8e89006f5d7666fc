//! Speech-to-text cascade: a simulated streaming recognizer with rule-based
//! endpointing feeding the online MT decoder under a write budget.
//!
//! The recognizer is replaced by gold timed transcripts: a word becomes
//! decoded once the consumed audio covers its end. The controller reads
//! `sz` audio blocks at a time, hands each finalized transcription chunk to
//! the MT model, and lets the MT write while `|y| < α·|x_asr| + β`.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{asr_normalize, NumberLexicon, SourceTokenizer, EOS};
use crate::online::{ActionTrace, Ensemble, StepModel};
use crate::{Error, Result, TokenId};

/// A recognized word with its time span in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub word: String,
    pub start_ms: f64,
    pub duration_ms: f64,
}

impl TimedWord {
    pub fn new(word: impl Into<String>, start_ms: f64, duration_ms: f64) -> Self {
        TimedWord {
            word: word.into(),
            start_ms,
            duration_ms,
        }
    }

    pub fn end_ms(&self) -> f64 {
        self.start_ms + self.duration_ms
    }
}

/// Checks durations, ordering and overlap.
pub fn validate_stream(words: &[TimedWord]) -> Result<()> {
    let mut prev_end = f64::NEG_INFINITY;
    for (i, w) in words.iter().enumerate() {
        if !(w.duration_ms > 0.0)
            || !w.start_ms.is_finite()
            || !w.duration_ms.is_finite()
            || w.start_ms < 0.0
        {
            return Err(Error::invalid(format!(
                "word {i} `{}` has an invalid time span",
                w.word
            )));
        }
        if w.start_ms < prev_end {
            return Err(Error::invalid(format!(
                "word {i} `{}` starts before the previous word ends",
                w.word
            )));
        }
        prev_end = w.end_ms();
    }
    Ok(())
}

/// Audio length implied by a stream: the end of its last word.
pub fn stream_duration_ms(words: &[TimedWord]) -> f64 {
    words.last().map_or(0.0, TimedWord::end_ms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    /// Trailing silence, even if nothing was decoded.
    A,
    /// Trailing silence after decoding something, with a final state whose
    /// relative cost is below `c`.
    B,
    /// Trailing silence after decoding something, final state not required.
    C,
    /// Utterance length, regardless of anything else.
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointRule {
    pub kind: RuleKind,
    pub t_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

impl EndpointRule {
    pub fn a(t_seconds: f64) -> Self {
        EndpointRule {
            kind: RuleKind::A,
            t_seconds,
            c: None,
        }
    }

    pub fn b(t_seconds: f64, c: f64) -> Self {
        EndpointRule {
            kind: RuleKind::B,
            t_seconds,
            c: Some(c),
        }
    }

    pub fn c(t_seconds: f64) -> Self {
        EndpointRule {
            kind: RuleKind::C,
            t_seconds,
            c: None,
        }
    }

    pub fn d(t_seconds: f64) -> Self {
        EndpointRule {
            kind: RuleKind::D,
            t_seconds,
            c: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_seconds > 0.0) {
            return Err(Error::invalid("endpoint rule time must be positive"));
        }
        match (self.kind, self.c) {
            (RuleKind::B, Some(c)) if c > 0.0 => Ok(()),
            (RuleKind::B, _) => Err(Error::invalid("rule b needs a positive cost threshold")),
            (_, None) => Ok(()),
            (_, Some(_)) => Err(Error::invalid("only rule b takes a cost threshold")),
        }
    }

    fn fires(&self, s: &AsrSnapshot) -> bool {
        match self.kind {
            RuleKind::A => s.silence_s >= self.t_seconds,
            RuleKind::B => {
                s.decoded_anything
                    && s.silence_s >= self.t_seconds
                    && s.final_state_reached
                    && s.cost_relative < self.c.unwrap_or(f64::NEG_INFINITY)
            }
            RuleKind::C => s.decoded_anything && s.silence_s >= self.t_seconds,
            RuleKind::D => s.utterance_s >= self.t_seconds,
        }
    }
}

impl std::str::FromStr for EndpointRule {
    type Err = Error;

    /// `a:T`, `b:T:C`, `c:T` or `d:T` with `T` in seconds.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number in rule `{s}`")))
        };
        let rule = match parts.as_slice() {
            ["a", t] => EndpointRule::a(num(t)?),
            ["b", t, c] => EndpointRule::b(num(t)?, num(c)?),
            ["c", t] => EndpointRule::c(num(t)?),
            ["d", t] => EndpointRule::d(num(t)?),
            _ => {
                return Err(Error::invalid(format!(
                    "bad endpoint rule `{s}`, expected kind:t[:c]"
                )))
            }
        };
        rule.validate()?;
        Ok(rule)
    }
}

/// The usual online-recognizer defaults: 5 s of silence; 0.5 s and 1 s of
/// silence with relative cost below 2 and 8; 2 s of silence after any
/// output; 20 s utterances.
pub fn default_endpoint_rules() -> Vec<EndpointRule> {
    vec![
        EndpointRule::a(5.0),
        EndpointRule::b(0.5, 2.0),
        EndpointRule::b(1.0, 8.0),
        EndpointRule::c(2.0),
        EndpointRule::d(20.0),
    ]
}

/// Recognizer state seen by the endpoint detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsrSnapshot {
    pub silence_s: f64,
    pub decoded_anything: bool,
    pub final_state_reached: bool,
    /// `f64::INFINITY` when no final state is active.
    pub cost_relative: f64,
    pub utterance_s: f64,
}

/// Index into `rules` of the rule that fires first, checking every rule of
/// kind a, then kind b in declaration order, then c, then d.
pub fn detect_endpoint(snap: &AsrSnapshot, rules: &[EndpointRule]) -> Option<usize> {
    [RuleKind::A, RuleKind::B, RuleKind::C, RuleKind::D]
        .iter()
        .flat_map(|&k| rules.iter().enumerate().filter(move |(_, r)| r.kind == k))
        .find(|(_, r)| r.fires(snap))
        .map(|(i, _)| i)
}

/// Random word substitutions applied to recognizer output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrNoise {
    pub rate: f64,
    pub seed: u64,
    pub replacements: Vec<String>,
}

/// Result of advancing the simulated recognizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrStep {
    pub snapshot: AsrSnapshot,
    /// Index of the endpoint rule that fired.
    pub endpoint: Option<usize>,
    /// Words finalized by this step.
    pub words: Vec<TimedWord>,
}

/// Streaming recognizer over a gold timed transcript.
#[derive(Debug, Clone)]
pub struct AsrSimulator {
    words: Vec<TimedWord>,
    rules: Vec<EndpointRule>,
    costs: Option<Vec<f64>>,
    noise: Option<AsrNoise>,
    now_ms: f64,
    decoded: usize,
    emitted: usize,
    utterance_start_ms: f64,
}

impl AsrSimulator {
    /// `costs`, if given, holds the relative cost reported once each word is
    /// the last decoded one (`f64::INFINITY` for "no final state").
    pub fn new(
        words: Vec<TimedWord>,
        rules: Vec<EndpointRule>,
        costs: Option<Vec<f64>>,
    ) -> Result<Self> {
        validate_stream(&words)?;
        for r in &rules {
            r.validate()?;
        }
        if let Some(c) = &costs {
            if c.len() != words.len() {
                return Err(Error::invalid(format!(
                    "cost script has {} entries for {} words",
                    c.len(),
                    words.len()
                )));
            }
            if c.iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(Error::invalid("costs must be non-negative"));
            }
        }
        Ok(AsrSimulator {
            words,
            rules,
            costs,
            noise: None,
            now_ms: 0.0,
            decoded: 0,
            emitted: 0,
            utterance_start_ms: 0.0,
        })
    }

    pub fn with_noise(mut self, noise: AsrNoise) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise.rate) || (noise.rate > 0.0 && noise.replacements.is_empty())
        {
            return Err(Error::invalid(
                "noise rate must be in [0, 1] with a non-empty replacement list",
            ));
        }
        self.noise = Some(noise);
        Ok(self)
    }

    pub fn now_ms(&self) -> f64 {
        self.now_ms
    }

    pub fn snapshot(&self) -> AsrSnapshot {
        let t = self.now_ms;
        let in_word = self.words.get(self.decoded).is_some_and(|w| w.start_ms < t);
        let last_end = if self.decoded > 0 {
            self.words[self.decoded - 1].end_ms()
        } else {
            f64::NEG_INFINITY
        };
        let silence_ms = if in_word {
            0.0
        } else {
            t - last_end.max(self.utterance_start_ms)
        };
        let decoded_anything = self.decoded > self.emitted;
        let cost = match (&self.costs, decoded_anything) {
            (_, false) => f64::INFINITY,
            (Some(c), true) => c[self.decoded - 1],
            (None, true) => 0.0,
        };
        AsrSnapshot {
            silence_s: silence_ms.max(0.0) / 1000.0,
            decoded_anything,
            final_state_reached: cost.is_finite(),
            cost_relative: cost,
            utterance_s: (t - self.utterance_start_ms).max(0.0) / 1000.0,
        }
    }

    /// Consumes audio up to `t_ms` and reports an endpoint if one fires.
    pub fn advance(&mut self, t_ms: f64) -> Result<AsrStep> {
        if t_ms < self.now_ms {
            return Err(Error::invalid("audio time went backwards"));
        }
        self.now_ms = t_ms;
        while self
            .words
            .get(self.decoded)
            .is_some_and(|w| w.end_ms() <= t_ms)
        {
            self.decoded += 1;
        }
        let snapshot = self.snapshot();
        let endpoint = detect_endpoint(&snapshot, &self.rules);
        let words = if endpoint.is_some() {
            self.emit()
        } else {
            Vec::new()
        };
        Ok(AsrStep {
            snapshot,
            endpoint,
            words,
        })
    }

    /// Emits every decoded word that has not been emitted yet.
    pub fn flush(&mut self) -> Vec<TimedWord> {
        self.emit()
    }

    fn emit(&mut self) -> Vec<TimedWord> {
        let mut out: Vec<TimedWord> = self.words[self.emitted..self.decoded].to_vec();
        if let Some(n) = &self.noise {
            for (i, w) in out.iter_mut().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    n.seed ^ ((self.emitted + i) as u64).wrapping_mul(0x9e37_79b9),
                );
                if rng.gen::<f64>() < n.rate {
                    w.word = n.replacements[rng.gen_range(0..n.replacements.len())].clone();
                }
            }
        }
        self.emitted = self.decoded;
        self.utterance_start_ms = self.now_ms;
        out
    }
}

/// Controller hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    /// Audio blocks per READ.
    pub sz: usize,
    pub alpha: f64,
    pub beta: f64,
    pub rules: Vec<EndpointRule>,
    pub block_ms: f64,
    /// Restart the MT decoder on every transcription chunk instead of
    /// continuing one target stream.
    #[serde(default)]
    pub reset_on_endpoint: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            sz: 1,
            alpha: 1.0,
            beta: 2.0,
            rules: default_endpoint_rules(),
            block_ms: 100.0,
            reset_on_endpoint: false,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sz == 0 {
            return Err(Error::invalid("sz must be at least 1"));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 1.0) || !(self.block_ms > 0.0) {
            return Err(Error::invalid(
                "need alpha >= 0, beta >= 1 and block_ms > 0",
            ));
        }
        for r in &self.rules {
            r.validate()?;
        }
        Ok(())
    }

    /// Whether another token may be written.
    pub fn may_write(&self, written: usize, source_len: usize) -> bool {
        (written as f64) < self.alpha * source_len as f64 + self.beta
    }
}

/// The MT side of the cascade.
pub struct CascadeMt<'a, M: StepModel> {
    pub models: &'a [M],
    pub tokenizer: &'a dyn SourceTokenizer,
    pub lexicon: &'a NumberLexicon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    /// Hypothesis without the final EOS.
    pub tokens: Vec<TokenId>,
    /// Reads are transcript tokens handed to the MT (stamped with the audio
    /// time they became available); writes carry `g_ms`.
    pub trace: ActionTrace,
    /// Normalized recognizer output, chunk by chunk.
    pub transcript: Vec<String>,
    /// Total transcript tokens including the end-of-source marker.
    pub source_len: usize,
    pub audio_ms: f64,
    /// The budget ran out after the audio ended and EOS was forced.
    pub truncated: bool,
}

struct MtSession<'a, M: StepModel> {
    ens: Ensemble<'a, M>,
    source: usize,
    has_marker: bool,
    written: usize,
    finished: bool,
}

impl<'a, M: StepModel> MtSession<'a, M> {
    fn new(models: &'a [M]) -> Result<Self> {
        Ok(MtSession {
            ens: Ensemble::new(models)?,
            source: 0,
            has_marker: false,
            written: 0,
            finished: false,
        })
    }

    fn budget_source(&self) -> usize {
        self.source - usize::from(self.has_marker)
    }
}

/// Runs the READ/WRITE controller over one audio document.
pub fn cascade_decode<M: StepModel>(
    stream: &[TimedWord],
    mt: &CascadeMt<'_, M>,
    cfg: &CascadeConfig,
    costs: Option<Vec<f64>>,
    noise: Option<AsrNoise>,
) -> Result<CascadeOutput> {
    cfg.validate()?;
    let mut asr = AsrSimulator::new(stream.to_vec(), cfg.rules.clone(), costs)?;
    if let Some(n) = noise {
        asr = asr.with_noise(n)?;
    }
    let audio_ms = stream_duration_ms(stream);
    let n_blocks = (audio_ms / cfg.block_ms).ceil() as usize;

    let mut trace = ActionTrace::new();
    let mut tokens = Vec::new();
    let mut transcript = Vec::new();
    let mut session = MtSession::new(mt.models)?;
    let mut z = 0usize;
    let mut depleted = false;
    let mut now = 0.0;
    let mut reading = true;

    loop {
        while reading && !depleted {
            z = (z + cfg.sz).min(n_blocks);
            now = (z as f64 * cfg.block_ms).min(audio_ms);
            let step = asr.advance(now)?;
            depleted = z == n_blocks;
            if step.endpoint.is_some() || depleted {
                let mut words = step.words;
                if depleted {
                    words.extend(asr.flush());
                }
                let text = words
                    .iter()
                    .map(|w| w.word.as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                let norm = asr_normalize(&text, mt.lexicon).text;
                let mut new = mt.tokenizer.encode(&norm);
                if depleted {
                    new.push(EOS);
                }
                if !norm.is_empty() {
                    transcript.push(norm);
                }
                if !new.is_empty() {
                    if cfg.reset_on_endpoint && session.source > 0 {
                        session = MtSession::new(mt.models)?;
                    }
                    session.ens.read(&new)?;
                    session.source += new.len();
                    session.has_marker = depleted;
                    for _ in &new {
                        trace.read(Some(now));
                    }
                }
                reading = false;
            }
        }
        if session.source > 0
            && !session.finished
            && cfg.may_write(session.written, session.budget_source())
        {
            let tok = session.ens.predict(session.source)?;
            if tok == EOS && !session.has_marker && cfg.reset_on_endpoint {
                session.finished = true;
                reading = true;
                continue;
            }
            trace.write(tok, Some(now));
            if tok == EOS {
                break;
            }
            tokens.push(tok);
            session.written += 1;
        } else if depleted {
            trace.write(EOS, Some(now));
            let source_len = trace.num_reads();
            return Ok(CascadeOutput {
                tokens,
                trace,
                transcript,
                source_len,
                audio_ms,
                truncated: true,
            });
        } else {
            reading = true;
        }
    }
    let source_len = trace.num_reads();
    Ok(CascadeOutput {
        tokens,
        trace,
        transcript,
        source_len,
        audio_ms,
        truncated: false,
    })
}

/// Lays `words` out on a synthetic timeline: word durations of 150-350 ms,
/// short pauses of 20-200 ms and, with probability 0.15, a long pause of
/// 700-1200 ms. Times are whole milliseconds.
pub fn synthesize_stream<S: AsRef<str>>(words: &[S], seed: u64) -> Vec<TimedWord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = rng.gen_range(0..300) as f64;
    let mut out = Vec::with_capacity(words.len());
    for w in words {
        let dur = rng.gen_range(150..350) as f64;
        out.push(TimedWord::new(w.as_ref(), t, dur));
        let pause = if rng.gen_bool(0.15) {
            rng.gen_range(700..1200)
        } else {
            rng.gen_range(20..200)
        };
        t += dur + pause as f64;
    }
    out
}

/// A contiguous run of timed words.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub words: Vec<TimedWord>,
}

impl Segment {
    pub fn start_ms(&self) -> f64 {
        self.words.first().map_or(0.0, |w| w.start_ms)
    }

    pub fn end_ms(&self) -> f64 {
        self.words.last().map_or(0.0, TimedWord::end_ms)
    }
}

/// Silence-threshold segmentation parameters (seconds and words).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentParams {
    pub theta_long: f64,
    pub theta_short: f64,
    pub max_words: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            theta_long: 0.65,
            theta_short: 0.15,
            max_words: 40,
        }
    }
}

/// Splits before a word whose preceding silence exceeds the active
/// threshold: `theta_long` while the open segment has at most `max_words`
/// words, `theta_short` afterwards.
pub fn segment_stream(words: &[TimedWord], p: SegmentParams) -> Result<Vec<Segment>> {
    validate_stream(words)?;
    if !(p.theta_long >= 0.0) || !(p.theta_short >= 0.0) {
        return Err(Error::invalid("thresholds must be non-negative"));
    }
    let mut out = Vec::new();
    let mut cur: Vec<TimedWord> = Vec::new();
    for w in words {
        if let Some(prev) = cur.last() {
            let gap_s = (w.start_ms - prev.end_ms()) / 1000.0;
            let theta = if cur.len() > p.max_words {
                p.theta_short
            } else {
                p.theta_long
            };
            if gap_s > theta {
                out.push(Segment {
                    words: std::mem::take(&mut cur),
                });
            }
        }
        cur.push(w.clone());
    }
    if !cur.is_empty() {
        out.push(Segment { words: cur });
    }
    Ok(out)
}

/// Reads `word<TAB>start_ms<TAB>duration_ms` lines; `##` separates
/// documents. Blank lines are skipped.
pub fn read_timed_streams<R: BufRead>(reader: R) -> Result<Vec<Vec<TimedWord>>> {
    let mut docs = vec![Vec::new()];
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if line.trim() == "##" {
            docs.push(Vec::new());
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(Error::Format(format!(
                "line {}: expected word, start_ms, duration_ms",
                n + 1
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad number `{s}`", n + 1)))
        };
        docs.last_mut().expect("non-empty").push(TimedWord::new(
            cols[0],
            num(cols[1])?,
            num(cols[2])?,
        ));
    }
    if docs.len() > 1 && docs.last().is_some_and(Vec::is_empty) {
        docs.pop();
    }
    for d in &docs {
        validate_stream(d)?;
    }
    Ok(docs)
}

pub fn write_timed_streams<W: Write>(mut w: W, docs: &[Vec<TimedWord>]) -> Result<()> {
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            writeln!(w, "##")?;
        }
        for t in d {
            writeln!(w, "{}\t{}\t{}", t.word, t.start_ms, t.duration_ms)?;
        }
    }
    Ok(())
}

/// Timed-word TSV with a trailing `segment_id` column.
pub fn write_segments<W: Write>(mut w: W, segments: &[Segment]) -> Result<()> {
    for (id, s) in segments.iter().enumerate() {
        for t in &s.words {
            writeln!(w, "{}\t{}\t{}\t{id}", t.word, t.start_ms, t.duration_ms)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(silence_s: f64, decoded: bool, cost: f64, utterance_s: f64) -> AsrSnapshot {
        AsrSnapshot {
            silence_s,
            decoded_anything: decoded,
            final_state_reached: cost.is_finite(),
            cost_relative: cost,
            utterance_s,
        }
    }

    #[test]
    fn rule_examples() {
        assert_eq!(
            detect_endpoint(
                &snap(0.7, false, f64::INFINITY, 0.7),
                &[EndpointRule::a(0.65)]
            ),
            Some(0)
        );
        let all = [
            EndpointRule::a(0.5),
            EndpointRule::c(0.5),
            EndpointRule::d(0.5),
        ];
        assert_eq!(detect_endpoint(&snap(0.3, true, 0.0, 0.3), &all), None);
        let bc = [EndpointRule::b(1.0, 1.0), EndpointRule::c(2.0)];
        assert_eq!(
            detect_endpoint(&snap(1.2, true, f64::INFINITY, 3.0), &bc),
            None
        );
        assert_eq!(
            detect_endpoint(&snap(0.0, true, 0.0, 20.1), &[EndpointRule::d(20.0)]),
            Some(0)
        );
    }

    #[test]
    fn rule_priority_follows_kind_order() {
        let rules = [
            EndpointRule::d(1.0),
            EndpointRule::c(0.5),
            EndpointRule::b(0.5, 1.0),
            EndpointRule::a(0.5),
        ];
        assert_eq!(detect_endpoint(&snap(0.6, true, 0.0, 2.0), &rules), Some(3));
        assert_eq!(
            detect_endpoint(&snap(0.6, true, 0.0, 0.6), &rules[..3]),
            Some(2)
        );
    }

    #[test]
    fn pure_silence_endpoints_at_rule_a() {
        let mut asr = AsrSimulator::new(vec![], vec![EndpointRule::a(0.65)], None).unwrap();
        assert!(asr.advance(600.0).unwrap().endpoint.is_none());
        let s = asr.advance(650.0).unwrap();
        assert_eq!(s.endpoint, Some(0));
        assert!(s.words.is_empty());
    }

    #[test]
    fn words_emitted_after_silence() {
        let words = vec![
            TimedWord::new("a", 0.0, 200.0),
            TimedWord::new("b", 200.0, 300.0),
        ];
        let mut asr = AsrSimulator::new(words.clone(), vec![EndpointRule::c(0.65)], None).unwrap();
        let s = asr.advance(1200.0).unwrap();
        assert_eq!(s.endpoint, Some(0));
        assert_eq!(s.words, words);
        assert!(asr.flush().is_empty());
    }

    #[test]
    fn segmentation_examples() {
        let mut words = Vec::new();
        let mut t = 0.0;
        for i in 0..10 {
            words.push(TimedWord::new(format!("w{i}"), t, 100.0));
            t += 100.0 + if i == 4 { 700.0 } else { 100.0 };
        }
        let segs = segment_stream(&words, SegmentParams::default()).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].words.len(), 5);

        let words: Vec<TimedWord> = (0..45)
            .map(|i| TimedWord::new("w", i as f64 * 300.0, 100.0))
            .collect();
        let segs = segment_stream(&words, SegmentParams::default()).unwrap();
        assert_eq!(
            segs.iter().map(|s| s.words.len()).collect::<Vec<_>>(),
            vec![41, 4]
        );
    }

    #[test]
    fn overlapping_words_rejected() {
        let words = vec![
            TimedWord::new("a", 0.0, 200.0),
            TimedWord::new("b", 100.0, 300.0),
        ];
        assert!(segment_stream(&words, SegmentParams::default()).is_err());
    }

    #[test]
    fn stream_tsv_round_trip() {
        let docs = vec![
            vec![
                TimedWord::new("hi", 0.0, 120.5),
                TimedWord::new("there", 300.0, 200.0),
            ],
            vec![TimedWord::new("x", 10.0, 5.0)],
        ];
        let mut buf = Vec::new();
        write_timed_streams(&mut buf, &docs).unwrap();
        assert_eq!(read_timed_streams(&buf[..]).unwrap(), docs);
    }
}
