//! Mocks, reference implementations and generators shared by the
//! integration tests. Each reference implementation is written from the
//! definition, without reusing library internals.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simulmt::cascade::{
    cascade_decode, default_endpoint_rules, segment_stream, AsrSnapshot, CascadeConfig, CascadeMt,
    EndpointRule, RuleKind, SegmentParams, TimedWord,
};
use simulmt::data::{
    asr_normalize, gen_toy_corpus, toy_vocabulary, NumberLexicon, SourceTokenizer, ToyTask,
    Vocabulary, BOS, EOS,
};
use simulmt::harness::{drive_waitk_text, serve_eval, EvalClient, ServeTestSet, ServerHandle};
use simulmt::metrics::{sweep, SweepSystem, TestSet};
use simulmt::model::{
    decode_step, encode_prefix, DecoderGraph, DecoderState, EncoderGraph, Gradients, ModelConfig,
    Parameters,
};
use simulmt::online::{Action, ActionTrace, OnlinePolicy, StepModel};
use simulmt::par::Execution;
use simulmt::training::{
    exhaustive_multi_path_loss, grad_check, multi_path_loss, multi_path_loss_and_grad, path_loss,
    path_loss_and_grad, WaitK,
};
use simulmt::{Error, Result, TokenId};

/// Small model for property tests.
pub fn small_model(seed: u64, vocab: usize, d_model: usize, n_heads: usize) -> Parameters {
    let mut c = ModelConfig::desk(vocab);
    c.d_model = d_model;
    c.n_heads = n_heads;
    c.d_ffn = 2 * d_model;
    Parameters::init(&c, seed).expect("valid config")
}

/// What a [`MockMt`] writes at each step.
#[derive(Debug, Clone)]
pub enum Script {
    /// Copies source token `t` at step `t` when it is visible, otherwise
    /// writes `filler`.
    Copy { filler: TokenId },
    /// Writes `tokens[t]`, repeating the last entry forever.
    Fixed(Vec<TokenId>),
}

/// Deterministic stand-in for a translation model.
#[derive(Debug, Clone)]
pub struct MockMt {
    pub vocab: usize,
    pub script: Script,
}

impl StepModel for MockMt {
    type State = (Vec<TokenId>, usize);

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self) -> Self::State {
        (Vec::new(), 0)
    }

    fn read(&self, state: &mut Self::State, tokens: &[TokenId]) -> Result<()> {
        state.0.extend_from_slice(tokens);
        Ok(())
    }

    fn step(&self, state: &mut Self::State, _prev: TokenId, z: usize) -> Result<Vec<f64>> {
        if z == 0 || z > state.0.len() {
            return Err(Error::PrefixTooLong {
                requested: z,
                available: state.0.len(),
            });
        }
        let t = state.1;
        state.1 += 1;
        let tok = match &self.script {
            Script::Copy { filler } => {
                if t < z {
                    state.0[t]
                } else {
                    *filler
                }
            }
            Script::Fixed(toks) => toks[t.min(toks.len() - 1)],
        };
        let mut d = vec![-10.0; self.vocab];
        d[tok as usize] = 0.0;
        Ok(d)
    }
}

/// Brute-force corpus BLEU (single reference, no smoothing), counting every
/// n-gram by comparing slices pairwise.
pub fn brute_bleu(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=max_n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (h, r) in hyps.iter().zip(refs) {
            if h.len() < n {
                continue;
            }
            let hg: Vec<&[String]> = (0..=h.len() - n).map(|i| &h[i..i + n]).collect();
            let rg: Vec<&[String]> = if r.len() >= n {
                (0..=r.len() - n).map(|i| &r[i..i + n]).collect()
            } else {
                vec![]
            };
            total += hg.len();
            let mut seen: Vec<&[String]> = Vec::new();
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_h = hg.iter().filter(|x| *x == g).count();
                let in_r = rg.iter().filter(|x| *x == g).count();
                matched += in_h.min(in_r);
            }
        }
        if matched == 0 {
            return 0.0;
        }
        log_p += (matched as f64 / total as f64).ln();
    }
    let h: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if h >= r {
        1.0
    } else {
        (1.0 - r as f64 / h as f64).exp()
    };
    bp * (log_p / max_n as f64).exp()
}

/// Reference segmentation scan returning segment sizes.
pub fn reference_segment_sizes(
    words: &[TimedWord],
    theta_long: f64,
    theta_short: f64,
    max_words: usize,
) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut open = 0usize;
    for i in 0..words.len() {
        if i > 0 {
            let silence =
                (words[i].start_ms - (words[i - 1].start_ms + words[i - 1].duration_ms)) / 1000.0;
            let limit = if open <= max_words {
                theta_long
            } else {
                theta_short
            };
            if silence > limit {
                sizes.push(open);
                open = 0;
            }
        }
        open += 1;
    }
    if open > 0 {
        sizes.push(open);
    }
    sizes
}

/// Random sorted, non-overlapping timed stream with millisecond times.
pub fn random_stream<R: Rng>(rng: &mut R, max_words: usize, lexicon: &[&str]) -> Vec<TimedWord> {
    let n = rng.gen_range(0..=max_words);
    let mut t = rng.gen_range(0..500) as f64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let dur = rng.gen_range(50..400) as f64;
        let w = lexicon[rng.gen_range(0..lexicon.len())];
        out.push(TimedWord::new(w, t, dur));
        let gap = match rng.gen_range(0..10) {
            0..=5 => rng.gen_range(0..200),
            6..=8 => rng.gen_range(200..900),
            _ => rng.gen_range(900..3000),
        };
        t += dur + gap as f64;
    }
    out
}

/// One controller event: a source token handed to the translator (stamped
/// with the audio time) or a written token with the audio consumed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ev {
    R(f64),
    W(TokenId, f64),
}

pub fn events(trace: &ActionTrace) -> Vec<Ev> {
    trace
        .events()
        .iter()
        .map(|e| match *e {
            Action::Read { ms, .. } => Ev::R(ms.expect("cascade reads carry time")),
            Action::Write { token, g_ms, .. } => {
                Ev::W(token, g_ms.expect("cascade writes carry time"))
            }
        })
        .collect()
}

fn rule_fires(r: &EndpointRule, silence: f64, decoded: bool, cost: f64, utt: f64) -> bool {
    match r.kind {
        RuleKind::A => silence >= r.t_seconds,
        RuleKind::B => decoded && silence >= r.t_seconds && cost.is_finite() && cost < r.c.unwrap(),
        RuleKind::C => decoded && silence >= r.t_seconds,
        RuleKind::D => utt >= r.t_seconds,
    }
}

/// Step-by-step READ/WRITE controller simulator written directly from the
/// loop structure: READ `sz` blocks at a time until the recognizer
/// finalizes a chunk or the audio runs out, then WRITE while the budget
/// `|y| < α·|x_asr| + β` allows, stopping at EOS. The recognizer state is
/// recomputed from scratch at every READ.
pub fn controller_oracle(
    stream: &[TimedWord],
    cfg: &CascadeConfig,
    costs: Option<&[f64]>,
    mt: &MockMt,
    vocab: &Vocabulary,
) -> Vec<Ev> {
    let lexicon = NumberLexicon::english();
    let audio = stream.last().map_or(0.0, |w| w.start_ms + w.duration_ms);
    let blocks = (audio / cfg.block_ms).ceil() as usize;
    let mut evs = Vec::new();

    let mut z = 0usize;
    let mut emitted = 0usize;
    let mut utt_start = 0.0f64;
    let mut audio_done = false;
    let mut now = 0.0;

    let mut src: Vec<TokenId> = Vec::new();
    let mut marker = false;
    let mut y: Vec<TokenId> = Vec::new();
    let mut state = mt.start();
    let mut session_done = false;
    let mut action_read = true;

    loop {
        if action_read && !audio_done {
            z = (z + cfg.sz).min(blocks);
            now = (z as f64 * cfg.block_ms).min(audio);
            audio_done = z == blocks;
            let decoded = stream
                .iter()
                .filter(|w| w.start_ms + w.duration_ms <= now)
                .count();
            let in_word = stream
                .iter()
                .any(|w| w.start_ms < now && w.start_ms + w.duration_ms > now);
            let last_end = if decoded > 0 {
                stream[decoded - 1].start_ms + stream[decoded - 1].duration_ms
            } else {
                f64::NEG_INFINITY
            };
            let silence = if in_word {
                0.0
            } else {
                (now - last_end.max(utt_start)).max(0.0) / 1000.0
            };
            let pending = decoded > emitted;
            let cost = if !pending {
                f64::INFINITY
            } else {
                costs.map_or(0.0, |c| c[decoded - 1])
            };
            let utt = (now - utt_start).max(0.0) / 1000.0;
            let endpoint = cfg
                .rules
                .iter()
                .any(|r| rule_fires(r, silence, pending, cost, utt));
            if endpoint || audio_done {
                let upto = if audio_done { stream.len() } else { decoded };
                let text: Vec<&str> = stream[emitted..upto]
                    .iter()
                    .map(|w| w.word.as_str())
                    .collect();
                emitted = upto;
                utt_start = now;
                let norm = asr_normalize(&text.join(" "), &lexicon).text;
                let mut new = vocab.encode(&norm);
                if audio_done {
                    new.push(EOS);
                }
                if !new.is_empty() {
                    if cfg.reset_on_endpoint && !src.is_empty() {
                        src.clear();
                        y.clear();
                        state = mt.start();
                        session_done = false;
                    }
                    mt.read(&mut state, &new).unwrap();
                    src.extend_from_slice(&new);
                    marker = audio_done;
                    for _ in &new {
                        evs.push(Ev::R(now));
                    }
                }
                action_read = false;
            }
            continue;
        }
        let budget_src = src.len() - usize::from(marker);
        let may_write = (y.len() as f64) < cfg.alpha * budget_src as f64 + cfg.beta;
        if !src.is_empty() && !session_done && may_write {
            let d = mt
                .step(&mut state, y.last().copied().unwrap_or(1), src.len())
                .unwrap();
            let tok = (0..d.len()).fold(0, |b, i| if d[i] > d[b] { i } else { b }) as TokenId;
            if tok == EOS && !marker && cfg.reset_on_endpoint {
                session_done = true;
                action_read = true;
                continue;
            }
            evs.push(Ev::W(tok, now));
            if tok == EOS {
                return evs;
            }
            y.push(tok);
        } else if audio_done {
            evs.push(Ev::W(EOS, now));
            return evs;
        } else {
            action_read = true;
        }
    }
}

/// Word-level vocabulary over `words` plus `extra`.
pub fn vocab_of(words: &[&str], extra: &[&str]) -> Vocabulary {
    Vocabulary::from_tokens(words.iter().chain(extra).copied()).unwrap()
}

pub const INF: f64 = f64::INFINITY;

pub fn snap(
    silence_s: f64,
    decoded: bool,
    final_state: bool,
    cost: f64,
    utterance_s: f64,
) -> AsrSnapshot {
    AsrSnapshot {
        silence_s,
        decoded_anything: decoded,
        final_state_reached: final_state,
        cost_relative: cost,
        utterance_s,
    }
}

/// Snapshots paired with rule lists and the expected firing rule index,
/// covering all four rule kinds, duplicated `b` rules and infinite cost.
pub fn endpoint_golden_table() -> Vec<(Vec<EndpointRule>, AsrSnapshot, Option<usize>)> {
    use EndpointRule as R;
    let defaults = default_endpoint_rules();
    let only_a = vec![R::a(0.65)];
    let b_then_c = vec![R::b(1.0, 1.0), R::c(2.0)];
    let two_b = vec![R::b(0.5, 1.0), R::b(0.5, 3.0)];
    let only_d = vec![R::d(20.0)];
    let shuffled = vec![R::c(2.0), R::b(1.0, 8.0), R::a(5.0)];
    let none: Vec<EndpointRule> = vec![];

    #[rustfmt::skip]
    let table: Vec<(&[EndpointRule], AsrSnapshot, Option<usize>)> = vec![
        (&defaults, snap(0.0, false, false, INF, 0.0), None),
        (&defaults, snap(5.0, false, false, INF, 5.0), Some(0)),
        (&defaults, snap(4.99, false, false, INF, 4.99), None),
        (&defaults, snap(0.5, true, true, 1.0, 3.0), Some(1)),
        (&defaults, snap(0.5, true, true, 2.0, 3.0), None),
        (&defaults, snap(1.0, true, true, 2.0, 3.0), Some(2)),
        (&defaults, snap(1.0, true, true, 8.0, 3.0), None),
        (&defaults, snap(2.0, true, true, 8.0, 3.0), Some(3)),
        (&defaults, snap(2.0, true, false, INF, 3.0), Some(3)),
        (&defaults, snap(1.5, true, false, INF, 3.0), None),
        (&defaults, snap(0.0, true, false, INF, 20.0), Some(4)),
        (&defaults, snap(0.0, false, false, INF, 20.0), Some(4)),
        (&defaults, snap(0.49, true, true, 0.0, 19.99), None),
        (&defaults, snap(6.0, true, true, 0.0, 30.0), Some(0)),
        (&defaults, snap(0.7, true, true, 1.99, 1.0), Some(1)),
        (&defaults, snap(2.0, false, false, INF, 2.0), None),
        (&defaults, snap(0.5, false, true, 0.0, 1.0), None),
        (&defaults, snap(1.2, true, true, 7.9, 5.0), Some(2)),
        (&only_a, snap(0.7, false, false, INF, 0.7), Some(0)),
        (&only_a, snap(0.65, false, false, INF, 0.65), Some(0)),
        (&only_a, snap(0.64, true, true, 0.0, 0.64), None),
        (&only_a, snap(0.3, true, true, 0.0, 25.0), None),
        (&b_then_c, snap(1.2, true, false, INF, 3.0), None),
        (&b_then_c, snap(1.2, true, true, 0.5, 3.0), Some(0)),
        (&b_then_c, snap(2.0, true, false, INF, 3.0), Some(1)),
        (&b_then_c, snap(2.5, true, true, 0.5, 3.0), Some(0)),
        (&b_then_c, snap(1.2, true, true, 1.0, 3.0), None),
        (&b_then_c, snap(0.9, true, true, 0.0, 3.0), None),
        (&two_b, snap(0.5, true, true, 0.5, 1.0), Some(0)),
        (&two_b, snap(0.5, true, true, 2.0, 1.0), Some(1)),
        (&two_b, snap(0.5, true, true, 3.0, 1.0), None),
        (&two_b, snap(0.4, true, true, 0.0, 1.0), None),
        (&two_b, snap(10.0, false, false, INF, 10.0), None),
        (&two_b, snap(10.0, true, false, INF, 10.0), None),
        (&only_d, snap(0.0, true, true, 0.0, 20.1), Some(0)),
        (&only_d, snap(100.0, false, false, INF, 19.9), None),
        (&only_d, snap(0.0, false, false, INF, 20.0), Some(0)),
        (&shuffled, snap(5.0, true, true, 0.0, 5.0), Some(2)),
        (&shuffled, snap(2.0, true, true, 0.0, 5.0), Some(1)),
        (&shuffled, snap(2.0, true, true, 9.0, 5.0), Some(0)),
        (&shuffled, snap(1.0, true, true, 7.0, 5.0), Some(1)),
        (&shuffled, snap(1.0, true, false, INF, 5.0), None),
        (&shuffled, snap(4.0, false, false, INF, 4.0), None),
        (&none, snap(100.0, true, true, 0.0, 100.0), None),
    ];
    table
        .into_iter()
        .map(|(r, s, w)| (r.to_vec(), s, w))
        .collect()
}

pub fn lexicon_words() -> Vec<&'static str> {
    vec!["one", "two", "three", "hello", "world", "again", "7", "42"]
}

pub fn test_vocab() -> Vocabulary {
    Vocabulary::from_tokens([
        "one", "two", "three", "hello", "world", "again", "seven", "forty", "uh",
    ])
    .unwrap()
}

pub fn run_cascade(
    stream: &[TimedWord],
    cfg: &CascadeConfig,
    costs: Option<&[f64]>,
    mock: &MockMt,
    vocab: &Vocabulary,
) -> Vec<Ev> {
    let lexicon = NumberLexicon::english();
    let mt = CascadeMt {
        models: std::slice::from_ref(mock),
        tokenizer: vocab,
        lexicon: &lexicon,
    };
    let out = cascade_decode(stream, &mt, cfg, costs.map(<[f64]>::to_vec), None).unwrap();
    out.trace.validate().unwrap();
    events(&out.trace)
}

/// Stream, controller settings, optional per-word recognizer costs and mock.
pub type CascadeCase = (Vec<TimedWord>, CascadeConfig, Option<Vec<f64>>, MockMt);

pub fn scripted_triples() -> Vec<CascadeCase> {
    let v = test_vocab();
    let id = |w: &str| v.id(w).unwrap();
    let lex = lexicon_words();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let rule_sets = [
        default_endpoint_rules(),
        vec![EndpointRule::a(0.65)],
        vec![EndpointRule::c(0.3), EndpointRule::d(3.0)],
        vec![
            EndpointRule::b(0.2, 1.0),
            EndpointRule::b(0.6, 4.0),
            EndpointRule::d(2.0),
        ],
        vec![],
    ];
    let scripts = [
        Script::Copy { filler: id("uh") },
        Script::Fixed(vec![id("hello"), id("world"), EOS]),
        Script::Fixed(vec![id("again")]),
        Script::Fixed(vec![
            id("one"),
            id("two"),
            id("three"),
            id("one"),
            id("two"),
            id("three"),
            id("one"),
            EOS,
        ]),
        Script::Fixed(vec![EOS]),
    ];
    let mut out = Vec::new();
    for i in 0..40 {
        let stream = random_stream(&mut rng, 14, &lex);
        let cfg = CascadeConfig {
            sz: [1, 2, 3][i % 3],
            alpha: [0.5, 1.0, 1.5, 0.0][i % 4],
            beta: [1.0, 2.0, 3.5][i % 3],
            rules: rule_sets[i % rule_sets.len()].clone(),
            block_ms: [100.0, 50.0, 250.0, 120.0][i % 4],
            reset_on_endpoint: i % 6 == 5,
        };
        let costs = (i % 2 == 1).then(|| {
            stream
                .iter()
                .map(|_| {
                    if rng.gen_bool(0.2) {
                        INF
                    } else {
                        rng.gen_range(0.0..6.0)
                    }
                })
                .collect()
        });
        let mock = MockMt {
            vocab: v.len(),
            script: scripts[i % scripts.len()].clone(),
        };
        out.push((stream, cfg, costs, mock));
    }
    out
}

/// One randomized cascade run checking `|y| < α·|x_asr| + β` at every
/// write that the budget (not the end of the audio) allowed.
pub fn check_random_budget_run<R: Rng>(rng: &mut R, run_id: usize) {
    let v = test_vocab();
    let lex = lexicon_words();
    let lexicon = NumberLexicon::english();
    let stream = random_stream(rng, 20, &lex);
    let cfg = CascadeConfig {
        sz: rng.gen_range(1..=4),
        alpha: rng.gen_range(0.0..2.0),
        beta: rng.gen_range(1.0..4.0),
        rules: default_endpoint_rules()
            .into_iter()
            .filter(|_| rng.gen_bool(0.7))
            .collect(),
        block_ms: rng.gen_range(20.0..300.0),
        reset_on_endpoint: false,
    };
    let script = if rng.gen_bool(0.5) {
        Script::Copy {
            filler: v.id("uh").unwrap(),
        }
    } else {
        let n = rng.gen_range(1..30);
        let mut t: Vec<u32> = (0..n).map(|_| rng.gen_range(4..v.len() as u32)).collect();
        if rng.gen_bool(0.7) {
            t.push(EOS);
        }
        Script::Fixed(t)
    };
    let mock = MockMt {
        vocab: v.len(),
        script,
    };
    let mt = CascadeMt {
        models: std::slice::from_ref(&mock),
        tokenizer: &v,
        lexicon: &lexicon,
    };
    let out = cascade_decode(&stream, &mt, &cfg, None, None).unwrap();
    out.trace.validate().unwrap();
    let mut reads = 0usize;
    let mut marker = false;
    let mut written = 0usize;
    let events = out.trace.events();
    for (i, e) in events.iter().enumerate() {
        match *e {
            Action::Read { ms, .. } => {
                reads += 1;
                marker |= ms == Some(out.audio_ms);
            }
            Action::Write { token, .. } => {
                let forced = out.truncated && i + 1 == events.len();
                if !forced {
                    let x_asr = reads - usize::from(marker);
                    assert!(
                        (written as f64) < cfg.alpha * x_asr as f64 + cfg.beta,
                        "run {run_id}: |y|={written} with |x_asr|={x_asr}"
                    );
                }
                if token != EOS {
                    written += 1;
                }
            }
        }
    }
    assert_eq!(written, out.tokens.len());
}

/// Random timed stream for segmentation checks; `long` streams exceed the
/// word limit.
pub fn segmentation_stream<R: Rng>(rng: &mut R, long: bool) -> Vec<TimedWord> {
    let lex = lexicon_words();
    let n = if long {
        rng.gen_range(40..120)
    } else {
        rng.gen_range(0..40)
    };
    let mut t = 0.0;
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        let dur = rng.gen_range(50..500) as f64;
        words.push(TimedWord::new(lex[rng.gen_range(0..lex.len())], t, dur));
        let gap = match rng.gen_range(0..20) {
            0 => rng.gen_range(650..2000),
            1..=4 => rng.gen_range(150..650),
            _ => rng.gen_range(0..150),
        };
        t += dur + gap as f64;
    }
    words
}

/// Default segmentation equals the reference scan and partitions the stream.
pub fn check_segmentation(words: &[TimedWord], id: usize) {
    let segs = segment_stream(words, SegmentParams::default()).unwrap();
    let sizes: Vec<usize> = segs.iter().map(|s| s.words.len()).collect();
    assert_eq!(
        sizes,
        reference_segment_sizes(words, 0.65, 0.15, 40),
        "stream {id}"
    );
    let flat: Vec<TimedWord> = segs.iter().flat_map(|s| s.words.clone()).collect();
    assert_eq!(flat, words);
    assert!(segs.iter().all(|s| !s.words.is_empty()));
    for pair in segs.windows(2) {
        let gap = pair[1].start_ms() - pair[0].end_ms();
        assert!(gap > 150.0, "split at a gap below the short threshold");
    }
}

pub const MODEL_VOCAB: usize = 20;

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenId> {
    (0..n)
        .map(|_| rng.gen_range(4..MODEL_VOCAB as TokenId))
        .collect()
}

pub fn random_model(rng: &mut ChaCha8Rng) -> Parameters {
    let (d, h) = [(8, 1), (8, 2), (12, 3), (16, 4)][rng.gen_range(0..4)];
    small_model(rng.gen(), MODEL_VOCAB, d, h)
}

/// Decoder outputs for `prefix` fed step by step with `z` visible sources.
pub fn step_outputs(p: &Parameters, x: &[TokenId], prefix: &[TokenId], z: usize) -> Vec<Vec<f64>> {
    let enc = encode_prefix(p, x, None).unwrap();
    let mut dec = DecoderState::new(p);
    let mut prev = BOS;
    let mut out = Vec::new();
    for &t in prefix {
        out.push(decode_step(p, &enc, &mut dec, prev, z).unwrap());
        prev = t;
    }
    out
}

/// Decoder outputs are bit-identical when source tokens beyond the visible
/// prefix are permuted, replaced or dropped.
pub fn check_causality_case(rng: &mut ChaCha8Rng, case: usize) {
    let p = random_model(rng);
    let n = rng.gen_range(2..12);
    let x = random_tokens(rng, n);
    let z = rng.gen_range(1..n);
    let prefix = {
        let len = rng.gen_range(1..6);
        random_tokens(rng, len)
    };
    let base = step_outputs(&p, &x, &prefix, z);

    let mut permuted = x.clone();
    permuted[z..].shuffle(rng);
    let mut replaced = x.clone();
    for t in &mut replaced[z..] {
        *t = rng.gen_range(4..MODEL_VOCAB as TokenId);
    }
    let truncated = &x[..z];
    assert_eq!(step_outputs(&p, &permuted, &prefix, z), base, "case {case}");
    assert_eq!(step_outputs(&p, &replaced, &prefix, z), base, "case {case}");
    assert_eq!(step_outputs(&p, truncated, &prefix, z), base, "case {case}");
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Chunked incremental encoding and step-wise decoding agree with the
/// from-scratch graphs within 1e-6.
pub fn check_incremental_case(rng: &mut ChaCha8Rng, case: usize) {
    let p = random_model(rng);
    let n = rng.gen_range(1..14);
    let x = random_tokens(rng, n);

    let mut state = None;
    let mut done = 0;
    while done < n {
        let step = rng.gen_range(1..=n - done);
        state = Some(encode_prefix(&p, &x[done..done + step], state).unwrap());
        done += step;
    }
    let enc = state.unwrap();
    let full = EncoderGraph::forward(&p, &x).unwrap();
    assert!(
        max_abs_diff(enc.memory(), full.memory()) <= 1e-6,
        "case {case}: encoder"
    );

    let mut y = {
        let len = rng.gen_range(0..8);
        random_tokens(rng, len)
    };
    y.push(EOS);
    let mut path = Vec::with_capacity(y.len());
    let mut z = rng.gen_range(1..=n);
    for _ in 0..y.len() {
        path.push(z);
        z = (z + rng.gen_range(0..3)).min(n);
    }
    let graph = DecoderGraph::forward(&p, &full, &y, &path).unwrap();
    let mut dec = DecoderState::new(&p);
    let mut prev = BOS;
    for (t, (&g, &zt)) in y.iter().zip(&path).enumerate() {
        let lp = decode_step(&p, &enc, &mut dec, prev, zt).unwrap();
        assert!(
            max_abs_diff(&lp, graph.logprobs(t)) <= 1e-6,
            "case {case}: step {t}"
        );
        prev = g;
    }
}

pub fn toy_pair(seed: u64) -> (Vec<TokenId>, Vec<TokenId>, usize) {
    let c = gen_toy_corpus(seed, 1, ToyTask::DigitToWord).unwrap();
    let p = c.pairs.into_iter().next().unwrap();
    (p.source, p.target, c.vocab.len())
}

/// Analytic gradients of single-path losses (k = 1, 3 and full source)
/// against central differences.
pub fn check_path_gradients(probes: usize) {
    for (i, (k, eps)) in [
        (WaitK::Finite(1), 0.1),
        (WaitK::Finite(3), 0.0),
        (WaitK::Infinite, 0.1),
    ]
    .into_iter()
    .enumerate()
    {
        let (x, y, v) = toy_pair(10 + i as u64);
        let mut p = small_model(i as u64, v, 8, 2);
        let mut g = Gradients::zeros_like(&p);
        path_loss_and_grad(&p, &x, &y, k, eps, 1.0 / y.len() as f64, &mut g).unwrap();
        let report = grad_check(
            &mut p,
            |q| path_loss(q, &x, &y, k, eps).unwrap(),
            &g.flatten(),
            probes,
            1e-4,
            7,
        );
        assert!(report.passed, "k={k}: {report:?}");
        assert!(report.max_rel_error < 1e-4);
    }
}

/// Analytic gradient of the sampled multi-path loss with the sampler seed
/// pinned so every evaluation uses the same k.
pub fn check_sampled_path_gradients(probes: usize) {
    let (x, y, v) = toy_pair(20);
    let mut p = small_model(3, v, 8, 2);
    let mut g = Gradients::zeros_like(&p);
    let rng = || ChaCha8Rng::seed_from_u64(99);
    let (_, k) =
        multi_path_loss_and_grad(&p, &x, &y, 0.1, 1.0 / y.len() as f64, &mut rng(), &mut g)
            .unwrap();
    let report = grad_check(
        &mut p,
        |q| {
            let (l, k2) = multi_path_loss(q, &x, &y, 0.1, &mut rng()).unwrap();
            assert_eq!(k2, k);
            l
        },
        &g.flatten(),
        probes,
        1e-4,
        8,
    );
    assert!(report.passed, "{report:?}");
}

/// Exhaustive multi-path objective equals the mean of per-k path losses.
pub fn check_exhaustive_case(rng: &mut ChaCha8Rng) {
    let n = rng.gen_range(1..=8);
    let mut x: Vec<TokenId> = (0..n - 1).map(|_| rng.gen_range(4..30)).collect();
    x.push(EOS);
    let mut y: Vec<TokenId> = (0..rng.gen_range(0..6))
        .map(|_| rng.gen_range(4..30))
        .collect();
    y.push(EOS);
    let p = small_model(rng.gen(), 30, 8, 2);
    let exhaustive = exhaustive_multi_path_loss(&p, &x, &y, 0.1).unwrap();
    let mean = (1..=n)
        .map(|k| path_loss(&p, &x, &y, WaitK::Finite(k), 0.1).unwrap())
        .sum::<f64>()
        / n as f64;
    assert!((exhaustive - mean).abs() <= 1e-9, "{exhaustive} vs {mean}");
}

/// Trace that has read `g[t]` units before write `t`, ending with EOS.
pub fn trace_from_delays(g: &[usize]) -> ActionTrace {
    let mut tr = ActionTrace::new();
    for &gt in g {
        while tr.num_reads() < gt {
            tr.read(None);
        }
        tr.write(5, None);
    }
    tr.write(EOS, None);
    tr
}

pub fn wait_k_delays(k: usize, n: usize) -> Vec<usize> {
    (1..=n).map(|t| (k + t - 1).min(n)).collect()
}

pub const ALPHABET: [&str; 5] = ["a", "b", "c", "d", "e"];

pub fn random_sentence(rng: &mut ChaCha8Rng, min_len: usize) -> Vec<String> {
    let len = rng.gen_range(min_len..14);
    (0..len)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())].to_string())
        .collect()
}

/// Random hypothesis/reference corpus of `n` sentences; half the
/// hypotheses are lightly edited copies of their reference.
pub fn bleu_fuzz_corpus(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let refs: Vec<Vec<String>> = (0..n).map(|_| random_sentence(rng, 1)).collect();
    let hyps: Vec<Vec<String>> = refs
        .iter()
        .map(|r| {
            if rng.gen_bool(0.5) {
                return random_sentence(rng, 0);
            }
            let mut h = r.clone();
            for _ in 0..rng.gen_range(0..3) {
                match rng.gen_range(0..3) {
                    0 if !h.is_empty() => {
                        h.remove(rng.gen_range(0..h.len()));
                    }
                    1 => h.insert(rng.gen_range(0..=h.len()), "z".to_string()),
                    _ if !h.is_empty() => {
                        let i = rng.gen_range(0..h.len());
                        h[i] = ALPHABET[rng.gen_range(0..ALPHABET.len())].to_string();
                    }
                    _ => {}
                }
            }
            h
        })
        .collect();
    (hyps, refs)
}

pub struct TextData {
    pub vocab: Vocabulary,
    pub ids: Vec<Vec<TokenId>>,
    pub words: Vec<Vec<String>>,
    pub refs: Vec<String>,
}

/// Digit-to-word test items as source word lists, token ids and references.
pub fn text_data(seed: u64, n: usize) -> TextData {
    let vocab = toy_vocabulary();
    let c = gen_toy_corpus(seed, n, ToyTask::DigitToWord).unwrap();
    let ids: Vec<Vec<TokenId>> = c.pairs.iter().map(|p| p.source.clone()).collect();
    let words = ids
        .iter()
        .map(|x| {
            x.iter()
                .filter(|&&t| t != EOS)
                .map(|&t| vocab.token(t).unwrap().to_string())
                .collect()
        })
        .collect();
    let refs = c
        .pairs
        .iter()
        .map(|p| vocab.detokenize(&p.target[..p.target.len() - 1]))
        .collect();
    TextData {
        vocab,
        ids,
        words,
        refs,
    }
}

pub fn text_server(d: &TextData) -> ServerHandle {
    serve_eval(
        "127.0.0.1:0",
        ServeTestSet::Text {
            sources: d.words.clone(),
            references: d.refs.clone(),
        },
        d.vocab.clone(),
        None,
    )
    .unwrap()
}

/// Largest per-point difference in BLEU or word lagging between the offline
/// sweep and wait-k clients driving the evaluation server.
pub fn serve_sweep_gap(systems: &[SweepSystem<Parameters>], ks: &[WaitK], d: &TextData) -> f64 {
    let (alpha_len, beta_len) = (1.0, 4);
    let offline = sweep(
        systems,
        ks,
        &TestSet::Text {
            sources: &d.ids,
            references: &d.refs,
            target_vocab: &d.vocab,
            alpha_len,
            beta_len,
        },
        Execution::Sequential,
    )
    .unwrap();
    let server = text_server(d);
    let mut c = EvalClient::connect(server.local_addr()).unwrap();
    let mut gap = 0.0f64;
    for rec in &offline {
        let sys = systems.iter().find(|s| s.id == rec.system_id).unwrap();
        let policy = OnlinePolicy {
            k_eval: rec.k_eval,
            alpha_len,
            beta_len,
        };
        for id in 0..d.refs.len() {
            drive_waitk_text(
                &mut c,
                &sys.models,
                &d.vocab,
                &d.vocab,
                id,
                &sys.id,
                &policy,
            )
            .unwrap();
        }
        let online = c.score(&rec.system_id, rec.k_eval).unwrap();
        assert!(online.al_ms.is_none());
        gap = gap
            .max((online.bleu - rec.bleu).abs())
            .max((online.al_words - rec.al_words).abs());
    }
    server.shutdown();
    gap
}
