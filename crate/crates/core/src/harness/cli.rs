use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};

use super::{
    emit_plotdata, load_config_file, load_model, save_model, serve_eval, write_run_metadata,
    RunConfig, ServeTestSet, CONFIG_ENV,
};
use crate::cascade::{
    cascade_decode, read_timed_streams, segment_stream, synthesize_stream, write_segments,
    write_timed_streams, AsrNoise, CascadeConfig, CascadeMt, EndpointRule, SegmentParams,
};
use crate::data::{
    filter_length_ratio, gen_toy_corpus, read_parallel_corpus, write_parallel_corpus,
    NumberLexicon, SentencePair, TextPair, TokenizerPair, ToyTask, EOS,
};
use crate::metrics::{sort_records, sweep, write_sweep_csv, SweepSystem, TestSet, TradeoffRecord};
use crate::model::{Gradients, ModelConfig, Parameters};
use crate::online::{decode_corpus, HypothesisRecord, OnlinePolicy};
use crate::par::Execution;
use crate::training::{
    grad_check, multi_path_loss, multi_path_loss_and_grad, path_loss, path_loss_and_grad, train,
    write_training_log, AdamConfig, LossConfig, LossMode, TrainConfig, WaitK,
};
use crate::{Error, Result, TokenId};

pub const COMMANDS: [&str; 8] = [
    "train",
    "translate",
    "cascade",
    "segment",
    "sweep",
    "serve",
    "grad-check",
    "gen-data",
];

#[derive(Parser)]
#[command(
    name = "simulmt",
    version,
    about = "Simultaneous translation toolkit",
    arg_required_else_help = true
)]
struct Cli {
    /// JSON config file keyed by command name (defaults to $SIMULMT_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a wait-k or multi-path model on a parallel corpus.
    Train(TrainFlags),
    /// Translate text online with a fixed wait-k policy.
    Translate(TranslateFlags),
    /// Translate timed word streams through the ASR+MT controller.
    Cascade(CascadeFlags),
    /// Split timed word streams at long silences.
    Segment(SegmentFlags),
    /// Chart quality against lagging over a range of k.
    Sweep(SweepFlags),
    /// Run the line-delimited JSON evaluation server.
    Serve(ServeFlags),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheckFlags),
    /// Generate a synthetic parallel corpus or timed streams.
    GenData(GenDataFlags),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Translate(_) => "translate",
            Command::Cascade(_) => "cascade",
            Command::Segment(_) => "segment",
            Command::Sweep(_) => "sweep",
            Command::Serve(_) => "serve",
            Command::GradCheck(_) => "grad-check",
            Command::GenData(_) => "gen-data",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    #[default]
    T2t,
    S2t,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DataFormat {
    #[default]
    Text,
    Timed,
}

/// Boolean switches count as given only when set.
fn set_or_null<S: Serializer>(b: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    if *b {
        s.serialize_bool(true)
    } else {
        s.serialize_none()
    }
}

#[derive(Args, Serialize)]
struct TrainFlags {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    smoothing: Option<f64>,
    /// Train a single wait-k path (`inf` for full-sentence); multi-path when omitted.
    #[arg(long)]
    k: Option<WaitK>,
    /// Subword vocabulary size; 0 keeps whole words.
    #[arg(long)]
    bpe_size: Option<usize>,
    #[arg(long)]
    joint_vocab: Option<bool>,
    /// Drop pairs whose token-length ratio exceeds this value.
    #[arg(long)]
    max_ratio: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    d_ffn: Option<usize>,
    #[arg(long)]
    tie_decoder: Option<bool>,
    #[arg(long)]
    #[serde(serialize_with = "set_or_null")]
    sequential: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSettings {
    train: Option<PathBuf>,
    dev: Option<PathBuf>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
    epochs: usize,
    batch_size: usize,
    base_lr: f64,
    warmup: u64,
    seed: u64,
    smoothing: f64,
    k: Option<WaitK>,
    bpe_size: usize,
    joint_vocab: bool,
    max_ratio: Option<f64>,
    d_model: usize,
    n_heads: usize,
    enc_layers: usize,
    dec_layers: usize,
    d_ffn: usize,
    tie_decoder: bool,
    sequential: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let m = ModelConfig::desk(0);
        let adam = AdamConfig::default();
        TrainSettings {
            train: None,
            dev: None,
            out: None,
            log: None,
            epochs: 10,
            batch_size: 32,
            base_lr: adam.base_lr,
            warmup: adam.warmup_steps,
            seed: 1,
            smoothing: LossConfig::default().smoothing,
            k: None,
            bpe_size: 0,
            joint_vocab: true,
            max_ratio: None,
            d_model: m.d_model,
            n_heads: m.n_heads,
            enc_layers: m.n_enc_layers,
            dec_layers: m.n_dec_layers,
            d_ffn: m.d_ffn,
            tie_decoder: m.tie_decoder_embeddings,
            sequential: false,
        }
    }
}

#[derive(Args, Serialize)]
struct TranslateFlags {
    /// Checkpoint; repeat to ensemble.
    #[arg(long)]
    model: Option<Vec<PathBuf>>,
    /// Source lines (a `src<TAB>tgt` corpus is also accepted).
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k: Option<WaitK>,
    #[arg(long)]
    alpha_len: Option<f64>,
    #[arg(long)]
    beta_len: Option<usize>,
    #[arg(long)]
    #[serde(serialize_with = "set_or_null")]
    sequential: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TranslateSettings {
    model: Vec<PathBuf>,
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    k: WaitK,
    alpha_len: f64,
    beta_len: usize,
    sequential: bool,
}

impl Default for TranslateSettings {
    fn default() -> Self {
        let p = OnlinePolicy::new(WaitK::Infinite);
        TranslateSettings {
            model: Vec::new(),
            input: None,
            out: None,
            k: p.k_eval,
            alpha_len: p.alpha_len,
            beta_len: p.beta_len,
            sequential: false,
        }
    }
}

#[derive(Args, Serialize)]
struct CascadeFlags {
    #[arg(long)]
    model: Option<Vec<PathBuf>>,
    /// Timed word streams (`word<TAB>start_ms<TAB>duration_ms`, `##` between documents).
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Audio blocks per READ.
    #[arg(long)]
    sz: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    block_ms: Option<f64>,
    /// Endpoint rule `kind:t[:c]`; repeat for several. Replaces the defaults.
    #[arg(long = "rule")]
    #[serde(rename = "rules")]
    rules: Option<Vec<EndpointRule>>,
    /// Restart the translation on every recognizer chunk.
    #[arg(long)]
    #[serde(serialize_with = "set_or_null")]
    reset: bool,
    /// Probability of replacing a recognized word.
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long)]
    #[serde(serialize_with = "set_or_null")]
    sequential: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CascadeSettings {
    model: Vec<PathBuf>,
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    sz: usize,
    alpha: f64,
    beta: f64,
    block_ms: f64,
    rules: Vec<EndpointRule>,
    reset: bool,
    noise_rate: f64,
    noise_seed: u64,
    sequential: bool,
}

impl Default for CascadeSettings {
    fn default() -> Self {
        let c = CascadeConfig::default();
        CascadeSettings {
            model: Vec::new(),
            input: None,
            out: None,
            sz: c.sz,
            alpha: c.alpha,
            beta: c.beta,
            block_ms: c.block_ms,
            rules: c.rules,
            reset: c.reset_on_endpoint,
            noise_rate: 0.0,
            noise_seed: 0,
            sequential: false,
        }
    }
}

impl CascadeSettings {
    fn config(&self) -> CascadeConfig {
        CascadeConfig {
            sz: self.sz,
            alpha: self.alpha,
            beta: self.beta,
            rules: self.rules.clone(),
            block_ms: self.block_ms,
            reset_on_endpoint: self.reset,
        }
    }
}

#[derive(Args, Serialize)]
struct SegmentFlags {
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    /// Segment TSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Long silence threshold in seconds.
    #[arg(long)]
    theta: Option<f64>,
    /// Short silence threshold once a segment exceeds `max-words`.
    #[arg(long)]
    theta_short: Option<f64>,
    #[arg(long)]
    max_words: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SegmentSettings {
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    theta: f64,
    theta_short: f64,
    max_words: usize,
}

impl Default for SegmentSettings {
    fn default() -> Self {
        let p = SegmentParams::default();
        SegmentSettings {
            input: None,
            out: None,
            theta: p.theta_long,
            theta_short: p.theta_short,
            max_words: p.max_words,
        }
    }
}

#[derive(Args, Serialize)]
struct SweepFlags {
    /// `name=ckpt[+ckpt...]`; repeat for several systems.
    #[arg(long)]
    system: Option<Vec<String>>,
    /// Comma-separated k values (β offsets in s2t mode).
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<WaitK>>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// `src<TAB>tgt` test corpus (t2t).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Timed word streams (s2t).
    #[arg(long)]
    streams: Option<PathBuf>,
    /// One reference per stream (s2t).
    #[arg(long)]
    refs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write plot data sorted by lagging.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long)]
    alpha_len: Option<f64>,
    #[arg(long)]
    beta_len: Option<usize>,
    #[arg(long)]
    sz: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    block_ms: Option<f64>,
    #[arg(long = "rule")]
    #[serde(rename = "rules")]
    rules: Option<Vec<EndpointRule>>,
    #[arg(long)]
    #[serde(serialize_with = "set_or_null")]
    sequential: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SweepSettings {
    system: Vec<String>,
    k: Vec<WaitK>,
    mode: Mode,
    test: Option<PathBuf>,
    streams: Option<PathBuf>,
    refs: Option<PathBuf>,
    out: Option<PathBuf>,
    plot: Option<PathBuf>,
    alpha_len: f64,
    beta_len: usize,
    sz: usize,
    alpha: f64,
    block_ms: f64,
    rules: Vec<EndpointRule>,
    sequential: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        let p = OnlinePolicy::new(WaitK::Infinite);
        let c = CascadeConfig::default();
        SweepSettings {
            system: Vec::new(),
            k: [2, 3, 5, 7, 9, 11].map(WaitK::Finite).to_vec(),
            mode: Mode::T2t,
            test: None,
            streams: None,
            refs: None,
            out: None,
            plot: None,
            alpha_len: p.alpha_len,
            beta_len: p.beta_len,
            sz: c.sz,
            alpha: c.alpha,
            block_ms: c.block_ms,
            rules: c.rules,
            sequential: false,
        }
    }
}

#[derive(Args, Serialize)]
struct ServeFlags {
    #[arg(long)]
    bind: Option<String>,
    /// Checkpoint whose tokenizers define the wire tokens.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    streams: Option<PathBuf>,
    #[arg(long)]
    refs: Option<PathBuf>,
    #[arg(long)]
    block_ms: Option<f64>,
    /// Append every finished session as a JSON line.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ServeSettings {
    bind: String,
    model: Option<PathBuf>,
    mode: Mode,
    test: Option<PathBuf>,
    streams: Option<PathBuf>,
    refs: Option<PathBuf>,
    block_ms: f64,
    log: Option<PathBuf>,
}

impl Default for ServeSettings {
    fn default() -> Self {
        ServeSettings {
            bind: "127.0.0.1:7878".into(),
            model: None,
            mode: Mode::T2t,
            test: None,
            streams: None,
            refs: None,
            block_ms: CascadeConfig::default().block_ms,
            log: None,
        }
    }
}

#[derive(Args, Serialize)]
struct GradCheckFlags {
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Check one wait-k path; a sampled multi-path draw when omitted.
    #[arg(long)]
    k: Option<WaitK>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long)]
    task: Option<ToyTask>,
    /// JSON report; stdout only when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GradCheckSettings {
    probes: usize,
    tol: f64,
    seed: u64,
    k: Option<WaitK>,
    smoothing: f64,
    task: ToyTask,
    out: Option<PathBuf>,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            probes: 200,
            tol: 1e-4,
            seed: 1,
            k: None,
            smoothing: LossConfig::default().smoothing,
            task: ToyTask::DigitToWord,
            out: None,
        }
    }
}

#[derive(Args, Serialize)]
struct GenDataFlags {
    #[arg(long)]
    task: Option<ToyTask>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `text` writes `src<TAB>tgt`; `timed` writes source streams plus `--refs`.
    #[arg(long, value_enum)]
    format: Option<DataFormat>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    refs: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenDataSettings {
    task: ToyTask,
    n: usize,
    seed: u64,
    format: DataFormat,
    out: Option<PathBuf>,
    refs: Option<PathBuf>,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        GenDataSettings {
            task: ToyTask::DigitToWord,
            n: 1000,
            seed: 1,
            format: DataFormat::Text,
            out: None,
            refs: None,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status: 0 on success, 1 for usage or validation errors and
/// 2 for failures while running.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(p) => p,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(parsed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let file = match &config_path {
        Some(p) => load_config_file(p, &COMMANDS)?,
        None => Map::new(),
    };
    let section = file.get(cli.command.name());
    match &cli.command {
        Command::Train(f) => cmd_train(resolve(cli.command.name(), section, f)?),
        Command::Translate(f) => cmd_translate(resolve(cli.command.name(), section, f)?),
        Command::Cascade(f) => cmd_cascade(resolve(cli.command.name(), section, f)?),
        Command::Segment(f) => cmd_segment(resolve(cli.command.name(), section, f)?),
        Command::Sweep(f) => cmd_sweep(resolve(cli.command.name(), section, f)?),
        Command::Serve(f) => cmd_serve(resolve(cli.command.name(), section, f)?),
        Command::GradCheck(f) => cmd_grad_check(resolve(cli.command.name(), section, f)?),
        Command::GenData(f) => cmd_gen_data(resolve(cli.command.name(), section, f)?),
    }
}

fn resolve<F: Serialize, T>(
    command: &str,
    section: Option<&Value>,
    flags: &F,
) -> Result<(T, RunConfig)>
where
    T: Serialize + serde::de::DeserializeOwned + Default,
{
    RunConfig::resolve(command, section, &serde_json::to_value(flags)?)
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::invalid(format!("--{flag} is required")))
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::invalid(format!("cannot open {}: {e}", path.display())))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in open(path)?.lines() {
        out.push(line?);
    }
    Ok(out)
}

fn load_existing(path: &Path) -> Result<(Parameters, TokenizerPair)> {
    if !path.is_file() {
        return Err(Error::invalid(format!(
            "no checkpoint at {}",
            path.display()
        )));
    }
    load_model(path)
}

fn load_models(paths: &[PathBuf]) -> Result<(Vec<Parameters>, TokenizerPair)> {
    let first = paths
        .first()
        .ok_or_else(|| Error::invalid("--model is required"))?;
    let (p, tok) = load_existing(first)?;
    let mut models = vec![p];
    for path in &paths[1..] {
        let (p, t) = load_existing(path)?;
        if t != tok {
            return Err(Error::invalid(format!(
                "{} uses different tokenizers",
                path.display()
            )));
        }
        models.push(p);
    }
    Ok((models, tok))
}

fn encode_pairs(pairs: &[TextPair], tok: &TokenizerPair) -> Result<Vec<SentencePair>> {
    pairs
        .iter()
        .map(|p| {
            SentencePair::new(
                tok.source.encode_with_eos(&p.src),
                tok.target.encode_with_eos(&p.tgt),
            )
        })
        .collect()
}

fn cmd_train((s, run): (TrainSettings, RunConfig)) -> Result<()> {
    let train_path = required(&s.train, "train")?;
    let dev_path = required(&s.dev, "dev")?;
    let out = required(&s.out, "out")?;
    let train_text = read_parallel_corpus(open(train_path)?)?;
    let dev_text = read_parallel_corpus(open(dev_path)?)?;
    if train_text.is_empty() || dev_text.is_empty() {
        return Err(Error::invalid("training and dev corpora must be non-empty"));
    }
    let srcs: Vec<&str> = train_text.iter().map(|p| p.src.as_str()).collect();
    let tgts: Vec<&str> = train_text.iter().map(|p| p.tgt.as_str()).collect();
    let tok = TokenizerPair::train(&srcs, &tgts, s.bpe_size, s.joint_vocab)?;
    let mut train_pairs = encode_pairs(&train_text, &tok)?;
    if let Some(r) = s.max_ratio {
        let before = train_pairs.len();
        train_pairs = filter_length_ratio(&train_pairs, r)?;
        log::info!(
            "length-ratio filter kept {} of {before} pairs",
            train_pairs.len()
        );
    }
    let dev_pairs = encode_pairs(&dev_text, &tok)?;
    let model = ModelConfig {
        d_model: s.d_model,
        n_heads: s.n_heads,
        n_enc_layers: s.enc_layers,
        n_dec_layers: s.dec_layers,
        d_ffn: s.d_ffn,
        src_vocab_size: tok.source.vocab().len(),
        tgt_vocab_size: tok.target.vocab().len(),
        tie_decoder_embeddings: s.tie_decoder,
        joint_vocabulary: s.joint_vocab,
    };
    let cfg = TrainConfig {
        model: model.clone(),
        loss: LossConfig {
            smoothing: s.smoothing,
            mode: s.k.map_or(LossMode::MultiPath, LossMode::SingleK),
        },
        optimizer: AdamConfig {
            base_lr: s.base_lr,
            warmup_steps: s.warmup,
            ..AdamConfig::default()
        },
        batch_size: s.batch_size,
        epochs: s.epochs,
        seed: s.seed,
    };
    let init = Parameters::init(&model, s.seed)?;
    log::info!(
        "training {} scalars on {} pairs",
        init.num_scalars(),
        train_pairs.len()
    );
    let outcome = train(
        init,
        &cfg,
        &train_pairs,
        &dev_pairs,
        execution(s.sequential),
    )?;
    for e in &outcome.log {
        log::info!(
            "epoch {} train {:.4} dev {:.4}",
            e.epoch,
            e.train_loss,
            e.dev_loss
        );
    }
    save_model(out, &outcome.params, &tok)?;
    write_run_metadata(out, &run, &[train_path, dev_path])?;
    if let Some(log_path) = &s.log {
        let mut w = BufWriter::new(File::create(log_path)?);
        write_training_log(&mut w, &outcome.log)?;
        w.flush()?;
        write_run_metadata(log_path, &run, &[train_path, dev_path])?;
    }
    println!(
        "best epoch {} of {}, {} updates",
        outcome.best_epoch,
        outcome.log.len(),
        outcome.updates
    );
    Ok(())
}

/// Source side of each line: everything before a TAB if present.
fn source_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_lines(path)?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_once('\t').map_or(l.clone(), |(s, _)| s.to_string()))
        .collect())
}

fn cmd_translate((s, run): (TranslateSettings, RunConfig)) -> Result<()> {
    let input = required(&s.input, "in")?;
    let out = required(&s.out, "out")?;
    let (models, tok) = load_models(&s.model)?;
    let sources: Vec<Vec<TokenId>> = source_lines(input)?
        .iter()
        .map(|l| tok.source.encode_with_eos(l))
        .collect();
    let policy = OnlinePolicy {
        k_eval: s.k,
        alpha_len: s.alpha_len,
        beta_len: s.beta_len,
    };
    let decoded = decode_corpus(&models, &sources, &policy, execution(s.sequential))?;
    let mut w = BufWriter::new(File::create(out)?);
    for (i, d) in decoded.iter().enumerate() {
        serde_json::to_writer(&mut w, &HypothesisRecord::new(i, d, tok.target.vocab()))?;
        writeln!(w)?;
    }
    w.flush()?;
    let mut inputs: Vec<&Path> = vec![input];
    inputs.extend(s.model.iter().map(PathBuf::as_path));
    write_run_metadata(out, &run, &inputs)?;
    Ok(())
}

#[derive(Serialize)]
struct CascadeRecord {
    #[serde(flatten)]
    hypothesis: HypothesisRecord,
    transcript: Vec<String>,
    source_len: usize,
    audio_ms: f64,
}

fn cmd_cascade((s, run): (CascadeSettings, RunConfig)) -> Result<()> {
    let input = required(&s.input, "in")?;
    let out = required(&s.out, "out")?;
    let cfg = s.config();
    cfg.validate()?;
    if !(0.0..=1.0).contains(&s.noise_rate) {
        return Err(Error::invalid("noise-rate must lie in [0, 1]"));
    }
    let (models, tok) = load_models(&s.model)?;
    let streams = read_timed_streams(open(input)?)?;
    let lexicon = NumberLexicon::english();
    let mt = CascadeMt {
        models: &models,
        tokenizer: &tok.source,
        lexicon: &lexicon,
    };
    let replacements: Vec<String> = tok
        .source
        .vocab()
        .tokens()
        .iter()
        .enumerate()
        .filter(|&(i, _)| !crate::data::Vocabulary::is_special(i as TokenId))
        .map(|(_, t)| t.clone())
        .collect();
    let idx: Vec<usize> = (0..streams.len()).collect();
    let outputs = crate::par::try_map(execution(s.sequential), &idx, |&i| {
        let noise = (s.noise_rate > 0.0).then(|| AsrNoise {
            rate: s.noise_rate,
            seed: s.noise_seed,
            replacements: replacements.clone(),
        });
        cascade_decode(&streams[i], &mt, &cfg, None, noise)
    })?;
    let mut w = BufWriter::new(File::create(out)?);
    for (i, o) in outputs.into_iter().enumerate() {
        let vocab = tok.target.vocab();
        let rec = CascadeRecord {
            hypothesis: HypothesisRecord {
                id: i,
                tokens: o
                    .tokens
                    .iter()
                    .map(|&t| vocab.token(t).unwrap_or("<unk>").to_string())
                    .collect(),
                detok: vocab.detokenize(&o.tokens),
                trace: o.trace.entries(),
                truncated: o.truncated,
            },
            transcript: o.transcript,
            source_len: o.source_len,
            audio_ms: o.audio_ms,
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    w.flush()?;
    let mut inputs: Vec<&Path> = vec![input];
    inputs.extend(s.model.iter().map(PathBuf::as_path));
    write_run_metadata(out, &run, &inputs)?;
    Ok(())
}

fn cmd_segment((s, run): (SegmentSettings, RunConfig)) -> Result<()> {
    let input = required(&s.input, "in")?;
    let params = SegmentParams {
        theta_long: s.theta,
        theta_short: s.theta_short,
        max_words: s.max_words,
    };
    let docs = read_timed_streams(open(input)?)?;
    let mut segments = Vec::new();
    for d in &docs {
        segments.extend(segment_stream(d, params)?);
    }
    match &s.out {
        Some(out) => {
            let mut w = BufWriter::new(File::create(out)?);
            write_segments(&mut w, &segments)?;
            w.flush()?;
            write_run_metadata(out, &run, &[input])?;
        }
        None => {
            let stdout = std::io::stdout();
            write_segments(stdout.lock(), &segments)?;
        }
    }
    Ok(())
}

fn parse_system(entry: &str) -> Result<(String, Vec<PathBuf>)> {
    let (name, paths) = entry.split_once('=').ok_or_else(|| {
        Error::invalid(format!("bad system `{entry}`, expected name=ckpt[+ckpt...]"))
    })?;
    let paths: Vec<PathBuf> = paths
        .split('+')
        .filter(|p| !p.is_empty())
        .map(PathBuf::from)
        .collect();
    if name.is_empty() || paths.is_empty() || name.contains(',') {
        return Err(Error::invalid(format!("bad system `{entry}`")));
    }
    Ok((name.to_string(), paths))
}

fn cmd_sweep((s, run): (SweepSettings, RunConfig)) -> Result<()> {
    let out = required(&s.out, "out")?;
    if s.system.is_empty() {
        return Err(Error::invalid("--system is required"));
    }
    let exec = execution(s.sequential);
    let mut inputs: Vec<PathBuf> = Vec::new();
    let mut records: Vec<TradeoffRecord> = Vec::new();
    let lexicon = NumberLexicon::english();
    let cascade = CascadeConfig {
        sz: s.sz,
        alpha: s.alpha,
        rules: s.rules.clone(),
        block_ms: s.block_ms,
        ..CascadeConfig::default()
    };
    cascade.validate()?;
    let text_test = match s.mode {
        Mode::T2t => {
            let p = required(&s.test, "test")?;
            inputs.push(p.to_path_buf());
            Some(read_parallel_corpus(open(p)?)?)
        }
        Mode::S2t => None,
    };
    let speech_test = match s.mode {
        Mode::S2t => {
            let sp = required(&s.streams, "streams")?;
            let rp = required(&s.refs, "refs")?;
            inputs.push(sp.to_path_buf());
            inputs.push(rp.to_path_buf());
            if s.k.iter().any(|k| !matches!(k, WaitK::Finite(_))) {
                return Err(Error::invalid("s2t sweeps need finite values"));
            }
            Some((read_timed_streams(open(sp)?)?, read_lines(rp)?))
        }
        Mode::T2t => None,
    };
    for entry in &s.system {
        let (id, paths) = parse_system(entry)?;
        let (models, tok) = load_models(&paths)?;
        inputs.extend(paths);
        let systems = [SweepSystem { id, models }];
        let recs = if let Some(pairs) = &text_test {
            let sources: Vec<Vec<TokenId>> = pairs
                .iter()
                .map(|p| tok.source.encode_with_eos(&p.src))
                .collect();
            let references: Vec<String> = pairs.iter().map(|p| p.tgt.clone()).collect();
            let ts = TestSet::Text {
                sources: &sources,
                references: &references,
                target_vocab: tok.target.vocab(),
                alpha_len: s.alpha_len,
                beta_len: s.beta_len,
            };
            sweep(&systems, &s.k, &ts, exec)?
        } else {
            let (streams, references) = speech_test.as_ref().expect("s2t inputs loaded");
            let ts = TestSet::Speech {
                streams,
                references,
                target_vocab: tok.target.vocab(),
                tokenizer: &tok.source,
                lexicon: &lexicon,
                cascade: &cascade,
            };
            sweep(&systems, &s.k, &ts, exec)?
        };
        for r in &recs {
            log::info!(
                "{} k={} bleu={:.4} al={:.3}",
                r.system_id,
                r.k_eval,
                r.bleu,
                r.al_words
            );
        }
        records.extend(recs);
    }
    sort_records(&mut records);
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let mut w = BufWriter::new(File::create(out)?);
    write_sweep_csv(&mut w, &records)?;
    w.flush()?;
    write_run_metadata(out, &run, &input_refs)?;
    if let Some(plot) = &s.plot {
        emit_plotdata(&records, plot)?;
        write_run_metadata(plot, &run, &input_refs)?;
    }
    Ok(())
}

fn cmd_serve((s, _run): (ServeSettings, RunConfig)) -> Result<()> {
    let model = required(&s.model, "model")?;
    let (_, tok) = load_existing(model)?;
    let testset = match s.mode {
        Mode::T2t => {
            let pairs = read_parallel_corpus(open(required(&s.test, "test")?)?)?;
            let vocab = tok.source.vocab();
            let sources = pairs
                .iter()
                .map(|p| {
                    tok.source
                        .encode_with_eos(&p.src)
                        .iter()
                        .filter(|&&t| t != EOS)
                        .map(|&t| vocab.token(t).unwrap_or("<unk>").to_string())
                        .collect()
                })
                .collect();
            ServeTestSet::Text {
                sources,
                references: pairs.into_iter().map(|p| p.tgt).collect(),
            }
        }
        Mode::S2t => {
            if !(s.block_ms > 0.0) {
                return Err(Error::invalid("block-ms must be positive"));
            }
            ServeTestSet::Speech {
                streams: read_timed_streams(open(required(&s.streams, "streams")?)?)?,
                references: read_lines(required(&s.refs, "refs")?)?,
                block_ms: s.block_ms,
            }
        }
    };
    let handle = serve_eval(
        s.bind.as_str(),
        testset,
        tok.target.vocab().clone(),
        s.log.as_deref(),
    )?;
    eprintln!("listening on {}", handle.local_addr());
    handle.wait();
    Ok(())
}

fn cmd_grad_check((s, run): (GradCheckSettings, RunConfig)) -> Result<()> {
    let corpus = gen_toy_corpus(s.seed, 1, s.task)?;
    let pair = &corpus.pairs[0];
    let (x, y) = (&pair.source, &pair.target);
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ffn: 16,
        ..ModelConfig::desk(corpus.vocab.len())
    };
    let mut params = Parameters::init(&config, s.seed)?;
    let mut grads = Gradients::zeros_like(&params);
    let weight = 1.0 / y.len() as f64;
    let report = match s.k {
        Some(k) => {
            path_loss_and_grad(&params, x, y, k, s.smoothing, weight, &mut grads)?;
            let analytic = grads.flatten();
            grad_check(
                &mut params,
                |p| path_loss(p, x, y, k, s.smoothing).unwrap_or(f64::NAN),
                &analytic,
                s.probes,
                s.tol,
                s.seed,
            )
        }
        None => {
            let rng = || ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(1));
            multi_path_loss_and_grad(&params, x, y, s.smoothing, weight, &mut rng(), &mut grads)?;
            let analytic = grads.flatten();
            grad_check(
                &mut params,
                |p| multi_path_loss(p, x, y, s.smoothing, &mut rng()).map_or(f64::NAN, |(l, _)| l),
                &analytic,
                s.probes,
                s.tol,
                s.seed,
            )
        }
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = &s.out {
        fs::write(out, &json)?;
        write_run_metadata(out, &run, &[])?;
    }
    if !report.passed {
        return Err(Error::GradCheckFailed(format!(
            "max relative error {:.3e} > {:.1e}",
            report.max_rel_error, s.tol
        )));
    }
    Ok(())
}

fn cmd_gen_data((s, run): (GenDataSettings, RunConfig)) -> Result<()> {
    let out = required(&s.out, "out")?;
    let corpus = gen_toy_corpus(s.seed, s.n, s.task)?;
    let text = |ids: &[TokenId]| corpus.vocab.detokenize(ids);
    let pairs: Vec<TextPair> = corpus
        .pairs
        .iter()
        .map(|p| TextPair {
            src: text(&p.source),
            tgt: text(&p.target),
        })
        .collect();
    match s.format {
        DataFormat::Text => {
            let mut w = BufWriter::new(File::create(out)?);
            write_parallel_corpus(&mut w, &pairs)?;
            w.flush()?;
        }
        DataFormat::Timed => {
            let refs = required(&s.refs, "refs")?;
            let docs: Vec<_> = pairs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let words: Vec<&str> = p.src.split_whitespace().collect();
                    synthesize_stream(
                        &words,
                        s.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                    )
                })
                .collect();
            let mut w = BufWriter::new(File::create(out)?);
            write_timed_streams(&mut w, &docs)?;
            w.flush()?;
            let mut r = BufWriter::new(File::create(refs)?);
            for p in &pairs {
                writeln!(r, "{}", p.tgt)?;
            }
            r.flush()?;
            write_run_metadata(refs, &run, &[])?;
        }
    }
    write_run_metadata(out, &run, &[])?;
    Ok(())
}
