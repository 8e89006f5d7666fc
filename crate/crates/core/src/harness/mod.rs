//! Command-line pipelines, run configuration, the streaming evaluation
//! server and plot-data output.

mod cli;
mod serve;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::data::TokenizerPair;
use crate::metrics::TradeoffRecord;
use crate::model::{load_checkpoint, save_checkpoint, Parameters};
use crate::training::WaitK;
use crate::{Error, Result};

pub use cli::{cli, COMMANDS};
pub use serve::{drive_waitk_text, serve_eval, EvalClient, ServeTestSet, ServerHandle};

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "SIMULMT_CONFIG";

/// Where a resolved setting came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Default,
    ConfigFile,
    Flag,
}

/// Fully resolved settings of one command with per-key provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub settings: Value,
    pub provenance: BTreeMap<String, Source>,
}

impl RunConfig {
    /// Layers defaults, the command's section of the config file and the
    /// explicitly given flags (in that order of precedence, lowest first).
    /// Keys unknown to `T` are rejected.
    pub fn resolve<T>(
        command: &str,
        file_section: Option<&Value>,
        flags: &Value,
    ) -> Result<(T, RunConfig)>
    where
        T: Serialize + DeserializeOwned + Default,
    {
        let Value::Object(mut merged) = serde_json::to_value(T::default())? else {
            return Err(Error::invalid("settings must serialize to an object"));
        };
        let mut provenance: BTreeMap<String, Source> = merged
            .keys()
            .map(|k| (k.clone(), Source::Default))
            .collect();
        let mut overlay = |layer: &Map<String, Value>, src: Source| -> Result<()> {
            for (k, v) in layer {
                if !provenance.contains_key(k) {
                    return Err(Error::invalid(format!(
                        "unknown setting `{k}` for `{command}`"
                    )));
                }
                if v.is_null() {
                    continue;
                }
                merged.insert(k.clone(), v.clone());
                provenance.insert(k.clone(), src);
            }
            Ok(())
        };
        if let Some(section) = file_section {
            let obj = section.as_object().ok_or_else(|| {
                Error::invalid(format!("config section `{command}` must be an object"))
            })?;
            overlay(obj, Source::ConfigFile)?;
        }
        if let Value::Object(obj) = flags {
            overlay(obj, Source::Flag)?;
        }
        let settings = Value::Object(merged);
        let typed: T = serde_json::from_value(settings.clone())
            .map_err(|e| Error::invalid(format!("invalid `{command}` settings: {e}")))?;
        Ok((
            typed,
            RunConfig {
                command: command.to_string(),
                settings,
                provenance,
            },
        ))
    }
}

/// Reads a config file: a JSON object whose keys are command names.
pub fn load_config_file(path: &Path, commands: &[&str]) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path)?;
    let Value::Object(map) = serde_json::from_str(&text)? else {
        return Err(Error::invalid("config file must hold a JSON object"));
    };
    if let Some(k) = map.keys().find(|k| !commands.contains(&k.as_str())) {
        return Err(Error::invalid(format!("unknown config section `{k}`")));
    }
    Ok(map)
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Sidecar written next to every output artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub version: String,
    pub run: RunConfig,
    pub inputs: Vec<InputHash>,
}

pub fn metadata_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

/// Writes `<out>.run.json` with the resolved config and input hashes.
pub fn write_run_metadata(out: &Path, run: &RunConfig, inputs: &[&Path]) -> Result<RunMetadata> {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(InputHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = RunMetadata {
        version: env!("CARGO_PKG_VERSION").to_string(),
        run: run.clone(),
        inputs,
    };
    let f = BufWriter::new(File::create(metadata_path(out))?);
    serde_json::to_writer_pretty(f, &meta)?;
    Ok(meta)
}

pub fn read_run_metadata(out: &Path) -> Result<RunMetadata> {
    Ok(serde_json::from_reader(BufReader::new(File::open(
        metadata_path(out),
    )?))?)
}

/// Tokenizers are stored next to the checkpoint as `<path>.tok.json`.
pub fn tokenizer_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".tok.json");
    PathBuf::from(s)
}

pub fn save_model(path: &Path, params: &Parameters, tokenizers: &TokenizerPair) -> Result<()> {
    save_checkpoint(path, params)?;
    serde_json::to_writer(
        BufWriter::new(File::create(tokenizer_path(path))?),
        tokenizers,
    )?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Parameters, TokenizerPair)> {
    let params = load_checkpoint(path)?;
    let tok: TokenizerPair =
        serde_json::from_reader(BufReader::new(File::open(tokenizer_path(path))?))?;
    if tok.source.vocab().len() != params.config().src_vocab_size
        || tok.target.vocab().len() != params.config().tgt_vocab_size
    {
        return Err(Error::Shape(format!(
            "{} does not match its tokenizers",
            path.display()
        )));
    }
    Ok((params, tok))
}

pub const PLOT_HEADER: &str = "system,k,al_words,al_ms,bleu";

fn plot_al(r: &TradeoffRecord) -> f64 {
    r.al_ms.unwrap_or(r.al_words)
}

/// Plot-ready CSV sorted by system and then lagging (milliseconds when
/// present, words otherwise), six decimals per value.
pub fn emit_plotdata(records: &[TradeoffRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no records to plot"));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| {
        a.system_id
            .cmp(&b.system_id)
            .then(plot_al(a).total_cmp(&plot_al(b)))
    });
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{PLOT_HEADER}")?;
    for r in &sorted {
        let ms = r.al_ms.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{:.6},{},{:.6}",
            r.system_id, r.k_eval, r.al_words, ms, r.bleu
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a file written by [`emit_plotdata`].
pub fn read_plotdata(path: &Path) -> Result<Vec<TradeoffRecord>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != PLOT_HEADER {
        return Err(Error::Format(format!("unexpected plot header `{header}`")));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Format(format!("bad plot row `{line}`")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad number `{s}`")))
        };
        out.push(TradeoffRecord {
            system_id: cols[0].to_string(),
            k_eval: cols[1].parse::<WaitK>()?,
            al_words: num(cols[2])?,
            al_ms: if cols[3].is_empty() {
                None
            } else {
                Some(num(cols[3])?)
            },
            bleu: num(cols[4])?,
        });
    }
    Ok(out)
}
