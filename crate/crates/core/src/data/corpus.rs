use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::vocab::{EOS, PAD};
use crate::{Error, Result, TokenId};

/// A tokenized source/target pair. Both sides are non-empty, PAD-free, and the
/// target ends with EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SentencePair {
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::invalid("sentence pair with an empty side"));
        }
        if source.contains(&PAD) || target.contains(&PAD) {
            return Err(Error::invalid("sentence pair contains PAD"));
        }
        if target.last() != Some(&EOS) {
            return Err(Error::invalid("target does not end with EOS"));
        }
        Ok(SentencePair { source, target })
    }
}

pub fn length_ratio(a: usize, b: usize) -> Result<f64> {
    if a == 0 || b == 0 {
        return Err(Error::invalid("zero-length side in length-ratio filter"));
    }
    Ok(a.max(b) as f64 / a.min(b) as f64)
}

/// Keeps the pairs whose longer/shorter side ratio is at most `max_ratio`.
pub fn filter_length_ratio(pairs: &[SentencePair], max_ratio: f64) -> Result<Vec<SentencePair>> {
    if !(max_ratio >= 1.0) {
        return Err(Error::invalid(format!(
            "max_ratio must be >= 1, got {max_ratio}"
        )));
    }
    let mut kept = Vec::new();
    for p in pairs {
        if length_ratio(p.source.len(), p.target.len())? <= max_ratio {
            kept.push(p.clone());
        }
    }
    Ok(kept)
}

/// Untokenized parallel line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub src: String,
    pub tgt: String,
}

/// Reads `source<TAB>target` lines, or JSON lines with `src`/`tgt` fields.
/// The format is chosen per line: lines starting with `{` are JSON.
pub fn read_parallel_corpus<R: BufRead>(reader: R) -> Result<Vec<TextPair>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if line.trim_start().starts_with('{') {
            out.push(serde_json::from_str(&line)?);
        } else {
            let (src, tgt) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line {}: missing TAB separator", n + 1)))?;
            out.push(TextPair {
                src: src.to_string(),
                tgt: tgt.to_string(),
            });
        }
    }
    Ok(out)
}

pub fn write_parallel_corpus<W: Write>(mut w: W, pairs: &[TextPair]) -> Result<()> {
    for p in pairs {
        writeln!(w, "{}\t{}", p.src, p.tgt)?;
    }
    Ok(())
}
