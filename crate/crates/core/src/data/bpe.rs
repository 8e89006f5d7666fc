use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::vocab::{SourceTokenizer, Vocabulary, UNK};
use crate::{Error, Result, TokenId};

/// Suffix attached to the last symbol of every word.
pub const WORD_END: char = '\u{2581}';

/// Byte-pair-encoding model: ordered merge rules plus the resulting vocabulary.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vocabulary,
}

/// Splits a line into words on single spaces; empty words are kept so that
/// runs of spaces survive a round-trip.
fn words(line: &str) -> impl Iterator<Item = &str> {
    line.split(' ')
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return vec![WORD_END.to_string()];
    }
    let last = chars.len() - 1;
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{WORD_END}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Learns merges greedily by pair frequency until the vocabulary reaches
/// `target_vocab_size` or no pair occurs at least twice. Ties are broken by
/// the lexicographically smallest pair.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty BPE training corpus"));
    }
    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for line in corpus {
        for w in words(line.as_ref()) {
            *word_freq.entry(w).or_default() += 1;
        }
    }

    let mut alphabet: Vec<String> = Vec::new();
    let mut has_empty = false;
    {
        let mut chars: Vec<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        for c in chars {
            alphabet.push(c.to_string());
            alphabet.push(format!("{c}{WORD_END}"));
        }
        if word_freq.contains_key("") {
            has_empty = true;
        }
    }
    if has_empty {
        alphabet.push(WORD_END.to_string());
    }
    let mut vocab = Vocabulary::from_tokens(&alphabet)?;
    if target_vocab_size < vocab.len() {
        return Err(Error::invalid(format!(
            "target vocabulary size {target_vocab_size} cannot hold the {} base symbols",
            vocab.len()
        )));
    }

    let mut segmented: Vec<(Vec<String>, usize)> = word_freq
        .iter()
        .map(|(w, &f)| (initial_symbols(w), f))
        .collect();
    let mut merges = Vec::new();

    while vocab.len() < target_vocab_size {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, f) in &segmented {
            for pair in syms.windows(2) {
                *counts
                    .entry((pair[0].as_str(), pair[1].as_str()))
                    .or_default() += f;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (l, r) = (l.to_string(), r.to_string());
        let merged = format!("{l}{r}");
        for (syms, _) in segmented.iter_mut() {
            merge_pair(syms, &l, &r);
        }
        vocab.insert(&merged)?;
        merges.push((l, r));
    }

    Ok(BpeModel::from_parts(merges, vocab))
}

fn merge_pair(syms: &mut Vec<String>, l: &str, r: &str) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
            out.push(format!("{l}{r}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut syms[i]));
            i += 1;
        }
    }
    *syms = out;
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, vocab: Vocabulary) -> Self {
        let ranks = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, p)| (p, i))
            .collect();
        BpeModel {
            merges,
            ranks,
            vocab,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Segments one word (without spaces) into subword strings.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| {
                    self.ranks
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, p))
                })
                .min_by_key(|(r, _)| *r)
                .map(|(_, p)| (p[0].clone(), p[1].clone()));
            match best {
                Some((l, r)) => merge_pair(&mut syms, &l, &r),
                None => return syms,
            }
        }
    }

    pub fn encode(&self, line: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for w in words(line) {
            for s in self.segment_word(w) {
                out.push(self.vocab.id(&s).unwrap_or(UNK));
            }
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            if Vocabulary::is_special(id) && id != UNK {
                continue;
            }
            s.push_str(self.vocab.token(id).unwrap_or("<unk>"));
        }
        let mut text: String = s
            .chars()
            .map(|c| if c == WORD_END { ' ' } else { c })
            .collect();
        if text.ends_with(' ') {
            text.pop();
        }
        text
    }

    /// Plain-text form: a `#vocab N` block of tokens, then `#merges M` and one
    /// `left right` rule per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let toks = self.vocab.tokens();
        let _ = writeln!(out, "#vocab {}", toks.len());
        for t in toks {
            let _ = writeln!(out, "{t}");
        }
        let _ = writeln!(out, "#merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let n = header(lines.next(), "#vocab")?;
        let toks: Vec<String> = lines.by_ref().take(n).map(str::to_string).collect();
        if toks.len() != n {
            return Err(Error::Format("truncated vocabulary block".into()));
        }
        let vocab = Vocabulary::try_from(toks)?;
        let m = header(lines.next(), "#merges")?;
        let mut merges = Vec::with_capacity(m);
        for line in lines.by_ref().take(m) {
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad merge line `{line}`")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        if merges.len() != m {
            return Err(Error::Format("truncated merge block".into()));
        }
        Ok(BpeModel::from_parts(merges, vocab))
    }
}

fn header(line: Option<&str>, tag: &str) -> Result<usize> {
    line.and_then(|l| l.strip_prefix(tag))
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("expected `{tag} <count>` header")))
}

impl TryFrom<String> for BpeModel {
    type Error = Error;

    fn try_from(text: String) -> Result<Self> {
        BpeModel::from_text(&text)
    }
}

impl From<BpeModel> for String {
    fn from(m: BpeModel) -> Self {
        m.to_text()
    }
}

impl SourceTokenizer for BpeModel {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        BpeModel::encode(self, text)
    }
}
