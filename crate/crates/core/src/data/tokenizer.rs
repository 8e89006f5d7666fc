use serde::{Deserialize, Serialize};

use super::bpe::{train_bpe, BpeModel};
use super::vocab::{SourceTokenizer, Vocabulary, EOS};
use crate::{Result, TokenId};

/// Word-level or subword tokenization with its vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    Words(Vocabulary),
    Bpe(BpeModel),
}

impl Tokenizer {
    /// Word vocabulary in order of first appearance when `bpe_size` is 0,
    /// otherwise a BPE model of at most `bpe_size` entries.
    pub fn train<S: AsRef<str>>(lines: &[S], bpe_size: usize) -> Result<Self> {
        if bpe_size == 0 {
            let words = lines.iter().flat_map(|l| l.as_ref().split_whitespace());
            Ok(Tokenizer::Words(Vocabulary::from_tokens(words)?))
        } else {
            Ok(Tokenizer::Bpe(train_bpe(lines, bpe_size)?))
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            Tokenizer::Words(v) => v,
            Tokenizer::Bpe(b) => b.vocab(),
        }
    }

    /// Token ids of `text` followed by EOS.
    pub fn encode_with_eos(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        self.vocab().detokenize(ids)
    }
}

impl SourceTokenizer for Tokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        match self {
            Tokenizer::Words(v) => v.encode_words(text),
            Tokenizer::Bpe(b) => b.encode(
                text.split_whitespace()
                    .collect::<Vec<_>>()
                    .join(" ")
                    .as_str(),
            ),
        }
    }
}

/// Source and target tokenizers of one model. With a joint vocabulary both
/// sides are the same tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerPair {
    pub source: Tokenizer,
    pub target: Tokenizer,
    pub joint: bool,
}

impl TokenizerPair {
    pub fn train<S: AsRef<str>>(
        sources: &[S],
        targets: &[S],
        bpe_size: usize,
        joint: bool,
    ) -> Result<Self> {
        if joint {
            let all: Vec<&str> = sources.iter().chain(targets).map(AsRef::as_ref).collect();
            let t = Tokenizer::train(&all, bpe_size)?;
            Ok(TokenizerPair {
                source: t.clone(),
                target: t,
                joint,
            })
        } else {
            Ok(TokenizerPair {
                source: Tokenizer::train(sources, bpe_size)?,
                target: Tokenizer::train(targets, bpe_size)?,
                joint,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_tokenizer_round_trip() {
        let t = Tokenizer::train(&["a b c", "c d"], 0).unwrap();
        let ids = t.encode_with_eos("a d c");
        assert_eq!(ids.last(), Some(&EOS));
        assert_eq!(t.decode(&ids), "a d c");
    }

    #[test]
    fn bpe_tokenizer_round_trip() {
        let lines = ["the cat sat", "the cat ran", "a cat"];
        let t = Tokenizer::train(&lines, 40).unwrap();
        for l in lines {
            assert_eq!(t.decode(&t.encode(l)), l);
        }
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<Tokenizer>(&json).unwrap(), t);
    }

    #[test]
    fn joint_pair_shares_vocabulary() {
        let p = TokenizerPair::train(&["x y"], &["z"], 0, true).unwrap();
        assert_eq!(p.source.vocab(), p.target.vocab());
        let q = TokenizerPair::train(&["x y"], &["z"], 0, false).unwrap();
        assert_ne!(q.source.vocab(), q.target.vocab());
    }
}
