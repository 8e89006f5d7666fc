use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::bpe::WORD_END;
use crate::{Error, Result, TokenId};

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const SPECIAL_STRINGS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bidirectional token/id map. The four specials always occupy ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    token_of: Vec<String>,
    id_of: HashMap<String, TokenId>,
    subword: bool,
}

impl Vocabulary {
    /// Vocabulary holding only the specials.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            token_of: Vec::new(),
            id_of: HashMap::new(),
            subword: false,
        };
        for s in SPECIAL_STRINGS {
            v.push(s);
        }
        v
    }

    /// Builds a vocabulary from `tokens`, skipping duplicates and specials.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary::new();
        for t in tokens {
            v.insert(t.as_ref())?;
        }
        Ok(v)
    }

    fn push(&mut self, token: &str) -> TokenId {
        let id = self.token_of.len() as TokenId;
        self.token_of.push(token.to_string());
        self.id_of.insert(token.to_string(), id);
        self.subword |= token.ends_with(WORD_END);
        id
    }

    /// Inserts `token` if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> Result<TokenId> {
        if token.is_empty() {
            return Err(Error::invalid("empty token string"));
        }
        if let Some(&id) = self.id_of.get(token) {
            return Ok(id);
        }
        Ok(self.push(token))
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.token_of.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    pub fn is_special(id: TokenId) -> bool {
        id <= UNK
    }

    /// Whitespace-split word-level encoding, unknown words map to UNK.
    pub fn encode_words(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.id_or_unk(w)).collect()
    }

    /// Joins non-special tokens with single spaces.
    pub fn decode_words(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_special(id) || id == UNK)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// True when entries carry the subword end-of-word marker.
    pub fn is_subword(&self) -> bool {
        self.subword
    }

    /// Turns model output back into text: subword pieces are glued at their
    /// end-of-word markers, word tokens are joined with spaces.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        if !self.subword {
            return self.decode_words(ids);
        }
        let mut s = String::new();
        for &id in ids {
            if Self::is_special(id) && id != UNK {
                continue;
            }
            match self.token(id) {
                Some(t) if t.ends_with(WORD_END) => {
                    s.push_str(&t[..t.len() - WORD_END.len_utf8()]);
                    s.push(' ');
                }
                Some(t) => s.push_str(t),
                None => s.push_str("<unk>"),
            }
        }
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_STRINGS.len()
            || tokens[..SPECIAL_STRINGS.len()]
                .iter()
                .zip(SPECIAL_STRINGS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Format(
                "vocabulary must start with <pad> <s> </s> <unk>".into(),
            ));
        }
        let mut v = Vocabulary::new();
        for t in &tokens[SPECIAL_STRINGS.len()..] {
            if v.id(t).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{t}`")));
            }
            v.insert(t)?;
        }
        Ok(v)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.token_of
    }
}

/// Anything that turns normalized source text into model token ids.
pub trait SourceTokenizer: Sync {
    fn encode(&self, text: &str) -> Vec<TokenId>;
}

impl SourceTokenizer for Vocabulary {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_words(text)
    }
}
