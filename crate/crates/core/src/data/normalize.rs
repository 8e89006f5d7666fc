use std::collections::HashMap;

const ONES: [&str; 20] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
];
const TENS: [&str; 10] = [
    "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

/// English word form of `n` for 0..=9999, e.g. 407 -> "four hundred seven".
pub(crate) fn number_words(n: u32) -> Option<String> {
    if n > 9999 {
        return None;
    }
    if n == 0 {
        return Some(ONES[0].to_string());
    }
    let mut parts: Vec<&str> = Vec::new();
    let (thousands, rest) = (n / 1000, n % 1000);
    if thousands > 0 {
        parts.push(ONES[thousands as usize]);
        parts.push("thousand");
    }
    let (hundreds, rest) = (rest / 100, rest % 100);
    if hundreds > 0 {
        parts.push(ONES[hundreds as usize]);
        parts.push("hundred");
    }
    if rest >= 20 {
        parts.push(TENS[(rest / 10) as usize]);
        if rest % 10 > 0 {
            parts.push(ONES[(rest % 10) as usize]);
        }
    } else if rest > 0 {
        parts.push(ONES[rest as usize]);
    }
    Some(parts.join(" "))
}

/// Maps digit strings to spelled-out words.
#[derive(Debug, Clone, Default)]
pub struct NumberLexicon {
    entries: HashMap<String, String>,
    compositional_english: bool,
}

impl NumberLexicon {
    /// English cardinals 0..=9999 built compositionally.
    pub fn english() -> Self {
        NumberLexicon {
            entries: HashMap::new(),
            compositional_english: true,
        }
    }

    pub fn from_entries(entries: HashMap<String, String>) -> Self {
        NumberLexicon {
            entries,
            compositional_english: false,
        }
    }

    pub fn lookup(&self, digits: &str) -> Option<String> {
        if let Some(w) = self.entries.get(digits) {
            return Some(w.clone());
        }
        if self.compositional_english && digits.len() <= 4 {
            return digits.parse::<u32>().ok().and_then(number_words);
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedText {
    pub text: String,
    /// Digit tokens the lexicon could not convert; they are kept verbatim.
    pub unconverted: Vec<String>,
}

/// ASR-side normalization: lower-case, strip every character that is neither
/// alphanumeric nor whitespace, spell out digit tokens, single-space join.
pub fn asr_normalize(text: &str, lexicon: &NumberLexicon) -> NormalizedText {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    let mut out: Vec<String> = Vec::new();
    let mut unconverted = Vec::new();
    for tok in cleaned.split_whitespace() {
        if tok.chars().all(|c| c.is_ascii_digit()) {
            match lexicon.lookup(tok) {
                Some(w) => out.extend(w.split_whitespace().map(str::to_lowercase)),
                None => {
                    log::warn!("number `{tok}` not covered by lexicon, kept as digits");
                    unconverted.push(tok.to_string());
                    out.push(tok.to_string());
                }
            }
        } else {
            out.push(tok.to_string());
        }
    }
    NormalizedText {
        text: out.join(" "),
        unconverted,
    }
}
