use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::SentencePair;
use super::normalize::number_words;
use super::vocab::{Vocabulary, EOS};
use crate::{Error, Result};

/// Synthetic tasks with monotonic or locally reordered alignments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTask {
    /// Target repeats the source letters.
    Copy,
    /// Target swaps every adjacent pair of source letters.
    LocalSwap,
    /// Source is 1-3 comma-separated numbers written digit by digit, target
    /// is their English word form ("4 0 7" -> "four hundred seven").
    DigitToWord,
}

impl std::str::FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyTask::Copy),
            "local_swap" | "local-swap" => Ok(ToyTask::LocalSwap),
            "digit_to_word" | "digit-to-word" => Ok(ToyTask::DigitToWord),
            _ => Err(Error::invalid(format!("unknown toy task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub vocab: Vocabulary,
    /// Sources end with the EOS end-of-source marker, targets with EOS.
    pub pairs: Vec<SentencePair>,
}

const LETTERS: &str = "abcdefghijklmnop";

/// Joint word-level vocabulary shared by all toy tasks.
pub fn toy_vocabulary() -> Vocabulary {
    let mut toks: Vec<String> = LETTERS.chars().map(String::from).collect();
    toks.extend((0..10).map(|d| d.to_string()));
    toks.push(",".into());
    for n in (0..20).chain((20..100).step_by(10)) {
        toks.push(number_words(n).expect("in range"));
    }
    toks.push("hundred".into());
    toks.push("thousand".into());
    Vocabulary::from_tokens(toks).expect("static vocabulary")
}

pub fn gen_toy_corpus(seed: u64, n_pairs: usize, task: ToyTask) -> Result<ToyCorpus> {
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be at least 1"));
    }
    let vocab = toy_vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let letters: Vec<String> = LETTERS.chars().map(String::from).collect();
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let (src, tgt): (Vec<String>, Vec<String>) = match task {
            ToyTask::Copy | ToyTask::LocalSwap => {
                let len = rng.gen_range(3..=10);
                let src: Vec<String> = (0..len)
                    .map(|_| letters[rng.gen_range(0..letters.len())].clone())
                    .collect();
                let mut tgt = src.clone();
                if task == ToyTask::LocalSwap {
                    for c in tgt.chunks_mut(2) {
                        c.reverse();
                    }
                }
                (src, tgt)
            }
            ToyTask::DigitToWord => {
                let count = rng.gen_range(1..=3);
                let mut src = Vec::new();
                let mut tgt = Vec::new();
                for i in 0..count {
                    if i > 0 {
                        src.push(",".to_string());
                        tgt.push(",".to_string());
                    }
                    let digits = rng.gen_range(1..=3u32);
                    let lo = if digits == 1 {
                        0
                    } else {
                        10u32.pow(digits - 1)
                    };
                    let n = rng.gen_range(lo..10u32.pow(digits));
                    src.extend(n.to_string().chars().map(String::from));
                    tgt.extend(
                        number_words(n)
                            .expect("< 1000")
                            .split(' ')
                            .map(String::from),
                    );
                }
                (src, tgt)
            }
        };
        let mut s: Vec<_> = src
            .iter()
            .map(|w| vocab.id(w).expect("toy token"))
            .collect();
        let mut t: Vec<_> = tgt
            .iter()
            .map(|w| vocab.id(w).expect("toy token"))
            .collect();
        s.push(EOS);
        t.push(EOS);
        pairs.push(SentencePair::new(s, t)?);
    }
    Ok(ToyCorpus { vocab, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(v: &Vocabulary, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != EOS)
            .map(|&i| v.token(i).unwrap().to_string())
            .collect()
    }

    #[test]
    fn copy_targets_equal_sources() {
        let c = gen_toy_corpus(3, 200, ToyTask::Copy).unwrap();
        for p in &c.pairs {
            assert_eq!(p.source, p.target);
            assert!(p.source.len() <= 20 && p.target.len() <= 20);
        }
    }

    #[test]
    fn deterministic() {
        for task in [ToyTask::Copy, ToyTask::LocalSwap, ToyTask::DigitToWord] {
            let a = gen_toy_corpus(9, 50, task).unwrap();
            let b = gen_toy_corpus(9, 50, task).unwrap();
            assert_eq!(a.pairs, b.pairs);
        }
    }

    #[test]
    fn local_swap_is_local() {
        let c = gen_toy_corpus(1, 100, ToyTask::LocalSwap).unwrap();
        for p in &c.pairs {
            let (s, t) = (&p.source, &p.target);
            assert_eq!(s.len(), t.len());
            for i in 0..s.len() - 1 {
                let j = i ^ 1;
                let j = if j < s.len() - 1 { j } else { i };
                assert_eq!(t[i], s[j]);
            }
        }
    }

    #[test]
    fn digit_to_word_matches_independent_mapping() {
        // Table-driven reference, written without the crate's number speller.
        const UNITS: [&str; 10] = [
            "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
        ];
        const TEENS: [&str; 10] = [
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
        fn spell(d: &[u32]) -> Vec<String> {
            let mut out = Vec::new();
            let d: Vec<u32> = d.to_vec();
            let (h, t, u) = match d.len() {
                1 => (0, 0, d[0]),
                2 => (0, d[0], d[1]),
                3 => (d[0], d[1], d[2]),
                _ => unreachable!(),
            };
            if h > 0 {
                out.push(UNITS[h as usize].to_string());
                out.push("hundred".to_string());
            }
            match t {
                0 if u > 0 || d.len() == 1 => out.push(UNITS[u as usize].to_string()),
                0 => {}
                1 => out.push(TEENS[u as usize].to_string()),
                _ => {
                    out.push(TENS[t as usize].to_string());
                    if u > 0 {
                        out.push(UNITS[u as usize].to_string());
                    }
                }
            }
            out
        }
        let c = gen_toy_corpus(5, 1000, ToyTask::DigitToWord).unwrap();
        for p in &c.pairs {
            let src = words(&c.vocab, &p.source);
            let mut expected = Vec::new();
            for (i, group) in src.split(|w| w == ",").enumerate() {
                if i > 0 {
                    expected.push(",".to_string());
                }
                let digits: Vec<u32> = group.iter().map(|w| w.parse().unwrap()).collect();
                expected.extend(spell(&digits));
            }
            assert_eq!(words(&c.vocab, &p.target), expected);
            assert!(p.source.len() <= 20 && p.target.len() <= 20);
        }
    }

    #[test]
    fn zero_pairs_rejected() {
        assert!(gen_toy_corpus(0, 0, ToyTask::Copy).is_err());
    }
}
