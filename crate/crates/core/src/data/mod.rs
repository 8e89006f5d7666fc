//! Tokenization, vocabularies, corpus handling and feature-matrix transforms.

mod augment;
mod bpe;
mod corpus;
mod normalize;
mod tokenizer;
mod toy;
mod vocab;

pub use augment::{spec_augment, speed_perturb, FeatureMatrix, SpecAugmentParams};
pub use bpe::{train_bpe, BpeModel, WORD_END};
pub use corpus::{
    filter_length_ratio, length_ratio, read_parallel_corpus, write_parallel_corpus, SentencePair,
    TextPair,
};
pub use normalize::{asr_normalize, NormalizedText, NumberLexicon};
pub use tokenizer::{Tokenizer, TokenizerPair};
pub use toy::{gen_toy_corpus, toy_vocabulary, ToyCorpus, ToyTask};
pub use vocab::{SourceTokenizer, Vocabulary, BOS, EOS, PAD, UNK};
