use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::postext::{COL_NAMES, FUZZ_PHRASE, ROW_NAMES, UNK_POS};

pub const MAX_TOKENS: usize = 24;
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const UNK_POS_ID: u32 = 2;

const PAD: &str = "[PAD]";
const UNK: &str = "[UNK]";

/// Fixed-length token ids, padded with [`PAD_ID`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    /// Number of non-pad ids.
    pub fn content_len(&self) -> usize {
        self.ids.iter().filter(|&&id| id != PAD_ID).count()
    }
}

/// Closed word-to-id map with the three reserved entries first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds the vocabulary from a corpus. Position words and the words of
    /// the fuzzing phrase are always included.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for w in split_words(text) {
                if let Piece::Word(w) = w {
                    words.insert(w);
                }
            }
        }
        for w in ROW_NAMES.iter().chain(&COL_NAMES) {
            words.insert(w.to_string());
        }
        for w in split_words(FUZZ_PHRASE) {
            if let Piece::Word(w) = w {
                words.insert(w);
            }
        }
        let list = [PAD, UNK, UNK_POS]
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_words(list).expect("reserved entries present")
    }

    /// Restores a vocabulary from its word list (as stored in checkpoints).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 3 || words[0] != PAD || words[1] != UNK || words[2] != UNK_POS {
            return Err(Error::Vocabulary(
                "word list must start with [PAD], [UNK], [UNK_POS]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Vocabulary(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    /// Lowercases, splits on whitespace and punctuation (keeping the
    /// position placeholder whole), maps unknown words to [`UNK_ID`] and
    /// pads or truncates to [`MAX_TOKENS`].
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids: Vec<u32> = split_words(text)
            .into_iter()
            .map(|p| match p {
                Piece::UnkPos => UNK_POS_ID,
                Piece::Word(w) => self.id(&w).unwrap_or(UNK_ID),
            })
            .take(MAX_TOKENS)
            .collect();
        ids.resize(MAX_TOKENS, PAD_ID);
        TokenSequence { ids }
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Piece {
    Word(String),
    UnkPos,
}

fn split_words(text: &str) -> Vec<Piece> {
    let lower = text.to_lowercase();
    let marker = UNK_POS.to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = lower.as_str();
    while let Some(ch) = rest.chars().next() {
        if rest.starts_with(&marker) {
            flush(&mut word, &mut out);
            out.push(Piece::UnkPos);
            rest = &rest[marker.len()..];
            continue;
        }
        if ch.is_alphanumeric() || ch == '_' {
            word.push(ch);
        } else {
            flush(&mut word, &mut out);
        }
        rest = &rest[ch.len_utf8()..];
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<Piece>) {
    if !word.is_empty() {
        out.push(Piece::Word(std::mem::take(word)));
    }
}
