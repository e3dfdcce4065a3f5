//! Word-level text tokenizer.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const YES: u32 = 4;
pub const NO: u32 = 5;

const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "yes", "no"];

/// Number of digit words ("0" .. "31") always present in the vocabulary.
pub const DIGIT_WORDS: usize = 32;

/// Text <-> id mapping used by every task.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> String;
    fn vocab_size(&self) -> usize;
    fn id(&self, word: &str) -> Option<u32>;
}

/// Lower-cases and splits into words; every punctuation character becomes
/// its own token.
pub fn normalize_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() && ch != '\'' {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// The canonical text form: normalized words joined by single spaces.
pub fn normalize(text: &str) -> String {
    normalize_words(text).join(" ")
}

/// Answer normalization for exact-match scoring: lower-case, punctuation
/// removed, whitespace collapsed.
pub fn normalize_answer(text: &str) -> String {
    let stripped: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TextTokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for TextTokenizer {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }
}

impl From<TextTokenizer> for Vec<String> {
    fn from(t: TextTokenizer) -> Self {
        t.words
    }
}

impl TextTokenizer {
    /// Reserved ids, digit words, then every other word in sorted order, so
    /// the assignment does not depend on the order texts are seen in.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.extend((0..DIGIT_WORDS).map(|d| d.to_string()));
        let fixed: BTreeSet<String> = words.iter().cloned().collect();
        let rest: BTreeSet<String> = texts
            .into_iter()
            .flat_map(normalize_words)
            .filter(|w| !fixed.contains(w))
            .collect();
        words.extend(rest);
        Self::from(words)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn digit(&self, d: usize) -> u32 {
        assert!(d < DIGIT_WORDS, "digit word {d} outside 0..{DIGIT_WORDS}");
        (RESERVED.len() + d) as u32
    }

    /// `BOS ids.. EOS`
    pub fn frame(ids: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(ids.len() + 2);
        out.push(BOS);
        out.extend_from_slice(ids);
        out.push(EOS);
        out
    }

    pub fn is_special(id: u32) -> bool {
        matches!(id, PAD | BOS | EOS | UNK)
    }
}

impl Tokenizer for TextTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        normalize_words(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.word(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }
}
