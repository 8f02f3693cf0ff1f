//! Word-level tokenizer for the toy text tower.

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

pub const UNK: &str = "<unk>";
pub const SOT: &str = "<sot>";
pub const EOT: &str = "<eot>";

/// Splits lowercase text into words (alphanumerics joined by `-` or `'`)
/// and single punctuation marks.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ((ch == '-' || ch == '\'') && !word.is_empty()) {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: IndexSet<String>,
}

impl Vocabulary {
    /// Vocabulary over every token of `texts`, after the special tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: IndexSet<String> = [UNK, SOT, EOT].iter().map(|s| s.to_string()).collect();
        for t in texts {
            tokens.extend(tokenize(t));
        }
        Self { tokens }
    }

    pub fn extend<S: AsRef<str>>(&mut self, texts: impl IntoIterator<Item = S>) {
        for t in texts {
            self.tokens.extend(tokenize(t.as_ref()));
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens.get_index_of(token).unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains(token)
    }

    pub fn sot(&self) -> usize {
        self.id(SOT)
    }

    pub fn eot(&self) -> usize {
        self.id(EOT)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}
