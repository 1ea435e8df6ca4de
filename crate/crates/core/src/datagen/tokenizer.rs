use std::collections::HashMap;

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";

const PUNCT: [char; 2] = [',', '.'];

/// Split text into words, peeling trailing `,` and `.` into their own tokens.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut end = word.len();
        let mut trailing = Vec::new();
        while end > 0 && word[..end].ends_with(PUNCT) {
            trailing.push(&word[end - 1..end]);
            end -= 1;
        }
        if end > 0 {
            out.push(&word[..end]);
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

/// Inverse of [`split_words`] up to whitespace normalization.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut s = String::new();
    for w in words {
        let w = w.as_ref();
        let attach = w.len() == 1 && w.starts_with(PUNCT);
        if !s.is_empty() && !attach {
            s.push(' ');
        }
        s.push_str(w);
    }
    s
}

/// Closed word-level vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Tokenizer {
    /// Build from words in id order; duplicates keep their first id.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut t = Self {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        for w in words {
            let w = w.into();
            if !t.ids.contains_key(&w) {
                t.ids.insert(w.clone(), t.words.len() as u32);
                t.words.push(w);
            }
        }
        t
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
    }

    pub fn bos(&self) -> Result<u32> {
        self.id(BOS)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        split_words(text).into_iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.word(i)
                    .ok_or_else(|| Error::Dataset(format!("token id {i} outside vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(join_words(&words))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_peels_punctuation() {
        assert_eq!(
            split_words("Then, Ann went to the park. Bo"),
            vec!["Then", ",", "Ann", "went", "to", "the", "park", ".", "Bo"]
        );
    }

    #[test]
    fn join_inverts_split() {
        let t = "Then, Ann and Bo had a long argument, and afterwards Bo said to";
        assert_eq!(join_words(&split_words(t)), t);
    }

    #[test]
    fn unknown_word_is_named() {
        let tok = Tokenizer::new(["a", "b"]);
        match tok.encode("a c") {
            Err(Error::OutOfVocabulary(w)) => assert_eq!(w, "c"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
