use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::Interaction;
use crate::schema::Schema;

pub const LATENT: &str = "[Z]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const SPECIALS: [&str; 6] = [LATENT, SEP, UNK, PAD, BOS, EOS];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Specials first, then the remaining words in sorted order.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let rest: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(rest).collect();
        Vocab::from(all)
    }

    /// Words from questions, self-contained questions and schema names.
    pub fn build<'a>(interactions: &[Interaction], schemas: impl IntoIterator<Item = &'a Schema>) -> Self {
        let mut words: Vec<String> = Vec::new();
        for i in interactions {
            for t in &i.turns {
                words.extend(t.question.iter().cloned());
                if let Some(s) = &t.self_contained {
                    words.extend(s.iter().cloned());
                }
            }
        }
        for s in schemas {
            for t in &s.tables {
                words.extend(t.words.iter().cloned());
            }
            for c in &s.columns {
                words.extend(c.words.iter().cloned());
            }
        }
        Vocab::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or_else(|| self.index[UNK])
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_and_unknowns_map_to_unk() {
        let v = Vocab::new(["singer", "age", "singer"]);
        assert_eq!(v.len(), 8);
        assert_eq!(v.word(0), LATENT);
        assert_eq!(v.id("zebra"), v.unk());
        assert_eq!(v.word(v.id("age")), "age");
    }

    #[test]
    fn serializes_as_word_list() {
        let v = Vocab::new(["b", "a"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }
}
