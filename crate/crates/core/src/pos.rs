//! Lexicon part-of-speech tagger used by the POS control task and the
//! MaskPOS noise ordering. Unknown words fall back to NOUN; digits to NUM
//! and punctuation to PUNCT.

use std::collections::HashMap;

use crate::corpus::Vocabulary;

const SEED_LEXICON: &str = include_str!("../data/pos_lexicon.tsv");

pub const NOUN: &str = "NOUN";
pub const VERB: &str = "VERB";

#[derive(Debug, Clone)]
pub struct PosTagger {
    lexicon: HashMap<String, String>,
}

impl Default for PosTagger {
    fn default() -> Self {
        Self::from_tsv(SEED_LEXICON)
    }
}

impl PosTagger {
    /// Parses `word<TAB>tag` lines; `#` starts a comment line.
    pub fn from_tsv(raw: &str) -> Self {
        let lexicon = raw
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .filter_map(|l| {
                let mut it = l.split('\t');
                Some((it.next()?.trim().to_lowercase(), it.next()?.trim().to_uppercase()))
            })
            .collect();
        Self { lexicon }
    }

    pub fn tag_word(&self, word: &str) -> &str {
        if let Some(t) = self.lexicon.get(word) {
            return t;
        }
        if word.chars().all(|c| c.is_ascii_digit()) && !word.is_empty() {
            "NUM"
        } else if word.chars().all(|c| !c.is_alphanumeric()) && !word.is_empty() {
            "PUNCT"
        } else {
            NOUN
        }
    }

    pub fn tag_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<String> {
        words
            .iter()
            .map(|w| self.tag_word(w.as_ref()).to_string())
            .collect()
    }

    pub fn tag_ids(&self, ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
        ids.iter()
            .map(|&i| self.tag_word(vocab.token(i).unwrap_or("")).to_string())
            .collect()
    }

    /// All distinct tags the tagger can emit, sorted.
    pub fn tagset(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.lexicon.values().cloned().collect();
        tags.extend(["NOUN", "NUM", "PUNCT"].map(String::from));
        tags.sort();
        tags.dedup();
        tags
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_and_fallbacks() {
        let t = PosTagger::default();
        assert_eq!(t.tag_words(&["birds", "eat", "the", "worms"]), ["NOUN", "VERB", "DET", "NOUN"]);
        assert_eq!(t.tag_word("zyzzyva"), "NOUN");
        assert_eq!(t.tag_word("42"), "NUM");
        assert_eq!(t.tag_word("."), "PUNCT");
        assert!(t.tagset().contains(&"ADJ".to_string()));
    }
}
