//! Vocabulary, tokenizer and JSONL corpus loading.
//!
//! Tokenization lowercases the input and splits on whitespace; every
//! punctuation character becomes a token of its own. Corpus statistics
//! (document and token frequencies) are indexed by token id and feed the
//! importance scores.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
pub const NUM_SPECIAL: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const MASK_TOKEN: &str = "<mask>";
pub const UNK_TOKEN: &str = "<unk>";

/// Default maximum sequence length.
pub const DEFAULT_MAX_LEN: usize = 64;

/// Splits raw text into lowercase word and punctuation pieces.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw sentences. Words seen fewer than
    /// `min_count` times are left out and tokenize to UNK.
    ///
    /// Ids after the three specials are ordered by descending count, then
    /// lexicographically.
    pub fn build<S: AsRef<str>>(raw_sentences: &[S], min_count: usize) -> Result<Self> {
        if raw_sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for s in raw_sentences {
            for w in split_words(s.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| {
                *c >= min_count.max(1) && w != PAD_TOKEN && w != MASK_TOKEN && w != UNK_TOKEN
            })
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = [PAD_TOKEN, MASK_TOKEN, UNK_TOKEN]
            .into_iter()
            .map(String::from)
            .chain(kept.into_iter().map(|(w, _)| w));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let id_to_token: Vec<String> = tokens.into_iter().collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }

    /// Rebuilds a vocabulary from its `{token: id}` map.
    pub fn from_map(map: &BTreeMap<String, u32>) -> Result<Self> {
        let size = map.len();
        let mut id_to_token = vec![None; size];
        for (tok, &id) in map {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or(Error::TokenOutOfRange { id, size })?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary id {id}")));
            }
        }
        let id_to_token: Vec<String> = id_to_token
            .into_iter()
            .map(|t| t.ok_or_else(|| Error::Config("vocabulary ids are not contiguous".into())))
            .collect::<Result<_>>()?;
        let specials = [(PAD, PAD_TOKEN), (MASK, MASK_TOKEN), (UNK, UNK_TOKEN)];
        for (id, tok) in specials {
            if id_to_token.get(id as usize).map(String::as_str) != Some(tok) {
                return Err(Error::Config(format!("special token {tok} must have id {id}")));
            }
        }
        Ok(Self::from_tokens(id_to_token))
    }

    pub fn to_map(&self) -> BTreeMap<String, u32> {
        self.token_to_id
            .iter()
            .map(|(t, &i)| (t.clone(), i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Hex SHA-256 over the id-ordered token list; pins checkpoints to a vocabulary.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        format!("{:x}", h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_map())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> = serde_json::from_str(s)?;
        Self::from_map(&map)
    }

    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        let ids: Vec<u32> = split_words(text)
            .iter()
            .take(max_len)
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect();
        if ids.is_empty() {
            return Err(Error::EmptySentence);
        }
        Ok(TokenSequence {
            ids,
            source: text.to_string(),
        })
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    #[serde(default)]
    pub source: String,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        Self {
            ids,
            source: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks every id against the vocabulary size.
    pub fn check_ids(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&i| i as usize >= vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: vocab_size,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// One JSONL corpus line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

/// Reads a JSONL file of `{text, attributes?}` objects. Blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&raw, path)
}

pub fn parse_records(raw: &str, path: &Path) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub sentences: Vec<TokenSequence>,
    pub attributes: Vec<BTreeMap<String, String>>,
    pub split: Split,
    /// Number of sentences containing each token id.
    pub document_frequency: Vec<u32>,
    /// Total occurrences of each token id.
    pub token_frequency: Vec<u64>,
    /// Sentence count behind the statistics; equals `sentences.len()`
    /// unless built from stored statistics.
    pub documents: usize,
}

/// Corpus statistics sufficient for importance scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub document_frequency: Vec<u32>,
    pub token_frequency: Vec<u64>,
}

impl Corpus {
    pub fn from_records(
        records: &[Record],
        vocab: &Vocabulary,
        split: Split,
        max_len: usize,
    ) -> Result<Self> {
        let mut sentences = Vec::with_capacity(records.len());
        let mut attributes = Vec::with_capacity(records.len());
        for r in records {
            sentences.push(vocab.tokenize(&r.text, max_len)?);
            attributes.push(r.attributes.clone());
        }
        Ok(Self::from_sequences(sentences, attributes, vocab.len(), split))
    }

    pub fn from_texts<S: AsRef<str>>(
        texts: &[S],
        vocab: &Vocabulary,
        split: Split,
        max_len: usize,
    ) -> Result<Self> {
        let records: Vec<Record> = texts
            .iter()
            .map(|t| Record {
                text: t.as_ref().to_string(),
                attributes: BTreeMap::new(),
            })
            .collect();
        Self::from_records(&records, vocab, split, max_len)
    }

    pub fn from_sequences(
        sentences: Vec<TokenSequence>,
        attributes: Vec<BTreeMap<String, String>>,
        vocab_size: usize,
        split: Split,
    ) -> Self {
        let mut document_frequency = vec![0u32; vocab_size];
        let mut token_frequency = vec![0u64; vocab_size];
        let mut seen = vec![usize::MAX; vocab_size];
        for (d, s) in sentences.iter().enumerate() {
            for &id in &s.ids {
                let i = id as usize;
                token_frequency[i] += 1;
                if seen[i] != d {
                    seen[i] = d;
                    document_frequency[i] += 1;
                }
            }
        }
        Self {
            documents: sentences.len(),
            sentences,
            attributes,
            split,
            document_frequency,
            token_frequency,
        }
    }

    /// A sentence-free corpus carrying only stored statistics.
    pub fn from_stats(stats: CorpusStats) -> Result<Self> {
        if stats.documents == 0 {
            return Err(Error::EmptyCorpus);
        }
        if stats.document_frequency.len() != stats.token_frequency.len() {
            return Err(Error::Shape("frequency tables differ in length".into()));
        }
        Ok(Self {
            sentences: Vec::new(),
            attributes: Vec::new(),
            split: Split::Train,
            documents: stats.documents,
            document_frequency: stats.document_frequency,
            token_frequency: stats.token_frequency,
        })
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            documents: self.documents,
            document_frequency: self.document_frequency.clone(),
            token_frequency: self.token_frequency.clone(),
        }
    }

    pub fn load(path: &Path, vocab: &Vocabulary, split: Split, max_len: usize) -> Result<Self> {
        let records = read_records(path)?;
        Self::from_records(&records, vocab, split, max_len)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn total_tokens(&self) -> u64 {
        self.token_frequency.iter().sum()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_frequency.len()
    }
}
