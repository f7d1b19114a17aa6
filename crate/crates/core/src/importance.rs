//! Word importance: tf-idf relevancy plus unigram entropy, normalized per
//! sentence and summed, then split into `m` importance buckets.
//!
//! All logarithms are natural. Negative idf (a word present in every
//! sentence) is clamped to zero.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenSequence, Vocabulary, UNK};
use crate::error::{Error, Result};

/// Default number of importance buckets.
pub const DEFAULT_BUCKETS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub ids: Vec<u32>,
    pub tf_idf: Vec<f64>,
    pub entropy: Vec<f64>,
    pub importance: Vec<f64>,
    /// Corpus token frequency of each token, used for tie-breaking.
    pub frequency: Vec<u64>,
    pub sentence_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketAssignment {
    /// 1-based bucket per position; bucket 1 holds the most important tokens.
    pub bucket: Vec<usize>,
    pub m: usize,
}

pub fn tf_idf(word: u32, sentence: &TokenSequence, corpus: &Corpus) -> Result<f64> {
    let count = sentence.ids.iter().filter(|&&w| w == word).count();
    if count == 0 {
        return Err(Error::WordNotInSentence(word));
    }
    let tf = count as f64 / sentence.len() as f64;
    let n = corpus.documents as f64;
    let df = corpus
        .document_frequency
        .get(word as usize)
        .copied()
        .unwrap_or(0) as f64;
    let idf = (n / (1.0 + df)).ln();
    Ok((tf * idf).max(0.0))
}

pub fn entropy(word: u32, corpus: &Corpus) -> Result<f64> {
    let total = corpus.total_tokens();
    if total == 0 {
        return Err(Error::ZeroFrequency);
    }
    let freq = |w: u32| corpus.token_frequency.get(w as usize).copied().unwrap_or(0);
    let f = match freq(word) {
        0 => freq(UNK),
        f => f,
    };
    if f == 0 {
        return Ok(0.0);
    }
    let p = f as f64 / total as f64;
    Ok(-p * p.ln())
}

/// Sums each score vector's normalized shares; a zero-sum vector
/// contributes `1/l` to every position instead.
pub fn combine(tf_idf: &[f64], entropy: &[f64]) -> Vec<f64> {
    let l = tf_idf.len();
    let share = |v: &[f64]| -> Vec<f64> {
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            v.iter().map(|x| x / s).collect()
        } else {
            vec![1.0 / l as f64; l]
        }
    };
    share(tf_idf)
        .into_iter()
        .zip(share(entropy))
        .map(|(a, b)| a + b)
        .collect()
}

pub fn importance(sentence: &TokenSequence, corpus: &Corpus) -> Result<ImportanceProfile> {
    if sentence.is_empty() {
        return Err(Error::EmptySentence);
    }
    let tf = sentence
        .ids
        .iter()
        .map(|&w| tf_idf(w, sentence, corpus))
        .collect::<Result<Vec<_>>>()?;
    let h = sentence
        .ids
        .iter()
        .map(|&w| entropy(w, corpus))
        .collect::<Result<Vec<_>>>()?;
    let frequency = sentence
        .ids
        .iter()
        .map(|&w| corpus.token_frequency.get(w as usize).copied().unwrap_or(0))
        .collect();
    Ok(ImportanceProfile {
        ids: sentence.ids.clone(),
        importance: combine(&tf, &h),
        tf_idf: tf,
        entropy: h,
        frequency,
        sentence_id: None,
    })
}

/// Ranks positions by `scores` descending (ties: lower `frequency`, then
/// lower position) and deals them into `m` near-equal buckets.
pub fn bucketize_scores(scores: &[f64], frequency: &[u64], m: usize) -> Result<BucketAssignment> {
    let l = scores.len();
    if m < 1 || m > l {
        return Err(Error::InvalidBucketCount { m, len: l });
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| frequency[a].cmp(&frequency[b]))
            .then_with(|| a.cmp(&b))
    });
    let base = l / m;
    let extra = l % m;
    let mut bucket = vec![0; l];
    let mut rank = 0;
    for b in 0..m {
        let size = base + usize::from(b < extra);
        for &pos in &order[rank..rank + size] {
            bucket[pos] = b + 1;
        }
        rank += size;
    }
    Ok(BucketAssignment { bucket, m })
}

pub fn bucketize(profile: &ImportanceProfile, m: usize) -> Result<BucketAssignment> {
    bucketize_scores(&profile.importance, &profile.frequency, m)
}

/// CSV dump: `position,token,tf_idf,entropy,importance,bucket`.
pub fn profile_csv(
    profile: &ImportanceProfile,
    buckets: &BucketAssignment,
    vocab: &Vocabulary,
) -> String {
    let mut out = String::from("position,token,tf_idf,entropy,importance,bucket\n");
    for i in 0..profile.ids.len() {
        let tok = vocab.token(profile.ids[i]).unwrap_or("<unk>");
        let tok = if tok.contains([',', '"']) {
            format!("\"{}\"", tok.replace('"', "\"\""))
        } else {
            tok.to_string()
        };
        let _ = writeln!(
            out,
            "{i},{tok},{:.6},{:.6},{:.6},{}",
            profile.tf_idf[i], profile.entropy[i], profile.importance[i], buckets.bucket[i]
        );
    }
    out
}
