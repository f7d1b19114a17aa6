//! Forward-process noise strategies: which token order feeds the bucket
//! split, or no staging at all for plain Gaussian diffusion.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::importance::{bucketize_scores, combine, importance};
use crate::pos::{PosTagger, NOUN, VERB};
use crate::schedule::{MaskState, ScheduleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseStrategy {
    GaussianUniform,
    RandomMask,
    MaskPos,
    MaskEntropy,
    MaskRelevancy,
    #[default]
    MaskEntropyRel,
}

impl NoiseStrategy {
    /// Report row order.
    pub const ALL: [NoiseStrategy; 6] = [
        NoiseStrategy::GaussianUniform,
        NoiseStrategy::RandomMask,
        NoiseStrategy::MaskPos,
        NoiseStrategy::MaskEntropy,
        NoiseStrategy::MaskRelevancy,
        NoiseStrategy::MaskEntropyRel,
    ];

    pub fn label(self) -> &'static str {
        match self {
            NoiseStrategy::GaussianUniform => "Gaussian",
            NoiseStrategy::RandomMask => "Random Mask",
            NoiseStrategy::MaskPos => "Mask w. POS",
            NoiseStrategy::MaskEntropy => "Mask w. Entropy",
            NoiseStrategy::MaskRelevancy => "Mask w. Rel",
            NoiseStrategy::MaskEntropyRel => "Mask w. Entropy+Rel",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            NoiseStrategy::GaussianUniform => "gaussian",
            NoiseStrategy::RandomMask => "random",
            NoiseStrategy::MaskPos => "pos",
            NoiseStrategy::MaskEntropy => "entropy",
            NoiseStrategy::MaskRelevancy => "relevancy",
            NoiseStrategy::MaskEntropyRel => "entropy-rel",
        }
    }

    /// Whether mask states must be redrawn every epoch.
    pub fn is_random(self) -> bool {
        self == NoiseStrategy::RandomMask
    }
}

impl fmt::Display for NoiseStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for NoiseStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = s.to_ascii_lowercase().replace('_', "-");
        NoiseStrategy::ALL
            .into_iter()
            .find(|x| x.key() == k)
            .or(match k.as_str() {
                "gaussian-uniform" => Some(NoiseStrategy::GaussianUniform),
                "random-mask" => Some(NoiseStrategy::RandomMask),
                "mask-pos" => Some(NoiseStrategy::MaskPos),
                "mask-entropy" => Some(NoiseStrategy::MaskEntropy),
                "rel" | "mask-relevancy" => Some(NoiseStrategy::MaskRelevancy),
                "mask-entropy-rel" => Some(NoiseStrategy::MaskEntropyRel),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown noise strategy {s:?}")))
    }
}

/// Builds per-sentence mask states for a strategy.
pub struct MaskPlanner<'a> {
    pub corpus: &'a Corpus,
    pub vocab: &'a Vocabulary,
    pub tagger: &'a PosTagger,
    pub schedule: ScheduleConfig,
    pub strategy: NoiseStrategy,
}

impl MaskPlanner<'_> {
    /// Ordering scores (higher = noised earlier); `None` means no staging.
    pub fn scores<R: Rng + ?Sized>(
        &self,
        d: &TokenSequence,
        rng: &mut R,
    ) -> Result<Option<Vec<f64>>> {
        let l = d.len();
        Ok(match self.strategy {
            NoiseStrategy::GaussianUniform => None,
            NoiseStrategy::RandomMask => {
                let mut perm: Vec<usize> = (0..l).collect();
                perm.shuffle(rng);
                Some(perm.into_iter().map(|p| p as f64).collect())
            }
            NoiseStrategy::MaskPos => Some(
                self.tagger
                    .tag_ids(&d.ids, self.vocab)
                    .iter()
                    .map(|t| match t.as_str() {
                        NOUN => 3.0,
                        VERB => 2.0,
                        _ => 1.0,
                    })
                    .collect(),
            ),
            NoiseStrategy::MaskEntropy => {
                let p = importance(d, self.corpus)?;
                Some(combine(&vec![0.0; l], &p.entropy))
            }
            NoiseStrategy::MaskRelevancy => {
                let p = importance(d, self.corpus)?;
                Some(combine(&p.tf_idf, &vec![0.0; l]))
            }
            NoiseStrategy::MaskEntropyRel => Some(importance(d, self.corpus)?.importance),
        })
    }

    pub fn mask_state<R: Rng + ?Sized>(&self, d: &TokenSequence, rng: &mut R) -> Result<MaskState> {
        let steps = self.schedule.steps;
        let Some(scores) = self.scores(d, rng)? else {
            return Ok(MaskState::uniform(d.len(), steps));
        };
        let freq: Vec<u64> = d
            .ids
            .iter()
            .map(|&w| {
                self.corpus
                    .token_frequency
                    .get(w as usize)
                    .copied()
                    .unwrap_or(0)
            })
            .collect();
        let m = self.schedule.buckets;
        let split = bucketize_scores(&scores, &freq, m.min(d.len()))?;
        Ok(MaskState::from_bucket_ids(
            &split.bucket,
            m,
            steps,
            self.schedule.staging,
        ))
    }
}
