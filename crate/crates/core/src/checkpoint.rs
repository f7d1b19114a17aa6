//! Versioned JSON checkpoints: vocabulary, configs, corpus statistics and
//! every parameter tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStats, Vocabulary};
use crate::denoiser::{Denoiser, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::TensorRecord;
use crate::schedule::ScheduleConfig;
use crate::tensor::Real;
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub vocab: BTreeMap<String, u32>,
    pub vocab_fingerprint: String,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub corpus: CorpusStats,
    /// Training step at which the snapshot was taken.
    pub step: usize,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn capture<F: Real>(
        model: &Denoiser<F>,
        vocab: &Vocabulary,
        schedule: ScheduleConfig,
        train: &TrainConfig,
        corpus: CorpusStats,
        step: usize,
    ) -> Self {
        Self {
            version: FORMAT_VERSION,
            vocab: vocab.to_map(),
            vocab_fingerprint: vocab.fingerprint(),
            model: model.config,
            schedule,
            train: train.clone(),
            corpus,
            step,
            tensors: model.params.to_records(),
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let v = Vocabulary::from_map(&self.vocab)?;
        if v.fingerprint() != self.vocab_fingerprint {
            return Err(Error::Checkpoint("vocabulary fingerprint mismatch".into()));
        }
        Ok(v)
    }

    pub fn denoiser<F: Real>(&self) -> Result<Denoiser<F>> {
        if self.model.vocab_size != self.vocab.len() {
            return Err(Error::Checkpoint(format!(
                "model vocabulary {} != stored vocabulary {}",
                self.model.vocab_size,
                self.vocab.len()
            )));
        }
        if self.model.steps != self.schedule.steps {
            return Err(Error::Checkpoint(format!(
                "model T {} != schedule T {}",
                self.model.steps, self.schedule.steps
            )));
        }
        let mut m = Denoiser::new(self.model, 0)?;
        m.params.load_records(&self.tensors)?;
        if !m.params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint =
            serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("unreadable: {e}")))?;
        if c.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (expected {FORMAT_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write then rename so readers never see a partial file
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }
}
