//! End-to-end plumbing shared by the command line and the C interface:
//! data loading, training runs and checkpoint-backed sampling sessions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::corpus::{read_records, Corpus, Split, TokenSequence, Vocabulary};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::guidance::{
    candidate_rng, mbr_loss, mbr_select, ClassifierRecord, ControlSpec, GuidanceConfig,
    LatentClassifier, Sampler,
};
use crate::pos::PosTagger;
use crate::schedule::NoiseSchedule;
use crate::strategy::MaskPlanner;
use crate::training::{train, MetricRecord};

/// Vocabulary and corpora for a run. The vocabulary comes from the
/// training split only.
#[derive(Debug, Clone)]
pub struct Data {
    pub vocab: Vocabulary,
    pub train: Corpus,
    pub valid: Option<Corpus>,
}

impl Data {
    pub fn load(cfg: &DataConfig, with_valid: bool) -> Result<Self> {
        let records = read_records(&cfg.train)?;
        let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
        let vocab = Vocabulary::build(&texts, cfg.min_count)?;
        let train = Corpus::from_records(&records, &vocab, Split::Train, cfg.max_len)?;
        let valid = if with_valid {
            Some(Corpus::load(&cfg.valid, &vocab, Split::Validation, cfg.max_len)?)
        } else {
            None
        };
        Ok(Self { vocab, train, valid })
    }

    pub fn valid(&self) -> Result<&Corpus> {
        self.valid
            .as_ref()
            .ok_or_else(|| Error::Config("validation split not loaded".into()))
    }
}

/// Trains a fresh model under `cfg`. `on_step` sees every metric record
/// and may write intermediate checkpoints.
pub fn train_run(
    cfg: &RunConfig,
    data: &Data,
    tagger: &PosTagger,
    mut on_step: impl FnMut(&MetricRecord, &Denoiser<f32>) -> Result<()>,
) -> Result<(Denoiser<f32>, Vec<MetricRecord>, Checkpoint)> {
    let mut mc = cfg.model;
    mc.vocab_size = data.vocab.len();
    mc.steps = cfg.schedule.steps;
    let schedule = cfg.schedule.build()?;
    let planner = MaskPlanner {
        corpus: &data.train,
        vocab: &data.vocab,
        tagger,
        schedule: cfg.schedule,
        strategy: cfg.train.strategy,
    };
    let mut model = Denoiser::<f32>::new(mc, cfg.seed)?;
    let log = train(&mut model, &planner, &schedule, &cfg.train, &mut on_step)?;
    let ck = Checkpoint::capture(
        &model,
        &data.vocab,
        cfg.schedule,
        &cfg.train,
        data.train.stats(),
        log.len(),
    );
    Ok((model, log, ck))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub control: Option<ControlSpec>,
    /// Sequence length; taken from the control when it implies one.
    pub length: Option<usize>,
    pub samples: usize,
    /// Return only the MBR choice among the samples.
    pub mbr: bool,
    pub seed: u64,
    pub guidance: GuidanceConfig,
}

impl SampleRequest {
    pub fn resolved_length(&self) -> Result<usize> {
        let implied = self.control.as_ref().and_then(ControlSpec::length);
        match (implied, self.length) {
            (Some(a), Some(b)) if a != b => Err(Error::InvalidControl(format!(
                "length {b} conflicts with control length {a}"
            ))),
            (Some(l), _) | (None, Some(l)) => Ok(l),
            (None, None) => Err(Error::InvalidControl("a sequence length is required".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub texts: Vec<String>,
    pub sequences: Vec<TokenSequence>,
    /// Index of the MBR choice among `candidates` when MBR was requested.
    pub mbr_index: Option<usize>,
    pub candidates: Vec<TokenSequence>,
}

/// A loaded checkpoint ready for sampling.
pub struct Session {
    pub checkpoint: Checkpoint,
    pub vocab: Vocabulary,
    pub corpus: Corpus,
    pub model: Denoiser<f32>,
    pub schedule: NoiseSchedule,
    pub tagger: PosTagger,
}

impl Session {
    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        let vocab = checkpoint.vocabulary()?;
        let corpus = Corpus::from_stats(checkpoint.corpus.clone())?;
        let model = checkpoint.denoiser()?;
        let schedule = checkpoint.schedule.build()?;
        Ok(Self {
            checkpoint,
            vocab,
            corpus,
            model,
            schedule,
            tagger: PosTagger::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Planner for the strategy the model was trained with, scoring
    /// against the stored corpus statistics.
    pub fn planner(&self) -> MaskPlanner<'_> {
        MaskPlanner {
            corpus: &self.corpus,
            vocab: &self.vocab,
            tagger: &self.tagger,
            schedule: self.checkpoint.schedule,
            strategy: self.checkpoint.train.strategy,
        }
    }

    pub fn sample(
        &self,
        req: &SampleRequest,
        classifier: Option<&LatentClassifier<f32>>,
    ) -> Result<SampleOutput> {
        let l = req.resolved_length()?;
        let guided = matches!(req.control, Some(ControlSpec::Content { .. } | ControlSpec::Pos { .. }));
        if guided && classifier.is_none() {
            return Err(Error::Config("content and pos controls need a classifier".into()));
        }
        if req.samples == 0 {
            return Err(Error::Config("samples must be >= 1".into()));
        }
        let planner = self.planner();
        let sampler = Sampler::new(
            &self.model,
            &self.schedule,
            Some(&planner),
            GuidanceConfig {
                samples: req.samples,
                ..req.guidance
            },
        )?;
        let control = req.control.as_ref();
        let candidates = (0..req.samples as u64)
            .map(|s| sampler.sample(l, classifier, control, &mut candidate_rng(req.seed, s)))
            .collect::<Result<Vec<_>>>()?;
        let (sequences, mbr_index) = if req.mbr {
            let i = mbr_select(&candidates, |a, b| mbr_loss(&a.ids, &b.ids))?;
            (vec![candidates[i].clone()], Some(i))
        } else {
            (candidates.clone(), None)
        };
        Ok(SampleOutput {
            texts: sequences.iter().map(|s| self.vocab.detokenize(&s.ids)).collect(),
            sequences,
            mbr_index,
            candidates,
        })
    }
}

pub fn save_classifier(clf: &LatentClassifier<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string(&clf.to_record())?).map_err(|e| Error::io(path, e))
}

pub fn load_classifier(path: &Path) -> Result<LatentClassifier<f32>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rec: ClassifierRecord = serde_json::from_str(&raw)?;
    LatentClassifier::from_record(&rec)
}
