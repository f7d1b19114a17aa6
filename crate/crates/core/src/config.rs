//! Run configuration: a TOML file with one section per module config,
//! overridden by command-line flags and echoed as JSON next to outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_MAX_LEN;
use crate::denoiser::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, TeacherConfig};
use crate::guidance::{ClassifierTrainConfig, GuidanceConfig};
use crate::schedule::ScheduleConfig;
use crate::strategy::NoiseStrategy;
use crate::training::{Objective, TrainConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MASKED_DIFFUSE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub min_count: usize,
    pub max_len: usize,
    /// Attribute used by content-control tasks.
    pub field: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: PathBuf::from("data/train.jsonl"),
            valid: PathBuf::from("data/valid.jsonl"),
            min_count: 1,
            max_len: DEFAULT_MAX_LEN,
            field: "food".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub classifier: ClassifierTrainConfig,
    pub teacher: TeacherConfig,
    pub eval: EvalConfig,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub diffusion_steps: Option<usize>,
    pub strategy: Option<NoiseStrategy>,
    pub objective: Option<Objective>,
    pub samples: Option<usize>,
    pub lambda: Option<f64>,
    pub k: Option<usize>,
    pub targets: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(raw: &str) -> Result<Self> {
        toml::from_str(raw).map_err(|e| Error::Config(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&raw)
    }

    /// Applies flags, propagates the seed and shared sizes into every
    /// section and validates the result.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        macro_rules! set {
            ($($dst:expr => $src:expr),+ $(,)?) => {
                $(if let Some(v) = $src.clone() { $dst = v; })+
            };
        }
        set!(
            self.seed => o.seed,
            self.data.train => o.train_path,
            self.data.valid => o.valid_path,
            self.train.steps => o.steps,
            self.train.batch_size => o.batch_size,
            self.train.lr => o.lr,
            self.model.hidden => o.hidden,
            self.model.layers => o.layers,
            self.schedule.steps => o.diffusion_steps,
            self.train.strategy => o.strategy,
            self.train.objective => o.objective,
            self.guidance.samples => o.samples,
            self.guidance.lambda => o.lambda,
            self.guidance.k => o.k,
            self.eval.targets => o.targets,
        );
        if o.steps.is_some() {
            self.train.warmup = self.train.warmup.min(self.train.steps);
        }
        if o.out_dir.is_some() {
            self.out_dir = o.out_dir.clone();
        }
        self.train.seed = self.seed;
        self.classifier.seed = self.seed;
        self.teacher.seed = self.seed;
        self.eval.seed = self.seed;
        self.model.steps = self.schedule.steps;
        self.model.max_len = self.data.max_len;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.train.validate()?;
        self.guidance.validate()?;
        if self.data.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if self.data.min_count == 0 {
            return Err(Error::Config("min_count must be >= 1".into()));
        }
        Ok(())
    }

    /// Output root: explicit setting, else the environment variable, else
    /// `runs`.
    pub fn output_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the resolved config as `resolved_config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("resolved_config.json");
        fs::write(&p, self.to_json()?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}
