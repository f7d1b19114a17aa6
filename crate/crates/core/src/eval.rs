//! Control-task oracles, teacher-LM fluency, the evaluation loop and the
//! noise-strategy / objective ablation harness.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{log_sum_exp, Graph, Var};
use crate::corpus::{split_words, Corpus, TokenSequence, Vocabulary, PAD};
use crate::denoiser::{Denoiser, ModelConfig};
use crate::error::{Error, Result};
use crate::guidance::{
    candidate_rng, train_latent_classifier, ClassifierTask, ClassifierTrainConfig, ControlSpec,
    GuidanceConfig, LatentClassifier, Sampler,
};
use crate::importance::bucketize_scores;
use crate::nn::{accumulate, clip_grads, scale_grads, AdamConfig, AdamW, Block, LayerNorm, Linear, ParamSet};
use crate::pos::PosTagger;
use crate::schedule::ScheduleConfig;
use crate::strategy::{MaskPlanner, NoiseStrategy};
use crate::tensor::{Matrix, Real};
use crate::training::{train, Objective, TrainConfig};

fn check_pairs(outputs: usize, specs: usize) -> Result<()> {
    if outputs != specs {
        return Err(Error::Shape(format!("{outputs} outputs for {specs} targets")));
    }
    if outputs == 0 {
        return Err(Error::EmptyOutputs);
    }
    Ok(())
}

fn fraction(hits: usize, n: usize) -> f64 {
    hits as f64 / n as f64
}

/// Fraction of outputs whose word count is within 2 of the target.
pub fn length_accuracy<S: AsRef<str>>(outputs: &[Vec<S>], targets: &[usize]) -> Result<f64> {
    check_pairs(outputs.len(), targets.len())?;
    let hits = outputs
        .iter()
        .zip(targets)
        .filter(|(o, &t)| o.len().abs_diff(t) <= 2)
        .count();
    Ok(fraction(hits, outputs.len()))
}

/// Whether the words of `value` occur contiguously in `words`.
pub fn mentions<S: AsRef<str>>(words: &[S], value: &str) -> bool {
    let needle = split_words(value);
    if needle.is_empty() {
        return false;
    }
    words
        .windows(needle.len())
        .any(|w| w.iter().zip(&needle).all(|(a, b)| a.as_ref() == b))
}

/// Fraction of outputs mentioning their target value verbatim.
pub fn content_accuracy<S: AsRef<str>>(outputs: &[Vec<S>], values: &[String]) -> Result<f64> {
    check_pairs(outputs.len(), values.len())?;
    let hits = outputs
        .iter()
        .zip(values)
        .filter(|(o, v)| mentions(o, v))
        .count();
    Ok(fraction(hits, outputs.len()))
}

/// Fraction of outputs whose tag sequence equals the target exactly.
pub fn pos_accuracy<S: AsRef<str>>(
    outputs: &[Vec<S>],
    tags: &[Vec<String>],
    tagger: &PosTagger,
) -> Result<f64> {
    check_pairs(outputs.len(), tags.len())?;
    let hits = outputs
        .iter()
        .zip(tags)
        .filter(|(o, t)| tagger.tag_words(o) == **t)
        .count();
    Ok(fraction(hits, outputs.len()))
}

/// Autoregressive scorer over token ids.
pub trait TeacherLm {
    fn vocab_size(&self) -> usize;

    /// `ln p(ids[i] | ids[..i])` for every position.
    fn log_probs(&self, ids: &[u32]) -> Result<Vec<f64>>;
}

/// Assigns `1 / V` to every token.
#[derive(Debug, Clone, Copy)]
pub struct UniformTeacher {
    pub vocab_size: usize,
}

impl TeacherLm for UniformTeacher {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn log_probs(&self, ids: &[u32]) -> Result<Vec<f64>> {
        Ok(vec![-(self.vocab_size as f64).ln(); ids.len()])
    }
}

/// `exp` of the mean per-token negative log-likelihood over all non-PAD
/// output tokens.
pub fn fluency_perplexity(outputs: &[TokenSequence], teacher: &dyn TeacherLm) -> Result<f64> {
    let (mut nll, mut n) = (0.0, 0usize);
    for o in outputs {
        let ids: Vec<u32> = o.ids.iter().copied().filter(|&i| i != PAD).collect();
        if ids.is_empty() {
            continue;
        }
        TokenSequence::from_ids(ids.clone()).check_ids(teacher.vocab_size())?;
        let lp = teacher.log_probs(&ids)?;
        nll -= lp.iter().sum::<f64>();
        n += ids.len();
    }
    if n == 0 {
        return Err(Error::EmptyOutputs);
    }
    let ppl = (nll / n as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite("perplexity"));
    }
    Ok(ppl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 2,
            heads: 2,
            steps: 400,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Small causal transformer. The first input position carries PAD as a
/// start symbol.
#[derive(Debug, Clone)]
pub struct TransformerTeacher {
    pub vocab_size: usize,
    pub max_len: usize,
    params: ParamSet<f32>,
    embedding: usize,
    position: usize,
    blocks: Vec<Block>,
    ln: LayerNorm,
    readout: Linear,
}

impl TransformerTeacher {
    pub fn new(vocab_size: usize, max_len: usize, config: &TeacherConfig) -> Result<Self> {
        if config.hidden == 0 || config.heads == 0 || !config.hidden.is_multiple_of(config.heads) {
            return Err(Error::Config("teacher hidden must be a positive multiple of heads".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let mut ps = ParamSet::default();
        let embedding = ps.add("embedding", Matrix::randn(vocab_size, h, 0.1, &mut rng));
        let position = ps.add("position", Matrix::randn(max_len, h, 0.02, &mut rng));
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut ps, &format!("block{i}"), h, config.heads, 2 * h, &mut rng))
            .collect();
        let ln = LayerNorm::new(&mut ps, "ln", h);
        let readout = Linear::new(&mut ps, "readout", h, vocab_size, 1.0 / (h as f64).sqrt(), &mut rng);
        Ok(Self {
            vocab_size,
            max_len,
            params: ps,
            embedding,
            position,
            blocks,
            ln,
            readout,
        })
    }

    /// Trains on `corpus` with next-token cross-entropy.
    pub fn fit(corpus: &Corpus, max_len: usize, config: &TeacherConfig) -> Result<Self> {
        let data: Vec<&TokenSequence> = corpus.sentences.iter().filter(|s| !s.is_empty()).collect();
        if data.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut lm = Self::new(corpus.vocab_size(), max_len, config)?;
        let mut opt = AdamW::new(
            &lm.params,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7EAC);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0;
        for _ in 0..config.steps {
            let mut grads = vec![None; lm.params.tensors.len()];
            for _ in 0..config.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let ids = &data[order[cursor]].ids;
                cursor += 1;
                let ids = &ids[..ids.len().min(max_len)];
                let mut g = Graph::new(&lm.params.tensors);
                let logits = lm.logits_graph(&mut g, ids);
                let loss = g.cross_entropy(logits, ids, &vec![1.0; ids.len()]);
                if !g.scalar(loss).is_finite() {
                    return Err(Error::NonFinite("teacher loss"));
                }
                accumulate(&mut grads, g.backward(loss).into_params());
            }
            scale_grads(&mut grads, 1.0 / config.batch_size as f64);
            clip_grads(&mut grads, 1.0);
            opt.step(&mut lm.params, &grads, config.lr);
        }
        Ok(lm)
    }

    fn logits_graph(&self, g: &mut Graph<f32>, ids: &[u32]) -> Var {
        let mut inputs = Vec::with_capacity(ids.len());
        inputs.push(PAD);
        inputs.extend_from_slice(&ids[..ids.len() - 1]);
        let table = g.param(self.embedding);
        let x = g.gather(table, &inputs);
        let pos_table = g.param(self.position);
        let pos_ids: Vec<u32> = (0..ids.len() as u32).collect();
        let pos = g.gather(pos_table, &pos_ids);
        let mut h = g.add(x, pos);
        for b in &self.blocks {
            h = b.forward(g, h, true, &mut None);
        }
        let n = self.ln.forward(g, h);
        self.readout.forward(g, n)
    }
}

impl TeacherLm for TransformerTeacher {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn log_probs(&self, ids: &[u32]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        if ids.len() > self.max_len {
            return Err(Error::Shape(format!(
                "sequence of length {} exceeds teacher max_len {}",
                ids.len(),
                self.max_len
            )));
        }
        let mut g = Graph::new(&self.params.tensors);
        let logits = self.logits_graph(&mut g, ids);
        let m = g.value(logits);
        Ok(ids
            .iter()
            .enumerate()
            .map(|(i, &w)| (m.get(i, w as usize) - log_sum_exp(m.row(i))) as f64)
            .collect())
    }
}

/// One control target: the control and the sequence length to sample at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    #[serde(with = "control_string")]
    pub control: ControlSpec,
    pub length: usize,
}

mod control_string {
    use super::ControlSpec;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(c: &ControlSpec, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(c)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ControlSpec, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Length,
    Content,
    Pos,
    Unconditional,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Length => "length",
            Task::Content => "content",
            Task::Pos => "pos",
            Task::Unconditional => "unconditional",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "length" => Ok(Task::Length),
            "content" => Ok(Task::Content),
            "pos" => Ok(Task::Pos),
            "unconditional" => Ok(Task::Unconditional),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

/// Up to `n` targets read off evenly spaced sentences of `corpus`.
/// Content targets use attribute `field`; sentences without it are skipped.
pub fn targets_from_corpus(
    corpus: &Corpus,
    vocab: &Vocabulary,
    tagger: &PosTagger,
    task: Task,
    field: &str,
    n: usize,
) -> Result<Vec<Target>> {
    let eligible: Vec<usize> = (0..corpus.len())
        .filter(|&i| task != Task::Content || corpus.attributes[i].contains_key(field))
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoLabels(format!("no sentence usable for {task} targets")));
    }
    let n = n.min(eligible.len());
    Ok((0..n)
        .map(|k| {
            let i = eligible[k * eligible.len() / n];
            let d = &corpus.sentences[i];
            let length = d.ids.iter().filter(|&&w| w != PAD).count();
            let control = match task {
                Task::Length | Task::Unconditional => ControlSpec::Length { target: length },
                Task::Content => ControlSpec::Content {
                    field: field.to_string(),
                    value: corpus.attributes[i][field].to_lowercase(),
                },
                Task::Pos => ControlSpec::Pos {
                    tags: tagger.tag_ids(&d.ids, vocab),
                },
            };
            Target { control, length }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub targets: usize,
    /// Candidates drawn per target.
    pub samples: usize,
    /// Score only the MBR choice per target instead of every candidate.
    pub mbr: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            targets: 20,
            samples: 5,
            mbr: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub accuracy: f64,
    pub fluency: f64,
    pub samples: usize,
    pub config_hash: String,
}

/// Hex SHA-256 of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(Sha256::digest(json).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Everything an evaluation run needs besides the model.
pub struct EvalContext<'a, F: Real> {
    pub sampler: &'a Sampler<'a, F>,
    pub classifier: Option<&'a LatentClassifier<F>>,
    pub vocab: &'a Vocabulary,
    pub tagger: &'a PosTagger,
    pub teacher: &'a dyn TeacherLm,
}

/// Samples every target and scores the outputs with the task oracle and
/// the teacher. Returns the report and the scored outputs.
pub fn evaluate<F: Real>(
    ctx: &EvalContext<'_, F>,
    task: Task,
    targets: &[Target],
    config: &EvalConfig,
    hash: String,
) -> Result<(EvalReport, Vec<TokenSequence>)> {
    if targets.is_empty() {
        return Err(Error::EmptyOutputs);
    }
    let sampler = ctx.sampler.with_config(GuidanceConfig {
        samples: config.samples,
        ..ctx.sampler.config
    })?;
    let mut outputs = Vec::new();
    let mut scored: Vec<&Target> = Vec::new();
    for (k, target) in targets.iter().enumerate() {
        let control = (task != Task::Unconditional).then_some(&target.control);
        let seed = config.seed.wrapping_add(k as u64);
        if config.mbr {
            let (best, _) = sampler.sample_mbr(target.length, ctx.classifier, control, seed)?;
            outputs.push(best);
            scored.push(target);
        } else {
            for s in 0..config.samples as u64 {
                let out = sampler.sample(target.length, ctx.classifier, control, &mut candidate_rng(seed, s))?;
                outputs.push(out);
                scored.push(target);
            }
        }
    }
    let words: Vec<Vec<String>> = outputs
        .iter()
        .map(|o| split_words(&ctx.vocab.detokenize(&o.ids)))
        .collect();
    let accuracy = match task {
        Task::Length | Task::Unconditional => {
            let lens: Vec<usize> = scored.iter().map(|t| t.length).collect();
            length_accuracy(&words, &lens)?
        }
        Task::Content => {
            let values = scored
                .iter()
                .map(|t| match &t.control {
                    ControlSpec::Content { value, .. } => Ok(value.clone()),
                    c => Err(Error::InvalidControl(format!("{c} is not a content target"))),
                })
                .collect::<Result<Vec<_>>>()?;
            content_accuracy(&words, &values)?
        }
        Task::Pos => {
            let tags = scored
                .iter()
                .map(|t| match &t.control {
                    ControlSpec::Pos { tags } => Ok(tags.clone()),
                    c => Err(Error::InvalidControl(format!("{c} is not a pos target"))),
                })
                .collect::<Result<Vec<_>>>()?;
            pos_accuracy(&words, &tags, ctx.tagger)?
        }
    };
    let fluency = fluency_perplexity(&outputs, ctx.teacher)?;
    Ok((
        EvalReport {
            task,
            accuracy,
            fluency,
            samples: outputs.len(),
            config_hash: hash,
        },
        outputs,
    ))
}

/// Reverse-step index (0 = first step, at `t = T`) from which each
/// position keeps its final token. `trace[k]` holds the tokens after step
/// `k`.
pub fn settle_steps(trace: &[Vec<u32>]) -> Vec<usize> {
    let Some(last) = trace.last() else {
        return Vec::new();
    };
    (0..last.len())
        .map(|i| {
            let mut k = trace.len() - 1;
            while k > 0 && trace[k - 1][i] == last[i] {
                k -= 1;
            }
            k
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EasyFirstReport {
    pub sentences: usize,
    /// Mean settle step of tokens outside the top-importance bucket.
    pub low_mean: f64,
    /// Mean settle step of the top-importance bucket.
    pub top_mean: f64,
}

impl EasyFirstReport {
    pub fn holds(&self) -> bool {
        self.low_mean < self.top_mean
    }
}

/// Samples `n` unconditional sentences (lengths cycled from the planner's
/// corpus) and compares when low- and top-importance positions settle.
/// Importance is scored on the final output.
pub fn easy_first<F: Real>(
    sampler: &Sampler<'_, F>,
    planner: &MaskPlanner<'_>,
    n: usize,
    seed: u64,
) -> Result<EasyFirstReport> {
    let corpus = planner.corpus;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut low, mut top) = (Vec::new(), Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n {
        let l = corpus.sentences[k % corpus.len()].len();
        let mut trace = Vec::with_capacity(sampler.schedule.steps());
        let out = sampler.run(l, None, None, &mut rng, |_, s| {
            trace.push(s.tokens.clone());
            Ok(())
        })?;
        let settle = settle_steps(&trace);
        let Some(scores) = planner.scores(&out, &mut rng)? else {
            continue;
        };
        let freq: Vec<u64> = out
            .ids
            .iter()
            .map(|&w| corpus.token_frequency.get(w as usize).copied().unwrap_or(0))
            .collect();
        let m = planner.schedule.buckets.min(l);
        if m < 2 {
            continue;
        }
        let b = bucketize_scores(&scores, &freq, m)?;
        for (i, &s) in settle.iter().enumerate() {
            if b.bucket[i] == 1 {
                top.push(s as f64);
            } else {
                low.push(s as f64);
            }
        }
    }
    if low.is_empty() || top.is_empty() {
        return Err(Error::EmptyOutputs);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EasyFirstReport {
        sentences: n,
        low_mean: mean(&low),
        top_mean: mean(&top),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub classifier: ClassifierTrainConfig,
    pub teacher: TeacherConfig,
    pub eval: EvalConfig,
    /// Attribute used for the content-control task.
    pub field: String,
    /// Cells trained concurrently.
    pub jobs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            teacher: TeacherConfig::default(),
            eval: EvalConfig::default(),
            field: "food".into(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellResult {
    Ok {
        report: EvalReport,
        final_loss: f64,
        classifier_accuracy: f64,
    },
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub strategy: NoiseStrategy,
    pub objective: Objective,
    pub result: CellResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub strategies: Vec<NoiseStrategy>,
    pub objectives: Vec<Objective>,
    /// Row-major: strategies in report order, objectives within a row.
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, s: NoiseStrategy, o: Objective) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.strategy == s && c.objective == o)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table: one row per strategy, accuracy and perplexity
    /// per objective.
    pub fn to_table(&self) -> String {
        let label_w = self
            .strategies
            .iter()
            .map(|s| s.label().len())
            .max()
            .unwrap_or(0)
            .max("Noise".len());
        let mut out = format!("{:<label_w$}", "Noise");
        for o in &self.objectives {
            let _ = write!(out, " | {:>8} {:>8}", format!("{} acc", o.label()), format!("{} ppl", o.label()));
        }
        out.push('\n');
        out.push_str(&"-".repeat(out.len() - 1));
        out.push('\n');
        for s in &self.strategies {
            let _ = write!(out, "{:<label_w$}", s.label());
            for o in &self.objectives {
                let cell = match self.cell(*s, *o).map(|c| &c.result) {
                    Some(CellResult::Ok { report, .. }) => {
                        format!(" | {:>8.1} {:>8.2}", 100.0 * report.accuracy, report.fluency)
                    }
                    Some(CellResult::Failed { .. }) => format!(" | {:>8} {:>8}", "failed", "-"),
                    None => format!(" | {:>8} {:>8}", "-", "-"),
                };
                out.push_str(&cell);
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates one model per (strategy, objective) cell with
/// shared seeds. Rows follow the canonical strategy order and columns the
/// canonical objective order regardless of input order. A failing cell is
/// recorded and the sweep continues.
pub fn run_ablation(
    train_corpus: &Corpus,
    valid: &Corpus,
    vocab: &Vocabulary,
    tagger: &PosTagger,
    strategies: &[NoiseStrategy],
    objectives: &[Objective],
    config: &AblationConfig,
) -> Result<AblationReport> {
    if strategies.is_empty() || objectives.is_empty() {
        return Err(Error::Config("ablation needs at least one strategy and one objective".into()));
    }
    let strategies: Vec<NoiseStrategy> = NoiseStrategy::ALL
        .into_iter()
        .filter(|s| strategies.contains(s))
        .collect();
    let objectives: Vec<Objective> = Objective::ALL
        .into_iter()
        .filter(|o| objectives.contains(o))
        .collect();
    let mut mc = config.model;
    mc.vocab_size = vocab.len();
    mc.steps = config.schedule.steps;
    mc.validate()?;
    let schedule = config.schedule.build()?;
    let targets = targets_from_corpus(valid, vocab, tagger, Task::Content, &config.field, config.eval.targets)?;
    let teacher = TransformerTeacher::fit(valid, mc.max_len, &config.teacher)?;
    let sweep_hash = config_hash(config)?;

    let run_cell = |strategy: NoiseStrategy, objective: Objective| -> Result<CellResult> {
        let planner = MaskPlanner {
            corpus: train_corpus,
            vocab,
            tagger,
            schedule: config.schedule,
            strategy,
        };
        let tc = TrainConfig {
            strategy,
            objective,
            checkpoint_every: 0,
            ..config.train.clone()
        };
        let mut model = Denoiser::<f32>::new(mc, tc.seed)?;
        let log = train(&mut model, &planner, &schedule, &tc, |_, _| Ok(()))?;
        let final_loss = log.last().map_or(f64::NAN, |r| r.loss);
        let (clf, classifier_accuracy) = train_latent_classifier(
            &model,
            &planner,
            &schedule,
            tagger,
            vocab,
            &ClassifierTask::Content(config.field.clone()),
            &config.classifier,
        )?;
        let sampler = Sampler::new(&model, &schedule, Some(&planner), config.guidance)?;
        let ctx = EvalContext {
            sampler: &sampler,
            classifier: Some(&clf),
            vocab,
            tagger,
            teacher: &teacher,
        };
        let hash = config_hash(&(config, strategy, objective))?;
        let (report, _) = evaluate(&ctx, Task::Content, &targets, &config.eval, hash)?;
        Ok(CellResult::Ok {
            report,
            final_loss,
            classifier_accuracy,
        })
    };
    let settle = |r: Result<CellResult>| {
        r.unwrap_or_else(|e| CellResult::Failed {
            reason: format!("{}: {e}", e.kind()),
        })
    };

    let grid: Vec<(NoiseStrategy, Objective)> = strategies
        .iter()
        .flat_map(|&s| objectives.iter().map(move |&o| (s, o)))
        .collect();
    let jobs = config.jobs.max(1);
    let mut results: Vec<Option<CellResult>> = vec![None; grid.len()];
    for (chunk_ix, chunk) in grid.chunks(jobs).enumerate() {
        let done: Vec<CellResult> = if jobs == 1 {
            chunk.iter().map(|&(s, o)| settle(run_cell(s, o))).collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&(s, o)| scope.spawn(move || settle(run_cell(s, o))))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join().unwrap_or_else(|_| CellResult::Failed {
                            reason: "panic: cell worker panicked".into(),
                        })
                    })
                    .collect()
            })
        };
        for (k, r) in done.into_iter().enumerate() {
            results[chunk_ix * jobs + k] = Some(r);
        }
    }
    let cells = grid
        .into_iter()
        .zip(results)
        .map(|((strategy, objective), r)| AblationCell {
            strategy,
            objective,
            result: r.expect("every cell ran"),
        })
        .collect();
    Ok(AblationReport {
        config_hash: sweep_hash,
        strategies,
        objectives,
        cells,
    })
}
