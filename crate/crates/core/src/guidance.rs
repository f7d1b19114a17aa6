//! Reverse-process sampling, plug-and-play classifier guidance on latents,
//! and minimum Bayes risk selection.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{Corpus, TokenSequence, Vocabulary, NUM_SPECIAL, PAD};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{clip_grads, AdamConfig, AdamW, Linear, ParamSet, TensorRecord};
use crate::pos::PosTagger;
use crate::schedule::{q_sample, MaskState, NoiseSchedule};
use crate::strategy::MaskPlanner;
use crate::tensor::{normal, Latent, Matrix, Real};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSpec {
    Length { target: usize },
    Content { field: String, value: String },
    Pos { tags: Vec<String> },
}

impl ControlSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ControlSpec::Length { .. } => "length",
            ControlSpec::Content { .. } => "content",
            ControlSpec::Pos { .. } => "pos",
        }
    }

    /// Sequence length implied by the control, if any.
    pub fn length(&self) -> Option<usize> {
        match self {
            ControlSpec::Length { target } => Some(*target),
            ControlSpec::Pos { tags } => Some(tags.len()),
            ControlSpec::Content { .. } => None,
        }
    }
}

impl FromStr for ControlSpec {
    type Err = Error;

    /// `length=7`, `content=food:Japanese`, `pos="NOUN VERB DET NOUN"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidControl(format!("{s:?}: {why}"));
        let (kind, payload) = s.split_once('=').ok_or_else(|| bad("expected kind=value"))?;
        let payload = payload.trim().trim_matches('"').trim();
        match kind.trim().to_ascii_lowercase().as_str() {
            "length" => {
                let target: usize = payload.parse().map_err(|_| bad("length is not an integer"))?;
                if target == 0 {
                    return Err(bad("length must be >= 1"));
                }
                Ok(ControlSpec::Length { target })
            }
            "content" => {
                let (field, value) = payload
                    .split_once(':')
                    .ok_or_else(|| bad("expected field:value"))?;
                let (field, value) = (field.trim(), value.trim());
                if field.is_empty() || value.is_empty() {
                    return Err(bad("empty field or value"));
                }
                Ok(ControlSpec::Content {
                    field: field.to_lowercase(),
                    value: value.to_lowercase(),
                })
            }
            "pos" => {
                let tags: Vec<String> =
                    payload.split_whitespace().map(str::to_ascii_uppercase).collect();
                if tags.is_empty() {
                    return Err(bad("empty tag sequence"));
                }
                Ok(ControlSpec::Pos { tags })
            }
            _ => Err(bad("kind must be length, content or pos")),
        }
    }
}

impl fmt::Display for ControlSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlSpec::Length { target } => write!(f, "length={target}"),
            ControlSpec::Content { field, value } => write!(f, "content={field}:{value}"),
            ControlSpec::Pos { tags } => write!(f, "pos=\"{}\"", tags.join(" ")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerUpdate {
    /// Adam-normalized steps, fresh moment state per diffusion step.
    #[default]
    Adam,
    /// Plain gradient ascent `x += eta * grad`.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseMode {
    /// `x_{t-1}` is the transition output.
    Direct,
    /// Read a clean estimate off the transition output and re-noise it to
    /// the retention level of step `t - 1`.
    #[default]
    Renoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanEstimate {
    /// Expected embedding under the predicted token distribution.
    #[default]
    Soft,
    /// Embedding of the best ordinary token.
    Hard,
}

macro_rules! snake_from_str {
    ($t:ty, $what:literal, $($name:literal => $v:expr),+) => {
        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($v),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
    };
}

snake_from_str!(InnerUpdate, "inner update", "adam" => InnerUpdate::Adam, "gradient" => InnerUpdate::Gradient);
snake_from_str!(ReverseMode, "reverse mode", "direct" => ReverseMode::Direct, "renoise" => ReverseMode::Renoise);
snake_from_str!(CleanEstimate, "clean estimate", "soft" => CleanEstimate::Soft, "hard" => CleanEstimate::Hard);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub k: usize,
    pub eta: f64,
    pub samples: usize,
    pub stochastic: bool,
    pub update: InnerUpdate,
    pub reverse: ReverseMode,
    pub estimate: CleanEstimate,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            k: 3,
            eta: 0.1,
            samples: 50,
            stochastic: false,
            update: InnerUpdate::Adam,
            reverse: ReverseMode::Renoise,
            estimate: CleanEstimate::Soft,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be a positive finite number".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be >= 1".into()));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Config("eta must be >= 0".into()));
        }
        Ok(())
    }
}

/// What a classifier predicts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierKind {
    /// One attribute field, softmax over its observed values.
    Content { field: String, classes: Vec<String> },
    /// Per-position softmax over a tag set.
    Pos { tags: Vec<String> },
}

impl ClassifierKind {
    pub fn name(&self) -> &'static str {
        match self {
            ClassifierKind::Content { .. } => "content",
            ClassifierKind::Pos { .. } => "pos",
        }
    }

    pub fn classes(&self) -> &[String] {
        match self {
            ClassifierKind::Content { classes, .. } => classes,
            ClassifierKind::Pos { tags } => tags,
        }
    }
}

/// Class indices: one for content, one per position for POS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Tags(Vec<usize>),
}

/// Small MLP over latents with the diffusion step as an extra feature.
#[derive(Debug, Clone)]
pub struct LatentClassifier<F: Real> {
    pub kind: ClassifierKind,
    pub width: usize,
    pub hidden: usize,
    pub steps: usize,
    pub params: ParamSet<F>,
    l1: Linear,
    l2: Linear,
    out: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierRecord {
    pub kind: ClassifierKind,
    pub width: usize,
    pub hidden: usize,
    pub steps: usize,
    pub tensors: Vec<TensorRecord>,
}

impl<F: Real> LatentClassifier<F> {
    pub fn new(kind: ClassifierKind, width: usize, hidden: usize, steps: usize, seed: u64) -> Result<Self> {
        if kind.classes().is_empty() {
            return Err(Error::NoLabels(format!("{} classifier without classes", kind.name())));
        }
        if width == 0 || hidden == 0 || steps == 0 {
            return Err(Error::Config("classifier dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        let s1 = (1.0 / (width + 1) as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        let l1 = Linear::new(&mut ps, "cls.l1", width + 1, hidden, s1, &mut rng);
        let l2 = Linear::new(&mut ps, "cls.l2", hidden, hidden, s2, &mut rng);
        let out = Linear::new(&mut ps, "cls.out", hidden, kind.classes().len(), s2, &mut rng);
        Ok(Self {
            kind,
            width,
            hidden,
            steps,
            params: ps,
            l1,
            l2,
            out,
        })
    }

    pub fn to_record(&self) -> ClassifierRecord {
        ClassifierRecord {
            kind: self.kind.clone(),
            width: self.width,
            hidden: self.hidden,
            steps: self.steps,
            tensors: self.params.to_records(),
        }
    }

    pub fn from_record(r: &ClassifierRecord) -> Result<Self> {
        let mut c = Self::new(r.kind.clone(), r.width, r.hidden, r.steps, 0)?;
        c.params.load_records(&r.tensors)?;
        Ok(c)
    }

    /// Label a control maps to under this classifier.
    pub fn target(&self, control: &ControlSpec) -> Result<Label> {
        let mismatch = || Error::ClassifierMismatch {
            classifier: self.kind.name(),
            control: control.kind(),
        };
        match (&self.kind, control) {
            (ClassifierKind::Content { field, classes }, ControlSpec::Content { field: f, value }) => {
                if field != f {
                    return Err(Error::InvalidControl(format!(
                        "classifier covers field {field:?}, control asks for {f:?}"
                    )));
                }
                classes
                    .iter()
                    .position(|c| c == value)
                    .map(Label::Class)
                    .ok_or_else(|| Error::InvalidControl(format!("unknown {field} value {value:?}")))
            }
            (ClassifierKind::Pos { tags }, ControlSpec::Pos { tags: want }) => want
                .iter()
                .map(|w| {
                    tags.iter()
                        .position(|t| t == w)
                        .ok_or_else(|| Error::InvalidControl(format!("unknown tag {w:?}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Label::Tags),
            _ => Err(mismatch()),
        }
    }

    /// Log-probabilities per row (content: 1 × C, POS: l × C).
    fn log_probs_graph(&self, g: &mut Graph<F>, x: Var, t: usize) -> Var {
        let l = g.value(x).rows();
        let tf = g.input(Matrix::filled(l, 1, F::of(t as f64 / self.steps as f64)));
        let z = g.concat_cols(&[x, tf]);
        let h = self.l1.forward(g, z);
        let h = g.gelu(h);
        let h = self.l2.forward(g, h);
        let h = g.gelu(h);
        let h = match self.kind {
            ClassifierKind::Content { .. } => g.mean_rows(h),
            ClassifierKind::Pos { .. } => h,
        };
        let logits = self.out.forward(g, h);
        g.log_softmax(logits)
    }

    /// `log p(label | x)` on the tape; POS sums over the shared prefix.
    pub fn log_prob_graph(&self, g: &mut Graph<F>, x: Var, t: usize, label: &Label) -> Result<Var> {
        let width = g.value(x).cols();
        if width != self.width {
            return Err(Error::Shape(format!(
                "classifier expects width {}, got {width}",
                self.width
            )));
        }
        let lp = self.log_probs_graph(g, x, t);
        let entries: Vec<(usize, usize, F)> = match (label, &self.kind) {
            (Label::Class(c), ClassifierKind::Content { .. }) => vec![(0, *c, F::one())],
            (Label::Tags(tags), ClassifierKind::Pos { .. }) => tags
                .iter()
                .take(g.value(x).rows())
                .enumerate()
                .map(|(i, &c)| (i, c, F::one()))
                .collect(),
            _ => {
                return Err(Error::ClassifierMismatch {
                    classifier: self.kind.name(),
                    control: "label",
                })
            }
        };
        Ok(g.pick(lp, &entries))
    }

    pub fn log_prob(&self, x: &Latent<F>, t: usize, control: &ControlSpec) -> Result<f64> {
        let label = self.target(control)?;
        let mut g = Graph::new(&self.params.tensors);
        let xv = g.input(x.clone());
        let lp = self.log_prob_graph(&mut g, xv, t, &label)?;
        finite(g.scalar(lp).f64(), "classifier log-probability")
    }

    /// `log p(c | x)` and its gradient with respect to `x`.
    pub fn log_prob_grad(&self, x: &Latent<F>, t: usize, control: &ControlSpec) -> Result<(f64, Latent<F>)> {
        let label = self.target(control)?;
        self.label_log_prob_grad(x, t, &label)
    }

    fn label_log_prob_grad(&self, x: &Latent<F>, t: usize, label: &Label) -> Result<(f64, Latent<F>)> {
        let mut g = Graph::new(&self.params.tensors);
        let xv = g.input(x.clone());
        let lp = self.log_prob_graph(&mut g, xv, t, label)?;
        let v = finite(g.scalar(lp).f64(), "classifier log-probability")?;
        let grads = g.backward(lp);
        let gx = grads
            .wrt(xv)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        if !gx.is_finite() {
            return Err(Error::NonFinite("classifier gradient"));
        }
        Ok((v, gx))
    }

    pub fn predict(&self, x: &Latent<F>, t: usize) -> Result<Label> {
        if x.cols() != self.width {
            return Err(Error::Shape(format!(
                "classifier expects width {}, got {}",
                self.width,
                x.cols()
            )));
        }
        let mut g = Graph::new(&self.params.tensors);
        let xv = g.input(x.clone());
        let lp = self.log_probs_graph(&mut g, xv, t);
        let best = g.value(lp).argmax_rows();
        Ok(match self.kind {
            ClassifierKind::Content { .. } => Label::Class(best[0]),
            ClassifierKind::Pos { .. } => Label::Tags(best),
        })
    }

    /// Fits on `(latent, step, label)` triples with Adam; returns the final
    /// mean training negative log-likelihood.
    pub fn fit(&mut self, data: &[Example<F>], config: &ClassifierTrainConfig) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::NoLabels("no training examples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut opt = AdamW::new(
            &self.params,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut last = f64::NAN;
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(config.batch_size.max(1)) {
                let mut grads: Vec<Option<Matrix<F>>> = vec![None; self.params.tensors.len()];
                for &i in chunk {
                    let ex = &data[i];
                    let mut g = Graph::new(&self.params.tensors);
                    let xv = g.input(ex.x.clone());
                    let lp = self.log_prob_graph(&mut g, xv, ex.t, &ex.label)?;
                    let n = match &ex.label {
                        Label::Class(_) => 1.0,
                        Label::Tags(t) => t.len().min(ex.x.rows()).max(1) as f64,
                    };
                    let loss = g.scale(lp, F::of(-1.0 / n));
                    let lv = g.scalar(loss).f64();
                    if !lv.is_finite() {
                        return Err(Error::NonFinite("classifier loss"));
                    }
                    epoch_loss += lv;
                    crate::nn::accumulate(&mut grads, g.backward(loss).into_params());
                }
                crate::nn::scale_grads(&mut grads, 1.0 / chunk.len() as f64);
                clip_grads(&mut grads, 1.0);
                opt.step(&mut self.params, &grads, config.lr);
            }
            last = epoch_loss / data.len() as f64;
        }
        Ok(last)
    }

    /// Fraction of correct labels (per token for POS).
    pub fn accuracy(&self, data: &[Example<F>]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for ex in data {
            match (self.predict(&ex.x, ex.t)?, &ex.label) {
                (Label::Class(p), Label::Class(y)) => {
                    hit += usize::from(p == *y);
                    total += 1;
                }
                (Label::Tags(p), Label::Tags(y)) => {
                    for (a, b) in p.iter().zip(y) {
                        hit += usize::from(a == b);
                        total += 1;
                    }
                }
                _ => {
                    return Err(Error::ClassifierMismatch {
                        classifier: self.kind.name(),
                        control: "label",
                    })
                }
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }
}

#[derive(Debug, Clone)]
pub struct Example<F> {
    pub x: Latent<F>,
    pub t: usize,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Noised copies drawn per sentence.
    pub draws: usize,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            draws: 4,
            holdout: 0.2,
            seed: 0,
        }
    }
}

/// Which classifier to train: `content:<field>` or `pos`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassifierTask {
    Content(String),
    Pos,
}

impl FromStr for ClassifierTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("content", f)) if !f.is_empty() => Ok(ClassifierTask::Content(f.to_lowercase())),
            None if s == "pos" => Ok(ClassifierTask::Pos),
            _ => Err(Error::Config(format!(
                "classifier task {s:?} must be content:<field> or pos"
            ))),
        }
    }
}

/// Trains a classifier on `q_sample` latents of the corpus at random steps.
/// Returns the classifier and its held-out accuracy.
pub fn train_latent_classifier<F: Real>(
    model: &Denoiser<F>,
    planner: &MaskPlanner<'_>,
    schedule: &NoiseSchedule,
    tagger: &PosTagger,
    vocab: &Vocabulary,
    task: &ClassifierTask,
    config: &ClassifierTrainConfig,
) -> Result<(LatentClassifier<F>, f64)> {
    let corpus: &Corpus = planner.corpus;
    let (kind, labels) = corpus_labels(corpus, tagger, vocab, task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut examples = Vec::new();
    for (i, label) in labels {
        let d = &corpus.sentences[i];
        let mask = planner.mask_state(d, &mut rng)?;
        let x0 = model.embed(&d.ids)?;
        for _ in 0..config.draws.max(1) {
            let t = rng.random_range(1..=schedule.steps());
            let x = q_sample(&x0, t, &mask, schedule, &mut rng)?;
            examples.push((i, Example { x, t, label: label.clone() }));
        }
    }
    // hold out whole sentences
    let mut ids: Vec<usize> = examples.iter().map(|e| e.0).collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut rng);
    let n_hold = ((ids.len() as f64 * config.holdout).round() as usize).min(ids.len().saturating_sub(1));
    let held: BTreeSet<usize> = ids[..n_hold].iter().copied().collect();
    let (test, train): (Vec<_>, Vec<_>) = examples.into_iter().partition(|e| held.contains(&e.0));
    let train: Vec<Example<F>> = train.into_iter().map(|e| e.1).collect();
    let test: Vec<Example<F>> = test.into_iter().map(|e| e.1).collect();

    let mut clf = LatentClassifier::new(kind, model.config.hidden, config.hidden, schedule.steps(), config.seed)?;
    clf.fit(&train, config)?;
    let acc = if test.is_empty() {
        clf.accuracy(&train)?
    } else {
        clf.accuracy(&test)?
    };
    Ok((clf, acc))
}

fn corpus_labels(
    corpus: &Corpus,
    tagger: &PosTagger,
    vocab: &Vocabulary,
    task: &ClassifierTask,
) -> Result<(ClassifierKind, Vec<(usize, Label)>)> {
    match task {
        ClassifierTask::Content(field) => {
            let classes: Vec<String> = corpus
                .attributes
                .iter()
                .filter_map(|a| a.get(field))
                .map(|v| v.to_lowercase())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if classes.is_empty() {
                return Err(Error::NoLabels(format!("no sentence carries attribute {field:?}")));
            }
            let index: HashMap<&str, usize> =
                classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
            let labels = corpus
                .attributes
                .iter()
                .enumerate()
                .filter_map(|(i, a)| {
                    a.get(field)
                        .map(|v| (i, Label::Class(index[v.to_lowercase().as_str()])))
                })
                .collect();
            Ok((
                ClassifierKind::Content {
                    field: field.clone(),
                    classes,
                },
                labels,
            ))
        }
        ClassifierTask::Pos => {
            let tags = tagger.tagset();
            let index: HashMap<&str, usize> =
                tags.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
            let labels = corpus
                .sentences
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let seq = tagger
                        .tag_ids(&d.ids, vocab)
                        .iter()
                        .map(|t| index[t.as_str()])
                        .collect();
                    (i, Label::Tags(seq))
                })
                .collect();
            Ok((ClassifierKind::Pos { tags }, labels))
        }
    }
}

fn finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// One unguided reverse step: the transition mean, plus `sqrt(beta_t) z`
/// in stochastic mode.
pub fn reverse_step<F: Real, R: Rng + ?Sized>(
    x_t: &Latent<F>,
    t: usize,
    model: &Denoiser<F>,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
    rng: &mut R,
) -> Result<Latent<F>> {
    let mut mu = model.transition(x_t, t)?;
    if config.stochastic {
        let sd = F::of(schedule.beta(t).sqrt());
        for v in mu.data_mut() {
            *v += sd * normal::<F, R>(rng);
        }
    }
    if !mu.is_finite() {
        return Err(Error::NonFinite("reverse step"));
    }
    Ok(mu)
}

/// Gradient of `-||x - mu||^2 / (2 beta)` with respect to `x`.
pub fn fluency_gradient<F: Real>(x: &Latent<F>, mu: &Latent<F>, beta: f64) -> Latent<F> {
    let inv = F::of(1.0 / beta);
    mu.zip_map(x, |m, v| (m - v) * inv)
}

/// `lambda * fluency + control` gradient at `x`.
pub fn guided_gradient<F: Real>(
    x: &Latent<F>,
    mu: &Latent<F>,
    beta: f64,
    lambda: f64,
    t: usize,
    classifier: &LatentClassifier<F>,
    label: &Label,
) -> Result<Latent<F>> {
    let mut grad = fluency_gradient(x, mu, beta).map(|v| v * F::of(lambda));
    let (_, gc) = classifier.label_log_prob_grad(x, t, label)?;
    grad.add_assign(&gc);
    Ok(grad)
}

/// The scalar objective whose gradient [`guided_gradient`] returns.
pub fn guided_objective<F: Real>(
    x: &Latent<F>,
    mu: &Latent<F>,
    beta: f64,
    lambda: f64,
    t: usize,
    classifier: &LatentClassifier<F>,
    control: &ControlSpec,
) -> Result<f64> {
    let sq: f64 = x
        .data()
        .iter()
        .zip(mu.data())
        .map(|(&a, &b)| (a - b).f64().powi(2))
        .sum();
    Ok(-lambda * sq / (2.0 * beta) + classifier.log_prob(x, t, control)?)
}

/// Runs `K` ascent updates on `lambda * log p(x | proposal) + log p(c | x)`
/// starting from `proposal`. Returns the proposal unchanged when there is no
/// classifier term.
#[allow(clippy::too_many_arguments)]
pub fn guide<F: Real>(
    proposal: Latent<F>,
    t: usize,
    beta: f64,
    classifier: Option<&LatentClassifier<F>>,
    control: Option<&ControlSpec>,
    config: &GuidanceConfig,
) -> Result<Latent<F>> {
    let (Some(clf), Some(control)) = (classifier, control) else {
        return Ok(proposal);
    };
    if config.k == 0 || matches!(control, ControlSpec::Length { .. }) {
        return Ok(proposal);
    }
    let label = clf.target(control)?;
    let mut x = proposal.clone();
    let n = x.data().len();
    let (mut m, mut v) = (vec![0.0f64; n], vec![0.0f64; n]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for k in 1..=config.k {
        let grad = guided_gradient(&x, &proposal, beta, config.lambda, t, clf, &label)?;
        match config.update {
            InnerUpdate::Gradient => x.axpy(F::of(config.eta), &grad),
            InnerUpdate::Adam => {
                let bc1 = 1.0 - b1.powi(k as i32);
                let bc2 = 1.0 - b2.powi(k as i32);
                for (j, (xv, &gv)) in x.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    let gv = gv.f64();
                    m[j] = b1 * m[j] + (1.0 - b1) * gv;
                    v[j] = b2 * v[j] + (1.0 - b2) * gv * gv;
                    *xv += F::of(config.eta * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps));
                }
            }
        }
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("guided step"));
    }
    Ok(x)
}

/// Direct reverse step followed by guidance around its output.
#[allow(clippy::too_many_arguments)]
pub fn guided_step<F: Real, R: Rng + ?Sized>(
    x_t: &Latent<F>,
    t: usize,
    model: &Denoiser<F>,
    schedule: &NoiseSchedule,
    classifier: Option<&LatentClassifier<F>>,
    control: Option<&ControlSpec>,
    config: &GuidanceConfig,
    rng: &mut R,
) -> Result<Latent<F>> {
    let mu = reverse_step(x_t, t, model, schedule, config, rng)?;
    guide(mu, t, schedule.beta(t), classifier, control, config)
}

/// Result of one reverse step.
#[derive(Debug, Clone)]
pub struct Step<F> {
    pub x: Latent<F>,
    /// Best non-special token per position under the step's prediction.
    pub tokens: Vec<u32>,
}

#[derive(Clone)]
/// Reverse-process driver holding the model, schedule and the embedding
/// table used for clean estimates.
pub struct Sampler<'a, F: Real> {
    pub model: &'a Denoiser<F>,
    pub schedule: &'a NoiseSchedule,
    /// Plans per-position retention from the current prediction; without
    /// one every position follows the plain schedule.
    pub planner: Option<&'a MaskPlanner<'a>>,
    pub config: GuidanceConfig,
    clean: Latent<F>,
}

impl<'a, F: Real> Sampler<'a, F> {
    pub fn new(
        model: &'a Denoiser<F>,
        schedule: &'a NoiseSchedule,
        planner: Option<&'a MaskPlanner<'a>>,
        config: GuidanceConfig,
    ) -> Result<Self> {
        config.validate()?;
        if model.config.steps != schedule.steps() {
            return Err(Error::Config(format!(
                "model T {} != schedule T {}",
                model.config.steps,
                schedule.steps()
            )));
        }
        if let Some(p) = planner {
            if p.schedule.steps != schedule.steps() {
                return Err(Error::Config(format!(
                    "planner T {} != schedule T {}",
                    p.schedule.steps,
                    schedule.steps()
                )));
            }
        }
        if model.config.vocab_size <= NUM_SPECIAL as usize {
            return Err(Error::Config("vocabulary has no ordinary tokens".into()));
        }
        Ok(Self {
            model,
            schedule,
            planner,
            config,
            clean: model.clean_table(),
        })
    }

    pub fn with_config(&self, config: GuidanceConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            ..self.clone()
        })
    }

    /// Clean-latent estimate and best ordinary token per row of `logits`.
    /// The soft estimate is the expected clean embedding, with probability
    /// on special tokens spread evenly over ordinary ones.
    pub fn clean_estimate(&self, logits: &Matrix<F>) -> (Latent<F>, Vec<u32>) {
        let (l, h) = (logits.rows(), self.clean.cols());
        let s = NUM_SPECIAL as usize;
        let mut x0 = Latent::zeros(l, h);
        let mut tokens = Vec::with_capacity(l);
        for i in 0..l {
            let row: Vec<f64> = logits.row(i).iter().map(|v| v.f64()).collect();
            let mut best = s;
            for j in s + 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            tokens.push(best as u32);
            let out = x0.row_mut(i);
            match self.config.estimate {
                CleanEstimate::Hard => out.copy_from_slice(self.clean.row(best)),
                CleanEstimate::Soft => {
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let spread = e[..s].iter().sum::<f64>() / z / (row.len() - s) as f64;
                    for (j, &ej) in e.iter().enumerate().skip(s) {
                        let p = F::of(ej / z + spread);
                        for (o, &c) in out.iter_mut().zip(self.clean.row(j)) {
                            *o += p * c;
                        }
                    }
                }
            }
        }
        (x0, tokens)
    }

    fn mask_state<R: Rng + ?Sized>(&self, tokens: &[u32], rng: &mut R) -> Result<MaskState> {
        match self.planner {
            Some(p) => p.mask_state(&TokenSequence::from_ids(tokens.to_vec()), rng),
            None => Ok(MaskState::uniform(tokens.len(), self.schedule.steps())),
        }
    }

    /// One reverse step `x_t -> x_{t-1}` including guidance.
    pub fn step<R: Rng + ?Sized>(
        &self,
        x_t: &Latent<F>,
        t: usize,
        classifier: Option<&LatentClassifier<F>>,
        control: Option<&ControlSpec>,
        rng: &mut R,
    ) -> Result<Step<F>> {
        let beta = self.schedule.beta(t);
        let (proposal, tokens) = match self.config.reverse {
            ReverseMode::Direct => {
                let mu = reverse_step(x_t, t, self.model, self.schedule, &self.config, rng)?;
                let (_, tokens) = self.clean_estimate(&self.model.project_logits(&mu)?);
                (mu, tokens)
            }
            ReverseMode::Renoise => {
                let mu = self.model.transition(x_t, t)?;
                let (x0, tokens) = self.clean_estimate(&self.model.project_logits(&mu)?);
                let mask = self.mask_state(&tokens, rng)?;
                let mut x = Latent::zeros(x_t.rows(), x_t.cols());
                for i in 0..x_t.rows() {
                    let rt = mask.retention(i, t, self.schedule);
                    let rp = mask.retention(i, t - 1, self.schedule);
                    let (var, noise) = if rt < 1.0 && self.config.stochastic {
                        let v = ((1.0 - rp) / (1.0 - rt) * (1.0 - rt / rp)).clamp(0.0, 1.0 - rp);
                        (v, true)
                    } else {
                        (0.0, false)
                    };
                    let keep = (1.0 - rp - var).max(0.0).sqrt();
                    for q in 0..x_t.cols() {
                        let c = x0.get(i, q).f64();
                        let eps = if rt < 1.0 {
                            (x_t.get(i, q).f64() - rt.sqrt() * c) / (1.0 - rt).sqrt()
                        } else {
                            0.0
                        };
                        let mut v = rp.sqrt() * c + keep * eps;
                        if noise {
                            v += var.sqrt() * normal::<f64, R>(rng);
                        }
                        x.set(i, q, F::of(v));
                    }
                }
                if !x.is_finite() {
                    return Err(Error::NonFinite("reverse step"));
                }
                (x, tokens)
            }
        };
        let x = guide(proposal, t, beta, classifier, control, &self.config)?;
        Ok(Step { x, tokens })
    }

    /// Full chain from `X_T ~ N(0, I)` with `l` positions. `observe` sees
    /// every step as `(t - 1, step)`. Returns the tokens of the final step.
    pub fn run<R: Rng + ?Sized>(
        &self,
        l: usize,
        classifier: Option<&LatentClassifier<F>>,
        control: Option<&ControlSpec>,
        rng: &mut R,
        mut observe: impl FnMut(usize, &Step<F>) -> Result<()>,
    ) -> Result<TokenSequence> {
        check_request(self.model, l, classifier, control)?;
        let mut x = Latent::randn(l, self.model.config.hidden, 1.0, rng);
        let mut tokens = Vec::new();
        for t in (1..=self.schedule.steps()).rev() {
            let step = self.step(&x, t, classifier, control, rng)?;
            observe(t - 1, &step)?;
            x = step.x;
            tokens = step.tokens;
        }
        Ok(TokenSequence::from_ids(tokens))
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        l: usize,
        classifier: Option<&LatentClassifier<F>>,
        control: Option<&ControlSpec>,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        self.run(l, classifier, control, rng, |_, _| Ok(()))
    }

    /// Draws `config.samples` candidates with independent seeds and returns
    /// the MBR choice under [`mbr_loss`] together with all candidates.
    pub fn sample_mbr(
        &self,
        l: usize,
        classifier: Option<&LatentClassifier<F>>,
        control: Option<&ControlSpec>,
        seed: u64,
    ) -> Result<(TokenSequence, Vec<TokenSequence>)> {
        let cands = (0..self.config.samples as u64)
            .map(|s| self.sample(l, classifier, control, &mut candidate_rng(seed, s)))
            .collect::<Result<Vec<_>>>()?;
        let i = mbr_select(&cands, |a, b| mbr_loss(&a.ids, &b.ids))?;
        Ok((cands[i].clone(), cands))
    }
}

/// Generator for candidate `s` of a request seeded with `seed`.
pub fn candidate_rng(seed: u64, s: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(s))
}

fn check_request<F: Real>(
    model: &Denoiser<F>,
    l: usize,
    classifier: Option<&LatentClassifier<F>>,
    control: Option<&ControlSpec>,
) -> Result<()> {
    if l == 0 || l > model.config.max_len {
        return Err(Error::InvalidControl(format!(
            "length {l} outside 1..={}",
            model.config.max_len
        )));
    }
    if let Some(ControlSpec::Pos { tags }) = control {
        if tags.len() != l {
            return Err(Error::InvalidControl(format!(
                "pos sequence of {} tags for length {l}",
                tags.len()
            )));
        }
    }
    if let (Some(c), Some(control)) = (classifier, control) {
        if !matches!(control, ControlSpec::Length { .. }) {
            c.target(control)?;
        }
    }
    Ok(())
}

/// Index minimizing the mean loss against every other candidate; ties go
/// to the lowest index.
pub fn mbr_select<T>(candidates: &[T], loss: impl Fn(&T, &T) -> f64) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let n = candidates.len();
    if n == 1 {
        return Ok(0);
    }
    let mut best = (0, f64::INFINITY);
    for (i, a) in candidates.iter().enumerate() {
        let risk = candidates
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, b)| loss(a, b))
            .sum::<f64>()
            / (n - 1) as f64;
        if risk < best.1 {
            best = (i, risk);
        }
    }
    Ok(best.0)
}

fn content(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&i| i != PAD).collect()
}

/// Sentence BLEU with unigram and bigram precision and brevity penalty.
pub fn bleu2(hyp: &[u32], reference: &[u32]) -> f64 {
    let (h, r) = (content(hyp), content(reference));
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut precisions = [0.0f64; 2];
    for (n, p) in precisions.iter_mut().enumerate() {
        let n = n + 1;
        if h.len() < n {
            return 0.0;
        }
        let mut refc: HashMap<&[u32], usize> = HashMap::new();
        for g in r.windows(n) {
            *refc.entry(g).or_default() += 1;
        }
        let mut hit = 0;
        let total = h.len() + 1 - n;
        for g in h.windows(n) {
            if let Some(c) = refc.get_mut(g) {
                if *c > 0 {
                    *c -= 1;
                    hit += 1;
                }
            }
        }
        *p = hit as f64 / total as f64;
    }
    if precisions.contains(&0.0) {
        return 0.0;
    }
    let bp = if h.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / h.len() as f64).exp()
    };
    bp * (precisions[0] * precisions[1]).sqrt()
}

/// Levenshtein distance over token ids.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Negative BLEU-2; sequences shorter than two tokens fall back to
/// normalized edit distance.
pub fn mbr_loss(a: &[u32], b: &[u32]) -> f64 {
    let (ca, cb) = (content(a), content(b));
    if ca.len() < 2 || cb.len() < 2 {
        let n = ca.len().max(cb.len()).max(1);
        return edit_distance(&ca, &cb) as f64 / n as f64;
    }
    -bleu2(&ca, &cb)
}
