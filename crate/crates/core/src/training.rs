//! Diffusion objectives and the training loop.
//!
//! The cross-entropy objective at step `t` reads the predicted latent
//! `X_{t-1}` out through `f` and scores it against both the clean sentence
//! (weighted by `gamma_t = (T - t) / T`) and the masked sentence of step
//! `t - 1`. The L2 ablation regresses `X_{t-1}` onto `X_0` instead.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{Corpus, TokenSequence, PAD};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{accumulate, clip_grads, scale_grads, AdamConfig, AdamW, Dropout};
use crate::schedule::{masked_sentence, q_coefficients, MaskState, NoiseSchedule};
use crate::strategy::{MaskPlanner, NoiseStrategy};
use crate::tensor::{Latent, Matrix, Real};

pub fn gamma(t: usize, steps: usize) -> f64 {
    (steps - t) as f64 / steps as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Ce,
    L2,
}

impl Objective {
    pub const ALL: [Objective; 2] = [Objective::L2, Objective::Ce];

    pub fn label(self) -> &'static str {
        match self {
            Objective::Ce => "CE",
            Objective::L2 => "L2",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(Objective::Ce),
            "l2" => Ok(Objective::L2),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

/// Which positions the masked-sentence cross-entropy covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskedTerm {
    /// Every non-PAD position.
    #[default]
    Full,
    /// Only positions that are MASK in the target.
    MaskedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_clean: f64,
    pub ce_masked: f64,
    pub gamma: f64,
    pub t: usize,
}

/// Tape handles of one cross-entropy objective evaluation.
pub struct CeNodes {
    pub total: Var,
    pub ce_clean: Var,
    pub ce_masked: Var,
    pub gamma: f64,
}

/// Tape handles of one L2 objective evaluation.
pub struct L2Nodes {
    /// Mean squared error between `X_{t-1}` and `X_0`.
    pub mse: Var,
    /// Readout cross-entropy of the clean embedding, which trains `f`.
    pub rounding: Var,
    pub total: Var,
}

fn check_step(t: usize, steps: usize) -> Result<()> {
    if t < 1 || t > steps {
        return Err(Error::StepOutOfRange { t, lo: 1, hi: steps });
    }
    Ok(())
}

fn token_weights<F: Real>(ids: &[u32]) -> Vec<F> {
    ids.iter()
        .map(|&i| if i == PAD { F::zero() } else { F::one() })
        .collect()
}

/// `X_t` on the tape from `X_0` and a fixed standard-normal draw.
fn noised_input<F: Real>(
    g: &mut Graph<F>,
    x0: Var,
    d: &TokenSequence,
    t: usize,
    mask: &MaskState,
    schedule: &NoiseSchedule,
    noise: &Matrix<F>,
) -> Var {
    let h = noise.cols();
    let mut keep = Matrix::zeros(d.len(), h);
    let mut add = Matrix::zeros(d.len(), h);
    for (i, (k, s)) in q_coefficients(t, mask, schedule).into_iter().enumerate() {
        // PAD rows are never noised
        let (k, s) = if d.ids[i] == PAD { (1.0, 0.0) } else { (k, s) };
        for j in 0..h {
            keep.set(i, j, F::of(k));
            add.set(i, j, F::of(s) * noise.get(i, j));
        }
    }
    let keep = g.input(keep);
    let add = g.input(add);
    let scaled = g.mul(x0, keep);
    g.add(scaled, add)
}

#[allow(clippy::too_many_arguments)]
pub fn ce_loss_graph<F: Real>(
    model: &Denoiser<F>,
    g: &mut Graph<F>,
    d: &TokenSequence,
    t: usize,
    mask: &MaskState,
    schedule: &NoiseSchedule,
    noise: &Matrix<F>,
    masked_term: MaskedTerm,
    drop: Option<Dropout<'_>>,
) -> Result<CeNodes> {
    check_step(t, schedule.steps())?;
    model.check_sequence(d)?;
    let x0 = model.embed_graph(g, &d.ids);
    let xt = noised_input(g, x0, d, t, mask, schedule, noise);
    let xhat = model.transition_graph(g, xt, t, drop);
    let logits = model.logits_graph(g, xhat);

    let clean_w = token_weights::<F>(&d.ids);
    let ce_clean = g.cross_entropy(logits, &d.ids, &clean_w);

    let target = masked_sentence(d, t - 1, mask);
    let masked_w: Vec<F> = match masked_term {
        MaskedTerm::Full => clean_w,
        MaskedTerm::MaskedOnly => target
            .ids
            .iter()
            .zip(&clean_w)
            .map(|(&id, &w)| if id == crate::corpus::MASK { w } else { F::zero() })
            .collect(),
    };
    let ce_masked = g.cross_entropy(logits, &target.ids, &masked_w);

    let gm = gamma(t, schedule.steps());
    let weighted = g.scale(ce_clean, F::of(gm));
    let total = g.add(weighted, ce_masked);
    Ok(CeNodes {
        total,
        ce_clean,
        ce_masked,
        gamma: gm,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn l2_loss_graph<F: Real>(
    model: &Denoiser<F>,
    g: &mut Graph<F>,
    d: &TokenSequence,
    t: usize,
    mask: &MaskState,
    schedule: &NoiseSchedule,
    noise: &Matrix<F>,
    drop: Option<Dropout<'_>>,
) -> Result<L2Nodes> {
    check_step(t, schedule.steps())?;
    model.check_sequence(d)?;
    let x0 = model.embed_graph(g, &d.ids);
    let xt = noised_input(g, x0, d, t, mask, schedule, noise);
    let xhat = model.transition_graph(g, xt, t, drop);
    let diff = g.sub(xhat, x0);
    // zero PAD rows before averaging over the remaining entries
    let w = token_weights::<F>(&d.ids);
    let live = w.iter().filter(|&&x| x > F::zero()).count();
    let h = model.config.hidden;
    let rowmask = Matrix::from_vec(
        d.len(),
        h,
        w.iter().flat_map(|&x| std::iter::repeat_n(x, h)).collect(),
    )?;
    let rowmask = g.input(rowmask);
    let diff = g.mul(diff, rowmask);
    let sq = g.mul(diff, diff);
    let s = g.sum(sq);
    let mse = g.scale(s, F::one() / F::of((live.max(1) * h) as f64));
    let logits0 = model.logits_graph(g, x0);
    let rounding = g.cross_entropy(logits0, &d.ids, &w);
    let total = g.add(mse, rounding);
    Ok(L2Nodes {
        mse,
        rounding,
        total,
    })
}

/// Evaluates the cross-entropy objective with fresh noise from `rng`.
pub fn diffusion_ce_loss<F: Real, R: Rng + ?Sized>(
    d: &TokenSequence,
    t: usize,
    model: &Denoiser<F>,
    schedule: &NoiseSchedule,
    mask: &MaskState,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let noise = Latent::randn(d.len(), model.config.hidden, 1.0, rng);
    let mut g = model.graph();
    let n = ce_loss_graph(model, &mut g, d, t, mask, schedule, &noise, MaskedTerm::Full, None)?;
    let out = LossBreakdown {
        total: g.scalar(n.total).f64(),
        ce_clean: g.scalar(n.ce_clean).f64(),
        ce_masked: g.scalar(n.ce_masked).f64(),
        gamma: n.gamma,
        t,
    };
    if !out.total.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss"));
    }
    Ok(out)
}

/// Mean squared error between `X_{t-1}` and `X_0` with fresh noise.
pub fn l2_loss<F: Real, R: Rng + ?Sized>(
    d: &TokenSequence,
    t: usize,
    model: &Denoiser<F>,
    schedule: &NoiseSchedule,
    mask: &MaskState,
    rng: &mut R,
) -> Result<f64> {
    let noise = Latent::randn(d.len(), model.config.hidden, 1.0, rng);
    let mut g = model.graph();
    let n = l2_loss_graph(model, &mut g, d, t, mask, schedule, &noise, None)?;
    let v = g.scalar(n.mse).f64();
    if !v.is_finite() {
        return Err(Error::NonFinite("l2 loss"));
    }
    Ok(v)
}

/// Plain mean squared error over all entries.
pub fn mse<F: Real>(a: &Matrix<F>, b: &Matrix<F>) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).f64().powi(2))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub objective: Objective,
    pub strategy: NoiseStrategy,
    pub masked_term: MaskedTerm,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 3e-4,
            batch_size: 32,
            warmup: 1_000,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 0,
            objective: Objective::Ce,
            strategy: NoiseStrategy::MaskEntropyRel,
            masked_term: MaskedTerm::Full,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.lr < 0.0 || self.clip_norm < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr, clip_norm and weight_decay must be >= 0".into()));
        }
        if self.warmup > self.steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds steps {}",
                self.warmup, self.steps
            )));
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 || step >= self.warmup {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup as f64
        }
    }
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Batch mean of the clean-sentence term (`gamma * ce_clean` for CE,
    /// the MSE for L2).
    pub clean_term: f64,
    /// Batch mean of the masked-sentence term (rounding CE for L2).
    pub masked_term: f64,
    pub grad_norm: f64,
    /// Breakdown of the first sequence in the batch (CE only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<LossBreakdown>,
}

/// One sequence's objective and parameter gradients.
struct SeqResult<F> {
    total: f64,
    clean: f64,
    masked: f64,
    probe: Option<LossBreakdown>,
    grads: Vec<Option<Matrix<F>>>,
}

#[allow(clippy::too_many_arguments)]
fn sequence_step<F: Real>(
    model: &Denoiser<F>,
    d: &TokenSequence,
    mask: &MaskState,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SeqResult<F>> {
    let t = rng.random_range(1..=schedule.steps());
    let noise = Latent::randn(d.len(), model.config.hidden, 1.0, rng);
    let p = model.config.dropout;
    let mut g = model.graph();
    let drop = (p > 0.0).then_some(Dropout { p, rng: &mut *rng });
    match config.objective {
        Objective::Ce => {
            let n = ce_loss_graph(
                model,
                &mut g,
                d,
                t,
                mask,
                schedule,
                &noise,
                config.masked_term,
                drop,
            )?;
            let ce_clean = g.scalar(n.ce_clean).f64();
            let ce_masked = g.scalar(n.ce_masked).f64();
            let total = g.scalar(n.total).f64();
            let grads = g.backward(n.total).into_params();
            Ok(SeqResult {
                total,
                clean: n.gamma * ce_clean,
                masked: ce_masked,
                probe: Some(LossBreakdown {
                    total,
                    ce_clean,
                    ce_masked,
                    gamma: n.gamma,
                    t,
                }),
                grads,
            })
        }
        Objective::L2 => {
            let n = l2_loss_graph(model, &mut g, d, t, mask, schedule, &noise, drop)?;
            let total = g.scalar(n.total).f64();
            let clean = g.scalar(n.mse).f64();
            let masked = g.scalar(n.rounding).f64();
            let grads = g.backward(n.total).into_params();
            Ok(SeqResult {
                total,
                clean,
                masked,
                probe: None,
                grads,
            })
        }
    }
}

/// Trains `model` in place. `on_step` sees every metrics record together
/// with the updated model (for logging and periodic checkpoints).
pub fn train<F: Real>(
    model: &mut Denoiser<F>,
    planner: &MaskPlanner<'_>,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    mut on_step: impl FnMut(&MetricRecord, &Denoiser<F>) -> Result<()>,
) -> Result<Vec<MetricRecord>> {
    config.validate()?;
    let corpus: &Corpus = planner.corpus;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if schedule.steps() != model.config.steps {
        return Err(Error::Config(format!(
            "schedule has T = {}, model expects {}",
            schedule.steps(),
            model.config.steps
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(
        &model.params,
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
    );

    let plan = |rng: &mut ChaCha8Rng| -> Result<Vec<MaskState>> {
        corpus
            .sentences
            .iter()
            .map(|d| planner.mask_state(d, rng))
            .collect()
    };
    let mut masks = plan(&mut rng)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
                if planner.strategy.is_random() {
                    masks = plan(&mut rng)?;
                }
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let mut grads: Vec<Option<Matrix<F>>> = vec![None; model.params.tensors.len()];
        let (mut loss, mut clean, mut masked) = (0.0, 0.0, 0.0);
        let mut probe = None;
        for &i in &batch {
            let r = sequence_step(model, &corpus.sentences[i], &masks[i], schedule, config, &mut rng)?;
            if !r.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("non-finite loss on sentence {i}"),
                });
            }
            loss += r.total;
            clean += r.clean;
            masked += r.masked;
            probe = probe.or(r.probe);
            accumulate(&mut grads, r.grads);
        }
        let b = batch.len() as f64;
        scale_grads(&mut grads, 1.0 / b);
        let grad_norm = clip_grads(&mut grads, config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite gradient norm".into(),
            });
        }
        let lr = config.lr_at(step);
        opt.step(&mut model.params, &grads, lr);
        if !model.params.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite parameters after update".into(),
            });
        }
        let rec = MetricRecord {
            step,
            loss: loss / b,
            lr,
            clean_term: clean / b,
            masked_term: masked / b,
            grad_norm,
            probe,
        };
        on_step(&rec, model)?;
        log.push(rec);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, Vocabulary};
    use crate::denoiser::ModelConfig;
    use crate::pos::PosTagger;
    use crate::schedule::ScheduleConfig;

    fn micro(vocab: usize, steps: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_len: 16,
            steps,
            dropout: 0.0,
            embed_std: 1.0,
            embed_norm: None,
        }
    }

    #[test]
    fn gamma_values() {
        assert_eq!(gamma(500, 500), 0.0);
        assert_eq!(gamma(250, 500), 0.5);
        assert_eq!(gamma(1, 500), 0.998);
        for t in 2..=500 {
            assert!(gamma(t, 500) < gamma(t - 1, 500));
        }
    }

    #[test]
    fn mse_identities() {
        let a = Matrix::<f64>::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mse(&a, &a), 0.0);
        let b = a.map(|x| x + 0.5);
        assert!((mse(&b, &a) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn step_range_is_checked() {
        let m = Denoiser::<f64>::new(micro(6, 10), 0).unwrap();
        let s = NoiseSchedule::new(10, 1e-4, 1e-5).unwrap();
        let d = TokenSequence::from_ids(vec![3, 4]);
        let mask = MaskState::uniform(2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(diffusion_ce_loss(&d, 0, &m, &s, &mask, &mut rng).is_err());
        assert!(diffusion_ce_loss(&d, 11, &m, &s, &mask, &mut rng).is_err());
        let b = diffusion_ce_loss(&d, 10, &m, &s, &mask, &mut rng).unwrap();
        assert_eq!(b.gamma, 0.0);
        assert!((b.total - b.ce_masked).abs() < 1e-12);
    }

    #[test]
    fn warmup_and_validation() {
        let c = TrainConfig {
            steps: 10,
            warmup: 4,
            lr: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(1), 0.25);
        assert_eq!(c.lr_at(4), 1.0);
        assert_eq!(c.lr_at(9), 1.0);
        let bad = TrainConfig {
            steps: 10,
            warmup: 11,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_lr_keeps_parameters_and_runs_are_deterministic() {
        let texts = ["the cat sat", "the dog ran", "a cat ran"];
        let v = Vocabulary::build(&texts, 1).unwrap();
        let c = Corpus::from_texts(&texts, &v, Split::Train, 16).unwrap();
        let tagger = PosTagger::default();
        let sc = ScheduleConfig {
            steps: 20,
            ..Default::default()
        };
        let planner = MaskPlanner {
            corpus: &c,
            vocab: &v,
            tagger: &tagger,
            schedule: sc,
            strategy: NoiseStrategy::MaskEntropyRel,
        };
        let schedule = sc.build().unwrap();
        let mut cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            warmup: 0,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let mut m = Denoiser::<f32>::new(micro(v.len(), 20), 4).unwrap();
        let before = m.params.clone();
        train(&mut m, &planner, &schedule, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(m.params, before);

        cfg.lr = 1e-2;
        let mut a = Denoiser::<f32>::new(micro(v.len(), 20), 4).unwrap();
        let mut b = a.clone();
        let la = train(&mut a, &planner, &schedule, &cfg, |_, _| Ok(())).unwrap();
        let lb = train(&mut b, &planner, &schedule, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, before);
        for r in &la {
            let p = r.probe.unwrap();
            assert!((p.total - (p.gamma * p.ce_clean + p.ce_masked)).abs() < 1e-5);
            assert!((r.loss - (r.clean_term + r.masked_term)).abs() < 1e-5);
        }
    }
}
