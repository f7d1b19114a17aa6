//! Square-root noise schedule and the bucket-staged soft-masking forward
//! process.
//!
//! `alpha_bar[t] = clamp(1 - sqrt(t/T + s), eps, 1)` is the cumulative
//! retention; per-step noise is `beta[t] = 1 - alpha_bar[t] / alpha_bar[t-1]`.
//! A token in bucket `b` starts receiving noise at step
//! `t_start(b) = floor((b-1) T / m) + 1`; its activation step is
//! `a = t_start(b) - 1`, the last step at which it is still clean.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, MASK};
use crate::error::{Error, Result};
use crate::importance::BucketAssignment;
use crate::tensor::{normal, Latent, Real};

pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_S: f64 = 1e-4;
pub const DEFAULT_EPS: f64 = 1e-5;

/// How long an activated token keeps receiving noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Staging {
    /// Noised at every step after activation, up to `T`.
    #[default]
    Cumulative,
    /// Noised only during its own bucket's window of steps.
    Window,
}

/// Serializable schedule parameters stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub s: f64,
    pub eps: f64,
    pub buckets: usize,
    pub staging: Staging,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            s: DEFAULT_S,
            eps: DEFAULT_EPS,
            buckets: crate::importance::DEFAULT_BUCKETS,
            staging: Staging::Cumulative,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.s, self.eps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    s: f64,
    eps: f64,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, s: f64, eps: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::InvalidSchedule(format!("s = {s} outside (0, 1)")));
        }
        if !(eps > 0.0 && eps < 1.0 - s.sqrt()) {
            return Err(Error::InvalidSchedule(format!(
                "eps = {eps} outside (0, 1 - sqrt(s))"
            )));
        }
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|t| {
                let raw = 1.0 - (t as f64 / steps as f64 + s).sqrt();
                raw.clamp(eps, 1.0)
            })
            .collect();
        let beta = std::iter::once(0.0)
            .chain((1..=steps).map(|t| 1.0 - alpha_bar[t] / alpha_bar[t - 1]))
            .collect();
        Ok(Self {
            steps,
            s,
            eps,
            alpha_bar,
            beta,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Per-step noise variance; `beta(0)` is 0.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Unclamped value of the square-root curve at `t`.
    pub fn raw_alpha_bar(&self, t: usize) -> f64 {
        1.0 - (t as f64 / self.steps as f64 + self.s).sqrt()
    }

    fn check_step(&self, t: usize, lo: usize, hi: usize) -> Result<()> {
        if t < lo || t > hi {
            return Err(Error::StepOutOfRange { t, lo, hi });
        }
        Ok(())
    }
}

/// First noised step of bucket `b` (1-based).
pub fn bucket_start(b: usize, steps: usize, m: usize) -> usize {
    (b - 1) * steps / m + 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskState {
    /// Last clean step per token.
    pub activation: Vec<usize>,
    /// Last noised step per token (`T` under cumulative staging).
    pub end: Vec<usize>,
}

impl MaskState {
    pub fn from_buckets(buckets: &BucketAssignment, steps: usize, staging: Staging) -> Self {
        Self::from_bucket_ids(&buckets.bucket, buckets.m, steps, staging)
    }

    /// `m` is the schedule's bucket count; buckets beyond the sentence's
    /// own split may be empty.
    pub fn from_bucket_ids(bucket: &[usize], m: usize, steps: usize, staging: Staging) -> Self {
        let activation = bucket
            .iter()
            .map(|&b| bucket_start(b, steps, m) - 1)
            .collect();
        let end = bucket
            .iter()
            .map(|&b| match staging {
                Staging::Cumulative => steps,
                Staging::Window if b < m => bucket_start(b + 1, steps, m) - 1,
                Staging::Window => steps,
            })
            .collect();
        Self { activation, end }
    }

    /// Every token active from step 1 (plain Gaussian diffusion).
    pub fn uniform(len: usize, steps: usize) -> Self {
        Self {
            activation: vec![0; len],
            end: vec![steps; len],
        }
    }

    pub fn len(&self) -> usize {
        self.activation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activation.is_empty()
    }

    /// Signal retention of token `i` at step `t`.
    pub fn retention(&self, i: usize, t: usize, schedule: &NoiseSchedule) -> f64 {
        let a = self.activation[i];
        if t <= a {
            return 1.0;
        }
        let stop = t.min(self.end[i]);
        schedule.alpha_bar(stop) / schedule.alpha_bar(a)
    }

    pub fn is_masked(&self, i: usize, t: usize) -> bool {
        self.activation[i] < t
    }
}

/// One Markov step `x_t -> x_{t+1}`; tokens not yet active are copied.
pub fn forward_step<F: Real, R: Rng + ?Sized>(
    x_t: &Latent<F>,
    t: usize,
    mask: &MaskState,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Latent<F>> {
    if t >= schedule.steps() {
        return Err(Error::StepOutOfRange {
            t,
            lo: 0,
            hi: schedule.steps() - 1,
        });
    }
    check_rows(x_t, mask)?;
    let beta = schedule.beta(t + 1);
    let keep = F::of((1.0 - beta).sqrt());
    let noise = F::of(beta.sqrt());
    let mut out = x_t.clone();
    for i in 0..mask.len() {
        if mask.activation[i] <= t && t < mask.end[i] {
            for v in out.row_mut(i) {
                *v = keep * *v + noise * normal::<F, _>(rng);
            }
        }
    }
    Ok(out)
}

/// Closed-form sample of `x_t` given `x_0`.
pub fn q_sample<F: Real, R: Rng + ?Sized>(
    x_0: &Latent<F>,
    t: usize,
    mask: &MaskState,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Latent<F>> {
    let noise = Latent::randn(x_0.rows(), x_0.cols(), 1.0, rng);
    q_sample_with_noise(x_0, t, mask, schedule, &noise)
}

/// Per-token `(sqrt(r), sqrt(1 - r))` at step `t`; `(1, 0)` for clean tokens.
pub fn q_coefficients(t: usize, mask: &MaskState, schedule: &NoiseSchedule) -> Vec<(f64, f64)> {
    (0..mask.len())
        .map(|i| {
            if mask.activation[i] < t {
                let r = mask.retention(i, t, schedule);
                (r.sqrt(), (1.0 - r).sqrt())
            } else {
                (1.0, 0.0)
            }
        })
        .collect()
}

/// [`q_sample`] with an explicit standard-normal draw of the same shape.
pub fn q_sample_with_noise<F: Real>(
    x_0: &Latent<F>,
    t: usize,
    mask: &MaskState,
    schedule: &NoiseSchedule,
    noise: &Latent<F>,
) -> Result<Latent<F>> {
    schedule.check_step(t, 0, schedule.steps())?;
    check_rows(x_0, mask)?;
    if noise.shape() != x_0.shape() {
        return Err(Error::Shape("noise shape differs from latent".into()));
    }
    let mut out = x_0.clone();
    for (i, (keep, sd)) in q_coefficients(t, mask, schedule).into_iter().enumerate() {
        if sd == 0.0 && keep == 1.0 {
            continue;
        }
        let (keep, sd) = (F::of(keep), F::of(sd));
        for (v, &z) in out.row_mut(i).iter_mut().zip(noise.row(i)) {
            *v = keep * *v + sd * z;
        }
    }
    Ok(out)
}

/// The discrete view of step `t`: tokens whose noising has begun become MASK.
pub fn masked_sentence(d: &TokenSequence, t: usize, mask: &MaskState) -> TokenSequence {
    let ids = d
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| if mask.is_masked(i, t) { MASK } else { id })
        .collect();
    TokenSequence {
        ids,
        source: d.source.clone(),
    }
}

fn check_rows<F: Real>(x: &Latent<F>, mask: &MaskState) -> Result<()> {
    if x.rows() != mask.len() {
        return Err(Error::Shape(format!(
            "latent has {} rows, mask state {} tokens",
            x.rows(),
            mask.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::new(500, 1e-4, 1e-5).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = default_schedule();
        assert_eq!(s.alpha_bar(0), 0.99);
        let expect_125 = 1.0 - 0.2501f64.sqrt();
        assert!((s.alpha_bar(125) - expect_125).abs() < 1e-15);
        assert!((s.alpha_bar(125) - 0.49990).abs() < 1e-5);
        assert!(s.raw_alpha_bar(500) < 0.0);
        assert_eq!(s.alpha_bar(500), 1e-5);
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(NoiseSchedule::new(0, 1e-4, 1e-5).is_err());
        assert!(NoiseSchedule::new(10, 0.0, 1e-5).is_err());
        assert!(NoiseSchedule::new(10, 1e-4, 0.995).is_err());
    }

    // beta is U-shaped under the square-root curve: it falls while
    // sqrt(t/T + s) < 1/2 and rises afterwards.
    #[test]
    fn beta_shape_and_range() {
        let s = default_schedule();
        let turn = (0.25f64 - 1e-4) * 500.0;
        for t in 1..=500 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0, "t = {t}");
        }
        for t in 2..500 {
            if (t as f64) < turn {
                assert!(s.beta(t) < s.beta(t - 1), "t = {t}");
            } else if (t as f64) > turn + 1.0 {
                assert!(s.beta(t) > s.beta(t - 1), "t = {t}");
            }
        }
    }

    #[test]
    fn bucket_starts_for_three_buckets() {
        assert_eq!(bucket_start(1, 500, 3), 1);
        assert_eq!(bucket_start(2, 500, 3), 167);
        assert_eq!(bucket_start(3, 500, 3), 334);
    }

    #[test]
    fn masked_sentence_stages() {
        let d = TokenSequence::from_ids(vec![10, 11, 12, 13, 14, 15]);
        let mask = MaskState::from_bucket_ids(&[1, 1, 2, 2, 3, 3], 3, 500, Staging::Cumulative);
        assert_eq!(masked_sentence(&d, 0, &mask), d);
        assert!(masked_sentence(&d, 500, &mask).ids.iter().all(|&i| i == MASK));
        let mid = masked_sentence(&d, 200, &mask).ids;
        assert_eq!(mid, vec![MASK, MASK, MASK, MASK, 14, 15]);
    }

    #[test]
    fn inactive_tokens_pass_through() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Latent::<f64>::randn(2, 4, 1.0, &mut rng);
        let mask = MaskState::from_bucket_ids(&[2, 3], 3, 500, Staging::Cumulative);
        let y = forward_step(&x, 10, &mask, &s, &mut rng).unwrap();
        assert_eq!(x, y);
        assert!(forward_step(&x, 500, &mask, &s, &mut rng).is_err());
        let z = q_sample(&x, 166, &mask, &s, &mut rng).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn forward_step_matches_scalar_oracle() {
        let s = default_schedule();
        let x = Latent::<f64>::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let mask = MaskState::uniform(1, 500);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = forward_step(&x, 41, &mask, &s, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = 1.0 - s.alpha_bar(42) / s.alpha_bar(41);
        for j in 0..3 {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let expect = (1.0 - b).sqrt() * x.get(0, j) + b.sqrt() * z;
            assert_eq!(y.get(0, j), expect);
        }
    }

    #[test]
    fn q_sample_terminal_is_near_pure_noise() {
        let s = default_schedule();
        let mask = MaskState::from_bucket_ids(&[1, 3], 3, 500, Staging::Cumulative);
        assert!(mask.retention(0, 500, &s) < 2e-5);
        assert!(mask.retention(1, 500, &s) < 1e-4);
        assert_eq!(mask.retention(1, 333, &s), 1.0);
    }

    #[test]
    fn window_staging_stops_after_bucket_window() {
        let s = default_schedule();
        let mask = MaskState::from_bucket_ids(&[1], 3, 500, Staging::Window);
        assert_eq!(mask.end[0], 166);
        let r = mask.retention(0, 400, &s);
        assert!((r - s.alpha_bar(166) / s.alpha_bar(0)).abs() < 1e-15);
    }

    #[test]
    fn q_sample_moments() {
        let s = default_schedule();
        let mask = MaskState::uniform(1, 500);
        let x = Latent::<f64>::from_vec(1, 1, vec![1.5]).unwrap();
        let t = 120;
        let r = mask.retention(0, t, &s);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| q_sample(&x, t, &mask, &s, &mut rng).unwrap().get(0, 0))
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = ((1.0 - r) / n as f64).sqrt();
        let se_var = (1.0 - r) * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - r.sqrt() * 1.5).abs() < 3.0 * se_mean);
        assert!((var - (1.0 - r)).abs() < 3.0 * se_var);
    }
}
