//! Parameter storage and the layers shared by the denoiser, the latent
//! classifiers and the teacher LM.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    pub tensors: Vec<Matrix<F>>,
    pub names: Vec<String>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }
}

impl<F: Real> ParamSet<F> {
    pub fn add(&mut self, name: impl Into<String>, m: Matrix<F>) -> usize {
        self.tensors.push(m);
        self.names.push(name.into());
        self.tensors.len() - 1
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
            names: self.names.clone(),
        }
    }

    /// Flat view for serialization.
    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.tensors
            .iter()
            .zip(&self.names)
            .map(|(t, n)| TensorRecord {
                name: n.clone(),
                rows: t.rows(),
                cols: t.cols(),
                data: t.data().iter().map(|x| x.f64()).collect(),
            })
            .collect()
    }

    /// Overwrites tensors from records; names and shapes must match.
    pub fn load_records(&mut self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                records.len()
            )));
        }
        for (i, r) in records.iter().enumerate() {
            let t = &self.tensors[i];
            if r.name != self.names[i] || r.rows != t.rows() || r.cols != t.cols() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: expected {} {}x{}, found {} {}x{}",
                    self.names[i],
                    t.rows(),
                    t.cols(),
                    r.name,
                    r.rows,
                    r.cols
                )));
            }
            let data = r.data.iter().map(|&x| F::of(x)).collect();
            self.tensors[i] = Matrix::from_vec(r.rows, r.cols, data)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Optional dropout source; `None` means inference mode.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut dyn RngCore,
}

impl Dropout<'_> {
    pub fn apply<F: Real>(&mut self, g: &mut Graph<F>, x: Var) -> Var {
        if self.p <= 0.0 {
            return x;
        }
        let (r, c) = g.value(x).shape();
        let keep = F::of(1.0 / (1.0 - self.p));
        let data = (0..r * c)
            .map(|_| {
                if self.rng.random::<f64>() < self.p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = Matrix::from_vec(r, c, data).expect("mask shape");
        g.dropout(x, mask)
    }
}

pub fn dropout<F: Real>(g: &mut Graph<F>, x: Var, d: &mut Option<Dropout<'_>>) -> Var {
    match d {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        ps: &mut ParamSet<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), Matrix::randn(fan_in, fan_out, std, rng));
        let b = ps.add(format!("{name}.b"), Matrix::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        let b = g.param(self.b);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Matrix::filled(1, dim, F::one()));
        let bias = ps.add(format!("{name}.bias"), Matrix::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let y = g.mul_row(n, gain);
        let bias = g.param(self.bias);
        g.add_row(y, bias)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    width: usize,
}

impl Block {
    pub fn new<F: Real, R: Rng + ?Sized>(
        ps: &mut ParamSet<F>,
        name: &str,
        width: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), width),
            qkv: Linear::new(ps, &format!("{name}.qkv"), width, 3 * width, std, rng),
            proj: Linear::new(ps, &format!("{name}.proj"), width, width, std * 0.5, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), width),
            fc1: Linear::new(ps, &format!("{name}.fc1"), width, ffn, std, rng),
            fc2: Linear::new(
                ps,
                &format!("{name}.fc2"),
                ffn,
                width,
                0.5 / (ffn as f64).sqrt(),
                rng,
            ),
            heads,
            width,
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        causal: bool,
        drop: &mut Option<Dropout<'_>>,
    ) -> Var {
        let dh = self.width / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let n = self.ln1.forward(g, x);
        let qkv = self.qkv.forward(g, n);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dh, dh);
            let k = g.slice_cols(qkv, self.width + h * dh, dh);
            let v = g.slice_cols(qkv, 2 * self.width + h * dh, dh);
            let s = g.matmul_t(q, k);
            let s = g.scale(s, scale);
            let p = g.softmax(s, causal);
            outs.push(g.matmul(p, v));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        let a = self.proj.forward(g, cat);
        let a = dropout(g, a, drop);
        let x = g.add(x, a);

        let n = self.ln2.forward(g, x);
        let f = self.fc1.forward(g, n);
        let f = g.gelu(f);
        let f = self.fc2.forward(g, f);
        let f = dropout(g, f, drop);
        g.add(x, f)
    }
}

/// Fixed sinusoidal features of a scalar position/step, `1 x dim`.
pub fn sinusoidal<F: Real>(t: f64, dim: usize) -> Matrix<F> {
    let half = dim / 2;
    let mut m = Matrix::zeros(1, dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        m.set(0, i, F::of((t * freq).sin()));
        m.set(0, half + i, F::of((t * freq).cos()));
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamConfig,
    m: Vec<Matrix<F>>,
    v: Vec<Matrix<F>>,
    t: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &ParamSet<F>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update at learning rate `lr`; missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Option<Matrix<F>>], lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let step = F::of(lr / bc1);
        let decay = F::of(1.0 - lr * c.weight_decay);
        let eps = F::of(c.eps);
        let inv_bc2 = F::of(1.0 / bc2);
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].as_ref().map(Matrix::data);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(F::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (F::one() - b1) * gj;
                v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
                let upd = step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
                if lr > 0.0 {
                    *x = *x * decay - upd;
                }
            }
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<F: Real>(grads: &[Option<Matrix<F>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.sq_norm().f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients in place so their global norm is at most `max_norm`.
pub fn clip_grads<F: Real>(grads: &mut [Option<Matrix<F>>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = F::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}

/// Adds `src` into `dst`, treating `None` as zero.
pub fn accumulate<F: Real>(dst: &mut [Option<Matrix<F>>], src: Vec<Option<Matrix<F>>>) {
    for (d, s) in dst.iter_mut().zip(src) {
        match (d.as_mut(), s) {
            (Some(d), Some(s)) => d.add_assign(&s),
            (None, Some(s)) => *d = Some(s),
            _ => {}
        }
    }
}

pub fn scale_grads<F: Real>(grads: &mut [Option<Matrix<F>>], k: f64) {
    let k = F::of(k);
    for g in grads.iter_mut().flatten() {
        for x in g.data_mut() {
            *x *= k;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_with_zero_lr_leaves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::<f32>::default();
        ps.add("w", Matrix::randn(3, 3, 1.0, &mut rng));
        let before = ps.clone();
        let mut opt = AdamW::new(&ps, AdamConfig::default());
        let g = vec![Some(Matrix::filled(3, 3, 1.0f32))];
        opt.step(&mut ps, &g, 0.0);
        assert_eq!(ps, before);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Some(Matrix::filled(2, 2, 3.0f64)), None];
        let n = clip_grads(&mut g, 1.0);
        assert!((n - 6.0).abs() < 1e-12);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn records_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::<f64>::default();
        ps.add("a", Matrix::randn(2, 3, 1.0, &mut rng));
        let recs = ps.to_records();
        let mut other = ps.clone();
        other.tensors[0] = Matrix::zeros(2, 3);
        other.load_records(&recs).unwrap();
        assert_eq!(other, ps);
        let mut bad = recs.clone();
        bad[0].name = "b".into();
        assert!(other.load_records(&bad).is_err());
    }
}
