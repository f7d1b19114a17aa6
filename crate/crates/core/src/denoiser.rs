//! The learnable model: token embedding `e`, the transformer transition
//! `(X_t, t) -> X_{t-1}`, and the linear readout `f` to vocabulary logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, Block, Dropout, LayerNorm, Linear, ParamSet};
use crate::tensor::{Latent, Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Latent and model width `h`.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    /// Diffusion steps `T`, fixes the timestep feature scale.
    pub steps: usize,
    pub dropout: f64,
    /// Standard deviation of the initial embedding rows.
    pub embed_std: f64,
    /// When set, clean latents are the layer-normalized embedding rows
    /// rescaled to this L2 norm.
    pub embed_norm: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(0)
    }
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 128,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            steps: crate::schedule::DEFAULT_STEPS,
            dropout: 0.1,
            embed_std: 1.0,
            embed_norm: Some(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if let Some(k) = self.embed_norm {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::Config(format!("embed_norm {k} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Source of clean latents `X_0` for a token sequence. The trained
/// embedding table is the default; a frozen encoder could be plugged in.
pub trait EmbeddingProvider<F: Real> {
    fn dim(&self) -> usize;
    fn embed(&self, d: &TokenSequence) -> Result<Latent<F>>;
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: usize,
    position: usize,
    time: Linear,
    input: Linear,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    output: Linear,
    readout: Linear,
}

#[derive(Debug, Clone)]
pub struct Denoiser<F: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    layout: Layout,
}

impl<F: Real> Denoiser<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let std = 1.0 / (h as f64).sqrt();
        let mut ps = ParamSet::default();
        let embedding = ps.add(
            "embedding",
            Matrix::randn(config.vocab_size, h, config.embed_std, &mut rng),
        );
        let position = ps.add("position", Matrix::randn(config.max_len, h, 0.02, &mut rng));
        let time = Linear::new(&mut ps, "time", h, h, std, &mut rng);
        let input = Linear::new(&mut ps, "input", h, h, std, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| {
                Block::new(
                    &mut ps,
                    &format!("block{i}"),
                    h,
                    config.heads,
                    h * config.ffn_mult,
                    &mut rng,
                )
            })
            .collect();
        let final_ln = LayerNorm::new(&mut ps, "final_ln", h);
        let output = Linear::new(&mut ps, "output", h, h, std, &mut rng);
        let readout = Linear::new(&mut ps, "readout", h, config.vocab_size, std, &mut rng);
        Ok(Self {
            config,
            params: ps,
            layout: Layout {
                embedding,
                position,
                time,
                input,
                blocks,
                final_ln,
                output,
                readout,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn embedding_table(&self) -> &Matrix<F> {
        &self.params.tensors[self.layout.embedding]
    }

    pub fn embedding_index(&self) -> usize {
        self.layout.embedding
    }

    /// Index of the readout weight matrix (`h x V`) and bias.
    pub fn readout_indices(&self) -> (usize, usize) {
        (self.layout.readout.w, self.layout.readout.b)
    }

    /// Same architecture in another precision.
    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        Denoiser {
            config: self.config,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn graph(&self) -> Graph<'_, F> {
        Graph::new(&self.params.tensors)
    }

    pub fn check_sequence(&self, d: &TokenSequence) -> Result<()> {
        if d.is_empty() {
            return Err(Error::EmptySentence);
        }
        if d.len() > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence of length {} exceeds max_len {}",
                d.len(),
                self.config.max_len
            )));
        }
        d.check_ids(self.config.vocab_size)
    }

    pub fn embed_graph(&self, g: &mut Graph<F>, ids: &[u32]) -> Var {
        let table = g.param(self.layout.embedding);
        let rows = g.gather(table, ids);
        match self.config.embed_norm {
            Some(k) => {
                let n = g.layer_norm(rows);
                g.scale(n, F::of(k / (self.config.hidden as f64).sqrt()))
            }
            None => rows,
        }
    }

    /// Clean latents `X_0` for `ids`.
    pub fn embed(&self, ids: &[u32]) -> Result<Latent<F>> {
        TokenSequence::from_ids(ids.to_vec()).check_ids(self.config.vocab_size)?;
        if ids.is_empty() {
            return Err(Error::EmptySentence);
        }
        let mut g = self.graph();
        let x = self.embed_graph(&mut g, ids);
        Ok(g.value(x).clone())
    }

    /// Clean latent of every vocabulary entry, one row per id.
    pub fn clean_table(&self) -> Latent<F> {
        let ids: Vec<u32> = (0..self.config.vocab_size as u32).collect();
        self.embed(&ids).expect("full vocabulary")
    }

    /// `X_t -> X_{t-1}` on the tape.
    pub fn transition_graph(
        &self,
        g: &mut Graph<F>,
        x: Var,
        t: usize,
        mut drop: Option<Dropout<'_>>,
    ) -> Var {
        let l = g.value(x).rows();
        let h = self.config.hidden;
        let feats = g.input(sinusoidal(
            t as f64 * 1000.0 / self.config.steps as f64,
            h,
        ));
        let temb = self.layout.time.forward(g, feats);
        let temb = g.gelu(temb);
        let pos_table = g.param(self.layout.position);
        let pos_ids: Vec<u32> = (0..l as u32).collect();
        let pos = g.gather(pos_table, &pos_ids);

        let mut hid = self.layout.input.forward(g, x);
        hid = g.add(hid, pos);
        hid = g.add_row(hid, temb);
        for b in &self.layout.blocks {
            hid = b.forward(g, hid, false, &mut drop);
        }
        let n = self.layout.final_ln.forward(g, hid);
        self.layout.output.forward(g, n)
    }

    pub fn logits_graph(&self, g: &mut Graph<F>, x: Var) -> Var {
        self.layout.readout.forward(g, x)
    }

    pub fn transition(&self, x_t: &Latent<F>, t: usize) -> Result<Latent<F>> {
        if t < 1 || t > self.config.steps {
            return Err(Error::StepOutOfRange {
                t,
                lo: 1,
                hi: self.config.steps,
            });
        }
        self.check_latent(x_t)?;
        let mut g = self.graph();
        let x = g.input(x_t.clone());
        let y = self.transition_graph(&mut g, x, t, None);
        Ok(g.value(y).clone())
    }

    pub fn project_logits(&self, x: &Latent<F>) -> Result<Matrix<F>> {
        self.check_latent(x)?;
        let mut g = self.graph();
        let v = g.input(x.clone());
        let y = self.logits_graph(&mut g, v);
        Ok(g.value(y).clone())
    }

    /// Argmax readout; ties resolve to the lowest id.
    pub fn decode(&self, x: &Latent<F>) -> Result<TokenSequence> {
        let logits = self.project_logits(x)?;
        Ok(TokenSequence::from_ids(
            logits.argmax_rows().into_iter().map(|i| i as u32).collect(),
        ))
    }

    pub fn decode_text(&self, x: &Latent<F>, vocab: &Vocabulary) -> Result<String> {
        Ok(vocab.detokenize(&self.decode(x)?.ids))
    }

    fn check_latent(&self, x: &Latent<F>) -> Result<()> {
        if x.cols() != self.config.hidden {
            return Err(Error::Shape(format!(
                "latent width {} != hidden {}",
                x.cols(),
                self.config.hidden
            )));
        }
        if x.rows() == 0 || x.rows() > self.config.max_len {
            return Err(Error::Shape(format!("latent with {} rows", x.rows())));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("latent input"));
        }
        Ok(())
    }
}

impl<F: Real> EmbeddingProvider<F> for Denoiser<F> {
    fn dim(&self) -> usize {
        self.config.hidden
    }

    fn embed(&self, d: &TokenSequence) -> Result<Latent<F>> {
        d.check_ids(self.config.vocab_size)?;
        let table = self.embedding_table();
        let mut out = Matrix::zeros(d.len(), self.config.hidden);
        for (i, &id) in d.ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(table.row(id as usize));
        }
        Ok(out)
    }
}
