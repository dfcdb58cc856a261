//! The denoising network `f(z_t, t) → ẑ_0`: a pre-norm bidirectional transformer over the
//! whole source⊕target sequence, with hand-written reverse-mode gradients.

mod backward;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::{quantize_f32, Matrix};

pub use backward::backward;
pub use forward::{forward, ForwardCache};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Source positions read from a frozen random table instead of the trained one.
    #[serde(default)]
    pub freeze_source_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 1000,
            d_emb: 128,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_len: 128,
            dropout: 0.1,
            freeze_source_embedding: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let zero = [
            ("vocab_size", self.vocab_size),
            ("d_emb", self.d_emb),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = zero.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model={} is not divisible by n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for the timestep embedding".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Matrix,
}

/// Offsets of the named weights inside [`ModelParams::weights`].
pub(crate) mod slot {
    pub const IN_W: usize = 0;
    pub const IN_B: usize = 1;
    pub const POS: usize = 2;
    pub const T1_W: usize = 3;
    pub const T1_B: usize = 4;
    pub const T2_W: usize = 5;
    pub const T2_B: usize = 6;
    pub const LAYERS: usize = 7;
    pub const PER_LAYER: usize = 12;

    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const QKV_W: usize = 2;
    pub const QKV_B: usize = 3;
    pub const ATTN_OUT_W: usize = 4;
    pub const ATTN_OUT_B: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const FF1_W: usize = 8;
    pub const FF1_B: usize = 9;
    pub const FF2_W: usize = 10;
    pub const FF2_B: usize = 11;

    pub fn layer(l: usize, which: usize) -> usize {
        LAYERS + l * PER_LAYER + which
    }

    pub fn tail(n_layers: usize, which: usize) -> usize {
        LAYERS + n_layers * PER_LAYER + which
    }

    pub const LNF_G: usize = 0;
    pub const LNF_B: usize = 1;
    pub const OUT_W: usize = 2;
    pub const OUT_B: usize = 3;
}

pub const EMBEDDING_NAME: &str = "emb.weight";
pub const FROZEN_SOURCE_NAME: &str = "src_emb.weight";

/// All parameters of the denoiser, including the shared embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: EmbeddingTable,
    /// Untrained table used for source positions when `freeze_source_embedding` is set.
    pub frozen_source: Option<EmbeddingTable>,
    pub weights: Vec<Tensor>,
}

/// Gradients with the same layout as the trainable part of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: Matrix,
    pub weights: Vec<Matrix>,
}

fn weight_specs(c: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let dm = c.d_model;
    let residual_std = 1.0 / ((dm as f64).sqrt() * (2.0 * c.n_layers.max(1) as f64).sqrt());
    let mut specs = vec![
        ("in_proj.weight".into(), c.d_emb, dm, Init::Normal(1.0 / (c.d_emb as f64).sqrt())),
        ("in_proj.bias".into(), 1, dm, Init::Zeros),
        ("pos_emb.weight".into(), c.max_len, dm, Init::Normal(0.02)),
        ("time_mlp.0.weight".into(), dm, dm, Init::Normal(1.0 / (dm as f64).sqrt())),
        ("time_mlp.0.bias".into(), 1, dm, Init::Zeros),
        ("time_mlp.2.weight".into(), dm, dm, Init::Normal(1.0 / (dm as f64).sqrt())),
        ("time_mlp.2.bias".into(), 1, dm, Init::Zeros),
    ];
    for l in 0..c.n_layers {
        let p = format!("layers.{l}");
        specs.extend([
            (format!("{p}.ln1.gain"), 1, dm, Init::Ones),
            (format!("{p}.ln1.bias"), 1, dm, Init::Zeros),
            (format!("{p}.attn.qkv.weight"), dm, 3 * dm, Init::Normal(1.0 / (dm as f64).sqrt())),
            (format!("{p}.attn.qkv.bias"), 1, 3 * dm, Init::Zeros),
            (format!("{p}.attn.out.weight"), dm, dm, Init::Normal(residual_std)),
            (format!("{p}.attn.out.bias"), 1, dm, Init::Zeros),
            (format!("{p}.ln2.gain"), 1, dm, Init::Ones),
            (format!("{p}.ln2.bias"), 1, dm, Init::Zeros),
            (format!("{p}.ff.0.weight"), dm, c.d_ff, Init::Normal(1.0 / (dm as f64).sqrt())),
            (format!("{p}.ff.0.bias"), 1, c.d_ff, Init::Zeros),
            (
                format!("{p}.ff.2.weight"),
                c.d_ff,
                dm,
                Init::Normal(residual_std * (dm as f64 / c.d_ff as f64).sqrt()),
            ),
            (format!("{p}.ff.2.bias"), 1, dm, Init::Zeros),
        ]);
    }
    specs.extend([
        ("ln_f.gain".into(), 1, dm, Init::Ones),
        ("ln_f.bias".into(), 1, dm, Init::Zeros),
        ("out_proj.weight".into(), dm, c.d_emb, Init::Normal(1.0 / (dm as f64).sqrt())),
        ("out_proj.bias".into(), 1, c.d_emb, Init::Zeros),
    ]);
    specs
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Deterministic initialization from `seed`. Every value is representable in `f32`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut embedding = EmbeddingTable::random(config.vocab_size, config.d_emb, &mut rng);
    quantize_f32(&mut embedding.matrix.data);
    let weights = weight_specs(config)
        .into_iter()
        .map(|(name, rows, cols, init)| {
            let mut value = match init {
                Init::Zeros => Matrix::zeros(rows, cols),
                Init::Ones => Matrix::from_vec(rows, cols, vec![1.0; rows * cols]),
                Init::Normal(std) => Matrix::randn(rows, cols, std, &mut rng),
            };
            quantize_f32(&mut value.data);
            Tensor { name, value }
        })
        .collect();
    let frozen_source = config.freeze_source_embedding.then(|| {
        // separate stream so toggling the flag leaves the trained weights unchanged
        let mut frng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d_5eed_f00d);
        let mut t = EmbeddingTable::random(config.vocab_size, config.d_emb, &mut frng);
        quantize_f32(&mut t.matrix.data);
        t
    });
    Ok(ModelParams {
        config: *config,
        embedding,
        frozen_source,
        weights,
    })
}

impl ModelParams {
    pub fn w(&self, idx: usize) -> &Matrix {
        &self.weights[idx].value
    }

    /// Table used to embed source positions.
    pub fn source_table(&self) -> &EmbeddingTable {
        self.frozen_source.as_ref().unwrap_or(&self.embedding)
    }

    pub fn num_trainable(&self) -> usize {
        self.embedding.matrix.data.len() + self.weights.iter().map(|t| t.value.data.len()).sum::<usize>()
    }

    /// Trainable tensors in canonical order, embedding first.
    pub fn named_tensors(&self) -> Vec<(&str, &Matrix)> {
        std::iter::once((EMBEDDING_NAME, &self.embedding.matrix))
            .chain(self.weights.iter().map(|t| (t.name.as_str(), &t.value)))
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        std::iter::once((EMBEDDING_NAME, &mut self.embedding.matrix))
            .chain(self.weights.iter_mut().map(|t| (t.name.as_str(), &mut t.value)))
            .collect()
    }

    /// Single-sequence convenience wrapper around [`forward`] with dropout disabled.
    pub fn forward(&self, z_t: &Matrix, t: usize, pad_mask: &[bool]) -> Result<Matrix> {
        let (out, _) = forward(self, z_t, z_t.rows, &[t], pad_mask, None)?;
        Ok(out)
    }

    /// Rebuilds parameters from named tensors, checking every shape against `config`.
    pub fn from_named(config: ModelConfig, mut tensors: Vec<(String, Matrix)>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let (_, m) = tensors.swap_remove(pos);
            if m.shape() != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    (rows, cols)
                )));
            }
            Ok(m)
        };
        let embedding = EmbeddingTable::new(take(EMBEDDING_NAME, config.vocab_size, config.d_emb)?);
        let frozen_source = if config.freeze_source_embedding {
            Some(EmbeddingTable::new(take(FROZEN_SOURCE_NAME, config.vocab_size, config.d_emb)?))
        } else {
            None
        };
        let weights = weight_specs(&config)
            .into_iter()
            .map(|(name, rows, cols, _)| {
                let value = take(&name, rows, cols)?;
                Ok(Tensor { name, value })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            config,
            embedding,
            frozen_source,
            weights,
        })
    }
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            embedding: Matrix::zeros(params.embedding.matrix.rows, params.embedding.matrix.cols),
            weights: params
                .weights
                .iter()
                .map(|t| Matrix::zeros(t.value.rows, t.value.cols))
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        std::iter::once(&self.embedding).chain(self.weights.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        std::iter::once(&mut self.embedding).chain(self.weights.iter_mut())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.tensors_mut().for_each(|m| m.scale(k));
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .flat_map(|m| m.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first tensor holding a non-finite entry, if any.
    pub fn first_non_finite<'a>(&self, params: &'a ModelParams) -> Option<&'a str> {
        params
            .named_tensors()
            .into_iter()
            .zip(self.tensors())
            .find(|(_, g)| !g.is_finite())
            .map(|((name, _), _)| name)
    }
}

/// Interleaved sinusoidal encoding: `[2i] = sin(t/10000^{2i/dim})`, `[2i+1] = cos(…)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "timestep embedding width must be even");
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let arg = t as f64 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    out
}

/// Anything that predicts `ẑ_0` from a batch of noised latents.
pub trait Denoiser {
    /// `z` holds `ts.len()` sequences of `seq_len` rows each; `pad_mask` marks keys to ignore.
    fn predict(&self, z: &Matrix, seq_len: usize, ts: &[usize], pad_mask: &[bool]) -> Matrix;
    fn embedding(&self) -> &EmbeddingTable;
    fn source_embedding(&self) -> &EmbeddingTable;
    fn max_len(&self) -> usize;
}

impl Denoiser for ModelParams {
    fn predict(&self, z: &Matrix, seq_len: usize, ts: &[usize], pad_mask: &[bool]) -> Matrix {
        forward(self, z, seq_len, ts, pad_mask, None)
            .expect("denoiser input validated by caller")
            .0
    }

    fn embedding(&self) -> &EmbeddingTable {
        &self.embedding
    }

    fn source_embedding(&self) -> &EmbeddingTable {
        self.source_table()
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }
}

/// Dropout configuration for one training forward pass.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn rand::RngCore,
}

impl DropoutCtx<'_> {
    pub(crate) fn mask(&mut self, len: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..len)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }
}
