//! Encoder-decoder transformer with hand-written backpropagation.
//!
//! The encoder reads the segmentation tokens with bidirectional attention; the
//! decoder reads the output prefix with causal self-attention followed by
//! cross-attention over the encoder states. Both sides embed a token as the
//! sum of a learned token vector, a learned global-position vector and a
//! learned local-index vector. Layers are pre-norm (GPT-2 style) with GELU
//! feed-forward blocks.
//!
//! Parameters live in one flat buffer described by a named tensor manifest,
//! which doubles as the checkpoint layout. Everything is generic over the
//! float type so gradients can be checked in f64; the shipped model is f32.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::Grammar;
use crate::tokenizer::{Vocabulary, DEFAULT_RESOLUTION, MAX_INPUT_LEN, MAX_OUTPUT_LEN};

pub mod checkpoint;
mod infer;
mod model;
pub(crate) mod ops;
pub mod train;

pub use infer::DecoderSession;
pub use model::EmbeddingSeq;

/// Float type the kernels run in.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    /// Raw strided GEMM: `c = alpha * a · b + beta * c`.
    ///
    /// # Safety
    /// All strided indices must be in bounds and `c` must not alias `a`/`b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from(v).expect("finite literal")
    }

    /// In-place elementwise `exp`.
    fn exp_slice(xs: &mut [Self]) {
        xs.iter_mut().for_each(|x| *x = x.exp());
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn exp_slice(xs: &mut [f32]) {
        ops::exp_f32_slice(xs)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("token {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("output prefix must start with BOS")]
    MissingBos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    /// Coordinate bins of the tokenizer.
    pub resolution: u32,
    /// Size of the local-index embedding tables.
    pub local_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let vocab = Vocabulary::standard(DEFAULT_RESOLUTION).expect("default resolution is supported");
        Self::for_vocab(&vocab)
    }
}

impl ModelConfig {
    /// Desk-scale defaults sized to `vocab`.
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        Self {
            embed_dim: 256,
            enc_layers: 4,
            dec_layers: 4,
            heads: 8,
            ff_mult: 4,
            dropout: 0.1,
            vocab_size: vocab.size(),
            max_input_len: MAX_INPUT_LEN,
            max_output_len: MAX_OUTPUT_LEN,
            resolution: vocab.resolution(),
            local_positions: local_positions(vocab.grammar()),
        }
    }

    /// A very small model for tests and smoke runs.
    pub fn tiny(vocab: &Vocabulary, embed_dim: usize, layers: usize, heads: usize) -> Self {
        Self { embed_dim, enc_layers: layers, dec_layers: layers, heads, ff_mult: 4, dropout: 0.0, ..Self::for_vocab(vocab) }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} must be a positive multiple of heads {}", self.embed_dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ff_mult == 0 || self.vocab_size == 0 || self.max_input_len == 0 || self.max_output_len == 0 {
            return bad("sizes must be positive".into());
        }
        if self.local_positions < 5 {
            return bad("need at least 5 local positions for rect tokens".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Local indices run up to the longest argument list plus SEP.
fn local_positions(grammar: &Grammar) -> usize {
    (grammar.max_arg_len() + 2).max(5)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the flat parameter buffer.
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Lin {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ln {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncLayer {
    pub ln1: Ln,
    pub qkv: Lin,
    pub proj: Lin,
    pub ln2: Ln,
    pub fc1: Lin,
    pub fc2: Lin,
}

#[derive(Debug, Clone)]
pub(crate) struct DecLayer {
    pub ln1: Ln,
    pub qkv: Lin,
    pub proj: Lin,
    pub ln2: Ln,
    pub q: Lin,
    pub kv: Lin,
    pub cross_proj: Lin,
    pub ln3: Ln,
    pub fc1: Lin,
    pub fc2: Lin,
}

/// Offsets of every tensor in the flat buffer.
#[derive(Debug, Clone)]
pub(crate) struct Index {
    pub tok: usize,
    pub enc_gpos: usize,
    pub enc_lpos: usize,
    pub dec_gpos: usize,
    pub dec_lpos: usize,
    pub enc: Vec<EncLayer>,
    pub enc_ln: Ln,
    pub dec: Vec<DecLayer>,
    pub dec_ln: Ln,
    pub head: Lin,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Residual,
    Zeros,
    Ones,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    inits: Vec<Init>,
    total: usize,
}

impl Builder {
    fn alloc(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        self.total += shape.iter().product::<usize>();
        self.tensors.push(TensorInfo { name, shape, offset });
        self.inits.push(init);
        offset
    }

    fn lin(&mut self, name: &str, din: usize, dout: usize, init: Init) -> Lin {
        let w = self.alloc(format!("{name}.w"), vec![din, dout], init);
        let b = self.alloc(format!("{name}.b"), vec![dout], Init::Zeros);
        Lin { w, b, din, dout }
    }

    fn ln(&mut self, name: &str, d: usize) -> Ln {
        let g = self.alloc(format!("{name}.g"), vec![d], Init::Ones);
        let b = self.alloc(format!("{name}.b"), vec![d], Init::Zeros);
        Ln { g, b }
    }
}

impl Index {
    fn build(cfg: &ModelConfig) -> (Index, Vec<Init>) {
        let d = cfg.embed_dim;
        let ff = d * cfg.ff_mult;
        let mut b = Builder { tensors: Vec::new(), inits: Vec::new(), total: 0 };
        let tok = b.alloc("tok_emb".into(), vec![cfg.vocab_size, d], Init::Normal);
        let enc_gpos = b.alloc("enc.global_pos".into(), vec![cfg.max_input_len, d], Init::Normal);
        let enc_lpos = b.alloc("enc.local_pos".into(), vec![cfg.local_positions, d], Init::Normal);
        let dec_gpos = b.alloc("dec.global_pos".into(), vec![cfg.max_output_len, d], Init::Normal);
        let dec_lpos = b.alloc("dec.local_pos".into(), vec![cfg.local_positions, d], Init::Normal);
        let enc = (0..cfg.enc_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncLayer {
                    ln1: b.ln(&format!("{p}.ln1"), d),
                    qkv: b.lin(&format!("{p}.attn.qkv"), d, 3 * d, Init::Normal),
                    proj: b.lin(&format!("{p}.attn.proj"), d, d, Init::Residual),
                    ln2: b.ln(&format!("{p}.ln2"), d),
                    fc1: b.lin(&format!("{p}.mlp.fc1"), d, ff, Init::Normal),
                    fc2: b.lin(&format!("{p}.mlp.fc2"), ff, d, Init::Residual),
                }
            })
            .collect();
        let enc_ln = b.ln("enc.ln_f", d);
        let dec = (0..cfg.dec_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                DecLayer {
                    ln1: b.ln(&format!("{p}.ln1"), d),
                    qkv: b.lin(&format!("{p}.self.qkv"), d, 3 * d, Init::Normal),
                    proj: b.lin(&format!("{p}.self.proj"), d, d, Init::Residual),
                    ln2: b.ln(&format!("{p}.ln2"), d),
                    q: b.lin(&format!("{p}.cross.q"), d, d, Init::Normal),
                    kv: b.lin(&format!("{p}.cross.kv"), d, 2 * d, Init::Normal),
                    cross_proj: b.lin(&format!("{p}.cross.proj"), d, d, Init::Residual),
                    ln3: b.ln(&format!("{p}.ln3"), d),
                    fc1: b.lin(&format!("{p}.mlp.fc1"), d, ff, Init::Normal),
                    fc2: b.lin(&format!("{p}.mlp.fc2"), ff, d, Init::Residual),
                }
            })
            .collect();
        let dec_ln = b.ln("dec.ln_f", d);
        let head = b.lin("head", d, cfg.vocab_size, Init::Normal);
        let index = Index {
            tok,
            enc_gpos,
            enc_lpos,
            dec_gpos,
            dec_lpos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            head,
            tensors: b.tensors,
            total: b.total,
        };
        (index, b.inits)
    }
}

/// Weight standard deviation at initialization.
const INIT_STD: f64 = 0.02;

/// The sequence model `f(S_I, s_<i) = h(g(S_I), s_<i)`.
#[derive(Debug, Clone)]
pub struct SeqModel<S: Scalar = f32> {
    config: ModelConfig,
    pub(crate) index: Index,
    pub(crate) params: Vec<S>,
}

impl<S: Scalar> SeqModel<S> {
    /// Randomly initialized model (normal weights, zero biases, unit norms).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (index, inits) = Index::build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let layers = (config.enc_layers + config.dec_layers).max(1) as f64;
        let residual = Normal::new(0.0, INIT_STD / (2.0 * layers).sqrt()).expect("valid std");
        let mut params = vec![S::zero(); index.total];
        for (t, init) in index.tensors.iter().zip(&inits) {
            let slot = &mut params[t.offset..t.offset + t.len()];
            match init {
                Init::Normal => slot.iter_mut().for_each(|p| *p = S::lit(normal.sample(&mut rng))),
                Init::Residual => slot.iter_mut().for_each(|p| *p = S::lit(residual.sample(&mut rng))),
                Init::Zeros => {}
                Init::Ones => slot.fill(S::one()),
            }
        }
        Ok(Self { config, index, params })
    }

    /// Model with the given flat parameters, which must match the manifest.
    pub fn from_params(config: ModelConfig, params: Vec<S>) -> Result<Self, ModelError> {
        config.validate()?;
        let (index, _) = Index::build(&config);
        if params.len() != index.total {
            return Err(ModelError::Config(format!("expected {} parameters, got {}", index.total, params.len())));
        }
        Ok(Self { config, index, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.index.tensors
    }

    /// Converts the parameters to another float type.
    pub fn cast<T: Scalar>(&self) -> SeqModel<T> {
        SeqModel {
            config: self.config.clone(),
            index: self.index.clone(),
            params: self.params.iter().map(|&p| T::from(p).expect("finite parameter")).collect(),
        }
    }

    pub(crate) fn p(&self, offset: usize, len: usize) -> &[S] {
        &self.params[offset..offset + len]
    }
}
