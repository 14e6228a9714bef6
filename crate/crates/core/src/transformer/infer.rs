//! Incremental decoding with cached keys and values.

use super::model::{Cols, EmbeddingSeq};
use super::ops::{attention, gelu, AttnShape};
use super::{ModelError, Scalar, SeqModel};
use crate::decoder::{DecodeError, StepModel};
use crate::tokenizer::TokenSeq;

/// Decoder state for one input: encoder output, cross-attention keys and
/// values, and the growing self-attention cache.
#[derive(Debug, Clone)]
pub struct DecoderSession<S: Scalar = f32> {
    encoded: EmbeddingSeq<S>,
    /// Per layer `[input_len, 2d]` cross keys and values.
    cross_kv: Vec<Vec<S>>,
    /// Per layer `[len, 2d]` self keys and values.
    self_kv: Vec<Vec<S>>,
    prefix: TokenSeq,
}

impl<S: Scalar> DecoderSession<S> {
    pub fn encoded(&self) -> &EmbeddingSeq<S> {
        &self.encoded
    }

    /// Tokens fed so far.
    pub fn prefix(&self) -> &TokenSeq {
        &self.prefix
    }
}

impl<S: Scalar> SeqModel<S> {
    pub fn start_session(&self, input: &TokenSeq) -> Result<DecoderSession<S>, ModelError> {
        let encoded = self.encode(input)?;
        let cross_kv = self
            .index
            .dec
            .iter()
            .map(|l| {
                super::ops::linear(
                    &encoded.data,
                    self.p(l.kv.w, l.kv.din * l.kv.dout),
                    self.p(l.kv.b, l.kv.dout),
                    encoded.rows,
                    l.kv.din,
                    l.kv.dout,
                )
            })
            .collect();
        Ok(DecoderSession {
            encoded,
            cross_kv,
            self_kv: vec![Vec::new(); self.index.dec.len()],
            prefix: TokenSeq::default(),
        })
    }

    /// Feeds one token and returns logits for the next one.
    pub fn session_step(&self, s: &mut DecoderSession<S>, token: u32, local: u32) -> Result<Vec<S>, ModelError> {
        let cfg = self.config();
        let d = cfg.embed_dim;
        let t = s.prefix.len();
        if t == 0 && token != crate::tokenizer::BOS {
            return Err(ModelError::MissingBos);
        }
        let pos = [t as u32];
        let cols = Cols { tokens: &[token], global: &pos, local: &[local] };
        self.check_cols(cols, cfg.max_output_len)?;
        let lin = |x: &[S], l: super::Lin| {
            super::ops::linear(x, self.p(l.w, l.din * l.dout), self.p(l.b, l.dout), 1, l.din, l.dout)
        };
        let ln = |x: &[S], l: super::Ln| super::ops::layernorm(x, self.p(l.g, d), self.p(l.b, d), d).0;
        let shape = |tk: usize| AttnShape { tq: 1, tk, heads: cfg.heads, dh: cfg.head_dim(), causal: false };
        let add = |x: &mut [S], y: &[S]| x.iter_mut().zip(y).for_each(|(a, &b)| *a = *a + b);

        let mut x = self.embed(cols, self.index.dec_gpos, self.index.dec_lpos);
        let mut probs = Vec::new();
        for ((l, cache), cross) in self.index.dec.iter().zip(&mut s.self_kv).zip(&s.cross_kv) {
            let qkv = lin(&ln(&x, l.ln1), l.qkv);
            cache.extend_from_slice(&qkv[d..]);
            let att = attention(&qkv, 3 * d, cache, 2 * d, &cache[d..], 2 * d, shape(t + 1), &mut probs);
            add(&mut x, &lin(&att, l.proj));

            let q = lin(&ln(&x, l.ln2), l.q);
            let catt = attention(&q, d, cross, 2 * d, &cross[d..], 2 * d, shape(s.encoded.rows), &mut probs);
            add(&mut x, &lin(&catt, l.cross_proj));

            let u = lin(&ln(&x, l.ln3), l.fc1);
            add(&mut x, &lin(&gelu(&u), l.fc2));
        }
        s.prefix.push(token, local);
        Ok(lin(&ln(&x, self.index.dec_ln), self.index.head))
    }
}

impl StepModel for SeqModel<f32> {
    type Session = DecoderSession<f32>;

    fn begin(&self, input: &TokenSeq) -> Result<Self::Session, DecodeError> {
        self.start_session(input).map_err(|e| DecodeError::Model(e.to_string()))
    }

    fn step(&self, session: &mut Self::Session, token: u32, local: u32) -> Result<Vec<f32>, DecodeError> {
        self.session_step(session, token, local).map_err(|e| DecodeError::Model(e.to_string()))
    }
}
