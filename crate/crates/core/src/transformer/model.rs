//! Full-sequence forward pass with activation traces and its backward pass.

use rand_chacha::ChaCha8Rng;

use super::ops::{
    apply_mask, attention, attention_backward, dropout, gelu, gelu_backward, layernorm, layernorm_backward, linear,
    linear_backward, log_softmax_row, AttnShape, LnCache,
};
use super::{Lin, Ln, ModelError, Scalar, SeqModel};
use crate::tokenizer::{TokenSeq, BOS};

/// Encoder output: one `dim`-vector per input token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeq<S: Scalar = f32> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> EmbeddingSeq<S> {
    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Borrowed token, global-position and local-index columns.
#[derive(Clone, Copy)]
pub(crate) struct Cols<'a> {
    pub tokens: &'a [u32],
    pub global: &'a [u32],
    pub local: &'a [u32],
}

impl<'a> Cols<'a> {
    pub fn of(seq: &'a TokenSeq) -> Self {
        Self { tokens: &seq.tokens, global: &seq.global_pos, local: &seq.local_pos }
    }

    pub fn prefix(self, n: usize) -> Self {
        Self { tokens: &self.tokens[..n], global: &self.global[..n], local: &self.local[..n] }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

struct EncLayerTrace<S> {
    ln1: LnCache<S>,
    h1: Vec<S>,
    qkv: Vec<S>,
    probs: Vec<S>,
    att: Vec<S>,
    m1: Option<Vec<S>>,
    ln2: LnCache<S>,
    h2: Vec<S>,
    u: Vec<S>,
    gu: Vec<S>,
    m2: Option<Vec<S>>,
}

struct EncTrace<S> {
    emb_mask: Option<Vec<S>>,
    layers: Vec<EncLayerTrace<S>>,
    ln_f: LnCache<S>,
}

struct DecLayerTrace<S> {
    ln1: LnCache<S>,
    h1: Vec<S>,
    qkv: Vec<S>,
    probs: Vec<S>,
    att: Vec<S>,
    m1: Option<Vec<S>>,
    ln2: LnCache<S>,
    h2: Vec<S>,
    q: Vec<S>,
    kv: Vec<S>,
    cprobs: Vec<S>,
    catt: Vec<S>,
    m2: Option<Vec<S>>,
    ln3: LnCache<S>,
    h3: Vec<S>,
    u: Vec<S>,
    gu: Vec<S>,
    m3: Option<Vec<S>>,
}

struct DecTrace<S> {
    emb_mask: Option<Vec<S>>,
    layers: Vec<DecLayerTrace<S>>,
    ln_f: LnCache<S>,
    hf: Vec<S>,
}

fn add_into<S: Scalar>(x: &mut [S], y: &[S]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}

/// Mutable weight and bias gradient slices of a linear layer (stored adjacently).
fn lin_grads<S>(grads: &mut [S], l: Lin) -> (&mut [S], &mut [S]) {
    debug_assert_eq!(l.b, l.w + l.din * l.dout);
    let (dw, rest) = grads[l.w..].split_at_mut(l.din * l.dout);
    (dw, &mut rest[..l.dout])
}

fn ln_grads<S>(grads: &mut [S], l: Ln, d: usize) -> (&mut [S], &mut [S]) {
    debug_assert_eq!(l.b, l.g + d);
    let (dg, rest) = grads[l.g..].split_at_mut(d);
    (dg, &mut rest[..d])
}

/// `[rows, a]`, `[rows, a]`, ... concatenated column-wise into `[rows, n*a]`.
fn interleave<S: Scalar>(parts: &[&[S]], rows: usize, a: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(rows * a * parts.len());
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(&p[r * a..(r + 1) * a]);
        }
    }
    out
}

impl<S: Scalar> SeqModel<S> {
    fn lin(&self, x: &[S], l: Lin, rows: usize) -> Vec<S> {
        linear(x, self.p(l.w, l.din * l.dout), self.p(l.b, l.dout), rows, l.din, l.dout)
    }

    fn ln(&self, x: &[S], l: Ln) -> (Vec<S>, LnCache<S>) {
        let d = self.config().embed_dim;
        layernorm(x, self.p(l.g, d), self.p(l.b, d), d)
    }

    fn lin_back(&self, dy: &[S], x: &[S], l: Lin, rows: usize, dx: Option<&mut [S]>, grads: &mut [S]) {
        let (dw, db) = lin_grads(grads, l);
        linear_backward(dy, x, self.p(l.w, l.din * l.dout), rows, l.din, l.dout, dx, dw, db);
    }

    fn ln_back(&self, dy: &[S], cache: &LnCache<S>, l: Ln, dx: &mut [S], grads: &mut [S]) {
        let d = self.config().embed_dim;
        let (dg, db) = ln_grads(grads, l, d);
        layernorm_backward(dy, cache, self.p(l.g, d), d, dx, dg, db);
    }

    pub(crate) fn check_cols(&self, cols: Cols<'_>, max: usize) -> Result<(), ModelError> {
        let cfg = self.config();
        if cols.len() > max {
            return Err(ModelError::LengthExceeded { len: cols.len(), max });
        }
        for (&t, &l) in cols.tokens.iter().zip(cols.local) {
            if t as usize >= cfg.vocab_size {
                return Err(ModelError::UnknownToken(t));
            }
            if l as usize >= cfg.local_positions {
                return Err(ModelError::Config(format!("local index {l} outside the embedding table")));
            }
        }
        if let Some(&g) = cols.global.iter().max() {
            if g as usize >= max {
                return Err(ModelError::LengthExceeded { len: g as usize + 1, max });
            }
        }
        Ok(())
    }

    /// Sum of token, global-position and local-index embeddings.
    pub(crate) fn embed(&self, cols: Cols<'_>, gpos: usize, lpos: usize) -> Vec<S> {
        let d = self.config().embed_dim;
        let mut x = Vec::with_capacity(cols.len() * d);
        for i in 0..cols.len() {
            let t = self.p(self.index.tok + cols.tokens[i] as usize * d, d);
            let g = self.p(gpos + cols.global[i] as usize * d, d);
            let l = self.p(lpos + cols.local[i] as usize * d, d);
            x.extend((0..d).map(|j| t[j] + g[j] + l[j]));
        }
        x
    }

    fn embed_backward(&self, dx: &[S], cols: Cols<'_>, gpos: usize, lpos: usize, grads: &mut [S]) {
        let d = self.config().embed_dim;
        for i in 0..cols.len() {
            let row = &dx[i * d..(i + 1) * d];
            for off in [
                self.index.tok + cols.tokens[i] as usize * d,
                gpos + cols.global[i] as usize * d,
                lpos + cols.local[i] as usize * d,
            ] {
                add_into(&mut grads[off..off + d], row);
            }
        }
    }

    fn attn_shape(&self, tq: usize, tk: usize, causal: bool) -> AttnShape {
        let cfg = self.config();
        AttnShape { tq, tk, heads: cfg.heads, dh: cfg.head_dim(), causal }
    }

    fn encoder_forward(&self, cols: Cols<'_>, mut rng: Option<&mut ChaCha8Rng>, keep: bool) -> (Vec<S>, Option<EncTrace<S>>) {
        let cfg = self.config();
        let (d, t, p) = (cfg.embed_dim, cols.len(), cfg.dropout);
        let mut x = self.embed(cols, self.index.enc_gpos, self.index.enc_lpos);
        let emb_mask = dropout(&mut x, p, rng.as_deref_mut());
        let mut layers = Vec::new();
        for l in &self.index.enc {
            let (h1, ln1) = self.ln(&x, l.ln1);
            let qkv = self.lin(&h1, l.qkv, t);
            let mut probs = Vec::new();
            let att = attention(&qkv, 3 * d, &qkv[d..], 3 * d, &qkv[2 * d..], 3 * d, self.attn_shape(t, t, false), &mut probs);
            let mut o = self.lin(&att, l.proj, t);
            let m1 = dropout(&mut o, p, rng.as_deref_mut());
            add_into(&mut x, &o);
            let (h2, ln2) = self.ln(&x, l.ln2);
            let u = self.lin(&h2, l.fc1, t);
            let gu = gelu(&u);
            let mut mm = self.lin(&gu, l.fc2, t);
            let m2 = dropout(&mut mm, p, rng.as_deref_mut());
            add_into(&mut x, &mm);
            if keep {
                layers.push(EncLayerTrace { ln1, h1, qkv, probs, att, m1, ln2, h2, u, gu, m2 });
            }
        }
        let (e, ln_f) = self.ln(&x, self.index.enc_ln);
        (e, keep.then_some(EncTrace { emb_mask, layers, ln_f }))
    }

    fn encoder_backward(&self, trace: EncTrace<S>, cols: Cols<'_>, de: &[S], grads: &mut [S]) {
        let cfg = self.config();
        let (d, t, ff) = (cfg.embed_dim, cols.len(), cfg.embed_dim * cfg.ff_mult);
        let mut dx = vec![S::zero(); t * d];
        self.ln_back(de, &trace.ln_f, self.index.enc_ln, &mut dx, grads);
        for (l, tr) in self.index.enc.iter().zip(trace.layers).rev() {
            let mut dmm = dx.clone();
            apply_mask(&mut dmm, &tr.m2);
            let mut du = vec![S::zero(); t * ff];
            self.lin_back(&dmm, &tr.gu, l.fc2, t, Some(&mut du), grads);
            gelu_backward(&tr.u, &mut du);
            let mut dh2 = vec![S::zero(); t * d];
            self.lin_back(&du, &tr.h2, l.fc1, t, Some(&mut dh2), grads);
            self.ln_back(&dh2, &tr.ln2, l.ln2, &mut dx, grads);

            let mut dout = dx.clone();
            apply_mask(&mut dout, &tr.m1);
            let mut datt = vec![S::zero(); t * d];
            self.lin_back(&dout, &tr.att, l.proj, t, Some(&mut datt), grads);
            let q = &tr.qkv;
            let (dq, dk, dv) =
                attention_backward(&datt, q, 3 * d, &q[d..], 3 * d, &q[2 * d..], 3 * d, &tr.probs, self.attn_shape(t, t, false));
            let dqkv = interleave(&[&dq, &dk, &dv], t, d);
            let mut dh1 = vec![S::zero(); t * d];
            self.lin_back(&dqkv, &tr.h1, l.qkv, t, Some(&mut dh1), grads);
            self.ln_back(&dh1, &tr.ln1, l.ln1, &mut dx, grads);
        }
        apply_mask(&mut dx, &trace.emb_mask);
        self.embed_backward(&dx, cols, self.index.enc_gpos, self.index.enc_lpos, grads);
    }

    /// Decoder over `cols` attending to encoder states `e` (`ti` rows).
    /// Returns `[t, vocab]` logits.
    fn decoder_forward(
        &self,
        e: &[S],
        ti: usize,
        cols: Cols<'_>,
        mut rng: Option<&mut ChaCha8Rng>,
        keep: bool,
    ) -> (Vec<S>, Option<DecTrace<S>>) {
        let cfg = self.config();
        let (d, t, p) = (cfg.embed_dim, cols.len(), cfg.dropout);
        let mut x = self.embed(cols, self.index.dec_gpos, self.index.dec_lpos);
        let emb_mask = dropout(&mut x, p, rng.as_deref_mut());
        let mut layers = Vec::new();
        for l in &self.index.dec {
            let (h1, ln1) = self.ln(&x, l.ln1);
            let qkv = self.lin(&h1, l.qkv, t);
            let mut probs = Vec::new();
            let att = attention(&qkv, 3 * d, &qkv[d..], 3 * d, &qkv[2 * d..], 3 * d, self.attn_shape(t, t, true), &mut probs);
            let mut o = self.lin(&att, l.proj, t);
            let m1 = dropout(&mut o, p, rng.as_deref_mut());
            add_into(&mut x, &o);

            let (h2, ln2) = self.ln(&x, l.ln2);
            let q = self.lin(&h2, l.q, t);
            let kv = self.lin(e, l.kv, ti);
            let mut cprobs = Vec::new();
            let catt = attention(&q, d, &kv, 2 * d, &kv[d..], 2 * d, self.attn_shape(t, ti, false), &mut cprobs);
            let mut co = self.lin(&catt, l.cross_proj, t);
            let m2 = dropout(&mut co, p, rng.as_deref_mut());
            add_into(&mut x, &co);

            let (h3, ln3) = self.ln(&x, l.ln3);
            let u = self.lin(&h3, l.fc1, t);
            let gu = gelu(&u);
            let mut mm = self.lin(&gu, l.fc2, t);
            let m3 = dropout(&mut mm, p, rng.as_deref_mut());
            add_into(&mut x, &mm);
            if keep {
                layers.push(DecLayerTrace { ln1, h1, qkv, probs, att, m1, ln2, h2, q, kv, cprobs, catt, m2, ln3, h3, u, gu, m3 });
            }
        }
        let (hf, ln_f) = self.ln(&x, self.index.dec_ln);
        let logits = self.lin(&hf, self.index.head, t);
        (logits, keep.then_some(DecTrace { emb_mask, layers, ln_f, hf }))
    }

    /// Returns the gradient with respect to the encoder states.
    fn decoder_backward(&self, trace: DecTrace<S>, e: &[S], ti: usize, cols: Cols<'_>, dlogits: &[S], grads: &mut [S]) -> Vec<S> {
        let cfg = self.config();
        let (d, t, ff) = (cfg.embed_dim, cols.len(), cfg.embed_dim * cfg.ff_mult);
        let mut dhf = vec![S::zero(); t * d];
        self.lin_back(dlogits, &trace.hf, self.index.head, t, Some(&mut dhf), grads);
        let mut dx = vec![S::zero(); t * d];
        self.ln_back(&dhf, &trace.ln_f, self.index.dec_ln, &mut dx, grads);
        let mut de = vec![S::zero(); ti * d];
        for (l, tr) in self.index.dec.iter().zip(trace.layers).rev() {
            let mut dmm = dx.clone();
            apply_mask(&mut dmm, &tr.m3);
            let mut du = vec![S::zero(); t * ff];
            self.lin_back(&dmm, &tr.gu, l.fc2, t, Some(&mut du), grads);
            gelu_backward(&tr.u, &mut du);
            let mut dh3 = vec![S::zero(); t * d];
            self.lin_back(&du, &tr.h3, l.fc1, t, Some(&mut dh3), grads);
            self.ln_back(&dh3, &tr.ln3, l.ln3, &mut dx, grads);

            let mut dco = dx.clone();
            apply_mask(&mut dco, &tr.m2);
            let mut dcatt = vec![S::zero(); t * d];
            self.lin_back(&dco, &tr.catt, l.cross_proj, t, Some(&mut dcatt), grads);
            let (dq, dk, dv) = attention_backward(
                &dcatt,
                &tr.q,
                d,
                &tr.kv,
                2 * d,
                &tr.kv[d..],
                2 * d,
                &tr.cprobs,
                self.attn_shape(t, ti, false),
            );
            let dkv = interleave(&[&dk, &dv], ti, d);
            self.lin_back(&dkv, e, l.kv, ti, Some(&mut de), grads);
            let mut dh2 = vec![S::zero(); t * d];
            self.lin_back(&dq, &tr.h2, l.q, t, Some(&mut dh2), grads);
            self.ln_back(&dh2, &tr.ln2, l.ln2, &mut dx, grads);

            let mut dout = dx.clone();
            apply_mask(&mut dout, &tr.m1);
            let mut datt = vec![S::zero(); t * d];
            self.lin_back(&dout, &tr.att, l.proj, t, Some(&mut datt), grads);
            let q = &tr.qkv;
            let (dq, dk, dv) =
                attention_backward(&datt, q, 3 * d, &q[d..], 3 * d, &q[2 * d..], 3 * d, &tr.probs, self.attn_shape(t, t, true));
            let dqkv = interleave(&[&dq, &dk, &dv], t, d);
            let mut dh1 = vec![S::zero(); t * d];
            self.lin_back(&dqkv, &tr.h1, l.qkv, t, Some(&mut dh1), grads);
            self.ln_back(&dh1, &tr.ln1, l.ln1, &mut dx, grads);
        }
        apply_mask(&mut dx, &trace.emb_mask);
        self.embed_backward(&dx, cols, self.index.dec_gpos, self.index.dec_lpos, grads);
        de
    }

    fn check_pair(&self, input: &TokenSeq, output: &TokenSeq) -> Result<(), ModelError> {
        let cfg = self.config();
        self.check_cols(Cols::of(input), cfg.max_input_len)?;
        self.check_cols(Cols::of(output), cfg.max_output_len)?;
        if output.tokens.first() != Some(&BOS) {
            return Err(ModelError::MissingBos);
        }
        Ok(())
    }

    /// Encoder states in evaluation mode.
    pub fn encode(&self, input: &TokenSeq) -> Result<EmbeddingSeq<S>, ModelError> {
        self.check_cols(Cols::of(input), self.config().max_input_len)?;
        let (data, _) = self.encoder_forward(Cols::of(input), None, false);
        Ok(EmbeddingSeq { rows: input.len(), dim: self.config().embed_dim, data })
    }

    /// Next-token logits after `prefix`, recomputing the whole prefix.
    pub fn decode_step(&self, e: &EmbeddingSeq<S>, prefix: &TokenSeq) -> Result<Vec<S>, ModelError> {
        let cols = Cols::of(prefix);
        self.check_cols(cols, self.config().max_output_len)?;
        if prefix.tokens.first() != Some(&BOS) {
            return Err(ModelError::MissingBos);
        }
        let (logits, _) = self.decoder_forward(&e.data, e.rows, cols, None, false);
        let v = self.config().vocab_size;
        Ok(logits[(prefix.len() - 1) * v..].to_vec())
    }

    /// Teacher-forced logits: row `i` scores token `i + 1` of `output`.
    pub fn teacher_forcing_logits(&self, input: &TokenSeq, output: &TokenSeq) -> Result<Vec<Vec<S>>, ModelError> {
        self.check_pair(input, output)?;
        let (e, _) = self.encoder_forward(Cols::of(input), None, false);
        let n = output.len().saturating_sub(1);
        let (logits, _) = self.decoder_forward(&e, input.len(), Cols::of(output).prefix(n), None, false);
        Ok(logits.chunks(self.config().vocab_size).map(<[S]>::to_vec).collect())
    }

    /// Summed next-token cross-entropy of one pair (evaluation mode) and the
    /// number of scored tokens.
    pub fn sequence_loss(&self, input: &TokenSeq, output: &TokenSeq) -> Result<(f64, usize), ModelError> {
        let rows = self.teacher_forcing_logits(input, output)?;
        let mut total = 0.0;
        for (row, &target) in rows.iter().zip(&output.tokens[1..]) {
            total -= log_softmax_row(row)[target as usize].to_f64().unwrap_or(f64::NAN);
        }
        Ok((total, rows.len()))
    }

    /// Accumulates `scale * d(summed cross-entropy)/d(params)` into `grads`
    /// and returns the summed loss and token count. Dropout is active when
    /// `rng` is given.
    pub fn accumulate_gradient(
        &self,
        input: &TokenSeq,
        output: &TokenSeq,
        grads: &mut [S],
        scale: S,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, usize), ModelError> {
        self.check_pair(input, output)?;
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let v = self.config().vocab_size;
        let n = output.len().saturating_sub(1);
        if n == 0 {
            return Ok((0.0, 0));
        }
        let in_cols = Cols::of(input);
        let out_cols = Cols::of(output).prefix(n);
        let (e, enc_trace) = self.encoder_forward(in_cols, rng.as_deref_mut(), true);
        let (mut logits, dec_trace) = self.decoder_forward(&e, input.len(), out_cols, rng.as_deref_mut(), true);
        let mut loss = 0.0;
        for (row, &target) in logits.chunks_mut(v).zip(&output.tokens[1..]) {
            let lp = log_softmax_row(row);
            loss -= lp[target as usize].to_f64().unwrap_or(f64::NAN);
            for (x, l) in row.iter_mut().zip(lp) {
                *x = l.exp() * scale;
            }
            row[target as usize] = row[target as usize] - scale;
        }
        let de = self.decoder_backward(dec_trace.expect("kept"), &e, input.len(), out_cols, &logits, grads);
        self.encoder_backward(enc_trace.expect("kept"), in_cols, &de, grads);
        Ok((loss, n))
    }
}
