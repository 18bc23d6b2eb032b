//! Small transformer encoder over token sequences (post-norm, learned
//! positions, GELU feed-forward).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Matrix;
use crate::text::PAD;

pub const LN_EPS: f64 = 1e-5;
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d: 64,
            num_layers: 2,
            num_heads: 4,
            max_len: 32,
            dropout: 0.2,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.num_heads == 0 || !self.d.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidParameter(format!(
                "d={} must be a positive multiple of num_heads={}",
                self.d, self.num_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidParameter("max_len must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Training mode carries the dropout RNG; evaluation mode is deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub(crate) fn dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode<'_>) -> Var {
    let Mode::Train(rng) = mode else { return x };
    if p <= 0.0 {
        return x;
    }
    let (r, c) = tape.value(x).shape();
    let keep = 1.0 / (1.0 - p);
    let data = (0..r * c)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, Matrix::from_vec(r, c, data))
}

pub(crate) fn linear(tape: &mut Tape, p: &Bound, x: Var, w: &str, b: &str) -> Var {
    let y = tape.matmul(x, p.var(w));
    tape.add_row(y, p.var(b))
}

fn norm(tape: &mut Tape, p: &Bound, x: Var, prefix: &str) -> Var {
    let y = tape.layer_norm(x, LN_EPS);
    let y = tape.mul_row(y, p.var(&format!("{prefix}.gain")));
    tape.add_row(y, p.var(&format!("{prefix}.bias")))
}

pub fn init_lm_params<R: Rng + ?Sized>(cfg: &LmConfig, rng: &mut R, store: &mut ParamStore) {
    let d = cfg.d;
    let bd = 1.0 / (d as f64).sqrt();
    let ff = FFN_MULT * d;
    store.insert("lm.tok_emb", Matrix::uniform(cfg.vocab_size, d, bd, rng));
    store.insert("lm.pos_emb", Matrix::uniform(cfg.max_len, d, bd, rng));
    store.insert("lm.emb_ln.gain", Matrix::filled(1, d, 1.0));
    store.insert("lm.emb_ln.bias", Matrix::zeros(1, d));
    for l in 0..cfg.num_layers {
        let p = format!("lm.layer{l}");
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{p}.{name}"), Matrix::uniform(d, d, bd, rng));
        }
        for name in ["bq", "bk", "bv", "bo"] {
            store.insert(format!("{p}.{name}"), Matrix::zeros(1, d));
        }
        store.insert(format!("{p}.w1"), Matrix::uniform(d, ff, bd, rng));
        store.insert(format!("{p}.b1"), Matrix::zeros(1, ff));
        store.insert(format!("{p}.w2"), Matrix::uniform(ff, d, 1.0 / (ff as f64).sqrt(), rng));
        store.insert(format!("{p}.b2"), Matrix::zeros(1, d));
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{p}.{ln}.gain"), Matrix::filled(1, d, 1.0));
            store.insert(format!("{p}.{ln}.bias"), Matrix::zeros(1, d));
        }
    }
}

/// Token rows of a batch, stacked: sequence `i` occupies
/// `segments[i].0 .. segments[i].0 + segments[i].1`.
#[derive(Debug, Clone)]
pub struct LmOutput {
    pub hidden: Var,
    pub segments: Vec<(usize, usize)>,
}

impl LmOutput {
    /// Row index of each sequence's `[CLS]` token.
    pub fn cls_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|&(s, _)| s).collect()
    }
}

/// Length with trailing `[PAD]` removed.
pub fn unpadded_len(ids: &[usize]) -> usize {
    ids.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1)
}

/// Runs the encoder over all sequences at once. Trailing padding is dropped
/// before attention, so pad positions never influence other tokens.
pub fn lm_forward_tape(
    tape: &mut Tape,
    p: &Bound,
    cfg: &LmConfig,
    seqs: &[&[usize]],
    mode: &mut Mode<'_>,
) -> Result<LmOutput> {
    let mut segments = Vec::with_capacity(seqs.len());
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    for s in seqs {
        if s.len() > cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: s.len(),
                max_len: cfg.max_len,
            });
        }
        let len = unpadded_len(s);
        segments.push((tokens.len(), len));
        for (i, &t) in s[..len].iter().enumerate() {
            if t >= cfg.vocab_size {
                return Err(Error::InvalidParameter(format!(
                    "token id {t} >= vocab_size {}",
                    cfg.vocab_size
                )));
            }
            tokens.push(t);
            positions.push(i);
        }
    }
    let tok = tape.gather_rows(p.var("lm.tok_emb"), tokens);
    let pos = tape.gather_rows(p.var("lm.pos_emb"), positions);
    let x = tape.add(tok, pos);
    let x = norm(tape, p, x, "lm.emb_ln");
    let mut x = dropout(tape, x, cfg.dropout, mode);
    for l in 0..cfg.num_layers {
        let pre = format!("lm.layer{l}");
        let q = linear(tape, p, x, &format!("{pre}.wq"), &format!("{pre}.bq"));
        let k = linear(tape, p, x, &format!("{pre}.wk"), &format!("{pre}.bk"));
        let v = linear(tape, p, x, &format!("{pre}.wv"), &format!("{pre}.bv"));
        let a = tape.self_attention(q, k, v, segments.clone(), cfg.num_heads);
        let o = linear(tape, p, a, &format!("{pre}.wo"), &format!("{pre}.bo"));
        let o = dropout(tape, o, cfg.dropout, mode);
        let r = tape.add(x, o);
        let h = norm(tape, p, r, &format!("{pre}.ln1"));
        let f = linear(tape, p, h, &format!("{pre}.w1"), &format!("{pre}.b1"));
        let f = tape.activation(f, Activation::Gelu);
        let f = linear(tape, p, f, &format!("{pre}.w2"), &format!("{pre}.b2"));
        let f = dropout(tape, f, cfg.dropout, mode);
        let r = tape.add(h, f);
        x = norm(tape, p, r, &format!("{pre}.ln2"));
    }
    Ok(LmOutput {
        hidden: x,
        segments,
    })
}

/// Per-sequence hidden states (padding rows excluded) and the stacked
/// `[CLS]` matrix, in evaluation mode.
pub fn lm_encode(params: &ParamStore, cfg: &LmConfig, seqs: &[&[usize]]) -> Result<(Vec<Matrix>, Matrix)> {
    let mut tape = Tape::new();
    let bound = params.with_prefix("lm.").bind(&mut tape, false);
    let out = lm_forward_tape(&mut tape, &bound, cfg, seqs, &mut Mode::Eval)?;
    let hidden = tape.value(out.hidden);
    let per_seq = out
        .segments
        .iter()
        .map(|&(s, len)| hidden.select_rows(&(s..s + len).collect::<Vec<_>>()))
        .collect();
    Ok((per_seq, hidden.select_rows(&out.cls_rows())))
}

/// `[CLS]` rows only, processed in chunks to bound memory.
pub fn lm_cls(params: &ParamStore, cfg: &LmConfig, seqs: &[&[usize]]) -> Result<Matrix> {
    const CHUNK: usize = 256;
    let mut data = Vec::with_capacity(seqs.len() * cfg.d);
    for chunk in seqs.chunks(CHUNK) {
        let (_, cls) = lm_encode(params, cfg, chunk)?;
        data.extend_from_slice(cls.data());
    }
    Ok(Matrix::from_vec(seqs.len(), cfg.d, data))
}
