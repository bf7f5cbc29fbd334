//! Syntax-guided self-attention and the transformer layers built on it.
//!
//! A guided head computes `W ∘ S(QKᵀ / √d) · V`. From scratch, `S` is the
//! logistic function and `W = P_D`; in the style used for fine-tuning
//! existing checkpoints, `S` is the row softmax and `W = P_D + 1`, so a zero
//! mask recovers ordinary attention exactly.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::estimator::DependencyMatrix;
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;
use crate::params::{Init, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    /// Logistic activation, weight `P_D`.
    #[default]
    FromScratch,
    /// Softmax activation, weight `P_D + 1`.
    PretrainedStyle,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::FromScratch => "from-scratch",
            AttentionMode::PretrainedStyle => "pretrained-style",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "from-scratch" => Some(AttentionMode::FromScratch),
            "pretrained-style" => Some(AttentionMode::PretrainedStyle),
            _ => None,
        }
    }
}

/// Mask handed to a guided layer: the dependency matrix on the tape and the
/// regime it is applied in.
#[derive(Debug, Clone, Copy)]
pub struct Guide {
    pub mask: Var,
    pub mode: AttentionMode,
}

/// One head on the tape. `keep[j] == false` hides key `j`.
pub fn head_on(
    g: &mut Graph,
    guide: Option<Guide>,
    q: Var,
    k: Var,
    v: Var,
    keep: Option<&[bool]>,
    causal: bool,
) -> Result<Var> {
    let (n, d) = g.shape(q);
    let (m, dk) = g.shape(k);
    if d != dk || g.shape(v).0 != m || d == 0 {
        return Err(Error::Shape {
            op: "attention",
            expected: (m, d),
            got: g.shape(k),
        });
    }
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
    let weights = match guide {
        None => g.softmax(scores, keep, causal)?,
        Some(guide) => {
            if g.shape(guide.mask) != (n, m) {
                return Err(Error::Shape {
                    op: "guided attention mask",
                    expected: (n, m),
                    got: g.shape(guide.mask),
                });
            }
            match guide.mode {
                AttentionMode::FromScratch => {
                    let mut a = g.sigmoid(scores);
                    if let Some(keep) = keep {
                        a = g.mask_cols(a, keep)?;
                    }
                    g.mul(guide.mask, a)?
                }
                AttentionMode::PretrainedStyle => {
                    let a = g.softmax(scores, keep, causal)?;
                    let w = g.add_scalar(guide.mask, 1.0);
                    g.mul(w, a)?
                }
            }
        }
    };
    g.matmul(weights, v)
}

/// Single-head guided attention on plain matrices.
pub fn guided_attention(
    mask: &DependencyMatrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mode: AttentionMode,
    pad_mask: Option<&[bool]>,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let m = g.constant(mask.as_matrix().clone());
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = head_on(&mut g, Some(Guide { mask: m, mode }), q, k, v, pad_mask, false)?;
    Ok(g.value(out).clone())
}

/// Plain softmax attention on matrices, for comparison with guided heads.
pub fn softmax_attention(q: &Matrix, k: &Matrix, v: &Matrix, pad_mask: Option<&[bool]>) -> Result<Matrix> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = head_on(&mut g, None, q, k, v, pad_mask, false)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut reg = |name: &str, r: usize, c: usize, init: Init| {
            store.register(format!("{prefix}.{name}"), r, c, init, rng)
        };
        Self {
            wq: reg("wq", d, d, Init::TruncNormal(std)),
            bq: reg("bq", 1, d, Init::Zeros),
            wk: reg("wk", d, d, Init::TruncNormal(std)),
            bk: reg("bk", 1, d, Init::Zeros),
            wv: reg("wv", d, d, Init::TruncNormal(std)),
            bv: reg("bv", 1, d, Init::Zeros),
            wo: reg("wo", d, d, Init::TruncNormal(std)),
            bo: reg("bo", 1, d, Init::Zeros),
        }
    }
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Multi-head attention; every head of a guided call shares the same mask.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_on(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    x_query: Var,
    x_kv: Var,
    heads: usize,
    guide: Option<Guide>,
    keep: Option<&[bool]>,
    causal: bool,
) -> Result<Var> {
    let d = g.shape(x_query).1;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config {
            field: "heads",
            reason: format!("{heads} heads do not divide model dim {d}"),
        });
    }
    let dh = d / heads;
    let q = linear(g, store, x_query, p.wq, p.bq)?;
    let k = linear(g, store, x_kv, p.wk, p.bk)?;
    let v = linear(g, store, x_kv, p.wv, p.bv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        outs.push(head_on(g, guide, qh, kh, vh, keep, causal)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, store, cat, p.wo, p.bo)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ffn: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: store.register(format!("{prefix}.w1"), d, ffn, Init::TruncNormal(std), rng),
            b1: store.register(format!("{prefix}.b1"), 1, ffn, Init::Zeros, rng),
            w2: store.register(format!("{prefix}.w2"), ffn, d, Init::TruncNormal(std), rng),
            b2: store.register(format!("{prefix}.b2"), 1, d, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = linear(g, store, x, self.w1, self.b1)?;
        let h = g.relu(h);
        linear(g, store, h, self.w2, self.b2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        Self {
            gamma: store.register(format!("{prefix}.g"), 1, d, Init::Ones, rng),
            beta: store.register(format!("{prefix}.b"), 1, d, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.layer_norm(x, gm, bt)
    }
}

/// Pre-norm encoder layer: `h + Attn(LN(h))`, then `h + FFN(LN(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub ln_attn: NormParams,
    pub ffn: FeedForwardParams,
    pub ln_ffn: NormParams,
}

impl EncoderLayerParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ffn: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: AttentionParams::register(store, &format!("{prefix}.attn"), d, std, rng),
            ln_attn: NormParams::register(store, &format!("{prefix}.ln_attn"), d, rng),
            ffn: FeedForwardParams::register(store, &format!("{prefix}.ffn"), d, ffn, std, rng),
            ln_ffn: NormParams::register(store, &format!("{prefix}.ln_ffn"), d, rng),
        }
    }

    /// With a guide the self-attention is syntax-guided, otherwise plain.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        heads: usize,
        guide: Option<Guide>,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let x = self.ln_attn.forward(g, store, hidden)?;
        let a = multi_head_on(g, store, &self.attn, x, x, heads, guide, keep, false)?;
        let h = g.add(hidden, a)?;
        let x = self.ln_ffn.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, x)?;
        g.add(h, f)
    }
}

/// Encoder layer on plain matrices.
pub fn encoder_layer_forward(
    hidden: &Matrix,
    mask: Option<&DependencyMatrix>,
    mode: AttentionMode,
    store: &ParamStore,
    params: &EncoderLayerParams,
    heads: usize,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let h = g.constant(hidden.clone());
    let guide = mask.map(|m| Guide {
        mask: g.constant(m.as_matrix().clone()),
        mode,
    });
    let out = params.forward(&mut g, store, h, heads, guide, None)?;
    Ok(g.value(out).clone())
}

/// Pre-norm decoder layer: causal self-attention, cross-attention, FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub ln_self: NormParams,
    pub cross_attn: AttentionParams,
    pub ln_cross: NormParams,
    pub ffn: FeedForwardParams,
    pub ln_ffn: NormParams,
}

impl DecoderLayerParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ffn: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            self_attn: AttentionParams::register(store, &format!("{prefix}.self_attn"), d, std, rng),
            ln_self: NormParams::register(store, &format!("{prefix}.ln_self"), d, rng),
            cross_attn: AttentionParams::register(store, &format!("{prefix}.cross_attn"), d, std, rng),
            ln_cross: NormParams::register(store, &format!("{prefix}.ln_cross"), d, rng),
            ffn: FeedForwardParams::register(store, &format!("{prefix}.ffn"), d, ffn, std, rng),
            ln_ffn: NormParams::register(store, &format!("{prefix}.ln_ffn"), d, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        memory: Var,
        heads: usize,
    ) -> Result<Var> {
        let x = self.ln_self.forward(g, store, hidden)?;
        let a = multi_head_on(g, store, &self.self_attn, x, x, heads, None, None, true)?;
        let h = g.add(hidden, a)?;
        let x = self.ln_cross.forward(g, store, h)?;
        let c = multi_head_on(g, store, &self.cross_attn, x, memory, heads, None, None, false)?;
        let h = g.add(h, c)?;
        let x = self.ln_ffn.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, x)?;
        g.add(h, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn pretrained_style_zero_mask_is_softmax_attention() {
        let q = m(&[&[0.1, 0.4], &[-0.3, 0.2], &[1.0, -1.0]]);
        let k = m(&[&[0.5, 0.1], &[0.2, -0.7], &[0.3, 0.3]]);
        let v = m(&[&[1.0, 2.0], &[3.0, -1.0], &[0.0, 0.5]]);
        let zero = DependencyMatrix::from_matrix(Matrix::zeros(3, 3)).unwrap();
        let guided = guided_attention(&zero, &q, &k, &v, AttentionMode::PretrainedStyle, None).unwrap();
        let plain = softmax_attention(&q, &k, &v, None).unwrap();
        assert_eq!(guided, plain);
    }

    #[test]
    fn from_scratch_zero_mask_annihilates() {
        let q = m(&[&[0.1, 0.4], &[-0.3, 0.2]]);
        let zero = DependencyMatrix::from_matrix(Matrix::zeros(2, 2)).unwrap();
        let out = guided_attention(&zero, &q, &q, &q, AttentionMode::FromScratch, None).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn from_scratch_identity_mask_gates_own_value() {
        let q = m(&[&[0.3, -0.2, 0.5], &[0.1, 0.9, -0.4]]);
        let k = m(&[&[0.7, 0.1, 0.0], &[-0.2, 0.4, 0.6]]);
        let v = m(&[&[1.0, -2.0, 0.5], &[0.25, 3.0, -1.0]]);
        let eye = DependencyMatrix::from_matrix(Matrix::identity(2)).unwrap();
        let out = guided_attention(&eye, &q, &k, &v, AttentionMode::FromScratch, None).unwrap();
        for i in 0..2 {
            let s: f64 = (0..3).map(|c| q[(i, c)] * k[(i, c)]).sum::<f64>() / libm::sqrt(3.0);
            let gate = 1.0 / (1.0 + libm::exp(-s));
            for c in 0..3 {
                assert!((out[(i, c)] - gate * v[(i, c)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pad_keys_are_ignored() {
        let q = m(&[&[0.3, -0.2], &[0.1, 0.9], &[5.0, 5.0]]);
        let v = m(&[&[1.0, -2.0], &[0.25, 3.0], &[100.0, 100.0]]);
        let keep = [true, true, false];
        let p = DependencyMatrix::from_matrix(Matrix::filled(3, 3, 1.0 / 3.0)).unwrap();
        for mode in [AttentionMode::FromScratch, AttentionMode::PretrainedStyle] {
            let a = guided_attention(&p, &q, &q, &v, mode, Some(&keep)).unwrap();
            let mut v2 = v.clone();
            v2.row_mut(2).iter_mut().for_each(|x| *x = -7.0);
            let b = guided_attention(&p, &q, &q, &v2, mode, Some(&keep)).unwrap();
            for i in 0..2 {
                assert_eq!(a.row(i), b.row(i));
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let q = Matrix::zeros(2, 3);
        let k = Matrix::zeros(2, 4);
        let p = DependencyMatrix::from_matrix(Matrix::identity(2)).unwrap();
        assert!(guided_attention(&p, &q, &k, &k, AttentionMode::FromScratch, None).is_err());
        let p3 = DependencyMatrix::from_matrix(Matrix::identity(3)).unwrap();
        assert!(guided_attention(&p3, &q, &q, &q, AttentionMode::FromScratch, None).is_err());
    }
}
