//! Parser head: grammar features, syntactic distance and syntactic height.
//!
//! Token embeddings plus projected BPE-label embeddings pass through a stack
//! of symmetric convolutions and one self-attention block to give features
//! `s`. Distances come from a width-2 convolution over adjacent features,
//! heights from a width-1 convolution over each feature:
//!
//! ```text
//! tau_i = w1_tau · tanh(W2_tau [s_i; s_{i+1}]) + b1_tau
//! h_i   = w1_h   · tanh(W2_h s_i + b2_h)       + b1_h
//! ```

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{self, AttentionParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;
use crate::params::{Init, ParamId, ParamStore};
use crate::sequence::{BPE_INTACT, BPE_PAD, BPE_SUBWORD};

/// Induced grammar of one sentence of `n` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntacticProfile {
    /// `n − 1` distances; entry `i` sits between tokens `i` and `i + 1`.
    pub tau: Vec<f64>,
    /// `n` heights.
    pub height: Vec<f64>,
    /// Positive temperature.
    pub mu: f64,
}

impl SyntacticProfile {
    pub fn new(tau: Vec<f64>, height: Vec<f64>, mu: f64) -> Result<Self> {
        if height.is_empty() {
            return Err(Error::Empty("height"));
        }
        if tau.len() + 1 != height.len() {
            return Err(Error::LengthMismatch {
                op: "syntactic profile",
                left: tau.len(),
                right: height.len(),
            });
        }
        if !(mu > 0.0) {
            return Err(Error::NonFinite("mu"));
        }
        Ok(Self { tau, height, mu })
    }

    pub fn len(&self) -> usize {
        self.height.len()
    }

    pub fn is_empty(&self) -> bool {
        self.height.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InducerConfig {
    pub d_model: usize,
    pub conv_layers: usize,
    /// Convolution kernels span `2 * half_width + 1` tokens.
    pub half_width: usize,
    pub bpe_dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InducerParams {
    pub config: InducerConfig,
    pub bpe_table: ParamId,
    pub bpe_proj_w: ParamId,
    pub bpe_proj_b: ParamId,
    pub bpe_ln_gamma: ParamId,
    pub bpe_ln_beta: ParamId,
    pub convs: Vec<ConvBlock>,
    pub attn: AttentionParams,
    pub attn_ln_gamma: ParamId,
    pub attn_ln_beta: ParamId,
    /// `2d × d`, applied to `[s_i; s_{i+1}]`.
    pub dist_w2: ParamId,
    /// `d × 1`
    pub dist_w1: ParamId,
    pub dist_b1: ParamId,
    /// `d × d`
    pub height_w2: ParamId,
    pub height_b2: ParamId,
    pub height_w1: ParamId,
    pub height_b1: ParamId,
    /// Pre-softplus temperature.
    pub mu_raw: ParamId,
}

/// `softplus⁻¹(1)`, so the temperature starts at 1.
pub const MU_RAW_INIT: f64 = 0.541_324_854_612_918_1;

impl InducerParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: InducerConfig,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let d = config.d_model;
        let w = 2 * config.half_width + 1;
        let mut reg = |name: &str, r: usize, c: usize, init: Init| {
            store.register(format!("{prefix}.{name}"), r, c, init, rng)
        };
        let bpe_table = reg("bpe.table", 3, config.bpe_dim, Init::TruncNormal(std));
        let bpe_proj_w = reg("bpe.proj.w", config.bpe_dim, d, Init::TruncNormal(std));
        let bpe_proj_b = reg("bpe.proj.b", 1, d, Init::Zeros);
        let bpe_ln_gamma = reg("bpe.ln.g", 1, d, Init::Ones);
        let bpe_ln_beta = reg("bpe.ln.b", 1, d, Init::Zeros);
        let convs = (0..config.conv_layers)
            .map(|k| ConvBlock {
                weight: reg(&format!("conv.{k}.w"), w * d, d, Init::TruncNormal(std)),
                bias: reg(&format!("conv.{k}.b"), 1, d, Init::Zeros),
                ln_gamma: reg(&format!("conv.{k}.ln.g"), 1, d, Init::Ones),
                ln_beta: reg(&format!("conv.{k}.ln.b"), 1, d, Init::Zeros),
            })
            .collect();
        let attn = AttentionParams {
            wq: reg("attn.wq", d, d, Init::TruncNormal(std)),
            bq: reg("attn.bq", 1, d, Init::Zeros),
            wk: reg("attn.wk", d, d, Init::TruncNormal(std)),
            bk: reg("attn.bk", 1, d, Init::Zeros),
            wv: reg("attn.wv", d, d, Init::TruncNormal(std)),
            bv: reg("attn.bv", 1, d, Init::Zeros),
            wo: reg("attn.wo", d, d, Init::TruncNormal(std)),
            bo: reg("attn.bo", 1, d, Init::Zeros),
        };
        let attn_ln_gamma = reg("attn.ln.g", 1, d, Init::Ones);
        let attn_ln_beta = reg("attn.ln.b", 1, d, Init::Zeros);
        Self {
            config,
            bpe_table,
            bpe_proj_w,
            bpe_proj_b,
            bpe_ln_gamma,
            bpe_ln_beta,
            convs,
            attn,
            attn_ln_gamma,
            attn_ln_beta,
            dist_w2: reg("dist.w2", 2 * d, d, Init::TruncNormal(std)),
            dist_w1: reg("dist.w1", d, 1, Init::TruncNormal(std)),
            dist_b1: reg("dist.b1", 1, 1, Init::Zeros),
            height_w2: reg("height.w2", d, d, Init::TruncNormal(std)),
            height_b2: reg("height.b2", 1, d, Init::Zeros),
            height_w1: reg("height.w1", d, 1, Init::TruncNormal(std)),
            height_b1: reg("height.b1", 1, 1, Init::Zeros),
            mu_raw: reg("mu", 1, 1, Init::Constant(MU_RAW_INIT)),
        }
    }
}

fn check_labels(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            op: "bpe labels",
            left: labels.len(),
            right: n,
        });
    }
    if labels
        .iter()
        .any(|&l| l != BPE_INTACT && l != BPE_PAD && l != BPE_SUBWORD)
    {
        return Err(Error::LabelAlignment(format!("labels outside {{0,1,2}}: {labels:?}")));
    }
    Ok(())
}

/// Grammar features `s` (`n × d`) on the tape.
///
/// With `keep`, positions where it is false are zeroed before every
/// convolution and hidden from attention, so they cannot reach real tokens.
pub fn features_on(
    g: &mut Graph,
    store: &ParamStore,
    p: &InducerParams,
    embeddings: Var,
    labels: &[u8],
    keep: Option<&[bool]>,
) -> Result<Var> {
    let (n, d) = g.shape(embeddings);
    if n == 0 {
        return Err(Error::Empty("embeddings"));
    }
    if d != p.config.d_model {
        return Err(Error::Shape {
            op: "induce_features",
            expected: (n, p.config.d_model),
            got: (n, d),
        });
    }
    check_labels(labels, n)?;

    let ids: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let table = g.param(store, p.bpe_table);
    let bpe = g.gather(table, &ids)?;
    let w = g.param(store, p.bpe_proj_w);
    let b = g.param(store, p.bpe_proj_b);
    let bpe = g.matmul(bpe, w)?;
    let bpe = g.add_bias(bpe, b)?;
    let (lg, lb) = (g.param(store, p.bpe_ln_gamma), g.param(store, p.bpe_ln_beta));
    let bpe = g.layer_norm(bpe, lg, lb)?;

    let mut h = g.add(embeddings, bpe)?;
    let half = p.config.half_width as isize;
    for block in &p.convs {
        if let Some(k) = keep {
            h = g.mask_rows(h, k)?;
        }
        let window: Vec<Var> = (-half..=half).map(|o| g.shift(h, o)).collect();
        let x = g.concat_cols(&window)?;
        let w = g.param(store, block.weight);
        let b = g.param(store, block.bias);
        let x = g.matmul(x, w)?;
        let x = g.add_bias(x, b)?;
        let x = g.tanh(x);
        let (lg, lb) = (g.param(store, block.ln_gamma), g.param(store, block.ln_beta));
        h = g.layer_norm(x, lg, lb)?;
    }
    if let Some(k) = keep {
        h = g.mask_rows(h, k)?;
    }
    let a = attention::multi_head_on(g, store, &p.attn, h, h, p.config.heads, None, keep, false)?;
    let a = g.add(h, a)?;
    let (lg, lb) = (g.param(store, p.attn_ln_gamma), g.param(store, p.attn_ln_beta));
    let a = g.layer_norm(a, lg, lb)?;
    g.add(a, bpe)
}

/// Distances, `(n − 1) × 1`.
pub fn distance_on(g: &mut Graph, store: &ParamStore, p: &InducerParams, s: Var) -> Result<Var> {
    let (n, _) = g.shape(s);
    let gaps = n.saturating_sub(1);
    let lo = g.slice_rows(s, 0, gaps)?;
    let hi = g.slice_rows(s, n.min(1), gaps)?;
    let pair = g.concat_cols(&[lo, hi])?;
    let w2 = g.param(store, p.dist_w2);
    let x = g.matmul(pair, w2)?;
    let x = g.tanh(x);
    let w1 = g.param(store, p.dist_w1);
    let b1 = g.param(store, p.dist_b1);
    let x = g.matmul(x, w1)?;
    g.add_bias(x, b1)
}

/// Heights, `n × 1`.
pub fn height_on(g: &mut Graph, store: &ParamStore, p: &InducerParams, s: Var) -> Result<Var> {
    let w2 = g.param(store, p.height_w2);
    let b2 = g.param(store, p.height_b2);
    let x = g.matmul(s, w2)?;
    let x = g.add_bias(x, b2)?;
    let x = g.tanh(x);
    let w1 = g.param(store, p.height_w1);
    let b1 = g.param(store, p.height_b1);
    let x = g.matmul(x, w1)?;
    g.add_bias(x, b1)
}

/// Temperature `softplus(mu_raw)`, `1 × 1`.
pub fn mu_on(g: &mut Graph, store: &ParamStore, p: &InducerParams) -> Var {
    let raw = g.param(store, p.mu_raw);
    g.softplus(raw)
}

/// Tape handles of a full parser-head evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ProfileVars {
    pub features: Var,
    pub tau: Var,
    pub height: Var,
    pub mu: Var,
}

pub fn profile_on(
    g: &mut Graph,
    store: &ParamStore,
    p: &InducerParams,
    embeddings: Var,
    labels: &[u8],
) -> Result<ProfileVars> {
    let features = features_on(g, store, p, embeddings, labels, None)?;
    let tau = distance_on(g, store, p, features)?;
    let height = height_on(g, store, p, features)?;
    let mu = mu_on(g, store, p);
    Ok(ProfileVars {
        features,
        tau,
        height,
        mu,
    })
}

pub fn induce_features(
    embeddings: &Matrix,
    labels: &[u8],
    store: &ParamStore,
    p: &InducerParams,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let x = g.constant(embeddings.clone());
    let s = features_on(&mut g, store, p, x, labels, None)?;
    Ok(g.value(s).clone())
}

pub fn compute_distance(features: &Matrix, store: &ParamStore, p: &InducerParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let s = g.constant(features.clone());
    let t = distance_on(&mut g, store, p, s)?;
    Ok(g.value(t).data().to_vec())
}

pub fn compute_height(features: &Matrix, store: &ParamStore, p: &InducerParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let s = g.constant(features.clone());
    let h = height_on(&mut g, store, p, s)?;
    Ok(g.value(h).data().to_vec())
}

/// Full parser head on one sentence.
pub fn induce_profile(
    embeddings: &Matrix,
    labels: &[u8],
    store: &ParamStore,
    p: &InducerParams,
) -> Result<SyntacticProfile> {
    let mut g = Graph::new();
    let x = g.constant(embeddings.clone());
    let v = profile_on(&mut g, store, p, x, labels)?;
    SyntacticProfile::new(
        g.value(v.tau).data().to_vec(),
        g.value(v.height).data().to_vec(),
        g.value(v.mu)[(0, 0)],
    )
}
