//! Encoder-decoder transformer with a parser head guiding selected encoder
//! layers.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use rand::Rng;

use crate::attention::{AttentionMode, DecoderLayerParams, EncoderLayerParams, Guide, NormParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::inducer::{self, InducerConfig, InducerParams, ProfileVars, SyntacticProfile};
use crate::matrix::Matrix;
use crate::params::{Init, ParamId, ParamStore};
use crate::sequence::{BOS, EOS, MASK, PAD};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub conv_layers: usize,
    pub conv_half_width: usize,
    pub bpe_dim: usize,
    /// 1-based encoder layers whose self-attention is guided.
    pub masked_layers: Vec<usize>,
    pub attention_mode: AttentionMode,
    pub lambda: f64,
    pub mlm_rate: f64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub beam: usize,
    pub length_penalty: f64,
    pub tie_mlm_head: bool,
    pub init_std: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 4,
            d_model: 512,
            ffn_dim: 1024,
            conv_layers: 3,
            conv_half_width: 1,
            bpe_dim: 256,
            masked_layers: alloc::vec![1],
            attention_mode: AttentionMode::FromScratch,
            lambda: 0.47,
            mlm_rate: 0.15,
            lr: 5e-4,
            warmup_steps: 4000,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            label_smoothing: 0.1,
            weight_decay: 1e-4,
            beam: 5,
            length_penalty: 1.0,
            tie_mlm_head: false,
            init_std: 0.02,
            max_len: crate::estimator::MAX_LEN,
            seed: 1,
        }
    }
}

fn cfg_err(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Config {
        field,
        reason: reason.into(),
    }
}

fn parse_num<T: core::str::FromStr>(field: &'static str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| cfg_err(field, format!("cannot parse {v:?}")))
}

/// Keys understood by [`ModelConfig::set`], in echo order.
pub const MODEL_KEYS: &[&str] = &[
    "encoder_layers",
    "decoder_layers",
    "heads",
    "d_model",
    "ffn_dim",
    "conv_layers",
    "conv_half_width",
    "bpe_dim",
    "masked_layers",
    "attention_mode",
    "lambda",
    "mlm_rate",
    "lr",
    "warmup_steps",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "label_smoothing",
    "weight_decay",
    "beam",
    "length_penalty",
    "tie_mlm_head",
    "init_std",
    "max_len",
    "seed",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(cfg_err("lambda", format!("{} is outside [0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.mlm_rate) {
            return Err(cfg_err("mlm_rate", format!("{} is outside [0, 1]", self.mlm_rate)));
        }
        if let Some(&k) = self
            .masked_layers
            .iter()
            .find(|&&k| k == 0 || k > self.encoder_layers)
        {
            return Err(cfg_err(
                "masked_layers",
                format!("layer {k} is not in 1..={}", self.encoder_layers),
            ));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(cfg_err(
                "heads",
                format!("{} heads do not divide d_model {}", self.heads, self.d_model),
            ));
        }
        if self.ffn_dim == 0 || self.bpe_dim == 0 {
            return Err(cfg_err("ffn_dim", "dimensions must be positive"));
        }
        if self.beam == 0 {
            return Err(cfg_err("beam", "must be at least 1"));
        }
        if self.max_len == 0 || self.max_len > crate::estimator::MAX_LEN {
            return Err(cfg_err(
                "max_len",
                format!("must be in 1..={}", crate::estimator::MAX_LEN),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(cfg_err("label_smoothing", "must be in [0, 1)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(cfg_err("lr", "must be positive"));
        }
        Ok(())
    }

    /// Sets one field from its text form; `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "encoder_layers" => self.encoder_layers = parse_num("encoder_layers", v)?,
            "decoder_layers" => self.decoder_layers = parse_num("decoder_layers", v)?,
            "heads" => self.heads = parse_num("heads", v)?,
            "d_model" => self.d_model = parse_num("d_model", v)?,
            "ffn_dim" => self.ffn_dim = parse_num("ffn_dim", v)?,
            "conv_layers" => self.conv_layers = parse_num("conv_layers", v)?,
            "conv_half_width" => self.conv_half_width = parse_num("conv_half_width", v)?,
            "bpe_dim" => self.bpe_dim = parse_num("bpe_dim", v)?,
            "masked_layers" => {
                self.masked_layers = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|x| parse_num("masked_layers", x.trim()))
                        .collect::<Result<_>>()?
                };
                self.masked_layers.sort_unstable();
                self.masked_layers.dedup();
            }
            "attention_mode" => {
                self.attention_mode = AttentionMode::parse(v).ok_or_else(|| {
                    cfg_err("attention_mode", format!("expected from-scratch or pretrained-style, got {v:?}"))
                })?
            }
            "lambda" => self.lambda = parse_num("lambda", v)?,
            "mlm_rate" => self.mlm_rate = parse_num("mlm_rate", v)?,
            "lr" => self.lr = parse_num("lr", v)?,
            "warmup_steps" => self.warmup_steps = parse_num("warmup_steps", v)?,
            "adam_beta1" => self.adam_beta1 = parse_num("adam_beta1", v)?,
            "adam_beta2" => self.adam_beta2 = parse_num("adam_beta2", v)?,
            "adam_eps" => self.adam_eps = parse_num("adam_eps", v)?,
            "label_smoothing" => self.label_smoothing = parse_num("label_smoothing", v)?,
            "weight_decay" => self.weight_decay = parse_num("weight_decay", v)?,
            "beam" => self.beam = parse_num("beam", v)?,
            "length_penalty" => self.length_penalty = parse_num("length_penalty", v)?,
            "tie_mlm_head" => self.tie_mlm_head = parse_num("tie_mlm_head", v)?,
            "init_std" => self.init_std = parse_num("init_std", v)?,
            "max_len" => self.max_len = parse_num("max_len", v)?,
            "seed" => self.seed = parse_num("seed", v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Value of a key in the form accepted by [`ModelConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "encoder_layers" => self.encoder_layers.to_string(),
            "decoder_layers" => self.decoder_layers.to_string(),
            "heads" => self.heads.to_string(),
            "d_model" => self.d_model.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "conv_layers" => self.conv_layers.to_string(),
            "conv_half_width" => self.conv_half_width.to_string(),
            "bpe_dim" => self.bpe_dim.to_string(),
            "masked_layers" => {
                if self.masked_layers.is_empty() {
                    "none".to_string()
                } else {
                    let parts: Vec<String> = self.masked_layers.iter().map(ToString::to_string).collect();
                    parts.join(",")
                }
            }
            "attention_mode" => self.attention_mode.as_str().to_string(),
            "lambda" => self.lambda.to_string(),
            "mlm_rate" => self.mlm_rate.to_string(),
            "lr" => self.lr.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "label_smoothing" => self.label_smoothing.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "beam" => self.beam.to_string(),
            "length_penalty" => self.length_penalty.to_string(),
            "tie_mlm_head" => self.tie_mlm_head.to_string(),
            "init_std" => self.init_std.to_string(),
            "max_len" => self.max_len.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// `key = value` lines for every field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for k in MODEL_KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap());
        }
        s
    }

    /// Parses `key = value` lines, skipping blanks and `#` comments.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err("config", format!("expected key = value, got {line:?}")))?;
            if !c.set(k.trim(), v)? {
                return Err(cfg_err("config", format!("unknown key {:?}", k.trim())));
            }
        }
        Ok(c)
    }

    pub fn inducer_config(&self) -> InducerConfig {
        InducerConfig {
            d_model: self.d_model,
            conv_layers: self.conv_layers,
            half_width: self.conv_half_width,
            bpe_dim: self.bpe_dim,
            heads: self.heads,
        }
    }

    pub fn is_guided(&self, layer: usize) -> bool {
        self.masked_layers.contains(&layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    pub parser: InducerParams,
    pub encoder: Vec<EncoderLayerParams>,
    pub encoder_norm: NormParams,
    pub decoder: Vec<DecoderLayerParams>,
    pub decoder_norm: NormParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    /// `None` when the MLM head reuses the source embeddings.
    pub mlm_w: Option<ParamId>,
    pub mlm_b: ParamId,
}

/// Sinusoidal position encodings, `n × d`.
pub fn positions(n: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / libm::pow(10000.0, pair / d as f64);
            m.row_mut(pos)[i] = if i % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            };
        }
    }
    m
}

/// Encoder outputs of one source sentence on the tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub memory: Var,
    pub profile: Option<ProfileVars>,
    pub mask: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Seq2Seq {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, src_vocab: usize, tgt_vocab: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if src_vocab <= MASK || tgt_vocab <= MASK {
            return Err(cfg_err("vocab", "vocabularies must hold the reserved tokens"));
        }
        let d = config.d_model;
        let std = config.init_std;
        let mut store = ParamStore::new();
        let src_embed = store.register("src.embed", src_vocab, d, Init::TruncNormal(std), rng);
        let tgt_embed = store.register("tgt.embed", tgt_vocab, d, Init::TruncNormal(std), rng);
        let parser = InducerParams::register(&mut store, "parser", config.inducer_config(), std, rng);
        let encoder = (0..config.encoder_layers)
            .map(|k| EncoderLayerParams::register(&mut store, &format!("enc.{k}"), d, config.ffn_dim, std, rng))
            .collect();
        let encoder_norm = NormParams::register(&mut store, "enc.norm", d, rng);
        let decoder = (0..config.decoder_layers)
            .map(|k| DecoderLayerParams::register(&mut store, &format!("dec.{k}"), d, config.ffn_dim, std, rng))
            .collect();
        let decoder_norm = NormParams::register(&mut store, "dec.norm", d, rng);
        let out_w = store.register("out.w", d, tgt_vocab, Init::TruncNormal(std), rng);
        let out_b = store.register("out.b", 1, tgt_vocab, Init::Zeros, rng);
        let mlm_w = (!config.tie_mlm_head)
            .then(|| store.register("mlm.w", d, src_vocab, Init::TruncNormal(std), rng));
        let mlm_b = store.register("mlm.b", 1, src_vocab, Init::Zeros, rng);
        Ok(Self {
            config,
            src_vocab,
            tgt_vocab,
            store,
            params: ModelParams {
                src_embed,
                tgt_embed,
                parser,
                encoder,
                encoder_norm,
                decoder,
                decoder_norm,
                out_w,
                out_b,
                mlm_w,
                mlm_b,
            },
        })
    }

    fn check_ids(ids: &[usize], vocab: usize, what: &'static str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty(what));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::ParamMismatch(format!("{what}: id {bad} outside vocabulary of {vocab}")));
        }
        Ok(())
    }

    fn embed_on(&self, g: &mut Graph, table: ParamId, ids: &[usize]) -> Result<Var> {
        let d = self.config.d_model;
        let t = g.param(&self.store, table);
        let e = g.gather(t, ids)?;
        let e = g.scale(e, libm::sqrt(d as f64));
        let pos = g.constant(positions(ids.len(), d));
        g.add(e, pos)
    }

    /// Runs the encoder; the parser head is evaluated only when some layer
    /// is guided, or when `with_profile` asks for it.
    pub fn encode_on(&self, g: &mut Graph, src: &[usize], labels: &[u8], with_profile: bool) -> Result<EncoderVars> {
        Self::check_ids(src, self.src_vocab, "source")?;
        if src.len() > self.config.max_len {
            return Err(Error::SequenceCap {
                len: src.len(),
                cap: self.config.max_len,
            });
        }
        let x = self.embed_on(g, self.params.src_embed, src)?;
        let need = with_profile || !self.config.masked_layers.is_empty();
        let profile = if need {
            Some(inducer::profile_on(g, &self.store, &self.params.parser, x, labels)?)
        } else {
            None
        };
        let mask = match profile {
            Some(p) if !self.config.masked_layers.is_empty() => Some(g.dependency(p.tau, p.height, p.mu)?),
            _ => None,
        };
        let mut h = x;
        for (k, layer) in self.params.encoder.iter().enumerate() {
            let guide = match mask {
                Some(m) if self.config.is_guided(k + 1) => Some(Guide {
                    mask: m,
                    mode: self.config.attention_mode,
                }),
                _ => None,
            };
            h = layer.forward(g, &self.store, h, self.config.heads, guide, None)?;
        }
        let memory = self.params.encoder_norm.forward(g, &self.store, h)?;
        Ok(EncoderVars { memory, profile, mask })
    }

    /// Next-token logits for every position of `tgt_in`, `|tgt_in| × V_t`.
    pub fn decode_on(&self, g: &mut Graph, memory: Var, tgt_in: &[usize]) -> Result<Var> {
        Self::check_ids(tgt_in, self.tgt_vocab, "target")?;
        let mut h = self.embed_on(g, self.params.tgt_embed, tgt_in)?;
        for layer in &self.params.decoder {
            h = layer.forward(g, &self.store, h, memory, self.config.heads)?;
        }
        let h = self.params.decoder_norm.forward(g, &self.store, h)?;
        let w = g.param(&self.store, self.params.out_w);
        let b = g.param(&self.store, self.params.out_b);
        let y = g.matmul(h, w)?;
        g.add_bias(y, b)
    }

    /// Source-vocabulary logits from encoder outputs.
    pub fn mlm_logits_on(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let y = match self.params.mlm_w {
            Some(w) => {
                let w = g.param(&self.store, w);
                g.matmul(hidden, w)?
            }
            None => {
                let e = g.param(&self.store, self.params.src_embed);
                g.matmul_t(hidden, e)?
            }
        };
        let b = g.param(&self.store, self.params.mlm_b);
        g.add_bias(y, b)
    }

    /// Encoder output for one sentence.
    pub fn encode(&self, src: &[usize], labels: &[u8]) -> Result<Matrix> {
        let mut g = Graph::new();
        let e = self.encode_on(&mut g, src, labels, false)?;
        Ok(g.value(e.memory).clone())
    }

    /// Parser-head profile for one sentence.
    pub fn parse(&self, src: &[usize], labels: &[u8]) -> Result<SyntacticProfile> {
        Self::check_ids(src, self.src_vocab, "source")?;
        let mut g = Graph::new();
        let x = self.embed_on(&mut g, self.params.src_embed, src)?;
        let p = inducer::profile_on(&mut g, &self.store, &self.params.parser, x, labels)?;
        SyntacticProfile::new(
            g.value(p.tau).data().to_vec(),
            g.value(p.height).data().to_vec(),
            g.value(p.mu)[(0, 0)],
        )
    }

    /// Mean cross-entropy of the MLM head at `targets` (`(position, id)`),
    /// given encoder outputs; 0 without targets.
    pub fn mlm_head_loss(&self, encoder_out: &Matrix, targets: &[(usize, usize)]) -> Result<f64> {
        if targets.is_empty() {
            return Ok(0.0);
        }
        let mut g = Graph::new();
        let h = g.constant(encoder_out.clone());
        let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let ids: Vec<usize> = targets.iter().map(|t| t.1).collect();
        let h = g.gather(h, &rows)?;
        let logits = self.mlm_logits_on(&mut g, h)?;
        let ce = g.cross_entropy(logits, &ids, 0.0)?;
        Ok(g.value(ce)[(0, 0)] / targets.len() as f64)
    }

    /// Summed token-level negative log-likelihood of `tgt` (no smoothing),
    /// with the decoder fed `BOS tgt` and trained towards `tgt EOS`.
    pub fn target_nll(&self, src: &[usize], labels: &[u8], tgt: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let e = self.encode_on(&mut g, src, labels, false)?;
        let (tin, tout) = teacher_forcing(tgt);
        let logits = self.decode_on(&mut g, e.memory, &tin)?;
        let ce = g.cross_entropy(logits, &tout, 0.0)?;
        Ok(g.value(ce)[(0, 0)])
    }

    /// Log-probabilities of the next target token after `prefix`, which must
    /// start with `BOS`; `PAD`, `BOS` and `MASK` get `-inf`.
    pub fn next_token_log_probs(&self, memory: &Matrix, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let m = g.constant(memory.clone());
        let logits = self.decode_on(&mut g, m, prefix)?;
        let row = g.value(logits).row(prefix.len() - 1);
        let mut out = row.to_vec();
        for &banned in &[PAD, BOS, MASK] {
            out[banned] = f64::NEG_INFINITY;
        }
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(out.iter().map(|x| libm::exp(x - max)).sum::<f64>());
        out.iter_mut().for_each(|x| *x -= lse);
        Ok(out)
    }
}

/// Decoder input `BOS y` and output `y EOS`.
pub fn teacher_forcing(tgt: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut tin = Vec::with_capacity(tgt.len() + 1);
    tin.push(BOS);
    tin.extend_from_slice(tgt);
    let mut tout = tgt.to_vec();
    tout.push(EOS);
    (tin, tout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn micro() -> ModelConfig {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 1,
            heads: 2,
            d_model: 8,
            ffn_dim: 12,
            conv_layers: 1,
            bpe_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_round_trip() {
        let mut c = micro();
        c.masked_layers = alloc::vec![1, 2];
        c.lambda = 0.35;
        c.attention_mode = AttentionMode::PretrainedStyle;
        let back = ModelConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let mut none = micro();
        none.masked_layers.clear();
        assert_eq!(ModelConfig::from_kv(&none.to_kv()).unwrap(), none);
    }

    #[test]
    fn config_validation() {
        let mut c = micro();
        c.lambda = 1.5;
        assert!(matches!(c.validate(), Err(Error::Config { field: "lambda", .. })));
        let mut c = micro();
        c.masked_layers = alloc::vec![3];
        assert!(matches!(c.validate(), Err(Error::Config { field: "masked_layers", .. })));
        assert!(ModelConfig::from_kv("bogus = 1").is_err());
        assert!(ModelConfig::from_kv("lambda = x").is_err());
    }

    #[test]
    fn forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Seq2Seq::new(micro(), 10, 9, &mut rng).unwrap();
        let enc = m.encode(&[5, 6, 7], &[0, 0, 0]).unwrap();
        assert_eq!(enc.shape(), (3, 8));
        let lp = m.next_token_log_probs(&enc, &[BOS, 5]).unwrap();
        assert_eq!(lp.len(), 9);
        let total: f64 = lp.iter().filter(|x| x.is_finite()).map(|x| libm::exp(*x)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(lp[PAD], f64::NEG_INFINITY);
        assert!(m.encode(&[], &[]).is_err());
        assert!(m.encode(&[42], &[0]).is_err());
        let p = m.parse(&[5, 6, 7], &[0, 2, 2]).unwrap();
        assert_eq!((p.tau.len(), p.height.len()), (2, 3));
    }

    #[test]
    fn uniform_mlm_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = micro();
        c.init_std = 0.0;
        let m = Seq2Seq::new(c, 7, 7, &mut rng).unwrap();
        let h = Matrix::filled(3, 8, 0.3);
        let l = m.mlm_head_loss(&h, &[(0, 5), (2, 6)]).unwrap();
        assert!((l - libm::log(7.0)).abs() < 1e-12);
        assert_eq!(m.mlm_head_loss(&h, &[]).unwrap(), 0.0);
    }

    #[test]
    fn positions_start_with_sin_cos() {
        let p = positions(2, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p[(1, 0)] - libm::sin(1.0)).abs() < 1e-15);
        assert!((p[(1, 2)] - libm::sin(0.01)).abs() < 1e-15);
    }
}
