//! Combined MLM and translation objective and the training loop state.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::model::{teacher_forcing, Seq2Seq};
use crate::optim::{inverse_sqrt_lr, Adam, AdamConfig};
use crate::sequence::{apply_mlm_mask, make_batch, TokenSequence};

/// `λ·mlm + (1 − λ)·mt`.
pub fn combined_loss(mlm_loss: f64, mt_loss: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config {
            field: "lambda",
            reason: format!("{lambda} is outside [0, 1]"),
        });
    }
    if !mlm_loss.is_finite() || !mt_loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(lambda * mlm_loss + (1.0 - lambda) * mt_loss)
}

/// One training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub src: TokenSequence,
    /// Target ids without `BOS`/`EOS`.
    pub tgt: Vec<usize>,
}

/// Masked copy of one source and the `(position, original id)` targets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MlmView {
    pub ids: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
}

/// Masks every source of `batch` with one draw per eligible token.
pub fn mask_sources(batch: &[Example], rate: f64, max_len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<MlmView>> {
    let seqs: Vec<TokenSequence> = batch.iter().map(|e| e.src.clone()).collect();
    let b = make_batch(&seqs, max_len)?;
    let (masked, targets) = apply_mlm_mask(&b, rate, rng);
    let mut views: Vec<MlmView> = (0..batch.len())
        .map(|r| MlmView {
            ids: masked.ids[r][..masked.lengths[r]].to_vec(),
            targets: Vec::new(),
        })
        .collect();
    for t in targets {
        views[t.row].targets.push((t.pos, t.id));
    }
    Ok(views)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// Label-smoothed translation cross-entropy per target token.
    pub mt_loss: f64,
    /// MLM cross-entropy per masked token; 0 without targets.
    pub mlm_loss: f64,
    pub combined: f64,
}

/// Range of the induced distances and heights over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileStats {
    pub tau_min: f64,
    pub tau_max: f64,
    pub tau_mean: f64,
    pub height_min: f64,
    pub height_max: f64,
    pub height_mean: f64,
}

fn stats(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max, values.iter().sum::<f64>() / values.len() as f64)
}

/// Statistics of the parser head over the clean sources of `batch`.
pub fn profile_stats(model: &Seq2Seq, batch: &[Example]) -> ProfileStats {
    let (mut tau, mut height) = (Vec::new(), Vec::new());
    for e in batch {
        if let Ok(p) = model.parse(&e.src.ids, &e.src.bpe_labels) {
            tau.extend(p.tau);
            height.extend(p.height);
        }
    }
    let (tau_min, tau_max, tau_mean) = stats(&tau);
    let (height_min, height_max, height_mean) = stats(&height);
    ProfileStats {
        tau_min,
        tau_max,
        tau_mean,
        height_min,
        height_max,
        height_mean,
    }
}

/// Combined loss of a batch and, with `backward`, its gradient per stored
/// parameter.
///
/// The translation pass reads the clean source, the MLM pass reads the
/// masked one through the same encoder. Both losses are averaged over the
/// batch's tokens. `views` may be empty when `lambda` is 0.
pub fn batch_objective(
    model: &Seq2Seq,
    batch: &[Example],
    views: &[MlmView],
    lambda: f64,
    backward: bool,
) -> Result<(LossBreakdown, Option<Vec<Matrix>>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    combined_loss(0.0, 0.0, lambda)?;
    let use_mlm = lambda > 0.0 && views.iter().any(|v| !v.targets.is_empty());
    if use_mlm && views.len() != batch.len() {
        return Err(Error::LengthMismatch {
            op: "mlm views",
            left: views.len(),
            right: batch.len(),
        });
    }
    let n_mt: usize = batch.iter().map(|e| e.tgt.len() + 1).sum();
    let n_mlm: usize = if use_mlm { views.iter().map(|v| v.targets.len()).sum() } else { 0 };
    let smoothing = model.config.label_smoothing;
    let mut grads: Option<Vec<Matrix>> = backward.then(|| {
        model
            .store
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    });
    let (mut mt_sum, mut mlm_sum) = (0.0, 0.0);
    for (k, e) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let enc = model.encode_on(&mut g, &e.src.ids, &e.src.bpe_labels, false)?;
        let (tin, tout) = teacher_forcing(&e.tgt);
        let logits = model.decode_on(&mut g, enc.memory, &tin)?;
        let mt = g.cross_entropy(logits, &tout, smoothing)?;
        mt_sum += g.value(mt)[(0, 0)];
        let mut loss = g.scale(mt, (1.0 - lambda) / n_mt as f64);
        if use_mlm && !views[k].targets.is_empty() {
            let v = &views[k];
            let menc = model.encode_on(&mut g, &v.ids, &e.src.bpe_labels, false)?;
            let rows: Vec<usize> = v.targets.iter().map(|t| t.0).collect();
            let ids: Vec<usize> = v.targets.iter().map(|t| t.1).collect();
            let h = g.gather(menc.memory, &rows)?;
            let logits = model.mlm_logits_on(&mut g, h)?;
            let mlm = g.cross_entropy(logits, &ids, 0.0)?;
            mlm_sum += g.value(mlm)[(0, 0)];
            let weighted = g.scale(mlm, lambda / n_mlm as f64);
            loss = g.add(loss, weighted)?;
        }
        if let Some(acc) = grads.as_mut() {
            let gr = g.backward(loss);
            for (slot, id) in acc.iter_mut().zip(model.store.ids()) {
                if let Some(d) = gr.param(id) {
                    slot.add_assign(d);
                }
            }
        }
    }
    let mt_loss = mt_sum / n_mt as f64;
    let mlm_loss = if n_mlm > 0 { mlm_sum / n_mlm as f64 } else { 0.0 };
    let combined = if mt_loss.is_finite() && mlm_loss.is_finite() {
        combined_loss(mlm_loss, mt_loss, lambda)?
    } else {
        f64::NAN
    };
    Ok((
        LossBreakdown {
            mt_loss,
            mlm_loss,
            combined,
        },
        grads,
    ))
}

/// Mean unsmoothed negative log-likelihood per target token.
pub fn validation_loss(model: &Seq2Seq, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut total = 0.0;
    let mut tokens = 0;
    for e in data {
        total += model.target_nll(&e.src.ids, &e.src.bpe_labels, &e.tgt)?;
        tokens += e.tgt.len() + 1;
    }
    Ok(total / tokens as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub mt_loss: f64,
    pub mlm_loss: f64,
    pub combined: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Example indices used at `step` (1-based): consecutive slices through a
/// fresh seeded permutation per epoch.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let start = (step.saturating_sub(1) as u128) * batch_size as u128;
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = u128::MAX;
    let mut order: Vec<usize> = Vec::new();
    for k in 0..batch_size as u128 {
        let pos = start + k;
        let e = pos / n as u128;
        if e != epoch {
            epoch = e;
            order = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2 + e as u64);
            order.shuffle(&mut rng);
        }
        out.push(order[(pos % n as u128) as usize]);
    }
    out
}

/// Model, optimizer and the randomness that drives MLM masking.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Seq2Seq,
    pub optimizer: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Seeded generator for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

impl Trainer {
    pub fn new(model: Seq2Seq) -> Self {
        let c = &model.config;
        let optimizer = Adam::new(
            AdamConfig {
                beta1: c.adam_beta1,
                beta2: c.adam_beta2,
                eps: c.adam_eps,
                weight_decay: c.weight_decay,
            },
            &model.store,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(1);
        Self {
            model,
            optimizer,
            step: 0,
            rng,
        }
    }

    /// One optimizer update on the combined loss of `batch`.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<StepMetrics> {
        let lambda = self.model.config.lambda;
        let views = if lambda > 0.0 {
            mask_sources(batch, self.model.config.mlm_rate, self.model.config.max_len, &mut self.rng)?
        } else {
            Vec::new()
        };
        let (loss, grads) = batch_objective(&self.model, batch, &views, lambda, true)?;
        let grads = grads.expect("gradients requested");
        let grad_norm = libm::sqrt(grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum());
        if !loss.combined.is_finite() || !grad_norm.is_finite() {
            let s = profile_stats(&self.model, batch);
            return Err(Error::NumericalFailure(format!(
                "step {}: mt_loss {} mlm_loss {} grad_norm {}; tau min {} max {} mean {}; height min {} max {} mean {}",
                self.step + 1,
                loss.mt_loss,
                loss.mlm_loss,
                grad_norm,
                s.tau_min,
                s.tau_max,
                s.tau_mean,
                s.height_min,
                s.height_max,
                s.height_mean
            )));
        }
        self.step += 1;
        let c = &self.model.config;
        let lr = inverse_sqrt_lr(c.lr, c.warmup_steps, self.step);
        self.optimizer.step(&mut self.model.store, &grads, lr)?;
        Ok(StepMetrics {
            step: self.step,
            mt_loss: loss.mt_loss,
            mlm_loss: loss.mlm_loss,
            combined: loss.combined,
            grad_norm,
            lr,
        })
    }
}
