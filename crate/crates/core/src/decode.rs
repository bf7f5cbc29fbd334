//! Greedy and beam-search decoding.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::sequence::{BOS, EOS};

/// Extra target positions allowed beyond the source length.
pub const EXTRA_LEN: usize = 10;

fn max_len(model: &Seq2Seq, src_len: usize) -> usize {
    (src_len + EXTRA_LEN).min(model.config.max_len)
}

/// Argmax rollout until `EOS` or the length limit. Output excludes
/// `BOS`/`EOS`.
pub fn greedy(model: &Seq2Seq, src: &[usize], labels: &[u8]) -> Result<Vec<usize>> {
    if src.is_empty() {
        return Err(Error::Empty("source"));
    }
    let memory = model.encode(src, labels)?;
    let mut prefix = alloc::vec![BOS];
    for _ in 0..max_len(model, src.len()) {
        let lp = model.next_token_log_probs(&memory, &prefix)?;
        let best = argmax(&lp);
        if best == EOS {
            break;
        }
        prefix.push(best);
    }
    prefix.remove(0);
    Ok(prefix)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
}

/// Beam search with scores normalised by `length^length_penalty`, the
/// length counting the final `EOS`.
///
/// Each step expands every live hypothesis, ranks all continuations by
/// total log-probability and moves `EOS` continuations ranked within the
/// first `beam` to the finished set. The search ends once `beam`
/// hypotheses have finished or the length limit is hit.
pub fn beam_search(
    model: &Seq2Seq,
    src: &[usize],
    labels: &[u8],
    beam: usize,
    length_penalty: f64,
) -> Result<Vec<usize>> {
    if src.is_empty() {
        return Err(Error::Empty("source"));
    }
    if beam == 0 {
        return Err(Error::Config {
            field: "beam",
            reason: "must be at least 1".into(),
        });
    }
    let memory = model.encode(src, labels)?;
    let limit = max_len(model, src.len());
    let norm = |h: &Hyp, len: usize| h.score / libm::pow(len as f64, length_penalty);
    let mut live = alloc::vec![Hyp {
        tokens: alloc::vec![BOS],
        score: 0.0,
    }];
    let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();
    for step in 0..=limit {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let lp = model.next_token_log_probs(&memory, &h.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() && (step < limit || tok == EOS) {
                    cands.push((h.score + l, hi, tok));
                }
            }
        }
        // stable: ties keep hypothesis then token order
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::with_capacity(beam);
        for (rank, &(score, hi, tok)) in cands.iter().enumerate() {
            if tok == EOS {
                if rank < beam {
                    let h = Hyp {
                        tokens: live[hi].tokens[1..].to_vec(),
                        score,
                    };
                    let len = h.tokens.len() + 1;
                    finished.push((norm(&h, len), h.tokens));
                }
            } else if next.len() < beam {
                let mut tokens = live[hi].tokens.clone();
                tokens.push(tok);
                next.push(Hyp { tokens, score });
            }
            if next.len() >= beam && rank + 1 >= beam {
                break;
            }
        }
        if finished.len() >= beam || next.is_empty() {
            break;
        }
        live = next;
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for (s, t) in finished {
        if best.as_ref().is_none_or(|b| s > b.0) {
            best = Some((s, t));
        }
    }
    Ok(best.map(|b| b.1).unwrap_or_default())
}

/// Decodes with the beam settings of the model's config.
pub fn translate(model: &Seq2Seq, src: &[usize], labels: &[u8]) -> Result<Vec<usize>> {
    beam_search(model, src, labels, model.config.beam, model.config.length_penalty)
}
