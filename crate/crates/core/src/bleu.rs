//! Corpus-level BLEU-4.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Count used in place of a zero n-gram match count.
pub const SMOOTHING_EPS: f64 = 0.1;

fn counts<'a>(tokens: &'a [&'a str], n: usize) -> BTreeMap<&'a [&'a str], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// BLEU over whitespace-tokenised lines, scaled to `[0, 100]`.
///
/// Clipped n-gram precisions for n = 1..4 are pooled over the corpus and
/// combined by geometric mean with a brevity penalty. A zero match
/// count is replaced by [`SMOOTHING_EPS`]. Orders with no hypothesis
/// n-grams at all are left out of the mean.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            op: "bleu",
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = counts(&h, n);
            let rc = counts(&r, n);
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    // orders longer than every hypothesis drop out of the mean
    let orders = totals.iter().filter(|&&t| t > 0).count();
    let mut log_sum = 0.0;
    for n in 0..orders {
        let m = if matches[n] == 0 {
            SMOOTHING_EPS
        } else {
            matches[n] as f64
        };
        log_sum += libm::log(m / totals[n] as f64);
    }
    let bp = if hyp_len < ref_len {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    } else {
        1.0
    };
    Ok(100.0 * bp * libm::exp(log_sum / orders as f64))
}
