//! Reference computations and synthetic data shared by the test targets.
#![allow(dead_code)]

use grammask_core::graph::{Graph, Var};
use grammask_core::params::ParamStore;
use grammask_core::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Membership straight from its definition: `i`'s constituent reaches `l`
/// when the height beats every distance between them.
pub fn oracle_membership(tau: &[f64], h: &[f64], mu: f64) -> Vec<Vec<f64>> {
    let n = h.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for l in 0..n {
            m[i][l] = if l == i {
                1.0
            } else {
                let (a, b) = if l < i { (l, i) } else { (i, l) };
                let mx = tau[a..b].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                sigmoid((h[i] - mx) / mu)
            };
        }
    }
    m
}

/// Sums over every span `[l, r]` around `i` and every `j` in it.
pub fn oracle_dependency(tau: &[f64], h: &[f64], mu: f64) -> Vec<Vec<f64>> {
    let n = h.len();
    let m = oracle_membership(tau, h, mu);
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let left = |l: usize| {
            let prev = if l == 0 { 0.0 } else { m[i][l - 1] };
            (m[i][l] - prev).max(0.0)
        };
        let right = |r: usize| {
            let next = if r + 1 == n { 0.0 } else { m[i][r + 1] };
            (m[i][r] - next).max(0.0)
        };
        for l in 0..=i {
            for r in i..n {
                let w = left(l) * right(r);
                let z: f64 = (l..=r).map(|k| h[k].exp()).sum();
                for j in l..=r {
                    p[i][j] += w * h[j].exp() / z;
                }
            }
        }
    }
    p
}

pub fn random_profile(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> (Vec<f64>, Vec<f64>, f64) {
    let tau = (0..n.saturating_sub(1)).map(|_| rng.random_range(-scale..scale)).collect();
    let h = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    let mu = rng.random_range(0.3..2.0);
    (tau, h, mu)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + eps;
            let up = f(&p);
            p[k] = x[k] - eps;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `sum(x ∘ w)` on the tape.
pub fn contract(g: &mut Graph, x: Var, w: &Matrix) -> Var {
    let w = g.constant(w.clone());
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

/// Largest relative error over the parameters of `store`, checking every
/// scalar of small tensors and `per_param` random scalars of larger ones.
/// Gradients below `floor` are compared absolutely against it (a key bias
/// under softmax has an exactly zero gradient and a roundoff-sized
/// numeric one).
pub fn check_store(
    store: &ParamStore,
    analytic: &[Matrix],
    per_param: usize,
    floor: f64,
    rng: &mut ChaCha8Rng,
    eval: impl Fn(&ParamStore) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let mut s = store.clone();
    for (id, grad) in store.ids().zip(analytic) {
        let len = store.value(id).data().len();
        let picks: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..len)).collect()
        };
        for k in picks {
            let x = store.value(id).data()[k];
            s.value_mut(id).data_mut()[k] = x + EPS;
            let up = eval(&s);
            s.value_mut(id).data_mut()[k] = x - EPS;
            let down = eval(&s);
            s.value_mut(id).data_mut()[k] = x;
            let num = (up - down) / (2.0 * EPS);
            let e = rel_err(grad.data()[k], num, floor);
            if e > worst.0 {
                worst = (e, format!("{}[{k}] analytic {} numeric {num}", store.name(id), grad.data()[k]));
            }
        }
    }
    worst
}

pub fn grads_in_store_order(store: &ParamStore, g: &Graph, loss: Var) -> Vec<Matrix> {
    let gr = g.backward(loss);
    store
        .ids()
        .map(|id| {
            gr.param(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(store.value(id).rows(), store.value(id).cols()))
        })
        .collect()
}

/// Copy-task sentence over `vocab` content symbols, written as tokens
/// `w0`, `w1`, ...
pub fn copy_sentence(rng: &mut ChaCha8Rng, vocab: usize, min_len: usize, max_len: usize) -> Vec<String> {
    let n = rng.random_range(min_len..=max_len);
    (0..n).map(|_| format!("w{}", rng.random_range(0..vocab))).collect()
}

/// Bracket language: matched pairs nested up to `max_depth` levels. Each
/// pair prints as `o<depth><kind>` ... `c<depth><kind>`. Returns tokens and
/// the 1-based spans of every pair and of every multi-pair sequence.
pub fn bracket_sentence(
    rng: &mut ChaCha8Rng,
    kinds: usize,
    max_depth: usize,
) -> (Vec<String>, Vec<(usize, usize)>) {
    fn go(
        rng: &mut ChaCha8Rng,
        kinds: usize,
        max_depth: usize,
        depth: usize,
        toks: &mut Vec<String>,
        spans: &mut Vec<(usize, usize)>,
    ) {
        let items = if depth == 0 { 1 } else { rng.random_range(1..=2) };
        let start = toks.len() + 1;
        for _ in 0..items {
            let k = (b'a' + rng.random_range(0..kinds) as u8) as char;
            let s = toks.len() + 1;
            toks.push(format!("o{depth}{k}"));
            if depth + 1 < max_depth && rng.random_bool(0.7) {
                go(rng, kinds, max_depth, depth + 1, toks, spans);
            }
            toks.push(format!("c{depth}{k}"));
            spans.push((s, toks.len()));
        }
        if items > 1 {
            spans.push((start, toks.len()));
        }
    }
    let mut toks = Vec::new();
    let mut spans = Vec::new();
    go(rng, kinds, max_depth, 0, &mut toks, &mut spans);
    (toks, spans)
}

/// PTB-style labeled tree for a bracket sentence, rebuilt from its spans.
pub fn bracket_gold_tree(tokens: &[String], spans: &[(usize, usize)]) -> String {
    fn emit(tokens: &[String], spans: &[(usize, usize)], lo: usize, hi: usize, out: &mut String) {
        // children of [lo, hi]: maximal spans strictly inside, or tokens
        out.push_str("(X");
        let mut pos = lo;
        while pos <= hi {
            let child = spans
                .iter()
                .filter(|&&(a, b)| a == pos && b <= hi && (a, b) != (lo, hi))
                .max_by_key(|&&(_, b)| b);
            out.push(' ');
            match child {
                Some(&(a, b)) if b > a => {
                    emit(tokens, spans, a, b, out);
                    pos = b + 1;
                }
                _ => {
                    out.push_str(&format!("(T {})", tokens[pos - 1]));
                    pos += 1;
                }
            }
        }
        out.push(')');
    }
    let mut s = String::new();
    emit(tokens, spans, 1, tokens.len(), &mut s);
    s
}
