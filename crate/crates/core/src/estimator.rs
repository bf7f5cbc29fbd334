//! Dependency distribution estimator.
//!
//! Given syntactic distances `tau` (one per gap), heights `h` (one per token)
//! and a temperature `mu`, token `l` belongs to the smallest legal constituent
//! of token `i` with probability `sigmoid((h_i - max tau between l and i) / mu)`.
//! Differencing that membership along each side yields the left and right
//! margin distributions, and the parent distribution of token `i` mixes a
//! height softmax over every candidate span `[l, r]`:
//!
//! ```text
//! p_D(j | i) = sum over l <= min(i, j), r >= max(i, j) of
//!              p_L(l | i) * p_R(r | i) * exp(h_j) / sum_{l <= k <= r} exp(h_k)
//! ```
//!
//! All indices in this module are 0-based and spans are inclusive.
//! Boundary conventions: membership of `i` in its own constituent is 1, and
//! membership just outside the sentence is 0, so every margin row and every
//! row of the dependency matrix sums to one.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::inducer::SyntacticProfile;
use crate::matrix::Matrix;

/// Longest sentence the estimator accepts.
pub const MAX_LEN: usize = 256;

/// Row-stochastic `n × n` matrix; entry `(i, j)` is the probability that
/// token `j` is the parent of token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyMatrix(Matrix);

impl DependencyMatrix {
    /// Wraps an arbitrary square matrix, e.g. a constant mask for tests.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::Shape {
                op: "dependency_matrix",
                expected: (m.rows(), m.rows()),
                got: m.shape(),
            });
        }
        Ok(Self(m))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    #[inline]
    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Intermediate span distributions, exposed for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanDistributions {
    /// `membership[(i, l)] = p(l ∈ C(w_i))`
    pub membership: Matrix,
    /// `left[(i, l)] = p_L(l | i)`
    pub left: Matrix,
    /// `right[(i, r)] = p_R(r | i)`
    pub right: Matrix,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn check_profile(profile: &SyntacticProfile) -> Result<usize> {
    let n = profile.len();
    if n == 0 {
        return Err(Error::Empty("syntactic profile"));
    }
    if n > MAX_LEN {
        return Err(Error::SequenceCap {
            len: n,
            cap: MAX_LEN,
        });
    }
    if !profile.tau.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("tau"));
    }
    if !profile.height.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("height"));
    }
    if !(profile.mu.is_finite() && profile.mu > 0.0) {
        return Err(Error::NonFinite("mu"));
    }
    Ok(n)
}

/// Membership matrix plus, for every off-diagonal entry, the gap index that
/// attains the max (leftmost on ties) and the pre-sigmoid logit.
/// Diagonal entries hold `usize::MAX` and a zero logit.
fn membership_with_argmax(profile: &SyntacticProfile) -> (Matrix, Vec<usize>, Vec<f64>) {
    let n = profile.len();
    let tau = &profile.tau;
    let h = &profile.height;
    let mu = profile.mu;
    let mut m = Matrix::zeros(n, n);
    let mut arg = vec![usize::MAX; n * n];
    let mut logits = vec![0.0; n * n];
    for i in 0..n {
        m[(i, i)] = 1.0;
        // walking left, gap l sits between tokens l and l + 1
        let mut best = f64::NEG_INFINITY;
        let mut best_gap = usize::MAX;
        for l in (0..i).rev() {
            if tau[l] >= best {
                best = tau[l];
                best_gap = l;
            }
            let x = (h[i] - best) / mu;
            m[(i, l)] = sigmoid(x);
            arg[i * n + l] = best_gap;
            logits[i * n + l] = x;
        }
        let mut best = f64::NEG_INFINITY;
        let mut best_gap = usize::MAX;
        for l in i + 1..n {
            let g = l - 1;
            if tau[g] > best {
                best = tau[g];
                best_gap = g;
            }
            let x = (h[i] - best) / mu;
            m[(i, l)] = sigmoid(x);
            arg[i * n + l] = best_gap;
            logits[i * n + l] = x;
        }
    }
    (m, arg, logits)
}

/// `p(l ∈ C(w_i))` for every token pair.
pub fn constituent_membership(profile: &SyntacticProfile) -> Result<Matrix> {
    check_profile(profile)?;
    Ok(membership_with_argmax(profile).0)
}

/// Left and right margin distributions from a membership matrix.
///
/// Entries outside the admissible side of `i` are zero, differences are
/// clamped at zero against rounding.
pub fn margin_distributions(membership: &Matrix) -> (Matrix, Matrix) {
    let n = membership.rows();
    let mut left = Matrix::zeros(n, n);
    let mut right = Matrix::zeros(n, n);
    for i in 0..n {
        for l in 0..=i {
            let prev = if l == 0 { 0.0 } else { membership[(i, l - 1)] };
            left[(i, l)] = (membership[(i, l)] - prev).max(0.0);
        }
        for r in i..n {
            let next = if r + 1 == n { 0.0 } else { membership[(i, r + 1)] };
            right[(i, r)] = (membership[(i, r)] - next).max(0.0);
        }
    }
    (left, right)
}

pub fn span_distributions(profile: &SyntacticProfile) -> Result<SpanDistributions> {
    let membership = constituent_membership(profile)?;
    let (left, right) = margin_distributions(&membership);
    Ok(SpanDistributions {
        membership,
        left,
        right,
    })
}

/// Probability that each token of `[l, r]` is the root of that span.
pub fn root_distribution(height: &[f64], l: usize, r: usize) -> Result<Vec<f64>> {
    if l > r || r >= height.len() {
        return Err(Error::InvalidSpan {
            l,
            r,
            n: height.len(),
        });
    }
    let span = &height[l..=r];
    let max = span.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = span.iter().map(|&x| libm::exp(x - max)).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Reference estimator: enumerates every span `[l, r]` around each token and
/// adds its weighted root distribution. `O(n^4)`; used to audit the fast path.
pub fn dependency_matrix_by_spans(profile: &SyntacticProfile) -> Result<DependencyMatrix> {
    let n = check_profile(profile)?;
    let spans = span_distributions(profile)?;
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        for l in 0..=i {
            let pl = spans.left[(i, l)];
            if pl == 0.0 {
                continue;
            }
            for r in i..n {
                let w = pl * spans.right[(i, r)];
                if w == 0.0 {
                    continue;
                }
                let root = root_distribution(&profile.height, l, r)?;
                for (k, q) in root.iter().enumerate() {
                    p[(i, l + k)] += w * q;
                }
            }
        }
    }
    Ok(DependencyMatrix(p))
}

/// Saved forward state for the vector-Jacobian product of the estimator.
#[derive(Debug, Clone)]
pub struct EstimatorTape {
    n: usize,
    mu: f64,
    membership: Matrix,
    argmax: Vec<usize>,
    logits: Vec<f64>,
    left: Matrix,
    right: Matrix,
    left_active: Vec<bool>,
    right_active: Vec<bool>,
    /// `exp(h_k - max h)`
    exps: Vec<f64>,
    /// `z[(l, r)] = sum_{l <= k <= r} exps[k]` for `l <= r`
    z: Matrix,
    /// `s[(i, j)]` such that `p[(i, j)] = exps[j] * s[(i, j)]`
    s: Matrix,
}

/// Gradient of a scalar objective with respect to a syntactic profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileGrad {
    pub tau: Vec<f64>,
    pub height: Vec<f64>,
    pub mu: f64,
}

/// Fast estimator (`O(n^3)`) using cumulative sums over span margins.
pub fn dependency_matrix(profile: &SyntacticProfile) -> Result<DependencyMatrix> {
    dependency_matrix_with_tape(profile).map(|(p, _)| p)
}

pub fn dependency_matrix_with_tape(
    profile: &SyntacticProfile,
) -> Result<(DependencyMatrix, EstimatorTape)> {
    let n = check_profile(profile)?;
    let (membership, argmax, logits) = membership_with_argmax(profile);

    let mut left = Matrix::zeros(n, n);
    let mut right = Matrix::zeros(n, n);
    let mut left_active = vec![false; n * n];
    let mut right_active = vec![false; n * n];
    for i in 0..n {
        for l in 0..=i {
            let prev = if l == 0 { 0.0 } else { membership[(i, l - 1)] };
            let d = membership[(i, l)] - prev;
            if d >= 0.0 {
                left[(i, l)] = d;
                left_active[i * n + l] = true;
            }
        }
        for r in i..n {
            let next = if r + 1 == n { 0.0 } else { membership[(i, r + 1)] };
            let d = membership[(i, r)] - next;
            if d >= 0.0 {
                right[(i, r)] = d;
                right_active[i * n + r] = true;
            }
        }
    }

    let hmax = profile
        .height
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = profile
        .height
        .iter()
        .map(|&h| libm::exp(h - hmax))
        .collect();
    let mut z = Matrix::zeros(n, n);
    for l in 0..n {
        let mut acc = 0.0;
        for r in l..n {
            acc += exps[r];
            z[(l, r)] = acc;
        }
    }

    let mut s = Matrix::zeros(n, n);
    let mut p = Matrix::zeros(n, n);
    let mut col = vec![0.0; n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        // col[l] = sum_{r >= i} A(l, r), row[r] = sum_{l <= i} A(l, r)
        col[..=i].iter_mut().for_each(|x| *x = 0.0);
        row[i..].iter_mut().for_each(|x| *x = 0.0);
        for l in 0..=i {
            let pl = left[(i, l)];
            if pl == 0.0 {
                continue;
            }
            for r in i..n {
                let a = pl * right[(i, r)] / z[(l, r)];
                col[l] += a;
                row[r] += a;
            }
        }
        let mut acc = 0.0;
        for j in 0..=i {
            acc += col[j];
            s[(i, j)] = acc;
        }
        let mut acc = 0.0;
        for j in (i + 1..n).rev() {
            acc += row[j];
            s[(i, j)] = acc;
        }
        for j in 0..n {
            p[(i, j)] = exps[j] * s[(i, j)];
        }
    }

    let tape = EstimatorTape {
        n,
        mu: profile.mu,
        membership,
        argmax,
        logits,
        left,
        right,
        left_active,
        right_active,
        exps,
        z,
        s,
    };
    Ok((DependencyMatrix(p), tape))
}

impl EstimatorTape {
    /// Pulls `grad = dL/dP` back to `(tau, height, mu)`.
    pub fn backward(&self, grad: &Matrix) -> ProfileGrad {
        let n = self.n;
        let mut g_exps = vec![0.0; n];
        let mut g_left = Matrix::zeros(n, n);
        let mut g_right = Matrix::zeros(n, n);
        let mut g_z = Matrix::zeros(n, n);
        let mut g_col = vec![0.0; n];
        let mut g_row = vec![0.0; n];

        for i in 0..n {
            for j in 0..n {
                g_exps[j] += grad[(i, j)] * self.s[(i, j)];
            }
            // s[(i, a)] for a <= i is a prefix sum of col; s[(i, b)] for b > i
            // is a suffix sum of row over b..n
            let mut acc = 0.0;
            for l in (0..=i).rev() {
                acc += grad[(i, l)] * self.exps[l];
                g_col[l] = acc;
            }
            let mut acc = 0.0;
            g_row[i] = 0.0;
            for r in i + 1..n {
                acc += grad[(i, r)] * self.exps[r];
                g_row[r] = acc;
            }
            for l in 0..=i {
                let pl = self.left[(i, l)];
                for r in i..n {
                    let pr = self.right[(i, r)];
                    let zlr = self.z[(l, r)];
                    let ga = g_col[l] + g_row[r];
                    g_left[(i, l)] += ga * pr / zlr;
                    g_right[(i, r)] += ga * pl / zlr;
                    g_z[(l, r)] -= ga * pl * pr / (zlr * zlr);
                }
            }
        }

        // z[(l, r)] sums exps over [l, r]
        for l in 0..n {
            let mut acc = 0.0;
            for k in (l..n).rev() {
                acc += g_z[(l, k)];
                g_exps[k] += acc;
            }
        }

        let mut g_height: Vec<f64> = g_exps
            .iter()
            .zip(&self.exps)
            .map(|(g, e)| g * e)
            .collect();
        let mut g_tau = vec![0.0; n.saturating_sub(1)];
        let mut g_mu = 0.0;

        let mut g_m = vec![0.0; n];
        for i in 0..n {
            g_m.iter_mut().for_each(|x| *x = 0.0);
            for l in 0..=i {
                if !self.left_active[i * n + l] {
                    continue;
                }
                let g = g_left[(i, l)];
                g_m[l] += g;
                if l > 0 {
                    g_m[l - 1] -= g;
                }
            }
            for r in i..n {
                if !self.right_active[i * n + r] {
                    continue;
                }
                let g = g_right[(i, r)];
                g_m[r] += g;
                if r + 1 < n {
                    g_m[r + 1] -= g;
                }
            }
            for l in 0..n {
                if l == i {
                    continue;
                }
                let m = self.membership[(i, l)];
                let gz = g_m[l] * m * (1.0 - m);
                if gz == 0.0 {
                    continue;
                }
                let gap = self.argmax[i * n + l];
                g_height[i] += gz / self.mu;
                g_tau[gap] -= gz / self.mu;
                g_mu -= gz * self.logits[i * n + l] / self.mu;
            }
        }

        ProfileGrad {
            tau: g_tau,
            height: g_height,
            mu: g_mu,
        }
    }
}

/// Plain-text dump of every intermediate matrix with 9 decimals.
pub fn debug_dump(profile: &SyntacticProfile) -> Result<String> {
    let spans = span_distributions(profile)?;
    let p = dependency_matrix(profile)?;
    let mut out = String::new();
    for (name, m) in [
        ("membership", &spans.membership),
        ("left", &spans.left),
        ("right", &spans.right),
        ("dependency", p.as_matrix()),
    ] {
        let _ = writeln!(out, "{name}");
        for i in 0..m.rows() {
            let mut first = true;
            for x in m.row(i) {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{x:.9}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}
