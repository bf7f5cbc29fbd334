//! Constituency trees from syntactic distances, and unlabeled bracket scoring.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::sequence::{BPE_SUBWORD, CONTINUATION};

/// Binary tree over 1-based token positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConstituencyTree {
    Leaf { position: usize, surface: String },
    Node(Box<ConstituencyTree>, Box<ConstituencyTree>),
}

/// Unlabeled spans `(start, end)`, 1-based and inclusive.
pub type BracketSet = BTreeSet<(usize, usize)>;

impl ConstituencyTree {
    pub fn leaf(position: usize, surface: impl Into<String>) -> Self {
        Self::Leaf {
            position,
            surface: surface.into(),
        }
    }

    pub fn node(left: Self, right: Self) -> Self {
        Self::Node(Box::new(left), Box::new(right))
    }

    pub fn leaves(&self) -> Vec<(usize, &str)> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<(usize, &'a str)>) {
        match self {
            Self::Leaf { position, surface } => out.push((*position, surface)),
            Self::Node(l, r) => {
                l.collect_leaves(out);
                r.collect_leaves(out);
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        match self {
            Self::Leaf { .. } => 1,
            Self::Node(l, r) => l.num_leaves() + r.num_leaves(),
        }
    }

    pub fn num_internal(&self) -> usize {
        match self {
            Self::Leaf { .. } => 0,
            Self::Node(l, r) => 1 + l.num_internal() + r.num_internal(),
        }
    }

    /// First and last leaf position.
    pub fn span(&self) -> (usize, usize) {
        match self {
            Self::Leaf { position, .. } => (*position, *position),
            Self::Node(l, r) => (l.span().0, r.span().1),
        }
    }

    /// Bracketed form: leaves print their surface, nodes `(left right)`,
    /// and a lone leaf `(w)`.
    pub fn to_bracketed(&self) -> String {
        match self {
            Self::Leaf { surface, .. } => format!("({surface})"),
            Self::Node(..) => {
                let mut s = String::new();
                self.write_bracketed(&mut s);
                s
            }
        }
    }

    fn write_bracketed(&self, out: &mut String) {
        match self {
            Self::Leaf { surface, .. } => out.push_str(surface),
            Self::Node(l, r) => {
                out.push('(');
                l.write_bracketed(out);
                out.push(' ');
                r.write_bracketed(out);
                out.push(')');
            }
        }
    }

    fn renumber(self, next: &mut usize) -> Self {
        match self {
            Self::Leaf { surface, .. } => {
                *next += 1;
                Self::Leaf {
                    position: *next,
                    surface,
                }
            }
            Self::Node(l, r) => {
                let l = l.renumber(next);
                let r = r.renumber(next);
                Self::node(l, r)
            }
        }
    }
}

/// Top-down split at the largest distance (leftmost on ties).
pub fn distance_to_tree<S: AsRef<str>>(tau: &[f64], tokens: &[S]) -> Result<ConstituencyTree> {
    if tokens.is_empty() {
        return Err(Error::Empty("tokens"));
    }
    if tau.len() + 1 != tokens.len() {
        return Err(Error::LengthMismatch {
            op: "distance_to_tree",
            left: tau.len(),
            right: tokens.len(),
        });
    }
    Ok(build(tau, tokens, 0))
}

fn build<S: AsRef<str>>(tau: &[f64], tokens: &[S], offset: usize) -> ConstituencyTree {
    if tau.is_empty() {
        return ConstituencyTree::leaf(offset + 1, tokens[0].as_ref());
    }
    let mut split = 0;
    for (i, &t) in tau.iter().enumerate() {
        if t > tau[split] {
            split = i;
        }
    }
    let left = build(&tau[..split], &tokens[..=split], offset);
    let right = build(&tau[split + 1..], &tokens[split + 1..], offset + split + 1);
    ConstituencyTree::node(left, right)
}

/// Nontrivial constituents: every internal node except the root, and never
/// single tokens.
pub fn extract_spans(tree: &ConstituencyTree) -> BracketSet {
    let mut out = BracketSet::new();
    let whole = tree.span();
    collect_spans(tree, whole, &mut out);
    out
}

fn collect_spans(tree: &ConstituencyTree, whole: (usize, usize), out: &mut BracketSet) {
    if let ConstituencyTree::Node(l, r) = tree {
        let s = tree.span();
        if s != whole {
            out.insert(s);
        }
        collect_spans(l, whole, out);
        collect_spans(r, whole, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Pooled counts for micro-averaging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BracketCounts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl BracketCounts {
    pub fn of(predicted: &BracketSet, gold: &BracketSet) -> Self {
        Self {
            matched: predicted.intersection(gold).count(),
            predicted: predicted.len(),
            gold: gold.len(),
        }
    }

    pub fn add(&mut self, other: Self) {
        self.matched += other.matched;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    /// Empty prediction (gold) scores precision (recall) 1 only if gold
    /// (prediction) is empty too.
    pub fn prf(&self) -> Prf {
        let precision = if self.predicted == 0 {
            if self.gold == 0 { 1.0 } else { 0.0 }
        } else {
            self.matched as f64 / self.predicted as f64
        };
        let recall = if self.gold == 0 {
            if self.predicted == 0 { 1.0 } else { 0.0 }
        } else {
            self.matched as f64 / self.gold as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

pub fn bracket_prf(predicted: &BracketSet, gold: &BracketSet) -> Prf {
    BracketCounts::of(predicted, gold).prf()
}

/// Micro-averaged scores over aligned sentence pairs.
pub fn corpus_prf<'a>(pairs: impl IntoIterator<Item = (&'a BracketSet, &'a BracketSet)>) -> Prf {
    let mut total = BracketCounts::default();
    for (p, g) in pairs {
        total.add(BracketCounts::of(p, g));
    }
    total.prf()
}

/// Aligns a subword-level tree with word-level references.
///
/// Each run of pieces forming one word becomes a single leaf with the
/// markers removed. If the lowest node covering a run spans exactly that
/// run, the node is replaced by the leaf; otherwise the leftmost piece takes
/// the joined surface and the other pieces are pruned, their parents
/// collapsing onto the surviving sibling. Leaves are renumbered by word.
pub fn collapse_subwords(tree: &ConstituencyTree, bpe_labels: &[u8]) -> Result<ConstituencyTree> {
    let leaves = tree.leaves();
    if leaves.len() != bpe_labels.len() {
        return Err(Error::LabelAlignment(format!(
            "{} leaves vs {} labels",
            leaves.len(),
            bpe_labels.len()
        )));
    }
    // word runs from the markers; labels must agree with them
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (k, &(_, surface)) in leaves.iter().enumerate() {
        let cont = surface.ends_with(CONTINUATION);
        let in_word = cont || start.is_some();
        if in_word && bpe_labels[k] != BPE_SUBWORD {
            return Err(Error::LabelAlignment(format!(
                "leaf {} ({surface}) is part of a segmented word but labeled {}",
                k + 1,
                bpe_labels[k]
            )));
        }
        if !in_word && bpe_labels[k] == BPE_SUBWORD {
            return Err(Error::LabelAlignment(format!(
                "leaf {} ({surface}) is an intact word but labeled 2",
                k + 1
            )));
        }
        if cont && start.is_none() {
            start = Some(k + 1);
        }
        if !cont {
            if let Some(s) = start.take() {
                runs.push((s, k + 1));
            }
        }
    }
    if let Some(s) = start {
        runs.push((s, leaves.len()));
    }

    let mut t = tree.clone();
    for &(s, e) in &runs {
        let joined: String = leaves[s - 1..e]
            .iter()
            .map(|(_, w)| w.replace(CONTINUATION, ""))
            .collect();
        t = if replace_exact(&mut t, s, e, &joined) {
            t
        } else {
            prune_run(t, s, e, &joined).expect("leftmost piece survives")
        };
    }
    let mut next = 0;
    Ok(t.renumber(&mut next))
}

fn replace_exact(t: &mut ConstituencyTree, s: usize, e: usize, joined: &str) -> bool {
    let (a, b) = t.span();
    if (a, b) == (s, e) {
        *t = ConstituencyTree::leaf(s, joined);
        return true;
    }
    match t {
        ConstituencyTree::Leaf { .. } => false,
        ConstituencyTree::Node(l, r) => {
            let (la, lb) = l.span();
            if la <= s && e <= lb {
                replace_exact(l, s, e, joined)
            } else if r.span().0 <= s && e <= r.span().1 {
                replace_exact(r, s, e, joined)
            } else {
                false
            }
        }
    }
}

fn prune_run(t: ConstituencyTree, s: usize, e: usize, joined: &str) -> Option<ConstituencyTree> {
    match t {
        ConstituencyTree::Leaf { position, surface } => {
            if position == s {
                Some(ConstituencyTree::leaf(position, joined))
            } else if position > s && position <= e {
                None
            } else {
                Some(ConstituencyTree::Leaf { position, surface })
            }
        }
        ConstituencyTree::Node(l, r) => match (prune_run(*l, s, e, joined), prune_run(*r, s, e, joined)) {
            (Some(l), Some(r)) => Some(ConstituencyTree::node(l, r)),
            (Some(x), None) | (None, Some(x)) => Some(x),
            (None, None) => None,
        },
    }
}

/// Tokens and nontrivial spans of one reference tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldTree {
    pub tokens: Vec<String>,
    pub spans: BracketSet,
}

#[derive(Debug)]
enum Sexp {
    Atom(String),
    List(Vec<Sexp>),
}

fn tokenize_sexp(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        match c {
            '(' | ')' => {
                if let Some(s) = start.take() {
                    out.push(&line[s..i]);
                }
                out.push(&line[i..i + 1]);
            }
            c if c.is_whitespace() => {
                if let Some(s) = start.take() {
                    out.push(&line[s..i]);
                }
            }
            _ => {
                if start.is_none() {
                    start = Some(i);
                }
            }
        }
    }
    if let Some(s) = start {
        out.push(&line[s..]);
    }
    out
}

fn parse_sexp(line: &str, line_no: usize) -> Result<Sexp> {
    let err = |reason: &str| Error::TreeParse {
        line: line_no,
        reason: reason.to_string(),
    };
    let toks = tokenize_sexp(line);
    let mut stack: Vec<Vec<Sexp>> = Vec::new();
    let mut result = None;
    for t in toks {
        match t {
            "(" => stack.push(Vec::new()),
            ")" => {
                let list = stack.pop().ok_or_else(|| err("unbalanced ')'"))?;
                let node = Sexp::List(list);
                match stack.last_mut() {
                    Some(parent) => parent.push(node),
                    None => {
                        if result.is_some() {
                            return Err(err("more than one tree on the line"));
                        }
                        result = Some(node);
                    }
                }
            }
            atom => match stack.last_mut() {
                Some(parent) => parent.push(Sexp::Atom(atom.to_string())),
                None => return Err(err("token outside brackets")),
            },
        }
    }
    if !stack.is_empty() {
        return Err(err("unbalanced '('"));
    }
    result.ok_or_else(|| err("empty line"))
}

/// Parses one bracketed tree.
///
/// With `labeled`, the first atom of every bracket is a node label (PTB
/// style, n-ary). Otherwise every atom is a token, as in the unlabeled
/// binary trees written by [`ConstituencyTree::to_bracketed`].
pub fn parse_bracketed(line: &str, labeled: bool, line_no: usize) -> Result<GoldTree> {
    let sexp = parse_sexp(line, line_no)?;
    let mut tokens = Vec::new();
    let mut raw = Vec::new();
    walk(&sexp, labeled, &mut tokens, &mut raw);
    if tokens.is_empty() {
        return Err(Error::TreeParse {
            line: line_no,
            reason: "tree has no tokens".to_string(),
        });
    }
    let n = tokens.len();
    let spans = raw
        .into_iter()
        .filter(|&(s, e)| e > s && !(s == 1 && e == n))
        .collect();
    Ok(GoldTree { tokens, spans })
}

fn walk(
    node: &Sexp,
    labeled: bool,
    tokens: &mut Vec<String>,
    spans: &mut Vec<(usize, usize)>,
) {
    match node {
        Sexp::Atom(a) => tokens.push(a.clone()),
        Sexp::List(items) => {
            let start = tokens.len() + 1;
            let children = match items.first() {
                Some(Sexp::Atom(_)) if labeled => &items[1..],
                _ => &items[..],
            };
            for c in children {
                walk(c, labeled, tokens, spans);
            }
            if tokens.len() >= start {
                spans.push((start, tokens.len()));
            }
        }
    }
}
