//! Token sequences, vocabularies, batching and MLM masking.
//!
//! Text arrives already segmented into subwords with a trailing `@@` on
//! every piece that continues into the next one.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

pub const CONTINUATION: &str = "@@";

/// BPE label of a token that is a whole word.
pub const BPE_INTACT: u8 = 0;
/// BPE label of a padding position.
pub const BPE_PAD: u8 = 1;
/// BPE label of any piece of a segmented word.
pub const BPE_SUBWORD: u8 = 2;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelDiagnostics {
    /// Marker-bearing pieces with no following piece to continue into.
    pub dangling_continuations: usize,
}

#[inline]
fn continues(token: &str) -> bool {
    token.ends_with(CONTINUATION)
}

/// BPE labels for one sentence: 0 for intact words, 2 for every piece of a
/// segmented word (marker-bearing pieces and the piece closing the word).
pub fn assign_bpe_labels<S: AsRef<str>>(tokens: &[S]) -> Vec<u8> {
    assign_bpe_labels_with_diagnostics(tokens).0
}

pub fn assign_bpe_labels_with_diagnostics<S: AsRef<str>>(tokens: &[S]) -> (Vec<u8>, LabelDiagnostics) {
    let mut diag = LabelDiagnostics::default();
    let mut labels = Vec::with_capacity(tokens.len());
    let mut prev_continues = false;
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        let c = continues(t);
        labels.push(if c || prev_continues { BPE_SUBWORD } else { BPE_INTACT });
        if c && i + 1 == tokens.len() {
            diag.dangling_continuations += 1;
        }
        prev_continues = c;
    }
    (labels, diag)
}

/// Glues marker-joined pieces into words, keeping the markers, so that
/// [`split_subwords`] restores the original pieces.
pub fn join_subwords<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for t in tokens {
        let t = t.as_ref();
        current.push_str(t);
        if !continues(t) {
            words.push(core::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Splits marker-joined words back into their pieces.
pub fn split_subwords<S: AsRef<str>>(words: &[S]) -> Vec<String> {
    let mut out = Vec::new();
    for w in words {
        let mut rest = w.as_ref();
        while let Some(pos) = rest.find(CONTINUATION) {
            let end = pos + CONTINUATION.len();
            out.push(rest[..end].to_string());
            rest = &rest[end..];
        }
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
    }
    out
}

/// Surface text with markers removed: `["re@@", "designed"]` → `"redesigned"`.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, w) in join_subwords(tokens).iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&w.replace(CONTINUATION, ""));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Reserved symbols first, then `tokens` in order.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for t in RESERVED.iter().copied().chain(tokens.iter().map(AsRef::as_ref)) {
            if !v.index.contains_key(t) {
                v.index.insert(t.to_string(), v.tokens.len());
                v.tokens.push(t.to_string());
            }
        }
        v
    }

    /// Reserved ids, then corpus tokens by descending frequency with
    /// lexicographic tie-breaking.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens: Vec<&str> = ranked.into_iter().map(|(t, _)| t).collect();
        Ok(Self::from_tokens(&tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// Corpus tokens in id order, without the reserved prefix.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

/// One sentence ready for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub bpe_labels: Vec<u8>,
    pub surface: Vec<String>,
}

impl TokenSequence {
    pub fn from_line(line: &str, vocab: &Vocabulary) -> Self {
        let surface: Vec<String> = line.split_whitespace().map(ToString::to_string).collect();
        Self::from_surface(surface, vocab)
    }

    pub fn from_surface(surface: Vec<String>, vocab: &Vocabulary) -> Self {
        Self {
            ids: vocab.encode(&surface),
            bpe_labels: assign_bpe_labels(&surface),
            surface,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Right-padded batch of sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    pub bpe_labels: Vec<Vec<u8>>,
    pub pad_mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Unpadded ids of row `r`.
    pub fn row_ids(&self, r: usize) -> &[usize] {
        &self.ids[r][..self.lengths[r]]
    }

    pub fn row_labels(&self, r: usize) -> &[u8] {
        &self.bpe_labels[r][..self.lengths[r]]
    }
}

/// Pads every sequence to the longest one. `max_len` bounds each length.
pub fn make_batch(sequences: &[TokenSequence], max_len: usize) -> Result<Batch> {
    for (i, s) in sequences.iter().enumerate() {
        if s.len() > max_len {
            return Err(Error::TooLong {
                line: i + 1,
                len: s.len(),
                max_len,
            });
        }
    }
    let width = sequences.iter().map(TokenSequence::len).max().unwrap_or(0);
    let mut batch = Batch {
        ids: Vec::with_capacity(sequences.len()),
        bpe_labels: Vec::with_capacity(sequences.len()),
        pad_mask: Vec::with_capacity(sequences.len()),
        lengths: Vec::with_capacity(sequences.len()),
    };
    for s in sequences {
        let pad = width - s.len();
        let mut ids = s.ids.clone();
        ids.extend(core::iter::repeat_n(PAD, pad));
        let mut labels = s.bpe_labels.clone();
        labels.extend(core::iter::repeat_n(BPE_PAD, pad));
        let mut mask = vec![true; s.len()];
        mask.extend(core::iter::repeat_n(false, pad));
        batch.ids.push(ids);
        batch.bpe_labels.push(labels);
        batch.pad_mask.push(mask);
        batch.lengths.push(s.len());
    }
    Ok(batch)
}

/// A position replaced by `MASK`, with the id it held.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlmTarget {
    pub row: usize,
    pub pos: usize,
    pub id: usize,
}

/// Replaces each real, non-BOS/EOS position with `MASK` independently with
/// probability `rate`.
pub fn apply_mlm_mask<R: Rng + ?Sized>(batch: &Batch, rate: f64, rng: &mut R) -> (Batch, Vec<MlmTarget>) {
    let mut out = batch.clone();
    let mut targets = Vec::new();
    for (r, row) in out.ids.iter_mut().enumerate() {
        for (pos, id) in row.iter_mut().enumerate() {
            if !batch.pad_mask[r][pos] || *id == BOS || *id == EOS {
                continue;
            }
            // one draw per eligible position keeps the stream rate-independent
            let u = rng.random::<f64>();
            if u < rate {
                targets.push(MlmTarget { row: r, pos, id: *id });
                *id = MASK;
            }
        }
    }
    (out, targets)
}
