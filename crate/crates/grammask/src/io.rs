//! Corpus, vocabulary and tree files.

use std::fs;
use std::io::Write;
use std::path::Path;

use grammask_core::sequence::{TokenSequence, Vocabulary, RESERVED};
use grammask_core::tree::{parse_bracketed, GoldTree};

use crate::error::{CliError, Result};

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    write_text(path, &out)
}

/// One token per line; line `k` (from 0) holds id `k + 5`.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    write_lines(path, vocab.corpus_tokens())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let lines = read_lines(path)?;
    for (i, l) in lines.iter().enumerate() {
        if l.is_empty() || l.split_whitespace().count() != 1 || RESERVED.contains(&l.as_str()) {
            return Err(CliError::Input {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("invalid vocabulary entry {l:?}"),
            });
        }
    }
    Ok(Vocabulary::from_tokens(&lines))
}

/// Sentences of a corpus file; empty lines are rejected with their number.
pub fn read_corpus(path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    let lines = read_lines(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, l) in lines.iter().enumerate() {
        let s = TokenSequence::from_line(l, vocab);
        if s.is_empty() {
            return Err(CliError::Input {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "empty sentence".into(),
            });
        }
        if s.len() > max_len {
            return Err(CliError::Input {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("{} tokens exceed max_len {max_len}", s.len()),
            });
        }
        out.push(s);
    }
    Ok(out)
}

/// Reference trees, one per line.
pub fn read_trees(path: &Path, labeled: bool) -> Result<Vec<GoldTree>> {
    let lines = read_lines(path)?;
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            parse_bracketed(l, labeled, i + 1).map_err(|e| CliError::Input {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Appends one line and flushes it.
pub fn append_line(file: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}")
        .and_then(|_| file.flush())
        .map_err(|e| CliError::io(path, e))
}
