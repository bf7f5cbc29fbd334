//! Flat `key = value` run configuration.
//!
//! `#` starts a comment. `include = path` splices another file in place,
//! resolved against the including file's directory; later assignments win.
//! Relative paths in values are resolved the same way.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use grammask_core::model::{ModelConfig, MODEL_KEYS};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub gold_trees: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub steps: u64,
    pub batch_size: usize,
    /// Checkpoint interval in steps; 0 saves only at the end.
    pub save_every: u64,
    /// Number of trailing checkpoints averaged at the end of training.
    pub average_last: usize,
    pub shared_vocab: bool,
    seed_set: bool,
}

const PATH_KEYS: &[&str] = &[
    "train_src",
    "train_tgt",
    "valid_src",
    "valid_tgt",
    "test_src",
    "test_tgt",
    "gold_trees",
    "output_dir",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train_src: None,
            train_tgt: None,
            valid_src: None,
            valid_tgt: None,
            test_src: None,
            test_tgt: None,
            gold_trees: None,
            output_dir: None,
            steps: 1000,
            batch_size: 32,
            save_every: 0,
            average_last: 5,
            shared_vocab: false,
            seed_set: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CliError::config(key, format!("cannot parse {v:?}")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_file(path, 0)?;
        Ok(c)
    }

    /// Parses config text whose relative paths resolve against `base`.
    pub fn from_text(text: &str, base: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, base, Path::new("<text>"), 0)?;
        Ok(c)
    }

    fn apply_file(&mut self, path: &Path, depth: usize) -> Result<()> {
        if depth > 16 {
            return Err(CliError::config("include", "includes nested too deeply"));
        }
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        self.apply_text(&text, &base, path, depth)
    }

    fn apply_text(&mut self, text: &str, base: &Path, origin: &Path, depth: usize) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Input {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    reason: format!("expected key = value, got {line:?}"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k == "include" {
                self.apply_file(&resolve(base, v), depth + 1)?;
            } else {
                self.set(k, v, base)?;
            }
        }
        Ok(())
    }

    /// Sets one key; relative paths resolve against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        if PATH_KEYS.contains(&key) {
            let p = (!value.is_empty()).then(|| resolve(base, value));
            match key {
                "train_src" => self.train_src = p,
                "train_tgt" => self.train_tgt = p,
                "valid_src" => self.valid_src = p,
                "valid_tgt" => self.valid_tgt = p,
                "test_src" => self.test_src = p,
                "test_tgt" => self.test_tgt = p,
                "gold_trees" => self.gold_trees = p,
                _ => self.output_dir = p,
            }
            return Ok(());
        }
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "save_every" => self.save_every = parse(key, value)?,
            "average_last" => self.average_last = parse(key, value)?,
            "shared_vocab" => self.shared_vocab = parse(key, value)?,
            _ => {
                if !self.model.set(key, value)? {
                    return Err(CliError::config(key, "unknown key"));
                }
                if key == "seed" {
                    self.seed_set = true;
                }
            }
        }
        Ok(())
    }

    pub fn seed_is_set(&self) -> bool {
        self.seed_set
    }

    /// Checks what training needs: model invariants, a seed, corpus and
    /// output paths, and that the inputs exist.
    pub fn validate_for_training(&self) -> Result<()> {
        self.model.validate()?;
        if !self.seed_set {
            return Err(CliError::config("seed", "is mandatory"));
        }
        if self.batch_size == 0 {
            return Err(CliError::config("batch_size", "must be at least 1"));
        }
        for (name, p) in [("train_src", &self.train_src), ("train_tgt", &self.train_tgt)] {
            let p = p.as_ref().ok_or_else(|| CliError::config(name, "is required"))?;
            if !p.is_file() {
                return Err(CliError::config(name, format!("{} does not exist", p.display())));
            }
        }
        for (name, p) in [
            ("valid_src", &self.valid_src),
            ("valid_tgt", &self.valid_tgt),
            ("test_src", &self.test_src),
            ("test_tgt", &self.test_tgt),
            ("gold_trees", &self.gold_trees),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(CliError::config(name, format!("{} does not exist", p.display())));
                }
            }
        }
        if self.output_dir.is_none() {
            return Err(CliError::config("output_dir", "is required"));
        }
        Ok(())
    }

    /// Every setting after defaults, with absolute paths; loading it back
    /// gives an equal config.
    pub fn effective_text(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for k in MODEL_KEYS {
            let _ = writeln!(s, "{k} = {}", self.model.get(k).unwrap());
        }
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "save_every = {}", self.save_every);
        let _ = writeln!(s, "average_last = {}", self.average_last);
        let _ = writeln!(s, "shared_vocab = {}", self.shared_vocab);
        let paths = [
            &self.train_src,
            &self.train_tgt,
            &self.valid_src,
            &self.valid_tgt,
            &self.test_src,
            &self.test_tgt,
            &self.gold_trees,
            &self.output_dir,
        ];
        for (k, p) in PATH_KEYS.iter().zip(paths) {
            if let Some(p) = p {
                let abs = std::path::absolute(p).unwrap_or_else(|_| p.clone());
                let _ = writeln!(s, "{k} = {}", abs.display());
            }
        }
        s
    }
}

fn resolve(base: &Path, v: &str) -> PathBuf {
    let p = Path::new(v);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
