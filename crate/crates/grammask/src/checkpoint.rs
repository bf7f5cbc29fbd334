//! Binary checkpoint container.
//!
//! All integers are little-endian. Strings are a `u32` byte length followed
//! by UTF-8 bytes. Layout, version 1:
//!
//! ```text
//! magic     8 bytes  "GRMASKCK"
//! version   u32      1
//! step      u64
//! config    string   model config as `key = value` lines
//! src vocab string   corpus tokens, one per line, in id order after the reserved ids
//! tgt vocab string   same for the target side
//! has_rng   u8       0 or 1; if 1: seed [32 bytes], stream u64, word_pos u128
//! n_params  u32
//!   name    string
//!   rows    u32
//!   cols    u32
//!   data    rows·cols f64, row-major
//! has_opt   u8       0 or 1; if 1: t u64, then per parameter m then v,
//!                    each rows·cols f64 in parameter order
//! ```

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use grammask_core::model::{ModelConfig, Seq2Seq};
use grammask_core::optim::{Adam, AdamConfig};
use grammask_core::params::{average, ParamStore};
use grammask_core::sequence::Vocabulary;
use grammask_core::trainer::{init_rng, RngState, Trainer};
use grammask_core::Matrix;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"GRMASKCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub step: u64,
    pub params: ParamStore,
    pub rng: Option<RngState>,
    pub optimizer: Option<(u64, Vec<Matrix>, Vec<Matrix>)>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Self {
        Self {
            config: t.model.config.clone(),
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            step: t.step,
            params: t.model.store.clone(),
            rng: Some(RngState::capture(&t.rng)),
            optimizer: Some((t.optimizer.t, t.optimizer.m.clone(), t.optimizer.v.clone())),
        }
    }

    /// Rebuilds the model and loads the stored parameters into it.
    pub fn model(&self) -> Result<Seq2Seq> {
        let mut m = Seq2Seq::new(
            self.config.clone(),
            self.src_vocab.len(),
            self.tgt_vocab.len(),
            &mut init_rng(self.config.seed),
        )?;
        m.store.load_named(self.params.iter())?;
        Ok(m)
    }

    /// Trainer positioned right after the stored step.
    pub fn trainer(&self) -> Result<Trainer> {
        let mut t = Trainer::new(self.model()?);
        t.step = self.step;
        if let Some(r) = &self.rng {
            t.rng = r.restore();
        }
        if let Some((step, m, v)) = &self.optimizer {
            let c = &self.config;
            t.optimizer = Adam {
                config: AdamConfig {
                    beta1: c.adam_beta1,
                    beta2: c.adam_beta2,
                    eps: c.adam_eps,
                    weight_decay: c.weight_decay,
                },
                t: *step,
                m: m.clone(),
                v: v.clone(),
            };
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.config.to_kv());
        put_str(&mut out, &self.src_vocab.corpus_tokens().join("\n"));
        put_str(&mut out, &self.tgt_vocab.corpus_tokens().join("\n"));
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, m) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            put_f64s(&mut out, m.data());
        }
        match &self.optimizer {
            Some((t, m, v)) => {
                out.push(1);
                out.extend_from_slice(&t.to_le_bytes());
                for (a, b) in m.iter().zip(v) {
                    put_f64s(&mut out, a.data());
                    put_f64s(&mut out, b.data());
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let step = r.u64()?;
        let config = ModelConfig::from_kv(&r.string()?).map_err(|e| e.to_string())?;
        let vocab = |s: String| {
            let toks: Vec<&str> = s.lines().collect();
            Vocabulary::from_tokens(&toks)
        };
        let src_vocab = vocab(r.string()?);
        let tgt_vocab = vocab(r.string()?);
        let rng = match r.u8()? {
            0 => None,
            1 => {
                let mut seed = [0u8; 32];
                seed.copy_from_slice(r.take(32)?);
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
                Some(RngState {
                    seed,
                    stream,
                    word_pos,
                })
            }
            x => return Err(format!("bad rng flag {x}")),
        };
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = r.f64s(rows * cols)?;
            params.insert(name, Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for (_, p) in params.iter() {
                    let (rows, cols) = p.shape();
                    m.push(Matrix::from_vec(rows, cols, r.f64s(rows * cols)?).unwrap());
                    v.push(Matrix::from_vec(rows, cols, r.f64s(rows * cols)?).unwrap());
                }
                Some((t, m, v))
            }
            x => return Err(format!("bad optimizer flag {x}")),
        };
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            config,
            src_vocab,
            tgt_vocab,
            step,
            params,
            rng,
            optimizer,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let write = || -> io::Result<()> {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(&self.to_bytes())?;
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| CliError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Parameter-wise mean of checkpoints sharing one config and vocabulary.
pub fn average_checkpoints(paths: &[impl AsRef<Path>]) -> Result<Checkpoint> {
    let cks = paths
        .iter()
        .map(|p| Checkpoint::load(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let first = cks.first().ok_or_else(|| CliError::Usage("no checkpoints to average".into()))?;
    for (c, p) in cks.iter().zip(paths).skip(1) {
        if c.config != first.config || c.src_vocab != first.src_vocab || c.tgt_vocab != first.tgt_vocab {
            return Err(CliError::Checkpoint {
                path: p.as_ref().to_path_buf(),
                reason: "config or vocabulary differs from the first checkpoint".into(),
            });
        }
    }
    let stores: Vec<ParamStore> = cks.iter().map(|c| c.params.clone()).collect();
    Ok(Checkpoint {
        config: first.config.clone(),
        src_vocab: first.src_vocab.clone(),
        tgt_vocab: first.tgt_vocab.clone(),
        step: cks.iter().map(|c| c.step).max().unwrap_or(0),
        params: average(&stores)?,
        rng: None,
        optimizer: None,
    })
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8 string".to_string())
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
