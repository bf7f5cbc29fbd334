//! Command implementations behind the binary.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use grammask_core::bleu::corpus_bleu;
use grammask_core::decode::beam_search;
use grammask_core::model::Seq2Seq;
use grammask_core::sequence::{assign_bpe_labels, TokenSequence, Vocabulary};
use grammask_core::trainer::{batch_indices, init_rng, Example, StepMetrics, Trainer};
use grammask_core::tree::{
    collapse_subwords, distance_to_tree, parse_bracketed, BracketCounts,
};

use crate::checkpoint::{average_checkpoints, Checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io;
use crate::lock::DirLock;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const METRICS_HEADER: &str = "step\tmt_loss\tmlm_loss\tcombined\tgrad_norm\tlr";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.bin";
pub const AVERAGED_CHECKPOINT: &str = "checkpoint_avg.bin";
pub const EFFECTIVE_CONFIG: &str = "effective.conf";
pub const SRC_VOCAB: &str = "src.vocab";
pub const TGT_VOCAB: &str = "tgt.vocab";

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step}.bin")
}

pub fn metrics_line(m: &StepMetrics) -> String {
    format!(
        "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}",
        m.step, m.mt_loss, m.mlm_loss, m.combined, m.grad_norm, m.lr
    )
}

fn build_vocabs(cfg: &RunConfig) -> Result<(Vocabulary, Vocabulary)> {
    let src = io::read_lines(cfg.train_src.as_ref().unwrap())?;
    let tgt = io::read_lines(cfg.train_tgt.as_ref().unwrap())?;
    let vs = |lines: &[String]| Vocabulary::build(lines.iter().map(String::as_str));
    if cfg.shared_vocab {
        let both: Vec<String> = src.iter().chain(&tgt).cloned().collect();
        let v = vs(&both)?;
        Ok((v.clone(), v))
    } else {
        Ok((vs(&src)?, vs(&tgt)?))
    }
}

/// Parallel examples from two aligned corpus files.
pub fn load_pairs(src: &Path, tgt: &Path, sv: &Vocabulary, tv: &Vocabulary, max_len: usize) -> Result<Vec<Example>> {
    let s = io::read_corpus(src, sv, max_len)?;
    let t = io::read_corpus(tgt, tv, max_len)?;
    if s.len() != t.len() {
        return Err(CliError::Usage(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    Ok(s.into_iter()
        .zip(t)
        .map(|(src, t)| Example { src, tgt: t.ids })
        .collect())
}

/// Keeps the metrics log consistent with a resumed step: drops lines past
/// `step` and makes sure the header is present.
fn prepare_metrics(path: &Path, step: u64) -> Result<fs::File> {
    let mut kept = vec![METRICS_HEADER.to_string()];
    if path.exists() {
        for l in io::read_lines(path)?.into_iter().skip(1) {
            let s: u64 = l.split('\t').next().and_then(|x| x.parse().ok()).unwrap_or(u64::MAX);
            if s <= step {
                kept.push(l);
            }
        }
    }
    io::write_lines(path, &kept)?;
    OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))
}

/// Summary of a finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub final_step: u64,
    pub last: Option<StepMetrics>,
}

/// Trains to `cfg.steps`, resuming from the last checkpoint in the output
/// directory. `stop_after` ends the process early for interruption tests.
pub fn train(cfg: &RunConfig, stop_after: Option<u64>) -> Result<TrainOutcome> {
    cfg.validate_for_training()?;
    let out = cfg.output_dir.clone().unwrap();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let _lock = DirLock::acquire(&out)?;
    io::write_text(&out.join(EFFECTIVE_CONFIG), &cfg.effective_text())?;

    let last = out.join(LAST_CHECKPOINT);
    let (mut trainer, sv, tv) = if last.exists() {
        let ck = Checkpoint::load(&last)?;
        if ck.config != cfg.model {
            return Err(CliError::config(
                "output_dir",
                "holds a checkpoint trained with a different model config",
            ));
        }
        (ck.trainer()?, ck.src_vocab, ck.tgt_vocab)
    } else {
        let (sv, tv) = build_vocabs(cfg)?;
        let model = Seq2Seq::new(cfg.model.clone(), sv.len(), tv.len(), &mut init_rng(cfg.model.seed))?;
        (Trainer::new(model), sv, tv)
    };
    io::write_vocab(&out.join(SRC_VOCAB), &sv)?;
    io::write_vocab(&out.join(TGT_VOCAB), &tv)?;
    let data = load_pairs(
        cfg.train_src.as_ref().unwrap(),
        cfg.train_tgt.as_ref().unwrap(),
        &sv,
        &tv,
        cfg.model.max_len,
    )?;
    if data.is_empty() {
        return Err(CliError::config("train_src", "corpus is empty"));
    }
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = prepare_metrics(&metrics_path, trainer.step)?;
    let mut latest = None;
    let end = stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    while trainer.step < end {
        let idx = batch_indices(data.len(), cfg.batch_size, cfg.model.seed, trainer.step + 1);
        let batch: Vec<Example> = idx.iter().map(|&i| data[i].clone()).collect();
        let m = trainer.train_step(&batch)?;
        io::append_line(&mut metrics, &metrics_path, &metrics_line(&m))?;
        latest = Some(m);
        let periodic = cfg.save_every > 0 && trainer.step % cfg.save_every == 0;
        if periodic || trainer.step == end {
            let ck = Checkpoint::from_trainer(&trainer, &sv, &tv);
            if periodic || trainer.step == cfg.steps {
                ck.save(&out.join(checkpoint_name(trainer.step)))?;
            }
            ck.save(&last)?;
        }
    }
    if trainer.step == cfg.steps && cfg.average_last > 0 {
        let mut steps: Vec<u64> = fs::read_dir(&out)
            .map_err(|e| CliError::io(&out, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let n = e.file_name().into_string().ok()?;
                n.strip_prefix("checkpoint_")?.strip_suffix(".bin")?.parse::<u64>().ok()
            })
            .collect();
        steps.sort_unstable();
        let tail: Vec<PathBuf> = steps
            .iter()
            .rev()
            .take(cfg.average_last)
            .rev()
            .map(|&s| out.join(checkpoint_name(s)))
            .collect();
        if !tail.is_empty() {
            average_checkpoints(&tail)?.save(&out.join(AVERAGED_CHECKPOINT))?;
        }
    }
    Ok(TrainOutcome {
        output_dir: out,
        final_step: trainer.step,
        last: latest,
    })
}

fn check_vocab(given: Option<&Path>, stored: &Vocabulary, side: &str) -> Result<()> {
    if let Some(p) = given {
        let v = io::read_vocab(p)?;
        if &v != stored {
            return Err(CliError::Usage(format!(
                "{side} vocabulary {} does not match the checkpoint",
                p.display()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TranslateOptions {
    pub beam: Option<usize>,
    pub length_penalty: Option<f64>,
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
}

/// Translates every line; empty lines give empty output lines.
pub fn translate_lines(ck: &Checkpoint, lines: &[String], opts: &TranslateOptions) -> Result<Vec<String>> {
    check_vocab(opts.src_vocab.as_deref(), &ck.src_vocab, "source")?;
    check_vocab(opts.tgt_vocab.as_deref(), &ck.tgt_vocab, "target")?;
    let model = ck.model()?;
    let beam = opts.beam.unwrap_or(model.config.beam);
    let lp = opts.length_penalty.unwrap_or(model.config.length_penalty);
    let mut out = Vec::with_capacity(lines.len());
    for l in lines {
        let s = TokenSequence::from_line(l, &ck.src_vocab);
        if s.is_empty() {
            out.push(String::new());
            continue;
        }
        let ids = beam_search(&model, &s.ids, &s.bpe_labels, beam, lp)?;
        out.push(ck.tgt_vocab.decode(&ids).join(" "));
    }
    Ok(out)
}

pub fn translate(checkpoint: &Path, input: &Path, output: &Path, opts: &TranslateOptions) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let lines = io::read_lines(input)?;
    let hyps = translate_lines(&ck, &lines, opts)?;
    io::write_lines(output, &hyps)
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Writes `tau<TAB>height` per line, values space-separated.
    pub profile_out: Option<PathBuf>,
    /// Merges subword pieces into word leaves.
    pub collapse_subwords: bool,
    pub src_vocab: Option<PathBuf>,
}

/// Tree per line plus the profile rows; a line must not be empty.
pub fn parse_lines(ck: &Checkpoint, lines: &[String], opts: &ParseOptions) -> Result<(Vec<String>, Vec<String>)> {
    check_vocab(opts.src_vocab.as_deref(), &ck.src_vocab, "source")?;
    let model = ck.model()?;
    let mut trees = Vec::with_capacity(lines.len());
    let mut profiles = Vec::with_capacity(lines.len());
    for (i, l) in lines.iter().enumerate() {
        let s = TokenSequence::from_line(l, &ck.src_vocab);
        if s.is_empty() {
            return Err(CliError::Usage(format!("input line {}: empty sentence", i + 1)));
        }
        let p = model.parse(&s.ids, &s.bpe_labels)?;
        let mut tree = distance_to_tree(&p.tau, &s.surface)?;
        if opts.collapse_subwords {
            tree = collapse_subwords(&tree, &assign_bpe_labels(&s.surface))?;
        }
        trees.push(tree.to_bracketed());
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
        profiles.push(format!("{}\t{}", join(&p.tau), join(&p.height)));
    }
    Ok((trees, profiles))
}

pub fn parse(checkpoint: &Path, input: &Path, output: &Path, opts: &ParseOptions) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let lines = io::read_lines(input)?;
    let (trees, profiles) = parse_lines(&ck, &lines, opts)?;
    io::write_lines(output, &trees)?;
    if let Some(p) = &opts.profile_out {
        io::write_lines(p, &profiles)?;
    }
    Ok(())
}

/// Corpus scores and one TSV row per sentence.
#[derive(Debug, Clone)]
pub struct TreeReport {
    pub total: BracketCounts,
    pub per_sentence: Vec<BracketCounts>,
}

impl TreeReport {
    pub fn summary(&self) -> String {
        let s = self.total.prf();
        format!(
            "P {:.2} R {:.2} F1 {:.2}",
            100.0 * s.precision,
            100.0 * s.recall,
            100.0 * s.f1
        )
    }

    pub fn tsv(&self) -> String {
        let mut out = String::from("line\tmatched\tpredicted\tgold\tP\tR\tF1\n");
        for (i, c) in self.per_sentence.iter().enumerate() {
            let s = c.prf();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\n",
                i + 1,
                c.matched,
                c.predicted,
                c.gold,
                100.0 * s.precision,
                100.0 * s.recall,
                100.0 * s.f1
            ));
        }
        out
    }
}

/// Scores predicted unlabeled trees against reference trees line by line.
pub fn score_tree_lines(pred: &[String], gold: &[String], gold_labeled: bool) -> Result<TreeReport> {
    if pred.len() != gold.len() {
        return Err(CliError::Usage(format!(
            "line counts differ: {} predicted vs {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let mut total = BracketCounts::default();
    let mut per_sentence = Vec::with_capacity(pred.len());
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        let p = parse_bracketed(p, false, i + 1)?;
        let g = parse_bracketed(g, gold_labeled, i + 1)?;
        if p.tokens.len() != g.tokens.len() {
            return Err(CliError::Usage(format!(
                "line {}: {} predicted tokens vs {} gold tokens",
                i + 1,
                p.tokens.len(),
                g.tokens.len()
            )));
        }
        let c = BracketCounts::of(&p.spans, &g.spans);
        total.add(c);
        per_sentence.push(c);
    }
    Ok(TreeReport { total, per_sentence })
}

pub fn score_trees(pred: &Path, gold: &Path, gold_labeled: bool, per_sentence: Option<&Path>) -> Result<String> {
    let report = score_tree_lines(&io::read_lines(pred)?, &io::read_lines(gold)?, gold_labeled)?;
    if let Some(p) = per_sentence {
        io::write_text(p, &report.tsv())?;
    }
    Ok(report.summary())
}

pub fn bleu(hyp: &Path, reference: &Path) -> Result<String> {
    let h = io::read_lines(hyp)?;
    let r = io::read_lines(reference)?;
    if h.len() != r.len() {
        return Err(CliError::Usage(format!(
            "line counts differ: {} hypotheses vs {} references",
            h.len(),
            r.len()
        )));
    }
    Ok(format!("BLEU {:.2}", corpus_bleu(&h, &r)?))
}

/// Grid from `start` to `end` inclusive in steps of `step`.
pub fn lambda_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || start > end || start < 0.0 || end > 1.0 {
        return Err(CliError::Usage(format!("invalid lambda grid {start}:{end}:{step}")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    // rounded so directory names and table rows stay readable
    Ok((0..=n)
        .map(|k| ((start + k as f64 * step) * 1e6).round() / 1e6)
        .collect())
}

/// Trains once per λ into `output_dir/lambda_<λ>` and reports validation
/// BLEU of the final checkpoint, as `lambda<TAB>bleu` rows.
pub fn sweep_lambda(cfg: &RunConfig, grid: &[f64]) -> Result<String> {
    let (vs, vt) = match (&cfg.valid_src, &cfg.valid_tgt) {
        (Some(s), Some(t)) => (s.clone(), t.clone()),
        _ => return Err(CliError::config("valid_src", "sweep-lambda needs valid_src and valid_tgt")),
    };
    let root = cfg
        .output_dir
        .clone()
        .ok_or_else(|| CliError::config("output_dir", "is required"))?;
    let mut table = String::from("lambda\tbleu\n");
    for &lambda in grid {
        let mut run = cfg.clone();
        run.model.lambda = lambda;
        run.output_dir = Some(root.join(format!("lambda_{lambda}")));
        let outcome = train(&run, None)?;
        let ck = Checkpoint::load(&outcome.output_dir.join(LAST_CHECKPOINT))?;
        let hyps = translate_lines(&ck, &io::read_lines(&vs)?, &TranslateOptions::default())?;
        let refs = io::read_lines(&vt)?;
        if hyps.len() != refs.len() {
            return Err(CliError::Usage("validation files differ in length".into()));
        }
        table.push_str(&format!("{lambda}\t{:.2}\n", corpus_bleu(&hyps, &refs)?));
    }
    io::write_text(&root.join("sweep.tsv"), &table)?;
    Ok(table)
}
