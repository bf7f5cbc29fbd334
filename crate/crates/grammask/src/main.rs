use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use grammask::commands::{self, ParseOptions, TranslateOptions};
use grammask::config::RunConfig;
use grammask::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "grammask", version, about = "Syntax-guided transformer training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train (or resume) a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override config keys, `key=value`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Stop after this many total steps; a later run resumes.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Translate a file line by line.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Config whose beam settings apply when the flags are absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Beam size [default: 5, or the checkpoint's setting].
        #[arg(long)]
        beam: Option<usize>,
        /// Length penalty exponent [default: 1.0, or the checkpoint's setting].
        #[arg(long)]
        length_penalty: Option<f64>,
        #[arg(long)]
        src_vocab: Option<PathBuf>,
        #[arg(long)]
        tgt_vocab: Option<PathBuf>,
    },
    /// Induce one bracketed tree per input line with the parser head.
    Parse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write `tau<TAB>height` per line to this file.
        #[arg(long)]
        profile_out: Option<PathBuf>,
        /// Merge `@@` subword pieces into word leaves.
        #[arg(long)]
        collapse_subwords: bool,
        #[arg(long)]
        src_vocab: Option<PathBuf>,
    },
    /// Unlabeled bracket precision, recall and F1.
    ScoreTrees {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Gold trees carry no node labels.
        #[arg(long)]
        gold_unlabeled: bool,
        /// Write per-sentence scores as TSV.
        #[arg(long)]
        per_sentence: Option<PathBuf>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Train across a lambda grid and tabulate validation BLEU.
    SweepLambda {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        start: f64,
        #[arg(long, default_value_t = 0.6)]
        end: f64,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
    },
}

fn load_config(path: &Path, overrides: &[String], seed: Option<u64>, lambda: Option<f64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    let cwd = PathBuf::from(".");
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {o:?}")))?;
        cfg.set(k.trim(), v.trim(), &cwd)?;
    }
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string(), &cwd)?;
    }
    if let Some(l) = lambda {
        cfg.set("lambda", &l.to_string(), &cwd)?;
    }
    Ok(cfg)
}

fn beam_defaults(config: Option<&Path>) -> Result<(Option<usize>, Option<f64>)> {
    match config {
        Some(p) => {
            let c = RunConfig::load(p)?;
            Ok((Some(c.model.beam), Some(c.model.length_penalty)))
        }
        None => Ok((None, None)),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            seed,
            lambda,
            stop_after,
        } => {
            let cfg = load_config(&config, &overrides, seed, lambda)?;
            let out = commands::train(&cfg, stop_after)?;
            match out.last {
                Some(m) => println!("{}\t{}", out.final_step, commands::metrics_line(&m)),
                None => println!("{}\tnothing to do", out.final_step),
            }
        }
        Command::Translate {
            checkpoint,
            input,
            output,
            config,
            beam,
            length_penalty,
            src_vocab,
            tgt_vocab,
        } => {
            let (b, lp) = beam_defaults(config.as_deref())?;
            let opts = TranslateOptions {
                beam: beam.or(b),
                length_penalty: length_penalty.or(lp),
                src_vocab,
                tgt_vocab,
            };
            commands::translate(&checkpoint, &input, &output, &opts)?;
        }
        Command::Parse {
            checkpoint,
            input,
            output,
            config,
            profile_out,
            collapse_subwords,
            src_vocab,
        } => {
            if let Some(p) = &config {
                RunConfig::load(p)?;
            }
            let opts = ParseOptions {
                profile_out,
                collapse_subwords,
                src_vocab,
            };
            commands::parse(&checkpoint, &input, &output, &opts)?;
        }
        Command::ScoreTrees {
            pred,
            gold,
            gold_unlabeled,
            per_sentence,
        } => {
            println!(
                "{}",
                commands::score_trees(&pred, &gold, !gold_unlabeled, per_sentence.as_deref())?
            );
        }
        Command::Bleu { hyp, reference } => println!("{}", commands::bleu(&hyp, &reference)?),
        Command::SweepLambda {
            config,
            start,
            end,
            step,
        } => {
            let cfg = load_config(&config, &[], None, None)?;
            let grid = commands::lambda_grid(start, end, step)?;
            print!("{}", commands::sweep_lambda(&cfg, &grid)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
