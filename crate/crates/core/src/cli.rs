//! Command-line front end: corpus generation, training, evaluation,
//! prediction dumps, gradient checks and the ablation table.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval::{ablation_suite, evaluate, predict_all};
use crate::geometry::AnchorConfig;
use crate::gradsuite::{op_names, run_suite, TOLERANCE};
use crate::pipeline::{load_checkpoint, save_checkpoint, train_on, TrainConfig, TrainState};
use crate::synthdata::{
    generate_corpus, read_corpus, write_corpus, CorpusConfig, GroundingExample, Split,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "qrc",
    version,
    about = "Phrase grounding with learned proposals, query-guided regression and a context policy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn select(self, corpus: &[GroundingExample]) -> Vec<&GroundingExample> {
        let want = match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        };
        corpus
            .iter()
            .filter(|e| want.is_none_or(|s| Split::of(e.scene.id) == s))
            .collect()
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic grounding corpus as JSON lines.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split and write a checkpoint.
    Train {
        /// JSON file with training options; omitted fields take defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log; defaults to `<out>.metrics.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write the report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Dump per-query predictions as JSON lines.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Only the phrase at this position in each description.
        #[arg(long)]
        query_index: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Compare autodiff against finite differences for every operation.
    Gradcheck {
        /// Check a single operation.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate the model variants and hyperparameter sweeps.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON table; a markdown rendering goes to stdout.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        sweep_seeds: Vec<u64>,
        /// Train only the four variants.
        #[arg(long)]
        skip_sweeps: bool,
    },
}

/// Exit status for a library error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// status. Diagnostics go to stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenData { seed, n, out } => {
            let corpus =
                generate_corpus(seed, n, &CorpusConfig::default(), &AnchorConfig::default())?;
            write_corpus(&corpus, &out)?;
            log::info!("wrote {} examples to {}", corpus.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            log,
        } => {
            let config = TrainConfig::load(&config)?;
            let corpus = read_corpus(&data)?;
            let train = SplitArg::Train.select(&corpus);
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".metrics.jsonl");
                p.into()
            });
            let mut w = create(&log_path)?;
            let outcome = train_on(TrainState::new(&config)?, &train, |rec| {
                serde_json::to_writer(&mut w, rec)?;
                writeln!(w).map_err(|e| Error::io(&log_path, e))
            })?;
            w.flush().map_err(|e| Error::io(&log_path, e))?;
            save_checkpoint(&outcome.state, &out)?;
            log::info!(
                "trained {} steps ({} aborted, {} queries skipped)",
                outcome.state.step,
                outcome.state.nan_steps,
                outcome.state.skipped_queries
            );
        }
        Command::Eval {
            ckpt,
            data,
            report,
            split,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let corpus = read_corpus(&data)?;
            let r = evaluate(&state.model, &state.config, &split.select(&corpus))?;
            write_json(&report, &r)?;
            println!(
                "accuracy {:.4}  ubp {:.4}  bpg {:.3}  queries {}",
                r.accuracy, r.ubp, r.bpg, r.n_queries
            );
        }
        Command::Predict {
            ckpt,
            data,
            query_index,
            out,
            split,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let corpus = read_corpus(&data)?;
            let (preds, _) = predict_all(&state.model, &state.config, &split.select(&corpus))?;
            let mut w = create(&out)?;
            for p in preds
                .iter()
                .filter(|p| query_index.is_none_or(|q| q == p.phrase_index))
            {
                serde_json::to_writer(&mut w, p)?;
                writeln!(w).map_err(|e| Error::io(&out, e))?;
            }
            w.flush().map_err(|e| Error::io(&out, e))?;
        }
        Command::Gradcheck { op, seed } => {
            if let Some(name) = &op {
                if !op_names().contains(&name.as_str()) {
                    eprintln!(
                        "error: unknown operation `{name}`; known: {}",
                        op_names().join(", ")
                    );
                    return Ok(EXIT_USAGE);
                }
            }
            let checks = run_suite(op.as_deref(), seed)?;
            let mut ok = true;
            for c in &checks {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<18} points {:>3}  max rel error {:.3e}  {status}",
                    c.op, c.points, c.max_rel_error
                );
                ok &= c.passed();
            }
            if !ok {
                eprintln!("error: relative error above {TOLERANCE:e}");
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::Ablate {
            config,
            data,
            out,
            seeds,
            sweep_seeds,
            skip_sweeps,
        } => {
            let config = TrainConfig::load(&config)?;
            let corpus = read_corpus(&data)?;
            let sweep_seeds = if skip_sweeps { Vec::new() } else { sweep_seeds };
            let table = ablation_suite(&config, &corpus, &seeds, &sweep_seeds);
            write_json(&out, &table)?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(EXIT_OK)
}
