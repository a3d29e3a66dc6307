use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use insctc_core::harness::{
    corpus_config, load_with_env, read_hypotheses, run_decode, run_train, score, Hypothesis,
    RunConfig,
};
use insctc_core::synthdata::{gen_corpus, read_split, write_corpus, Split};
use insctc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "insctc", version, about = "Insertion-based transduction with joint CTC on synthetic speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus described by the `data.*` keys.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt, train.log and config.txt into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode one split into a hypothesis file, plus a `.score` report beside it.
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a hypothesis file against references.
    Score {
        /// `id<TAB>ids` lines, or a corpus split file such as `test.txt`.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
}

/// Reference transcripts from either format.
fn load_references(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if text.lines().next().is_some_and(|l| l.contains('\t')) {
        return Ok(read_hypotheses(path)?
            .into_iter()
            .map(|h: Hypothesis| (h.id, h.tokens.into_ids()))
            .collect());
    }
    let split = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse::<Split>().ok())
        .ok_or_else(|| Error::Config(format!("{} is neither a tab-separated file nor a split file", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    Ok(read_split(dir, split)?
        .into_iter()
        .map(|u| (u.id, u.transcript.into_ids()))
        .collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = corpus_config(&load_with_env(&config)?)?;
            let corpus = gen_corpus(&cfg)?;
            write_corpus(&out, &corpus)?;
            println!(
                "wrote {} train, {} dev, {} test utterances to {}",
                corpus.train.len(),
                corpus.dev.len(),
                corpus.test.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = run_train(&cfg, &data, &out)?;
            for e in &outcome.log {
                eprintln!("{e}");
            }
            println!(
                "best epoch {} dev_error {:.4}; checkpoint in {}",
                outcome.best_epoch,
                outcome.best_dev_error,
                out.display()
            );
        }
        Command::Decode {
            config,
            ckpt,
            data,
            split,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = run_decode(&cfg, &ckpt, &data, split, &out)?;
            println!("{report}");
        }
        Command::Score { reference, hyp } => {
            let refs = load_references(&reference)?;
            let report = score(&refs, &read_hypotheses(&hyp)?)?;
            println!("{report}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("insctc: {}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("insctc: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
