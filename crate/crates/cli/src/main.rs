use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use taxbox::config::Config;
use taxbox::embeddings::EmbeddingTable;
use taxbox::metrics::{parse_ranks, write_ranks, write_report};
use taxbox::pipeline::{complete, gen_dataset, load_trained, read_query_terms, train_run, HoldOut};
use taxbox::scoring::write_score_table;
use taxbox::taxonomy::Role;
use taxbox::train::CHECKPOINT_FILE;
use taxbox::{Error, Result};

/// Taxonomy completion with box embeddings.
#[derive(Parser)]
#[command(name = "taxbox", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hold out test and validation nodes and write the seed taxonomy.
    GenDataset(GenDataset),
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank held-out queries and print the metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write per-query ranks here.
        #[arg(long)]
        ranks: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank positions for new terms and print the top K per term.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `id<TAB>name` or one term per line.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        /// Vectors for the query terms; defaults to the run's embedding file.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the metrics report from a ranks file written by `eval`.
    Report {
        #[arg(long)]
        ranks: PathBuf,
        #[arg(long, default_value_t = 0)]
        skipped: usize,
    },
}

#[derive(Args)]
struct GenDataset {
    #[arg(long)]
    terms: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long, conflicts_with = "test_count", required_unless_present = "test_count")]
    test_frac: Option<f64>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long, conflicts_with = "valid_count")]
    valid_frac: Option<f64>,
    #[arg(long)]
    valid_count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Test,
    Valid,
}

fn holdout(frac: Option<f64>, count: Option<usize>) -> HoldOut {
    match (frac, count) {
        (Some(f), _) => HoldOut::Frac(f),
        (None, Some(n)) => HoldOut::Count(n),
        (None, None) => HoldOut::Count(0),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn out_err(path: Option<&Path>) -> impl Fn(io::Error) -> Error + '_ {
    move |e| Error::io(path.unwrap_or(Path::new("<stdout>")), e)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDataset(a) => {
            let view = gen_dataset(
                &a.terms,
                &a.edges,
                holdout(a.test_frac, a.test_count),
                holdout(a.valid_frac, a.valid_count),
                a.seed,
                &a.out,
            )?;
            info!(
                "held out {} test and {} valid nodes; seed taxonomy has {} nodes",
                view.role(Role::Test).count(),
                view.role(Role::Valid).count(),
                view.seed.len()
            );
        }
        Command::Train { config, out } => {
            let outcome = train_run(Config::load(&config)?, &out)?;
            info!(
                "best epoch {}; checkpoint at {}",
                outcome.best_epoch,
                out.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Eval {
            checkpoint,
            split,
            ranks,
            out,
        } => {
            let trained = load_trained(&checkpoint)?;
            let role = match split {
                SplitArg::Test => Role::Test,
                SplitArg::Valid => Role::Valid,
            };
            let (results, skipped) = trained.evaluate(role)?;
            if let Some(p) = &ranks {
                let mut f = output(Some(p))?;
                write_ranks(&mut f, &results).and_then(|_| f.flush()).map_err(|e| Error::io(p, e))?;
            }
            let mut w = output(out.as_deref())?;
            write_report(&mut w, &results, skipped)?;
            w.flush().map_err(out_err(out.as_deref()))?;
        }
        Command::Complete {
            checkpoint,
            queries,
            topk,
            embeddings,
            out,
        } => {
            let trained = load_trained(&checkpoint)?;
            let table = match &embeddings {
                Some(p) => EmbeddingTable::load(p)?,
                None => trained.data.embeddings.clone(),
            };
            let terms = read_query_terms(&queries)?;
            let done = complete(&trained.predictor, &table, &terms);
            for (id, msg) in &done.failures {
                eprintln!("error\t{id}\t{msg}");
            }
            let mut w = output(out.as_deref())?;
            write_score_table(
                &mut w,
                &trained.data.view.seed,
                trained.predictor.candidates().positions(),
                &done.scored,
                topk,
            )
            .and_then(|_| w.flush())
            .map_err(out_err(out.as_deref()))?;
            if !terms.is_empty() && done.scored.is_empty() {
                return Err(Error::data(format!("none of the {} query terms could be scored", terms.len())));
            }
        }
        Command::Report { ranks, skipped } => {
            let text = fs::read_to_string(&ranks).map_err(|e| Error::io(&ranks, e))?;
            let results = parse_ranks(&text, &ranks.display().to_string())?;
            let mut w = output(None)?;
            write_report(&mut w, &results, skipped)?;
            w.flush().map_err(out_err(None))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
