//! File-level workflows: dataset generation, training runs, evaluation and
//! completion of new terms.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Checkpoint, Tensor};
use crate::config::{Config, CONFIG_FILE};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::metrics::QueryRanks;
use crate::taxonomy::{count_from_frac, read_tsv, Role, Split, SplitView, Taxonomy};
use crate::train::{train, EvalQuery, Predictor, TrainOutcome, TrainOutput, CHECKPOINT_FILE, LOG_FILE};

pub const SPLIT_FILE: &str = "split.tsv";
pub const SEED_TERMS_FILE: &str = "seed_terms.tsv";
pub const SEED_EDGES_FILE: &str = "seed_edges.tsv";

/// Size of a held-out set, absolute or as a fraction of all nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HoldOut {
    Count(usize),
    Frac(f64),
}

impl HoldOut {
    pub fn resolve(self, nodes: usize) -> Result<usize> {
        match self {
            HoldOut::Count(n) => Ok(n),
            HoldOut::Frac(f) => count_from_frac(f, nodes),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Samples a split and writes it with the seed taxonomy left after removing
/// the held-out nodes.
pub fn gen_dataset(terms: &Path, edges: &Path, test: HoldOut, valid: HoldOut, seed: u64, out: &Path) -> Result<SplitView> {
    let full = Taxonomy::load(terms, edges)?;
    let (n_test, n_valid) = (test.resolve(full.len())?, valid.resolve(full.len())?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = Split::sample(&full, n_test, n_valid, &mut rng)?;
    let view = split.view(&full)?;
    create_dir(out)?;
    split.write(&out.join(SPLIT_FILE))?;
    view.seed.write_terms(&out.join(SEED_TERMS_FILE))?;
    view.seed.write_edges(&out.join(SEED_EDGES_FILE))?;
    Ok(view)
}

/// A configured dataset with every seed term resolved to a vector.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: Config,
    pub view: SplitView,
    pub embeddings: EmbeddingTable,
    pub features: Tensor,
}

impl Dataset {
    pub fn load(config: Config) -> Result<Self> {
        let full = Taxonomy::load(&config.terms, &config.edges)?;
        let view = Split::load(&config.split)?.view(&full)?;
        let embeddings = EmbeddingTable::load(&config.embeddings)?;
        let features = embeddings.features_for(&view.seed)?;
        Ok(Dataset {
            config,
            view,
            embeddings,
            features,
        })
    }

    pub fn queries(&self, role: Role) -> Result<Vec<EvalQuery>> {
        self.embeddings.queries(&self.view, role)
    }
}

/// Trains into `out`, writing the effective config, the training log and
/// the best checkpoint.
pub fn train_run(config: Config, out: &Path) -> Result<TrainOutcome> {
    create_dir(out)?;
    config.write(&out.join(CONFIG_FILE))?;
    let data = Dataset::load(config)?;
    let valid = data.queries(Role::Valid)?;
    let (checkpoint, log) = (out.join(CHECKPOINT_FILE), out.join(LOG_FILE));
    train(
        &data.view.seed,
        &data.features,
        &valid,
        &data.config.run,
        Some(TrainOutput {
            checkpoint: &checkpoint,
            log: &log,
        }),
    )
}

/// A checkpoint restored together with the dataset of its run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub data: Dataset,
    pub predictor: Predictor,
}

/// Config file expected next to a checkpoint.
pub fn config_for(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE)
}

pub fn load_trained(checkpoint: &Path) -> Result<Trained> {
    let data = Dataset::load(Config::load(&config_for(checkpoint))?)?;
    let ck = Checkpoint::read(checkpoint)?;
    let predictor = Predictor::from_checkpoint(
        &ck,
        &data.config.run,
        data.embeddings.dim(),
        data.view.seed.candidates(),
    )?;
    Ok(Trained { data, predictor })
}

impl Trained {
    pub fn evaluate(&self, role: Role) -> Result<(Vec<QueryRanks>, usize)> {
        self.predictor.evaluate(&self.data.queries(role)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTerm {
    pub id: String,
    pub name: String,
}

/// `id<TAB>name` per line, or a bare term used as both.
pub fn read_query_terms(path: &Path) -> Result<Vec<QueryTerm>> {
    Ok(read_tsv(path)?
        .into_iter()
        .map(|(_, cols)| {
            let id = cols[0].clone();
            let name = cols.get(1).cloned().unwrap_or_else(|| id.clone());
            QueryTerm { id, name }
        })
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct Completion {
    /// Candidate scores per successfully scored query, in input order.
    pub scored: Vec<(String, Vec<f64>)>,
    /// `(query id, message)` for each query that could not be scored.
    pub failures: Vec<(String, String)>,
}

pub fn complete(predictor: &Predictor, embeddings: &EmbeddingTable, terms: &[QueryTerm]) -> Completion {
    let mut out = Completion::default();
    for t in terms {
        let scored = embeddings
            .lookup(&t.id, &t.name)
            .ok_or_else(|| Error::data(format!("no embedding for `{}`", t.name)))
            .and_then(|v| predictor.score(v));
        match scored {
            Ok(s) => out.scored.push((t.id.clone(), s)),
            Err(e) => out.failures.push((t.id.clone(), e.to_string())),
        }
    }
    out
}
