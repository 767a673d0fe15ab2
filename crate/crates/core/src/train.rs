//! Training loop, candidate caching and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Checkpoint, MonitorMode, ParamStore, PlateauScheduler, Tape, Tensor, Var};
use crate::boxes::{BoxEmbedding, Smoothing};
use crate::encoder::{BoxVars, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{mean_reciprocal_rank, QueryRanks};
use crate::objectives::{
    box_constraint_loss_var, classification_loss_var, ranking_loss_var, BoxLossInputs, LossBreakdown, LossToggles,
};
use crate::scoring::{groups_for, rank_of, score_batch, CandidateBoxes, ScoreBatch};
use crate::taxonomy::{form_dataset, EgoSubtree, HeldOutQuery, NegativeSampling, NodeIdx, Position, QueryGroup, Taxonomy};

/// How each query's positive is paired with its negatives in the ranking
/// loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankPairs {
    #[default]
    All,
    /// One uniformly drawn negative per positive.
    Sampled,
}

/// Softmax group of the center similarity during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftmaxScope {
    /// Each query's own samples.
    #[default]
    Query,
    /// Every sample of the mini-batch.
    Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d_box: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub max_children: usize,
    pub use_aggregation: bool,
    pub epochs: usize,
    pub batch_queries: usize,
    pub neg_per_pos: usize,
    pub lr: f64,
    pub alpha: f64,
    pub tau_train: f64,
    pub tau_predict: f64,
    /// Defaults to `neg_per_pos` when unset.
    pub pos_weight: Option<f64>,
    pub seed: u64,
    pub losses: LossToggles,
    pub sampling: NegativeSampling,
    pub rank_pairs: RankPairs,
    pub softmax_scope: SoftmaxScope,
    pub patience: usize,
    pub lr_factor: f64,
    pub f32_storage: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_box: 64,
            n_heads: 4,
            dropout: 0.1,
            max_children: 30,
            use_aggregation: true,
            epochs: 100,
            batch_queries: 16,
            neg_per_pos: 63,
            lr: 1e-3,
            alpha: 0.5,
            tau_train: 10.0,
            tau_predict: 20.0,
            pos_weight: None,
            seed: 0,
            losses: LossToggles::default(),
            sampling: NegativeSampling::Uniform,
            rank_pairs: RankPairs::All,
            softmax_scope: SoftmaxScope::Query,
            patience: 10,
            lr_factor: 0.1,
            f32_storage: false,
        }
    }
}

impl RunConfig {
    pub fn encoder(&self, d_in: usize) -> EncoderConfig {
        EncoderConfig {
            d_in,
            d_box: self.d_box,
            n_heads: self.n_heads,
            dropout: self.dropout,
            max_children: self.max_children,
            use_aggregation: self.use_aggregation,
        }
    }

    pub fn pos_weight(&self) -> f64 {
        self.pos_weight.unwrap_or(self.neg_per_pos as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_queries", self.batch_queries as f64),
            ("neg_per_pos", self.neg_per_pos as f64),
            ("lr", self.lr),
            ("tau_train", self.tau_train),
            ("tau_predict", self.tau_predict),
            ("pos_weight", self.pos_weight()),
            ("patience", self.patience as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1)", self.alpha)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::invalid(format!("lr_factor {} outside (0, 1)", self.lr_factor)));
        }
        let l = self.losses;
        if !(l.classification || l.box_constraint || l.ranking) {
            return Err(Error::invalid("at least one loss component must be enabled"));
        }
        Ok(())
    }
}

/// A held-out concept with its input embedding.
#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub query: HeldOutQuery,
    pub embedding: Vec<f64>,
}

/// Encoder parameters.
#[derive(Debug, Clone)]
pub struct Model {
    encoder: Encoder,
    store: ParamStore,
    cfg: RunConfig,
}

impl Model {
    /// Freshly initialised parameters, seeded from `cfg.seed`.
    pub fn new(cfg: &RunConfig, d_in: usize) -> Result<Self> {
        cfg.validate()?;
        let ecfg = cfg.encoder(d_in);
        ecfg.validate()?;
        let mut store = if cfg.f32_storage {
            ParamStore::with_f32_storage()
        } else {
            ParamStore::new()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = Encoder::new(ecfg, &mut store, &mut rng)?;
        Ok(Model {
            encoder,
            store,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn d_in(&self) -> usize {
        self.encoder.config().d_in
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn query_box(&self, embedding: &[f64]) -> Result<BoxEmbedding> {
        if embedding.len() != self.d_in() {
            return Err(Error::invalid(format!(
                "query embedding has dim {}, model expects {}",
                embedding.len(),
                self.d_in()
            )));
        }
        self.encoder.query_box(&self.store, embedding)
    }

    /// One box per seed node from its full ego-subtree, rounded to `f32` so
    /// that a cache reloaded from a checkpoint is identical.
    pub fn node_boxes(&self, seed: &Taxonomy, features: &Tensor) -> Result<Vec<BoxEmbedding>> {
        check_features(seed, features, self.d_in())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5EED_CA5E);
        let max = self.cfg.max_children;
        let mut out = Vec::with_capacity(seed.len());
        const CHUNK: usize = 512;
        for start in (0..seed.len()).step_by(CHUNK) {
            let subtrees: Vec<EgoSubtree> = (start..seed.len().min(start + CHUNK))
                .map(|n| seed.ego_subtree(n, max, &[], &mut rng))
                .collect();
            let mut tape = Tape::new();
            let p = self.store.bind_frozen(&mut tape);
            let x = tape.constant(features.clone());
            let f = self.encoder.aggregate(&mut tape, &p, x, &subtrees, false, &mut rng)?;
            let b = self.encoder.decode_key(&mut tape, &p, f)?;
            let d = self.cfg.d_box;
            let (lo, hi) = (tape.value(b.min).data(), tape.value(b.max).data());
            for i in 0..subtrees.len() {
                let r = |v: &[f64]| v[i * d..(i + 1) * d].iter().map(|&x| x as f32 as f64).collect();
                out.push(BoxEmbedding {
                    min: r(lo),
                    max: r(hi),
                });
            }
        }
        Ok(out)
    }
}

fn check_features(seed: &Taxonomy, features: &Tensor, d_in: usize) -> Result<()> {
    if features.shape() != [seed.len(), d_in] {
        return Err(Error::invalid(format!(
            "feature table is {:?}, expected [{}, {d_in}]",
            features.shape(),
            seed.len()
        )));
    }
    Ok(())
}

/// A frozen model with every seed candidate's boxes cached. Queries are
/// scored without re-running graph aggregation.
#[derive(Debug, Clone)]
pub struct Predictor {
    model: Model,
    candidates: CandidateBoxes,
    index: HashMap<Position, usize>,
}

impl Predictor {
    pub fn build(model: Model, seed: &Taxonomy, features: &Tensor) -> Result<Self> {
        let nodes = model.node_boxes(seed, features)?;
        let s = Smoothing::new(model.cfg.tau_predict)?;
        let candidates = CandidateBoxes::from_node_boxes(seed.candidates(), &nodes, s)?;
        Ok(Self::from_parts(model, candidates))
    }

    fn from_parts(model: Model, candidates: CandidateBoxes) -> Self {
        let index = candidates.positions().iter().enumerate().map(|(i, &p)| (p, i)).collect();
        Predictor {
            model,
            candidates,
            index,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn candidates(&self) -> &CandidateBoxes {
        &self.candidates
    }

    /// Parameters plus `cand_min` / `cand_max`, each `[candidates, 2, d_box]`.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_store(&self.model.store);
        let shape = vec![self.candidates.len(), 2, self.candidates.d_box()];
        let (lo, hi) = self.candidates.raw();
        ck.push("cand_min", Tensor::new(shape.clone(), lo.to_vec())?)?;
        ck.push("cand_max", Tensor::new(shape, hi.to_vec())?)?;
        Ok(ck)
    }

    /// Restores a predictor; `positions` must be the candidate enumeration
    /// the cache was written for.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &RunConfig, d_in: usize, positions: Vec<Position>) -> Result<Self> {
        let mut model = Model::new(cfg, d_in)?;
        ck.load_into(&mut model.store)?;
        let get = |name| ck.get(name).ok_or_else(|| Error::data(format!("checkpoint lacks `{name}`")));
        let (lo, hi) = (get("cand_min")?, get("cand_max")?);
        let want = [positions.len(), 2, cfg.d_box];
        if lo.shape() != want || hi.shape() != want {
            return Err(Error::data(format!(
                "candidate cache is {:?} but the seed taxonomy needs {want:?}",
                lo.shape()
            )));
        }
        let s = Smoothing::new(cfg.tau_predict)?;
        let candidates = CandidateBoxes::new(positions, cfg.d_box, lo.data().to_vec(), hi.data().to_vec(), s)?;
        Ok(Self::from_parts(model, candidates))
    }

    /// Scores of every candidate, in enumeration order.
    pub fn score(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let q = self.model.query_box(embedding)?;
        self.candidates.score_all(&q)
    }

    /// Ranks of the query's true positions, or `None` when it has none.
    pub fn rank_query(&self, q: &EvalQuery) -> Result<Option<QueryRanks>> {
        if q.query.truth.is_empty() {
            return Ok(None);
        }
        let scores = self.score(&q.embedding)?;
        let mut ranks = Vec::with_capacity(q.query.truth.len());
        for pos in &q.query.truth {
            let &i = self
                .index
                .get(pos)
                .ok_or_else(|| Error::data(format!("true position of `{}` is not a seed candidate", q.query.id)))?;
            ranks.push(rank_of(&scores, i));
        }
        Ok(Some(QueryRanks {
            id: q.query.id.clone(),
            kind: q.query.kind,
            ranks,
        }))
    }

    /// Ranks every query, sorted by query id; also returns how many were
    /// skipped for lacking ground truth.
    pub fn evaluate(&self, queries: &[EvalQuery]) -> Result<(Vec<QueryRanks>, usize)> {
        let mut out = Vec::with_capacity(queries.len());
        let mut skipped = 0;
        for q in queries {
            match self.rank_query(q)? {
                Some(r) => out.push(r),
                None => {
                    warn!("query `{}` has no ground-truth position; skipped", q.query.id);
                    skipped += 1;
                }
            }
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok((out, skipped))
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_mrr: Option<f64>,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch\tl_cls\tl_box\tl_rank\ttotal\tval_mrr\tlr";

impl EpochLog {
    pub fn tsv_row(&self) -> String {
        let l = self.loss;
        let v = self.val_mrr.map_or("NA".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{v}\t{:e}",
            self.epoch, l.l_cls, l.l_box, l.l_rank, l.total, self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Predictor from the best epoch (highest validation MRR, or lowest
    /// training loss without validation queries).
    pub best: Predictor,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, Copy)]
pub struct TrainOutput<'a> {
    pub checkpoint: &'a Path,
    pub log: &'a Path,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.tsv";

/// Trains on self-supervised groups drawn from `seed`, validating on
/// `valid` after every epoch. `features` is the `[seed.len(), d_in]` table
/// of node embeddings.
pub fn train(
    seed: &Taxonomy,
    features: &Tensor,
    valid: &[EvalQuery],
    cfg: &RunConfig,
    out: Option<TrainOutput<'_>>,
) -> Result<TrainOutcome> {
    let d_in = features.shape().get(1).copied().unwrap_or(0);
    let mut model = Model::new(cfg, d_in)?;
    check_features(seed, features, d_in)?;
    let candidates = seed.candidates();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::with_lr(cfg.lr);
    let mode = if valid.is_empty() { MonitorMode::Min } else { MonitorMode::Max };
    let mut sched = PlateauScheduler::new(mode, cfg.patience, cfg.lr_factor);
    let mut log_file = match out {
        Some(o) => {
            let mut f = File::create(o.log).map_err(|e| Error::io(o.log, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(o.log, e))?;
            Some((f, o.log))
        }
        None => None,
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Predictor)> = None;
    for epoch in 1..=cfg.epochs {
        let mut groups = form_dataset(seed, &candidates, cfg.neg_per_pos, cfg.sampling, &mut rng)?;
        groups.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let n_batches = groups.len().div_ceil(cfg.batch_queries);
        for (b, batch) in groups.chunks(cfg.batch_queries).enumerate() {
            let parts = train_step(&mut model, seed, features, batch, &mut rng)?;
            let total: f64 = parts.iter().sum();
            if !total.is_finite() || !model.store.grads_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {}/{n_batches} (l_cls {}, l_box {}, l_rank {})",
                    b + 1,
                    parts[0],
                    parts[1],
                    parts[2]
                )));
            }
            adam.step(&mut model.store);
            for k in 0..3 {
                sums[k] += parts[k];
            }
        }
        let mean = |k: usize| sums[k] / n_batches.max(1) as f64;
        let loss = cfg.losses.combine(mean(0), mean(1), mean(2));

        let predictor = Predictor::build(model.clone(), seed, features)?;
        let val_mrr = if valid.is_empty() {
            None
        } else {
            Some(mean_reciprocal_rank(&predictor.evaluate(valid)?.0))
        };
        let monitored = val_mrr.unwrap_or(loss.total);
        let row = EpochLog {
            epoch,
            loss,
            val_mrr,
            lr: adam.lr,
        };
        info!("{}", row.tsv_row());
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", row.tsv_row()).map_err(|e| Error::io(*path, e))?;
        }
        log.push(row);

        let improved = match (&best, mode) {
            (None, _) => true,
            (Some((b, _, _)), MonitorMode::Max) => monitored > *b,
            (Some((b, _, _)), MonitorMode::Min) => monitored < *b,
        };
        if improved {
            if let Some(o) = out {
                predictor.to_checkpoint()?.write(o.checkpoint)?;
            }
            best = Some((monitored, epoch, predictor));
        }
        adam.lr = sched.observe(monitored, adam.lr);
    }
    let (_, best_epoch, best) = best.ok_or_else(|| Error::invalid("epochs must be positive"))?;
    Ok(TrainOutcome { best, best_epoch, log })
}

/// Subtree key: the node, plus the query when the query is one of its
/// children and must be hidden from it.
type SubtreeKey = (NodeIdx, Option<NodeIdx>);

fn subtree_key(seed: &Taxonomy, node: NodeIdx, query: NodeIdx) -> SubtreeKey {
    let hides = seed.children(node).binary_search(&query).is_ok();
    (node, hides.then_some(query))
}

/// Forward and backward pass over one mini-batch; gradients are left in the
/// store. Returns the unweighted `[l_cls, l_box, l_rank]`.
fn train_step(
    model: &mut Model,
    seed: &Taxonomy,
    features: &Tensor,
    batch: &[QueryGroup],
    rng: &mut ChaCha8Rng,
) -> Result<[f64; 3]> {
    let cfg = &model.cfg;
    let mut keys: BTreeMap<SubtreeKey, usize> = BTreeMap::new();
    let mut subtrees = Vec::new();
    let mut slot = |node: NodeIdx, query: NodeIdx, rng: &mut ChaCha8Rng| -> usize {
        let key = subtree_key(seed, node, query);
        *keys.entry(key).or_insert_with(|| {
            let exclude: Vec<NodeIdx> = key.1.into_iter().collect();
            subtrees.push(seed.ego_subtree(node, cfg.max_children, &exclude, rng));
            subtrees.len() - 1
        })
    };

    let rows: usize = batch.iter().map(|g| g.samples.len()).sum();
    let mut parent_rows = Vec::with_capacity(rows);
    let mut child_rows = Vec::with_capacity(rows);
    let mut query_rows = Vec::with_capacity(rows);
    let mut has_child = Vec::with_capacity(rows);
    let mut positive = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    let mut gamma_qp = Vec::with_capacity(rows);
    let mut gamma_qc = Vec::with_capacity(rows);
    let mut pairs = Vec::new();
    let mut group_lens = Vec::with_capacity(batch.len());
    for (g, group) in batch.iter().enumerate() {
        let n = group.query;
        let first = parent_rows.len();
        for s in &group.samples {
            let p = s.position.parent;
            let pr = slot(p, n, rng);
            parent_rows.push(pr);
            child_rows.push(s.position.child.map_or(pr, |c| slot(c, n, rng)));
            query_rows.push(g);
            has_child.push(s.position.child.is_some());
            positive.push(s.is_positive);
            labels.push(s.labels);
            gamma_qp.push(seed.dynamic_margin(n, p, cfg.alpha));
            gamma_qc.push(s.position.child.map_or(0.0, |c| seed.dynamic_margin(n, c, cfg.alpha)));
        }
        let p_pos = group.samples[0].position.parent;
        let margin = |i: usize| seed.dynamic_margin(p_pos, group.samples[i].position.parent, cfg.alpha);
        let negs = group.samples.len() - 1;
        match cfg.rank_pairs {
            RankPairs::All => pairs.extend((1..=negs).map(|i| (first, first + i, margin(i)))),
            RankPairs::Sampled if negs > 0 => {
                let i = rng.random_range(1..=negs);
                pairs.push((first, first + i, margin(i)));
            }
            RankPairs::Sampled => {}
        }
        group_lens.push(group.samples.len());
    }

    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x = tape.constant(features.clone());
    let enc = &model.encoder;
    let f = enc.aggregate(&mut tape, &p, x, &subtrees, true, rng)?;
    let keys_box = enc.decode_key(&mut tape, &p, f)?;
    let q_nodes: Vec<NodeIdx> = batch.iter().map(|g| g.query).collect();
    let q_x = tape.gather_rows(x, Rc::new(q_nodes))?;
    let q_box = enc.decode_query(&mut tape, &p, q_x)?;

    let gather = |tape: &mut Tape, b: BoxVars, idx: Vec<usize>| -> Result<BoxVars> {
        let idx = Rc::new(idx);
        Ok(BoxVars {
            min: tape.gather_rows(b.min, idx.clone())?,
            max: tape.gather_rows(b.max, idx)?,
        })
    };
    let sb = ScoreBatch {
        query: gather(&mut tape, q_box, query_rows)?,
        parent: gather(&mut tape, keys_box, parent_rows)?,
        child: gather(&mut tape, keys_box, child_rows)?,
    };
    let groups = groups_for(rows, &group_lens, cfg.softmax_scope == SoftmaxScope::Batch);

    let mut terms: Vec<Var> = Vec::new();
    let mut values = [0.0; 3];
    let need_scores = cfg.losses.classification || cfg.losses.ranking;
    let scores = if need_scores {
        Some(score_batch(&mut tape, sb, &has_child, groups, Smoothing::new(cfg.tau_train)?)?)
    } else {
        None
    };
    if cfg.losses.classification {
        let l = classification_loss_var(&mut tape, scores.expect("scores computed"), &positive, cfg.pos_weight())?;
        values[0] = tape.value(l).item().unwrap_or(f64::NAN);
        terms.push(l);
    }
    if cfg.losses.box_constraint {
        let inp = BoxLossInputs {
            labels: &labels,
            has_child: &has_child,
            gamma_qp: &gamma_qp,
            gamma_qc: &gamma_qc,
        };
        let l = box_constraint_loss_var(&mut tape, sb, inp, Smoothing::new(cfg.tau_train)?)?;
        values[1] = tape.value(l).item().unwrap_or(f64::NAN);
        terms.push(l);
    }
    if cfg.losses.ranking {
        let l = ranking_loss_var(&mut tape, scores.expect("scores computed"), &pairs)?;
        values[2] = tape.value(l).item().unwrap_or(f64::NAN);
        terms.push(l);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    if !tape.value(total).all_finite() {
        return Ok(values.map(|v| if v.is_finite() { v } else { f64::NAN }));
    }
    let grads = tape.backward(total)?;
    model.store.accumulate(&p, &grads);
    Ok(values)
}
