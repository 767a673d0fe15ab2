use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;

use super::{NodeIdx, Position, Taxonomy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativeSampling {
    /// Uniform over every eligible candidate.
    #[default]
    Uniform,
    /// Half of the negatives come from positions whose parent is an
    /// ancestor of the query; the rest are uniform.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingSample {
    pub query: NodeIdx,
    pub position: Position,
    /// `[parent is ancestor of query, child is descendant of query,
    /// query is ancestor of parent, query is descendant of child]`.
    pub labels: [bool; 4],
    pub is_positive: bool,
}

/// One query's samples, positive first.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGroup {
    pub query: NodeIdx,
    pub samples: Vec<TrainingSample>,
}

pub fn labels_for(t: &Taxonomy, query: NodeIdx, pos: Position) -> [bool; 4] {
    let p = pos.parent;
    [
        t.is_ancestor(p, query),
        pos.child.is_some_and(|c| t.is_ancestor(query, c)),
        t.is_ancestor(query, p),
        pos.child.is_some_and(|c| t.is_ancestor(c, query)),
    ]
}

fn is_true_position(t: &Taxonomy, n: NodeIdx, pos: Position) -> bool {
    if t.parents(n).binary_search(&pos.parent).is_err() {
        return false;
    }
    match pos.child {
        None => t.is_leaf(n),
        Some(c) => t.children(n).binary_search(&c).is_ok(),
    }
}

fn true_positions(t: &Taxonomy, n: NodeIdx) -> Vec<Position> {
    let mut out = Vec::new();
    for &p in t.parents(n) {
        if t.is_leaf(n) {
            out.push(Position::attach(p));
        } else {
            out.extend(t.children(n).iter().map(|&c| Position::insert(p, c)));
        }
    }
    out
}

/// Draws `k` distinct entries of `candidates` accepted by `eligible`, with
/// `pool` of them eligible in total. Rejection sampling when the pool is a
/// large share of the candidates, exhaustive filtering otherwise.
fn draw(
    candidates: &[Position],
    pool: usize,
    k: usize,
    eligible: impl Fn(Position) -> bool,
    rng: &mut impl Rng,
) -> Vec<Position> {
    if k == 0 {
        return Vec::new();
    }
    if pool * 4 <= candidates.len() || pool <= 4 * k {
        let all: Vec<Position> = candidates.iter().copied().filter(|&p| eligible(p)).collect();
        return sample(rng, all.len(), k.min(all.len())).into_iter().map(|i| all[i]).collect();
    }
    let mut seen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let i = rng.random_range(0..candidates.len());
        if eligible(candidates[i]) && seen.insert(i) {
            out.push(candidates[i]);
        }
    }
    out
}

/// Builds one group per non-root node: a positive drawn uniformly from its
/// true positions, then up to `neg_per_pos` negatives drawn without
/// replacement from candidates that neither involve the node nor are a true
/// position of it. `candidates` must be `t.candidates()`.
pub fn form_dataset(
    t: &Taxonomy,
    candidates: &[Position],
    neg_per_pos: usize,
    sampling: NegativeSampling,
    rng: &mut impl Rng,
) -> Result<Vec<QueryGroup>> {
    if neg_per_pos == 0 {
        return Err(Error::invalid("neg_per_pos must be at least 1"));
    }
    if t.len() < 2 {
        return Err(Error::data("taxonomy has fewer than two nodes; dataset would be empty"));
    }
    let mut groups = Vec::new();
    for n in 0..t.len() {
        if t.is_root(n) {
            continue;
        }
        let truth = true_positions(t, n);
        let positive = truth[rng.random_range(0..truth.len())];
        let involving = t.descendants(n).len() + 1 + t.ancestors(n).len();
        let pool = candidates.len() - involving - truth.len();
        let eligible = |p: Position| !p.involves(n) && !is_true_position(t, n, p);
        let k = neg_per_pos.min(pool);

        let negatives = match sampling {
            NegativeSampling::Uniform => draw(candidates, pool, k, eligible, rng),
            NegativeSampling::Hard => {
                let near = |p: Position| eligible(p) && t.is_ancestor(p.parent, n);
                let near_pool = candidates.iter().filter(|&&p| near(p)).count();
                let mut out = draw(candidates, near_pool, (k / 2).min(near_pool), near, rng);
                let far = |p: Position| eligible(p) && !t.is_ancestor(p.parent, n);
                let k_far = (k - out.len()).min(pool - near_pool);
                out.extend(draw(candidates, pool - near_pool, k_far, far, rng));
                out
            }
        };

        let mut samples = Vec::with_capacity(1 + negatives.len());
        for (i, position) in std::iter::once(positive).chain(negatives).enumerate() {
            samples.push(TrainingSample {
                query: n,
                position,
                labels: labels_for(t, n, position),
                is_positive: i == 0,
            });
        }
        groups.push(QueryGroup { query: n, samples });
    }
    Ok(groups)
}
