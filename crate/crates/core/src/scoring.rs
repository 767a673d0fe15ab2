//! Insertion and attachment scorers.
//!
//! An insertion candidate `<p, c>` scores `Pr(p|q) * Pr(q|c) * sim_p * sim_c`
//! and an attachment candidate `<p, none>` scores `Pr(q|p) * sim_p`, where
//! `Pr(x|y) = Vol(x ∩ y) / Vol(y)` and each `sim` is a softmax, over the
//! scoring group, of the reciprocal center distance to the query.

use std::io::Write;
use std::ops::Range;
use std::rc::Rc;

use crate::autodiff::{Tape, Tensor, Var};
use crate::boxes::{log_cond_prob_raw, log_volume, BoxEmbedding, Smoothing};
use crate::encoder::BoxVars;
use crate::error::{Error, Result};
use crate::taxonomy::{Position, Taxonomy};

/// Center distances below this are treated as this before the reciprocal.
pub const MIN_DISTANCE: f64 = 1e-9;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt().max(MIN_DISTANCE)
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in x.iter_mut() {
        *v /= z;
    }
}

/// `(sim_parent, sim_child)` per candidate. The child softmax runs over the
/// candidates that have a child; the others get a neutral 1.
pub fn center_similarity(
    query: &BoxEmbedding,
    parents: &[&BoxEmbedding],
    children: &[Option<&BoxEmbedding>],
) -> Result<Vec<(f64, f64)>> {
    if parents.len() != children.len() {
        return Err(Error::invalid(format!(
            "center_similarity: {} parents but {} children",
            parents.len(),
            children.len()
        )));
    }
    let d = query.dim();
    if parents.iter().any(|b| b.dim() != d) || children.iter().flatten().any(|b| b.dim() != d) {
        return Err(Error::invalid("center_similarity: box dimensions differ"));
    }
    let cq = query.center();
    let mut sp: Vec<f64> = parents.iter().map(|b| 1.0 / distance(&cq, &b.center())).collect();
    softmax_in_place(&mut sp);
    let mut sc: Vec<f64> = children.iter().flatten().map(|b| 1.0 / distance(&cq, &b.center())).collect();
    softmax_in_place(&mut sc);
    let mut sc = sc.into_iter();
    Ok(sp
        .into_iter()
        .zip(children)
        .map(|(p, c)| (p, if c.is_some() { sc.next().unwrap() } else { 1.0 }))
        .collect())
}

/// `Pr(p|q) * Pr(q|c) * sim`, with `sim = sim_parent * sim_child`.
pub fn insertion_score(q: &BoxEmbedding, p: &BoxEmbedding, c: &BoxEmbedding, sim: f64, s: Smoothing) -> Result<f64> {
    if q.dim() != p.dim() || q.dim() != c.dim() {
        return Err(Error::invalid("insertion_score: box dimensions differ"));
    }
    let l = log_cond_prob_raw(&p.min, &p.max, &q.min, &q.max, s) + log_cond_prob_raw(&q.min, &q.max, &c.min, &c.max, s);
    Ok(l.exp() * sim)
}

/// `Pr(q|p) * sim_parent`.
pub fn attachment_score(q: &BoxEmbedding, p: &BoxEmbedding, sim_parent: f64, s: Smoothing) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::invalid("attachment_score: box dimensions differ"));
    }
    Ok(log_cond_prob_raw(&q.min, &q.max, &p.min, &p.max, s).exp() * sim_parent)
}

/// Decoded boxes for every candidate position, row-aligned with the
/// candidate enumeration. Rows are `[parent, child]`; the child row of an
/// attachment slot is zero and unused.
#[derive(Debug, Clone)]
pub struct CandidateBoxes {
    positions: Vec<Position>,
    d_box: usize,
    min: Vec<f64>,
    max: Vec<f64>,
    parent_log_vol: Vec<f64>,
    child_log_vol: Vec<f64>,
    smoothing: Smoothing,
}

impl CandidateBoxes {
    /// `min`/`max` are flat `[positions.len(), 2, d_box]` arrays scored at
    /// smoothing `s`.
    pub fn new(positions: Vec<Position>, d_box: usize, min: Vec<f64>, max: Vec<f64>, s: Smoothing) -> Result<Self> {
        let want = positions.len() * 2 * d_box;
        if min.len() != want || max.len() != want {
            return Err(Error::data(format!(
                "candidate cache holds {} / {} values but {} candidates of dim {d_box} need {want}",
                min.len(),
                max.len(),
                positions.len()
            )));
        }
        let mut cache = CandidateBoxes {
            positions,
            d_box,
            min,
            max,
            parent_log_vol: Vec::new(),
            child_log_vol: Vec::new(),
            smoothing: s,
        };
        cache.refresh_volumes();
        Ok(cache)
    }

    /// Builds rows from per-node boxes.
    pub fn from_node_boxes(positions: Vec<Position>, nodes: &[BoxEmbedding], s: Smoothing) -> Result<Self> {
        let d = nodes.first().map_or(0, BoxEmbedding::dim);
        let mut min = Vec::with_capacity(positions.len() * 2 * d);
        let mut max = Vec::with_capacity(positions.len() * 2 * d);
        for pos in &positions {
            let p = nodes
                .get(pos.parent)
                .ok_or_else(|| Error::data(format!("no box for node index {}", pos.parent)))?;
            min.extend_from_slice(&p.min);
            max.extend_from_slice(&p.max);
            match pos.child {
                Some(c) => {
                    let c = nodes.get(c).ok_or_else(|| Error::data(format!("no box for node index {c}")))?;
                    min.extend_from_slice(&c.min);
                    max.extend_from_slice(&c.max);
                }
                None => {
                    min.resize(min.len() + d, 0.0);
                    max.resize(max.len() + d, 0.0);
                }
            }
        }
        Self::new(positions, d, min, max, s)
    }

    fn refresh_volumes(&mut self) {
        let d = self.d_box;
        let s = self.smoothing;
        self.parent_log_vol = (0..self.len())
            .map(|i| log_volume(&self.min[2 * i * d..(2 * i + 1) * d], &self.max[2 * i * d..(2 * i + 1) * d], s))
            .collect();
        self.child_log_vol = (0..self.len())
            .map(|i| log_volume(&self.min[(2 * i + 1) * d..(2 * i + 2) * d], &self.max[(2 * i + 1) * d..(2 * i + 2) * d], s))
            .collect();
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn d_box(&self) -> usize {
        self.d_box
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    pub fn raw(&self) -> (&[f64], &[f64]) {
        (&self.min, &self.max)
    }

    /// Checks that the cache was built for exactly these candidates.
    pub fn check_aligned(&self, candidates: &[Position]) -> Result<()> {
        if self.positions.as_slice() != candidates {
            return Err(Error::data(format!(
                "candidate cache ({} rows) does not match the taxonomy's {} candidates",
                self.len(),
                candidates.len()
            )));
        }
        Ok(())
    }

    fn side(&self, i: usize, child: bool) -> (&[f64], &[f64]) {
        let d = self.d_box;
        let off = (2 * i + child as usize) * d;
        (&self.min[off..off + d], &self.max[off..off + d])
    }

    pub fn parent_box(&self, i: usize) -> BoxEmbedding {
        let (lo, hi) = self.side(i, false);
        BoxEmbedding {
            min: lo.to_vec(),
            max: hi.to_vec(),
        }
    }

    pub fn child_box(&self, i: usize) -> Option<BoxEmbedding> {
        self.positions[i].child.map(|_| {
            let (lo, hi) = self.side(i, true);
            BoxEmbedding {
                min: lo.to_vec(),
                max: hi.to_vec(),
            }
        })
    }

    /// Scores every candidate for `query` with the whole candidate list as
    /// the softmax group.
    pub fn score_all(&self, query: &BoxEmbedding) -> Result<Vec<f64>> {
        let d = self.d_box;
        if query.dim() != d {
            return Err(Error::invalid(format!("query box has dim {}, cache has {d}", query.dim())));
        }
        let s = self.smoothing;
        let cq = query.center();
        let log_q = query.log_volume(s);
        let n = self.len();

        let mut inv_p = Vec::with_capacity(n);
        let mut inv_c = Vec::new();
        let mut log_pr = Vec::with_capacity(n);
        let mut mid = vec![0.0; d];
        for i in 0..n {
            let (pmin, pmax) = self.side(i, false);
            let log_int = intersect_log_volume(&query.min, &query.max, pmin, pmax, s);
            for k in 0..d {
                mid[k] = (pmin[k] + pmax[k]) / 2.0;
            }
            inv_p.push(1.0 / distance(&cq, &mid));
            match self.positions[i].child {
                Some(_) => {
                    let (cmin, cmax) = self.side(i, true);
                    let log_qc = intersect_log_volume(&query.min, &query.max, cmin, cmax, s);
                    for k in 0..d {
                        mid[k] = (cmin[k] + cmax[k]) / 2.0;
                    }
                    inv_c.push(1.0 / distance(&cq, &mid));
                    // Pr(p|q) * Pr(q|c)
                    log_pr.push((log_int - log_q).min(0.0) + (log_qc - self.child_log_vol[i]).min(0.0));
                }
                // Pr(q|p)
                None => log_pr.push((log_int - self.parent_log_vol[i]).min(0.0)),
            }
        }
        softmax_in_place(&mut inv_p);
        softmax_in_place(&mut inv_c);
        let mut sc = inv_c.into_iter();
        Ok((0..n)
            .map(|i| {
                let sim_c = if self.positions[i].child.is_some() { sc.next().unwrap() } else { 1.0 };
                log_pr[i].exp() * inv_p[i] * sim_c
            })
            .collect())
    }
}

fn intersect_log_volume(amin: &[f64], amax: &[f64], bmin: &[f64], bmax: &[f64], s: Smoothing) -> f64 {
    let mut acc = 0.0;
    for k in 0..amin.len() {
        acc += s.log_side(amax[k].min(bmax[k]) - amin[k].max(bmin[k]));
    }
    acc
}

/// Rank of `target` in `scores`: one plus the number of strictly greater
/// scores plus the number of equal scores at smaller indices.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count()
}

/// Candidate indices ordered by descending score, ties by index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Writes `query_id, parent_id, child_id|NONE, score, rank` rows for the top
/// `k` candidates of each query.
pub fn write_score_table<W: Write>(
    out: &mut W,
    taxonomy: &Taxonomy,
    positions: &[Position],
    rows: &[(String, Vec<f64>)],
    k: usize,
) -> std::io::Result<()> {
    writeln!(out, "query_id\tparent_id\tchild_id\tscore\trank")?;
    for (query, scores) in rows {
        for (r, &i) in ranking(scores).iter().take(k).enumerate() {
            let pos = positions[i];
            let child = pos.child.map_or("NONE", |c| taxonomy.id(c));
            writeln!(out, "{query}\t{}\t{child}\t{:.9e}\t{}", taxonomy.id(pos.parent), scores[i], r + 1)?;
        }
    }
    Ok(())
}

/// Log side lengths summed over axis 1: `[rows, d] -> [rows, 1]`.
fn log_volume_var(tape: &mut Tape, min: Var, max: Var, s: Smoothing) -> Result<Var> {
    let ext = tape.sub(max, min)?;
    let scaled = tape.scale(ext, 1.0 / s.tau());
    let ls = tape.log_softplus(scaled);
    let sides = tape.add_scalar(ls, s.tau().ln());
    tape.sum_axis(sides, 1)
}

/// `log Pr(x|y)` per row, `[rows, 1]`.
pub fn log_cond_prob_var(tape: &mut Tape, x: BoxVars, y: BoxVars, s: Smoothing) -> Result<Var> {
    let lo = tape.maximum(x.min, y.min)?;
    let hi = tape.minimum(x.max, y.max)?;
    let log_int = log_volume_var(tape, lo, hi, s)?;
    let log_y = log_volume_var(tape, y.min, y.max, s)?;
    tape.sub(log_int, log_y)
}

/// Reciprocal center distance per row, flattened to `[rows]`.
fn inverse_distance_var(tape: &mut Tape, a: BoxVars, b: BoxVars) -> Result<Var> {
    let sa = tape.add(a.min, a.max)?;
    let sb = tape.add(b.min, b.max)?;
    let diff = tape.sub(sa, sb)?;
    let diff = tape.scale(diff, 0.5);
    let sq = tape.mul(diff, diff)?;
    let d2 = tape.sum_axis(sq, 1)?;
    let floor = tape.constant(Tensor::scalar(MIN_DISTANCE * MIN_DISTANCE));
    let rows = tape.value(d2).len();
    let floor = tape.reshape(floor, vec![1, 1])?;
    let d2 = tape.maximum(d2, floor)?;
    let dist = tape.sqrt(d2);
    let one = tape.constant(Tensor::full(&[1, 1], 1.0));
    let inv = tape.div(one, dist)?;
    tape.reshape(inv, vec![rows])
}

/// Per-sample boxes for a training batch: each row pairs a query box with a
/// candidate's parent and child boxes. Child rows of attachment samples are
/// ignored.
#[derive(Debug, Clone, Copy)]
pub struct ScoreBatch {
    pub query: BoxVars,
    pub parent: BoxVars,
    pub child: BoxVars,
}

/// Differentiable scores `[rows]` for a batch. `has_child[i]` selects the
/// insertion scorer for row `i`, and `groups` are the softmax groups.
pub fn score_batch(
    tape: &mut Tape,
    b: ScoreBatch,
    has_child: &[bool],
    groups: Rc<Vec<Range<usize>>>,
    s: Smoothing,
) -> Result<Var> {
    let rows = tape.value(b.query.min).shape()[0];
    if has_child.len() != rows {
        return Err(Error::invalid(format!(
            "score_batch: {} child flags for {rows} rows",
            has_child.len()
        )));
    }
    let inv_p = inverse_distance_var(tape, b.query, b.parent)?;
    let inv_c = inverse_distance_var(tape, b.query, b.child)?;
    let sim_p = tape.group_softmax(inv_p, groups.clone(), None)?;
    let sim_c = tape.group_softmax(inv_c, groups, Some(Rc::new(has_child.to_vec())))?;
    let absent: Vec<f64> = has_child.iter().map(|&h| if h { 0.0 } else { 1.0 }).collect();
    let present: Vec<f64> = has_child.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
    let absent = tape.constant(Tensor::new(vec![rows], absent)?);
    let present = tape.constant(Tensor::new(vec![rows], present)?);
    let sim_c = tape.add(sim_c, absent)?;

    let l_pq = log_cond_prob_var(tape, b.parent, b.query, s)?;
    let l_qc = log_cond_prob_var(tape, b.query, b.child, s)?;
    let l_qp = log_cond_prob_var(tape, b.query, b.parent, s)?;
    let l_ins = tape.add(l_pq, l_qc)?;
    let l_ins = tape.reshape(l_ins, vec![rows])?;
    let l_att = tape.reshape(l_qp, vec![rows])?;
    let l_ins = tape.mul(l_ins, present)?;
    let l_att = tape.mul(l_att, absent)?;
    let log_pr = tape.add(l_ins, l_att)?;
    let pr = tape.exp(log_pr);
    let sim = tape.mul(sim_p, sim_c)?;
    tape.mul(pr, sim)
}

/// One softmax group per `group_len` consecutive rows, or a single group
/// over the whole batch.
pub fn groups_for(rows: usize, group_lens: &[usize], batch_wide: bool) -> Rc<Vec<Range<usize>>> {
    if batch_wide {
        return Rc::new(vec![0..rows]);
    }
    let mut out = Vec::with_capacity(group_lens.len());
    let mut start = 0;
    for &l in group_lens {
        out.push(start..start + l);
        start += l;
    }
    Rc::new(out)
}

/// Reference scoring through the scalar scorers, without the cache.
pub fn score_group(
    q: &BoxEmbedding,
    parents: &[&BoxEmbedding],
    children: &[Option<&BoxEmbedding>],
    s: Smoothing,
) -> Result<Vec<f64>> {
    let sims = center_similarity(q, parents, children)?;
    parents
        .iter()
        .zip(children)
        .zip(sims)
        .map(|((p, c), (sp, sc))| match c {
            Some(c) => insertion_score(q, p, c, sp * sc, s),
            None => attachment_score(q, p, sp, s),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_relative_error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(min: &[f64], max: &[f64]) -> BoxEmbedding {
        BoxEmbedding::new(min.to_vec(), max.to_vec()).unwrap()
    }

    fn tau(t: f64) -> Smoothing {
        Smoothing::new(t).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let q = b(&[0.0], &[0.0]);
        let p = b(&[4.0], &[4.0]);
        assert_eq!(center_similarity(&q, &[&p], &[None]).unwrap(), vec![(1.0, 1.0)]);

        let (l, r) = (b(&[-1.0], &[-1.0]), b(&[1.0], &[1.0]));
        let s = center_similarity(&q, &[&l, &r], &[None, None]).unwrap();
        assert_eq!(s[0].0, 0.5);
        assert_eq!(s[1].0, 0.5);

        // reciprocal distances 1, 2, 4
        let ps = [b(&[1.0], &[1.0]), b(&[0.5], &[0.5]), b(&[0.25], &[0.25])];
        let refs: Vec<&BoxEmbedding> = ps.iter().collect();
        let s = center_similarity(&q, &refs, &[None, None, None]).unwrap();
        let want = [0.042010066134066, 0.114195199384594, 0.843794734481339];
        for (got, w) in s.iter().zip(want) {
            assert!((got.0 - w).abs() < 1e-10, "{} vs {w}", got.0);
        }
    }

    #[test]
    fn zero_distance_is_floored() {
        let q = b(&[1.0, 2.0], &[3.0, 4.0]);
        let s = center_similarity(&q, &[&q.clone(), &b(&[5.0, 5.0], &[6.0, 6.0])], &[None, None]).unwrap();
        assert!(s[0].0 > 0.999999 && s[0].0.is_finite());
    }

    #[test]
    fn nested_insertion_is_one() {
        let p = b(&[-10.0], &[10.0]);
        let q = b(&[-5.0], &[5.0]);
        let c = b(&[-1.0], &[1.0]);
        let s = insertion_score(&q, &p, &c, 1.0, tau(1e-3)).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn far_disjoint_insertion_is_tiny() {
        let q = b(&[0.0], &[1.0]);
        let p = b(&[100.0], &[101.0]);
        let c = b(&[-100.0], &[-99.0]);
        assert!(insertion_score(&q, &p, &c, 1.0, tau(10.0)).unwrap() < 1e-3);
    }

    #[test]
    fn hand_set_insertion_matches_scalar_oracle() {
        let (q, p, c) = (b(&[0.0], &[2.0]), b(&[-1.0], &[3.0]), b(&[0.5], &[1.5]));
        // Pr(p|q) = sp(2)/sp(2) = 1; Pr(q|c) = sp(1)/sp(1) = 1 at tau 1
        let s = insertion_score(&q, &p, &c, 1.0, tau(1.0)).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        // partial overlap: q=[0,2], p=[1,3], c=[1.5,2.5]
        // Pr(p|q) = ln(1+e)/ln(1+e^2), Pr(q|c) = ln(1+e^0.5)/ln(1+e)
        let s = insertion_score(&q, &b(&[1.0], &[3.0]), &b(&[1.5], &[2.5]), 1.0, tau(1.0)).unwrap();
        let want = 0.617445292318 * (0.974076984180 / 1.313261687519);
        assert!((s - want).abs() < 1e-11, "{s} vs {want}");
    }

    #[test]
    fn attachment_examples() {
        let q = b(&[0.0], &[2.0]);
        assert!((attachment_score(&q, &q, 1.0, tau(1.0)).unwrap() - 1.0).abs() < 1e-15);
        let inner = b(&[0.5], &[1.5]);
        assert!((attachment_score(&q, &inner, 1.0, tau(1.0)).unwrap() - 1.0).abs() < 1e-15);
        let s = attachment_score(&b(&[0.0], &[1.0]), &b(&[0.0], &[2.0]), 1.0, tau(1.0)).unwrap();
        assert!((s - 0.617445292318).abs() < 1e-11);
    }

    fn random_box(rng: &mut impl Rng, d: usize) -> BoxEmbedding {
        let min: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let max = min.iter().map(|m| m + rng.random_range(0.1..3.0)).collect();
        BoxEmbedding::new(min, max).unwrap()
    }

    fn toy() -> (Taxonomy, Vec<BoxEmbedding>) {
        let t = Taxonomy::from_parts(
            ["root", "a", "b"].iter().map(|s| (s.to_string(), s.to_string())).collect(),
            vec![("root".into(), "a".into()), ("a".into(), "b".into())],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let boxes = (0..3).map(|_| random_box(&mut rng, 4)).collect();
        (t, boxes)
    }

    #[test]
    fn cache_scores_match_reference_path() {
        let (t, boxes) = toy();
        let cache = CandidateBoxes::from_node_boxes(t.candidates(), &boxes, tau(20.0)).unwrap();
        let q = random_box(&mut ChaCha8Rng::seed_from_u64(4), 4);
        let fast = cache.score_all(&q).unwrap();
        let parents: Vec<&BoxEmbedding> = cache.positions().iter().map(|p| &boxes[p.parent]).collect();
        let children: Vec<Option<&BoxEmbedding>> = cache.positions().iter().map(|p| p.child.map(|c| &boxes[c])).collect();
        let slow = score_group(&q, &parents, &children, tau(20.0)).unwrap();
        assert_eq!(fast.len(), 6);
        for (f, s) in fast.iter().zip(&slow) {
            assert!((f - s).abs() < 1e-12 && (0.0..=1.0).contains(f));
        }
    }

    #[test]
    fn misaligned_cache_is_data_error() {
        let (t, boxes) = toy();
        let cands = t.candidates();
        let cache = CandidateBoxes::from_node_boxes(cands[..5].to_vec(), &boxes, tau(20.0)).unwrap();
        assert!(matches!(cache.check_aligned(&cands), Err(Error::Data(_))));
        assert!(matches!(
            CandidateBoxes::new(cands, 4, vec![0.0; 3], vec![0.0; 3], tau(1.0)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn duplicated_candidates_keep_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_box(&mut rng, 3);
        let ps: Vec<BoxEmbedding> = (0..5).map(|_| random_box(&mut rng, 3)).collect();
        let refs: Vec<&BoxEmbedding> = ps.iter().collect();
        let none = vec![None; 5];
        let once = score_group(&q, &refs, &none, tau(20.0)).unwrap();
        let twice_refs: Vec<&BoxEmbedding> = refs.iter().chain(&refs).copied().collect();
        let twice = score_group(&q, &twice_refs, &[none.clone(), none].concat(), tau(20.0)).unwrap();
        assert_eq!(ranking(&once), ranking(&twice[..5]));
        for i in 0..5 {
            assert!((twice[i] - twice[i + 5]).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_tie_rule() {
        let s = [0.1, 0.5, 0.5, 0.9];
        assert_eq!(rank_of(&s, 3), 1);
        assert_eq!(rank_of(&s, 1), 2);
        assert_eq!(rank_of(&s, 2), 3);
        let flat = [0.2; 6];
        assert_eq!(rank_of(&flat, 0), 1);
        assert_eq!(rank_of(&flat, 5), 6);
        assert_eq!(ranking(&s), vec![3, 1, 2, 0]);
    }

    #[test]
    fn score_table_has_k_rows_per_query() {
        let (t, _) = toy();
        let cands = t.candidates();
        let rows = vec![("q1".to_string(), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), ("q2".to_string(), vec![0.0; 6])];
        let mut out = Vec::new();
        write_score_table(&mut out, &t, &cands, &rows, 1).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("q1\troot\tNONE\t"));
        assert!(lines[2].starts_with("q2\ta\tb\t"));
    }

    fn batch_inputs(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<Tensor> {
        // six corner tensors: query, parent, child as (min, raw width)
        let mut out = Vec::new();
        for _ in 0..3 {
            out.push(Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap());
            out.push(Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.random_range(0.2..3.0)).collect()).unwrap());
        }
        out
    }

    fn to_boxes(tape: &mut Tape, v: &[Var]) -> Result<ScoreBatch> {
        let mk = |tape: &mut Tape, lo: Var, w: Var| -> Result<BoxVars> {
            Ok(BoxVars {
                min: lo,
                max: tape.add(lo, w)?,
            })
        };
        Ok(ScoreBatch {
            query: mk(tape, v[0], v[1])?,
            parent: mk(tape, v[2], v[3])?,
            child: mk(tape, v[4], v[5])?,
        })
    }

    #[test]
    fn tape_scores_match_scalar_with_shared_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (rows, d) = (5, 2);
        let mut inputs = batch_inputs(&mut rng, rows, d);
        for k in 0..2 {
            let first = inputs[k].row_slice(0).to_vec();
            let data: Vec<f64> = (0..rows).flat_map(|_| first.clone()).collect();
            inputs[k] = Tensor::new(vec![rows, d], data).unwrap();
        }
        let has_child = [true, false, true, false, true];
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let bx = to_boxes(&mut tape, &vars).unwrap();
        let sv = score_batch(&mut tape, bx, &has_child, groups_for(rows, &[rows], false), tau(10.0)).unwrap();
        let got = tape.value(sv).data().to_vec();
        let row_box = |lo: &Tensor, w: &Tensor, r: usize| {
            let min = lo.row_slice(r).to_vec();
            let max = min.iter().zip(w.row_slice(r)).map(|(a, b)| a + b).collect();
            BoxEmbedding::new(min, max).unwrap()
        };
        let q = row_box(&inputs[0], &inputs[1], 0);
        let ps: Vec<BoxEmbedding> = (0..rows).map(|r| row_box(&inputs[2], &inputs[3], r)).collect();
        let cs: Vec<BoxEmbedding> = (0..rows).map(|r| row_box(&inputs[4], &inputs[5], r)).collect();
        let refs: Vec<&BoxEmbedding> = ps.iter().collect();
        let crefs: Vec<Option<&BoxEmbedding>> = (0..rows).map(|r| has_child[r].then_some(&cs[r])).collect();
        let want = score_group(&q, &refs, &crefs, tau(10.0)).unwrap();
        for r in 0..rows {
            assert!((got[r] - want[r]).abs() < 1e-12, "{r}: {} vs {}", got[r], want[r]);
        }
    }

    #[test]
    fn scorer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (rows, d, batch_wide) in [(4, 2, false), (6, 3, true), (8, 8, false)] {
            let inputs = batch_inputs(&mut rng, rows, d);
            let has_child: Vec<bool> = (0..rows).map(|r| r % 3 != 1).collect();
            let w: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            let half = rows / 2;
            let err = max_relative_error(
                |tape, v| {
                    let bx = to_boxes(tape, v)?;
                    let g = groups_for(rows, &[half, rows - half], batch_wide);
                    let s = score_batch(tape, bx, &has_child, g, tau(10.0))?;
                    let wv = tape.constant(Tensor::new(vec![rows], w.clone())?);
                    let p = tape.mul(s, wv)?;
                    Ok(tape.sum(p))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "rows {rows} d {d}: {err:e}");
        }
    }

    proptest! {
        #[test]
        fn scores_in_unit_interval(seed in 0u64..10_000, n in 1usize..20, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_box(&mut rng, d);
            let ps: Vec<BoxEmbedding> = (0..n).map(|_| random_box(&mut rng, d)).collect();
            let cs: Vec<BoxEmbedding> = (0..n).map(|_| random_box(&mut rng, d)).collect();
            let refs: Vec<&BoxEmbedding> = ps.iter().collect();
            let crefs: Vec<Option<&BoxEmbedding>> = cs.iter().enumerate().map(|(i, c)| (i % 2 == 0).then_some(c)).collect();
            for s in score_group(&q, &refs, &crefs, tau(10.0)).unwrap() {
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn child_factor_never_raises_score(seed in 0u64..10_000, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, p, c) = (random_box(&mut rng, d), random_box(&mut rng, d), random_box(&mut rng, d));
            let s = tau(10.0);
            let with_child = insertion_score(&q, &p, &c, 1.0, s).unwrap();
            let parent_only = log_cond_prob_raw(&p.min, &p.max, &q.min, &q.max, s).exp();
            prop_assert!(with_child <= parent_only + 1e-15);
        }

        #[test]
        fn argmax_survives_dominated_candidates(seed in 0u64..10_000, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_box(&mut rng, 2);
            let ps: Vec<BoxEmbedding> = (0..n).map(|_| random_box(&mut rng, 2)).collect();
            let refs: Vec<&BoxEmbedding> = ps.iter().collect();
            let before = score_group(&q, &refs, &vec![None; n], tau(10.0)).unwrap();
            // a far-away parent with no containment of q and a larger distance
            let far = BoxEmbedding::new(vec![1e3, 1e3], vec![1e3 + 0.1, 1e3 + 0.1]).unwrap();
            let mut more = refs.clone();
            more.push(&far);
            let after = score_group(&q, &more, &vec![None; n + 1], tau(10.0)).unwrap();
            prop_assert_eq!(ranking(&before)[0], ranking(&after)[0]);
        }
    }
}
