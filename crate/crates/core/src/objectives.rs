//! Classification, box-constraint and ranking losses.
//!
//! Each loss has a scalar form over plain boxes and a tape form over a
//! training batch. The two are kept separate so tests can check one
//! against the other.

use std::rc::Rc;

use crate::autodiff::{Tape, Tensor, Var};
use crate::boxes::{log_cond_prob, BoxEmbedding, Smoothing};
use crate::encoder::BoxVars;
use crate::error::{Error, Result};
use crate::scoring::{log_cond_prob_var, ScoreBatch};

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_rank: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_cls: f64, l_box: f64, l_rank: f64) -> Self {
        LossBreakdown {
            l_cls,
            l_box,
            l_rank,
            total: l_cls + l_box + l_rank,
        }
    }
}

/// Which loss terms enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub classification: bool,
    pub box_constraint: bool,
    pub ranking: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            classification: true,
            box_constraint: true,
            ranking: true,
        }
    }
}

impl LossToggles {
    /// Sum of the enabled components; disabled ones are reported as 0.
    pub fn combine(&self, l_cls: f64, l_box: f64, l_rank: f64) -> LossBreakdown {
        LossBreakdown::new(
            if self.classification { l_cls } else { 0.0 },
            if self.box_constraint { l_box } else { 0.0 },
            if self.ranking { l_rank } else { 0.0 },
        )
    }
}

/// Mean weighted binary cross-entropy; `pos_weight` scales positive terms.
pub fn classification_loss(scores: &[f64], positive: &[bool], pos_weight: f64) -> f64 {
    let n = scores.len().max(1) as f64;
    scores
        .iter()
        .zip(positive)
        .map(|(&s, &y)| {
            let s = s.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y {
                -pos_weight * s.ln()
            } else {
                -(1.0 - s).ln()
            }
        })
        .sum::<f64>()
        / n
}

/// `-log Pr(b|a)`: zero once `b` contains `a`.
pub fn inclusion_loss(a: &BoxEmbedding, b: &BoxEmbedding, s: Smoothing) -> Result<f64> {
    Ok(-log_cond_prob(b, a, s)?)
}

/// `max(0, log(1 - gamma) - log(1 - Pr(a|b)))`: zero once `Pr(a|b) <= gamma`.
pub fn disjoint_loss(a: &BoxEmbedding, b: &BoxEmbedding, gamma: f64, s: Smoothing) -> Result<f64> {
    Ok(disjoint_from_prob(log_cond_prob(a, b, s)?.exp(), gamma))
}

pub fn disjoint_from_prob(pr: f64, gamma: f64) -> f64 {
    let pr = pr.min(1.0 - PROB_EPS);
    ((1.0 - gamma).ln() - (1.0 - pr).ln()).max(0.0)
}

/// Inclusion of `a` in `b` plus a bound on the reverse direction.
pub fn composite_inclusion(a: &BoxEmbedding, b: &BoxEmbedding, gamma: f64, s: Smoothing) -> Result<f64> {
    Ok(inclusion_loss(a, b, s)? + disjoint_loss(a, b, gamma, s)?)
}

/// Symmetric disjointness.
pub fn composite_disjoint(a: &BoxEmbedding, b: &BoxEmbedding, gamma: f64, s: Smoothing) -> Result<f64> {
    Ok(disjoint_loss(a, b, gamma, s)? + disjoint_loss(b, a, gamma, s)?)
}

/// Rejects label vectors no DAG can produce.
pub fn check_labels(labels: [bool; 4], has_child: bool) -> Result<()> {
    let [l1, l2, l3, l4] = labels;
    if l1 && l3 {
        return Err(Error::data("labels claim the parent is both ancestor and descendant of the query"));
    }
    if l2 && l4 {
        return Err(Error::data("labels claim the child is both descendant and ancestor of the query"));
    }
    if !has_child && (l2 || l4) {
        return Err(Error::data("child labels set on an attachment sample"));
    }
    Ok(())
}

/// One sample of the box-constraint loss. Attachment samples (`c = None`)
/// contribute only the parent-side terms.
pub fn box_constraint_sample(
    q: &BoxEmbedding,
    p: &BoxEmbedding,
    c: Option<&BoxEmbedding>,
    labels: [bool; 4],
    gamma_qp: f64,
    gamma_qc: f64,
    s: Smoothing,
) -> Result<f64> {
    check_labels(labels, c.is_some())?;
    let w = |b: bool| b as u8 as f64;
    let [l1, l2, l3, l4] = labels;
    let mut total = w(l1) * composite_inclusion(q, p, gamma_qp, s)?
        + w(l3) * composite_inclusion(p, q, gamma_qp, s)?
        + w(!l1 && !l3) * composite_disjoint(q, p, gamma_qp, s)?;
    if let Some(c) = c {
        total += w(l2) * composite_inclusion(c, q, gamma_qc, s)?
            + w(l4) * composite_inclusion(q, c, gamma_qc, s)?
            + w(!l2 && !l4) * composite_disjoint(c, q, gamma_qc, s)?;
    }
    Ok(total)
}

/// Mean hinge `max(0, gamma + s_neg - s_pos)` over `(s_pos, s_neg, gamma)`.
pub fn ranking_loss(pairs: &[(f64, f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|&(p, n, g)| (g + n - p).max(0.0)).sum::<f64>() / pairs.len() as f64
}

fn column(tape: &mut Tape, values: Vec<f64>) -> Result<Var> {
    let n = values.len();
    Ok(tape.constant(Tensor::new(vec![n, 1], values)?))
}

/// Tape form of the weighted cross-entropy over `scores: [rows]`.
pub fn classification_loss_var(tape: &mut Tape, scores: Var, positive: &[bool], pos_weight: f64) -> Result<Var> {
    let n = tape.value(scores).len();
    if positive.len() != n {
        return Err(Error::invalid(format!("classification_loss: {} labels for {n} scores", positive.len())));
    }
    let s = tape.clamp(scores, PROB_EPS, 1.0 - PROB_EPS);
    let log_s = tape.log(s);
    let neg_s = tape.neg(s);
    let log_1ms = tape.log1p(neg_s);
    let wp = positive.iter().map(|&y| if y { -pos_weight } else { 0.0 }).collect();
    let wn = positive.iter().map(|&y| if y { 0.0 } else { -1.0 }).collect();
    let wp = tape.constant(Tensor::new(vec![n], wp)?);
    let wn = tape.constant(Tensor::new(vec![n], wn)?);
    let a = tape.mul(log_s, wp)?;
    let b = tape.mul(log_1ms, wn)?;
    let per = tape.add(a, b)?;
    Ok(tape.mean(per))
}

/// Tape `l_dis` from `log Pr(a|b)` and per-row `log(1 - gamma)`.
fn disjoint_var(tape: &mut Tape, log_pr: Var, log_1mg: Var) -> Result<Var> {
    let pr = tape.exp(log_pr);
    let pr = tape.clamp(pr, 0.0, 1.0 - PROB_EPS);
    let neg = tape.neg(pr);
    let log_1mp = tape.log1p(neg);
    let gap = tape.sub(log_1mg, log_1mp)?;
    Ok(tape.relu(gap))
}

/// Per-sample inputs of the box-constraint loss.
#[derive(Debug, Clone, Copy)]
pub struct BoxLossInputs<'a> {
    pub labels: &'a [[bool; 4]],
    pub has_child: &'a [bool],
    pub gamma_qp: &'a [f64],
    pub gamma_qc: &'a [f64],
}

/// Tape form of the batch-mean box-constraint loss.
pub fn box_constraint_loss_var(tape: &mut Tape, b: ScoreBatch, inp: BoxLossInputs<'_>, s: Smoothing) -> Result<Var> {
    let rows = tape.value(b.query.min).shape()[0];
    if [inp.labels.len(), inp.has_child.len(), inp.gamma_qp.len(), inp.gamma_qc.len()]
        .iter()
        .any(|&l| l != rows)
    {
        return Err(Error::invalid(format!("box_constraint_loss: per-sample inputs must have {rows} rows")));
    }
    for (l, &h) in inp.labels.iter().zip(inp.has_child) {
        check_labels(*l, h)?;
    }
    let lp = |tape: &mut Tape, x: BoxVars, y: BoxVars| log_cond_prob_var(tape, x, y, s);
    let lp_pq = lp(tape, b.parent, b.query)?;
    let lp_qp = lp(tape, b.query, b.parent)?;
    let lp_qc = lp(tape, b.query, b.child)?;
    let lp_cq = lp(tape, b.child, b.query)?;
    let g_p = column(tape, inp.gamma_qp.iter().map(|g| (1.0 - g).ln()).collect())?;
    let g_c = column(tape, inp.gamma_qc.iter().map(|g| (1.0 - g).ln()).collect())?;

    let dis_qp = disjoint_var(tape, lp_qp, g_p)?; // l_dis(q, p)
    let dis_pq = disjoint_var(tape, lp_pq, g_p)?; // l_dis(p, q)
    let dis_cq = disjoint_var(tape, lp_cq, g_c)?; // l_dis(c, q)
    let dis_qc = disjoint_var(tape, lp_qc, g_c)?; // l_dis(q, c)

    let in_qp = tape.sub(dis_qp, lp_pq)?; // L_in(q, p)
    let in_cq = tape.sub(dis_cq, lp_qc)?; // L_in(c, q)
    let in_pq = tape.sub(dis_pq, lp_qp)?; // L_in(p, q)
    let in_qc = tape.sub(dis_qc, lp_cq)?; // L_in(q, c)
    let dis_p = tape.add(dis_qp, dis_pq)?;
    let dis_c = tape.add(dis_cq, dis_qc)?;

    let f = |b: bool| b as u8 as f64;
    let weights = |sel: &dyn Fn([bool; 4], bool) -> f64| -> Vec<f64> {
        inp.labels.iter().zip(inp.has_child).map(|(&l, &h)| sel(l, h)).collect()
    };
    let terms: [(Var, Vec<f64>); 6] = [
        (in_qp, weights(&|l, _| f(l[0]))),
        (in_cq, weights(&|l, h| f(l[1] && h))),
        (in_pq, weights(&|l, _| f(l[2]))),
        (in_qc, weights(&|l, h| f(l[3] && h))),
        (dis_p, weights(&|l, _| f(!l[0] && !l[2]))),
        (dis_c, weights(&|l, h| f(!l[1] && !l[3] && h))),
    ];
    let mut acc: Option<Var> = None;
    for (term, w) in terms {
        let w = column(tape, w)?;
        let t = tape.mul(term, w)?;
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    Ok(tape.mean(acc.expect("six terms")))
}

/// Tape form of the ranking hinge. `pairs` holds `(positive row, negative
/// row, margin)` indices into `scores: [rows]`.
pub fn ranking_loss_var(tape: &mut Tape, scores: Var, pairs: &[(usize, usize, f64)]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let pos = Rc::new(pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let neg = Rc::new(pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let sp = tape.gather_rows(scores, pos)?;
    let sn = tape.gather_rows(scores, neg)?;
    let g = tape.constant(Tensor::new(vec![pairs.len()], pairs.iter().map(|p| p.2).collect())?);
    let d = tape.sub(sn, sp)?;
    let d = tape.add(d, g)?;
    let h = tape.relu(d);
    Ok(tape.mean(h))
}
