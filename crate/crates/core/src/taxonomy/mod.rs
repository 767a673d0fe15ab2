//! Immutable taxonomy DAG.
//!
//! Nodes are interned to dense indices in node-id order (numeric ids compare
//! numerically, everything else lexicographically), so "sorted by id" and
//! "sorted by index" coincide. Roots have depth 1 and every other node sits
//! one below its deepest parent.

mod dataset;
mod split;

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

pub use dataset::{form_dataset, labels_for, NegativeSampling, QueryGroup, TrainingSample};
pub use split::{count_from_frac, HeldOutQuery, QueryKind, Role, Split, SplitView};

pub type NodeIdx = usize;

/// A candidate insertion (`child: Some`) or attachment (`child: None`) slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Position {
    pub parent: NodeIdx,
    pub child: Option<NodeIdx>,
}

impl Position {
    pub fn attach(parent: NodeIdx) -> Self {
        Position {
            parent,
            child: None,
        }
    }

    pub fn insert(parent: NodeIdx, child: NodeIdx) -> Self {
        Position {
            parent,
            child: Some(child),
        }
    }

    pub fn is_attachment(&self) -> bool {
        self.child.is_none()
    }

    pub fn involves(&self, n: NodeIdx) -> bool {
        self.parent == n || self.child == Some(n)
    }
}

/// A node, a sample of its children and whether it attends to itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EgoSubtree {
    pub root: NodeIdx,
    pub children: Vec<NodeIdx>,
    pub has_self_loop: bool,
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    ids: Vec<String>,
    names: Vec<String>,
    index: HashMap<String, NodeIdx>,
    parents: Vec<Vec<NodeIdx>>,
    children: Vec<Vec<NodeIdx>>,
    depth: Vec<u32>,
    roots: Vec<NodeIdx>,
    ancestors: Vec<Vec<NodeIdx>>,
    descendants: Vec<Vec<NodeIdx>>,
}

fn id_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

fn merge_sorted(a: &[NodeIdx], b: &[NodeIdx]) -> Vec<NodeIdx> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

pub(crate) fn read_tsv(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split('\t').map(|s| s.trim().to_string()).collect()))
        .collect())
}

impl Taxonomy {
    /// Builds a taxonomy from `(id, name)` terms and `(parent_id, child_id)`
    /// edges, validating endpoints and acyclicity.
    pub fn from_parts(terms: Vec<(String, String)>, edges: Vec<(String, String)>) -> Result<Self> {
        let mut terms = terms;
        terms.sort_by(|a, b| id_order(&a.0, &b.0));
        if let Some(w) = terms.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::data(format!("duplicate node id `{}`", w[0].0)));
        }
        let index: HashMap<String, NodeIdx> =
            terms.iter().enumerate().map(|(i, (id, _))| (id.clone(), i)).collect();
        let n = terms.len();

        let mut edge_set = BTreeSet::new();
        for (p, c) in &edges {
            let pi = *index
                .get(p)
                .ok_or_else(|| Error::data(format!("edge ({p}, {c}): unknown parent `{p}`")))?;
            let ci = *index
                .get(c)
                .ok_or_else(|| Error::data(format!("edge ({p}, {c}): unknown child `{c}`")))?;
            if pi == ci {
                return Err(Error::data(format!("self-edge on node `{p}`")));
            }
            edge_set.insert((pi, ci));
        }
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for &(p, c) in &edge_set {
            parents[c].push(p);
            children[p].push(c);
        }

        // Kahn's algorithm; leftover nodes lie on or downstream of a cycle.
        let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<NodeIdx> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(u) = queue.pop_front() {
            topo.push(u);
            for &c in &children[u] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if topo.len() < n {
            let (p, c) = find_cycle_edge(&parents, &indeg);
            return Err(Error::data(format!(
                "cycle detected through edge ({}, {})",
                terms[p].0, terms[c].0
            )));
        }

        let mut depth = vec![1u32; n];
        let mut ancestors: Vec<Vec<NodeIdx>> = vec![Vec::new(); n];
        for &u in &topo {
            for &p in &parents[u] {
                depth[u] = depth[u].max(depth[p] + 1);
                let with_p = merge_sorted(&ancestors[p], &[p]);
                ancestors[u] = merge_sorted(&ancestors[u], &with_p);
            }
        }
        let mut descendants: Vec<Vec<NodeIdx>> = vec![Vec::new(); n];
        for &u in topo.iter().rev() {
            for &c in &children[u] {
                let with_c = merge_sorted(&descendants[c], &[c]);
                descendants[u] = merge_sorted(&descendants[u], &with_c);
            }
        }
        let roots = (0..n).filter(|&i| parents[i].is_empty()).collect();
        let (ids, names) = terms.into_iter().unzip();
        Ok(Taxonomy {
            ids,
            names,
            index,
            parents,
            children,
            depth,
            roots,
            ancestors,
            descendants,
        })
    }

    /// Reads `id<TAB>name` terms and `parent<TAB>child` edges.
    pub fn load(terms_path: &Path, edges_path: &Path) -> Result<Self> {
        let mut terms = Vec::new();
        for (line, cols) in read_tsv(terms_path)? {
            match cols.as_slice() {
                [id, name, ..] => terms.push((id.clone(), name.clone())),
                [id] => terms.push((id.clone(), id.clone())),
                _ => {
                    return Err(Error::data(format!(
                        "{}:{line}: expected `id<TAB>name`",
                        terms_path.display()
                    )))
                }
            }
        }
        let mut edges = Vec::new();
        for (line, cols) in read_tsv(edges_path)? {
            match cols.as_slice() {
                [p, c, ..] => edges.push((p.clone(), c.clone())),
                _ => {
                    return Err(Error::data(format!(
                        "{}:{line}: expected `parent<TAB>child`",
                        edges_path.display()
                    )))
                }
            }
        }
        Self::from_parts(terms, edges)
    }

    pub fn write_terms(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (id, name) in self.ids.iter().zip(&self.names) {
            s.push_str(&format!("{id}\t{name}\n"));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn write_edges(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (p, cs) in self.children.iter().enumerate() {
            for &c in cs {
                s.push_str(&format!("{}\t{}\n", self.ids[p], self.ids[c]));
            }
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    pub fn node(&self, id: &str) -> Option<NodeIdx> {
        self.index.get(id).copied()
    }

    pub fn id(&self, n: NodeIdx) -> &str {
        &self.ids[n]
    }

    pub fn name(&self, n: NodeIdx) -> &str {
        &self.names[n]
    }

    pub fn parents(&self, n: NodeIdx) -> &[NodeIdx] {
        &self.parents[n]
    }

    pub fn children(&self, n: NodeIdx) -> &[NodeIdx] {
        &self.children[n]
    }

    pub fn depth(&self, n: NodeIdx) -> u32 {
        self.depth[n]
    }

    pub fn roots(&self) -> &[NodeIdx] {
        &self.roots
    }

    pub fn is_root(&self, n: NodeIdx) -> bool {
        self.parents[n].is_empty()
    }

    pub fn is_leaf(&self, n: NodeIdx) -> bool {
        self.children[n].is_empty()
    }

    /// Strict ancestors, sorted.
    pub fn ancestors(&self, n: NodeIdx) -> &[NodeIdx] {
        &self.ancestors[n]
    }

    /// Strict descendants, sorted.
    pub fn descendants(&self, n: NodeIdx) -> &[NodeIdx] {
        &self.descendants[n]
    }

    /// Whether `a` is a strict ancestor of `b`.
    pub fn is_ancestor(&self, a: NodeIdx, b: NodeIdx) -> bool {
        self.ancestors[b].binary_search(&a).is_ok()
    }

    /// Every `<p, c>` with `c` a strict descendant of `p`, plus `<p, none>`
    /// for every node, ordered by parent then child with the attachment slot
    /// last per parent.
    pub fn candidates(&self) -> Vec<Position> {
        let mut out = Vec::with_capacity(self.candidate_count());
        for p in 0..self.len() {
            out.extend(self.descendants[p].iter().map(|&c| Position::insert(p, c)));
            out.push(Position::attach(p));
        }
        out
    }

    pub fn candidate_count(&self) -> usize {
        self.descendants.iter().map(Vec::len).sum::<usize>() + self.len()
    }

    /// Depth of the deepest common ancestor-or-self of `a` and `b`, or 0 when
    /// they share none (disjoint components of a forest).
    pub fn lca_depth(&self, a: NodeIdx, b: NodeIdx) -> u32 {
        let up_a = merge_sorted(&self.ancestors[a], &[a]);
        let up_b = merge_sorted(&self.ancestors[b], &[b]);
        let (mut i, mut j) = (0, 0);
        let mut best = 0;
        while i < up_a.len() && j < up_b.len() {
            match up_a[i].cmp(&up_b[j]) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => {
                    best = best.max(self.depth[up_a[i]]);
                    i += 1;
                    j += 1;
                }
            }
        }
        best
    }

    /// Wu & Palmer similarity scaled by `alpha`:
    /// `alpha * 2 * depth(lca) / (depth(a) + depth(b))`.
    pub fn dynamic_margin(&self, a: NodeIdx, b: NodeIdx, alpha: f64) -> f64 {
        let lca = self.lca_depth(a, b) as f64;
        alpha * 2.0 * lca / (self.depth[a] + self.depth[b]) as f64
    }

    /// Samples up to `max_children` children of `n` that are not excluded.
    /// A self-loop is added whenever fewer than `max_children` survive.
    pub fn ego_subtree(
        &self,
        n: NodeIdx,
        max_children: usize,
        exclude: &[NodeIdx],
        rng: &mut impl Rng,
    ) -> EgoSubtree {
        let pool: Vec<NodeIdx> = self.children[n]
            .iter()
            .copied()
            .filter(|c| !exclude.contains(c))
            .collect();
        let (children, has_self_loop) = if pool.len() < max_children {
            (pool, true)
        } else {
            let mut picked: Vec<NodeIdx> = sample(rng, pool.len(), max_children)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            picked.sort_unstable();
            (picked, false)
        };
        EgoSubtree {
            root: n,
            children,
            has_self_loop,
        }
    }

    /// Seed taxonomy with `removed` nodes dropped and each removed node's
    /// parents reconnected to its (retained) children.
    pub fn without(&self, removed: &BTreeSet<NodeIdx>) -> Result<Taxonomy> {
        let keep = |n: NodeIdx| !removed.contains(&n);
        let terms = (0..self.len())
            .filter(|&n| keep(n))
            .map(|n| (self.ids[n].clone(), self.names[n].clone()))
            .collect();
        let mut edges = Vec::new();
        for p in (0..self.len()).filter(|&n| keep(n)) {
            for c in self.nearest_kept(p, &keep, |t, x| &t.children[x]) {
                edges.push((self.ids[p].clone(), self.ids[c].clone()));
            }
        }
        Taxonomy::from_parts(terms, edges)
    }

    /// Closest retained nodes reachable from `n` along `step`, passing
    /// through removed ones.
    fn nearest_kept<'a>(
        &'a self,
        n: NodeIdx,
        keep: &dyn Fn(NodeIdx) -> bool,
        step: impl Fn(&'a Taxonomy, NodeIdx) -> &'a [NodeIdx],
    ) -> BTreeSet<NodeIdx> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<NodeIdx> = step(self, n).to_vec();
        let mut seen = BTreeSet::new();
        while let Some(x) = stack.pop() {
            if !seen.insert(x) {
                continue;
            }
            if keep(x) {
                out.insert(x);
            } else {
                stack.extend_from_slice(step(self, x));
            }
        }
        out
    }

    pub(crate) fn nearest_kept_parents(
        &self,
        n: NodeIdx,
        keep: &dyn Fn(NodeIdx) -> bool,
    ) -> BTreeSet<NodeIdx> {
        self.nearest_kept(n, keep, |t, x| &t.parents[x])
    }

    pub(crate) fn nearest_kept_children(
        &self,
        n: NodeIdx,
        keep: &dyn Fn(NodeIdx) -> bool,
    ) -> BTreeSet<NodeIdx> {
        self.nearest_kept(n, keep, |t, x| &t.children[x])
    }
}

fn find_cycle_edge(parents: &[Vec<NodeIdx>], indeg: &[usize]) -> (NodeIdx, NodeIdx) {
    // Every leftover node keeps a leftover parent, so walking those upwards
    // must revisit a node, which closes a cycle.
    let leftover = |i: NodeIdx| indeg[i] > 0;
    let mut u = (0..indeg.len()).find(|&i| leftover(i)).unwrap();
    let mut seen = vec![false; indeg.len()];
    loop {
        seen[u] = true;
        let p = parents[u].iter().copied().find(|&p| leftover(p)).unwrap();
        if seen[p] {
            return (p, u);
        }
        u = p;
    }
}
