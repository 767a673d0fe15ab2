//! Seeded synthetic taxonomies whose embeddings encode the hierarchy.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::taxonomy::{NodeIdx, Role, Split, Taxonomy};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub min_branching: usize,
    pub max_branching: usize,
    pub noise: f64,
    pub test_leaves: usize,
    pub test_internal: usize,
    pub valid: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            nodes: 200,
            min_branching: 2,
            max_branching: 5,
            noise: 0.05,
            test_leaves: 20,
            test_internal: 10,
            valid: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub taxonomy: Taxonomy,
    pub embeddings: EmbeddingTable,
    pub split: Split,
}

/// Breadth-first random tree: each expanded node gets a uniform number of
/// children in `[min_branching, max_branching]` until `nodes` exist.
/// Node `i` embeds as the indicator of its root path plus Gaussian noise.
/// Test holds out leaves and non-root internal nodes; validation draws from
/// the remaining non-root nodes.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticTask> {
    if spec.nodes < 2 || spec.min_branching == 0 || spec.min_branching > spec.max_branching {
        return Err(Error::invalid("synthetic tree needs nodes >= 2 and 1 <= min_branching <= max_branching"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parent: Vec<Option<usize>> = vec![None];
    let mut next = 0;
    while parent.len() < spec.nodes {
        let k = rng.random_range(spec.min_branching..=spec.max_branching);
        for _ in 0..k.min(spec.nodes - parent.len()) {
            parent.push(Some(next));
        }
        next += 1;
    }
    let ids: Vec<String> = (0..spec.nodes).map(|i| i.to_string()).collect();
    let terms = ids.iter().map(|i| (i.clone(), format!("concept_{i}"))).collect();
    let edges = parent
        .iter()
        .enumerate()
        .filter_map(|(c, p)| p.map(|p| (ids[p].clone(), ids[c].clone())))
        .collect();
    let taxonomy = Taxonomy::from_parts(terms, edges)?;

    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut embeddings = EmbeddingTable::new(spec.nodes);
    for i in 0..spec.nodes {
        let mut v: Vec<f64> = (0..spec.nodes).map(|_| normal.sample(&mut rng)).collect();
        let mut cur = Some(i);
        while let Some(c) = cur {
            v[c] += 1.0;
            cur = parent[c];
        }
        embeddings.insert(&format!("concept_{i}"), v)?;
    }

    let node = |i: usize| -> NodeIdx { taxonomy.node(&ids[i]).expect("generated id") };
    let leaves: Vec<usize> = (1..spec.nodes).filter(|&i| taxonomy.is_leaf(node(i))).collect();
    let internal: Vec<usize> = (1..spec.nodes).filter(|&i| !taxonomy.is_leaf(node(i))).collect();
    if spec.test_leaves > leaves.len() || spec.test_internal > internal.len() {
        return Err(Error::invalid(format!(
            "tree has {} leaves and {} internal non-root nodes; cannot hold out {} and {}",
            leaves.len(),
            internal.len(),
            spec.test_leaves,
            spec.test_internal
        )));
    }
    let mut picked: Vec<(usize, Role)> = Vec::new();
    picked.extend(sample(&mut rng, leaves.len(), spec.test_leaves).into_iter().map(|i| (leaves[i], Role::Test)));
    picked.extend(sample(&mut rng, internal.len(), spec.test_internal).into_iter().map(|i| (internal[i], Role::Test)));
    let rest: Vec<usize> = (1..spec.nodes).filter(|i| !picked.iter().any(|(p, _)| p == i)).collect();
    if spec.valid > rest.len() {
        return Err(Error::invalid("not enough nodes left for validation"));
    }
    picked.extend(sample(&mut rng, rest.len(), spec.valid).into_iter().map(|i| (rest[i], Role::Valid)));
    picked.sort_unstable();
    let split = Split::from_entries(picked.into_iter().map(|(i, r)| (ids[i].clone(), r)).collect());
    Ok(SyntheticTask {
        taxonomy,
        embeddings,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_task_shape() {
        let task = generate(&SyntheticSpec::default()).unwrap();
        let t = &task.taxonomy;
        assert_eq!(t.len(), 200);
        assert_eq!(t.edge_count(), 199);
        assert_eq!(t.roots().len(), 1);
        for n in 0..t.len() {
            let k = t.children(n).len();
            assert!(k == 0 || k <= 5);
        }
        assert_eq!(task.split.count(Role::Test), 30);
        assert_eq!(task.split.count(Role::Valid), 10);
        let view = task.split.view(t).unwrap();
        let leaves = view.role(Role::Test).filter(|q| q.kind == crate::taxonomy::QueryKind::Attachment).count();
        assert!(leaves >= 20);
        assert_eq!(task.embeddings.features_for(t).unwrap().shape(), &[200, 200]);
    }

    #[test]
    fn embeddings_follow_paths() {
        let task = generate(&SyntheticSpec {
            noise: 1e-9,
            ..Default::default()
        })
        .unwrap();
        let t = &task.taxonomy;
        let n = t.node("57").unwrap();
        let v = task.embeddings.get("concept_57").unwrap();
        let on: Vec<usize> = (0..200).filter(|&i| v[i] > 0.5).collect();
        let mut want: Vec<usize> = t.ancestors(n).iter().map(|&a| t.id(a).parse().unwrap()).collect();
        want.push(57);
        want.sort_unstable();
        assert_eq!(on, want);
    }

    #[test]
    fn seeded() {
        let a = generate(&SyntheticSpec::default()).unwrap();
        let b = generate(&SyntheticSpec::default()).unwrap();
        assert_eq!(a.split, b.split);
        assert_eq!(a.embeddings, b.embeddings);
        let c = generate(&SyntheticSpec {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.split, c.split);
    }
}
