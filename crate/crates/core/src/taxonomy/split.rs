use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use super::{NodeIdx, Position, Taxonomy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Test,
    Valid,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Test => "test",
            Role::Valid => "valid",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(Role::Test),
            "valid" => Ok(Role::Valid),
            other => Err(Error::data(format!("unknown split role `{other}`"))),
        }
    }
}

/// Whether a held-out concept is restored as a leaf or spliced into a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryKind {
    Attachment,
    Insertion,
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryKind::Attachment => "attachment",
            QueryKind::Insertion => "insertion",
        })
    }
}

/// Held-out node ids with their roles.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    entries: Vec<(String, Role)>,
}

/// A held-out concept and its true positions in the seed taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOutQuery {
    pub id: String,
    pub name: String,
    pub role: Role,
    pub kind: QueryKind,
    pub truth: Vec<Position>,
}

/// The seed taxonomy left after removing every held-out node, plus the
/// held-out queries expressed against it.
#[derive(Debug, Clone)]
pub struct SplitView {
    pub seed: Taxonomy,
    pub queries: Vec<HeldOutQuery>,
}

impl SplitView {
    pub fn role(&self, role: Role) -> impl Iterator<Item = &HeldOutQuery> {
        self.queries.iter().filter(move |q| q.role == role)
    }
}

impl Split {
    pub fn from_entries(entries: Vec<(String, Role)>) -> Self {
        Split { entries }
    }

    pub fn entries(&self) -> &[(String, Role)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, role: Role) -> usize {
        self.entries.iter().filter(|(_, r)| *r == role).count()
    }

    /// Draws `n_test + n_valid` distinct non-root nodes uniformly.
    pub fn sample(t: &Taxonomy, n_test: usize, n_valid: usize, rng: &mut impl Rng) -> Result<Self> {
        let pool: Vec<NodeIdx> = (0..t.len()).filter(|&n| !t.is_root(n)).collect();
        let want = n_test + n_valid;
        if want > pool.len() {
            return Err(Error::invalid(format!(
                "requested {want} held-out nodes but only {} non-root nodes exist",
                pool.len()
            )));
        }
        let picked: Vec<NodeIdx> = sample(rng, pool.len(), want).into_iter().map(|i| pool[i]).collect();
        let mut entries: Vec<(NodeIdx, Role)> = picked
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, if i < n_test { Role::Test } else { Role::Valid }))
            .collect();
        entries.sort_unstable();
        Ok(Split {
            entries: entries.into_iter().map(|(n, r)| (t.id(n).to_string(), r)).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let id = cols.next().unwrap_or("").trim();
            let role = cols.next().map(str::trim).unwrap_or("test");
            if id.is_empty() {
                return Err(Error::data(format!("{}:{}: empty node id", path.display(), i + 1)));
            }
            let role = role
                .parse()
                .map_err(|e: Error| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push((id.to_string(), role));
        }
        Ok(Split { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body: String = self.entries.iter().map(|(id, r)| format!("{id}\t{r}\n")).collect();
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    /// Removes every held-out node from `full`, bypassing its edges, and maps
    /// each held-out node to its true positions: nearest retained ancestors
    /// crossed with nearest retained descendants, or attachment slots under
    /// those ancestors when no descendant survives.
    pub fn view(&self, full: &Taxonomy) -> Result<SplitView> {
        let mut removed = BTreeSet::new();
        for (id, _) in &self.entries {
            let n = full
                .node(id)
                .ok_or_else(|| Error::data(format!("split names unknown node `{id}`")))?;
            if full.is_root(n) {
                return Err(Error::data(format!("root node `{id}` cannot be held out")));
            }
            if !removed.insert(n) {
                return Err(Error::data(format!("node `{id}` held out twice")));
            }
        }
        let seed = full.without(&removed)?;
        let keep = |n: NodeIdx| !removed.contains(&n);
        let to_seed = |n: NodeIdx| seed.node(full.id(n)).expect("retained node present in seed");

        let mut queries = Vec::with_capacity(self.entries.len());
        for (id, role) in &self.entries {
            let n = full.node(id).expect("checked above");
            let parents: Vec<NodeIdx> = full.nearest_kept_parents(n, &keep).into_iter().map(to_seed).collect();
            let children: Vec<NodeIdx> = full.nearest_kept_children(n, &keep).into_iter().map(to_seed).collect();
            let (kind, truth) = if children.is_empty() {
                (QueryKind::Attachment, parents.iter().map(|&p| Position::attach(p)).collect())
            } else {
                let mut truth = Vec::with_capacity(parents.len() * children.len());
                for &p in &parents {
                    truth.extend(children.iter().map(|&c| Position::insert(p, c)));
                }
                (QueryKind::Insertion, truth)
            };
            queries.push(HeldOutQuery {
                id: id.clone(),
                name: full.name(n).to_string(),
                role: *role,
                kind,
                truth,
            });
        }
        Ok(SplitView { seed, queries })
    }
}

/// `floor(frac * n)`, validated to lie in `[0, 1]`.
pub fn count_from_frac(frac: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::invalid(format!("fraction {frac} outside [0, 1]")));
    }
    Ok((frac * n as f64).floor() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tax(edges: &[(&str, &str)]) -> Taxonomy {
        let mut ids: Vec<&str> = edges.iter().flat_map(|(p, c)| [*p, *c]).collect();
        ids.sort_unstable();
        ids.dedup();
        Taxonomy::from_parts(
            ids.iter().map(|i| (i.to_string(), i.to_string())).collect(),
            edges.iter().map(|(p, c)| (p.to_string(), c.to_string())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn holding_out_middle_of_chain() {
        let t = tax(&[("root", "a"), ("a", "b")]);
        let view = Split::from_entries(vec![("a".into(), Role::Test)]).view(&t).unwrap();
        let s = &view.seed;
        let (r, b) = (s.node("root").unwrap(), s.node("b").unwrap());
        assert_eq!(s.children(r), &[b]);
        let q = &view.queries[0];
        assert_eq!(q.kind, QueryKind::Insertion);
        assert_eq!(q.truth, vec![Position::insert(r, b)]);
    }

    #[test]
    fn holding_out_leaf_gives_attachment() {
        let t = tax(&[("root", "a"), ("a", "b")]);
        let view = Split::from_entries(vec![("b".into(), Role::Valid)]).view(&t).unwrap();
        let q = &view.queries[0];
        assert_eq!(q.kind, QueryKind::Attachment);
        assert_eq!(q.truth, vec![Position::attach(view.seed.node("a").unwrap())]);
        assert_eq!(view.role(Role::Test).count(), 0);
    }

    #[test]
    fn truth_skips_held_out_neighbours() {
        // r -> a -> b -> c; hold out a and b
        let t = tax(&[("r", "a"), ("a", "b"), ("b", "c")]);
        let split = Split::from_entries(vec![("a".into(), Role::Test), ("b".into(), Role::Test)]);
        let view = split.view(&t).unwrap();
        let s = &view.seed;
        let expect = vec![Position::insert(s.node("r").unwrap(), s.node("c").unwrap())];
        assert_eq!(view.queries[0].truth, expect);
        assert_eq!(view.queries[1].truth, expect);
    }

    #[test]
    fn roots_cannot_be_held_out() {
        let t = tax(&[("root", "a")]);
        let err = Split::from_entries(vec![("root".into(), Role::Test)]).view(&t).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(Split::sample(&t, 2, 0, &mut rng), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sampling_is_seeded_and_excludes_roots() {
        let edges: Vec<(String, String)> = (1..30).map(|i| (((i - 1) / 3).to_string(), i.to_string())).collect();
        let refs: Vec<(&str, &str)> = edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let t = tax(&refs);
        let a = Split::sample(&t, 3, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = Split::sample(&t, 3, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(Role::Test), 3);
        assert_eq!(a.count(Role::Valid), 3);
        assert!(a.entries().iter().all(|(id, _)| id != "0"));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.tsv");
        let s = Split::from_entries(vec![("x".into(), Role::Test), ("y".into(), Role::Valid)]);
        s.write(&path).unwrap();
        assert_eq!(Split::load(&path).unwrap(), s);
    }

    #[test]
    fn fraction_counts() {
        assert_eq!(count_from_frac(0.1, 1486).unwrap(), 148);
        assert!(count_from_frac(1.5, 10).is_err());
    }
}
