//! Word-vector text files: a `count dim` header, then `term v1 .. v_dim`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::taxonomy::{Role, SplitView, Taxonomy};
use crate::train::EvalQuery;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    terms: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

/// Lookup key of a term: spaces become underscores.
pub fn term_key(term: &str) -> String {
    term.trim().replace(' ', "_")
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            terms: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    /// Adds or replaces a vector.
    pub fn insert(&mut self, term: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::data(format!("vector for `{term}` has {} values, expected {}", v.len(), self.dim)));
        }
        let key = term_key(term);
        match self.index.get(&key) {
            Some(&i) => self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(&v),
            None => {
                self.index.insert(key.clone(), self.terms.len());
                self.terms.push(key);
                self.data.extend(v);
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::data(format!("{origin}: empty embedding file")))?;
        let nums: Vec<&str> = header.split_whitespace().collect();
        let parse_usize = |s: &str| s.parse::<usize>().ok();
        let (count, dim) = match nums.as_slice() {
            [c, d] => match (parse_usize(c), parse_usize(d)) {
                (Some(c), Some(d)) if d > 0 => (c, d),
                _ => return Err(Error::data(format!("{origin}:1: header must be `count dim`, got `{header}`"))),
            },
            _ => return Err(Error::data(format!("{origin}:1: header must be `count dim`, got `{header}`"))),
        };
        let mut table = EmbeddingTable::new(dim);
        for (i, line) in lines {
            let line_no = i + 1;
            let mut cols = line.split_whitespace();
            let term = cols.next().expect("non-empty line");
            let values: Vec<&str> = cols.collect();
            if values.len() != dim {
                return Err(Error::data(format!(
                    "{origin}:{line_no}: `{term}` has {} values, header says {dim}",
                    values.len()
                )));
            }
            let v = values
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::data(format!("{origin}:{line_no}: bad value `{s}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            table.insert(term, v)?;
        }
        if table.len() != count {
            log::warn!("{origin}: header declares {count} vectors, found {}", table.len());
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = format!("{} {}\n", self.len(), self.dim);
        for (i, t) in self.terms.iter().enumerate() {
            out.push_str(t);
            for x in &self.data[i * self.dim..(i + 1) * self.dim] {
                out.push(' ');
                out.push_str(&format!("{x}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn get(&self, term: &str) -> Option<&[f64]> {
        self.index
            .get(&term_key(term))
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Vector for a taxonomy term: by name, then by id.
    pub fn lookup(&self, id: &str, name: &str) -> Option<&[f64]> {
        self.get(name).or_else(|| self.get(id))
    }

    /// `[t.len(), dim]` feature rows in node order. Fails listing every
    /// unresolved term.
    pub fn features_for(&self, t: &Taxonomy) -> Result<Tensor> {
        let mut data = Vec::with_capacity(t.len() * self.dim);
        let mut missing = Vec::new();
        for n in 0..t.len() {
            match self.lookup(t.id(n), t.name(n)) {
                Some(v) => data.extend_from_slice(v),
                None => missing.push(format!("{} ({})", t.id(n), t.name(n))),
            }
        }
        if !missing.is_empty() {
            return Err(missing_error(&missing));
        }
        Tensor::new(vec![t.len(), self.dim], data)
    }

    /// Held-out queries of `role` with their vectors.
    pub fn queries(&self, view: &SplitView, role: Role) -> Result<Vec<EvalQuery>> {
        let mut out = Vec::new();
        let mut missing = Vec::new();
        for q in view.role(role) {
            match self.lookup(&q.id, &q.name) {
                Some(v) => out.push(EvalQuery {
                    query: q.clone(),
                    embedding: v.to_vec(),
                }),
                None => missing.push(format!("{} ({})", q.id, q.name)),
            }
        }
        if !missing.is_empty() {
            return Err(missing_error(&missing));
        }
        Ok(out)
    }
}

fn missing_error(missing: &[String]) -> Error {
    const SHOWN: usize = 20;
    let mut msg = format!("{} terms have no embedding: {}", missing.len(), missing[..missing.len().min(SHOWN)].join(", "));
    if missing.len() > SHOWN {
        msg.push_str(", ...");
    }
    Error::data(msg)
}
