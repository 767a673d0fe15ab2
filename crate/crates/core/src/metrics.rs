//! Ranking metrics over held-out queries.

use std::io::Write;

use crate::error::{Error, Result};
use crate::taxonomy::QueryKind;

/// Ranks of one query's true positions, one per position.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanks {
    pub id: String,
    pub kind: QueryKind,
    pub ranks: Vec<usize>,
}

pub fn reciprocal_rank(rank: usize) -> f64 {
    1.0 / (rank as f64 / 10.0).max(1.0)
}

fn per_query_mean(results: &[QueryRanks], f: impl Fn(usize) -> f64) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let total: f64 = results
        .iter()
        .map(|q| q.ranks.iter().map(|&r| f(r)).sum::<f64>() / q.ranks.len() as f64)
        .sum();
    total / results.len() as f64
}

/// Mean over queries of each query's mean rank.
pub fn mean_rank(results: &[QueryRanks]) -> f64 {
    per_query_mean(results, |r| r as f64)
}

/// Mean over queries of each query's mean `1 / max(1, rank / 10)`.
pub fn mean_reciprocal_rank(results: &[QueryRanks]) -> f64 {
    per_query_mean(results, reciprocal_rank)
}

fn hits(results: &[QueryRanks], k: usize) -> usize {
    results.iter().flat_map(|q| &q.ranks).filter(|&&r| r <= k).count()
}

/// True positions ranked within the top `k`, over all true positions.
pub fn hit_at(results: &[QueryRanks], k: usize) -> f64 {
    let total: usize = results.iter().map(|q| q.ranks.len()).sum();
    if total == 0 {
        return 0.0;
    }
    hits(results, k) as f64 / total as f64
}

/// True positions ranked within the top `k`, over `k` slots per query.
pub fn precision_at(results: &[QueryRanks], k: usize) -> f64 {
    if results.is_empty() || k == 0 {
        return 0.0;
    }
    hits(results, k) as f64 / (k * results.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub queries: usize,
    pub mr: f64,
    pub mrr: f64,
    pub hit1: f64,
    pub hit5: f64,
    pub hit10: f64,
    pub prec1: f64,
    pub prec5: f64,
    pub prec10: f64,
}

impl Metrics {
    pub fn compute(results: &[QueryRanks]) -> Self {
        Metrics {
            queries: results.len(),
            mr: mean_rank(results),
            mrr: mean_reciprocal_rank(results),
            hit1: hit_at(results, 1),
            hit5: hit_at(results, 5),
            hit10: hit_at(results, 10),
            prec1: precision_at(results, 1),
            prec5: precision_at(results, 5),
            prec10: precision_at(results, 10),
        }
    }

    fn rows(&self) -> [(&'static str, f64); 8] {
        [
            ("MR", self.mr),
            ("MRR", self.mrr),
            ("Hit@1", self.hit1),
            ("Hit@5", self.hit5),
            ("Hit@10", self.hit10),
            ("Prec@1", self.prec1),
            ("Prec@5", self.prec5),
            ("Prec@10", self.prec10),
        ]
    }
}

/// Per-kind MRR and Hit@1. A partition with no queries is `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KindMetrics {
    pub queries: usize,
    pub mrr: f64,
    pub hit1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Breakdown {
    pub attachment: Option<KindMetrics>,
    pub insertion: Option<KindMetrics>,
}

pub fn breakdown(results: &[QueryRanks]) -> Breakdown {
    let part = |kind| {
        let sub: Vec<QueryRanks> = results.iter().filter(|q| q.kind == kind).cloned().collect();
        (!sub.is_empty()).then(|| KindMetrics {
            queries: sub.len(),
            mrr: mean_reciprocal_rank(&sub),
            hit1: hit_at(&sub, 1),
        })
    };
    Breakdown {
        attachment: part(QueryKind::Attachment),
        insertion: part(QueryKind::Insertion),
    }
}

/// Writes the `metric\tvalue` table followed by the per-kind breakdown.
/// Empty partitions are written as `empty`.
pub fn write_report<W: Write>(out: &mut W, results: &[QueryRanks], skipped: usize) -> Result<()> {
    let m = Metrics::compute(results);
    let io = |e| Error::io("<report>", e);
    writeln!(out, "metric\tvalue").map_err(io)?;
    writeln!(out, "queries\t{}", m.queries).map_err(io)?;
    writeln!(out, "skipped\t{skipped}").map_err(io)?;
    for (name, v) in m.rows() {
        writeln!(out, "{name}\t{v:.6}").map_err(io)?;
    }
    let b = breakdown(results);
    writeln!(out).map_err(io)?;
    writeln!(out, "kind\tqueries\tMRR\tHit@1").map_err(io)?;
    for (kind, part) in [("attachment", b.attachment), ("insertion", b.insertion)] {
        match part {
            Some(k) => writeln!(out, "{kind}\t{}\t{:.6}\t{:.6}", k.queries, k.mrr, k.hit1),
            None => writeln!(out, "{kind}\t0\tempty\tempty"),
        }
        .map_err(io)?;
    }
    Ok(())
}

pub const RANKS_HEADER: &str = "query_id\tkind\tranks";

/// Writes one `query_id, kind, comma-separated ranks` row per query.
pub fn write_ranks<W: Write>(out: &mut W, results: &[QueryRanks]) -> std::io::Result<()> {
    writeln!(out, "{RANKS_HEADER}")?;
    for q in results {
        let ranks: Vec<String> = q.ranks.iter().map(|r| r.to_string()).collect();
        writeln!(out, "{}\t{}\t{}", q.id, q.kind, ranks.join(","))?;
    }
    Ok(())
}

pub fn parse_ranks(text: &str, origin: &str) -> Result<Vec<QueryRanks>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.trim_end() == RANKS_HEADER) {
            continue;
        }
        let bad = |what: &str| Error::data(format!("{origin}:{}: {what}", i + 1));
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [id, kind, ranks] = cols.as_slice() else {
            return Err(bad("expected `query_id<TAB>kind<TAB>ranks`"));
        };
        let kind = match *kind {
            "attachment" => QueryKind::Attachment,
            "insertion" => QueryKind::Insertion,
            other => return Err(bad(&format!("unknown kind `{other}`"))),
        };
        let ranks = ranks
            .split(',')
            .map(|r| r.trim().parse::<usize>().ok().filter(|&r| r >= 1))
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| bad("ranks must be positive integers"))?;
        out.push(QueryRanks {
            id: id.to_string(),
            kind,
            ranks,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(kind: QueryKind, ranks: &[usize]) -> QueryRanks {
        QueryRanks {
            id: String::new(),
            kind,
            ranks: ranks.to_vec(),
        }
    }

    const A: QueryKind = QueryKind::Attachment;
    const I: QueryKind = QueryKind::Insertion;

    #[test]
    fn mean_rank_is_two_level() {
        assert_eq!(mean_rank(&[q(A, &[2, 4])]), 3.0);
        assert_eq!(mean_rank(&[q(A, &[1]), q(A, &[1, 1])]), 1.0);
        assert_eq!(mean_rank(&[q(A, &[1]), q(A, &[3, 7])]), 3.0);
    }

    #[test]
    fn scaled_reciprocal_rank() {
        assert_eq!(reciprocal_rank(1), 1.0);
        assert_eq!(reciprocal_rank(10), 1.0);
        assert_eq!(reciprocal_rank(20), 0.5);
        assert!((reciprocal_rank(100) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn hit_and_precision() {
        let r = [q(I, &[1, 4, 9])];
        assert_eq!(hit_at(&r, 10), 1.0);
        assert!((precision_at(&r, 10) - 0.3).abs() < 1e-15);
        let far = [q(A, &[50])];
        assert_eq!(hit_at(&far, 10), 0.0);
        assert_eq!(precision_at(&far, 10), 0.0);
        let one = [q(A, &[1])];
        assert_eq!(hit_at(&one, 1), 1.0);
        assert_eq!(precision_at(&one, 1), 1.0);
    }

    #[test]
    fn breakdown_partitions() {
        let leaves = [q(A, &[1]), q(A, &[30])];
        let b = breakdown(&leaves);
        assert!(b.insertion.is_none());
        assert_eq!(b.attachment.unwrap().queries, 2);

        let mixed = [q(A, &[1]), q(I, &[20, 40]), q(A, &[2]), q(I, &[100])];
        let b = breakdown(&mixed);
        let (a, i) = (b.attachment.unwrap(), b.insertion.unwrap());
        assert_eq!(a.queries + i.queries, mixed.len());
        assert_eq!(a.mrr, 1.0);
        assert_eq!(a.hit1, 0.5);
        // (0.5 + 0.25) / 2 then with 0.1, over two queries
        assert!((i.mrr - (0.375 + 0.1) / 2.0).abs() < 1e-15);
        assert_eq!(i.hit1, 0.0);
    }

    #[test]
    fn report_layout() {
        let mut buf = Vec::new();
        write_report(&mut buf, &[q(A, &[1])], 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric\tvalue\nqueries\t1\nskipped\t2\nMR\t1.000000\n"));
        assert!(text.contains("insertion\t0\tempty\tempty"));
    }

    #[test]
    fn ranks_file_round_trip() {
        let r = vec![
            QueryRanks {
                id: "a".into(),
                kind: A,
                ranks: vec![3],
            },
            QueryRanks {
                id: "b".into(),
                kind: I,
                ranks: vec![1, 12],
            },
        ];
        let mut buf = Vec::new();
        write_ranks(&mut buf, &r).unwrap();
        assert_eq!(parse_ranks(&String::from_utf8(buf).unwrap(), "x").unwrap(), r);
        assert!(parse_ranks("a\tleaf\t1\n", "x").is_err());
        assert!(parse_ranks("a\tinsertion\t0\n", "x").is_err());
    }
}
