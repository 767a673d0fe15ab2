//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Relative paths resolve against
//! the directory of the config file. [`Config::dump`] writes every key with
//! absolute paths, so a dumped file re-parses to the same run from anywhere.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::taxonomy::NegativeSampling;
use crate::train::{RankPairs, RunConfig, SoftmaxScope};

pub const CONFIG_FILE: &str = "config.txt";
pub const DUMP_HEADER: &str = "# effective-config";

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub terms: PathBuf,
    pub edges: PathBuf,
    pub split: PathBuf,
    pub embeddings: PathBuf,
    pub run: RunConfig,
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::invalid(format!("config key `{key}`: cannot parse `{v}`: {e}")))
}

fn parse_choice<T: Copy>(key: &str, v: &str, choices: &[(&str, T)]) -> Result<T> {
    choices.iter().find(|(name, _)| *name == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = choices.iter().map(|(n, _)| *n).collect();
        Error::invalid(format!("config key `{key}`: expected one of {}, got `{v}`", names.join("|")))
    })
}

fn choice_name<T: PartialEq>(t: T, choices: &[(&'static str, T)]) -> &'static str {
    choices.iter().find(|(_, c)| *c == t).map(|(n, _)| *n).expect("every variant is listed")
}

const SAMPLING: &[(&str, NegativeSampling)] = &[("uniform", NegativeSampling::Uniform), ("hard", NegativeSampling::Hard)];
const RANK_PAIRS: &[(&str, RankPairs)] = &[("all", RankPairs::All), ("sampled", RankPairs::Sampled)];
const SCOPE: &[(&str, SoftmaxScope)] = &[("query", SoftmaxScope::Query), ("batch", SoftmaxScope::Batch)];

impl Config {
    pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Self> {
        let mut terms = None;
        let mut edges = None;
        let mut split = None;
        let mut embeddings = None;
        let mut r = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            let (k, v) = (key.trim(), value.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::invalid(format!("{origin}:{}: duplicate key `{k}`", i + 1)));
            }
            let path = || base.join(v);
            match k {
                "terms" => terms = Some(path()),
                "edges" => edges = Some(path()),
                "split" => split = Some(path()),
                "embeddings" => embeddings = Some(path()),
                "d_box" => r.d_box = parse_value(k, v)?,
                "n_heads" => r.n_heads = parse_value(k, v)?,
                "dropout" => r.dropout = parse_value(k, v)?,
                "max_children" => r.max_children = parse_value(k, v)?,
                "use_aggregation" => r.use_aggregation = parse_value(k, v)?,
                "epochs" => r.epochs = parse_value(k, v)?,
                "batch_queries" => r.batch_queries = parse_value(k, v)?,
                "neg_per_pos" => r.neg_per_pos = parse_value(k, v)?,
                "lr" => r.lr = parse_value(k, v)?,
                "alpha" => r.alpha = parse_value(k, v)?,
                "tau_train" => r.tau_train = parse_value(k, v)?,
                "tau_predict" => r.tau_predict = parse_value(k, v)?,
                "pos_weight" => r.pos_weight = if v == "auto" { None } else { Some(parse_value(k, v)?) },
                "seed" => r.seed = parse_value(k, v)?,
                "loss_classification" => r.losses.classification = parse_value(k, v)?,
                "loss_box" => r.losses.box_constraint = parse_value(k, v)?,
                "loss_ranking" => r.losses.ranking = parse_value(k, v)?,
                "negative_sampling" => r.sampling = parse_choice(k, v, SAMPLING)?,
                "rank_pairs" => r.rank_pairs = parse_choice(k, v, RANK_PAIRS)?,
                "softmax_scope" => r.softmax_scope = parse_choice(k, v, SCOPE)?,
                "patience" => r.patience = parse_value(k, v)?,
                "lr_factor" => r.lr_factor = parse_value(k, v)?,
                "f32_storage" => r.f32_storage = parse_value(k, v)?,
                _ => return Err(Error::invalid(format!("{origin}:{}: unknown key `{k}`", i + 1))),
            }
        }
        let need = |p: Option<PathBuf>, k: &str| p.ok_or_else(|| Error::invalid(format!("{origin}: missing key `{k}`")));
        let cfg = Config {
            terms: need(terms, "terms")?,
            edges: need(edges, "edges")?,
            split: need(split, "split")?,
            embeddings: need(embeddings, "embeddings")?,
            run: r,
        };
        cfg.run.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, &path.display().to_string())
    }

    /// Every key, paths made absolute.
    pub fn dump(&self) -> Result<String> {
        let abs = |p: &Path| -> Result<String> {
            let p = std::path::absolute(p).map_err(|e| Error::io(p, e))?;
            let s = p.to_str().ok_or_else(|| Error::invalid(format!("non-UTF-8 path {}", p.display())))?;
            Ok(s.to_string())
        };
        let r = &self.run;
        let rows: Vec<(&str, String)> = vec![
            ("terms", abs(&self.terms)?),
            ("edges", abs(&self.edges)?),
            ("split", abs(&self.split)?),
            ("embeddings", abs(&self.embeddings)?),
            ("d_box", r.d_box.to_string()),
            ("n_heads", r.n_heads.to_string()),
            ("dropout", r.dropout.to_string()),
            ("max_children", r.max_children.to_string()),
            ("use_aggregation", r.use_aggregation.to_string()),
            ("epochs", r.epochs.to_string()),
            ("batch_queries", r.batch_queries.to_string()),
            ("neg_per_pos", r.neg_per_pos.to_string()),
            ("lr", r.lr.to_string()),
            ("alpha", r.alpha.to_string()),
            ("tau_train", r.tau_train.to_string()),
            ("tau_predict", r.tau_predict.to_string()),
            ("pos_weight", r.pos_weight.map_or("auto".to_string(), |w| w.to_string())),
            ("seed", r.seed.to_string()),
            ("loss_classification", r.losses.classification.to_string()),
            ("loss_box", r.losses.box_constraint.to_string()),
            ("loss_ranking", r.losses.ranking.to_string()),
            ("negative_sampling", choice_name(r.sampling, SAMPLING).to_string()),
            ("rank_pairs", choice_name(r.rank_pairs, RANK_PAIRS).to_string()),
            ("softmax_scope", choice_name(r.softmax_scope, SCOPE).to_string()),
            ("patience", r.patience.to_string()),
            ("lr_factor", r.lr_factor.to_string()),
            ("f32_storage", r.f32_storage.to_string()),
        ];
        let mut out = format!("{DUMP_HEADER}\n");
        for (k, v) in rows {
            out.push_str(&format!("{k} = {v}\n"));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.dump()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "terms = data/terms.tsv\nedges = data/edges.tsv\nsplit = split.tsv\nembeddings = /abs/emb.txt\n";

    #[test]
    fn relative_paths_resolve_against_base() {
        let c = Config::parse(MINIMAL, Path::new("/runs/a"), "c").unwrap();
        assert_eq!(c.terms, PathBuf::from("/runs/a/data/terms.tsv"));
        assert_eq!(c.embeddings, PathBuf::from("/abs/emb.txt"));
        assert_eq!(c.run, RunConfig::default());
    }

    #[test]
    fn dump_round_trips() {
        let text = format!(
            "{MINIMAL}# sweep\nd_box = 8\nlr = 3e-4\npos_weight = 12.5\nseed = 7\nloss_box = false\n\
             negative_sampling = hard\nsoftmax_scope = batch\nrank_pairs = sampled\nf32_storage = true\n"
        );
        let c = Config::parse(&text, Path::new("/runs/a"), "c").unwrap();
        assert_eq!(c.run.d_box, 8);
        assert_eq!(c.run.pos_weight, Some(12.5));
        assert!(!c.run.losses.box_constraint);
        let dumped = c.dump().unwrap();
        assert!(dumped.starts_with(DUMP_HEADER));
        let again = Config::parse(&dumped, Path::new("/elsewhere"), "d").unwrap();
        assert_eq!(again, c);
        assert_eq!(again.dump().unwrap(), dumped);
    }

    #[test]
    fn rejects_bad_input() {
        let base = Path::new("/");
        let with = |extra: &str| Config::parse(&format!("{MINIMAL}{extra}\n"), base, "c");
        for bad in ["bogus = 1", "d_box = eight", "softmax_scope = global", "d_box = 1\nd_box = 2", "just words", "alpha = 1.5"] {
            let err = with(bad).unwrap_err();
            assert!(matches!(err, Error::InvalidArgument(_)), "{bad}: {err}");
        }
        assert!(Config::parse("terms = t\n", base, "c").unwrap_err().to_string().contains("edges"));
    }
}
