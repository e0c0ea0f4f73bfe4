//! Full-ranking top-K evaluation: Recall@K and NDCG@K with binary relevance.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::MfModel;

pub const DEFAULT_KS: [usize; 3] = [10, 20, 30];

/// Anything that can score every item for a user.
pub trait Scorer {
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    /// Writes one score per item into `out` (length `n_items`).
    fn user_scores(&self, user: usize, out: &mut [f64]);
}

impl Scorer for MfModel {
    fn n_users(&self) -> usize {
        self.users.nrows()
    }

    fn n_items(&self) -> usize {
        self.items.nrows()
    }

    fn user_scores(&self, user: usize, out: &mut [f64]) {
        let w = self.users.row(user);
        for (o, v) in out.iter_mut().zip(self.items.outer_iter()) {
            *o = crate::model::dot(w, v);
        }
    }
}

/// Applies a function to every score of an inner scorer.
pub struct MappedScorer<'a, S, F> {
    pub inner: &'a S,
    pub f: F,
}

impl<S: Scorer, F: Fn(f64) -> f64> Scorer for MappedScorer<'_, S, F> {
    fn n_users(&self) -> usize {
        self.inner.n_users()
    }

    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    fn user_scores(&self, user: usize, out: &mut [f64]) {
        self.inner.user_scores(user, out);
        for s in out.iter_mut() {
            *s = (self.f)(*s);
        }
    }
}

fn cmp_desc(scores: &[f64], a: usize, b: usize) -> std::cmp::Ordering {
    // adding +0.0 folds -0.0 into +0.0 so the two tie
    (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)).then(a.cmp(&b))
}

/// Items not in `exclude` (sorted), by score descending with ties broken by
/// ascending id. `limit` truncates to the top entries.
pub fn rank_by_scores(scores: &[f64], exclude: &[usize], limit: Option<usize>) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    match limit {
        Some(k) if k < items.len() => {
            if k == 0 {
                return Vec::new();
            }
            items.select_nth_unstable_by(k - 1, |&a, &b| cmp_desc(scores, a, b));
            items.truncate(k);
            items.sort_by(|&a, &b| cmp_desc(scores, a, b));
        }
        _ => items.sort_by(|&a, &b| cmp_desc(scores, a, b)),
    }
    items
}

/// Full ranking of the items `user` has not trained on.
pub fn rank_items<S: Scorer>(model: &S, user: usize, exclude: &[usize]) -> Result<Vec<usize>> {
    if user >= model.n_users() {
        return Err(Error::OutOfRange {
            kind: "user",
            id: user,
            n: model.n_users(),
        });
    }
    let mut scores = vec![0.0; model.n_items()];
    model.user_scores(user, &mut scores);
    let mut exclude = exclude.to_vec();
    exclude.sort_unstable();
    Ok(rank_by_scores(&scores, &exclude, None))
}

pub fn recall_at_k(ranked: &[usize], test: &[usize], k: usize) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| test.contains(i)).count();
    hits as f64 / test.len() as f64
}

pub fn ndcg_at_k(ranked: &[usize], test: &[usize], k: usize) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| test.contains(i))
        .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(test.len()))
        .map(|p| 1.0 / ((p + 2) as f64).log2())
        .sum();
    dcg / idcg
}

/// True-preference labels supplied from outside the split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalLabels {
    pub users: BTreeMap<usize, Vec<usize>>,
}

impl ExternalLabels {
    /// `user,item` CSV.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["user", "item"])?;
        for (user, items) in &self.users {
            for item in items {
                w.write_record([user.to_string(), item.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut users: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for row in r.deserialize::<(usize, usize)>() {
            let (user, item) = row?;
            users.entry(user).or_default().push(item);
        }
        for items in users.values_mut() {
            items.sort_unstable();
            items.dedup();
        }
        Ok(ExternalLabels { users })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LabelSource<'a> {
    Heldout,
    Valid,
    External(&'a ExternalLabels),
}

impl LabelSource<'_> {
    fn name(&self) -> &'static str {
        match self {
            LabelSource::Heldout => "heldout",
            LabelSource::Valid => "valid",
            LabelSource::External(_) => "external",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<usize, Metrics>,
    pub n_users_evaluated: usize,
    pub label_source: String,
    pub config_digest: String,
    pub wall_seconds: f64,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.metrics.get(&k).map_or(f64::NAN, |m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.metrics.get(&k).map_or(f64::NAN, |m| m.ndcg)
    }

    /// Records a SHA-256 digest of the serialized run configuration.
    pub fn with_digest<C: Serialize>(mut self, config: &C) -> Result<Self> {
        let bytes = serde_json::to_vec(config)?;
        self.config_digest = hex::encode(Sha256::digest(&bytes));
        Ok(self)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn csv_header(&self, tag_columns: &[&str]) -> Vec<String> {
        let mut h: Vec<String> = tag_columns.iter().map(|s| s.to_string()).collect();
        h.extend(["label_source".into(), "n_users".into()]);
        for k in self.metrics.keys() {
            h.push(format!("recall@{k}"));
            h.push(format!("ndcg@{k}"));
        }
        h
    }

    pub fn csv_row(&self, tags: &[String]) -> Vec<String> {
        let mut r: Vec<String> = tags.to_vec();
        r.push(self.label_source.clone());
        r.push(self.n_users_evaluated.to_string());
        for m in self.metrics.values() {
            r.push(m.recall.to_string());
            r.push(m.ndcg.to_string());
        }
        r
    }

    /// Appends one row, writing the header first when the file is new.
    pub fn append_csv(&self, path: &Path, tag_columns: &[&str], tags: &[String]) -> Result<()> {
        let fresh = !path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record(self.csv_header(tag_columns))?;
        }
        w.write_record(self.csv_row(tags))?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Mean per-user Recall@K and NDCG@K. Each user's ranking covers every item
/// outside their train positives; users with no labels are skipped.
pub fn evaluate<S: Scorer>(
    model: &S,
    split: &Split,
    ks: &[usize],
    labels: LabelSource<'_>,
) -> Result<EvalReport> {
    let start = Instant::now();
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("cutoffs must be non-empty and at least 1".into()));
    }
    if model.n_users() != split.n_users() {
        return Err(Error::DimensionMismatch {
            context: "model users vs split users",
            expected: split.n_users(),
            actual: model.n_users(),
        });
    }
    if model.n_items() != split.n_items() {
        return Err(Error::DimensionMismatch {
            context: "model items vs split items",
            expected: split.n_items(),
            actual: model.n_items(),
        });
    }
    let targets: Vec<(usize, &[usize])> = match labels {
        LabelSource::Heldout => split
            .test
            .iter()
            .enumerate()
            .map(|(u, t)| (u, t.as_slice()))
            .collect(),
        LabelSource::Valid => split
            .valid
            .iter()
            .enumerate()
            .map(|(u, t)| (u, t.as_slice()))
            .collect(),
        LabelSource::External(ext) => {
            let missing: Vec<usize> = ext
                .users
                .keys()
                .copied()
                .filter(|&u| u >= split.n_users())
                .collect();
            if !missing.is_empty() {
                return Err(Error::MissingUsers(missing));
            }
            ext.users.iter().map(|(&u, t)| (u, t.as_slice())).collect()
        }
    };
    let max_k = ks.iter().copied().max().expect("non-empty");
    let mut sums: BTreeMap<usize, (f64, f64)> = ks.iter().map(|&k| (k, (0.0, 0.0))).collect();
    let mut scores = vec![0.0; split.n_items()];
    let mut n_eval = 0usize;
    for (user, test) in targets {
        if test.is_empty() {
            continue;
        }
        model.user_scores(user, &mut scores);
        let top = rank_by_scores(&scores, &split.train_positives()[user], Some(max_k));
        for (&k, (r, n)) in sums.iter_mut() {
            *r += recall_at_k(&top, test, k);
            *n += ndcg_at_k(&top, test, k);
        }
        n_eval += 1;
    }
    let denom = n_eval.max(1) as f64;
    let metrics = sums
        .into_iter()
        .map(|(k, (r, n))| {
            (
                k,
                Metrics {
                    recall: r / denom,
                    ndcg: n / denom,
                },
            )
        })
        .collect();
    Ok(EvalReport {
        metrics,
        n_users_evaluated: n_eval,
        label_source: labels.name().to_string(),
        config_digest: String::new(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
