//! Interaction logs: loading, binarization, leave-one-out splitting and
//! negative sampling.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timestamp value used when the input carries no timestamp column.
pub const NO_TIMESTAMP: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackKind {
    Explicit,
    Implicit,
}

impl FromStr for FeedbackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(FeedbackKind::Explicit),
            "implicit" => Ok(FeedbackKind::Implicit),
            other => Err(Error::Config(format!(
                "unknown feedback kind {other:?} (expected explicit|implicit)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub value: f64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n_users: usize,
    pub n_items: usize,
    pub interactions: Vec<Interaction>,
    pub feedback_kind: FeedbackKind,
}

impl Dataset {
    /// Builds a dataset, checking id ranges and value finiteness.
    pub fn new(
        n_users: usize,
        n_items: usize,
        interactions: Vec<Interaction>,
        feedback_kind: FeedbackKind,
    ) -> Result<Self> {
        for it in &interactions {
            if it.user >= n_users {
                return Err(Error::OutOfRange {
                    kind: "user",
                    id: it.user,
                    n: n_users,
                });
            }
            if it.item >= n_items {
                return Err(Error::OutOfRange {
                    kind: "item",
                    id: it.item,
                    n: n_items,
                });
            }
            if !it.value.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "non-finite value for ({}, {})",
                    it.user, it.item
                )));
            }
        }
        Ok(Dataset {
            n_users,
            n_items,
            interactions,
            feedback_kind,
        })
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Whether an interaction counts as a positive. Every observed rating is
    /// a positive for explicit data; implicit data needs label 1.
    pub fn is_positive(&self, it: &Interaction) -> bool {
        match self.feedback_kind {
            FeedbackKind::Explicit => true,
            FeedbackKind::Implicit => it.value > 0.5,
        }
    }

    /// Sorted positive items per user.
    pub fn positives_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users];
        for it in &self.interactions {
            if self.is_positive(it) {
                out[it.user].push(it.item);
            }
        }
        for items in &mut out {
            items.sort_unstable();
            items.dedup();
        }
        out
    }

    /// Number of positives per item (before smoothing).
    pub fn item_popularity(&self) -> Vec<usize> {
        let mut pop = vec![0usize; self.n_items];
        for it in &self.interactions {
            if self.is_positive(it) {
                pop[it.item] += 1;
            }
        }
        pop
    }

    pub fn positive_count(&self) -> usize {
        self.interactions
            .iter()
            .filter(|it| self.is_positive(it))
            .count()
    }

    /// Collapses duplicate (user, item) pairs, keeping the record with the
    /// largest timestamp (the later record on ties). Output is sorted by
    /// (user, item).
    pub fn deduplicate(mut self) -> Self {
        let mut keep: HashMap<(usize, usize), Interaction> =
            HashMap::with_capacity(self.interactions.len());
        for it in self.interactions.drain(..) {
            keep.entry((it.user, it.item))
                .and_modify(|prev| {
                    if it.timestamp >= prev.timestamp {
                        *prev = it;
                    }
                })
                .or_insert(it);
        }
        let mut interactions: Vec<Interaction> = keep.into_values().collect();
        interactions.sort_by_key(|it| (it.user, it.item));
        self.interactions = interactions;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Tsv,
}

impl Format {
    fn delimiter(self) -> u8 {
        match self {
            Format::Csv => b',',
            Format::Tsv => b'\t',
        }
    }

    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("tab") => Format::Tsv,
            _ => Format::Csv,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "tsv" => Ok(Format::Tsv),
            other => Err(Error::Config(format!(
                "unknown format {other:?} (expected csv|tsv)"
            ))),
        }
    }
}

/// Header names of the columns to read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub user: String,
    pub item: String,
    pub value: String,
    pub timestamp: String,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            user: "user".into(),
            item: "item".into(),
            value: "value".into(),
            timestamp: "timestamp".into(),
        }
    }
}

/// Raw ids indexed by dense id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<i64>,
    pub items: Vec<i64>,
}

impl IdMap {
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_id_table(&dir.join("user_ids.csv"), &self.users)?;
        write_id_table(&dir.join("item_ids.csv"), &self.items)
    }
}

fn write_id_table(path: &Path, raw: &[i64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dense", "raw"])?;
    for (dense, raw) in raw.iter().enumerate() {
        w.write_record([dense.to_string(), raw.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct RawRow {
    user: i64,
    item: i64,
    value: f64,
    timestamp: i64,
}

fn read_raw_rows(path: &Path, format: Format, schema: &Schema) -> Result<Vec<RawRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: format!("missing column {name:?} in header"),
    };
    let user_col = column(&schema.user).ok_or_else(|| missing(&schema.user))?;
    let item_col = column(&schema.item).ok_or_else(|| missing(&schema.item))?;
    let value_col = column(&schema.value).ok_or_else(|| missing(&schema.value))?;
    let ts_col = column(&schema.timestamp);

    let mut rows = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            }
        })?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let field = |col: usize, name: &str| {
            record
                .get(col)
                .ok_or_else(|| bad(format!("missing field {name:?}")))
        };
        let user = field(user_col, "user")?;
        let user: i64 = user
            .parse()
            .map_err(|_| bad(format!("user id {user:?} is not an integer")))?;
        let item = field(item_col, "item")?;
        let item: i64 = item
            .parse()
            .map_err(|_| bad(format!("item id {item:?} is not an integer")))?;
        let value = field(value_col, "value")?;
        let value: f64 = value
            .parse()
            .map_err(|_| bad(format!("value {value:?} is not a number")))?;
        if !value.is_finite() {
            return Err(bad(format!("value {value} is not finite")));
        }
        let timestamp = match ts_col {
            Some(col) => match record.get(col) {
                Some("") | None => NO_TIMESTAMP,
                Some(ts) => ts
                    .parse()
                    .map_err(|_| bad(format!("timestamp {ts:?} is not an integer")))?,
            },
            None => NO_TIMESTAMP,
        };
        rows.push(RawRow {
            user,
            item,
            value,
            timestamp,
        });
    }
    Ok(rows)
}

/// Loads an interaction log, re-indexing raw ids densely in ascending raw-id
/// order and collapsing duplicate pairs.
pub fn load_interactions(path: &Path, format: Format, schema: &Schema) -> Result<(Dataset, IdMap)> {
    let rows = read_raw_rows(path, format, schema)?;
    if rows.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    let dense = |raw: Vec<i64>| -> (BTreeMap<i64, usize>, Vec<i64>) {
        let mut ids = raw;
        ids.sort_unstable();
        ids.dedup();
        let index = ids.iter().enumerate().map(|(d, &r)| (r, d)).collect();
        (index, ids)
    };
    let (user_index, users) = dense(rows.iter().map(|r| r.user).collect());
    let (item_index, items) = dense(rows.iter().map(|r| r.item).collect());
    let interactions = rows
        .iter()
        .map(|r| Interaction {
            user: user_index[&r.user],
            item: item_index[&r.item],
            value: r.value,
            timestamp: r.timestamp,
        })
        .collect();
    let dataset = Dataset::new(
        users.len(),
        items.len(),
        interactions,
        FeedbackKind::Explicit,
    )?
    .deduplicate();
    info!(
        "loaded {}: {} users, {} items, {} interactions",
        path.display(),
        dataset.n_users,
        dataset.n_items,
        dataset.len()
    );
    Ok((dataset, IdMap { users, items }))
}

/// Writes a dataset as `user,item,value,timestamp` CSV.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_interactions(path, &dataset.interactions)
}

fn write_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user", "item", "value", "timestamp"])?;
    for it in interactions {
        w.write_record([
            it.user.to_string(),
            it.item.to_string(),
            it.value.to_string(),
            it.timestamp.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinarizeRule {
    #[serde(rename = "rating_ge_4")]
    RatingGe4,
    #[serde(rename = "watch_ratio_ge_2")]
    WatchRatioGe2,
    Passthrough,
}

impl BinarizeRule {
    pub const NAMES: [&'static str; 3] = ["rating_ge_4", "watch_ratio_ge_2", "passthrough"];
}

impl fmt::Display for BinarizeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            BinarizeRule::RatingGe4 => "rating_ge_4",
            BinarizeRule::WatchRatioGe2 => "watch_ratio_ge_2",
            BinarizeRule::Passthrough => "passthrough",
        };
        f.write_str(name)
    }
}

impl FromStr for BinarizeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rating_ge_4" => Ok(BinarizeRule::RatingGe4),
            "watch_ratio_ge_2" => Ok(BinarizeRule::WatchRatioGe2),
            "passthrough" => Ok(BinarizeRule::Passthrough),
            other => Err(Error::Config(format!(
                "unknown rule {other:?}; valid rules: {}",
                BinarizeRule::NAMES.join(", ")
            ))),
        }
    }
}

/// Applies a binarization rule. `Passthrough` returns the dataset as is.
pub fn binarize(dataset: &Dataset, rule: BinarizeRule) -> Result<Dataset> {
    let threshold = match rule {
        BinarizeRule::Passthrough => return Ok(dataset.clone()),
        BinarizeRule::RatingGe4 => 4.0,
        BinarizeRule::WatchRatioGe2 => 2.0,
    };
    let mut out = dataset.clone();
    for it in &mut out.interactions {
        if it.value < 0.0 {
            return Err(Error::InvalidValue(format!(
                "negative value {} for ({}, {}) under rule {rule}",
                it.value, it.user, it.item
            )));
        }
        it.value = if it.value >= threshold { 1.0 } else { 0.0 };
    }
    out.feedback_kind = FeedbackKind::Implicit;
    let positives = out.positive_count();
    info!(
        "binarized with {rule}: {positives} positives, {} negatives",
        out.len() - positives
    );
    Ok(out)
}

/// Leave-one-out partition. `valid[u]` and `test[u]` hold at most one item.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub valid: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    train_positives: Vec<Vec<usize>>,
}

impl Split {
    pub fn new(train: Dataset, valid: Vec<Vec<usize>>, test: Vec<Vec<usize>>) -> Result<Self> {
        for (name, lists) in [("valid", &valid), ("test", &test)] {
            if lists.len() != train.n_users {
                return Err(Error::DimensionMismatch {
                    context: if name == "valid" { "valid lists" } else { "test lists" },
                    expected: train.n_users,
                    actual: lists.len(),
                });
            }
            if let Some(&item) = lists.iter().flatten().find(|&&i| i >= train.n_items) {
                return Err(Error::OutOfRange {
                    kind: "item",
                    id: item,
                    n: train.n_items,
                });
            }
        }
        let train_positives = train.positives_by_user();
        Ok(Split {
            train,
            valid,
            test,
            train_positives,
        })
    }

    pub fn n_users(&self) -> usize {
        self.train.n_users
    }

    pub fn n_items(&self) -> usize {
        self.train.n_items
    }

    /// Sorted train positives of each user.
    pub fn train_positives(&self) -> &[Vec<usize>] {
        &self.train_positives
    }

    pub fn save(&self, dir: &Path, meta: &SplitMeta) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_interactions(&dir.join("train.csv"), &self.train.interactions)?;
        write_heldout(&dir.join("valid.csv"), &self.valid)?;
        write_heldout(&dir.join("test.csv"), &self.test)?;
        let meta_path = dir.join("meta.json");
        let json = serde_json::to_string_pretty(meta)?;
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(meta_path, e))
    }

    pub fn load(dir: &Path) -> Result<(Split, SplitMeta)> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: SplitMeta = serde_json::from_str(&text)?;
        let train = read_dense(&dir.join("train.csv"), &meta)?;
        let train = Dataset::new(meta.n_users, meta.n_items, train, meta.feedback_kind)?;
        let lists = |name: &str| -> Result<Vec<Vec<usize>>> {
            let mut out = vec![Vec::new(); meta.n_users];
            for it in read_dense(&dir.join(name), &meta)? {
                out[it.user].push(it.item);
            }
            Ok(out)
        };
        let valid = lists("valid.csv")?;
        let test = lists("test.csv")?;
        Ok((Split::new(train, valid, test)?, meta))
    }
}

fn write_heldout(path: &Path, lists: &[Vec<usize>]) -> Result<()> {
    let interactions: Vec<Interaction> = lists
        .iter()
        .enumerate()
        .flat_map(|(user, items)| {
            items.iter().map(move |&item| Interaction {
                user,
                item,
                value: 1.0,
                timestamp: NO_TIMESTAMP,
            })
        })
        .collect();
    write_interactions(path, &interactions)
}

/// Reads an already dense-indexed file without re-indexing.
fn read_dense(path: &Path, meta: &SplitMeta) -> Result<Vec<Interaction>> {
    let rows = read_raw_rows(path, Format::Csv, &Schema::default())?;
    rows.into_iter()
        .map(|r| {
            let user = usize::try_from(r.user)
                .ok()
                .filter(|&u| u < meta.n_users)
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!("user {} outside [0, {})", r.user, meta.n_users),
                })?;
            let item = usize::try_from(r.item)
                .ok()
                .filter(|&i| i < meta.n_items)
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!("item {} outside [0, {})", r.item, meta.n_items),
                })?;
            Ok(Interaction {
                user,
                item,
                value: r.value,
                timestamp: r.timestamp,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMeta {
    pub n_users: usize,
    pub n_items: usize,
    pub seed: u64,
    pub rule: BinarizeRule,
    pub feedback_kind: FeedbackKind,
}

/// Per user, the latest positive goes to test, the second latest to valid,
/// the rest to train. Users with fewer than three positives keep everything
/// in train. Without timestamps the order is a seeded shuffle.
pub fn leave_one_out_split(dataset: &Dataset, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_users];
    for (idx, it) in dataset.interactions.iter().enumerate() {
        if dataset.is_positive(it) {
            by_user[it.user].push(idx);
        }
    }
    let mut held_out = vec![false; dataset.len()];
    let mut valid = vec![Vec::new(); dataset.n_users];
    let mut test = vec![Vec::new(); dataset.n_users];
    for (user, idxs) in by_user.iter_mut().enumerate() {
        let timed = idxs
            .iter()
            .all(|&i| dataset.interactions[i].timestamp != NO_TIMESTAMP);
        if timed {
            idxs.sort_by_key(|&i| {
                let it = &dataset.interactions[i];
                (it.timestamp, it.item)
            });
        } else {
            idxs.sort_by_key(|&i| dataset.interactions[i].item);
            idxs.shuffle(&mut rng);
        }
        if idxs.len() < 3 {
            continue;
        }
        let t = idxs[idxs.len() - 1];
        let v = idxs[idxs.len() - 2];
        test[user].push(dataset.interactions[t].item);
        valid[user].push(dataset.interactions[v].item);
        held_out[t] = true;
        held_out[v] = true;
    }
    let train_interactions = dataset
        .interactions
        .iter()
        .zip(&held_out)
        .filter(|(_, &h)| !h)
        .map(|(it, _)| *it)
        .collect();
    let train = Dataset {
        interactions: train_interactions,
        ..dataset.clone()
    };
    Split::new(train, valid, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    ByUser,
    ByItem,
}

/// Dense binary matrix of train positives.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    pub axis: Axis,
    pub rows: Array2<f64>,
}

impl InteractionMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.rows.ncols()
    }
}

pub fn interaction_matrix(split: &Split, axis: Axis) -> InteractionMatrix {
    let (n_rows, n_cols) = match axis {
        Axis::ByUser => (split.n_users(), split.n_items()),
        Axis::ByItem => (split.n_items(), split.n_users()),
    };
    let mut rows = Array2::zeros((n_rows, n_cols));
    for (user, items) in split.train_positives().iter().enumerate() {
        for &item in items {
            match axis {
                Axis::ByUser => rows[[user, item]] = 1.0,
                Axis::ByItem => rows[[item, user]] = 1.0,
            }
        }
    }
    InteractionMatrix { axis, rows }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triple {
    pub user: usize,
    pub item: usize,
    pub label: f64,
}

/// Epoch-indexed stream of positives plus uniformly drawn negatives.
#[derive(Debug, Clone)]
pub struct NegativeSampler<'a> {
    positives: &'a [Vec<usize>],
    n_items: usize,
    ratio: usize,
    seed: u64,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(split: &'a Split, ratio: usize, seed: u64) -> Result<Self> {
        if ratio < 1 {
            return Err(Error::Config("negative ratio must be at least 1".into()));
        }
        let positives = split.train_positives();
        for (user, items) in positives.iter().enumerate() {
            if !items.is_empty() && items.len() >= split.n_items() {
                warn!("user {user} has every item as a positive; no negatives will be drawn");
            }
        }
        Ok(NegativeSampler {
            positives,
            n_items: split.n_items(),
            ratio,
            seed,
        })
    }

    /// Triples for one epoch: each positive followed by its negatives.
    pub fn epoch(&self, epoch: usize) -> EpochStream<'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        EpochStream {
            positives: self.positives,
            n_items: self.n_items,
            ratio: self.ratio,
            rng,
            user: 0,
            pos: 0,
            pending: 0,
        }
    }
}

pub struct EpochStream<'a> {
    positives: &'a [Vec<usize>],
    n_items: usize,
    ratio: usize,
    rng: ChaCha8Rng,
    user: usize,
    pos: usize,
    pending: usize,
}

impl Iterator for EpochStream<'_> {
    type Item = Triple;

    fn next(&mut self) -> Option<Triple> {
        loop {
            let items = self.positives.get(self.user)?;
            if self.pending > 0 {
                self.pending -= 1;
                loop {
                    let item = self.rng.gen_range(0..self.n_items);
                    if items.binary_search(&item).is_err() {
                        return Some(Triple {
                            user: self.user,
                            item,
                            label: 0.0,
                        });
                    }
                }
            }
            if self.pos < items.len() {
                let item = items[self.pos];
                self.pos += 1;
                if items.len() < self.n_items {
                    self.pending = self.ratio;
                }
                return Some(Triple {
                    user: self.user,
                    item,
                    label: 1.0,
                });
            }
            self.user += 1;
            self.pos = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        path
    }

    fn implicit(n_users: usize, n_items: usize, triples: &[(usize, usize, f64, i64)]) -> Dataset {
        let interactions = triples
            .iter()
            .map(|&(user, item, value, timestamp)| Interaction {
                user,
                item,
                value,
                timestamp,
            })
            .collect();
        Dataset::new(n_users, n_items, interactions, FeedbackKind::Implicit).unwrap()
    }

    #[test]
    fn reindexes_sparse_user_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "x.csv", "user,item,value\n10,5,1\n10,6,1\n42,5,0\n");
        let (d, map) = load_interactions(&path, Format::Csv, &Schema::default()).unwrap();
        assert_eq!(d.n_users, 2);
        assert_eq!(d.n_items, 2);
        let users: HashSet<usize> = d.interactions.iter().map(|it| it.user).collect();
        assert_eq!(users, HashSet::from([0, 1]));
        assert_eq!(map.users, vec![10, 42]);
        assert!(d.interactions.iter().all(|it| it.timestamp == NO_TIMESTAMP));
    }

    #[test]
    fn non_numeric_item_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "x.csv", "user,item,value\n1,2,3\n1,abc,3\n");
        let err = load_interactions(&path, Format::Csv, &Schema::default()).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "x.csv", "user,item,value\n");
        assert!(matches!(
            load_interactions(&path, Format::Csv, &Schema::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn duplicates_keep_latest_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "x.tsv",
            "user\titem\tvalue\ttimestamp\n1\t1\t5\t30\n1\t1\t2\t10\n1\t2\t4\t5\n",
        );
        let (d, _) = load_interactions(&path, Format::Tsv, &Schema::default()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.interactions[0].value, 5.0);
        assert_eq!(d.interactions[0].timestamp, 30);
    }

    #[test]
    fn custom_schema_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "x.csv", "uid,rating,iid\n3,4.5,7\n");
        let schema = Schema {
            user: "uid".into(),
            item: "iid".into(),
            value: "rating".into(),
            timestamp: "ts".into(),
        };
        let (d, map) = load_interactions(&path, Format::Csv, &schema).unwrap();
        assert_eq!(d.interactions[0].value, 4.5);
        assert_eq!(map.items, vec![7]);
    }

    #[test]
    fn save_then_load_is_a_fixpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "x.csv",
            "user,item,value,timestamp\n7,3,4.25,11\n7,9,1,12\n2,3,0.1,13\n",
        );
        let (d, _) = load_interactions(&path, Format::Csv, &Schema::default()).unwrap();
        let saved = dir.path().join("saved.csv");
        save_dataset(&d, &saved).unwrap();
        let (again, map) = load_interactions(&saved, Format::Csv, &Schema::default()).unwrap();
        assert_eq!(again, d);
        assert_eq!(map.users, vec![0, 1]);
    }

    #[test]
    fn binarize_thresholds() {
        let d = Dataset::new(
            1,
            4,
            vec![
                Interaction { user: 0, item: 0, value: 4.0, timestamp: -1 },
                Interaction { user: 0, item: 1, value: 3.0, timestamp: -1 },
                Interaction { user: 0, item: 2, value: 1.99, timestamp: -1 },
                Interaction { user: 0, item: 3, value: 2.0, timestamp: -1 },
            ],
            FeedbackKind::Explicit,
        )
        .unwrap();
        let r = binarize(&d, BinarizeRule::RatingGe4).unwrap();
        let vals: Vec<f64> = r.interactions.iter().map(|it| it.value).collect();
        assert_eq!(vals, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.feedback_kind, FeedbackKind::Implicit);

        let w = binarize(&d, BinarizeRule::WatchRatioGe2).unwrap();
        let vals: Vec<f64> = w.interactions.iter().map(|it| it.value).collect();
        assert_eq!(vals, vec![1.0, 1.0, 0.0, 1.0]);

        assert_eq!(binarize(&d, BinarizeRule::Passthrough).unwrap(), d);
    }

    #[test]
    fn negative_rating_rejected() {
        let d = implicit(1, 1, &[(0, 0, -1.0, -1)]);
        assert!(binarize(&d, BinarizeRule::RatingGe4).is_err());
    }

    #[test]
    fn unknown_rule_lists_valid_names() {
        let err = "rating_ge_5".parse::<BinarizeRule>().unwrap_err().to_string();
        for name in BinarizeRule::NAMES {
            assert!(err.contains(name));
        }
    }

    #[test]
    fn rule_names_agree_with_serde() {
        for name in BinarizeRule::NAMES {
            let rule: BinarizeRule = name.parse().unwrap();
            assert_eq!(rule.to_string(), name);
            assert_eq!(serde_json::to_string(&rule).unwrap(), format!("\"{name}\""));
        }
    }

    #[test]
    fn temporal_leave_one_out() {
        let d = implicit(2, 4, &[(0, 0, 1.0, 1), (0, 1, 1.0, 2), (0, 2, 1.0, 3), (1, 0, 1.0, 1), (1, 1, 1.0, 2)]);
        let s = leave_one_out_split(&d, 0).unwrap();
        assert_eq!(s.test[0], vec![2]);
        assert_eq!(s.valid[0], vec![1]);
        assert_eq!(s.train_positives()[0], vec![0]);
        assert!(s.test[1].is_empty());
        assert!(s.valid[1].is_empty());
        assert_eq!(s.train_positives()[1], vec![0, 1]);
    }

    #[test]
    fn negatives_stay_in_train_and_are_not_held_out() {
        let d = implicit(1, 5, &[(0, 0, 1.0, 1), (0, 1, 1.0, 2), (0, 2, 1.0, 3), (0, 3, 0.0, 9)]);
        let s = leave_one_out_split(&d, 0).unwrap();
        assert_eq!(s.test[0], vec![2]);
        assert_eq!(s.train.len(), 2);
    }

    #[test]
    fn shuffled_split_is_seed_deterministic() {
        let triples: Vec<_> = (0..6).flat_map(|u| (0..8).map(move |i| (u, i, 1.0, -1))).collect();
        let d = implicit(6, 8, &triples);
        let a = leave_one_out_split(&d, 17).unwrap();
        let b = leave_one_out_split(&d, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matrix_axes() {
        let d = implicit(2, 2, &[(0, 1, 1.0, -1)]);
        let s = leave_one_out_split(&d, 0).unwrap();
        let by_user = interaction_matrix(&s, Axis::ByUser);
        assert_eq!(by_user.rows, ndarray::array![[0.0, 1.0], [0.0, 0.0]]);
        let by_item = interaction_matrix(&s, Axis::ByItem);
        assert_eq!(by_item.rows, ndarray::array![[0.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn all_positive_matrix_is_all_ones() {
        let d = implicit(2, 2, &[(0, 0, 1.0, -1), (0, 1, 1.0, -1), (1, 0, 1.0, -1), (1, 1, 1.0, -1)]);
        let s = leave_one_out_split(&d, 0).unwrap();
        let m = interaction_matrix(&s, Axis::ByUser);
        assert!(m.rows.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn sampler_counts_and_collisions() {
        let d = implicit(1, 10, &[(0, 1, 1.0, -1), (0, 4, 1.0, -1), (0, 7, 1.0, -1)]);
        let s = leave_one_out_split(&d, 0).unwrap();
        let train_pos: HashSet<usize> = s.train_positives()[0].iter().copied().collect();
        let sampler = NegativeSampler::new(&s, 1, 3).unwrap();
        let triples: Vec<Triple> = sampler.epoch(0).collect();
        assert_eq!(triples.len(), 2 * train_pos.len());
        for t in &triples {
            if t.label == 0.0 {
                assert!(!train_pos.contains(&t.item));
            }
        }
    }

    #[test]
    fn ratio_one_three_positives_gives_six() {
        let d = implicit(2, 10, &[(0, 1, 1.0, -1), (0, 4, 1.0, -1), (1, 7, 1.0, -1)]);
        let s = leave_one_out_split(&d, 0).unwrap();
        let sampler = NegativeSampler::new(&s, 1, 3).unwrap();
        assert_eq!(sampler.epoch(0).count(), 6);
    }

    #[test]
    fn sampler_is_deterministic_per_epoch() {
        let d = implicit(3, 20, &[(0, 1, 1.0, -1), (1, 4, 1.0, -1), (2, 7, 1.0, -1)]);
        let s = leave_one_out_split(&d, 0).unwrap();
        let a = NegativeSampler::new(&s, 4, 9).unwrap();
        let b = NegativeSampler::new(&s, 4, 9).unwrap();
        assert_eq!(a.epoch(5).collect::<Vec<_>>(), b.epoch(5).collect::<Vec<_>>());
        assert_ne!(a.epoch(5).collect::<Vec<_>>(), a.epoch(6).collect::<Vec<_>>());
    }

    #[test]
    fn saturated_user_emits_positives_only() {
        let d = implicit(1, 2, &[(0, 0, 1.0, -1), (0, 1, 1.0, -1)]);
        let s = leave_one_out_split(&d, 0).unwrap();
        let sampler = NegativeSampler::new(&s, 4, 0).unwrap();
        let triples: Vec<Triple> = sampler.epoch(0).collect();
        assert_eq!(triples.len(), 2);
        assert!(triples.iter().all(|t| t.label == 1.0));
    }

    #[test]
    fn zero_ratio_rejected() {
        let d = implicit(1, 2, &[(0, 0, 1.0, -1)]);
        let s = leave_one_out_split(&d, 0).unwrap();
        assert!(NegativeSampler::new(&s, 0, 0).is_err());
    }

    #[test]
    fn split_save_load_roundtrip() {
        let triples: Vec<_> = (0..4).flat_map(|u| (0..5).map(move |i| (u, i, ((u + i) % 2) as f64, (i * 10) as i64))).collect();
        let d = implicit(4, 5, &triples);
        let s = leave_one_out_split(&d, 1).unwrap();
        let meta = SplitMeta {
            n_users: 4,
            n_items: 5,
            seed: 1,
            rule: BinarizeRule::Passthrough,
            feedback_kind: FeedbackKind::Implicit,
        };
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path(), &meta).unwrap();
        let (loaded, m) = Split::load(dir.path()).unwrap();
        assert_eq!(m, meta);
        assert_eq!(loaded, s);
    }
}
