//! Synthetic confounded-feedback world with a known ground truth.
//!
//! True preferences come from Gaussian user/item factors. Observed clicks
//! add two confounder scores inside a Bernoulli link, and exposure is driven
//! by a plain MF "former recommender" retrained after every round, so bias
//! can compound over rounds.

use std::fs;
use std::path::Path;

use log::info;
use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeedbackKind, Interaction, Split};
use crate::error::{Error, Result};
use crate::eval::{rank_by_scores, ExternalLabels, Scorer};
use crate::model::{dot, sigmoid};
use crate::train::{train_slfr, TrainConfig};

const STREAM_TRUE: u64 = 0;
const STREAM_CONF: u64 = 1;
const STREAM_EXPOSE: u64 = 2;
const STREAM_LABEL: u64 = 3;

/// Settings of the former recommender that picks exposures in rounds ≥ 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FormerConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub neg_ratio: usize,
    pub batch: usize,
}

impl Default for FormerConfig {
    fn default() -> Self {
        FormerConfig {
            dim: 16,
            epochs: 20,
            lr: 0.01,
            neg_ratio: 4,
            batch: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub d_true: usize,
    /// Scale of the confounder scores in the observation logit.
    pub conf_strength: f64,
    /// Items shown to each user per round.
    pub exposure_k: usize,
    pub rounds: usize,
    /// Fraction of items that are true positives for each user.
    pub density: f64,
    pub seed: u64,
    /// Mean and spread of the true factor entries.
    pub factor_mean: f64,
    pub factor_std: f64,
    /// Mean and spread of the confounder entries. A positive mean together
    /// with a positive `factor_mean` gives confounder scores a positive mean.
    pub conf_mean: f64,
    pub conf_std: f64,
    pub former: FormerConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 500,
            n_items: 1000,
            d_true: 16,
            conf_strength: 2.0,
            exposure_k: 20,
            rounds: 3,
            density: 0.1,
            seed: 0,
            factor_mean: 0.1,
            factor_std: 0.5,
            conf_mean: 0.2,
            conf_std: 0.5,
            former: FormerConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.d_true == 0 {
            return Err(Error::Config("n_users, n_items and d_true must be positive".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.exposure_k == 0 || self.exposure_k * self.rounds > self.n_items {
            return Err(Error::Config(format!(
                "exposure_k * rounds must be in 1..={} (got {} * {})",
                self.n_items, self.exposure_k, self.rounds
            )));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must be in (0, 1], got {}", self.density)));
        }
        if !(self.conf_strength >= 0.0 && self.conf_strength.is_finite()) {
            return Err(Error::Config("conf_strength must be >= 0".into()));
        }
        if !(self.factor_std >= 0.0 && self.conf_std >= 0.0) {
            return Err(Error::Config("standard deviations must be >= 0".into()));
        }
        Ok(())
    }

    /// True positives per user.
    pub fn positives_per_user(&self) -> usize {
        ((self.density * self.n_items as f64).round() as usize).clamp(1, self.n_items)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub true_user: Array2<f64>,
    pub true_item: Array2<f64>,
    pub conf_user: Array2<f64>,
    pub conf_item: Array2<f64>,
    /// Sorted true-positive items per user.
    pub true_positives: Vec<Vec<usize>>,
}

impl SynthWorld {
    pub fn n_users(&self) -> usize {
        self.true_user.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.true_item.nrows()
    }

    pub fn true_score(&self, user: usize, item: usize) -> f64 {
        dot(self.true_user.row(user), self.true_item.row(item))
    }

    pub fn is_true_positive(&self, user: usize, item: usize) -> bool {
        self.true_positives[user].binary_search(&item).is_ok()
    }

    /// Observation logit `s_true + cs * (conf_user_u·true_item_i + conf_item_i·true_user_u)`.
    pub fn observed_logit(&self, user: usize, item: usize, conf_strength: f64) -> f64 {
        let s = self.true_score(user, item);
        if conf_strength == 0.0 {
            return s;
        }
        let s_u = dot(self.conf_user.row(user), self.true_item.row(item));
        let s_i = dot(self.conf_item.row(item), self.true_user.row(user));
        s + conf_strength * (s_u + s_i)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, mean: f64, std: f64) -> Array2<f64> {
    let normal = Normal::new(mean, std).expect("std validated");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws true and confounder factors, then labels the top `density` share of
/// each user's true scores as positive (ties by ascending item id).
pub fn generate_world(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, STREAM_TRUE);
    let true_user = gaussian_matrix(&mut rng, cfg.n_users, cfg.d_true, cfg.factor_mean, cfg.factor_std);
    let true_item = gaussian_matrix(&mut rng, cfg.n_items, cfg.d_true, cfg.factor_mean, cfg.factor_std);
    let mut rng = stream(cfg.seed, STREAM_CONF);
    let conf_user = gaussian_matrix(&mut rng, cfg.n_users, cfg.d_true, cfg.conf_mean, cfg.conf_std);
    let conf_item = gaussian_matrix(&mut rng, cfg.n_items, cfg.d_true, cfg.conf_mean, cfg.conf_std);

    let k = cfg.positives_per_user();
    let mut scores = vec![0.0; cfg.n_items];
    let mut true_positives = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        for (i, s) in scores.iter_mut().enumerate() {
            *s = dot(true_user.row(u), true_item.row(i));
        }
        let mut top = rank_by_scores(&scores, &[], Some(k));
        top.sort_unstable();
        true_positives.push(top);
    }
    Ok(SynthWorld {
        true_user,
        true_item,
        conf_user,
        conf_item,
        true_positives,
    })
}

/// `P(y = 1)` for every user-item pair.
pub fn observation_probabilities(world: &SynthWorld, conf_strength: f64) -> Array2<f64> {
    Array2::from_shape_fn((world.n_users(), world.n_items()), |(u, i)| {
        sigmoid(world.observed_logit(u, i, conf_strength))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    #[serde(rename = "fpr")]
    pub false_positive_rate: f64,
    #[serde(rename = "fnr")]
    pub false_negative_rate: f64,
    pub positive_rate: f64,
}

pub fn save_round_stats(path: &Path, stats: &[RoundStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Simulation {
    /// Every exposure with its observed label (1 or 0); timestamps count
    /// exposures in order.
    pub dataset: Dataset,
    pub rounds: Vec<RoundStats>,
}

fn round_stats(round: usize, world: &SynthWorld, shown: &[Interaction]) -> RoundStats {
    let (mut neg, mut fp, mut pos, mut fn_, mut clicks) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for it in shown {
        let clicked = it.value > 0.5;
        clicks += clicked as usize;
        if world.is_true_positive(it.user, it.item) {
            pos += 1;
            fn_ += !clicked as usize;
        } else {
            neg += 1;
            fp += clicked as usize;
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    RoundStats {
        round,
        false_positive_rate: rate(fp, neg),
        false_negative_rate: rate(fn_, pos),
        positive_rate: rate(clicks, shown.len()),
    }
}

fn former_recommender(cfg: &SynthConfig, observed: &[Interaction], round: usize) -> Result<crate::model::MfModel> {
    let train = Dataset::new(cfg.n_users, cfg.n_items, observed.to_vec(), FeedbackKind::Implicit)?;
    let split = Split::new(train, vec![Vec::new(); cfg.n_users], vec![Vec::new(); cfg.n_users])?;
    let tc = TrainConfig {
        dim: cfg.former.dim,
        epochs: cfg.former.epochs,
        lr: cfg.former.lr,
        neg_ratio: cfg.former.neg_ratio,
        batch: cfg.former.batch,
        seed: crate::derive_seed(cfg.seed, 100 + round as u64),
        ..TrainConfig::default()
    };
    Ok(train_slfr(&split, None, &tc)?.model)
}

/// Runs the exposure loop. Round 1 shows `exposure_k` uniformly random items
/// to each user; later rounds show the former recommender's top unexposed
/// items. Each shown pair gets a label drawn from its observation
/// probability.
pub fn simulate_exposure(world: &SynthWorld, cfg: &SynthConfig) -> Result<Simulation> {
    cfg.validate()?;
    if world.n_users() != cfg.n_users || world.n_items() != cfg.n_items {
        return Err(Error::Config("world shape does not match the config".into()));
    }
    let mut expose_rng = stream(cfg.seed, STREAM_EXPOSE);
    let mut label_rng = stream(cfg.seed, STREAM_LABEL);
    let mut exposed: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_users];
    let mut observed: Vec<Interaction> = Vec::new();
    let mut stats = Vec::with_capacity(cfg.rounds);
    let mut clock = 0i64;
    let mut scores = vec![0.0; cfg.n_items];

    for round in 1..=cfg.rounds {
        let former = if round == 1 {
            None
        } else {
            Some(former_recommender(cfg, &observed, round)?)
        };
        let mut shown = Vec::with_capacity(cfg.n_users * cfg.exposure_k);
        for (u, seen) in exposed.iter_mut().enumerate() {
            let picks: Vec<usize> = match &former {
                None => index::sample(&mut expose_rng, cfg.n_items, cfg.exposure_k).into_vec(),
                Some(m) => {
                    m.user_scores(u, &mut scores);
                    rank_by_scores(&scores, seen, Some(cfg.exposure_k))
                }
            };
            for item in picks {
                let p = sigmoid(world.observed_logit(u, item, cfg.conf_strength));
                let y = label_rng.gen::<f64>() < p;
                shown.push(Interaction {
                    user: u,
                    item,
                    value: if y { 1.0 } else { 0.0 },
                    timestamp: clock,
                });
                clock += 1;
                let pos = seen.binary_search(&item).unwrap_err();
                seen.insert(pos, item);
            }
        }
        let s = round_stats(round, world, &shown);
        info!(
            "round {round}: fpr {:.4} fnr {:.4} positive rate {:.4}",
            s.false_positive_rate, s.false_negative_rate, s.positive_rate
        );
        stats.push(s);
        observed.extend(shown);
    }
    let dataset = Dataset::new(cfg.n_users, cfg.n_items, observed, FeedbackKind::Implicit)?;
    Ok(Simulation { dataset, rounds: stats })
}

/// True positives outside each user's observed train positives. Users left
/// with nothing are dropped; the second value counts them.
pub fn true_label_testset(world: &SynthWorld, split: &Split) -> Result<(ExternalLabels, usize)> {
    if split.n_users() != world.n_users() || split.n_items() != world.n_items() {
        return Err(Error::Config("split shape does not match the world".into()));
    }
    let mut labels = ExternalLabels::default();
    let mut dropped = 0;
    for (u, truth) in world.true_positives.iter().enumerate() {
        let train = &split.train_positives()[u];
        let rest: Vec<usize> = truth
            .iter()
            .copied()
            .filter(|i| train.binary_search(i).is_err())
            .collect();
        if rest.is_empty() {
            dropped += 1;
        } else {
            labels.users.insert(u, rest);
        }
    }
    Ok((labels, dropped))
}

/// Ranks by the true score; the upper bound for true-label evaluation.
pub struct TrueScoreOracle<'a>(pub &'a SynthWorld);

impl Scorer for TrueScoreOracle<'_> {
    fn n_users(&self) -> usize {
        self.0.n_users()
    }

    fn n_items(&self) -> usize {
        self.0.n_items()
    }

    fn user_scores(&self, user: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.0.true_score(user, i);
        }
    }
}
