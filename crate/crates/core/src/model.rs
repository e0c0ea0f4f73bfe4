//! Matrix-factorization scores and the confounder-aware score algebra.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::FeedbackKind;
use crate::error::{Error, Result};
use crate::vae::ConfounderReps;

pub const INIT_STD: f64 = 0.01;

/// How the base score and the two confounder scores combine for implicit
/// feedback. Explicit feedback always sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// `score * sb_i * sb_u`, applied literally (sign flips included).
    #[default]
    Product,
    /// `score + sb_i + sb_u` inside the sigmoid.
    Sum,
}

impl FromStr for Composition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "product" => Ok(Composition::Product),
            "sum" => Ok(Composition::Sum),
            other => Err(Error::Config(format!(
                "unknown composition '{other}' (expected product or sum)"
            ))),
        }
    }
}

/// User and item embedding tables, no bias terms.
#[derive(Debug, Clone, PartialEq)]
pub struct MfModel {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

pub fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn checked_dot(context: &'static str, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context,
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(dot(a, b))
}

impl MfModel {
    /// Gaussian init, mean 0, std 0.01. Users are drawn before items.
    pub fn random(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let users = Array2::from_shape_simple_fn((n_users, dim), || normal.sample(&mut rng));
        let items = Array2::from_shape_simple_fn((n_items, dim), || normal.sample(&mut rng));
        MfModel { users, items }
    }

    pub fn n_users(&self) -> usize {
        self.users.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.items.nrows()
    }

    pub fn dim(&self) -> usize {
        self.users.ncols()
    }

    pub(crate) fn check_ids(&self, user: usize, item: usize) -> Result<()> {
        if user >= self.n_users() {
            return Err(Error::OutOfRange {
                kind: "user",
                id: user,
                n: self.n_users(),
            });
        }
        if item >= self.n_items() {
            return Err(Error::OutOfRange {
                kind: "item",
                id: item,
                n: self.n_items(),
            });
        }
        Ok(())
    }

    pub fn score(&self, user: usize, item: usize) -> Result<f64> {
        self.check_ids(user, item)?;
        Ok(self.score_unchecked(user, item))
    }

    pub(crate) fn score_unchecked(&self, user: usize, item: usize) -> f64 {
        dot(self.users.row(user), self.items.row(item))
    }

    /// Identity link for explicit feedback, sigmoid for implicit.
    pub fn predict(&self, user: usize, item: usize, kind: FeedbackKind) -> Result<f64> {
        let s = self.score(user, item)?;
        Ok(match kind {
            FeedbackKind::Explicit => s,
            FeedbackKind::Implicit => sigmoid(s),
        })
    }

    /// Flattened parameters: user table then item table, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.users.iter().chain(self.items.iter()).copied().collect()
    }

    pub fn from_flat(n_users: usize, n_items: usize, dim: usize, flat: &[f64]) -> Result<Self> {
        let expected = (n_users + n_items) * dim;
        if flat.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "flat MF parameters",
                expected,
                actual: flat.len(),
            });
        }
        let (u, i) = flat.split_at(n_users * dim);
        Ok(MfModel {
            users: Array2::from_shape_vec((n_users, dim), u.to_vec()).expect("shape checked"),
            items: Array2::from_shape_vec((n_items, dim), i.to_vec()).expect("shape checked"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = MfCheckpoint {
            n_users: self.n_users(),
            n_items: self.n_items(),
            dim: self.dim(),
            users: self.users.iter().copied().collect(),
            items: self.items.iter().copied().collect(),
        };
        let json = serde_json::to_string(&ckpt)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: MfCheckpoint = serde_json::from_str(&text)?;
        let mut flat = ckpt.users;
        flat.extend(ckpt.items);
        let model = MfModel::from_flat(ckpt.n_users, ckpt.n_items, ckpt.dim, &flat)?;
        if model.users.iter().chain(model.items.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "checkpoint entry",
                at: path.display().to_string(),
            });
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MfCheckpoint {
    n_users: usize,
    n_items: usize,
    dim: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

/// `r_u · v_i`
pub fn score_bias_user(r_u: ArrayView1<'_, f64>, v_i: ArrayView1<'_, f64>) -> Result<f64> {
    checked_dot("score_bias_user", r_u, v_i)
}

/// `r_i · w_u`
pub fn score_bias_item(r_i: ArrayView1<'_, f64>, w_u: ArrayView1<'_, f64>) -> Result<f64> {
    checked_dot("score_bias_item", r_i, w_u)
}

pub fn compose_bias(
    score: f64,
    sb_user: f64,
    sb_item: f64,
    kind: FeedbackKind,
    composition: Composition,
) -> f64 {
    match (kind, composition) {
        (FeedbackKind::Implicit, Composition::Product) => score * sb_item * sb_user,
        _ => score + sb_item + sb_user,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBundle {
    pub score: f64,
    pub score_bias_u: f64,
    pub score_bias_i: f64,
    pub score_bias: f64,
    pub feedback_kind: FeedbackKind,
}

impl ScoreBundle {
    pub fn compute(
        model: &MfModel,
        reps: &ConfounderReps,
        user: usize,
        item: usize,
        kind: FeedbackKind,
        composition: Composition,
    ) -> Result<Self> {
        model.check_ids(user, item)?;
        reps.check_ids(user, item)?;
        let score = model.score_unchecked(user, item);
        let score_bias_u = score_bias_user(reps.users.row(user), model.items.row(item))?;
        let score_bias_i = score_bias_item(reps.items.row(item), model.users.row(user))?;
        Ok(ScoreBundle {
            score,
            score_bias_u,
            score_bias_i,
            score_bias: compose_bias(score, score_bias_u, score_bias_i, kind, composition),
            feedback_kind: kind,
        })
    }
}
