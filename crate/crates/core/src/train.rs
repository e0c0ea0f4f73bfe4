//! Stage-two training: the plain fit, the confounded fit and their
//! γ-weighted sum, optimized with Adam and early-stopped on validation
//! NDCG@10.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeedbackKind, NegativeSampler, Split, Triple};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{evaluate, LabelSource};
use crate::model::{compose_bias, sigmoid, Composition, MfModel};
use crate::optim::Adam;
use crate::vae::ConfounderReps;

const PURPOSE_INIT: u64 = 1;
const PURPOSE_SAMPLE: u64 = 2;
const PURPOSE_SHUFFLE: u64 = 3;

pub const IPS_MAX_WEIGHT: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub l2: f64,
    pub dim: usize,
    pub epochs: usize,
    pub patience: usize,
    pub neg_ratio: usize,
    pub batch: usize,
    pub seed: u64,
    pub feedback_kind: FeedbackKind,
    pub composition: Composition,
    /// Regularize whole embedding tables instead of the rows in the batch.
    pub full_l2: bool,
    /// Popularity exponent for the IPS baseline; `None` disables weighting.
    pub ips_eta: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.0,
            lr: 1e-3,
            l2: 1e-6,
            dim: 64,
            epochs: 500,
            patience: 10,
            neg_ratio: 4,
            batch: 1024,
            seed: 0,
            feedback_kind: FeedbackKind::Implicit,
            composition: Composition::Product,
            full_l2: false,
            ips_eta: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.l2 < 0.0 {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if self.dim == 0 || self.batch == 0 || self.neg_ratio == 0 {
            return Err(Error::Config("dim, batch and neg_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Loss settings shared by the loss functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub gamma: f64,
    pub l2: f64,
    pub kind: FeedbackKind,
    pub composition: Composition,
    pub full_l2: bool,
}

impl From<&TrainConfig> for LossSpec {
    fn from(cfg: &TrainConfig) -> Self {
        LossSpec {
            gamma: cfg.gamma,
            l2: cfg.l2,
            kind: cfg.feedback_kind,
            composition: cfg.composition,
            full_l2: cfg.full_l2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub normal: f64,
    pub bias: f64,
    pub total: f64,
}

/// Per-sample criterion and its derivative w.r.t. the prediction input.
#[inline]
fn criterion(pred: f64, label: f64, kind: FeedbackKind) -> (f64, f64) {
    match kind {
        FeedbackKind::Implicit => {
            let loss = pred.max(0.0) + (-pred.abs()).exp().ln_1p() - label * pred;
            (loss, sigmoid(pred) - label)
        }
        FeedbackKind::Explicit => {
            let d = pred - label;
            (d * d, 2.0 * d)
        }
    }
}

fn check_batch(model: &MfModel, reps: Option<&ConfounderReps>, batch: &[Triple]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidValue("empty batch".into()));
    }
    for t in batch {
        model.check_ids(t.user, t.item)?;
        if let Some(r) = reps {
            r.check_ids(t.user, t.item)?;
        }
    }
    if let Some(r) = reps {
        if r.dim() != model.dim() {
            return Err(Error::DimensionMismatch {
                context: "confounder dim vs MF dim",
                expected: model.dim(),
                actual: r.dim(),
            });
        }
    }
    Ok(())
}

#[inline]
fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense gradient with the same layout as [`MfModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct MfGrad {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl MfGrad {
    pub fn zeros_like(m: &MfModel) -> Self {
        MfGrad {
            users: Array2::zeros(m.users.raw_dim()),
            items: Array2::zeros(m.items.raw_dim()),
        }
    }

    fn clear(&mut self) {
        self.users.fill(0.0);
        self.items.fill(0.0);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.users.iter().chain(self.items.iter()).copied().collect()
    }
}

/// `loss_normal + gamma * loss_bias`, optionally accumulating the gradient.
/// With `gamma == 0` the confounded term is neither computed nor needed.
pub fn slfr_loss_grad(
    model: &MfModel,
    reps: Option<&ConfounderReps>,
    batch: &[Triple],
    weights: Option<&[f64]>,
    spec: &LossSpec,
    mut grad: Option<&mut MfGrad>,
) -> Result<LossParts> {
    let use_bias = spec.gamma != 0.0;
    if use_bias && reps.is_none() {
        return Err(Error::Config("gamma > 0 requires confounder representations".into()));
    }
    check_batch(model, reps.filter(|_| use_bias), batch)?;
    if let Some(w) = weights {
        if w.len() != batch.len() {
            return Err(Error::DimensionMismatch {
                context: "sample weights",
                expected: batch.len(),
                actual: w.len(),
            });
        }
    }
    if let Some(g) = grad.as_deref_mut() {
        g.clear();
    }
    let inv_b = 1.0 / batch.len() as f64;
    let dim = model.dim();
    let mut normal = 0.0;
    let mut bias = 0.0;
    let mut reg = 0.0;
    let product = matches!(
        (spec.kind, spec.composition),
        (FeedbackKind::Implicit, Composition::Product)
    );
    let reg_coef = if spec.full_l2 { 0.0 } else { 2.0 * spec.l2 * inv_b };
    let users = model.users.as_slice().expect("standard layout");
    let items = model.items.as_slice().expect("standard layout");
    let rep_rows = reps.filter(|_| use_bias).map(|r| {
        (
            r.users.as_slice().expect("standard layout"),
            r.items.as_slice().expect("standard layout"),
        )
    });
    let mut grad_rows = grad.as_deref_mut().map(|g| {
        (
            g.users.as_slice_mut().expect("standard layout"),
            g.items.as_slice_mut().expect("standard layout"),
        )
    });
    for (b, t) in batch.iter().enumerate() {
        let w_u = &users[t.user * dim..(t.user + 1) * dim];
        let v_i = &items[t.item * dim..(t.item + 1) * dim];
        let s = dot_slice(w_u, v_i);
        let weight = weights.map_or(1.0, |w| w[b]);
        let (l, dl) = criterion(s, t.label, spec.kind);
        normal += weight * l;
        let mut coef_v = weight * dl * inv_b; // d/dw_u = coef_v * v_i
        let mut coef_w = coef_v; // d/dv_i = coef_w * w_u
        // per-dimension factors on r_i (user grad) and r_u (item grad)
        let mut rep_coef = None;
        if let Some((ru_all, ri_all)) = rep_rows {
            let r_u = &ru_all[t.user * dim..(t.user + 1) * dim];
            let r_i = &ri_all[t.item * dim..(t.item + 1) * dim];
            let sb_u = dot_slice(r_u, v_i);
            let sb_i = dot_slice(r_i, w_u);
            let sb = compose_bias(s, sb_u, sb_i, spec.kind, spec.composition);
            let (lb, dlb) = criterion(sb, t.label, spec.kind);
            bias += lb;
            let g = spec.gamma * dlb * inv_b;
            if product {
                coef_v += g * sb_i * sb_u;
                coef_w += g * sb_i * sb_u;
                rep_coef = Some((r_u, r_i, g * s * sb_u, g * s * sb_i));
            } else {
                coef_v += g;
                coef_w += g;
                rep_coef = Some((r_u, r_i, g, g));
            }
        }
        if !spec.full_l2 && spec.l2 != 0.0 {
            reg += dot_slice(w_u, w_u) + dot_slice(v_i, v_i);
        }
        if let Some((gu_all, gi_all)) = grad_rows.as_mut() {
            let gu_row = &mut gu_all[t.user * dim..(t.user + 1) * dim];
            let gi_row = &mut gi_all[t.item * dim..(t.item + 1) * dim];
            match rep_coef {
                None => {
                    for k in 0..dim {
                        gu_row[k] += coef_v * v_i[k] + reg_coef * w_u[k];
                        gi_row[k] += coef_w * w_u[k] + reg_coef * v_i[k];
                    }
                }
                Some((r_u, r_i, cu, ci)) => {
                    for k in 0..dim {
                        gu_row[k] += coef_v * v_i[k] + reg_coef * w_u[k] + cu * r_i[k];
                        gi_row[k] += coef_w * w_u[k] + reg_coef * v_i[k] + ci * r_u[k];
                    }
                }
            }
        }
    }
    let mut reg_total = reg * spec.l2 * inv_b;
    if spec.full_l2 && spec.l2 != 0.0 {
        let sq: f64 = model.users.iter().chain(model.items.iter()).map(|x| x * x).sum();
        reg_total = spec.l2 * sq;
        if let Some(g) = grad {
            g.users.scaled_add(2.0 * spec.l2, &model.users);
            g.items.scaled_add(2.0 * spec.l2, &model.items);
        }
    }
    let normal = normal * inv_b + reg_total;
    let bias = bias * inv_b;
    let total = if use_bias { normal + spec.gamma * bias } else { normal };
    Ok(LossParts {
        normal,
        bias: if use_bias { bias } else { 0.0 },
        total,
    })
}

/// Mean BCE (implicit) or squared error (explicit) of the plain score, plus
/// `l2` times the squared norms of the embeddings in the batch.
pub fn loss_normal(model: &MfModel, batch: &[Triple], kind: FeedbackKind, l2: f64) -> Result<f64> {
    let spec = LossSpec {
        gamma: 0.0,
        l2,
        kind,
        composition: Composition::Product,
        full_l2: false,
    };
    Ok(slfr_loss_grad(model, None, batch, None, &spec, None)?.normal)
}

/// The same criterion applied to the confounder-composed score. No
/// regularization term.
pub fn loss_bias(
    model: &MfModel,
    reps: &ConfounderReps,
    batch: &[Triple],
    kind: FeedbackKind,
    composition: Composition,
) -> Result<f64> {
    let spec = LossSpec {
        gamma: 1.0,
        l2: 0.0,
        kind,
        composition,
        full_l2: false,
    };
    Ok(slfr_loss_grad(model, Some(reps), batch, None, &spec, None)?.bias)
}

pub fn loss_slfr(
    model: &MfModel,
    reps: Option<&ConfounderReps>,
    batch: &[Triple],
    cfg: &TrainConfig,
) -> Result<f64> {
    cfg.validate()?;
    Ok(slfr_loss_grad(model, reps, batch, None, &LossSpec::from(cfg), None)?.total)
}

/// Popularity-power inverse propensity weights,
/// `((pop_i + 1) / max_pop)^(-eta)` clipped to `[1, 100]`.
pub fn ips_reweight(batch: &[Triple], item_popularity: &[usize], eta: f64) -> Vec<f64> {
    let max_pop = item_popularity.iter().copied().max().unwrap_or(0) as f64 + 1.0;
    batch
        .iter()
        .map(|t| {
            let pop = item_popularity.get(t.item).copied().unwrap_or(0) as f64 + 1.0;
            (pop / max_pop).powf(-eta).clamp(1.0, IPS_MAX_WEIGHT)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_normal: f64,
    pub loss_bias: f64,
    pub loss_total: f64,
    #[serde(rename = "valid_recall@10")]
    pub valid_recall10: f64,
    #[serde(rename = "valid_ndcg@10")]
    pub valid_ndcg10: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MfModel,
    pub log: Vec<EpochLog>,
    /// Epoch of the returned checkpoint (0 = initialization).
    pub best_epoch: usize,
    pub best_valid_ndcg: f64,
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Minibatch Adam on `loss_normal + gamma * loss_bias`. After each epoch the
/// model is scored on the validation items; training stops once NDCG@10 has
/// not improved for `patience` epochs and the best checkpoint is returned.
/// Without validation users the final model is returned.
pub fn train_slfr(split: &Split, reps: Option<&ConfounderReps>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.gamma > 0.0 {
        let r = reps.ok_or_else(|| Error::Config("gamma > 0 requires confounder representations".into()))?;
        let shapes = [
            (r.users.nrows(), split.n_users(), "confounder user rows"),
            (r.items.nrows(), split.n_items(), "confounder item rows"),
            (r.dim(), cfg.dim, "confounder dim vs MF dim"),
        ];
        for (actual, expected, context) in shapes {
            if actual != expected {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    actual,
                });
            }
        }
    }
    let reps = reps.filter(|_| cfg.gamma > 0.0);
    let spec = LossSpec::from(cfg);
    let mut model = MfModel::random(
        split.n_users(),
        split.n_items(),
        cfg.dim,
        derive_seed(cfg.seed, PURPOSE_INIT),
    );
    let sampler = NegativeSampler::new(split, cfg.neg_ratio, derive_seed(cfg.seed, PURPOSE_SAMPLE))?;
    let shuffle_seed = derive_seed(cfg.seed, PURPOSE_SHUFFLE);
    let popularity = cfg.ips_eta.map(|_| split.train.item_popularity());
    let has_valid = split.valid.iter().any(|v| !v.is_empty());

    let mut adam_users = Adam::new(model.users.len(), cfg.lr);
    let mut adam_items = Adam::new(model.items.len(), cfg.lr);
    let mut grad = MfGrad::zeros_like(&model);
    let mut log = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut triples: Vec<Triple> = sampler.epoch(epoch).collect();
        if triples.is_empty() {
            return Err(Error::InvalidValue("no training positives".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        rng.set_stream(epoch as u64);
        triples.shuffle(&mut rng);

        let mut sums = LossParts::default();
        for batch in triples.chunks(cfg.batch) {
            let weights = match (cfg.ips_eta, &popularity) {
                (Some(eta), Some(pop)) => Some(ips_reweight(batch, pop, eta)),
                _ => None,
            };
            let parts = slfr_loss_grad(&model, reps, batch, weights.as_deref(), &spec, Some(&mut grad))?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good: Some(Box::new(best)),
                });
            }
            let n = batch.len() as f64;
            sums.normal += parts.normal * n;
            sums.bias += parts.bias * n;
            sums.total += parts.total * n;
            adam_users.step(model.users.as_slice_mut().expect("standard layout"), grad.users.as_slice().expect("standard layout"));
            adam_items.step(model.items.as_slice_mut().expect("standard layout"), grad.items.as_slice().expect("standard layout"));
        }
        let n = triples.len() as f64;
        let (recall, ndcg) = if has_valid {
            let r = evaluate(&model, split, &[10], LabelSource::Valid)?;
            (r.recall(10), r.ndcg(10))
        } else {
            (f64::NAN, f64::NAN)
        };
        let entry = EpochLog {
            epoch,
            loss_normal: sums.normal / n,
            loss_bias: sums.bias / n,
            loss_total: sums.total / n,
            valid_recall10: recall,
            valid_ndcg10: ndcg,
            seconds: start.elapsed().as_secs_f64(),
        };
        debug!(
            "epoch {epoch}: loss {:.5} (normal {:.5}, bias {:.5}) valid ndcg@10 {:.5}",
            entry.loss_total, entry.loss_normal, entry.loss_bias, ndcg
        );
        log.push(entry);

        if !has_valid {
            best = model.clone();
            best_epoch = epoch;
            continue;
        }
        if ndcg > best_ndcg {
            best_ndcg = ndcg;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    info!(
        "trained gamma={} for {} epochs, best epoch {best_epoch} (valid ndcg@10 {best_ndcg:.5})",
        cfg.gamma,
        log.len()
    );
    Ok(TrainOutcome {
        model: best,
        log,
        best_epoch,
        best_valid_ndcg: best_ndcg,
    })
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Denominator floor of the relative error, so coordinates whose gradient is
/// zero compare on absolute error below this scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central finite differences on `n_coords` randomly chosen coordinates (all
/// of them when there are fewer). Relative error is
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn gradient_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient_check",
            expected: params.len(),
            actual: analytic.len(),
        });
    }
    let coords: Vec<usize> = if params.len() <= n_coords {
        (0..params.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = index::sample(&mut rng, params.len(), n_coords).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for &c in &coords {
        let orig = probe[c];
        probe[c] = orig + step;
        let fp = loss(&probe)?;
        probe[c] = orig - step;
        let fm = loss(&probe)?;
        probe[c] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[c];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(err);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coords_checked: coords.len(),
    })
}

/// Saves the resolved config as pretty JSON.
pub fn save_config<C: Serialize>(path: &Path, cfg: &C) -> Result<()> {
    let json = serde_json::to_string_pretty(cfg)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{leave_one_out_split, Dataset, Interaction};
    use rand::Rng;

    fn batch() -> Vec<Triple> {
        vec![
            Triple { user: 0, item: 1, label: 1.0 },
            Triple { user: 1, item: 0, label: 0.0 },
            Triple { user: 2, item: 2, label: 1.0 },
            Triple { user: 0, item: 2, label: 0.0 },
        ]
    }

    fn random_model(seed: u64) -> MfModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MfModel {
            users: Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0)),
            items: Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0)),
        }
    }

    fn random_reps(seed: u64) -> ConfounderReps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConfounderReps {
            users: Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0)),
            items: Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn bce_at_zero_score() {
        let m = MfModel {
            users: Array2::zeros((1, 2)),
            items: Array2::zeros((1, 2)),
        };
        let b = [Triple { user: 0, item: 0, label: 1.0 }];
        let l = loss_normal(&m, &b, FeedbackKind::Implicit, 0.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn mse_exact_fit_is_zero() {
        let m = MfModel {
            users: ndarray::array![[1.0, 2.0]],
            items: ndarray::array![[3.0, -1.0]],
        };
        let b = [Triple { user: 0, item: 0, label: 1.0 }];
        assert_eq!(loss_normal(&m, &b, FeedbackKind::Explicit, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn normal_matches_elementwise_oracle() {
        let m = random_model(3);
        let b = batch();
        let l2 = 0.01;
        let mut oracle = 0.0;
        for t in &b {
            let s: f64 = (0..4).map(|k| m.users[[t.user, k]] * m.items[[t.item, k]]).sum();
            let p = 1.0 / (1.0 + (-s).exp());
            oracle -= t.label * p.ln() + (1.0 - t.label) * (1.0 - p).ln();
            let norms: f64 = (0..4)
                .map(|k| m.users[[t.user, k]].powi(2) + m.items[[t.item, k]].powi(2))
                .sum();
            oracle += l2 * norms;
        }
        oracle /= b.len() as f64;
        let got = loss_normal(&m, &b, FeedbackKind::Implicit, l2).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn zero_reps_give_ln2() {
        let m = random_model(4);
        let reps = ConfounderReps {
            users: Array2::zeros((3, 4)),
            items: Array2::zeros((3, 4)),
        };
        let l = loss_bias(&m, &reps, &batch(), FeedbackKind::Implicit, Composition::Product).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn neutral_reps_reproduce_plain_loss() {
        // one-hot embeddings with reps chosen so r_u·v = r_i·w = 1
        let mut users = Array2::zeros((3, 4));
        let mut items = Array2::zeros((3, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for u in 0..3 {
            users[[u, 0]] = 1.0;
            users[[u, 1]] = rng.gen_range(-1.0..1.0);
        }
        for i in 0..3 {
            items[[i, 0]] = rng.gen_range(-1.0..1.0);
            items[[i, 2]] = 1.0;
        }
        let m = MfModel { users, items };
        let mut reps = ConfounderReps {
            users: Array2::zeros((3, 4)),
            items: Array2::zeros((3, 4)),
        };
        reps.users.column_mut(2).fill(1.0);
        reps.items.column_mut(0).fill(1.0);
        let b = batch();
        let plain = loss_normal(&m, &b, FeedbackKind::Implicit, 0.0).unwrap();
        let biased = loss_bias(&m, &reps, &b, FeedbackKind::Implicit, Composition::Product).unwrap();
        assert!((plain - biased).abs() < 1e-15);
    }

    #[test]
    fn gamma_linearity() {
        let m = random_model(6);
        let reps = random_reps(7);
        let b = batch();
        let cfg0 = TrainConfig { dim: 4, l2: 1e-3, ..Default::default() };
        let normal = loss_slfr(&m, Some(&reps), &b, &cfg0).unwrap();
        assert_eq!(normal, loss_normal(&m, &b, FeedbackKind::Implicit, 1e-3).unwrap());
        let bias = loss_bias(&m, &reps, &b, FeedbackKind::Implicit, Composition::Product).unwrap();
        for gamma in [0.5, 1.0, 2.0] {
            let cfg = TrainConfig { gamma, ..cfg0.clone() };
            let total = loss_slfr(&m, Some(&reps), &b, &cfg).unwrap();
            assert!((total - (normal + gamma * bias)).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_positive_needs_reps() {
        let m = random_model(1);
        let cfg = TrainConfig { gamma: 1.0, dim: 4, ..Default::default() };
        assert!(loss_slfr(&m, None, &batch(), &cfg).is_err());
    }

    #[test]
    fn doubling_l2_doubles_regularizer() {
        let m = random_model(8);
        let b = batch();
        let data = loss_normal(&m, &b, FeedbackKind::Implicit, 0.0).unwrap();
        let r1 = loss_normal(&m, &b, FeedbackKind::Implicit, 0.1).unwrap() - data;
        let r2 = loss_normal(&m, &b, FeedbackKind::Implicit, 0.2).unwrap() - data;
        assert!((r2 - 2.0 * r1).abs() < 1e-12);
    }

    fn check_grad(spec: LossSpec, weights: Option<&[f64]>) {
        let m = random_model(10);
        let reps = random_reps(11);
        let b = batch();
        let mut g = MfGrad::zeros_like(&m);
        slfr_loss_grad(&m, Some(&reps), &b, weights, &spec, Some(&mut g)).unwrap();
        let check = gradient_check(
            |p| {
                let mm = MfModel::from_flat(3, 3, 4, p)?;
                Ok(slfr_loss_grad(&mm, Some(&reps), &b, weights, &spec, None)?.total)
            },
            &m.to_flat(),
            &g.to_flat(),
            1e-4,
            200,
            0,
        )
        .unwrap();
        assert!(check.max_rel_error <= 1e-4, "{spec:?}: {check:?}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [FeedbackKind::Implicit, FeedbackKind::Explicit] {
            for composition in [Composition::Product, Composition::Sum] {
                for full_l2 in [false, true] {
                    for gamma in [0.0, 0.7] {
                        check_grad(
                            LossSpec { gamma, l2: 0.05, kind, composition, full_l2 },
                            None,
                        );
                    }
                }
            }
        }
        let w = [1.0, 3.0, 0.5, 2.0];
        check_grad(
            LossSpec {
                gamma: 0.0,
                l2: 0.01,
                kind: FeedbackKind::Implicit,
                composition: Composition::Product,
                full_l2: false,
            },
            Some(&w),
        );
    }

    #[test]
    fn gradient_check_on_quadratic() {
        let a = [3.0, -1.0, 0.5];
        let p = [0.2, 0.4, -0.7];
        let analytic: Vec<f64> = p.iter().zip(&a).map(|(x, c)| 2.0 * c * x).collect();
        let r = gradient_check(
            |x| Ok(x.iter().zip(&a).map(|(x, c)| c * x * x).sum()),
            &p,
            &analytic,
            1e-4,
            200,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8);
        assert_eq!(r.coords_checked, 3);
    }

    #[test]
    fn ips_weights() {
        let pop = [10, 0, 4];
        let b: Vec<Triple> = (0..3).map(|i| Triple { user: 0, item: i, label: 1.0 }).collect();
        assert_eq!(ips_reweight(&b, &pop, 0.0), vec![1.0; 3]);
        let w = ips_reweight(&b, &pop, 1.0);
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 11.0).abs() < 1e-12);
        let extreme = ips_reweight(&b, &pop, 10.0);
        assert!(extreme.iter().all(|&x| (1.0..=IPS_MAX_WEIGHT).contains(&x)));
        assert_eq!(extreme[1], IPS_MAX_WEIGHT);
    }

    fn toy_split(seed: u64) -> Split {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut interactions = Vec::new();
        for u in 0..30 {
            for i in 0..40 {
                if (u % 3 == i % 3 && rng.gen_bool(0.5)) || rng.gen_bool(0.05) {
                    interactions.push(Interaction {
                        user: u,
                        item: i,
                        value: 1.0,
                        timestamp: rng.gen_range(0..1000),
                    });
                }
            }
        }
        let d = Dataset::new(30, 40, interactions, FeedbackKind::Implicit).unwrap();
        leave_one_out_split(&d, seed).unwrap()
    }

    #[test]
    fn best_checkpoint_dominates_later_epochs() {
        let split = toy_split(1);
        let cfg = TrainConfig {
            dim: 8,
            epochs: 60,
            patience: 5,
            lr: 0.01,
            batch: 64,
            ..Default::default()
        };
        let out = train_slfr(&split, None, &cfg).unwrap();
        let best = out.log.iter().map(|e| e.valid_ndcg10).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_valid_ndcg, best);
        let after = &out.log[out.best_epoch..];
        assert!(after.iter().all(|e| e.valid_ndcg10 <= out.best_valid_ndcg));
        let check = evaluate(&out.model, &split, &[10], LabelSource::Valid).unwrap();
        assert_eq!(check.ndcg(10), out.best_valid_ndcg);
    }

    #[test]
    fn gamma_zero_ignores_reps() {
        let split = toy_split(2);
        let cfg = TrainConfig { dim: 4, epochs: 5, batch: 32, ..Default::default() };
        let reps = ConfounderReps {
            users: Array2::from_elem((30, 4), 0.3),
            items: Array2::from_elem((40, 4), -0.2),
        };
        let a = train_slfr(&split, None, &cfg).unwrap();
        let b = train_slfr(&split, Some(&reps), &cfg).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn reps_are_unchanged_by_training() {
        let split = toy_split(3);
        let reps = ConfounderReps {
            users: Array2::from_elem((30, 4), 0.3),
            items: Array2::from_elem((40, 4), 0.2),
        };
        let before = reps.clone();
        let cfg = TrainConfig { dim: 4, epochs: 3, gamma: 1.0, batch: 32, ..Default::default() };
        train_slfr(&split, Some(&reps), &cfg).unwrap();
        let moved: f64 = before
            .users
            .iter()
            .zip(reps.users.iter())
            .chain(before.items.iter().zip(reps.items.iter()))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert_eq!(moved, 0.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let split = toy_split(4);
        let bad = [
            TrainConfig { gamma: -1.0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { gamma: 1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(train_slfr(&split, None, &cfg).is_err());
        }
    }

    #[test]
    fn log_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = vec![EpochLog {
            epoch: 1,
            loss_normal: 0.5,
            loss_bias: 0.0,
            loss_total: 0.5,
            valid_recall10: 0.1,
            valid_ndcg10: 0.05,
            seconds: 0.01,
        }];
        write_log_csv(&path, &log).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "epoch,loss_normal,loss_bias,loss_total,valid_recall@10,valid_ndcg@10,seconds"
        ));
    }
}
