//! Single-hidden-layer VAE with a decomposed, α-weighted KL term, used to
//! pretrain user-side and item-side confounder representations.
//!
//! The KL of the aggregate posterior is split into index-code mutual
//! information, total correlation and dimension-wise KL. All three are
//! estimated on a minibatch with stratified importance weights: a sample's
//! own posterior gets weight `1/N` and each of the `M - 1` other batch
//! members gets `(N - 1) / (N (M - 1))`, where `N` is the dataset size.
//! When `M == N` every weight is `1/N` and the aggregate posterior is exact.

use std::fs;
use std::path::Path;

use log::{debug, info};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{interaction_matrix, Axis as DataAxis, InteractionMatrix, Split};
use crate::error::{Error, Result};
use crate::optim::Adam;

pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 20.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub alpha: f64,
    pub latent_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            alpha: 5.0,
            latent_dim: 64,
            hidden: 200,
            lr: 1e-3,
            epochs: 100,
            batch: 128,
            seed: 0,
        }
    }
}

/// Diagonal Gaussian posterior over the latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mu: Array1<f64>,
    pub logvar: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlTerms {
    pub index_code_mi: f64,
    pub total_correlation: f64,
    pub dimension_kl: f64,
}

/// Parameter tensors in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tensor {
    EncW,
    EncB,
    MuW,
    MuB,
    LvW,
    LvB,
    DecW1,
    DecB1,
    DecW2,
    DecB2,
}

const TENSORS: [Tensor; 10] = [
    Tensor::EncW,
    Tensor::EncB,
    Tensor::MuW,
    Tensor::MuB,
    Tensor::LvW,
    Tensor::LvB,
    Tensor::DecW1,
    Tensor::DecB1,
    Tensor::DecW2,
    Tensor::DecB2,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Dims {
    input: usize,
    hidden: usize,
    latent: usize,
}

impl Dims {
    fn shape(self, t: Tensor) -> (usize, usize) {
        let Dims { input, hidden, latent } = self;
        match t {
            Tensor::EncW => (hidden, input),
            Tensor::EncB => (1, hidden),
            Tensor::MuW | Tensor::LvW => (latent, hidden),
            Tensor::MuB | Tensor::LvB => (1, latent),
            Tensor::DecW1 => (hidden, latent),
            Tensor::DecB1 => (1, hidden),
            Tensor::DecW2 => (input, hidden),
            Tensor::DecB2 => (1, input),
        }
    }

    fn len(self) -> usize {
        TENSORS
            .iter()
            .map(|&t| {
                let (r, c) = self.shape(t);
                r * c
            })
            .sum()
    }

    fn offset(self, t: Tensor) -> usize {
        TENSORS
            .iter()
            .take_while(|&&x| x != t)
            .map(|&x| {
                let (r, c) = self.shape(x);
                r * c
            })
            .sum()
    }
}

/// Read-only views of the ten parameter tensors.
struct Params<'a> {
    enc_w: ArrayView2<'a, f64>,
    enc_b: ArrayView1<'a, f64>,
    mu_w: ArrayView2<'a, f64>,
    mu_b: ArrayView1<'a, f64>,
    lv_w: ArrayView2<'a, f64>,
    lv_b: ArrayView1<'a, f64>,
    dec_w1: ArrayView2<'a, f64>,
    dec_b1: ArrayView1<'a, f64>,
    dec_w2: ArrayView2<'a, f64>,
    dec_b2: ArrayView1<'a, f64>,
}

struct ParamsMut<'a> {
    enc_w: ArrayViewMut2<'a, f64>,
    enc_b: ArrayViewMut1<'a, f64>,
    mu_w: ArrayViewMut2<'a, f64>,
    mu_b: ArrayViewMut1<'a, f64>,
    lv_w: ArrayViewMut2<'a, f64>,
    lv_b: ArrayViewMut1<'a, f64>,
    dec_w1: ArrayViewMut2<'a, f64>,
    dec_b1: ArrayViewMut1<'a, f64>,
    dec_w2: ArrayViewMut2<'a, f64>,
    dec_b2: ArrayViewMut1<'a, f64>,
}

fn view<'a>(dims: Dims, buf: &'a [f64], t: Tensor) -> ArrayView2<'a, f64> {
    let (r, c) = dims.shape(t);
    let off = dims.offset(t);
    ArrayView2::from_shape((r, c), &buf[off..off + r * c]).expect("layout")
}

impl<'a> Params<'a> {
    fn new(dims: Dims, buf: &'a [f64]) -> Self {
        let row = |t| view(dims, buf, t).index_axis_move(Axis(0), 0);
        Params {
            enc_w: view(dims, buf, Tensor::EncW),
            enc_b: row(Tensor::EncB),
            mu_w: view(dims, buf, Tensor::MuW),
            mu_b: row(Tensor::MuB),
            lv_w: view(dims, buf, Tensor::LvW),
            lv_b: row(Tensor::LvB),
            dec_w1: view(dims, buf, Tensor::DecW1),
            dec_b1: row(Tensor::DecB1),
            dec_w2: view(dims, buf, Tensor::DecW2),
            dec_b2: row(Tensor::DecB2),
        }
    }
}

impl<'a> ParamsMut<'a> {
    fn new(dims: Dims, buf: &'a mut [f64]) -> Self {
        let mut rest = buf;
        let mut next = |t: Tensor| -> ArrayViewMut2<'a, f64> {
            let (r, c) = dims.shape(t);
            let (head, tail) = std::mem::take(&mut rest).split_at_mut(r * c);
            rest = tail;
            ArrayViewMut2::from_shape((r, c), head).expect("layout")
        };
        let row = |m: ArrayViewMut2<'a, f64>| m.index_axis_move(Axis(0), 0);
        ParamsMut {
            enc_w: next(Tensor::EncW),
            enc_b: row(next(Tensor::EncB)),
            mu_w: next(Tensor::MuW),
            mu_b: row(next(Tensor::MuB)),
            lv_w: next(Tensor::LvW),
            lv_b: row(next(Tensor::LvB)),
            dec_w1: next(Tensor::DecW1),
            dec_b1: row(next(Tensor::DecB1)),
            dec_w2: next(Tensor::DecW2),
            dec_b2: row(next(Tensor::DecB2)),
        }
    }
}

/// Encoder `input -> tanh hidden -> (mu, logvar)` and decoder
/// `latent -> tanh hidden -> Bernoulli logits`. Parameters live in one flat
/// buffer so the optimizer and gradient checks can treat them uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeBlock {
    dims: Dims,
    params: Vec<f64>,
}

impl VaeBlock {
    /// Gaussian weights with std `1/sqrt(fan_in)`, zero biases.
    pub fn new(input_dim: usize, hidden_dim: usize, latent_dim: usize, seed: u64) -> Self {
        let dims = Dims {
            input: input_dim,
            hidden: hidden_dim,
            latent: latent_dim,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_INIT);
        let mut params = vec![0.0; dims.len()];
        for t in [Tensor::EncW, Tensor::MuW, Tensor::LvW, Tensor::DecW1, Tensor::DecW2] {
            let (r, c) = dims.shape(t);
            let std = (1.0 / c as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let off = dims.offset(t);
            for p in &mut params[off..off + r * c] {
                *p = normal.sample(&mut rng);
            }
        }
        VaeBlock { dims, params }
    }

    /// Block with every parameter set to zero (useful for tests).
    pub fn zeros(input_dim: usize, hidden_dim: usize, latent_dim: usize) -> Self {
        let dims = Dims {
            input: input_dim,
            hidden: hidden_dim,
            latent: latent_dim,
        };
        VaeBlock {
            dims,
            params: vec![0.0; dims.len()],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.dims.hidden
    }

    pub fn latent_dim(&self) -> usize {
        self.dims.latent
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                context: "VAE parameters",
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        Ok(VaeBlock {
            dims: self.dims,
            params,
        })
    }

    fn views(&self) -> Params<'_> {
        Params::new(self.dims, &self.params)
    }

    /// Mutable access to the `mu` head bias, mainly for tests.
    pub fn mu_bias_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        ParamsMut::new(self.dims, &mut self.params).mu_b
    }

    /// Mutable access to the first encoder layer weights (hidden x input).
    pub fn encoder_weights_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ParamsMut::new(self.dims, &mut self.params).enc_w
    }

    pub fn save(&self, path: &Path, meta: &VaeConfig) -> Result<()> {
        let ckpt = VaeCheckpoint {
            input_dim: self.dims.input,
            hidden_dim: self.dims.hidden,
            latent_dim: self.dims.latent,
            seed: meta.seed,
            alpha: meta.alpha,
            params: self.params.clone(),
        };
        fs::write(path, serde_json::to_string(&ckpt)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: VaeCheckpoint = serde_json::from_str(&text)?;
        let block = VaeBlock::zeros(ckpt.input_dim, ckpt.hidden_dim, ckpt.latent_dim);
        let block = block.with_params(ckpt.params)?;
        if block.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                what: "VAE checkpoint parameter",
                at: path.display().to_string(),
            });
        }
        Ok(block)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VaeCheckpoint {
    input_dim: usize,
    hidden_dim: usize,
    latent_dim: usize,
    seed: u64,
    alpha: f64,
    params: Vec<f64>,
}

/// Posterior parameters for one input row.
pub fn encode(block: &VaeBlock, x: ArrayView1<'_, f64>) -> Result<LatentGaussian> {
    if x.len() != block.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "encode input",
            expected: block.input_dim(),
            actual: x.len(),
        });
    }
    let p = block.views();
    let h = (p.enc_w.dot(&x) + p.enc_b).mapv(f64::tanh);
    let mu = p.mu_w.dot(&h) + p.mu_b;
    let logvar = (p.lv_w.dot(&h) + p.lv_b).mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
    Ok(LatentGaussian { mu, logvar })
}

pub fn reparameterize(g: &LatentGaussian, eps: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if eps.len() != g.mu.len() {
        return Err(Error::DimensionMismatch {
            context: "reparameterize noise",
            expected: g.mu.len(),
            actual: eps.len(),
        });
    }
    let mut z = g.mu.clone();
    Zip::from(&mut z)
        .and(&g.logvar)
        .and(&eps)
        .for_each(|z, &lv, &e| *z += (0.5 * lv).exp() * e);
    Ok(z)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Negative Bernoulli log-likelihood of `x` under `logits`.
pub fn reconstruction_loss(logits: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>) -> Result<f64> {
    if logits.len() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "reconstruction_loss",
            expected: logits.len(),
            actual: x.len(),
        });
    }
    Ok(logits
        .iter()
        .zip(x.iter())
        .map(|(&l, &xi)| softplus(l) - xi * l)
        .sum())
}

#[inline]
fn log_normal(z: f64, mu: f64, logvar: f64) -> f64 {
    let d = z - mu;
    -0.5 * (LN_2PI + logvar + d * d * (-logvar).exp())
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, 1))` summed over dimensions.
pub fn analytic_kl(g: &LatentGaussian) -> f64 {
    g.mu.iter()
        .zip(g.logvar.iter())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Stratified log-mixture over the batch. `vals[own]` carries weight `1/N`,
/// every other entry `(N - 1) / (N (M - 1))`. Writes normalized weights into
/// `resp` when given.
fn log_mixture(vals: &[f64], own: usize, n_total: f64, resp: Option<&mut [f64]>) -> f64 {
    let m = vals.len() as f64;
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let own_e = (vals[own] - max).exp();
    let others: f64 = vals
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != own)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    // (N-1)·S/(M-1) keeps the all-equal case exact.
    let inner = own_e + (n_total - 1.0) * others / (m - 1.0);
    if let Some(resp) = resp {
        let w_other = (n_total - 1.0) / (m - 1.0);
        for (k, (r, &v)) in resp.iter_mut().zip(vals).enumerate() {
            let e = (v - max).exp();
            *r = if k == own { e } else { w_other * e } / inner;
        }
    }
    max + (inner.ln() - n_total.ln())
}

struct KlWork {
    terms: KlTerms,
    /// Gradients of `alpha*MI + TC + DK` w.r.t. mu, logvar and z.
    grads: Option<(Array2<f64>, Array2<f64>, Array2<f64>)>,
}

fn kl_core(
    mu: ArrayView2<'_, f64>,
    logvar: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    n_total: usize,
    alpha: f64,
    want_grad: bool,
) -> KlWork {
    let (m, d) = mu.dim();
    let n = n_total as f64;
    let inv_var = logvar.mapv(|lv| (-lv).exp());
    let mut sum_mi = 0.0;
    let mut sum_tc = 0.0;
    let mut sum_dk = 0.0;

    let mut grads = want_grad.then(|| {
        (
            Array2::<f64>::zeros((m, d)),
            Array2::<f64>::zeros((m, d)),
            Array2::<f64>::zeros((m, d)),
        )
    });

    let mut comp = Array2::<f64>::zeros((m, d));
    let mut joint = vec![0.0; m];
    let mut col = vec![0.0; m];
    let mut resp = vec![0.0; m];
    for a in 0..m {
        for k in 0..m {
            let mut s = 0.0;
            for j in 0..d {
                let l = log_normal(z[[a, j]], mu[[k, j]], logvar[[k, j]]);
                comp[[k, j]] = l;
                s += l;
            }
            joint[k] = s;
        }
        let own = joint[a];
        let log_qz = log_mixture(&joint, a, n, want_grad.then_some(&mut resp[..]));
        let mut log_marginals = 0.0;
        let mut log_prior = 0.0;
        for j in 0..d {
            for k in 0..m {
                col[k] = comp[[k, j]];
            }
            log_marginals += log_mixture(&col, a, n, None);
            log_prior += log_normal(z[[a, j]], 0.0, 0.0);
        }
        sum_mi += own - log_qz;
        sum_tc += log_qz - log_marginals;
        sum_dk += log_marginals - log_prior;

        if let Some((g_mu, g_lv, g_z)) = grads.as_mut() {
            // loss = mean_a [alpha*own + (1-alpha)*log_qz - log_prior]
            let scale = 1.0 / m as f64;
            for k in 0..m {
                let mut coef = (1.0 - alpha) * resp[k];
                if k == a {
                    coef += alpha;
                }
                let coef = coef * scale;
                if coef == 0.0 {
                    continue;
                }
                for j in 0..d {
                    let diff = z[[a, j]] - mu[[k, j]];
                    let t = diff * inv_var[[k, j]];
                    g_z[[a, j]] -= coef * t;
                    g_mu[[k, j]] += coef * t;
                    g_lv[[k, j]] += coef * 0.5 * (diff * t - 1.0);
                }
            }
            for j in 0..d {
                g_z[[a, j]] += scale * z[[a, j]];
            }
        }
    }
    let mf = m as f64;
    KlWork {
        terms: KlTerms {
            index_code_mi: sum_mi / mf,
            total_correlation: sum_tc / mf,
            dimension_kl: sum_dk / mf,
        },
        grads,
    }
}

/// Minibatch estimates of the three KL terms from one `z` sample per
/// posterior. `n_total` is the size of the dataset the batch was drawn from.
pub fn kl_decompose(
    batch: &[LatentGaussian],
    z_samples: &[Array1<f64>],
    n_total: usize,
) -> Result<KlTerms> {
    let m = batch.len();
    if m < 2 {
        return Err(Error::InvalidValue(
            "kl_decompose needs at least two posteriors".into(),
        ));
    }
    if n_total < m {
        return Err(Error::InvalidValue(format!(
            "n_total ({n_total}) smaller than batch ({m})"
        )));
    }
    if z_samples.len() != m {
        return Err(Error::DimensionMismatch {
            context: "kl_decompose samples",
            expected: m,
            actual: z_samples.len(),
        });
    }
    let d = batch[0].mu.len();
    let mut mu = Array2::zeros((m, d));
    let mut lv = Array2::zeros((m, d));
    let mut z = Array2::zeros((m, d));
    for (r, (g, zs)) in batch.iter().zip(z_samples).enumerate() {
        for (context, len) in [("posterior mu", g.mu.len()), ("posterior logvar", g.logvar.len()), ("z sample", zs.len())] {
            if len != d {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: d,
                    actual: len,
                });
            }
        }
        mu.row_mut(r).assign(&g.mu);
        lv.row_mut(r).assign(&g.logvar);
        z.row_mut(r).assign(zs);
    }
    Ok(kl_core(mu.view(), lv.view(), z.view(), n_total, 1.0, false).terms)
}

pub fn kl_alpha(t: &KlTerms, alpha: f64) -> f64 {
    alpha * t.index_code_mi + t.total_correlation + t.dimension_kl
}

/// Forward activations for a batch.
struct Forward {
    h: Array2<f64>,
    mu: Array2<f64>,
    lv: Array2<f64>,
    lv_free: Array2<bool>,
    z: Array2<f64>,
    g: Array2<f64>,
    logits: Array2<f64>,
}

fn forward(block: &VaeBlock, x: ArrayView2<'_, f64>, eps: ArrayView2<'_, f64>) -> Forward {
    let p = block.views();
    let h = (x.dot(&p.enc_w.t()) + p.enc_b).mapv(f64::tanh);
    let mu = h.dot(&p.mu_w.t()) + p.mu_b;
    let lv_pre = h.dot(&p.lv_w.t()) + p.lv_b;
    let lv_free = lv_pre.mapv(|v| v > LOGVAR_MIN && v < LOGVAR_MAX);
    let lv = lv_pre.mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
    let mut z = mu.clone();
    Zip::from(&mut z)
        .and(&lv)
        .and(&eps)
        .for_each(|z, &lv, &e| *z += (0.5 * lv).exp() * e);
    let g = (z.dot(&p.dec_w1.t()) + p.dec_b1).mapv(f64::tanh);
    let logits = g.dot(&p.dec_w2.t()) + p.dec_b2;
    Forward {
        h,
        mu,
        lv,
        lv_free,
        z,
        g,
        logits,
    }
}

/// Loss pieces of one batch evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    pub reconstruction: f64,
    pub kl: KlTerms,
    pub total: f64,
}

fn check_batch(block: &VaeBlock, x: ArrayView2<'_, f64>, eps: ArrayView2<'_, f64>, n_total: usize) -> Result<()> {
    if x.nrows() < 2 {
        return Err(Error::InvalidValue(
            "VAE loss needs a batch of at least two rows".into(),
        ));
    }
    if x.ncols() != block.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "VAE batch width",
            expected: block.input_dim(),
            actual: x.ncols(),
        });
    }
    if eps.dim() != (x.nrows(), block.latent_dim()) {
        return Err(Error::DimensionMismatch {
            context: "VAE noise shape",
            expected: x.nrows() * block.latent_dim(),
            actual: eps.len(),
        });
    }
    if n_total < x.nrows() {
        return Err(Error::InvalidValue(format!(
            "n_total ({n_total}) smaller than batch ({})",
            x.nrows()
        )));
    }
    Ok(())
}

fn batch_loss(fw: &Forward, x: ArrayView2<'_, f64>, kl: KlTerms, alpha: f64) -> VaeLoss {
    let m = x.nrows() as f64;
    let recon: f64 = fw
        .logits
        .iter()
        .zip(x.iter())
        .map(|(&l, &xi)| softplus(l) - xi * l)
        .sum::<f64>()
        / m;
    VaeLoss {
        reconstruction: recon,
        kl,
        total: recon + kl_alpha(&kl, alpha),
    }
}

/// Mean reconstruction loss plus the α-weighted KL, for rows `x` and
/// reparameterization noise `eps` (one row per input row).
pub fn vae_loss(
    block: &VaeBlock,
    x: ArrayView2<'_, f64>,
    alpha: f64,
    eps: ArrayView2<'_, f64>,
    n_total: usize,
) -> Result<VaeLoss> {
    check_batch(block, x, eps, n_total)?;
    let fw = forward(block, x, eps);
    let kl = kl_core(fw.mu.view(), fw.lv.view(), fw.z.view(), n_total, alpha, false).terms;
    Ok(batch_loss(&fw, x, kl, alpha))
}

/// Loss and its gradient with respect to the flat parameter buffer.
pub fn vae_loss_grad(
    block: &VaeBlock,
    x: ArrayView2<'_, f64>,
    alpha: f64,
    eps: ArrayView2<'_, f64>,
    n_total: usize,
) -> Result<(VaeLoss, Vec<f64>)> {
    check_batch(block, x, eps, n_total)?;
    let fw = forward(block, x, eps);
    let work = kl_core(fw.mu.view(), fw.lv.view(), fw.z.view(), n_total, alpha, true);
    let loss = batch_loss(&fw, x, work.terms, alpha);
    let (d_mu_kl, d_lv_kl, d_z_kl) = work.grads.expect("requested");

    let p = block.views();
    let mut grad = vec![0.0; block.params.len()];
    let mut gp = ParamsMut::new(block.dims, &mut grad);
    let m = x.nrows() as f64;

    // decoder
    let d_logits = (fw.logits.mapv(crate::model::sigmoid) - x) / m;
    gp.dec_w2.assign(&d_logits.t().dot(&fw.g));
    gp.dec_b2.assign(&d_logits.sum_axis(Axis(0)));
    let mut d_gpre = d_logits.dot(&p.dec_w2);
    Zip::from(&mut d_gpre).and(&fw.g).for_each(|d, &g| *d *= 1.0 - g * g);
    gp.dec_w1.assign(&d_gpre.t().dot(&fw.z));
    gp.dec_b1.assign(&d_gpre.sum_axis(Axis(0)));
    let d_z = d_gpre.dot(&p.dec_w1) + d_z_kl;

    // reparameterization and clamp
    let d_mu = &d_z + &d_mu_kl;
    let mut d_lv = d_lv_kl;
    Zip::from(&mut d_lv)
        .and(&d_z)
        .and(&fw.lv)
        .and(&eps)
        .and(&fw.lv_free)
        .for_each(|dl, &dz, &lv, &e, &free| {
            *dl = if free { *dl + dz * 0.5 * (0.5 * lv).exp() * e } else { 0.0 };
        });

    // encoder
    gp.mu_w.assign(&d_mu.t().dot(&fw.h));
    gp.mu_b.assign(&d_mu.sum_axis(Axis(0)));
    gp.lv_w.assign(&d_lv.t().dot(&fw.h));
    gp.lv_b.assign(&d_lv.sum_axis(Axis(0)));
    let mut d_hpre = d_mu.dot(&p.mu_w) + d_lv.dot(&p.lv_w);
    Zip::from(&mut d_hpre).and(&fw.h).for_each(|d, &h| *d *= 1.0 - h * h);
    gp.enc_w.assign(&d_hpre.t().dot(&x));
    gp.enc_b.assign(&d_hpre.sum_axis(Axis(0)));
    Ok((loss, grad))
}

fn standard_normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut *rng))
}

/// Row-index batches for one epoch; a trailing singleton joins the previous
/// batch because the estimators need two rows.
fn epoch_batches(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch.max(2)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(tail);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainedVae {
    pub block: VaeBlock,
    /// Mean batch loss per epoch, starting with the untrained model.
    pub curve: Vec<f64>,
}

/// Adam training of a fresh block on the rows of `matrix`.
pub fn train_vae(matrix: &InteractionMatrix, cfg: &VaeConfig) -> Result<TrainedVae> {
    let rows = matrix.rows.view();
    let n = rows.nrows();
    if n < 2 || rows.ncols() == 0 {
        return Err(Error::InvalidValue(
            "VAE training needs at least two rows and one column".into(),
        ));
    }
    let mut block = VaeBlock::new(rows.ncols(), cfg.hidden, cfg.latent_dim, cfg.seed);
    let mut adam = Adam::new(block.params.len(), cfg.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(STREAM_NOISE);

    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let batches = epoch_batches(&order, cfg.batch);
        let mut total = 0.0;
        for idx in &batches {
            let x = rows.select(Axis(0), idx);
            let eps = standard_normal_matrix(&mut noise_rng, idx.len(), cfg.latent_dim);
            let (loss, grad) = vae_loss_grad(&block, x.view(), cfg.alpha, eps.view(), n)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    what: "VAE loss",
                    at: format!(
                        "epoch {epoch} (recon {}, mi {}, tc {}, dim_kl {})",
                        loss.reconstruction,
                        loss.kl.index_code_mi,
                        loss.kl.total_correlation,
                        loss.kl.dimension_kl
                    ),
                });
            }
            total += loss.total;
            // epoch 0 only measures the initial model
            if epoch > 0 {
                adam.step(&mut block.params, &grad);
            }
        }
        let mean = total / batches.len() as f64;
        debug!("vae epoch {epoch}: loss {mean:.5}");
        curve.push(mean);
    }
    info!(
        "vae trained ({} rows, alpha {}): loss {:.4} -> {:.4}",
        n,
        cfg.alpha,
        curve[0],
        curve[curve.len() - 1]
    );
    Ok(TrainedVae { block, curve })
}

/// KL terms of a trained block over all rows at once (batch = dataset, so
/// the aggregate posterior is exact), one noise draw per row from `seed`.
pub fn full_data_kl(block: &VaeBlock, matrix: &InteractionMatrix, seed: u64) -> Result<KlTerms> {
    let rows = matrix.rows.view();
    let n = rows.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_NOISE);
    let eps = standard_normal_matrix(&mut rng, n, block.latent_dim());
    Ok(vae_loss(block, rows, 1.0, eps.view(), n)?.kl)
}

/// Frozen per-user and per-item confounder vectors (posterior means).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderReps {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl ConfounderReps {
    pub fn dim(&self) -> usize {
        self.users.ncols()
    }

    pub(crate) fn check_ids(&self, user: usize, item: usize) -> Result<()> {
        if user >= self.users.nrows() {
            return Err(Error::OutOfRange {
                kind: "confounder user row",
                id: user,
                n: self.users.nrows(),
            });
        }
        if item >= self.items.nrows() {
            return Err(Error::OutOfRange {
                kind: "confounder item row",
                id: item,
                n: self.items.nrows(),
            });
        }
        Ok(())
    }

    /// JSON with a header (`n_users`, `n_items`, `dim`) and two row-major
    /// matrices.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = RepsFile {
            header: RepsHeader {
                n_users: self.users.nrows(),
                n_items: self.items.nrows(),
                dim: self.dim(),
            },
            users: self.users.iter().copied().collect(),
            items: self.items.iter().copied().collect(),
        };
        fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: RepsFile = serde_json::from_str(&text)?;
        let h = file.header;
        let shape = |rows: usize, data: Vec<f64>, context| {
            let len = data.len();
            Array2::from_shape_vec((rows, h.dim), data).map_err(|_| Error::DimensionMismatch {
                context,
                expected: rows * h.dim,
                actual: len,
            })
        };
        Ok(ConfounderReps {
            users: shape(h.n_users, file.users, "confounder user matrix")?,
            items: shape(h.n_items, file.items, "confounder item matrix")?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RepsHeader {
    n_users: usize,
    n_items: usize,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RepsFile {
    header: RepsHeader,
    users: Vec<f64>,
    items: Vec<f64>,
}

fn posterior_means(block: &VaeBlock, matrix: &InteractionMatrix) -> Result<Array2<f64>> {
    if matrix.n_cols() != block.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "confounder extraction input",
            expected: block.input_dim(),
            actual: matrix.n_cols(),
        });
    }
    let mut out = Array2::zeros((matrix.n_rows(), block.latent_dim()));
    for (r, row) in matrix.rows.outer_iter().enumerate() {
        out.row_mut(r).assign(&encode(block, row)?.mu);
    }
    Ok(out)
}

/// Posterior means of every user row under the user block and every item
/// row under the item block. No sampling.
pub fn extract_confounders(
    user_block: &VaeBlock,
    item_block: &VaeBlock,
    by_user: &InteractionMatrix,
    by_item: &InteractionMatrix,
    mf_dim: usize,
) -> Result<ConfounderReps> {
    for block in [user_block, item_block] {
        if block.latent_dim() != mf_dim {
            return Err(Error::DimensionMismatch {
                context: "VAE latent dim vs MF embedding dim",
                expected: mf_dim,
                actual: block.latent_dim(),
            });
        }
    }
    let reps = ConfounderReps {
        users: posterior_means(user_block, by_user)?,
        items: posterior_means(item_block, by_item)?,
    };
    if reps.users.iter().chain(reps.items.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "confounder representation",
            at: "extraction".into(),
        });
    }
    Ok(reps)
}

/// Both stage-one models and the representations they produce.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub user: TrainedVae,
    pub item: TrainedVae,
    pub reps: ConfounderReps,
}

/// Trains the user-side VAE on rows of the user-item matrix and the
/// item-side VAE on its transpose, then extracts posterior means.
pub fn pretrain_confounders(split: &Split, cfg: &VaeConfig) -> Result<Pretrained> {
    let by_user = interaction_matrix(split, DataAxis::ByUser);
    let by_item = interaction_matrix(split, DataAxis::ByItem);
    let user = train_vae(&by_user, cfg)?;
    let item = train_vae(&by_item, cfg)?;
    let reps = extract_confounders(&user.block, &item.block, &by_user, &by_item, cfg.latent_dim)?;
    Ok(Pretrained { user, item, reps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn random_block(input: usize, hidden: usize, latent: usize, seed: u64) -> VaeBlock {
        let mut b = VaeBlock::new(input, hidden, latent, seed);
        // non-zero biases so every path is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        for p in b.params_mut() {
            *p += rng.gen_range(-0.1..0.1);
        }
        b
    }

    #[test]
    fn zero_weights_give_bias_mean() {
        let mut b = VaeBlock::zeros(3, 4, 2);
        b.mu_bias_mut().assign(&array![0.5, -1.5]);
        let g = encode(&b, array![1.0, 0.0, 1.0].view()).unwrap();
        assert_eq!(g.mu, array![0.5, -1.5]);
        assert_eq!(g.logvar, array![0.0, 0.0]);
    }

    #[test]
    fn zero_input_uses_hidden_bias() {
        let b = random_block(5, 3, 2, 4);
        let p = b.views();
        let x = Array1::zeros(5);
        let g = encode(&b, x.view()).unwrap();
        let expected = p.mu_w.dot(&p.enc_b.mapv(f64::tanh)) + p.mu_b;
        assert_eq!(g.mu, expected);
    }

    #[test]
    fn encode_matches_straight_line_oracle() {
        let b = random_block(6, 5, 3, 11);
        let p = b.views();
        let x = array![1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let g = encode(&b, x.view()).unwrap();
        let mut h = [0.0; 5];
        for (r, hr) in h.iter_mut().enumerate() {
            let mut acc = p.enc_b[r];
            for c in 0..6 {
                acc += p.enc_w[[r, c]] * x[c];
            }
            *hr = acc.tanh();
        }
        for k in 0..3 {
            let mut mu = p.mu_b[k];
            let mut lv = p.lv_b[k];
            for r in 0..5 {
                mu += p.mu_w[[k, r]] * h[r];
                lv += p.lv_w[[k, r]] * h[r];
            }
            assert!((g.mu[k] - mu).abs() < 1e-12);
            assert!((g.logvar[k] - lv.clamp(LOGVAR_MIN, LOGVAR_MAX)).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let b = VaeBlock::zeros(3, 2, 2);
        assert!(encode(&b, array![1.0, 0.0].view()).is_err());
    }

    #[test]
    fn logvar_is_clamped() {
        let mut b = VaeBlock::zeros(1, 1, 1);
        let dims = b.dims;
        let off = dims.offset(Tensor::LvB);
        b.params_mut()[off] = 50.0;
        let g = encode(&b, array![0.0].view()).unwrap();
        assert_eq!(g.logvar[0], LOGVAR_MAX);
    }

    #[test]
    fn reparameterize_cases() {
        let g = LatentGaussian {
            mu: array![1.0, -2.0],
            logvar: array![0.0, 0.0],
        };
        assert_eq!(reparameterize(&g, array![0.0, 0.0].view()).unwrap(), g.mu);
        assert_eq!(
            reparameterize(&g, array![0.5, 1.0].view()).unwrap(),
            array![1.5, -1.0]
        );
    }

    #[test]
    fn reparameterize_sample_mean() {
        let g = LatentGaussian {
            mu: array![0.3, -1.0, 2.0],
            logvar: array![0.0, 1.0, -2.0],
        };
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sum = Array1::<f64>::zeros(3);
        for _ in 0..n {
            let eps = Array1::from_shape_simple_fn(3, || StandardNormal.sample(&mut rng));
            sum += &reparameterize(&g, eps.view()).unwrap();
        }
        let mean = sum / n as f64;
        for k in 0..3 {
            let sigma = (0.5 * g.logvar[k]).exp();
            assert!((mean[k] - g.mu[k]).abs() < 4.0 * sigma / (n as f64).sqrt());
        }
    }

    #[test]
    fn reconstruction_cases() {
        let x = array![1.0, 0.0, 1.0, 1.0];
        let zero = Array1::zeros(4);
        let l = reconstruction_loss(zero.view(), x.view()).unwrap();
        assert!((l - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let big = array![40.0];
        assert!(reconstruction_loss(big.view(), array![1.0].view()).unwrap() < 1e-15);

        let logits = array![0.3, -2.0, 5.0, -0.1];
        let oracle: f64 = logits
            .iter()
            .zip(x.iter())
            .map(|(&l, &xi): (&f64, &f64)| {
                let p = 1.0 / (1.0 + (-l).exp());
                -(xi * p.ln() + (1.0 - xi) * (1.0 - p).ln())
            })
            .sum();
        let got = reconstruction_loss(logits.view(), x.view()).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn kl_alpha_arithmetic() {
        let t = KlTerms {
            index_code_mi: 2.0,
            total_correlation: 3.0,
            dimension_kl: 5.0,
        };
        assert_eq!(kl_alpha(&t, 10.0), 28.0);
        assert_eq!(kl_alpha(&t, 1.0), 10.0);
        assert_eq!(kl_alpha(&t, 0.0), 8.0);
    }

    #[test]
    fn standard_normal_posteriors_have_zero_dimension_kl() {
        let m = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<_> = (0..m)
            .map(|_| LatentGaussian {
                mu: Array1::zeros(4),
                logvar: Array1::zeros(4),
            })
            .collect();
        let z: Vec<_> = (0..m)
            .map(|_| Array1::from_shape_simple_fn(4, || StandardNormal.sample(&mut rng)))
            .collect();
        for n_total in [16, 100] {
            let t = kl_decompose(&batch, &z, n_total).unwrap();
            assert_eq!(t.dimension_kl, 0.0);
            assert_eq!(analytic_kl(&batch[0]), 0.0);
        }
    }

    #[test]
    fn single_latent_dimension_has_no_total_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch: Vec<_> = (0..10)
            .map(|_| LatentGaussian {
                mu: array![rng.gen_range(-2.0..2.0)],
                logvar: array![rng.gen_range(-1.0..1.0)],
            })
            .collect();
        let z: Vec<_> = batch
            .iter()
            .map(|g| reparameterize(g, array![rng.gen_range(-1.0..1.0)].view()).unwrap())
            .collect();
        let t = kl_decompose(&batch, &z, 50).unwrap();
        assert!(t.total_correlation.abs() <= 1e-10);
    }

    #[test]
    fn decompose_needs_two_posteriors() {
        let g = LatentGaussian {
            mu: array![0.0],
            logvar: array![0.0],
        };
        assert!(kl_decompose(std::slice::from_ref(&g), &[array![0.0]], 10).is_err());
        assert!(kl_decompose(&[g.clone(), g], &[array![0.0], array![0.0]], 1).is_err());
    }

    #[test]
    fn epoch_batches_merge_trailing_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = epoch_batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let block = random_block(7, 5, 3, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((6, 7), || if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let eps = standard_normal_matrix(&mut rng, 6, 3);
        for alpha in [0.0, 1.0, 5.0] {
            let (_, grad) = vae_loss_grad(&block, x.view(), alpha, eps.view(), 40).unwrap();
            let h = 1e-5;
            for idx in 0..block.params().len() {
                let mut plus = block.params().to_vec();
                plus[idx] += h;
                let mut minus = block.params().to_vec();
                minus[idx] -= h;
                let fp = vae_loss(&block.with_params(plus).unwrap(), x.view(), alpha, eps.view(), 40).unwrap().total;
                let fm = vae_loss(&block.with_params(minus).unwrap(), x.view(), alpha, eps.view(), 40).unwrap().total;
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-6);
                assert!(err < 1e-4, "param {idx} alpha {alpha}: fd {fd} analytic {}", grad[idx]);
            }
        }
    }

    #[test]
    fn reps_roundtrip() {
        let reps = ConfounderReps {
            users: Array2::from_shape_fn((3, 2), |(r, c)| (r * 2 + c) as f64 * 0.1),
            items: Array2::from_shape_fn((4, 2), |(r, c)| -((r + c) as f64)),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reps.json");
        reps.save(&path).unwrap();
        assert_eq!(ConfounderReps::load(&path).unwrap(), reps);
    }
}
