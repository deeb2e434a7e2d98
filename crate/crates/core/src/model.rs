//! The masked β-ELBO, Adam training loop and posterior-mean imputation.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stable_softplus, Tape, Tensor, Var};
use crate::data::{shuffled_indices, TimeSeriesBatch};
use crate::error::{Error, Result};
use crate::kernels::{gram, GramFactor, KernelSpec};
use crate::nets::{Likelihood, ModelParams};
use crate::rng::{child_rng, derive_seed, rng_from, stream, Rng};
use crate::structured_gaussian::{BandKlOp, BandSolveOp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the KL term.
    pub beta: f64,
    pub seed: u64,
    /// Latent GP prior kernel; ignored by variants with a standard-normal
    /// prior.
    pub kernel: KernelSpec,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 64,
            beta: 0.8,
            seed: 0,
            kernel: KernelSpec::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1e4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(
                "learning_rate must be finite and non-negative",
            ));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid("beta must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam decay rates must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("adam_eps and clip_norm must be positive"));
        }
        self.kernel.validate()
    }
}

/// Latent prior for the model's variant on the given time grid.
pub fn latent_prior(
    params: &ModelParams,
    kernel: &KernelSpec,
    timestamps: &[f64],
) -> Result<Arc<GramFactor>> {
    let prior = if params.spec.variant.gp_prior() {
        gram(kernel, timestamps)?
    } else {
        GramFactor::identity(timestamps.to_vec())?
    };
    Ok(Arc::new(prior))
}

/// Standard-normal reparameterization noise `[n, T, k]`.
pub fn sample_noise(rng: &mut Rng, n: usize, t_len: usize, k: usize) -> Tensor {
    let data = (0..n * t_len * k)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(vec![n, t_len, k], data).expect("shape matches data")
}

#[derive(Clone, Debug)]
pub struct ElboValue {
    /// Mean over series of `reconstruction - beta * kl`.
    pub objective: f64,
    /// Mean over series of the (masked) log-likelihood of one posterior
    /// sample.
    pub reconstruction: f64,
    /// Mean over series of the KL divergence to the prior, summed over
    /// latent dimensions.
    pub kl: f64,
    /// Gradient of `objective` for every parameter tensor, in layout order.
    pub gradients: Vec<Tensor>,
}

struct ElboGraph {
    loss: Var,
    recon: f64,
    kl: f64,
}

fn build_elbo(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &crate::nets::ParamVars,
    batch: &TimeSeriesBatch,
    prior: &Arc<GramFactor>,
    noise: &Tensor,
) -> Result<ElboGraph> {
    let (n, t_len, d, k) = (batch.n(), batch.t_len(), batch.dim(), params.latent_dim());
    if d != params.data_dim() {
        return Err(Error::shape(
            "elbo",
            format!("batch has d={d}, model expects {}", params.data_dim()),
        ));
    }
    if noise.shape() != [n, t_len, k] {
        return Err(Error::shape(
            "elbo",
            format!("noise {:?}, expected [{n}, {t_len}, {k}]", noise.shape()),
        ));
    }
    if prior.len() != t_len {
        return Err(Error::shape(
            "elbo",
            format!("prior over {} steps, series have {t_len}", prior.len()),
        ));
    }
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let x = tape.constant(Tensor::new(vec![n, t_len, d], batch.values().to_vec())?);
    let enc = params.encoder_forward(tape, pv, x)?;
    let eps = tape.constant(noise.clone());
    let dev = tape.custom(Arc::new(BandSolveOp), &[enc.diag, enc.off, eps])?;
    let z = tape.add(enc.means, dev)?;
    let out = params.decoder_forward(tape, pv, z)?;

    let masked = params.spec.variant.masked_likelihood();
    let weights: Vec<f64> = batch
        .mask()
        .iter()
        .map(|&m| if masked && m { 0.0 } else { 1.0 })
        .collect();
    let count: f64 = weights.iter().sum();
    let w = tape.constant(Tensor::new(vec![n, t_len, d], weights)?);
    let loglik = match params.likelihood() {
        Likelihood::Gaussian { sigma2 } => {
            let diff = tape.sub(out, x)?;
            let sq = tape.square(diff)?;
            let wsq = tape.mul(sq, w)?;
            let s = tape.sum(wsq)?;
            let s = tape.scale(s, -0.5 / sigma2)?;
            tape.add_scalar(s, -0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() * count)?
        }
        Likelihood::Bernoulli => {
            let xa = tape.mul(x, out)?;
            let sp = tape.softplus(out)?;
            let lp = tape.sub(xa, sp)?;
            let wlp = tape.mul(lp, w)?;
            tape.sum(wlp)?
        }
    };
    let kl = tape.custom(
        Arc::new(BandKlOp::new(prior.clone())),
        &[enc.means, enc.diag, enc.off],
    )?;
    let kl = tape.sum(kl)?;
    let weighted_kl = tape.scale(kl, params.beta)?;
    let total = tape.sub(loglik, weighted_kl)?;
    let loss = tape.scale(total, -1.0 / n as f64)?;
    Ok(ElboGraph {
        loss,
        recon: tape.value(loglik).item() / n as f64,
        kl: tape.value(kl).item() / n as f64,
    })
}

/// Masked β-ELBO of `batch` under `params.beta`, estimated with one
/// reparameterized posterior sample per series (`noise`, `[n, T, k]`), and
/// its gradient for every weight.
pub fn elbo(
    batch: &TimeSeriesBatch,
    params: &ModelParams,
    prior: &Arc<GramFactor>,
    noise: &Tensor,
) -> Result<ElboValue> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let g = build_elbo(&mut tape, params, &pv, batch, prior, noise)?;
    let objective = -tape.value(g.loss).item();
    let mut grads = tape.backward(g.loss)?;
    let gradients = pv
        .vars
        .iter()
        .map(|&v| {
            let mut t = grads.take(v);
            t.data_mut().iter_mut().for_each(|x| *x = -*x);
            t
        })
        .collect();
    Ok(ElboValue {
        objective,
        reconstruction: g.recon,
        kl: g.kl,
        gradients,
    })
}

/// Objective only, without gradient bookkeeping.
pub fn elbo_value(
    batch: &TimeSeriesBatch,
    params: &ModelParams,
    prior: &Arc<GramFactor>,
    noise: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = params.register_frozen(&mut tape);
    let g = build_elbo(&mut tape, params, &pv, batch, prior, noise)?;
    Ok(-tape.value(g.loss).item())
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Ascent step on `grads` (gradients of the objective being maximized).
    fn update(&mut self, params: &mut ModelParams, grads: &[Tensor], cfg: &TrainConfig) {
        self.step += 1;
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clip = if norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let w = params.tensors[i].data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                let gj = gj * clip;
                self.m[i][j] = b1 * self.m[i][j] + (1.0 - b1) * gj;
                self.v[i][j] = b2 * self.v[i][j] + (1.0 - b2) * gj * gj;
                let mh = self.m[i][j] / c1;
                let vh = self.v[i][j] / c2;
                w[j] += cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean training objective per epoch.
    pub history: Vec<f64>,
}

/// Fits `initial` to `data` with Adam. Shuffling and reparameterization
/// noise are drawn from streams derived from `config.seed`, so two runs
/// with the same inputs agree bit for bit.
pub fn train(
    data: &TimeSeriesBatch,
    initial: ModelParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_callback(data, initial, config, |_, _| {})
}

/// [`train`], calling `on_epoch(epoch, mean_objective)` after each epoch.
pub fn train_with_callback(
    data: &TimeSeriesBatch,
    initial: ModelParams,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.n() == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    let mut params = initial;
    params.beta = config.beta;
    let prior = latent_prior(&params, &config.kernel, data.timestamps())?;
    let mut adam = Adam::new(&params);
    let noise_seed = derive_seed(config.seed, stream::ELBO_NOISE);
    let shuffle_seed = derive_seed(config.seed, stream::SHUFFLE);
    let k = params.latent_dim();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let order = shuffled_indices(data.n(), &mut child_rng(shuffle_seed, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = data.select(chunk)?;
            let noise = sample_noise(
                &mut child_rng(noise_seed, step),
                chunk.len(),
                data.t_len(),
                k,
            );
            let diverged = |reason: String, last: &ModelParams| Error::Diverged {
                epoch,
                step: step as usize,
                reason,
                last_good: Box::new(last.clone()),
            };
            let value = match elbo(&batch, &params, &prior, &noise) {
                Ok(v) => v,
                Err(e) if e.is_numeric() => return Err(diverged(e.to_string(), &params)),
                Err(e) => return Err(e),
            };
            if !value.objective.is_finite() || !value.gradients.iter().all(Tensor::is_finite) {
                return Err(diverged("non-finite objective or gradient".into(), &params));
            }
            total += value.objective * chunk.len() as f64;
            let before = params.tensors.clone();
            adam.update(&mut params, &value.gradients, config);
            if !params.is_finite() {
                params.tensors = before;
                return Err(diverged("non-finite weights after update".into(), &params));
            }
            step += 1;
        }
        let mean = total / data.n() as f64;
        log::info!("epoch {}: objective {mean:.4}", epoch + 1);
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(TrainOutcome { params, history })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputationResult {
    /// `[n][T][d]`; observed entries are copied from the input, missing
    /// ones hold the decoded posterior mean.
    pub values: Vec<f64>,
    /// Standard deviation of the decoded output over posterior draws
    /// (`n - 1` denominator); zero at observed entries and when
    /// `n_samples == 1`.
    pub std: Vec<f64>,
    pub n_samples: usize,
}

const IMPUTE_CHUNK: usize = 64;

/// Raw decoder outputs at the posterior mean, plus `n_samples` decoded
/// posterior draws when requested, for one chunk of series.
fn decode_chunk(
    params: &ModelParams,
    batch: &TimeSeriesBatch,
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, t_len, d, k) = (batch.n(), batch.t_len(), batch.dim(), params.latent_dim());
    let posts = params.encode_batch(batch.values(), batch.mask(), n, t_len)?;
    let mut mean_z = vec![0.0; n * t_len * k];
    for (b, q) in posts.iter().enumerate() {
        for t in 0..t_len {
            for j in 0..k {
                mean_z[(b * t_len + t) * k + j] = q.means[(j, t)];
            }
        }
    }
    let raw = params
        .decode_raw(Tensor::new(vec![n, t_len, k], mean_z)?)?
        .into_data();
    let link = params.output_link();
    let mut std = vec![0.0; n * t_len * d];
    if n_samples > 1 {
        let mut sum = vec![0.0; std.len()];
        let mut sum_sq = vec![0.0; std.len()];
        // one shared noise stream, so identical series get identical draws
        let mut rngs: Vec<Rng> = (0..n)
            .map(|_| rng_from(derive_seed(seed, stream::IMPUTE_NOISE)))
            .collect();
        for _ in 0..n_samples {
            let mut z = vec![0.0; n * t_len * k];
            for (b, q) in posts.iter().enumerate() {
                for j in 0..k {
                    let eps: Vec<f64> = (0..t_len)
                        .map(|_| StandardNormal.sample(&mut rngs[b]))
                        .collect();
                    for (t, v) in q.sample(j, &eps)?.into_iter().enumerate() {
                        z[(b * t_len + t) * k + j] = v;
                    }
                }
            }
            let out = params.decode_raw(Tensor::new(vec![n, t_len, k], z)?)?;
            for (i, &o) in out.data().iter().enumerate() {
                let p = link(o);
                sum[i] += p;
                sum_sq[i] += p * p;
            }
        }
        let s = n_samples as f64;
        for i in 0..std.len() {
            let var = (sum_sq[i] - sum[i] * sum[i] / s) / (s - 1.0);
            std[i] = var.max(0.0).sqrt();
        }
    }
    Ok((raw, std))
}

fn chunked<T: Send>(
    batch: &TimeSeriesBatch,
    f: impl Fn(&TimeSeriesBatch) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let idx: Vec<usize> = (0..batch.n()).collect();
    idx.par_chunks(IMPUTE_CHUNK)
        .map(|c| f(&batch.select(c)?))
        .collect()
}

/// Posterior-mean imputation with sampling-based uncertainty.
pub fn impute(
    params: &ModelParams,
    batch: &TimeSeriesBatch,
    n_samples: usize,
    seed: u64,
) -> Result<ImputationResult> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be >= 1"));
    }
    if batch.dim() != params.data_dim() {
        return Err(Error::shape(
            "impute",
            format!(
                "batch has d={}, model expects {}",
                batch.dim(),
                params.data_dim()
            ),
        ));
    }
    let parts = chunked(batch, |b| decode_chunk(params, b, n_samples, seed))?;
    let link = params.output_link();
    let mut values = Vec::with_capacity(batch.values().len());
    let mut std = Vec::with_capacity(values.capacity());
    for (raw, s) in parts {
        values.extend(raw.into_iter().map(link));
        std.extend(s);
    }
    for ((v, s), (&x, &m)) in values
        .iter_mut()
        .zip(std.iter_mut())
        .zip(batch.values().iter().zip(batch.mask()))
    {
        if !m {
            *v = x;
            *s = 0.0;
        }
    }
    Ok(ImputationResult {
        values,
        std,
        n_samples,
    })
}

/// Mean negative log-likelihood per entry flagged in `eval_mask`, under the
/// decoder distribution at the posterior-mean latent trajectory.
pub fn nll_missing(
    params: &ModelParams,
    batch: &TimeSeriesBatch,
    truth: &[f64],
    eval_mask: &[bool],
) -> Result<f64> {
    if truth.len() != batch.values().len() || eval_mask.len() != truth.len() {
        return Err(Error::shape(
            "nll_missing",
            "truth and mask must match the batch",
        ));
    }
    let count = eval_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::invalid("no entries to evaluate"));
    }
    let raw: Vec<f64> = chunked(batch, |b| decode_chunk(params, b, 1, 0).map(|(r, _)| r))?.concat();
    let lik = params.likelihood();
    let total: f64 = raw
        .iter()
        .zip(truth)
        .zip(eval_mask)
        .filter(|(_, &m)| m)
        .map(|((&a, &x), _)| entry_nll(lik, a, x))
        .sum();
    Ok(total / count as f64)
}

/// Negative log-likelihood of `x` given the raw decoder output `a`.
pub fn entry_nll(lik: Likelihood, a: f64, x: f64) -> f64 {
    match lik {
        Likelihood::Gaussian { sigma2 } => {
            0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() + (x - a).powi(2) / (2.0 * sigma2)
        }
        Likelihood::Bernoulli => stable_softplus(a) - x * a,
    }
}
