//! Classical imputers: per-series channel means, last observation carried
//! forward, and independent per-channel GP regression over time.
//!
//! All three take a masked batch and return a flat `[n][T][d]` array in
//! which observed entries are copied through unchanged.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesBatch;
use crate::error::{Error, Result};
use crate::kernels::{stabilized_cholesky, KernelSpec};

fn channel(
    batch: &TimeSeriesBatch,
    i: usize,
    c: usize,
) -> impl Iterator<Item = (usize, Option<f64>)> + '_ {
    let (v, m, d) = (batch.series_values(i), batch.series_mask(i), batch.dim());
    (0..batch.t_len()).map(move |t| (t, (!m[t * d + c]).then(|| v[t * d + c])))
}

fn per_series(batch: &TimeSeriesBatch, f: impl Fn(usize, &mut [f64]) + Sync) -> Vec<f64> {
    let s = batch.series_len();
    let mut out = batch.values().to_vec();
    out.par_chunks_mut(s.max(1))
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
    out
}

/// Missing entries take the mean of the observed entries of their channel
/// in the same series, or 0 when the channel has none.
pub fn mean_impute(batch: &TimeSeriesBatch) -> Vec<f64> {
    let d = batch.dim();
    per_series(batch, |i, out| {
        let mask = batch.series_mask(i);
        for c in 0..d {
            let (sum, count) = channel(batch, i, c)
                .filter_map(|(_, v)| v)
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            let fill = if count > 0 { sum / count as f64 } else { 0.0 };
            for t in 0..batch.t_len() {
                if mask[t * d + c] {
                    out[t * d + c] = fill;
                }
            }
        }
    })
}

/// Missing entries take the last observed value of their channel; entries
/// before the first observation take the first observation, and channels
/// with no observations are filled with 0.
pub fn forward_impute(batch: &TimeSeriesBatch) -> Vec<f64> {
    let d = batch.dim();
    per_series(batch, |i, out| {
        for c in 0..d {
            let mut last = channel(batch, i, c).find_map(|(_, v)| v).unwrap_or(0.0);
            for (t, v) in channel(batch, i, c) {
                match v {
                    Some(v) => last = v,
                    None => out[t * d + c] = last,
                }
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpRegressionSpec {
    pub kernel: KernelSpec,
    /// Observation noise variance.
    pub noise_variance: f64,
    /// Candidate lengthscales as multiples of the median time step. When
    /// non-empty, each channel of each series uses the candidate with the
    /// highest marginal likelihood; when empty, `kernel.lengthscale` is
    /// used as is.
    pub lengthscale_grid: Vec<f64>,
}

impl Default for GpRegressionSpec {
    fn default() -> Self {
        GpRegressionSpec {
            kernel: KernelSpec::rbf(1.0, 1.0),
            noise_variance: 1e-2,
            lengthscale_grid: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
        }
    }
}

impl GpRegressionSpec {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.noise_variance >= 0.0) {
            return Err(Error::invalid("GP noise_variance must be >= 0"));
        }
        if self.lengthscale_grid.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::invalid("lengthscale_grid entries must be positive"));
        }
        Ok(())
    }
}

/// GP posterior at `query` given noisy observations `(obs_t, obs_y)`, with
/// zero prior mean. Returns means, variances (latent function, without
/// observation noise) and the log marginal likelihood of the observations.
pub fn gp_posterior(
    kernel: &KernelSpec,
    noise_variance: f64,
    obs_t: &[f64],
    obs_y: &[f64],
    query: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if obs_t.len() != obs_y.len() {
        return Err(Error::shape(
            "gp_posterior",
            "observation times and values differ in length",
        ));
    }
    if obs_t.is_empty() {
        let var = query.iter().map(|&q| kernel.eval(q, q)).collect();
        return Ok((vec![0.0; query.len()], var, 0.0));
    }
    let k = kernel.cross(obs_t, obs_t);
    let (chol, _) = stabilized_cholesky(&k, noise_variance + kernel.jitter_value())?;
    let y = DVector::from_column_slice(obs_y);
    let alpha = chol.solve(&y);
    let log_det: f64 = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>();
    let log_ml =
        -0.5 * (y.dot(&alpha) + log_det + obs_t.len() as f64 * (2.0 * std::f64::consts::PI).ln());
    let kq = kernel.cross(obs_t, query);
    let mean = kq.tr_mul(&alpha);
    let v = chol
        .l()
        .solve_lower_triangular(&kq)
        .expect("Cholesky factor is invertible");
    let var = query
        .iter()
        .enumerate()
        .map(|(j, &q)| (kernel.eval(q, q) - v.column(j).norm_squared()).max(0.0))
        .collect();
    Ok((mean.as_slice().to_vec(), var, log_ml))
}

fn median_step(ts: &[f64]) -> f64 {
    let mut steps: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    if steps.is_empty() {
        return 1.0;
    }
    steps.sort_by(f64::total_cmp);
    steps[steps.len() / 2]
}

/// Per-channel GP regression imputation. Returns the imputed values and the
/// posterior variance (zero at observed entries). Channels without
/// observations fall back to the prior: mean 0, variance `k(τ, τ)`.
pub fn gp_channel_impute(
    batch: &TimeSeriesBatch,
    spec: &GpRegressionSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    let (t_len, d) = (batch.t_len(), batch.dim());
    let ts = batch.timestamps();
    let step = median_step(ts);
    let kernels: Vec<KernelSpec> = if spec.lengthscale_grid.is_empty() {
        vec![spec.kernel.clone()]
    } else {
        spec.lengthscale_grid
            .iter()
            .map(|g| spec.kernel.clone().with_lengthscale(g * step))
            .collect()
    };
    let per_series: Vec<(Vec<f64>, Vec<f64>)> = (0..batch.n())
        .into_par_iter()
        .map(|i| -> Result<_> {
            let mut values = batch.series_values(i).to_vec();
            let mut var = vec![0.0; t_len * d];
            for c in 0..d {
                let (obs, miss): (Vec<_>, Vec<_>) =
                    channel(batch, i, c).partition(|(_, v)| v.is_some());
                if miss.is_empty() {
                    continue;
                }
                let obs_t: Vec<f64> = obs.iter().map(|&(t, _)| ts[t]).collect();
                let obs_y: Vec<f64> = obs.iter().map(|&(_, v)| v.unwrap()).collect();
                let query: Vec<f64> = miss.iter().map(|&(t, _)| ts[t]).collect();
                let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
                for kern in &kernels {
                    let fit = gp_posterior(kern, spec.noise_variance, &obs_t, &obs_y, &query)?;
                    if best.as_ref().is_none_or(|b| fit.2 > b.2) {
                        best = Some(fit);
                    }
                }
                let (mean, v, _) = best.expect("at least one kernel");
                for (j, &(t, _)) in miss.iter().enumerate() {
                    values[t * d + c] = mean[j];
                    var[t * d + c] = v[j];
                }
            }
            Ok((values, var))
        })
        .collect::<Result<_>>()?;
    let (values, var): (Vec<Vec<f64>>, Vec<Vec<f64>>) = per_series.into_iter().unzip();
    Ok((values.concat(), var.concat()))
}
