//! Missingness mechanisms: MCAR, spatially correlated frames, positively
//! and negatively temporally correlated channels, and value-dependent
//! (MNAR) masks. Masks are boolean arrays with `true` meaning missing.
//!
//! The GP-threshold mechanisms draw a zero-mean GP sample and hide the
//! entries above the quantile matching the target rate, so every mask hits
//! the rate up to rounding. The negatively correlated mechanism draws the
//! missing time steps of each channel from a determinantal point process.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::*;
use crate::data::TimeSeriesBatch;
use crate::error::{Error, Result};
use crate::kernels::rbf;
use crate::rng::{child_rng, derive_seed, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    #[default]
    Mcar,
    Spatial,
    TemporalPos,
    TemporalNeg,
    Mnar,
}

/// How MNAR splits entries into high and low values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighLowRule {
    /// High means `> 0.5` (binary or `[0, 1]` image data).
    #[default]
    Threshold,
    /// High means above the channel's median within the series.
    ChannelMedian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub mechanism: Mechanism,
    pub target_rate: f64,
    /// GP lengthscale for `spatial` (pixels) and `temporal_pos` (steps).
    pub lengthscale: f64,
    /// Width of the RBF similarity used by `temporal_neg`, in steps.
    pub dpp_strength: f64,
    /// How much likelier high values are to go missing under `mnar`.
    pub mnar_ratio: f64,
    pub mnar_rule: HighLowRule,
    /// Frame shape `[height, width]` for `spatial`; defaults to a square
    /// frame with `height * width = d`.
    pub frame_shape: Option<[usize; 2]>,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            mechanism: Mechanism::Mcar,
            target_rate: 0.6,
            lengthscale: 2.0,
            dpp_strength: 1.0,
            mnar_ratio: 2.0,
            mnar_rule: HighLowRule::Threshold,
            frame_shape: None,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.target_rate) {
            return Err(Error::invalid(format!(
                "target_rate {} outside [0, 1]",
                self.target_rate
            )));
        }
        if !(self.mnar_ratio > 0.0) {
            return Err(Error::invalid("mnar_ratio must be positive"));
        }
        if !(self.lengthscale > 0.0) {
            return Err(Error::invalid("lengthscale must be positive"));
        }
        if !(self.dpp_strength > 0.0) {
            return Err(Error::invalid("dpp_strength must be positive"));
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "missingness rate {rate} outside [0, 1]"
        )));
    }
    Ok(())
}

/// i.i.d. Bernoulli(`rate`) mask of `len` entries.
pub fn mcar(len: usize, rate: f64, rng: &mut Rng) -> Vec<bool> {
    (0..len).map(|_| rng.random::<f64>() < rate).collect()
}

/// `T x d` MCAR mask, row-major.
pub fn mcar_mask(t_len: usize, dim: usize, rate: f64, seed: u64) -> Result<Vec<bool>> {
    check_rate(rate)?;
    Ok(mcar(t_len * dim, rate, &mut crate::rng::rng_from(seed)))
}

/// Marks the `round(rate * len)` largest entries of `sample`.
fn top_quantile(sample: &[f64], rate: f64) -> Vec<bool> {
    let count = (rate * sample.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..sample.len()).collect();
    order.sort_by(|&a, &b| sample[b].total_cmp(&sample[a]).then(a.cmp(&b)));
    let mut out = vec![false; sample.len()];
    for &i in &order[..count] {
        out[i] = true;
    }
    out
}

/// Symmetric square root factor `V sqrt(max(λ, 0))` of an RBF Gram matrix
/// on `0..n`.
fn rbf_root(n: usize, lengthscale: f64) -> Result<DMatrix<f64>> {
    let lambda = 1.0 / (lengthscale * lengthscale);
    let k = DMatrix::from_fn(n, n, |i, j| rbf(i as f64 - j as f64, lambda));
    let eig = SymmetricEigen::try_new(k, 1e-14, 0)
        .ok_or_else(|| Error::Eigen(format!("RBF Gram matrix of size {n}")))?;
    let mut root = eig.eigenvectors;
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        root.column_mut(j).scale_mut(l.max(0.0).sqrt());
    }
    Ok(root)
}

pub const MAX_SPATIAL_SIDE: usize = 64;

fn gaussian_matrix(r: usize, c: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn spatial_frame(rows: &DMatrix<f64>, cols: &DMatrix<f64>, rate: f64, rng: &mut Rng) -> Vec<bool> {
    let (h, w) = (rows.nrows(), cols.nrows());
    let z = gaussian_matrix(h, w, rng);
    // separable covariance: X = R Z Cᵀ has cov(vec X) = (C Cᵀ) ⊗ (R Rᵀ)
    let x = rows * z * cols.transpose();
    let sample: Vec<f64> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .map(|(r, c)| x[(r, c)])
        .collect();
    top_quantile(&sample, rate)
}

/// One `height x width` frame (row-major) thresholded from a GP sample with
/// RBF covariance over pixel coordinates.
pub fn spatial_mask(
    height: usize,
    width: usize,
    lengthscale: f64,
    rate: f64,
    seed: u64,
) -> Result<Vec<bool>> {
    check_rate(rate)?;
    check_frame(height, width, lengthscale)?;
    let rows = rbf_root(height, lengthscale)?;
    let cols = rbf_root(width, lengthscale)?;
    Ok(spatial_frame(
        &rows,
        &cols,
        rate,
        &mut crate::rng::rng_from(seed),
    ))
}

fn check_frame(height: usize, width: usize, lengthscale: f64) -> Result<()> {
    if height == 0 || width == 0 || height > MAX_SPATIAL_SIDE || width > MAX_SPATIAL_SIDE {
        return Err(Error::invalid(format!(
            "spatial masks need 1..={MAX_SPATIAL_SIDE} pixels per side, got {height}x{width}"
        )));
    }
    if !(lengthscale > 0.0) {
        return Err(Error::invalid("spatial lengthscale must be positive"));
    }
    Ok(())
}

/// `T` independent spatial frames, flattened to `T x (height * width)`.
pub fn spatial_series_mask(
    t_len: usize,
    height: usize,
    width: usize,
    lengthscale: f64,
    rate: f64,
    seed: u64,
) -> Result<Vec<bool>> {
    check_rate(rate)?;
    check_frame(height, width, lengthscale)?;
    let rows = rbf_root(height, lengthscale)?;
    let cols = rbf_root(width, lengthscale)?;
    Ok((0..t_len)
        .flat_map(|t| spatial_frame(&rows, &cols, rate, &mut child_rng(seed, t as u64)))
        .collect())
}

fn transpose_channels(per_channel: Vec<Vec<bool>>, t_len: usize) -> Vec<bool> {
    let d = per_channel.len();
    let mut out = vec![false; t_len * d];
    for (c, col) in per_channel.into_iter().enumerate() {
        for (t, m) in col.into_iter().enumerate() {
            out[t * d + c] = m;
        }
    }
    out
}

/// `T x d` mask whose channels are thresholded draws of an RBF GP over
/// time steps, so gaps cluster in time.
pub fn temporal_pos_mask(
    t_len: usize,
    dim: usize,
    lengthscale: f64,
    rate: f64,
    seed: u64,
) -> Result<Vec<bool>> {
    check_rate(rate)?;
    if !(lengthscale > 0.0) {
        return Err(Error::invalid("temporal lengthscale must be positive"));
    }
    let root = rbf_root(t_len, lengthscale)?;
    let channels = (0..dim)
        .into_par_iter()
        .map(|c| {
            let mut rng = child_rng(seed, c as u64);
            let z = DVector::from_fn(t_len, |_, _| StandardNormal.sample(&mut rng));
            top_quantile((&root * z).as_slice(), rate)
        })
        .collect();
    Ok(transpose_channels(channels, t_len))
}

/// Eigendecomposition of an L-ensemble kernel, with negative eigenvalues
/// clamped to zero.
#[derive(Clone, Debug)]
pub struct DppKernel {
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl DppKernel {
    pub fn new(l: &DMatrix<f64>) -> Result<Self> {
        if l.nrows() != l.ncols() {
            return Err(Error::shape(
                "dpp",
                format!("L is {}x{}", l.nrows(), l.ncols()),
            ));
        }
        let asym = (l - l.transpose()).abs().max();
        if asym > 1e-10 * l.abs().max().max(1.0) {
            return Err(Error::invalid("DPP kernel must be symmetric"));
        }
        let eig = SymmetricEigen::try_new(l.clone(), 1e-14, 0)
            .ok_or_else(|| Error::Eigen(format!("DPP kernel of size {}", l.nrows())))?;
        let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if let Some(v) = eig
            .eigenvalues
            .iter()
            .find(|&&v| v < -1e-8 * scale.max(1.0))
        {
            return Err(Error::invalid(format!(
                "DPP kernel is not PSD (eigenvalue {v})"
            )));
        }
        Ok(DppKernel {
            eigenvalues: eig.eigenvalues.iter().map(|v| v.max(0.0)).collect(),
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Expected subset size of the ensemble `scale * L`.
    pub fn expected_size(&self, scale: f64) -> f64 {
        self.eigenvalues
            .iter()
            .map(|&l| scale * l / (1.0 + scale * l))
            .sum()
    }

    /// Draws a subset of the ensemble `scale * L` (spectral algorithm:
    /// pick eigenvectors independently, then sample items from the
    /// resulting projection DPP one at a time).
    pub fn sample(&self, scale: f64, rng: &mut Rng) -> Vec<usize> {
        let n = self.len();
        let chosen: Vec<usize> = (0..n)
            .filter(|&i| {
                let l = scale * self.eigenvalues[i];
                rng.random::<f64>() < l / (1.0 + l)
            })
            .collect();
        let mut v = self.eigenvectors.select_columns(&chosen);
        let mut items = Vec::with_capacity(chosen.len());
        while v.ncols() > 0 {
            let k = v.ncols();
            let weights: Vec<f64> = (0..n).map(|i| v.row(i).norm_squared() / k as f64).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut item = n - 1;
            for (i, &w) in weights.iter().enumerate() {
                if u < w {
                    item = i;
                    break;
                }
                u -= w;
            }
            items.push(item);
            // eliminate the chosen coordinate using the column with the
            // largest entry there, then re-orthonormalize the rest
            let pivot = (0..k)
                .max_by(|&a, &b| v[(item, a)].abs().total_cmp(&v[(item, b)].abs()))
                .expect("k > 0");
            let pcol = v.column(pivot).clone_owned();
            let pval = pcol[item];
            let mut rest = Vec::with_capacity(k - 1);
            for c in (0..k).filter(|&c| c != pivot) {
                let col = v.column(c) - &pcol * (v[(item, c)] / pval);
                rest.push(col);
            }
            let mut basis: Vec<DVector<f64>> = Vec::with_capacity(rest.len());
            for mut col in rest {
                for b in &basis {
                    let proj = b.dot(&col);
                    col -= b * proj;
                }
                let norm = col.norm();
                if norm > 1e-12 {
                    basis.push(col / norm);
                }
            }
            v = if basis.is_empty() {
                DMatrix::zeros(n, 0)
            } else {
                DMatrix::from_columns(&basis)
            };
        }
        items.sort_unstable();
        items
    }
}

/// One draw from the L-ensemble DPP with kernel `l`.
pub fn dpp_sample(l: &DMatrix<f64>, seed: u64) -> Result<Vec<usize>> {
    Ok(DppKernel::new(l)?.sample(1.0, &mut crate::rng::rng_from(seed)))
}

/// Scale `c` with `E|Y| = target` under the ensemble `c * L`, by bisection
/// on the log scale. Capped at the largest attainable size.
fn calibrate_scale(kernel: &DppKernel, target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (1e-12f64, 1.0f64);
    while kernel.expected_size(hi) < target && hi < 1e15 {
        hi *= 4.0;
    }
    if kernel.expected_size(hi) < target {
        log::warn!(
            "DPP cannot reach {target:.2} expected items; using the largest attainable ({:.2})",
            kernel.expected_size(hi)
        );
        return hi;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if kernel.expected_size(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// `T x d` mask whose channels' missing steps come from a DPP over time
/// with similarity `exp(-(t - t')^2 / (2 strength^2))`, scaled so the
/// expected number of missing steps is `rate * T`. Gaps repel each other.
pub fn temporal_neg_mask(
    t_len: usize,
    dim: usize,
    dpp_strength: f64,
    rate: f64,
    seed: u64,
) -> Result<Vec<bool>> {
    check_rate(rate)?;
    if !(dpp_strength > 0.0) {
        return Err(Error::invalid("dpp_strength must be positive"));
    }
    if rate >= 1.0 {
        return Ok(vec![true; t_len * dim]);
    }
    let lambda = 1.0 / (dpp_strength * dpp_strength);
    let sim = DMatrix::from_fn(t_len, t_len, |i, j| rbf(i as f64 - j as f64, lambda));
    let kernel = DppKernel::new(&sim)?;
    let scale = calibrate_scale(&kernel, rate * t_len as f64);
    let channels = (0..dim)
        .into_par_iter()
        .map(|c| {
            let mut out = vec![false; t_len];
            for t in kernel.sample(scale, &mut child_rng(seed, c as u64)) {
                out[t] = true;
            }
            out
        })
        .collect();
    Ok(transpose_channels(channels, t_len))
}

/// Missing probabilities `(p_high, p_low)` with `p_high = ratio * p_low`
/// and overall expected rate `rate`, given the fraction of high entries.
/// `p_high` is capped at 1, in which case the achieved rate falls short.
pub fn mnar_probabilities(rate: f64, ratio: f64, high_fraction: f64) -> (f64, f64) {
    let p_lo = rate / (high_fraction * ratio + (1.0 - high_fraction));
    ((ratio * p_lo).min(1.0), p_lo.min(1.0))
}

/// `T x d` mask where high entries of `values` go missing `ratio` times as
/// often as low ones. All-high or all-low input falls back to MCAR.
pub fn mnar_mask(
    values: &[f64],
    dim: usize,
    rate: f64,
    ratio: f64,
    rule: HighLowRule,
    seed: u64,
) -> Result<Vec<bool>> {
    check_rate(rate)?;
    if !(ratio > 0.0) {
        return Err(Error::invalid("mnar ratio must be positive"));
    }
    if dim == 0 || !values.len().is_multiple_of(dim) {
        return Err(Error::shape(
            "mnar_mask",
            format!("{} values with d={dim}", values.len()),
        ));
    }
    let high: Vec<bool> = match rule {
        HighLowRule::Threshold => values.iter().map(|&v| v > 0.5).collect(),
        HighLowRule::ChannelMedian => {
            let medians: Vec<f64> = (0..dim)
                .map(|c| {
                    let mut col: Vec<f64> = values.iter().skip(c).step_by(dim).copied().collect();
                    col.sort_by(f64::total_cmp);
                    let m = col.len();
                    if m % 2 == 1 {
                        col[m / 2]
                    } else {
                        0.5 * (col[m / 2 - 1] + col[m / 2])
                    }
                })
                .collect();
            values
                .iter()
                .enumerate()
                .map(|(k, &v)| v > medians[k % dim])
                .collect()
        }
    };
    let mut rng = crate::rng::rng_from(seed);
    let n_high = high.iter().filter(|&&h| h).count();
    if n_high == 0 || n_high == high.len() {
        log::warn!(
            "MNAR input is all {}; falling back to MCAR",
            if n_high == 0 { "low" } else { "high" }
        );
        return Ok(mcar(values.len(), rate, &mut rng));
    }
    let (p_hi, p_lo) = mnar_probabilities(rate, ratio, n_high as f64 / high.len() as f64);
    if p_hi >= 1.0 && ratio > 1.0 {
        log::warn!(
            "MNAR probability for high entries capped at 1; achieved rate will be below {rate}"
        );
    }
    Ok(high
        .iter()
        .map(|&h| rng.random::<f64>() < if h { p_hi } else { p_lo })
        .collect())
}

fn frame_shape(spec: &MaskSpec, dim: usize) -> Result<(usize, usize)> {
    if let Some([h, w]) = spec.frame_shape {
        if h * w != dim {
            return Err(Error::invalid(format!(
                "frame shape {h}x{w} does not match d={dim}"
            )));
        }
        return Ok((h, w));
    }
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(Error::invalid(format!(
            "d={dim} is not a square frame; set frame_shape"
        )));
    }
    Ok((side, side))
}

/// Mask for a whole batch (`[n][T][d]`), with one derived seed per series.
/// `truth` supplies the values MNAR depends on.
pub fn generate_mask(spec: &MaskSpec, truth: &TimeSeriesBatch) -> Result<Vec<bool>> {
    spec.validate()?;
    let (t_len, d) = (truth.t_len(), truth.dim());
    let base = derive_seed(spec.seed, crate::rng::stream::MASK);
    let seed_of = |i: usize| derive_seed(base, i as u64);
    let rate = spec.target_rate;
    let per_series: Vec<Vec<bool>> = match spec.mechanism {
        Mechanism::Mcar => (0..truth.n())
            .map(|i| mcar_mask(t_len, d, rate, seed_of(i)))
            .collect::<Result<_>>()?,
        Mechanism::Spatial => {
            let (h, w) = frame_shape(spec, d)?;
            (0..truth.n())
                .into_par_iter()
                .map(|i| spatial_series_mask(t_len, h, w, spec.lengthscale, rate, seed_of(i)))
                .collect::<Result<_>>()?
        }
        Mechanism::TemporalPos => (0..truth.n())
            .map(|i| temporal_pos_mask(t_len, d, spec.lengthscale, rate, seed_of(i)))
            .collect::<Result<_>>()?,
        Mechanism::TemporalNeg => (0..truth.n())
            .map(|i| temporal_neg_mask(t_len, d, spec.dpp_strength, rate, seed_of(i)))
            .collect::<Result<_>>()?,
        Mechanism::Mnar => (0..truth.n())
            .map(|i| {
                mnar_mask(
                    truth.series_values(i),
                    d,
                    rate,
                    spec.mnar_ratio,
                    spec.mnar_rule,
                    seed_of(i),
                )
            })
            .collect::<Result<_>>()?,
    };
    Ok(per_series.concat())
}

/// Lag-1 autocorrelation of each channel's missingness indicator in a
/// `T x d` mask, averaged over channels with a non-constant indicator.
pub fn mean_lag1_autocorrelation(mask: &[bool], t_len: usize, dim: usize) -> f64 {
    let mut total = 0.0;
    let mut used = 0usize;
    for c in 0..dim {
        let x: Vec<f64> = (0..t_len)
            .map(|t| f64::from(u8::from(mask[t * dim + c])))
            .collect();
        let mean = x.iter().sum::<f64>() / t_len as f64;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        if var == 0.0 {
            continue;
        }
        let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        total += cov / var;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}

pub const MASK_MAGIC: &[u8; 8] = b"GPVAEMSK";
pub const MASK_VERSION: u32 = 1;

/// Bit-packed mask container documented in `docs/FORMATS.md`.
pub fn write_mask(path: &Path, mask: &[bool], n: usize, t_len: usize, dim: usize) -> Result<()> {
    if mask.len() != n * t_len * dim {
        return Err(Error::shape(
            "write_mask",
            format!("{} entries for [{n}, {t_len}, {dim}]", mask.len()),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MASK_MAGIC)?;
    write_u32(&mut w, MASK_VERSION)?;
    for v in [n, t_len, dim] {
        write_u64(&mut w, v as u64)?;
    }
    w.write_all(&pack_bits(mask))?;
    w.flush()?;
    Ok(())
}

/// Returns `(mask, [n, T, d])`.
pub fn read_mask(path: &Path) -> Result<(Vec<bool>, [usize; 3])> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, MASK_MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != MASK_VERSION {
        return Err(Error::Format(format!("unsupported mask version {version}")));
    }
    let dims = [
        read_usize(&mut r)?,
        read_usize(&mut r)?,
        read_usize(&mut r)?,
    ];
    let len = dims
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .ok_or_else(|| Error::Format("mask dimensions overflow".into()))?;
    let mut bits = vec![0u8; len.div_ceil(8)];
    r.read_exact(&mut bits)?;
    Ok((unpack_bits(&bits, len), dims))
}

/// 0/1 CSV: `series_id,time_index,ch0..ch{d-1}`.
pub fn write_mask_csv(
    path: &Path,
    mask: &[bool],
    n: usize,
    t_len: usize,
    dim: usize,
) -> Result<()> {
    if mask.len() != n * t_len * dim {
        return Err(Error::shape(
            "write_mask_csv",
            format!("{} entries for [{n}, {t_len}, {dim}]", mask.len()),
        ));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["series_id".to_string(), "time_index".to_string()];
    header.extend((0..dim).map(|c| format!("ch{c}")));
    w.write_record(&header)?;
    for (row, chunk) in mask.chunks(dim).enumerate() {
        let mut rec = vec![(row / t_len).to_string(), (row % t_len).to_string()];
        rec.extend(chunk.iter().map(|&m| if m { "1" } else { "0" }.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the 0/1 CSV written by [`write_mask_csv`]. Returns the mask and
/// `[n, T, d]`; rows must come in series-major, time-minor order.
pub fn read_mask_csv(path: &Path) -> Result<(Vec<bool>, [usize; 3])> {
    let mut r = csv::Reader::from_path(path)?;
    let dim = r.headers()?.len().saturating_sub(2);
    if dim == 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "expected series_id,time_index and at least one channel column".into(),
        });
    }
    let mut mask = Vec::new();
    let (mut n, mut t_len) = (0usize, 0usize);
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let sid: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad series_id {:?}", &rec[0])))?;
        let t: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad time_index {:?}", &rec[1])))?;
        if sid == n && t == 0 {
            n += 1;
        }
        if sid + 1 != n {
            return Err(bad("rows must be ordered by series, then time".into()));
        }
        if sid == 0 {
            t_len = t_len.max(t + 1);
        } else if t >= t_len {
            return Err(bad(format!(
                "time_index {t} beyond the first series' length {t_len}"
            )));
        }
        for cell in rec.iter().skip(2) {
            mask.push(match cell.trim() {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("mask cell {other:?} is not 0 or 1"))),
            });
        }
    }
    if mask.len() != n * t_len * dim {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!(
                "{} cells do not form {n} series of {t_len} steps",
                mask.len() / dim
            ),
        });
    }
    Ok((mask, [n, t_len, dim]))
}
