//! Gaussian variational family with tridiagonal precision.
//!
//! Each latent dimension `j` carries a mean trajectory `m_j` and an upper
//! bidiagonal factor `B_j` (diagonal `b_{t,t}`, super-diagonal `b_{t,t+1}`).
//! The precision is `Λ_j = B_jᵀ B_j`, so `Λ_j` is symmetric tridiagonal and
//! positive definite whenever the diagonal of `B_j` is positive. Sampling
//! solves `B_j x = ε` by back-substitution in `O(T)`; the log-determinant is
//! `2 Σ_t log b_{t,t}`.
//!
//! The KL divergence to the GP prior uses a dense `T x T` reconstruction of
//! the covariance, which is exact and cheap for the short grids the model is
//! trained on.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{CustomOp, Tensor};
use crate::error::{Error, Result};
use crate::kernels::GramFactor;

/// Per-series posterior: rows index latent dimensions, columns index time.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredPosterior {
    pub means: DMatrix<f64>,
    pub band_diag: DMatrix<f64>,
    pub band_off: DMatrix<f64>,
}

fn check_band(diag: &[f64], off: &[f64]) -> Result<()> {
    if diag.is_empty() || off.len() + 1 != diag.len() {
        return Err(Error::shape(
            "band",
            format!(
                "diagonal length {} with off-diagonal length {}",
                diag.len(),
                off.len()
            ),
        ));
    }
    if let Some((t, b)) = diag.iter().enumerate().find(|(_, b)| !(**b > 0.0)) {
        return Err(Error::Domain {
            op: "band",
            detail: format!("diagonal entry {t} is {b}, must be positive"),
        });
    }
    Ok(())
}

/// Dense `Λ = Bᵀ B` for the upper bidiagonal `B` with the given bands.
pub fn assemble_precision(diag: &[f64], off: &[f64]) -> Result<DMatrix<f64>> {
    check_band(diag, off)?;
    let n = diag.len();
    let mut lam = DMatrix::zeros(n, n);
    for t in 0..n {
        let above = if t > 0 { off[t - 1] } else { 0.0 };
        lam[(t, t)] = diag[t] * diag[t] + above * above;
        if t + 1 < n {
            lam[(t, t + 1)] = diag[t] * off[t];
            lam[(t + 1, t)] = diag[t] * off[t];
        }
    }
    Ok(lam)
}

/// Solves `B x = rhs` for upper bidiagonal `B` (back-substitution).
pub fn bidiag_solve(diag: &[f64], off: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut x = vec![0.0; n];
    for t in (0..n).rev() {
        let carry = if t + 1 < n { off[t] * x[t + 1] } else { 0.0 };
        x[t] = (rhs[t] - carry) / diag[t];
    }
    x
}

/// Solves `Bᵀ u = rhs` for upper bidiagonal `B` (forward substitution).
pub fn bidiag_solve_transposed(diag: &[f64], off: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut u = vec![0.0; n];
    for t in 0..n {
        let carry = if t > 0 { off[t - 1] * u[t - 1] } else { 0.0 };
        u[t] = (rhs[t] - carry) / diag[t];
    }
    u
}

/// Dense `B⁻¹` (upper triangular), column by column.
fn bidiag_inverse(diag: &[f64], off: &[f64]) -> DMatrix<f64> {
    let n = diag.len();
    let mut inv = DMatrix::zeros(n, n);
    for c in 0..n {
        inv[(c, c)] = 1.0 / diag[c];
        for s in (0..c).rev() {
            inv[(s, c)] = -off[s] * inv[(s + 1, c)] / diag[s];
        }
    }
    inv
}

/// Gradient of [`kl_band`] with respect to its band parameters.
#[derive(Clone, Debug)]
pub struct KlGrad {
    pub mean: Vec<f64>,
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

/// `KL(N(m, (BᵀB)⁻¹) ‖ N(0, K))` for one latent dimension.
pub fn kl_band(mean: &[f64], diag: &[f64], off: &[f64], prior: &GramFactor) -> Result<f64> {
    Ok(kl_band_impl(mean, diag, off, prior, false)?.0)
}

/// [`kl_band`] together with its gradient.
pub fn kl_band_with_grad(
    mean: &[f64],
    diag: &[f64],
    off: &[f64],
    prior: &GramFactor,
) -> Result<(f64, KlGrad)> {
    let (kl, g) = kl_band_impl(mean, diag, off, prior, true)?;
    Ok((kl, g.expect("gradient requested")))
}

fn kl_band_impl(
    mean: &[f64],
    diag: &[f64],
    off: &[f64],
    prior: &GramFactor,
    want_grad: bool,
) -> Result<(f64, Option<KlGrad>)> {
    check_band(diag, off)?;
    let n = diag.len();
    if mean.len() != n || prior.len() != n {
        return Err(Error::shape(
            "kl_to_prior",
            format!("mean {}, band {n}, prior {}", mean.len(), prior.len()),
        ));
    }
    let k_inv = prior.k_inv();
    let binv = bidiag_inverse(diag, off);
    // P = B⁻ᵀ K⁻¹ B⁻¹, so tr(K⁻¹ Σ) = tr(P) with Σ = B⁻¹ B⁻ᵀ
    let p = binv.transpose() * (k_inv * &binv);
    let m = DVector::from_column_slice(mean);
    let k_inv_m = k_inv * &m;
    let log_det_lambda: f64 = 2.0 * diag.iter().map(|b| b.ln()).sum::<f64>();
    let kl = 0.5 * (p.trace() + m.dot(&k_inv_m) - n as f64 + prior.log_det() + log_det_lambda);

    if !want_grad {
        return Ok((kl, None));
    }
    // ∂ tr(K⁻¹Σ)/∂B = -2 P B⁻ᵀ, restricted to the band
    let entry =
        |t: usize, col: usize| -> f64 { (0..n).map(|s| p[(t, s)] * binv[(col, s)]).sum::<f64>() };
    let g_diag = (0..n).map(|t| -entry(t, t) + 1.0 / diag[t]).collect();
    let g_off = (0..n.saturating_sub(1)).map(|t| -entry(t, t + 1)).collect();
    Ok((
        kl,
        Some(KlGrad {
            mean: k_inv_m.iter().copied().collect(),
            diag: g_diag,
            off: g_off,
        }),
    ))
}

impl StructuredPosterior {
    pub fn new(
        means: DMatrix<f64>,
        band_diag: DMatrix<f64>,
        band_off: DMatrix<f64>,
    ) -> Result<Self> {
        let (k, t) = means.shape();
        if band_diag.shape() != (k, t) || band_off.shape() != (k, t.saturating_sub(1)) || t == 0 {
            return Err(Error::shape(
                "structured posterior",
                format!(
                    "means {:?}, diag {:?}, off {:?}",
                    means.shape(),
                    band_diag.shape(),
                    band_off.shape()
                ),
            ));
        }
        if band_diag.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Domain {
                op: "structured posterior",
                detail: "band diagonal must be strictly positive".into(),
            });
        }
        Ok(StructuredPosterior {
            means,
            band_diag,
            band_off,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.means.nrows()
    }

    pub fn len(&self) -> usize {
        self.means.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.means.ncols() == 0
    }

    fn rows(&self, j: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let row = |m: &DMatrix<f64>| m.row(j).iter().copied().collect::<Vec<_>>();
        (row(&self.means), row(&self.band_diag), row(&self.band_off))
    }

    pub fn precision(&self, j: usize) -> Result<DMatrix<f64>> {
        let (_, d, o) = self.rows(j);
        assemble_precision(&d, &o)
    }

    /// `z = m_j + B_j⁻¹ ε`, distributed as `N(m_j, Λ_j⁻¹)` for standard
    /// normal `ε`. Linear in `T`.
    pub fn sample(&self, j: usize, noise: &[f64]) -> Result<Vec<f64>> {
        let (m, d, o) = self.rows(j);
        if noise.len() != m.len() {
            return Err(Error::shape(
                "sample",
                format!("noise length {} for T={}", noise.len(), m.len()),
            ));
        }
        if d.contains(&0.0) {
            return Err(Error::Domain {
                op: "sample",
                detail: "zero diagonal in band factor".into(),
            });
        }
        let x = bidiag_solve(&d, &o, noise);
        Ok(m.iter().zip(x).map(|(a, b)| a + b).collect())
    }

    /// `log det Λ_j = 2 Σ_t log b_{t,t}`.
    pub fn log_det_precision(&self, j: usize) -> f64 {
        2.0 * self.band_diag.row(j).iter().map(|b| b.ln()).sum::<f64>()
    }

    pub fn kl_to_prior(&self, j: usize, prior: &GramFactor) -> Result<f64> {
        let (m, d, o) = self.rows(j);
        kl_band(&m, &d, &o, prior)
    }

    /// Sum of the per-dimension divergences.
    pub fn kl_total(&self, prior: &GramFactor) -> Result<f64> {
        (0..self.latent_dim())
            .map(|j| self.kl_to_prior(j, prior))
            .sum()
    }
}

/// Strided view helpers for `[batch, T, k]` tensors: the series for batch
/// item `b` and latent dimension `j`.
fn gather(data: &[f64], b: usize, j: usize, t_len: usize, k: usize) -> Vec<f64> {
    (0..t_len).map(|t| data[(b * t_len + t) * k + j]).collect()
}

fn scatter(out: &mut [f64], src: &[f64], b: usize, j: usize, t_len: usize, k: usize) {
    for (t, v) in src.iter().enumerate() {
        out[(b * t_len + t) * k + j] = *v;
    }
}

fn band_dims(op: &'static str, inputs: &[&Tensor]) -> Result<(usize, usize, usize)> {
    let s = inputs[0].shape();
    if s.len() != 3 || inputs.iter().any(|t| t.shape() != s) || s[1] == 0 {
        return Err(Error::shape(
            op,
            format!(
                "{:?}",
                inputs
                    .iter()
                    .map(|t| t.shape().to_vec())
                    .collect::<Vec<_>>()
            ),
        ));
    }
    Ok((s[0], s[1], s[2]))
}

/// Tape op `(diag, off, ε) ↦ B⁻¹ ε` over `[batch, T, k]` tensors, solving
/// along the time axis. The last time step of `off` is ignored (the band has
/// `T - 1` super-diagonal entries) and receives zero gradient.
pub struct BandSolveOp;

impl CustomOp for BandSolveOp {
    fn name(&self) -> &'static str {
        "band_solve"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (nb, t_len, k) = band_dims("band_solve", inputs)?;
        let (diag, off, eps) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        if diag.contains(&0.0) {
            return Err(Error::Domain {
                op: "band_solve",
                detail: "zero diagonal in band factor".into(),
            });
        }
        let mut out = vec![0.0; diag.len()];
        for b in 0..nb {
            for j in 0..k {
                let d = gather(diag, b, j, t_len, k);
                let o = gather(off, b, j, t_len, k);
                let e = gather(eps, b, j, t_len, k);
                scatter(&mut out, &bidiag_solve(&d, &o, &e), b, j, t_len, k);
            }
        }
        Tensor::new(inputs[0].shape().to_vec(), out)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let (nb, t_len, k) = band_dims("band_solve", inputs)?;
        let (diag, off) = (inputs[0].data(), inputs[1].data());
        let n = diag.len();
        let (mut gd, mut go, mut ge) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for b in 0..nb {
            for j in 0..k {
                let d = gather(diag, b, j, t_len, k);
                let o = gather(off, b, j, t_len, k);
                let x = gather(output.data(), b, j, t_len, k);
                let g = gather(grad.data(), b, j, t_len, k);
                // x = B⁻¹ε: dε = B⁻ᵀ g, dB = -(B⁻ᵀ g) xᵀ on the band
                let u = bidiag_solve_transposed(&d, &o, &g);
                let dd: Vec<f64> = (0..t_len).map(|t| -u[t] * x[t]).collect();
                let doff: Vec<f64> = (0..t_len)
                    .map(|t| if t + 1 < t_len { -u[t] * x[t + 1] } else { 0.0 })
                    .collect();
                scatter(&mut gd, &dd, b, j, t_len, k);
                scatter(&mut go, &doff, b, j, t_len, k);
                scatter(&mut ge, &u, b, j, t_len, k);
            }
        }
        let shape = inputs[0].shape().to_vec();
        Ok(vec![
            Tensor::new(shape.clone(), gd)?,
            Tensor::new(shape.clone(), go)?,
            Tensor::new(shape, ge)?,
        ])
    }
}

/// Tape op `(means, diag, off) ↦ [batch]` of KL divergences to a shared GP
/// prior, summed over latent dimensions. Same layout conventions as
/// [`BandSolveOp`].
pub struct BandKlOp {
    prior: Arc<GramFactor>,
}

impl BandKlOp {
    pub fn new(prior: Arc<GramFactor>) -> Self {
        BandKlOp { prior }
    }
}

impl CustomOp for BandKlOp {
    fn name(&self) -> &'static str {
        "band_kl"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (nb, t_len, k) = band_dims("band_kl", inputs)?;
        let mut out = vec![0.0; nb];
        for (b, slot) in out.iter_mut().enumerate() {
            for j in 0..k {
                let m = gather(inputs[0].data(), b, j, t_len, k);
                let d = gather(inputs[1].data(), b, j, t_len, k);
                let o = gather(inputs[2].data(), b, j, t_len, k);
                *slot += kl_band(&m, &d, &o[..t_len - 1], &self.prior)?;
            }
        }
        Ok(Tensor::from_vec(out))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let (nb, t_len, k) = band_dims("band_kl", inputs)?;
        let n = inputs[0].len();
        let (mut gm, mut gd, mut go) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for b in 0..nb {
            let scale = grad.data()[b];
            for j in 0..k {
                let m = gather(inputs[0].data(), b, j, t_len, k);
                let d = gather(inputs[1].data(), b, j, t_len, k);
                let o = gather(inputs[2].data(), b, j, t_len, k);
                let (_, g) = kl_band_with_grad(&m, &d, &o[..t_len - 1], &self.prior)?;
                let mut off_full = g.off.clone();
                off_full.push(0.0);
                let sm: Vec<f64> = g.mean.iter().map(|v| v * scale).collect();
                let sd: Vec<f64> = g.diag.iter().map(|v| v * scale).collect();
                let so: Vec<f64> = off_full.iter().map(|v| v * scale).collect();
                scatter(&mut gm, &sm, b, j, t_len, k);
                scatter(&mut gd, &sd, b, j, t_len, k);
                scatter(&mut go, &so, b, j, t_len, k);
            }
        }
        let shape = inputs[0].shape().to_vec();
        Ok(vec![
            Tensor::new(shape.clone(), gm)?,
            Tensor::new(shape.clone(), gd)?,
            Tensor::new(shape, go)?,
        ])
    }
}
