//! Stationary GP kernels over time and the Gram-matrix factorization used by
//! the latent prior and the data-space GP baseline.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Squared-exponential kernel `exp(-λ r² / 2)`.
pub fn rbf(r: f64, lambda: f64) -> f64 {
    (-0.5 * lambda * r * r).exp()
}

/// Rational quadratic kernel `(1 + r² / (2α β⁻¹))^(-α)` written with the
/// length scale `l² = 2β⁻¹`, i.e. `(1 + r² / (α l²))^(-α)`.
pub fn rational_quadratic(r: f64, alpha: f64, lengthscale: f64) -> f64 {
    (1.0 + r * r / (alpha * lengthscale * lengthscale)).powf(-alpha)
}

/// Cauchy kernel `σ² / (1 + (τ - τ')² / l²)`.
pub fn cauchy(tau: f64, tau_prime: f64, sigma2: f64, lengthscale: f64) -> f64 {
    let d = (tau - tau_prime) / lengthscale;
    sigma2 / (1.0 + d * d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    RationalQuadratic,
    Cauchy,
}

/// Kernel family with its hyperparameters.
///
/// `precision_lambda` only applies to [`KernelFamily::Rbf`]; when absent it is
/// derived from the length scale as `1 / l²`. `jitter` is added to the
/// diagonal before factorizing; `None` means `1e-6 · σ²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma2: f64,
    pub lengthscale: f64,
    pub precision_lambda: Option<f64>,
    pub alpha: f64,
    pub jitter: Option<f64>,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::cauchy(1.0, 2.0)
    }
}

impl KernelSpec {
    pub fn cauchy(sigma2: f64, lengthscale: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Cauchy,
            sigma2,
            lengthscale,
            precision_lambda: None,
            alpha: 1.0,
            jitter: None,
        }
    }

    pub fn rbf(sigma2: f64, lengthscale: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Rbf,
            ..Self::cauchy(sigma2, lengthscale)
        }
    }

    pub fn rational_quadratic(sigma2: f64, lengthscale: f64, alpha: f64) -> Self {
        KernelSpec {
            family: KernelFamily::RationalQuadratic,
            alpha,
            ..Self::cauchy(sigma2, lengthscale)
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = Some(jitter);
        self
    }

    pub fn with_lengthscale(mut self, lengthscale: f64) -> Self {
        self.lengthscale = lengthscale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |what: &str, v: f64| Error::invalid(format!("kernel {what} must be positive, got {v}"));
        if !(self.sigma2 > 0.0) {
            return Err(bad("sigma2", self.sigma2));
        }
        if !(self.lengthscale > 0.0) {
            return Err(bad("lengthscale", self.lengthscale));
        }
        if !(self.alpha > 0.0) {
            return Err(bad("alpha", self.alpha));
        }
        if let Some(l) = self.precision_lambda {
            if !(l > 0.0) {
                return Err(bad("precision_lambda", l));
            }
        }
        if let Some(j) = self.jitter {
            if !(j >= 0.0) {
                return Err(Error::invalid(format!(
                    "kernel jitter must be >= 0, got {j}"
                )));
            }
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.precision_lambda
            .unwrap_or(1.0 / (self.lengthscale * self.lengthscale))
    }

    pub fn jitter_value(&self) -> f64 {
        self.jitter.unwrap_or(1e-6 * self.sigma2)
    }

    /// `k(τ, τ')`.
    pub fn eval(&self, tau: f64, tau_prime: f64) -> f64 {
        let r = (tau - tau_prime).abs();
        match self.family {
            KernelFamily::Rbf => self.sigma2 * rbf(r, self.lambda()),
            KernelFamily::RationalQuadratic => {
                self.sigma2 * rational_quadratic(r, self.alpha, self.lengthscale)
            }
            KernelFamily::Cauchy => cauchy(tau, tau_prime, self.sigma2, self.lengthscale),
        }
    }

    /// Cross-covariance between two timestamp sets.
    pub fn cross(&self, a: &[f64], b: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(a[i], b[j]))
    }
}

/// Kernel matrix over a timestamp grid with the Cholesky factor of
/// `K + jitter · I`.
///
/// Everything downstream (KL terms, GP posteriors) works with the jittered
/// matrix, so the jitter is part of the prior covariance.
#[derive(Clone, Debug)]
pub struct GramFactor {
    k: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    timestamps: Vec<f64>,
    jitter: f64,
    k_inv: DMatrix<f64>,
    log_det: f64,
}

const JITTER_RETRIES: usize = 3;

fn check_timestamps(timestamps: &[f64]) -> Result<()> {
    if timestamps.is_empty() {
        return Err(Error::invalid("timestamp grid is empty"));
    }
    if timestamps.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("timestamps must be finite"));
    }
    if let Some(w) = timestamps.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!(
            "timestamps must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Cholesky of `k + jitter·I`, multiplying the jitter by 10 up to three times
/// on failure. A zero starting jitter retries from `1e-10 · max diag`.
pub fn stabilized_cholesky(k: &DMatrix<f64>, jitter: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let scale = (0..n)
        .map(|i| k[(i, i)].abs())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let mut j = jitter;
    for attempt in 0..=JITTER_RETRIES {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += j;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, j));
        }
        if attempt < JITTER_RETRIES {
            log::debug!("Cholesky failed at jitter {j:e}, retrying");
            j = if j > 0.0 { j * 10.0 } else { 1e-10 * scale };
        }
    }
    Err(Error::Cholesky { jitter: j })
}

impl GramFactor {
    pub fn from_covariance(k: DMatrix<f64>, timestamps: Vec<f64>, jitter: f64) -> Result<Self> {
        if k.nrows() != k.ncols() || k.nrows() != timestamps.len() {
            return Err(Error::shape(
                "gram",
                format!(
                    "{}x{} matrix for {} timestamps",
                    k.nrows(),
                    k.ncols(),
                    timestamps.len()
                ),
            ));
        }
        let (chol, jitter) = stabilized_cholesky(&k, jitter)?;
        let k_inv = chol.inverse();
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        Ok(GramFactor {
            k,
            chol,
            timestamps,
            jitter,
            k_inv,
            log_det,
        })
    }

    /// Standard-normal prior `N(0, I)` on a grid (no temporal coupling).
    pub fn identity(timestamps: Vec<f64>) -> Result<Self> {
        let n = timestamps.len();
        Self::from_covariance(DMatrix::identity(n, n), timestamps, 0.0)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// The un-jittered kernel matrix.
    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// Lower Cholesky factor `L` with `L Lᵀ = K + jitter · I`.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    /// Jitter actually used (after any retries).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `(K + jitter · I)⁻¹`.
    pub fn k_inv(&self) -> &DMatrix<f64> {
        &self.k_inv
    }

    /// `log det (K + jitter · I)`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }
}

/// Gram matrix of `spec` over `timestamps` and its stabilized factorization.
pub fn gram(spec: &KernelSpec, timestamps: &[f64]) -> Result<GramFactor> {
    spec.validate()?;
    check_timestamps(timestamps)?;
    let mut k = spec.cross(timestamps, timestamps);
    // exact symmetry regardless of evaluation order
    for i in 0..k.nrows() {
        for j in 0..i {
            k[(i, j)] = k[(j, i)];
        }
    }
    GramFactor::from_covariance(k, timestamps.to_vec(), spec.jitter_value())
}
