//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Runs sequentially so the timing criterion is not disturbed by
//! concurrent work.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use gpvae::autodiff::Tensor;
use gpvae::baselines::{
    forward_impute, gp_channel_impute, gp_posterior, mean_impute, GpRegressionSpec,
};
use gpvae::data::{unit_timestamps, TimeSeriesBatch};
use gpvae::eval::{mse_missing, read_metrics_csv, MetricReport};
use gpvae::kernels::{cauchy, gram, rational_quadratic, GramFactor, KernelSpec};
use gpvae::missingness::{
    mcar_mask, mean_lag1_autocorrelation, mnar_mask, spatial_mask, temporal_neg_mask,
    temporal_pos_mask, DppKernel, HighLowRule,
};
use gpvae::model::{elbo, elbo_value, latent_prior, sample_noise};
use gpvae::nets::{
    init_params, DecoderSpec, EncoderSpec, Likelihood, ModelParams, ModelSpec, ModelVariant,
};
use gpvae::rng::rng_from;
use gpvae::structured_gaussian::{assemble_precision, kl_band, StructuredPosterior};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_band(t: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d = (0..t).map(|_| rng.random_range(0.4..2.0)).collect();
    let o = (0..t - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
    (m, d, o)
}

fn dense_upper_bidiagonal(d: &[f64], o: &[f64]) -> DMatrix<f64> {
    let n = d.len();
    DMatrix::from_fn(n, n, |r, c| match c.wrapping_sub(r) {
        0 => d[r],
        1 => o[r],
        _ => 0.0,
    })
}

/// KL(N(m, Σ) ‖ N(0, K)) from the dense closed form, determinants by LU.
fn dense_kl(m: &[f64], sigma: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
    let k_inv = k.clone().try_inverse().expect("invertible prior");
    let mv = DVector::from_column_slice(m);
    0.5 * ((&k_inv * sigma).trace() + (mv.transpose() * &k_inv * &mv)[(0, 0)] - m.len() as f64
        + k.determinant().ln()
        - sigma.determinant().ln())
}

fn one_row(m: &[f64], d: &[f64], o: &[f64]) -> StructuredPosterior {
    let t = m.len();
    StructuredPosterior::new(
        DMatrix::from_row_slice(1, t, m),
        DMatrix::from_row_slice(1, t, d),
        DMatrix::from_row_slice(1, t - 1, o),
    )
    .expect("valid band")
}

fn grid(t: usize) -> Vec<f64> {
    (0..t).map(|i| i as f64).collect()
}

/// Prior covariance as the divergence sees it, jitter included.
fn prior_cov(prior: &GramFactor) -> DMatrix<f64> {
    let mut k = prior.k().clone();
    for i in 0..k.nrows() {
        k[(i, i)] += prior.jitter();
    }
    k
}

fn structured_gaussian_oracles() -> Check {
    let mut rng = rng_from(101);
    let (mut prec_err, mut logdet_err, mut kl_err) = (0.0f64, 0.0f64, 0.0f64);
    for t in 2..=12 {
        let prior = gram(&KernelSpec::cauchy(1.0, 2.0), &grid(t)).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let (m, d, o) = random_band(t, &mut rng);
            let b = dense_upper_bidiagonal(&d, &o);
            let lam = assemble_precision(&d, &o).map_err(|e| e.to_string())?;
            prec_err = prec_err.max((&lam - b.transpose() * &b).abs().max());
            let dense_logdet = lam.clone().lu().determinant().ln();
            logdet_err =
                logdet_err.max((one_row(&m, &d, &o).log_det_precision(0) - dense_logdet).abs());
            let sigma = lam.try_inverse().expect("positive definite");
            let want = dense_kl(&m, &sigma, &prior_cov(&prior));
            kl_err =
                kl_err.max((kl_band(&m, &d, &o, &prior).map_err(|e| e.to_string())? - want).abs());
        }
    }

    let t = 5;
    let draws = 200_000;
    let (m, d, o) = random_band(t, &mut rng);
    let q = one_row(&m, &d, &o);
    let cov = assemble_precision(&d, &o).unwrap().try_inverse().unwrap();
    let mut outer = DMatrix::<f64>::zeros(t, t);
    let mut outer_sq = DMatrix::<f64>::zeros(t, t);
    let mut eps = vec![0.0; t];
    for _ in 0..draws {
        eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
        let z = q.sample(0, &eps).map_err(|e| e.to_string())?;
        for a in 0..t {
            for b in 0..t {
                let p = (z[a] - m[a]) * (z[b] - m[b]);
                outer[(a, b)] += p;
                outer_sq[(a, b)] += p * p;
            }
        }
    }
    let n = draws as f64;
    let mut worst_z = 0.0f64;
    for a in 0..t {
        for b in 0..t {
            let mean = outer[(a, b)] / n;
            let se = ((outer_sq[(a, b)] / n - mean * mean) / n).sqrt();
            worst_z = worst_z.max((mean - cov[(a, b)]).abs() / se);
        }
    }
    ensure(
        prec_err < 1e-12 && logdet_err < 1e-10 && kl_err < 1e-8 && worst_z < 3.0,
        format!(
            "precision {prec_err:.1e} (<1e-12), log det {logdet_err:.1e} (<1e-10), KL {kl_err:.1e} (<1e-8), \
             sample covariance worst {worst_z:.2} SE (<3)"
        ),
    )
}

fn linear_time_sampling() -> Check {
    let k = 16;
    let time_per_call = |t: usize| -> Duration {
        let mut rng = rng_from(7);
        let means = DMatrix::from_fn(k, t, |_, _| rng.random_range(-1.0..1.0));
        let diag = DMatrix::from_fn(k, t, |_, _| rng.random_range(0.5..2.0));
        let off = DMatrix::from_fn(k, t - 1, |_, _| rng.random_range(-1.0..1.0));
        let q = StructuredPosterior::new(means, diag, off).unwrap();
        let eps: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
        let reps = 2_000_000 / t;
        let mut best = Duration::MAX;
        for _ in 0..7 {
            let start = Instant::now();
            let mut acc = 0.0;
            for r in 0..reps {
                acc += q.sample(r % k, &eps).unwrap()[t / 2];
            }
            std::hint::black_box(acc);
            best = best.min(start.elapsed() / reps as u32);
        }
        best
    };
    time_per_call(256);
    let short = time_per_call(512);
    let long = time_per_call(1024);
    let raw = long.as_secs_f64() / short.as_secs_f64();
    let per_step = raw / 2.0;
    ensure(
        per_step <= 1.5,
        format!(
            "per-step cost grows {per_step:.2}x (<=1.5) from T=512 to T=1024; raw call time {:.1}us -> {:.1}us ({raw:.2}x)",
            short.as_secs_f64() * 1e6,
            long.as_secs_f64() * 1e6
        ),
    )
}

fn tiny_spec(variant: ModelVariant, likelihood: Likelihood) -> ModelSpec {
    ModelSpec {
        encoder: EncoderSpec {
            input_dim: 3,
            preprocess_width: None,
            conv_layers: 1,
            filters: 4,
            filter_size: 3,
            dense_layers: 1,
            dense_width: 5,
            latent_dim: 2,
        },
        decoder: DecoderSpec {
            layers: 1,
            width: 4,
            output_dim: 3,
            likelihood,
        },
        variant,
    }
}

/// Largest per-group relative error `‖g_ad − g_fd‖ / ‖g_fd‖`.
fn worst_group_error(
    params: &ModelParams,
    batch: &TimeSeriesBatch,
    prior: &Arc<GramFactor>,
    noise: &Tensor,
) -> f64 {
    let v = elbo(batch, params, prior, noise).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, g) in v.gradients.iter().enumerate() {
        let (mut diff, mut norm) = (0.0, 0.0);
        for j in 0..g.len() {
            let mut p = params.clone();
            p.tensors[i].data_mut()[j] += h;
            let up = elbo_value(batch, &p, prior, noise).unwrap();
            p.tensors[i].data_mut()[j] -= 2.0 * h;
            let down = elbo_value(batch, &p, prior, noise).unwrap();
            let fd = (up - down) / (2.0 * h);
            diff += (fd - g.data()[j]).powi(2);
            norm += fd * fd;
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-8));
    }
    worst
}

fn gradient_checks() -> Check {
    let (n, t, d) = (3, 4, 3);
    let mut rng = rng_from(2);
    let values: Vec<f64> = (0..n * t * d).map(|_| rng.sample(StandardNormal)).collect();
    let mask: Vec<bool> = (0..values.len())
        .map(|_| rng.random::<f64>() < 0.3)
        .collect();
    let batch = TimeSeriesBatch::new(n, t, d, values, mask, unit_timestamps(t), None).unwrap();
    let mut worst = 0.0f64;
    let mut groups = 0;
    for lik in [Likelihood::Gaussian { sigma2: 0.05 }, Likelihood::Bernoulli] {
        for variant in [ModelVariant::GpVae, ModelVariant::HiVae, ModelVariant::Vae] {
            let mut params = init_params(&tiny_spec(variant, lik), 1).unwrap();
            // biases start at zero, which would put ReLU inputs exactly on the kink
            for tensor in params.tensors.iter_mut().filter(|x| x.shape().len() == 1) {
                tensor
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v += 0.1 * rng.sample::<f64, _>(StandardNormal));
            }
            let bin = if matches!(lik, Likelihood::Bernoulli) {
                batch
                    .with_values(batch.values().iter().map(|&v| f64::from(v > 0.0)).collect())
                    .unwrap()
            } else {
                batch.clone()
            };
            let prior =
                latent_prior(&params, &KernelSpec::cauchy(1.0, 2.0), bin.timestamps()).unwrap();
            let noise = sample_noise(&mut rng_from(3), n, t, 2);
            worst = worst.max(worst_group_error(&params, &bin, &prior, &noise));
            groups += params.tensors.len();
        }
    }
    ensure(
        worst < 1e-3,
        format!("max relative error {worst:.2e} (<1e-3) over {groups} parameter groups, 6 model variants"),
    )
}

fn kernel_identity() -> Check {
    let mut rng = rng_from(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let r = rng.random_range(0.0..20.0);
        let l = rng.random_range(0.1..10.0);
        worst = worst.max((rational_quadratic(r, 1.0, l) - cauchy(0.0, r, 1.0, l)).abs());
        let a = KernelSpec::rational_quadratic(1.0, l, 1.0).eval(0.0, r);
        let b = KernelSpec::cauchy(1.0, l).eval(0.0, r);
        worst = worst.max((a - b).abs());
    }
    ensure(
        worst < 1e-12,
        format!("max |RQ(alpha=1) - Cauchy| = {worst:.1e} (<1e-12) over 1000 r"),
    )
}

fn kl_identity() -> Check {
    let mut rng = rng_from(5);
    let mut worst_equal = 0.0f64;
    let mut min_kl = f64::INFINITY;
    for i in 0..1000 {
        let t = 1 + i % 12;
        let (m, d, o) = random_band(t.max(2), &mut rng);
        let (m, d, o) = (&m[..t], &d[..t], &o[..t - 1]);
        let cov = assemble_precision(d, o).unwrap().try_inverse().unwrap();
        let prior = GramFactor::from_covariance(cov, grid(t), 0.0).map_err(|e| e.to_string())?;
        worst_equal = worst_equal.max(kl_band(&vec![0.0; t], d, o, &prior).unwrap().abs());
        let l = rng.random_range(0.3..8.0);
        let kernel = match i % 3 {
            0 => KernelSpec::cauchy(rng.random_range(0.5..2.0), l),
            1 => KernelSpec::rbf(1.0, l),
            _ => KernelSpec::rational_quadratic(1.0, l, rng.random_range(0.5..3.0)),
        };
        let random_prior = gram(&kernel, &grid(t)).map_err(|e| e.to_string())?;
        min_kl = min_kl.min(kl_band(m, d, o, &random_prior).unwrap());
    }
    ensure(
        worst_equal < 1e-8 && min_kl >= -1e-10,
        format!("KL(q=p) max {worst_equal:.1e} (<1e-8); min KL over 1000 random instances {min_kl:.3e} (>=-1e-10)"),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gpvae"))
        .args(args)
        .env_remove("GPVAE_OUTPUT_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "gpvae {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn metric(rows: &[(String, MetricReport)], model: &str, name: &str) -> Result<f64, String> {
    rows.iter()
        .find(|(m, r)| m == model && r.metric == name)
        .map(|(_, r)| r.mean)
        .ok_or_else(|| format!("{model}/{name} missing from the report"))
}

fn end_to_end_ordering(dir: &Path) -> Check {
    let start = Instant::now();
    let out = dir.to_str().unwrap();
    run_cli(&["pipeline", "--out", out, "--seed", "0"])?;
    let secs = start.elapsed().as_secs_f64();
    let rows = read_metrics_csv(&dir.join("report.csv")).map_err(|e| e.to_string())?;
    let mse = |m| metric(&rows, m, "mse");
    let (gp, hi, mean, fwd) = (mse("gpvae")?, mse("hivae")?, mse("mean")?, mse("forward")?);
    let (au_gp, au_mean) = (
        metric(&rows, "gpvae", "auroc")?,
        metric(&rows, "mean", "auroc")?,
    );
    ensure(
        gp < hi && hi < mean && gp < fwd && au_gp >= au_mean && secs < 900.0,
        format!(
            "MSE gpvae {gp:.4} < hivae {hi:.4} < mean {mean:.4}, forward {fwd:.4}; \
             AUROC gpvae {au_gp:.3} >= mean {au_mean:.3}; pipeline {secs:.0}s (<900s)"
        ),
    )
}

fn missingness_mechanisms() -> Check {
    let start = Instant::now();
    let rate = |m: &[bool]| m.iter().filter(|&&b| b).count() as f64 / m.len() as f64;
    let mut notes = Vec::new();
    let mut ok = true;

    let r = rate(&mcar_mask(100, 100, 0.5, 11).unwrap());
    ok &= (0.49..=0.51).contains(&r);
    notes.push(format!("MCAR {r:.4}"));

    let worst_spatial = (0..100)
        .map(|s| (rate(&spatial_mask(16, 16, 3.0, 0.5, s).unwrap()) - 0.5).abs())
        .fold(0.0, f64::max);
    ok &= worst_spatial <= 0.01;
    notes.push(format!("spatial rate error {worst_spatial:.4}"));

    let (t, d) = (50, 1000);
    let pos = temporal_pos_mask(t, d, 2.0, 0.5, 12).unwrap();
    let worst_pos = (0..d)
        .map(|c| ((0..t).filter(|&s| pos[s * d + c]).count() as f64 / t as f64 - 0.5).abs())
        .fold(0.0, f64::max);
    let ac_pos = mean_lag1_autocorrelation(&pos, t, d);
    ok &= worst_pos <= 0.01 && ac_pos > 0.2;
    notes.push(format!(
        "temporal+ rate error {worst_pos:.3}, lag-1 {ac_pos:.3}"
    ));

    let neg = temporal_neg_mask(t, d, 1.0, 0.5, 13).unwrap();
    let r_neg = rate(&neg);
    let ac_neg = mean_lag1_autocorrelation(&neg, t, d);
    ok &= (r_neg - 0.5).abs() <= 0.05 * 0.5 && ac_neg < 0.0;
    notes.push(format!("temporal- rate {r_neg:.3}, lag-1 {ac_neg:.3}"));

    let values: Vec<f64> = (0..10_000).map(|i| (i % 2) as f64).collect();
    let m = mnar_mask(&values, 10, 0.5, 2.0, HighLowRule::Threshold, 14).unwrap();
    let rate_of = |high: bool| {
        let sel: Vec<bool> = values
            .iter()
            .zip(&m)
            .filter(|(v, _)| (**v > 0.5) == high)
            .map(|(_, &b)| b)
            .collect();
        rate(&sel)
    };
    let ratio = rate_of(true) / rate_of(false);
    ok &= (1.8..=2.2).contains(&ratio);
    notes.push(format!("MNAR high:low {ratio:.3}"));

    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    notes.push(format!("{secs:.1}s"));
    ensure(ok, notes.join("; "))
}

fn dpp_oracle() -> Check {
    let instances = [
        DMatrix::from_row_slice(1, 1, &[0.5]),
        DMatrix::from_row_slice(1, 1, &[3.0]),
        DMatrix::identity(2, 2),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]),
        DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 0.3]),
        DMatrix::from_fn(3, 3, |i, j| {
            1.5 * (-((i as f64 - j as f64).powi(2)) / 2.0).exp()
        }),
        DMatrix::from_row_slice(3, 3, &[1.0, 0.6, 0.2, 0.6, 1.0, 0.6, 0.2, 0.6, 1.0]),
        DMatrix::from_row_slice(3, 3, &[4.0, 0.0, 0.0, 0.0, 0.2, 0.1, 0.0, 0.1, 0.2]),
    ];
    let draws = 50_000;
    let mut worst = 0.0f64;
    for (idx, l) in instances.iter().enumerate() {
        let n = l.nrows();
        let marginal = l * (l + DMatrix::identity(n, n)).try_inverse().unwrap();
        let sampler = DppKernel::new(l).map_err(|e| e.to_string())?;
        let mut rng = rng_from(900 + idx as u64);
        let mut single = vec![0usize; n];
        let mut pair = DMatrix::<usize>::zeros(n, n);
        for _ in 0..draws {
            let y = sampler.sample(1.0, &mut rng);
            for &a in &y {
                single[a] += 1;
                for &b in &y {
                    pair[(a, b)] += 1;
                }
            }
        }
        for a in 0..n {
            worst = worst.max((single[a] as f64 / draws as f64 - marginal[(a, a)]).abs());
            for b in 0..n {
                if a != b {
                    let want =
                        marginal[(a, a)] * marginal[(b, b)] - marginal[(a, b)] * marginal[(b, a)];
                    worst = worst.max((pair[(a, b)] as f64 / draws as f64 - want).abs());
                }
            }
        }
    }
    ensure(
        worst <= 0.02,
        format!(
            "max |empirical - K| {worst:.4} (<=0.02) over {} instances with n <= 3, singletons and pairs",
            instances.len()
        ),
    )
}

/// `n` series of one GP draw per channel plus observation noise.
fn gp_batch(
    kernel: &KernelSpec,
    noise_sd: f64,
    n: usize,
    t: usize,
    d: usize,
    seed: u64,
) -> TimeSeriesBatch {
    let ts = unit_timestamps(t);
    let chol = kernel
        .cross(&ts, &ts)
        .map_with_location(|r, c, v| if r == c { v + 1e-9 } else { v });
    let l = chol.cholesky().expect("positive definite").l();
    let mut rng = rng_from(seed);
    let mut values = vec![0.0; n * t * d];
    for i in 0..n {
        for c in 0..d {
            let z = DVector::from_fn(t, |_, _| rng.sample::<f64, _>(StandardNormal));
            let f = &l * z;
            for s in 0..t {
                values[(i * t + s) * d + c] =
                    f[s] + noise_sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    TimeSeriesBatch::fully_observed(n, t, d, values, None).unwrap()
}

fn baseline_exactness() -> Check {
    // mean and forward fixtures, worked by hand
    let x = [1.0, 0.0, 0.0, 4.0, 5.0, 0.0, 3.0, 0.0];
    let m = [false, true, true, false, false, true, false, true];
    let batch =
        TimeSeriesBatch::new(1, 4, 2, x.to_vec(), m.to_vec(), unit_timestamps(4), None).unwrap();
    let mean_ok = mean_impute(&batch) == vec![1.0, 4.0, 3.0, 4.0, 5.0, 4.0, 3.0, 4.0];
    let fwd_ok = forward_impute(&batch) == vec![1.0, 4.0, 1.0, 4.0, 5.0, 4.0, 3.0, 4.0];

    // noise-free GP interpolation through observed points
    let kernel = KernelSpec::rbf(1.0, 2.0).with_jitter(0.0);
    let obs_t = [0.0, 1.5, 3.0, 4.0, 7.0];
    let obs_y = [0.3, -1.0, 0.8, 0.1, 2.0];
    let (mu, _, _) =
        gp_posterior(&kernel, 0.0, &obs_t, &obs_y, &obs_t).map_err(|e| e.to_string())?;
    let interp = mu
        .iter()
        .zip(&obs_y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    // well-specified GP channels: GP regression against mean imputation
    let truth_kernel = KernelSpec::rbf(1.0, 3.0);
    let noise_sd = 0.1;
    let spec = GpRegressionSpec {
        kernel: truth_kernel.clone(),
        noise_variance: noise_sd * noise_sd,
        lengthscale_grid: vec![],
    };
    let mut wins = 0;
    for seed in 0..100 {
        let truth = gp_batch(&truth_kernel, noise_sd, 5, 30, 2, seed);
        let hide = mcar_mask(5 * 30, 2, 0.5, 10_000 + seed).unwrap();
        let masked = truth.with_missing(&hide).unwrap();
        let sl = truth.series_len();
        let (gp, _) = gp_channel_impute(&masked, &spec).map_err(|e| e.to_string())?;
        let gp_mse = mse_missing(&gp, truth.values(), &hide, sl).unwrap().mean;
        let mean_mse = mse_missing(&mean_impute(&masked), truth.values(), &hide, sl)
            .unwrap()
            .mean;
        wins += usize::from(gp_mse < mean_mse);
    }
    ensure(
        mean_ok && fwd_ok && interp < 1e-8 && wins >= 95,
        format!(
            "mean fixture {}, forward fixture {}, interpolation error {interp:.1e} (<1e-8), GP beats mean on {wins}/100 seeds (>=95)",
            if mean_ok { "exact" } else { "wrong" },
            if fwd_ok { "exact" } else { "wrong" }
        ),
    )
}

fn determinism(first: &Path, second: &Path) -> Check {
    let manifest = first.join("manifest.json");
    run_cli(&[
        "pipeline",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ])?;
    let mut files = vec![Path::new("report.csv").to_path_buf()];
    for m in ["gpvae", "hivae", "mean", "forward", "gp"] {
        files.push(Path::new("models").join(m).join("metrics.csv"));
    }
    let mut differing = Vec::new();
    for f in &files {
        let a = std::fs::read(first.join(f)).map_err(|e| format!("{}: {e}", f.display()))?;
        let b = std::fs::read(second.join(f)).map_err(|e| format!("{}: {e}", f.display()))?;
        if a != b {
            differing.push(f.display().to_string());
        }
    }
    ensure(
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "{} metric CSVs byte-identical across two runs from one manifest",
                files.len()
            )
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

type Criterion<'a> = Box<dyn FnOnce() -> Check + 'a>;

fn main() {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let scratch = tempfile::tempdir().expect("temp dir");
    let (run_a, run_b) = (scratch.path().join("a"), scratch.path().join("b"));

    let criteria: Vec<(&str, Criterion)> = vec![
        (
            "structured Gaussian oracles",
            Box::new(structured_gaussian_oracles),
        ),
        ("linear-time sampling", Box::new(linear_time_sampling)),
        ("ELBO gradient check", Box::new(gradient_checks)),
        (
            "rational quadratic reduces to Cauchy",
            Box::new(kernel_identity),
        ),
        ("KL identity and non-negativity", Box::new(kl_identity)),
        (
            "end-to-end ordering",
            Box::new(|| end_to_end_ordering(&run_a)),
        ),
        ("missingness mechanisms", Box::new(missingness_mechanisms)),
        ("DPP marginals", Box::new(dpp_oracle)),
        ("baseline exactness", Box::new(baseline_exactness)),
        ("determinism", Box::new(|| determinism(&run_a, &run_b))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{:>2}] {name}: {detail} ({secs:.1}s)", i + 1);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
