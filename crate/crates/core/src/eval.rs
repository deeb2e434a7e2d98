//! Imputation metrics: masked MSE with per-series standard errors,
//! a one-vs-rest logistic-regression probe and rank-based AUROC.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::stable_sigmoid;
use crate::error::{Error, Result};

/// A metric averaged over series, with the standard error of that mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub mean: f64,
    pub std_error: f64,
    /// Number of series the mean runs over.
    pub n: usize,
}

impl MetricReport {
    /// Mean and standard error (sample std / √n) of per-series values.
    pub fn from_samples(metric: impl Into<String>, samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            samples.iter().sum::<f64>() / n as f64
        };
        let std_error = if n < 2 {
            0.0
        } else {
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        };
        MetricReport {
            metric: metric.into(),
            mean,
            std_error,
            n,
        }
    }

    /// A single value without a spread (e.g. AUROC on one test set).
    pub fn single(metric: impl Into<String>, value: f64, n: usize) -> Self {
        MetricReport {
            metric: metric.into(),
            mean: value,
            std_error: 0.0,
            n,
        }
    }
}

/// Writes `model,metric,mean,std_error,n` rows.
pub fn write_metrics_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "metric", "mean", "std_error", "n"])?;
    for (model, r) in rows {
        w.write_record([
            model.clone(),
            r.metric.clone(),
            r.mean.to_string(),
            r.std_error.to_string(),
            r.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, MetricReport)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 2,
            msg: msg.to_string(),
        };
        if rec.len() != 5 {
            return Err(bad("expected model,metric,mean,std_error,n"));
        }
        out.push((
            rec[0].to_string(),
            MetricReport {
                metric: rec[1].to_string(),
                mean: rec[2].parse().map_err(|_| bad("bad mean"))?,
                std_error: rec[3].parse().map_err(|_| bad("bad std_error"))?,
                n: rec[4].parse().map_err(|_| bad("bad n"))?,
            },
        ));
    }
    Ok(out)
}

/// Squared error over the entries flagged in `eval_mask`, averaged within
/// each series of `series_len` entries, then across series that have at
/// least one flagged entry.
pub fn mse_missing(
    imputed: &[f64],
    truth: &[f64],
    eval_mask: &[bool],
    series_len: usize,
) -> Result<MetricReport> {
    per_series_mean("mse", imputed, truth, eval_mask, series_len, |a, b| {
        (a - b).powi(2)
    })
}

/// Per-series mean of `f(imputed, truth)` over flagged entries.
pub fn per_series_mean(
    metric: &str,
    imputed: &[f64],
    truth: &[f64],
    eval_mask: &[bool],
    series_len: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Result<MetricReport> {
    if imputed.len() != truth.len() || eval_mask.len() != truth.len() {
        return Err(Error::shape(
            "metric",
            "imputed, truth and mask lengths differ",
        ));
    }
    if series_len == 0 || !truth.len().is_multiple_of(series_len) {
        return Err(Error::shape(
            "metric",
            format!("series length {series_len} does not divide {}", truth.len()),
        ));
    }
    let samples: Vec<f64> = (0..truth.len() / series_len)
        .filter_map(|i| {
            let r = i * series_len..(i + 1) * series_len;
            let (sum, count) = r
                .filter(|&k| eval_mask[k])
                .fold((0.0, 0usize), |(s, c), k| {
                    (s + f(imputed[k], truth[k]), c + 1)
                });
            (count > 0).then(|| sum / count as f64)
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::invalid(format!("{metric}: no entries to evaluate")));
    }
    Ok(MetricReport::from_samples(metric, &samples))
}

/// One-vs-rest logistic regression: row `c` of `weights` holds class `c`'s
/// bias followed by its feature weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub weights: DMatrix<f64>,
}

impl LogisticModel {
    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    /// Per-class scores in `(0, 1)`, `n x classes`.
    pub fn predict(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.weights.ncols() - 1;
        assert_eq!(features.ncols(), p, "feature count mismatch");
        let bias = self.weights.column(0);
        let w = self.weights.columns(1, p);
        let mut logits = features * w.transpose();
        for mut row in logits.row_iter_mut() {
            row += bias.transpose();
        }
        logits.map(stable_sigmoid)
    }
}

/// Fits one logistic regression per class by full-batch gradient descent
/// on the mean log-loss plus `l2/2 * |w|^2` (bias unpenalized), starting
/// from zero weights.
pub fn train_logistic(
    features: &DMatrix<f64>,
    labels: &[usize],
    l2: f64,
    iters: usize,
    step: f64,
) -> Result<LogisticModel> {
    let (n, p) = features.shape();
    if labels.len() != n {
        return Err(Error::shape(
            "train_logistic",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let present = (0..classes).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(Error::invalid(
            "logistic regression needs at least two classes",
        ));
    }
    if !(l2 >= 0.0) || !(step > 0.0) {
        return Err(Error::invalid("l2 must be >= 0 and step > 0"));
    }
    let mut weights = DMatrix::zeros(classes, p + 1);
    let design = features.clone().insert_column(0, 1.0);
    for c in 0..classes {
        let y = DVector::from_iterator(n, labels.iter().map(|&l| f64::from(u8::from(l == c))));
        let mut w = DVector::zeros(p + 1);
        for _ in 0..iters {
            let pred = (&design * &w).map(stable_sigmoid);
            let mut grad = design.tr_mul(&(pred - &y)) / n as f64;
            for j in 1..=p {
                grad[j] += l2 * w[j];
            }
            w -= grad * step;
        }
        weights.row_mut(c).copy_from(&w.transpose());
    }
    Ok(LogisticModel { weights })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney statistic with midranks).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", "scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(
            "AUROC needs both positive and negative examples",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Macro-averaged one-vs-rest AUROC over classes that have both positive
/// and negative examples in `labels`.
pub fn macro_auroc(scores: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..scores.ncols() {
        let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if bin.iter().all(|&b| b) || !bin.iter().any(|&b| b) {
            continue;
        }
        total += auroc(scores.column(c).as_slice(), &bin)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid(
            "no class has both positive and negative examples",
        ));
    }
    Ok(total / used as f64)
}

/// Flattens `n` series of `series_len` entries into a feature matrix.
pub fn flatten_features(values: &[f64], series_len: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(values.len() / series_len, series_len, values)
}
