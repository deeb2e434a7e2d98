//! Pipeline stages and the files they exchange.
//!
//! Every stage records a key (the configuration it depends on) in a
//! `manifest.json` next to its outputs. A stage whose recorded key matches
//! the current configuration is reused; anything else is recomputed.
//! Output directory layout:
//!
//! ```text
//! manifest.json                      resolved configuration of the last command
//! data/{truth,masked}.bin            ground truth and its artificially masked copy
//! data/mask.{bin,csv}                the artificial mask (true = hidden)
//! data/splits.json, data/norm.json   series splits, standardization statistics
//! models/<m>/model.ckpt, history.csv trained weights and per-epoch objective
//! models/<m>/{imputed,std}.bin       imputations and their spread, all series
//! models/<m>/metrics.{csv,json}      test-split metrics
//! models/<m>/curves.csv              per-entry curves for a few test series
//! report.{csv,md}                    metrics of every model side by side
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gpvae::baselines::{forward_impute, gp_channel_impute, mean_impute};
use gpvae::data::{self, NormStats, TimeSeriesBatch};
use gpvae::eval::{self, MetricReport};
use gpvae::missingness::{self, MaskSpec};
use gpvae::model::{self, TrainConfig};
use gpvae::nets::{init_params, ModelParams, ModelSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{DataSource, ModelKind, RunConfig};
use crate::{CliError, Result};

/// Paths inside an output directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn model_dir(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(kind.name())
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Stage keys recorded in a directory's `manifest.json`.
#[derive(Debug, Default, Serialize, Deserialize)]
struct StageManifest {
    #[serde(default)]
    model: Option<String>,
    stages: BTreeMap<String, Value>,
}

impl StageManifest {
    fn load(dir: &Path) -> Self {
        read_json(&dir.join("manifest.json")).unwrap_or_default()
    }

    fn is_current(dir: &Path, stage: &str, key: &Value, files: &[&str]) -> bool {
        Self::load(dir).stages.get(stage) == Some(key) && files.iter().all(|f| dir.join(f).exists())
    }

    fn record(dir: &Path, model: Option<ModelKind>, stage: &str, key: Value) -> Result<()> {
        let mut m = Self::load(dir);
        m.model = model.map(|k| k.name().to_string());
        m.stages.insert(stage.to_string(), key);
        write_json(&dir.join("manifest.json"), &m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Ground truth, its masked copy and everything derived from them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub truth: TimeSeriesBatch,
    pub masked: TimeSeriesBatch,
    /// Artificial mask only; entries already missing in `truth` are not
    /// flagged unless the mask hides them too.
    pub mask: Vec<bool>,
    pub splits: Splits,
    pub norm: Option<NormStats>,
}

impl Dataset {
    /// Entries that are hidden from the models but known in the ground truth.
    pub fn eval_mask(&self) -> Vec<bool> {
        self.masked
            .mask()
            .iter()
            .zip(self.truth.mask())
            .map(|(&hidden, &unknown)| hidden && !unknown)
            .collect()
    }

    /// Masked series as the networks see them: standardized when
    /// normalization is on.
    pub fn model_input(&self, indices: &[usize]) -> Result<TimeSeriesBatch> {
        let batch = self.masked.select(indices)?;
        Ok(match &self.norm {
            Some(stats) => data::normalize(&batch, Some(stats))?.0,
            None => batch,
        })
    }

    pub fn all_series(&self) -> Vec<usize> {
        (0..self.truth.n()).collect()
    }
}

/// Concatenates the given series of a flat `[n][T][d]` array.
fn gather<T: Copy>(flat: &[T], indices: &[usize], series_len: usize) -> Vec<T> {
    indices
        .iter()
        .flat_map(|&i| flat[i * series_len..(i + 1) * series_len].iter().copied())
        .collect()
}

fn load_mask_file(path: &Path, truth: &TimeSeriesBatch) -> Result<Vec<bool>> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let (mask, dims) = if is_csv {
        missingness::read_mask_csv(path)?
    } else {
        missingness::read_mask(path)?
    };
    let want = [truth.n(), truth.t_len(), truth.dim()];
    if dims != want {
        return Err(CliError::Config(format!(
            "mask file {} has shape {dims:?}, data has {want:?}",
            path.display()
        )));
    }
    Ok(mask)
}

/// Builds the dataset from configuration alone, writing nothing.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let truth = match &cfg.data.source {
        DataSource::Synthetic(spec) => data::generate_rotating_patterns(spec, cfg.seed)?,
        DataSource::Csv { path, schema } => data::load_csv(path, schema)?,
    };
    let mask = match &cfg.data.mask_file {
        Some(path) => load_mask_file(path, &truth)?,
        None => {
            let spec = MaskSpec {
                seed: cfg.seed,
                ..cfg.mask.clone()
            };
            missingness::generate_mask(&spec, &truth)?
        }
    };
    let masked = truth.with_missing(&mask)?;
    let [train, val, test] =
        data::split_indices(truth.n(), truth.labels(), cfg.data.split, cfg.seed)?;
    let norm = if cfg.data.normalize {
        Some(NormStats::fit(&masked.select(&train)?))
    } else {
        None
    };
    log::info!(
        "dataset: {} series, T={}, d={}, {:.1}% missing after masking",
        truth.n(),
        truth.t_len(),
        truth.dim(),
        100.0 * masked.missing_rate()
    );
    Ok(Dataset {
        truth,
        masked,
        mask,
        splits: Splits { train, val, test },
        norm,
    })
}

/// Imputed values and their posterior spread for every series.
#[derive(Clone, Debug, PartialEq)]
pub struct Imputation {
    pub values: Vec<f64>,
    pub std: Vec<f64>,
}

fn as_batch(like: &TimeSeriesBatch, values: Vec<f64>) -> Result<TimeSeriesBatch> {
    let len = values.len();
    Ok(TimeSeriesBatch::new(
        like.n(),
        like.t_len(),
        like.dim(),
        values,
        vec![false; len],
        like.timestamps().to_vec(),
        like.labels().map(<[usize]>::to_vec),
    )?)
}

/// Runs stages for one configuration against one output directory.
pub struct Runner {
    cfg: RunConfig,
    ws: Workspace,
    force: bool,
}

impl Runner {
    /// Validates the configuration. With `force`, prerequisites are
    /// recomputed even when their recorded keys match.
    pub fn new(cfg: RunConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        let ws = Workspace::new(cfg.resolved_output_dir());
        Ok(Runner { cfg, ws, force })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    /// Records the resolved configuration at the top of the output
    /// directory; `--manifest` replays it.
    pub fn write_run_manifest(&self, command: &str) -> Result<()> {
        create_dir(self.ws.root())?;
        write_json(
            &self.ws.root().join("manifest.json"),
            &json!({
                "gpvae_version": env!("CARGO_PKG_VERSION"),
                "command": command,
                "config": self.cfg,
            }),
        )
    }

    fn data_key(&self) -> Value {
        json!({ "seed": self.cfg.seed, "data": self.cfg.data, "mask": self.cfg.mask })
    }

    fn train_key(&self, kind: ModelKind) -> Value {
        let mut key = json!({ "data": self.data_key(), "model": kind });
        if kind.variant().is_some() {
            key["network"] = json!(self.cfg.network);
            key["train"] = json!(self.cfg.train);
        }
        if kind == ModelKind::Gp {
            key["gp"] = json!(self.cfg.gp);
        }
        key
    }

    fn impute_key(&self, kind: ModelKind) -> Value {
        let mut key = json!({ "train": self.train_key(kind) });
        if kind.variant().is_some() {
            key["n_samples"] = json!(self.cfg.eval.n_samples);
        }
        key
    }

    fn eval_key(&self, kind: ModelKind) -> Value {
        json!({ "impute": self.impute_key(kind), "classifier": self.cfg.eval.classifier })
    }

    // --- data ---------------------------------------------------------------

    /// Builds the dataset and writes it under `data/`.
    pub fn generate(&self) -> Result<Dataset> {
        let ds = build_dataset(&self.cfg)?;
        let dir = self.ws.data_dir();
        create_dir(&dir)?;
        ds.truth.save(&dir.join("truth.bin"))?;
        ds.masked.save(&dir.join("masked.bin"))?;
        let (n, t, d) = (ds.truth.n(), ds.truth.t_len(), ds.truth.dim());
        missingness::write_mask(&dir.join("mask.bin"), &ds.mask, n, t, d)?;
        missingness::write_mask_csv(&dir.join("mask.csv"), &ds.mask, n, t, d)?;
        write_json(&dir.join("splits.json"), &ds.splits)?;
        let norm_path = dir.join("norm.json");
        match &ds.norm {
            Some(stats) => write_json(&norm_path, stats)?,
            None if norm_path.exists() => {
                fs::remove_file(&norm_path).map_err(|source| CliError::Io {
                    path: norm_path.clone(),
                    source,
                })?
            }
            None => {}
        }
        StageManifest::record(&dir, None, "generate", self.data_key())?;
        log::info!("wrote dataset to {}", dir.display());
        Ok(ds)
    }

    /// The stored dataset when it matches the configuration, else a fresh one.
    pub fn dataset(&self) -> Result<Dataset> {
        let dir = self.ws.data_dir();
        let files = ["truth.bin", "masked.bin", "mask.bin", "splits.json"];
        if self.force || !StageManifest::is_current(&dir, "generate", &self.data_key(), &files) {
            return self.generate();
        }
        let truth = TimeSeriesBatch::load(&dir.join("truth.bin"))?;
        let masked = TimeSeriesBatch::load(&dir.join("masked.bin"))?;
        let (mask, _) = missingness::read_mask(&dir.join("mask.bin"))?;
        let splits = read_json(&dir.join("splits.json"))?;
        let norm = if self.cfg.data.normalize {
            Some(read_json(&dir.join("norm.json"))?)
        } else {
            None
        };
        Ok(Dataset {
            truth,
            masked,
            mask,
            splits,
            norm,
        })
    }

    // --- training -----------------------------------------------------------

    /// Network spec for `kind`, sized to the data.
    pub fn model_spec(&self, kind: ModelKind, data: &TimeSeriesBatch) -> Option<ModelSpec> {
        let variant = kind.variant()?;
        let mut encoder = self.cfg.network.encoder.clone();
        let mut decoder = self.cfg.network.decoder.clone();
        encoder.input_dim = data.dim();
        decoder.output_dim = data.dim();
        Some(ModelSpec {
            encoder,
            decoder,
            variant,
        })
    }

    /// Trains `kind` on the masked training split. Baselines have nothing
    /// to train and return `None`.
    pub fn train(&self, ds: &Dataset, kind: ModelKind) -> Result<Option<ModelParams>> {
        let dir = self.ws.model_dir(kind);
        create_dir(&dir)?;
        let Some(spec) = self.model_spec(kind, &ds.truth) else {
            log::info!("{kind}: nothing to train");
            StageManifest::record(&dir, Some(kind), "train", self.train_key(kind))?;
            return Ok(None);
        };
        let init = init_params(&spec, self.cfg.seed)?;
        let train_cfg = TrainConfig {
            seed: self.cfg.seed,
            ..self.cfg.train.clone()
        };
        let input = ds.model_input(&ds.splits.train)?;
        log::info!(
            "{kind}: training on {} series, {} weights",
            input.n(),
            init.num_weights()
        );
        let outcome = match model::train(&input, init, &train_cfg) {
            Ok(o) => o,
            Err(e) => {
                if let gpvae::Error::Diverged { last_good, .. } = &e {
                    let path = dir.join("model.diverged.ckpt");
                    last_good.save(&path)?;
                    log::warn!(
                        "{kind}: saved the last finite weights to {}",
                        path.display()
                    );
                }
                return Err(e.into());
            }
        };
        outcome.params.save(&dir.join("model.ckpt"))?;
        let mut history = String::from("epoch,objective\n");
        for (e, v) in outcome.history.iter().enumerate() {
            writeln!(history, "{},{v}", e + 1).expect("write to string");
        }
        write_text(&dir.join("history.csv"), &history)?;
        StageManifest::record(&dir, Some(kind), "train", self.train_key(kind))?;
        Ok(Some(outcome.params))
    }

    /// Trained weights for `kind`, training first if needed.
    pub fn trained(&self, ds: &Dataset, kind: ModelKind) -> Result<Option<ModelParams>> {
        let dir = self.ws.model_dir(kind);
        let files: &[&str] = if kind.variant().is_some() {
            &["model.ckpt"]
        } else {
            &[]
        };
        if self.force || !StageManifest::is_current(&dir, "train", &self.train_key(kind), files) {
            return self.train(ds, kind);
        }
        if kind.variant().is_none() {
            return Ok(None);
        }
        Ok(Some(ModelParams::load(&dir.join("model.ckpt"))?))
    }

    // --- imputation ---------------------------------------------------------

    /// Imputes every series of the masked data and writes the result.
    pub fn impute(&self, ds: &Dataset, kind: ModelKind) -> Result<Imputation> {
        let params = self.trained(ds, kind)?;
        let masked = &ds.masked;
        let (mut values, mut std) = match (kind, &params) {
            (ModelKind::Mean, _) => (mean_impute(masked), vec![0.0; masked.values().len()]),
            (ModelKind::Forward, _) => (forward_impute(masked), vec![0.0; masked.values().len()]),
            (ModelKind::Gp, _) => {
                let (v, var) = gp_channel_impute(masked, &self.cfg.gp)?;
                (v, var.into_iter().map(f64::sqrt).collect())
            }
            (_, Some(params)) => {
                let input = ds.model_input(&ds.all_series())?;
                let r = model::impute(params, &input, self.cfg.eval.n_samples, self.cfg.seed)?;
                match &ds.norm {
                    Some(stats) => {
                        let d = stats.std.len();
                        let std = r
                            .std
                            .iter()
                            .enumerate()
                            .map(|(k, s)| s * stats.std[k % d])
                            .collect();
                        (data::denormalize(&r.values, stats), std)
                    }
                    None => (r.values, r.std),
                }
            }
            (_, None) => unreachable!("network models always have weights"),
        };
        for (k, &hidden) in masked.mask().iter().enumerate() {
            if !hidden {
                values[k] = masked.values()[k];
                std[k] = 0.0;
            }
        }
        let dir = self.ws.model_dir(kind);
        as_batch(masked, values.clone())?.save(&dir.join("imputed.bin"))?;
        as_batch(masked, std.clone())?.save(&dir.join("std.bin"))?;
        StageManifest::record(&dir, Some(kind), "impute", self.impute_key(kind))?;
        Ok(Imputation { values, std })
    }

    pub fn imputed(&self, ds: &Dataset, kind: ModelKind) -> Result<Imputation> {
        let dir = self.ws.model_dir(kind);
        let files = ["imputed.bin", "std.bin"];
        if self.force || !StageManifest::is_current(&dir, "impute", &self.impute_key(kind), &files)
        {
            return self.impute(ds, kind);
        }
        Ok(Imputation {
            values: TimeSeriesBatch::load(&dir.join("imputed.bin"))?
                .values()
                .to_vec(),
            std: TimeSeriesBatch::load(&dir.join("std.bin"))?
                .values()
                .to_vec(),
        })
    }

    // --- evaluation ---------------------------------------------------------

    /// Test-split metrics: MSE on hidden entries, their NLL for the
    /// networks, and macro AUROC of a logistic classifier on the imputed
    /// series when labels exist.
    pub fn evaluate(&self, ds: &Dataset, kind: ModelKind) -> Result<Vec<MetricReport>> {
        let imp = self.imputed(ds, kind)?;
        let sl = ds.truth.series_len();
        let test = &ds.splits.test;
        let eval_mask = gather(&ds.eval_mask(), test, sl);
        let truth = gather(ds.truth.values(), test, sl);
        let mut reports = Vec::new();
        if eval_mask.iter().any(|&m| m) {
            reports.push(eval::mse_missing(
                &gather(&imp.values, test, sl),
                &truth,
                &eval_mask,
                sl,
            )?);
            if kind.variant().is_some() {
                let params = ModelParams::load(&self.ws.model_dir(kind).join("model.ckpt"))?;
                let truth_batch = ds.truth.select(test)?;
                let truth_in = match &ds.norm {
                    Some(stats) => data::normalize(&truth_batch, Some(stats))?.0,
                    None => truth_batch,
                };
                let nll = model::nll_missing(
                    &params,
                    &ds.model_input(test)?,
                    truth_in.values(),
                    &eval_mask,
                )?;
                reports.push(MetricReport::single("nll", nll, test.len()));
            }
        } else {
            log::warn!("{kind}: no hidden entries in the test split; skipping MSE and NLL");
        }
        if let Some(auroc) = self.classify(ds, &imp)? {
            reports.push(MetricReport::single("auroc", auroc, test.len()));
        }
        let dir = self.ws.model_dir(kind);
        let rows: Vec<(String, MetricReport)> = reports
            .iter()
            .map(|r| (kind.name().to_string(), r.clone()))
            .collect();
        eval::write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
        write_json(&dir.join("metrics.json"), &reports)?;
        StageManifest::record(&dir, Some(kind), "evaluate", self.eval_key(kind))?;
        for r in &reports {
            log::info!(
                "{kind}: {} = {:.5} (± {:.5}, n = {})",
                r.metric,
                r.mean,
                r.std_error,
                r.n
            );
        }
        Ok(reports)
    }

    fn classify(&self, ds: &Dataset, imp: &Imputation) -> Result<Option<f64>> {
        let Some(labels) = ds.truth.labels() else {
            return Ok(None);
        };
        let (train, test) = (&ds.splits.train, &ds.splits.test);
        let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let test_labels: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let distinct = |l: &[usize]| l.iter().any(|&x| x != l[0]);
        if train_labels.is_empty()
            || test_labels.is_empty()
            || !distinct(&train_labels)
            || !distinct(&test_labels)
        {
            log::warn!(
                "labels do not cover two classes in both train and test splits; skipping AUROC"
            );
            return Ok(None);
        }
        let sl = ds.truth.series_len();
        let c = &self.cfg.eval.classifier;
        let features = eval::flatten_features(&gather(&imp.values, train, sl), sl);
        let clf = eval::train_logistic(&features, &train_labels, c.l2, c.iterations, c.step)?;
        let scores = clf.predict(&eval::flatten_features(&gather(&imp.values, test, sl), sl));
        Ok(Some(eval::macro_auroc(&scores, &test_labels)?))
    }

    pub fn evaluated(&self, ds: &Dataset, kind: ModelKind) -> Result<Vec<MetricReport>> {
        let dir = self.ws.model_dir(kind);
        if self.force
            || !StageManifest::is_current(&dir, "evaluate", &self.eval_key(kind), &["metrics.json"])
        {
            return self.evaluate(ds, kind);
        }
        read_json(&dir.join("metrics.json"))
    }

    // --- reporting ----------------------------------------------------------

    /// Collects the metrics of every configured model into `report.csv` and
    /// `report.md`, and writes `curves.csv` per model. Requires each model
    /// to have been evaluated.
    pub fn report(&self, ds: &Dataset) -> Result<Vec<(String, MetricReport)>> {
        let mut rows = Vec::new();
        for &kind in &self.cfg.models {
            let dir = self.ws.model_dir(kind);
            let path = dir.join("metrics.csv");
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "no metrics for {kind} in {}; run `evaluate` or `pipeline` first",
                    self.ws.root().display()
                )));
            }
            rows.extend(eval::read_metrics_csv(&path)?);
            let imputed = TimeSeriesBatch::load(&dir.join("imputed.bin"))?;
            let std = TimeSeriesBatch::load(&dir.join("std.bin"))?;
            write_text(
                &dir.join("curves.csv"),
                &self.curves(ds, imputed.values(), std.values()),
            )?;
        }
        eval::write_metrics_csv(&self.ws.root().join("report.csv"), &rows)?;
        write_text(&self.ws.root().join("report.md"), &markdown_table(&rows))?;
        Ok(rows)
    }

    fn curves(&self, ds: &Dataset, imputed: &[f64], std: &[f64]) -> String {
        let (d, sl) = (ds.truth.dim(), ds.truth.series_len());
        let ts = ds.truth.timestamps();
        let cell = |v: f64, missing: bool| {
            if missing {
                String::new()
            } else {
                v.to_string()
            }
        };
        let mut out = String::from("series_id,time,channel,truth,observed,imputed,std\n");
        for &i in ds.splits.test.iter().take(self.cfg.eval.curve_series) {
            for (t, time) in ts.iter().enumerate() {
                for c in 0..d {
                    let k = i * sl + t * d + c;
                    writeln!(
                        out,
                        "{i},{time},{c},{},{},{},{}",
                        cell(ds.truth.values()[k], ds.truth.mask()[k]),
                        cell(ds.masked.values()[k], ds.masked.mask()[k]),
                        imputed[k],
                        std[k]
                    )
                    .expect("write to string");
                }
            }
        }
        out
    }

    /// Generates data if needed, then trains, imputes and evaluates every
    /// configured model and writes the report.
    pub fn pipeline(&self) -> Result<Vec<(String, MetricReport)>> {
        let ds = self.dataset()?;
        for &kind in &self.cfg.models {
            self.evaluated(&ds, kind)?;
        }
        self.report(&ds)
    }
}

fn markdown_table(rows: &[(String, MetricReport)]) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut metrics: Vec<&str> = Vec::new();
    for (m, r) in rows {
        if !models.contains(&m.as_str()) {
            models.push(m);
        }
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    let mut out = format!(
        "| model | {} |\n|---|{}\n",
        metrics.join(" | "),
        "---|".repeat(metrics.len())
    );
    for m in models {
        let cells: Vec<String> = metrics
            .iter()
            .map(|metric| {
                rows.iter()
                    .find(|(mm, r)| mm == m && r.metric == *metric)
                    .map_or(String::from("–"), |(_, r)| {
                        if r.std_error > 0.0 {
                            format!("{:.4} ± {:.4}", r.mean, r.std_error)
                        } else {
                            format!("{:.4}", r.mean)
                        }
                    })
            })
            .collect();
        writeln!(out, "| {m} | {} |", cells.join(" | ")).expect("write to string");
    }
    out
}
