//! Run configuration: a TOML file, overridden field by field from the
//! command line, and recorded in every run's manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gpvae::baselines::GpRegressionSpec;
use gpvae::data::{CsvSchema, GlyphSpec};
use gpvae::kernels::KernelSpec;
use gpvae::missingness::{MaskSpec, Mechanism};
use gpvae::model::TrainConfig;
use gpvae::nets::{DecoderSpec, EncoderSpec, Likelihood, ModelVariant};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Imputation method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gpvae,
    Hivae,
    Vae,
    Mean,
    Forward,
    Gp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Gpvae,
        ModelKind::Hivae,
        ModelKind::Vae,
        ModelKind::Mean,
        ModelKind::Forward,
        ModelKind::Gp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gpvae => "gpvae",
            ModelKind::Hivae => "hivae",
            ModelKind::Vae => "vae",
            ModelKind::Mean => "mean",
            ModelKind::Forward => "forward",
            ModelKind::Gp => "gp",
        }
    }

    /// The network variant, for the trainable kinds.
    pub fn variant(self) -> Option<ModelVariant> {
        match self {
            ModelKind::Gpvae => Some(ModelVariant::GpVae),
            ModelKind::Hivae => Some(ModelVariant::HiVae),
            ModelKind::Vae => Some(ModelVariant::Vae),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown model {s:?} (expected one of gpvae, hivae, vae, mean, forward, gp)"
                )
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(GlyphSpec),
    Csv { path: PathBuf, schema: CsvSchema },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
    /// Standardize channels with statistics of the training split.
    pub normalize: bool,
    /// Use a stored mask (bit-packed `.bin` or 0/1 `.csv`) instead of
    /// generating one from `[mask]`.
    pub mask_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic(GlyphSpec::default()),
            split: [5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0],
            normalize: false,
            mask_file: None,
        }
    }
}

/// Network shape; the data dimensionality is filled in from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            encoder: EncoderSpec {
                input_dim: 0,
                preprocess_width: None,
                conv_layers: 1,
                filters: 128,
                filter_size: 3,
                dense_layers: 1,
                dense_width: 128,
                latent_dim: 16,
            },
            decoder: DecoderSpec {
                layers: 2,
                width: 128,
                output_dim: 0,
                likelihood: Likelihood::Bernoulli,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub l2: f64,
    pub iterations: usize,
    pub step: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            l2: 1e-3,
            iterations: 300,
            step: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Posterior draws for the uncertainty bands.
    pub n_samples: usize,
    pub classifier: ClassifierConfig,
    /// Test series written to each model's `curves.csv`.
    pub curve_series: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 10,
            classifier: ClassifierConfig::default(),
            curve_series: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Model used by `train`, `impute` and `evaluate`.
    pub model: ModelKind,
    /// Models run by `pipeline`, in order.
    pub models: Vec<ModelKind>,
    pub data: DataConfig,
    pub mask: MaskSpec,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub gp: GpRegressionSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: None,
            model: ModelKind::Gpvae,
            models: vec![
                ModelKind::Gpvae,
                ModelKind::Hivae,
                ModelKind::Mean,
                ModelKind::Forward,
                ModelKind::Gp,
            ],
            data: DataConfig::default(),
            mask: MaskSpec::default(),
            network: NetworkConfig::default(),
            train: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 16,
                beta: 0.2,
                kernel: KernelSpec::cauchy(1.0, 1.0),
                ..TrainConfig::default()
            },
            gp: GpRegressionSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub model: Option<ModelKind>,
    pub models: Option<Vec<ModelKind>>,
    pub no_gp_prior: bool,
    pub full_elbo: bool,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub beta: Option<f64>,
    pub latent_dim: Option<usize>,
    pub mask_rate: Option<f64>,
    pub mechanism: Option<Mechanism>,
    pub n_series: Option<usize>,
}

/// Maps a network model onto the ablation selected by the flags: without
/// the GP prior it becomes the masked-ELBO model with a standard-normal
/// prior, and with the full ELBO it becomes the plain VAE.
pub fn apply_ablation(kind: ModelKind, no_gp_prior: bool, full_elbo: bool) -> ModelKind {
    match kind.variant() {
        Some(_) if full_elbo => ModelKind::Vae,
        Some(_) if no_gp_prior => ModelKind::Hivae,
        _ => kind,
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = Some(d.clone());
        }
        if let Some(m) = o.model {
            self.model = m;
        }
        if let Some(ms) = &o.models {
            self.models = ms.clone();
        }
        self.model = apply_ablation(self.model, o.no_gp_prior, o.full_elbo);
        for m in &mut self.models {
            *m = apply_ablation(*m, o.no_gp_prior, o.full_elbo);
        }
        self.models.dedup();
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.learning_rate {
            self.train.learning_rate = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.beta {
            self.train.beta = v;
        }
        if let Some(v) = o.latent_dim {
            self.network.encoder.latent_dim = v;
        }
        if let Some(v) = o.mask_rate {
            self.mask.target_rate = v;
        }
        if let Some(v) = o.mechanism {
            self.mask.mechanism = v;
        }
        if let Some(n) = o.n_series {
            if let DataSource::Synthetic(g) = &mut self.data.source {
                g.n = n;
            }
        }
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |e: gpvae::Error| CliError::Config(e.to_string());
        self.train.validate().map_err(fail)?;
        self.mask.validate().map_err(fail)?;
        self.gp.validate().map_err(fail)?;
        if self.mask.seed != 0 || self.train.seed != 0 {
            return Err(CliError::Config(
                "mask.seed and train.seed are derived from the top-level `seed`; set that instead"
                    .into(),
            ));
        }
        if self.models.is_empty() {
            return Err(CliError::Config("`models` is empty".into()));
        }
        if self.eval.n_samples == 0 {
            return Err(CliError::Config("eval.n_samples must be >= 1".into()));
        }
        let s = self.data.split;
        if s.iter().any(|f| !(*f >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!(
                "data.split {s:?} must be non-negative and sum to 1"
            )));
        }
        if let DataSource::Csv { path, .. } = &self.data.source {
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "data file {} does not exist",
                    path.display()
                )));
            }
        }
        if let Some(p) = &self.data.mask_file {
            if !p.exists() {
                return Err(CliError::Config(format!(
                    "mask file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Output directory: the flag or config value, else `$GPVAE_OUTPUT_DIR`,
    /// else `gpvae-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("gpvae-out"))
    }
}

pub const OUTPUT_DIR_ENV: &str = "GPVAE_OUTPUT_DIR";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            model = "mean"
            [data.source]
            kind = "synthetic"
            n = 20
            [mask]
            mechanism = "temporal_neg"
            target_rate = 0.4
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model, ModelKind::Mean);
        assert!(matches!(
            cfg.data.source,
            DataSource::Synthetic(GlyphSpec { n: 20, .. })
        ));
        assert_eq!(cfg.mask.target_rate, 0.4);
        assert_eq!(cfg.train, RunConfig::default().train);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rte = 1.0").is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(3),
            epochs: Some(2),
            no_gp_prior: true,
            ..Overrides::default()
        });
        assert_eq!(
            (cfg.seed, cfg.train.epochs, cfg.model),
            (3, 2, ModelKind::Hivae)
        );
        assert_eq!(cfg.models[0], ModelKind::Hivae);
        assert_eq!(apply_ablation(ModelKind::Gpvae, true, true), ModelKind::Vae);
        assert_eq!(apply_ablation(ModelKind::Mean, true, true), ModelKind::Mean);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.train.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.split = [0.5, 0.5, 0.5];
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
