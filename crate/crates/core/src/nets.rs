//! Inference network (temporal CNN + dense head emitting `T x 3k` posterior
//! parameters) and the per-time-step MLP decoder.
//!
//! Encoder: optional per-step dense preprocessing layer, `conv_layers`
//! same-padded temporal convolutions, `dense_layers` hidden dense layers,
//! then a linear head with `3k` outputs per time step. Head columns
//! `0..k` are the means, `k..2k` the raw band diagonals (mapped through
//! softplus), `2k..3k` the band super-diagonals; the super-diagonal of the
//! final step is dropped since `B` has only `T - 1` of them. All hidden
//! activations are ReLU.
//!
//! Decoder: `layers` hidden ReLU layers applied independently at each time
//! step, then a linear output layer producing Gaussian means or Bernoulli
//! logits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stable_sigmoid, Tape, Tensor, Var};
use crate::binio::*;
use crate::error::{Error, Result};
use crate::structured_gaussian::StructuredPosterior;

/// Raw head bias that makes `softplus(bias) = 1`.
pub const UNIT_SOFTPLUS_BIAS: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    /// Data dimensionality `d`.
    pub input_dim: usize,
    /// Width of the per-step dense preprocessing layer, if any.
    pub preprocess_width: Option<usize>,
    pub conv_layers: usize,
    pub filters: usize,
    /// Receptive-field width of each temporal convolution, in time steps.
    pub filter_size: usize,
    pub dense_layers: usize,
    pub dense_width: usize,
    pub latent_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            input_dim: 1,
            preprocess_width: None,
            conv_layers: 1,
            filters: 256,
            filter_size: 3,
            dense_layers: 2,
            dense_width: 256,
            latent_dim: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Likelihood {
    Gaussian { sigma2: f64 },
    Bernoulli,
}

impl Default for Likelihood {
    fn default() -> Self {
        Likelihood::Gaussian { sigma2: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSpec {
    /// Number of hidden layers before the output layer.
    pub layers: usize,
    pub width: usize,
    pub output_dim: usize,
    pub likelihood: Likelihood,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            layers: 3,
            width: 256,
            output_dim: 1,
            likelihood: Likelihood::default(),
        }
    }
}

/// Which member of the model family is trained.
///
/// * `GpVae`: GP prior over latent trajectories, tridiagonal-precision
///   posterior, likelihood on observed entries only.
/// * `HiVae`: standard-normal prior, diagonal posterior, likelihood on
///   observed entries only.
/// * `Vae`: standard-normal prior, diagonal posterior, likelihood on every
///   entry (missing ones read as their zero fill).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    #[default]
    GpVae,
    HiVae,
    Vae,
}

impl ModelVariant {
    pub fn gp_prior(self) -> bool {
        matches!(self, ModelVariant::GpVae)
    }

    pub fn structured_posterior(self) -> bool {
        matches!(self, ModelVariant::GpVae)
    }

    pub fn masked_likelihood(self) -> bool {
        !matches!(self, ModelVariant::Vae)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::GpVae => "gpvae",
            ModelVariant::HiVae => "hivae",
            ModelVariant::Vae => "vae",
        }
    }

    fn tag(self) -> u8 {
        match self {
            ModelVariant::GpVae => 0,
            ModelVariant::HiVae => 1,
            ModelVariant::Vae => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => ModelVariant::GpVae,
            1 => ModelVariant::HiVae,
            2 => ModelVariant::Vae,
            _ => return Err(Error::Format(format!("unknown model variant tag {t}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub variant: ModelVariant,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        if e.latent_dim == 0 || e.input_dim == 0 {
            return Err(Error::invalid("latent_dim and input_dim must be >= 1"));
        }
        if e.conv_layers > 0 && (e.filters == 0 || e.filter_size == 0) {
            return Err(Error::invalid(
                "conv layers need filters >= 1 and filter_size >= 1",
            ));
        }
        if e.dense_layers > 0 && e.dense_width == 0 {
            return Err(Error::invalid("dense_width must be >= 1"));
        }
        if e.preprocess_width == Some(0) {
            return Err(Error::invalid("preprocess_width must be >= 1"));
        }
        if d.output_dim != e.input_dim {
            return Err(Error::invalid(format!(
                "decoder output_dim {} does not match data dimensionality {}",
                d.output_dim, e.input_dim
            )));
        }
        if d.layers > 0 && d.width == 0 {
            return Err(Error::invalid("decoder width must be >= 1"));
        }
        if let Likelihood::Gaussian { sigma2 } = d.likelihood {
            if !(sigma2 > 0.0) {
                return Err(Error::invalid("likelihood sigma2 must be positive"));
            }
        }
        Ok(())
    }

    /// `(name, shape)` of every weight tensor, encoder first.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let e = &self.encoder;
        let mut out = Vec::new();
        let mut width = e.input_dim;
        if let Some(p) = e.preprocess_width {
            out.push(("enc.pre.w".into(), vec![width, p]));
            out.push(("enc.pre.b".into(), vec![p]));
            width = p;
        }
        for i in 0..e.conv_layers {
            out.push((
                format!("enc.conv{i}.w"),
                vec![e.filter_size, width, e.filters],
            ));
            out.push((format!("enc.conv{i}.b"), vec![e.filters]));
            width = e.filters;
        }
        for i in 0..e.dense_layers {
            out.push((format!("enc.dense{i}.w"), vec![width, e.dense_width]));
            out.push((format!("enc.dense{i}.b"), vec![e.dense_width]));
            width = e.dense_width;
        }
        out.push(("enc.head.w".into(), vec![width, 3 * e.latent_dim]));
        out.push(("enc.head.b".into(), vec![3 * e.latent_dim]));

        let d = &self.decoder;
        let mut width = e.latent_dim;
        for i in 0..d.layers {
            out.push((format!("dec.dense{i}.w"), vec![width, d.width]));
            out.push((format!("dec.dense{i}.b"), vec![d.width]));
            width = d.width;
        }
        out.push(("dec.out.w".into(), vec![width, d.output_dim]));
        out.push(("dec.out.b".into(), vec![d.output_dim]));
        out
    }

    fn encoder_tensor_count(&self) -> usize {
        let e = &self.encoder;
        2 * (usize::from(e.preprocess_width.is_some()) + e.conv_layers + e.dense_layers + 1)
    }
}

/// Trained (or freshly initialized) weights together with the spec that
/// shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    /// KL tradeoff the weights were trained with.
    pub beta: f64,
    pub tensors: Vec<Tensor>,
}

/// Fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero biases,
/// except the band-diagonal part of the encoder head bias, which starts at
/// `softplus⁻¹(1)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = crate::rng::child_rng(seed, crate::rng::stream::INIT);
    let k = spec.encoder.latent_dim;
    let tensors = spec
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with(".b") {
                let mut t = Tensor::zeros(&shape);
                if name == "enc.head.b" {
                    t.data_mut()[k..2 * k].fill(UNIT_SOFTPLUS_BIAS);
                }
                t
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let a = 1.0 / (fan_in.max(1) as f64).sqrt();
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.random_range(-a..a)).collect())
                    .expect("layout shape")
            }
        })
        .collect();
    Ok(ModelParams {
        spec: spec.clone(),
        beta: 1.0,
        tensors,
    })
}

/// Parameter tensors registered on a tape.
pub struct ParamVars {
    pub vars: Vec<Var>,
    encoder_count: usize,
}

/// Posterior parameters for a batch, each `[batch, T, k]`.
pub struct EncoderOut {
    pub means: Var,
    pub diag: Var,
    pub off: Var,
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    let shape = tape.value(h).shape().to_vec();
    let bb = tape.broadcast(b, &shape)?;
    tape.add(h, bb)
}

impl ModelParams {
    pub fn latent_dim(&self) -> usize {
        self.spec.encoder.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.spec.encoder.input_dim
    }

    pub fn likelihood(&self) -> Likelihood {
        self.spec.decoder.likelihood
    }

    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Registers the weights as differentiable leaves.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
            encoder_count: self.spec.encoder_tensor_count(),
        }
    }

    /// Registers the weights as constants (no gradient bookkeeping).
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
            encoder_count: self.spec.encoder_tensor_count(),
        }
    }

    /// Encoder forward pass on `x`: `[batch, T, d]`, zero-filled.
    pub fn encoder_forward(&self, tape: &mut Tape, p: &ParamVars, x: Var) -> Result<EncoderOut> {
        let e = &self.spec.encoder;
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != e.input_dim || shape[1] == 0 {
            return Err(Error::shape(
                "encode",
                format!("input {shape:?}, expected [batch, T, {}]", e.input_dim),
            ));
        }
        let (nb, t_len) = (shape[0], shape[1]);
        let rows = nb * t_len;
        let mut params = p.vars[..p.encoder_count].chunks(2);
        let mut next = || {
            let c = params.next().expect("layout");
            (c[0], c[1])
        };

        let mut h = x;
        let mut width = e.input_dim;
        if let Some(pw) = e.preprocess_width {
            let (w, b) = next();
            let flat = tape.reshape(h, &[rows, width])?;
            let o = dense(tape, flat, w, b)?;
            let o = tape.relu(o)?;
            h = tape.reshape(o, &[nb, t_len, pw])?;
            width = pw;
        }
        for _ in 0..e.conv_layers {
            let (w, b) = next();
            let c = tape.conv1d_same(h, w)?;
            let bb = tape.broadcast(b, &[nb, t_len, e.filters])?;
            let c = tape.add(c, bb)?;
            h = tape.relu(c)?;
            width = e.filters;
        }
        let mut flat = tape.reshape(h, &[rows, width])?;
        for _ in 0..e.dense_layers {
            let (w, b) = next();
            let o = dense(tape, flat, w, b)?;
            flat = tape.relu(o)?;
        }
        let (w, b) = next();
        let head = dense(tape, flat, w, b)?;
        let k = e.latent_dim;
        let head = tape.reshape(head, &[nb, t_len, 3 * k])?;
        let means = tape.slice_last(head, 0, k)?;
        let raw_diag = tape.slice_last(head, k, 2 * k)?;
        let diag = tape.softplus(raw_diag)?;
        let off = if self.spec.variant.structured_posterior() {
            tape.slice_last(head, 2 * k, 3 * k)?
        } else {
            tape.constant(Tensor::zeros(&[nb, t_len, k]))
        };
        Ok(EncoderOut { means, diag, off })
    }

    /// Decoder forward pass on `z`: `[batch, T, k]`. Returns Gaussian means
    /// or Bernoulli logits, `[batch, T, d]`.
    pub fn decoder_forward(&self, tape: &mut Tape, p: &ParamVars, z: Var) -> Result<Var> {
        let shape = tape.value(z).shape().to_vec();
        let k = self.latent_dim();
        if shape.len() != 3 || shape[2] != k {
            return Err(Error::shape("decode", format!("latent {shape:?}, k={k}")));
        }
        let (nb, t_len) = (shape[0], shape[1]);
        let mut h = tape.reshape(z, &[nb * t_len, k])?;
        let dec = &p.vars[p.encoder_count..];
        let (hidden, out) = dec.split_at(dec.len() - 2);
        for c in hidden.chunks(2) {
            let o = dense(tape, h, c[0], c[1])?;
            h = tape.relu(o)?;
        }
        let o = dense(tape, h, out[0], out[1])?;
        tape.reshape(o, &[nb, t_len, self.data_dim()])
    }

    /// Posteriors for a batch of zero-filled series, `values` and `mask`
    /// laid out `[batch, T, d]` with `mask[i] = true` for missing entries.
    pub fn encode_batch(
        &self,
        values: &[f64],
        mask: &[bool],
        n: usize,
        t_len: usize,
    ) -> Result<Vec<StructuredPosterior>> {
        let d = self.data_dim();
        if values.len() != n * t_len * d || mask.len() != values.len() {
            return Err(Error::shape(
                "encode",
                format!(
                    "{} values / {} mask entries for [{n}, {t_len}, {d}]",
                    values.len(),
                    mask.len()
                ),
            ));
        }
        let filled: Vec<f64> = values
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { 0.0 } else { v })
            .collect();
        let mut tape = Tape::new();
        let p = self.register_frozen(&mut tape);
        let x = tape.constant(Tensor::new(vec![n, t_len, d], filled)?);
        let out = self.encoder_forward(&mut tape, &p, x)?;
        let k = self.latent_dim();
        let (m, dg, o) = (
            tape.value(out.means),
            tape.value(out.diag),
            tape.value(out.off),
        );
        (0..n)
            .map(|b| {
                let pick = |t: &Tensor, cols: usize| {
                    DMatrix::from_fn(k, cols, |j, s| t.data()[(b * t_len + s) * k + j])
                };
                StructuredPosterior::new(pick(m, t_len), pick(dg, t_len), pick(o, t_len - 1))
            })
            .collect()
    }

    /// Posterior for one series, `x` being `T x d` with zeros at missing
    /// entries.
    pub fn encode(&self, x: &DMatrix<f64>, mask: &DMatrix<bool>) -> Result<StructuredPosterior> {
        if x.shape() != mask.shape() || x.ncols() != self.data_dim() {
            return Err(Error::shape(
                "encode",
                format!(
                    "values {:?}, mask {:?}, d={}",
                    x.shape(),
                    mask.shape(),
                    self.data_dim()
                ),
            ));
        }
        let t_len = x.nrows();
        let values: Vec<f64> = (0..t_len)
            .flat_map(|t| x.row(t).iter().copied().collect::<Vec<_>>())
            .collect();
        let m: Vec<bool> = (0..t_len)
            .flat_map(|t| mask.row(t).iter().copied().collect::<Vec<_>>())
            .collect();
        Ok(self.encode_batch(&values, &m, 1, t_len)?.remove(0))
    }

    /// Raw decoder outputs (means or logits) for latents `[batch, T, k]`.
    pub fn decode_raw(&self, z: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.register_frozen(&mut tape);
        let zv = tape.constant(z);
        let out = self.decoder_forward(&mut tape, &p, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Likelihood parameters for a latent trajectory `z` (`T x k`): Gaussian
    /// means, or Bernoulli probabilities in `(0, 1)`.
    pub fn decode(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (t_len, k) = z.shape();
        if k != self.latent_dim() {
            return Err(Error::shape(
                "decode",
                format!("z has {k} columns, k={}", self.latent_dim()),
            ));
        }
        let flat: Vec<f64> = (0..t_len)
            .flat_map(|t| z.row(t).iter().copied().collect::<Vec<_>>())
            .collect();
        let raw = self.decode_raw(Tensor::new(vec![1, t_len, k], flat)?)?;
        let d = self.data_dim();
        let link = self.output_link();
        Ok(DMatrix::from_fn(t_len, d, |t, c| {
            link(raw.data()[t * d + c])
        }))
    }

    /// Map from raw decoder output to the likelihood's mean parameter.
    pub fn output_link(&self) -> fn(f64) -> f64 {
        match self.likelihood() {
            Likelihood::Gaussian { .. } => |v| v,
            Likelihood::Bernoulli => stable_sigmoid,
        }
    }

    /// Writes the checkpoint format documented in `docs/FORMATS.md`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(w, CHECKPOINT_VERSION)?;
        let e = &self.spec.encoder;
        for v in [
            e.input_dim,
            e.preprocess_width.unwrap_or(0),
            e.conv_layers,
            e.filters,
            e.filter_size,
            e.dense_layers,
            e.dense_width,
            e.latent_dim,
        ] {
            write_u32(w, v as u32)?;
        }
        let d = &self.spec.decoder;
        for v in [d.layers, d.width, d.output_dim] {
            write_u32(w, v as u32)?;
        }
        match d.likelihood {
            Likelihood::Gaussian { sigma2 } => {
                write_u8(w, 0)?;
                write_f64(w, sigma2)?;
            }
            Likelihood::Bernoulli => {
                write_u8(w, 1)?;
                write_f64(w, 0.0)?;
            }
        }
        write_u8(w, self.spec.variant.tag())?;
        write_f64(w, self.beta)?;
        write_u32(w, self.tensors.len() as u32)?;
        for t in &self.tensors {
            write_u32(w, t.shape().len() as u32)?;
            for &s in t.shape() {
                write_u64(w, s as u64)?;
            }
            write_f64s(w, t.data())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        expect_magic(r, CHECKPOINT_MAGIC)?;
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut u = || -> Result<usize> { Ok(read_u32(r)? as usize) };
        let encoder = EncoderSpec {
            input_dim: u()?,
            preprocess_width: Some(u()?).filter(|&p| p > 0),
            conv_layers: u()?,
            filters: u()?,
            filter_size: u()?,
            dense_layers: u()?,
            dense_width: u()?,
            latent_dim: u()?,
        };
        let (layers, width, output_dim) = (u()?, u()?, u()?);
        let lik_tag = read_u8(r)?;
        let sigma2 = read_f64(r)?;
        let likelihood = match lik_tag {
            0 => Likelihood::Gaussian { sigma2 },
            1 => Likelihood::Bernoulli,
            t => return Err(Error::Format(format!("unknown likelihood tag {t}"))),
        };
        let variant = ModelVariant::from_tag(read_u8(r)?)?;
        let beta = read_f64(r)?;
        let spec = ModelSpec {
            encoder,
            decoder: DecoderSpec {
                layers,
                width,
                output_dim,
                likelihood,
            },
            variant,
        };
        spec.validate()
            .map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
        let layout = spec.layout();
        let count = read_u32(r)? as usize;
        if count != layout.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, spec needs {}",
                layout.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in layout {
            let ndim = read_u32(r)? as usize;
            let dims = (0..ndim)
                .map(|_| read_usize(r))
                .collect::<Result<Vec<_>>>()?;
            if dims != shape {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {dims:?}, expected {shape:?}"
                )));
            }
            let n = dims.iter().product();
            tensors.push(Tensor::new(dims, read_f64s(r, n)?)?);
        }
        Ok(ModelParams {
            spec,
            beta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GPVAECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    pub(crate) fn tiny_spec(likelihood: Likelihood) -> ModelSpec {
        ModelSpec {
            encoder: EncoderSpec {
                input_dim: 3,
                preprocess_width: None,
                conv_layers: 1,
                filters: 5,
                filter_size: 3,
                dense_layers: 1,
                dense_width: 6,
                latent_dim: 2,
            },
            decoder: DecoderSpec {
                layers: 1,
                width: 4,
                output_dim: 3,
                likelihood,
            },
            variant: ModelVariant::GpVae,
        }
    }

    fn random_matrix(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng::rng_from(seed);
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn init_is_deterministic() {
        let spec = tiny_spec(Likelihood::default());
        let a = init_params(&spec, 3).unwrap();
        let b = init_params(&spec, 3).unwrap();
        assert_eq!(a, b);
        let c = init_params(&spec, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unit_softplus_bias() {
        assert!((crate::autodiff::stable_softplus(UNIT_SOFTPLUS_BIAS) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fresh_band_diagonal_near_one() {
        let mut spec = tiny_spec(Likelihood::default());
        spec.encoder = EncoderSpec {
            input_dim: 3,
            ..EncoderSpec::default()
        };
        spec.decoder.output_dim = 3;
        let params = init_params(&spec, 1).unwrap();
        let x = random_matrix(10, 3, 2);
        let q = params
            .encode(&x, &DMatrix::from_element(10, 3, false))
            .unwrap();
        let (lo, hi) = q
            .band_diag
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(lo >= 0.5 && hi <= 2.0, "band diagonal in [{lo}, {hi}]");
    }

    #[test]
    fn zero_input_gives_finite_deterministic_posterior() {
        let params = init_params(&tiny_spec(Likelihood::default()), 0).unwrap();
        let x = DMatrix::zeros(4, 3);
        let m = DMatrix::from_element(4, 3, false);
        let a = params.encode(&x, &m).unwrap();
        let b = params.encode(&x, &m).unwrap();
        assert_eq!(a, b);
        assert!(a.means.iter().all(|v| v.is_finite()));
        assert_eq!(a.band_off.shape(), (2, 3));
    }

    #[test]
    fn encode_shape_errors() {
        let params = init_params(&tiny_spec(Likelihood::default()), 0).unwrap();
        let x = DMatrix::zeros(4, 2);
        assert!(params
            .encode(&x, &DMatrix::from_element(4, 2, false))
            .is_err());
    }

    #[test]
    fn missing_entries_are_zeroed_before_encoding() {
        let params = init_params(&tiny_spec(Likelihood::default()), 0).unwrap();
        let x = random_matrix(5, 3, 8);
        let mut mask = DMatrix::from_element(5, 3, false);
        mask[(2, 1)] = true;
        let mut x2 = x.clone();
        x2[(2, 1)] = 123.0;
        assert_eq!(
            params.encode(&x, &mask).unwrap(),
            params.encode(&x2, &mask).unwrap()
        );
    }

    #[test]
    fn conv_features_shift_with_input() {
        let spec = tiny_spec(Likelihood::default());
        let params = init_params(&spec, 5).unwrap();
        let t_len = 8;
        let x = random_matrix(t_len + 1, 3, 9);
        let features = |rows: std::ops::Range<usize>| {
            let mut tape = Tape::new();
            let p = params.register_frozen(&mut tape);
            let data: Vec<f64> = rows
                .flat_map(|t| x.row(t).iter().copied().collect::<Vec<_>>())
                .collect();
            let xv = tape.constant(Tensor::new(vec![1, t_len, 3], data).unwrap());
            let c = tape.conv1d_same(xv, p.vars[0]).unwrap();
            tape.value(c).clone()
        };
        let a = features(0..t_len);
        let b = features(1..t_len + 1);
        let f = spec.encoder.filters;
        // interior steps of the shifted input equal the next step of the original
        for t in 1..t_len - 2 {
            for c in 0..f {
                let va = a.data()[(t + 1) * f + c];
                let vb = b.data()[t * f + c];
                assert!((va - vb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_identity_decoder() {
        let spec = ModelSpec {
            encoder: EncoderSpec {
                input_dim: 3,
                latent_dim: 3,
                conv_layers: 0,
                dense_layers: 0,
                ..EncoderSpec::default()
            },
            decoder: DecoderSpec {
                layers: 0,
                width: 0,
                output_dim: 3,
                likelihood: Likelihood::default(),
            },
            variant: ModelVariant::GpVae,
        };
        let mut params = init_params(&spec, 0).unwrap();
        let n = params.tensors.len();
        params.tensors[n - 2] = Tensor::new(
            vec![3, 3],
            DMatrix::<f64>::identity(3, 3).as_slice().to_vec(),
        )
        .unwrap();
        params.tensors[n - 1] = Tensor::zeros(&[3]);
        let z = random_matrix(4, 3, 1);
        let out = params.decode(&z).unwrap();
        assert!((out - z).abs().max() < 1e-15);
    }

    #[test]
    fn bernoulli_outputs_are_probabilities() {
        let params = init_params(&tiny_spec(Likelihood::Bernoulli), 2).unwrap();
        let z = random_matrix(6, 2, 4) * 50.0;
        let p = params.decode(&z).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let z_small = random_matrix(6, 2, 4);
        let p = params.decode(&z_small).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn decode_is_pointwise_in_time() {
        let params = init_params(&tiny_spec(Likelihood::default()), 7).unwrap();
        let z = random_matrix(5, 2, 3);
        let out = params.decode(&z).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let zp = DMatrix::from_fn(5, 2, |t, j| z[(perm[t], j)]);
        let outp = params.decode(&zp).unwrap();
        for t in 0..5 {
            for c in 0..3 {
                assert_eq!(outp[(t, c)], out[(perm[t], c)]);
            }
        }
        let same = DMatrix::from_fn(4, 2, |_, j| z[(0, j)]);
        let o = params.decode(&same).unwrap();
        for t in 1..4 {
            assert_eq!(o.row(t), o.row(0));
        }
    }

    #[test]
    fn encode_decode_stays_finite() {
        let params = init_params(&tiny_spec(Likelihood::default()), 11).unwrap();
        let mut rng = crate::rng::rng_from(12);
        let mask = DMatrix::from_element(6, 3, false);
        for _ in 0..1000 {
            let scale: f64 = rng.random_range(0.1..10.0);
            let x = DMatrix::from_fn(6, 3, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
            let q = params.encode(&x, &mask).unwrap();
            let out = params.decode(&q.means.transpose()).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let mut spec = tiny_spec(Likelihood::Bernoulli);
        spec.encoder.preprocess_width = Some(4);
        spec.variant = ModelVariant::HiVae;
        let mut params = init_params(&spec, 9).unwrap();
        params.beta = 0.8;
        let mut buf = Vec::new();
        params.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = ModelParams::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, params);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            ModelParams::read_from(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        let truncated = &buf[..buf.len() - 3];
        assert!(ModelParams::read_from(&mut &truncated[..]).is_err());
    }
}
