//! Batches of equally long multivariate series, the procedural
//! rotating-glyph generator, CSV and binary ingestion/export, per-channel
//! standardization and stratified splits.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::*;
use crate::error::{Error, Result};
use crate::rng::{child_rng, derive_seed, stream};

/// `n` series of `t_len` steps with `dim` channels. `values` and `mask`
/// are laid out `[series][time][channel]`; `mask` is true where an entry
/// is missing, and missing entries always read 0 in `values`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesBatch {
    n: usize,
    t_len: usize,
    dim: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    timestamps: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl TimeSeriesBatch {
    /// Builds a batch, zero-filling every masked entry.
    pub fn new(
        n: usize,
        t_len: usize,
        dim: usize,
        mut values: Vec<f64>,
        mask: Vec<bool>,
        timestamps: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let len = n * t_len * dim;
        if values.len() != len || mask.len() != len {
            return Err(Error::shape(
                "batch",
                format!(
                    "{} values and {} mask entries for n={n}, T={t_len}, d={dim}",
                    values.len(),
                    mask.len()
                ),
            ));
        }
        if t_len == 0 || dim == 0 {
            return Err(Error::invalid("series need T >= 1 and d >= 1"));
        }
        if timestamps.len() != t_len {
            return Err(Error::shape(
                "batch",
                format!("{} timestamps for T={t_len}", timestamps.len()),
            ));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) || !timestamps[0].is_finite() {
            return Err(Error::invalid(
                "timestamps must be finite and strictly increasing",
            ));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::shape(
                    "batch",
                    format!("{} labels for {n} series", l.len()),
                ));
            }
        }
        for (v, &m) in values.iter_mut().zip(&mask) {
            if m {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::invalid("observed values must be finite"));
            }
        }
        Ok(TimeSeriesBatch {
            n,
            t_len,
            dim,
            values,
            mask,
            timestamps,
            labels,
        })
    }

    /// Fully observed batch with unit-spaced timestamps starting at 0.
    pub fn fully_observed(
        n: usize,
        t_len: usize,
        dim: usize,
        values: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let len = values.len();
        Self::new(
            n,
            t_len,
            dim,
            values,
            vec![false; len],
            unit_timestamps(t_len),
            labels,
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn series_len(&self) -> usize {
        self.t_len * self.dim
    }

    pub fn series_values(&self, i: usize) -> &[f64] {
        let s = self.series_len();
        &self.values[i * s..(i + 1) * s]
    }

    pub fn series_mask(&self, i: usize) -> &[bool] {
        let s = self.series_len();
        &self.mask[i * s..(i + 1) * s]
    }

    pub fn missing_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn missing_rate(&self) -> f64 {
        self.missing_count() as f64 / self.mask.len().max(1) as f64
    }

    /// Hides additional entries: the result is missing wherever either this
    /// batch or `extra` is.
    pub fn with_missing(&self, extra: &[bool]) -> Result<Self> {
        if extra.len() != self.mask.len() {
            return Err(Error::shape(
                "with_missing",
                format!("{} vs {}", extra.len(), self.mask.len()),
            ));
        }
        let mask = self.mask.iter().zip(extra).map(|(&a, &b)| a || b).collect();
        Self::new(
            self.n,
            self.t_len,
            self.dim,
            self.values.clone(),
            mask,
            self.timestamps.clone(),
            self.labels.clone(),
        )
    }

    /// Same mask and metadata, new values (zero-filled again at the mask).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n,
            self.t_len,
            self.dim,
            values,
            self.mask.clone(),
            self.timestamps.clone(),
            self.labels.clone(),
        )
    }

    /// Sub-batch of the given series, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n) {
            return Err(Error::invalid(format!(
                "series index {bad} out of range for {} series",
                self.n
            )));
        }
        let mut values = Vec::with_capacity(indices.len() * self.series_len());
        let mut mask = Vec::with_capacity(values.capacity());
        for &i in indices {
            values.extend_from_slice(self.series_values(i));
            mask.extend_from_slice(self.series_mask(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(
            indices.len(),
            self.t_len,
            self.dim,
            values,
            mask,
            self.timestamps.clone(),
            labels,
        )
    }

    /// Writes the binary batch container documented in `docs/FORMATS.md`.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(BATCH_MAGIC)?;
        write_u32(w, BATCH_VERSION)?;
        for v in [self.n, self.t_len, self.dim] {
            write_u64(w, v as u64)?;
        }
        write_f64s(w, &self.timestamps)?;
        write_f64s(w, &self.values)?;
        w.write_all(&pack_bits(&self.mask))?;
        match &self.labels {
            Some(l) => {
                write_u8(w, 1)?;
                for &v in l {
                    write_u64(w, v as u64)?;
                }
            }
            None => write_u8(w, 0)?,
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Self> {
        expect_magic(r, BATCH_MAGIC)?;
        let version = read_u32(r)?;
        if version != BATCH_VERSION {
            return Err(Error::Format(format!(
                "unsupported batch version {version}"
            )));
        }
        let (n, t_len, dim) = (read_usize(r)?, read_usize(r)?, read_usize(r)?);
        let len = n
            .checked_mul(t_len)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::Format("batch dimensions overflow".into()))?;
        let timestamps = read_f64s(r, t_len)?;
        let values = read_f64s(r, len)?;
        let mut bits = vec![0u8; len.div_ceil(8)];
        r.read_exact(&mut bits)?;
        let mask = unpack_bits(&bits, len);
        let labels = match read_u8(r)? {
            0 => None,
            1 => Some((0..n).map(|_| read_usize(r)).collect::<Result<Vec<_>>>()?),
            t => return Err(Error::Format(format!("bad label flag {t}"))),
        };
        Self::new(n, t_len, dim, values, mask, timestamps, labels)
            .map_err(|e| Error::Format(format!("inconsistent batch: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_binary(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_binary(&mut BufReader::new(File::open(path)?))
    }

    /// Wide CSV: `series_id,time,ch0..ch{d-1}[,label]`, one row per series
    /// and time step, empty cells for missing entries. Readable back with
    /// [`load_csv`] and [`CsvSchema::for_export`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["series_id".to_string(), "time".to_string()];
        header.extend((0..self.dim).map(|c| format!("ch{c}")));
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header)?;
        for i in 0..self.n {
            let (vals, mask) = (self.series_values(i), self.series_mask(i));
            for (t, ts) in self.timestamps.iter().enumerate() {
                let mut row = vec![i.to_string(), ts.to_string()];
                for c in 0..self.dim {
                    let k = t * self.dim + c;
                    row.push(if mask[k] {
                        String::new()
                    } else {
                        vals[k].to_string()
                    });
                }
                if let Some(l) = &self.labels {
                    row.push(l[i].to_string());
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub const BATCH_MAGIC: &[u8; 8] = b"GPVAEBAT";
pub const BATCH_VERSION: u32 = 1;

pub fn unit_timestamps(t_len: usize) -> Vec<f64> {
    (0..t_len).map(|t| t as f64).collect()
}

// --- procedural glyphs -----------------------------------------------------

/// Stroke segments of the seven-segment layout, in glyph coordinates
/// `[-1, 1]^2` with y pointing up.
const SEGMENTS: [[(f64, f64); 2]; 7] = [
    [(-0.45, 0.8), (0.45, 0.8)],   // top
    [(0.45, 0.8), (0.45, 0.0)],    // upper right
    [(0.45, 0.0), (0.45, -0.8)],   // lower right
    [(-0.45, -0.8), (0.45, -0.8)], // bottom
    [(-0.45, -0.8), (-0.45, 0.0)], // lower left
    [(-0.45, 0.0), (-0.45, 0.8)],  // upper left
    [(-0.45, 0.0), (0.45, 0.0)],   // middle
];

/// Segment sets of the ten digits, bit `s` lighting segment `s`.
const DIGITS: [u8; 10] = [
    0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110, 0b1101101, 0b1111101, 0b0000111,
    0b1111111, 0b1101111,
];

pub const MAX_GLYPHS: usize = DIGITS.len();
pub const MAX_GRID: usize = 16;

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + s * dx - p.0, a.1 + s * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Binary frame of glyph `label` rotated by `angle`, row-major
/// `grid x grid`.
pub fn render_glyph(label: usize, angle: f64, grid: usize) -> Vec<f64> {
    let bits = DIGITS[label];
    let px = 2.0 / grid as f64;
    let stroke = 0.16_f64.max(0.55 * px);
    let (s, c) = angle.sin_cos();
    let mut out = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            let x = -1.0 + (col as f64 + 0.5) * px;
            let y = 1.0 - (row as f64 + 0.5) * px;
            // rotate the sample point back into the glyph frame
            let p = (c * x + s * y, -s * x + c * y);
            let d = SEGMENTS
                .iter()
                .enumerate()
                .filter(|(i, _)| bits >> i & 1 == 1)
                .map(|(_, seg)| segment_distance(p, seg[0], seg[1]))
                .fold(f64::INFINITY, f64::min);
            // anti-aliased coverage, binarized at 0.5
            let coverage = ((stroke + 0.5 * px - d) / px).clamp(0.0, 1.0);
            out.push(if coverage >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphSpec {
    pub n: usize,
    pub t_len: usize,
    pub grid_size: usize,
    /// Std of the per-step rotation increment, radians.
    pub rotation_std: f64,
    pub label_count: usize,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        GlyphSpec {
            n: 500,
            t_len: 10,
            grid_size: 8,
            rotation_std: 0.5,
            label_count: 10,
        }
    }
}

/// Fully observed rotating-glyph sequences: series `i` shows glyph
/// `i mod label_count` starting upright, its angle following a Gaussian
/// random walk. Frames are binary and flattened row-major, so
/// `d = grid_size^2`.
pub fn generate_rotating_patterns(spec: &GlyphSpec, seed: u64) -> Result<TimeSeriesBatch> {
    let GlyphSpec {
        n,
        t_len,
        grid_size,
        rotation_std,
        label_count,
    } = *spec;
    if grid_size == 0 || grid_size > MAX_GRID {
        return Err(Error::invalid(format!(
            "grid_size must be in 1..={MAX_GRID}"
        )));
    }
    if t_len < 2 {
        return Err(Error::invalid("rotating patterns need T >= 2"));
    }
    if label_count == 0 || label_count > MAX_GLYPHS {
        return Err(Error::invalid(format!(
            "label_count must be in 1..={MAX_GLYPHS}"
        )));
    }
    if !(rotation_std >= 0.0) || !rotation_std.is_finite() {
        return Err(Error::invalid(
            "rotation_std must be finite and non-negative",
        ));
    }
    let step = Normal::new(0.0, rotation_std).expect("validated std");
    let data_seed = derive_seed(seed, stream::DATA);
    let series: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = child_rng(data_seed, i as u64);
            let label = i % label_count;
            let mut angle = 0.0;
            let mut frames = Vec::with_capacity(t_len * grid_size * grid_size);
            for t in 0..t_len {
                if t > 0 {
                    angle = (angle + step.sample(&mut rng)) % (2.0 * PI);
                }
                frames.extend(render_glyph(label, angle, grid_size));
            }
            frames
        })
        .collect();
    let labels = (0..n).map(|i| i % label_count).collect();
    TimeSeriesBatch::fully_observed(
        n,
        t_len,
        grid_size * grid_size,
        series.concat(),
        Some(labels),
    )
}

// --- IDX images ------------------------------------------------------------

/// Images from an IDX file (magic `0x00000803`), scaled to `[0, 1]`.
/// Returns `(rows, cols, images)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    let word = |i: usize| u32::from_be_bytes(head[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    if word(0) != 0x0803 {
        return Err(Error::Format(format!(
            "{}: not an IDX image file",
            path.display()
        )));
    }
    let (n, rows, cols) = (word(1), word(2), word(3));
    let mut buf = vec![0u8; n * rows * cols];
    r.read_exact(&mut buf)?;
    let images = buf
        .chunks_exact((rows * cols).max(1))
        .map(|c| c.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

// --- CSV ingestion ---------------------------------------------------------

/// Column mapping for [`load_csv`]. Rows are wide: one row per observation
/// time, one column per channel, empty cells meaning missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub series_column: String,
    pub time_column: String,
    pub channels: Vec<String>,
    #[serde(default)]
    pub label_column: Option<String>,
    /// Width of one grid bin in time units; observations are assigned to
    /// bin `floor(time / bin_width)` and the latest one in a bin wins.
    #[serde(default = "one")]
    pub bin_width: f64,
    /// Grid length; defaults to the last occupied bin over all series.
    /// Observations past the grid are dropped with a warning.
    #[serde(default)]
    pub n_bins: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl CsvSchema {
    /// The schema matching [`TimeSeriesBatch::write_csv`] output.
    pub fn for_export(batch: &TimeSeriesBatch) -> Self {
        let ts = batch.timestamps();
        CsvSchema {
            series_column: "series_id".into(),
            time_column: "time".into(),
            channels: (0..batch.dim()).map(|c| format!("ch{c}")).collect(),
            label_column: batch.labels().map(|_| "label".into()),
            bin_width: if ts.len() > 1 { ts[1] - ts[0] } else { 1.0 },
            n_bins: Some(batch.t_len()),
        }
    }
}

struct CsvSeries {
    bins: HashMap<usize, Vec<Option<(f64, f64)>>>,
    last_time: f64,
    label: Option<usize>,
}

/// Reads a wide CSV into a batch on the regular grid `k * bin_width`.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<TimeSeriesBatch> {
    if !(schema.bin_width > 0.0) {
        return Err(Error::invalid("bin_width must be positive"));
    }
    if schema.channels.is_empty() {
        return Err(Error::invalid("schema names no channel columns"));
    }
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_err(1, format!("missing column {name:?}")))
    };
    let sid_col = col(&schema.series_column)?;
    let time_col = col(&schema.time_column)?;
    let chan_cols = schema
        .channels
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let label_col = schema.label_column.as_deref().map(col).transpose()?;
    let dim = chan_cols.len();

    let mut order: Vec<String> = Vec::new();
    let mut series: HashMap<String, CsvSeries> = HashMap::new();
    let mut dropped = 0usize;
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let sid = rec[sid_col].trim().to_string();
        let time: f64 = rec[time_col]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad time value {:?}", &rec[time_col])))?;
        if !(time >= 0.0) || !time.is_finite() {
            return Err(parse_err(
                line,
                format!("time {time} must be finite and non-negative"),
            ));
        }
        let entry = series.entry(sid.clone()).or_insert_with(|| {
            order.push(sid.clone());
            CsvSeries {
                bins: HashMap::new(),
                last_time: f64::NEG_INFINITY,
                label: None,
            }
        });
        if time < entry.last_time {
            return Err(parse_err(
                line,
                format!(
                    "timestamps of series {sid:?} decrease ({} then {time})",
                    entry.last_time
                ),
            ));
        }
        entry.last_time = time;
        if let Some(lc) = label_col {
            let raw = rec[lc].trim();
            if !raw.is_empty() {
                let l: usize = raw
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad label {raw:?}")))?;
                if entry.label.is_some_and(|old| old != l) {
                    return Err(parse_err(
                        line,
                        format!("series {sid:?} has conflicting labels"),
                    ));
                }
                entry.label = Some(l);
            }
        }
        let bin = (time / schema.bin_width).floor() as usize;
        if schema.n_bins.is_some_and(|nb| bin >= nb) {
            dropped += 1;
            continue;
        }
        let cells = entry.bins.entry(bin).or_insert_with(|| vec![None; dim]);
        for (c, &cc) in chan_cols.iter().enumerate() {
            let raw = rec[cc].trim();
            if raw.is_empty() {
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| {
                parse_err(
                    line,
                    format!("bad value {raw:?} in column {:?}", schema.channels[c]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("non-finite value in column {:?}", schema.channels[c]),
                ));
            }
            if let Some((prev_time, _)) = cells[c] {
                if prev_time == time {
                    log::warn!(
                        "{}:{line}: duplicate entry for series {sid:?}, time {time}, channel {:?}; keeping the later row",
                        path.display(),
                        schema.channels[c]
                    );
                }
            }
            cells[c] = Some((time, v));
        }
    }
    if dropped > 0 {
        log::warn!(
            "{}: dropped {dropped} rows beyond the {}-bin grid",
            path.display(),
            schema.n_bins.unwrap_or(0)
        );
    }
    if order.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    let t_len = match schema.n_bins {
        Some(nb) => nb,
        None => {
            series
                .values()
                .flat_map(|s| s.bins.keys().copied())
                .max()
                .unwrap_or(0)
                + 1
        }
    };
    let mut values = Vec::with_capacity(order.len() * t_len * dim);
    let mut mask = Vec::with_capacity(values.capacity());
    let mut labels = Vec::with_capacity(order.len());
    for sid in &order {
        let s = &series[sid];
        for t in 0..t_len {
            for c in 0..dim {
                match s.bins.get(&t).and_then(|cells| cells[c]) {
                    Some((_, v)) => {
                        values.push(v);
                        mask.push(false);
                    }
                    None => {
                        values.push(0.0);
                        mask.push(true);
                    }
                }
            }
        }
        if label_col.is_some() {
            labels.push(
                s.label
                    .ok_or_else(|| parse_err(0, format!("series {sid:?} has no label")))?,
            );
        }
    }
    let timestamps = (0..t_len).map(|k| k as f64 * schema.bin_width).collect();
    TimeSeriesBatch::new(
        order.len(),
        t_len,
        dim,
        values,
        mask,
        timestamps,
        label_col.map(|_| labels),
    )
}

// --- normalization ---------------------------------------------------------

/// Per-channel mean and standard deviation over observed entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Channels without observations get mean 0; channels with (near) zero
    /// spread get std 1.
    pub fn fit(batch: &TimeSeriesBatch) -> Self {
        let d = batch.dim();
        let mut sum = vec![0.0; d];
        let mut count = vec![0usize; d];
        for (k, (&v, &m)) in batch.values().iter().zip(batch.mask()).enumerate() {
            if !m {
                sum[k % d] += v;
                count[k % d] += 1;
            }
        }
        let mean: Vec<f64> = (0..d)
            .map(|c| {
                if count[c] > 0 {
                    sum[c] / count[c] as f64
                } else {
                    0.0
                }
            })
            .collect();
        let mut ss = vec![0.0; d];
        for (k, (&v, &m)) in batch.values().iter().zip(batch.mask()).enumerate() {
            if !m {
                ss[k % d] += (v - mean[k % d]).powi(2);
            }
        }
        let std = (0..d)
            .map(|c| {
                let s = if count[c] > 0 {
                    (ss[c] / count[c] as f64).sqrt()
                } else {
                    0.0
                };
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        NormStats { mean, std }
    }
}

/// Standardizes observed entries per channel, using `stats` when given
/// (typically fit on the training split) and fitting on `batch` otherwise.
pub fn normalize(
    batch: &TimeSeriesBatch,
    stats: Option<&NormStats>,
) -> Result<(TimeSeriesBatch, NormStats)> {
    let stats = stats.cloned().unwrap_or_else(|| NormStats::fit(batch));
    let d = batch.dim();
    if stats.mean.len() != d || stats.std.len() != d {
        return Err(Error::shape(
            "normalize",
            format!("stats for {} channels, batch has {d}", stats.mean.len()),
        ));
    }
    let values = batch
        .values()
        .iter()
        .enumerate()
        .map(|(k, &v)| (v - stats.mean[k % d]) / stats.std[k % d])
        .collect();
    Ok((batch.with_values(values)?, stats))
}

/// Inverse of [`normalize`] on a flat `[.., d]` array.
pub fn denormalize(values: &[f64], stats: &NormStats) -> Vec<f64> {
    let d = stats.mean.len();
    values
        .iter()
        .enumerate()
        .map(|(k, &v)| v * stats.std[k % d] + stats.mean[k % d])
        .collect()
}

// --- splits ----------------------------------------------------------------

/// Series indices of the train/val/test parts, each sorted ascending.
/// Stratified by label when labels exist: every class is shuffled and cut
/// at the rounded cumulative fractions.
pub fn split_indices(
    n: usize,
    labels: Option<&[usize]>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut groups: Vec<Vec<usize>> = match labels {
        Some(l) => {
            let classes = l.iter().copied().max().map_or(0, |m| m + 1);
            let mut g = vec![Vec::new(); classes];
            for (i, &c) in l.iter().enumerate() {
                g[c].push(i);
            }
            g
        }
        None => vec![(0..n).collect()],
    };
    let mut rng = child_rng(seed, stream::SPLIT);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for g in groups.iter_mut().filter(|g| !g.is_empty()) {
        g.shuffle(&mut rng);
        let m = g.len() as f64;
        let cut1 = (fractions[0] * m).round() as usize;
        let cut2 = (((fractions[0] + fractions[1]) * m).round() as usize)
            .max(cut1)
            .min(g.len());
        parts[0].extend_from_slice(&g[..cut1]);
        parts[1].extend_from_slice(&g[cut1..cut2]);
        parts[2].extend_from_slice(&g[cut2..]);
    }
    for (p, &f) in parts.iter_mut().zip(&fractions) {
        if f > 0.0 && p.is_empty() {
            return Err(Error::invalid(format!(
                "split with fraction {f} is empty for {n} series; use more data or adjust fractions"
            )));
        }
        p.sort_unstable();
    }
    Ok(parts)
}

pub fn split(
    batch: &TimeSeriesBatch,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[TimeSeriesBatch; 3]> {
    let [a, b, c] = split_indices(batch.n(), batch.labels(), fractions, seed)?;
    Ok([batch.select(&a)?, batch.select(&b)?, batch.select(&c)?])
}

/// Uniformly random (unstratified) permutation, used for epoch shuffling.
pub fn shuffled_indices(n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
