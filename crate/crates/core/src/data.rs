//! Dataset ingestion, chronological splits, sliding windows and per-window
//! instance normalization.

use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on the per-window standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub timestamps: Vec<String>,
    /// `[T_total × N]`
    pub values: Array2<f64>,
    pub frequency_hint: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.values.ncols()
    }

    /// Whole series as a single segment with no borrowed context.
    pub fn as_segment(&self) -> Segment {
        Segment {
            start: 0,
            target_start: 0,
            values: self.values.clone(),
        }
    }
}

/// Reads an ETT-style CSV: header row, a `date` column, then numeric columns.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);

    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Config(format!(
            "{shown}: expected a date column followed by at least one numeric column"
        )));
    }
    if !headers[0].trim().trim_start_matches('\u{feff}').eq_ignore_ascii_case("date") {
        return Err(Error::Config(format!(
            "{shown}: first column must be named `date`, found {:?}",
            &headers[0]
        )));
    }
    let n = headers.len() - 1;

    let mut timestamps = Vec::new();
    let mut flat = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != headers.len() {
            return Err(Error::RaggedRow {
                path: shown,
                row,
                found: record.len(),
                expected: headers.len(),
            });
        }
        timestamps.push(record[0].to_string());
        for (j, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::NonNumeric {
                path: shown.clone(),
                row,
                column: j + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumeric {
                    path: shown,
                    row,
                    column: j + 1,
                    value: cell.to_string(),
                });
            }
            flat.push(v);
        }
    }

    let rows = timestamps.len();
    if rows < 2 {
        return Err(Error::InsufficientData(format!(
            "{shown}: need at least 2 rows, found {rows}"
        )));
    }
    let values = Array2::from_shape_vec((rows, n), flat).expect("row lengths checked above");
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let frequency_hint = infer_frequency(&timestamps);
    Ok(Dataset {
        name,
        timestamps,
        values,
        frequency_hint,
    })
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M:%S",
        "%Y/%m/%d %H:%M",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

fn infer_frequency(timestamps: &[String]) -> String {
    let (Some(a), Some(b)) = (
        timestamps.first().and_then(|s| parse_timestamp(s)),
        timestamps.get(1).and_then(|s| parse_timestamp(s)),
    ) else {
        return "unknown".into();
    };
    let minutes = (b - a).num_minutes();
    match minutes {
        m if m <= 0 => "unknown".into(),
        m if m % 1440 == 0 => format!("{}d", m / 1440),
        m if m % 60 == 0 => format!("{}h", m / 60),
        m => format!("{m}min"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub lookback: usize,
    pub horizon: usize,
}

impl SplitSpec {
    pub fn new(
        train_frac: f64,
        val_frac: f64,
        test_frac: f64,
        lookback: usize,
        horizon: usize,
    ) -> Result<Self> {
        let spec = SplitSpec {
            train_frac,
            val_frac,
            test_frac,
            lookback,
            horizon,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_frac", self.train_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} = {f} is outside [0, 1]")));
            }
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        if self.lookback == 0 || self.horizon == 0 {
            return Err(Error::Config("lookback and horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.lookback + self.horizon
    }
}

/// A contiguous slice of the series. `values` may begin before
/// `target_start` when the segment borrows look-back context from the
/// preceding split.
#[derive(Debug, Clone)]
pub struct Segment {
    /// Absolute index of `values` row 0.
    pub start: usize,
    /// Absolute index of the first time step owned by this segment.
    pub target_start: usize,
    pub values: Array2<f64>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn end(&self) -> usize {
        self.start + self.len()
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Segment,
    pub val: Segment,
    pub test: Segment,
    /// Absolute indices where validation and test targets begin.
    pub boundaries: (usize, usize),
}

fn frac_len(total: usize, frac: f64) -> usize {
    (total as f64 * frac + 1e-9).floor() as usize
}

pub fn chronological_split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let total = ds.len();
    let b1 = frac_len(total, spec.train_frac);
    let b2 = (b1 + frac_len(total, spec.val_frac)).min(total);
    let need = spec.window_len();
    if b1 < need {
        return Err(Error::InsufficientData(format!(
            "train segment has {b1} steps, lookback + horizon = {need}"
        )));
    }
    for (name, lo, hi) in [("validation", b1, b2), ("test", b2, total)] {
        if hi - lo < spec.horizon {
            return Err(Error::InsufficientData(format!(
                "{name} segment has {} steps, horizon = {}",
                hi - lo,
                spec.horizon
            )));
        }
    }
    let seg = |lo: usize, hi: usize, borrow: usize| Segment {
        start: lo - borrow,
        target_start: lo,
        values: ds.values.slice(s![lo - borrow..hi, ..]).to_owned(),
    };
    Ok(Splits {
        train: seg(0, b1, 0),
        val: seg(b1, b2, spec.lookback),
        test: seg(b2, total, spec.lookback),
        boundaries: (b1, b2),
    })
}

/// Earliest `⌊ratio·len⌋` steps of the training segment.
pub fn few_shot_subset(train: &Segment, ratio: f64, window_len: usize) -> Result<Segment> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("few-shot ratio {ratio} outside (0, 1]")));
    }
    let keep = frac_len(train.len(), ratio);
    if keep < window_len {
        return Err(Error::InsufficientData(format!(
            "few-shot subset keeps {keep} steps, one window needs {window_len}"
        )));
    }
    Ok(Segment {
        start: train.start,
        target_start: train.target_start,
        values: train.values.slice(s![..keep, ..]).to_owned(),
    })
}

#[derive(Debug, Clone)]
pub struct TimeSeriesWindow {
    /// Absolute index of the first context step.
    pub start: usize,
    /// `[T × N]`
    pub context: Array2<f64>,
    /// `[H × N]`
    pub target: Array2<f64>,
    pub mean: Array1<f64>,
    /// Population standard deviation, floored at [`STD_FLOOR`].
    pub std: Array1<f64>,
    pub norm_const: f64,
}

impl TimeSeriesWindow {
    pub fn new(start: usize, context: Array2<f64>, target: Array2<f64>, norm_const: f64) -> Self {
        let (mean, std) = column_stats(context.view());
        TimeSeriesWindow {
            start,
            context,
            target,
            mean,
            std,
            norm_const,
        }
    }

    pub fn lookback(&self) -> usize {
        self.context.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.target.nrows()
    }

    pub fn n_vars(&self) -> usize {
        self.context.ncols()
    }

    fn scale(&self, var: usize) -> f64 {
        self.norm_const / self.std[var]
    }

    /// `(x − μ)/σ · norm_const` per variable.
    pub fn normalize_values(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (mu, k) = (self.mean[j], self.scale(j));
            col.mapv_inplace(|v| (v - mu) * k);
        }
        out
    }

    pub fn normalized_context(&self) -> Array2<f64> {
        self.normalize_values(self.context.view())
    }

    pub fn normalized_target(&self) -> Array2<f64> {
        self.normalize_values(self.target.view())
    }

    /// Inverse of [`normalize_values`](Self::normalize_values).
    pub fn denormalize(&self, y: ArrayView2<f64>) -> Array2<f64> {
        let mut out = y.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (mu, sd, c) = (self.mean[j], self.std[j], self.norm_const);
            col.mapv_inplace(|v| v / c * sd + mu);
        }
        out
    }
}

fn column_stats(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let mut std = Array1::zeros(x.ncols());
    for (j, col) in x.axis_iter(Axis(1)).enumerate() {
        let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
        std[j] = var.sqrt().max(STD_FLOOR);
    }
    (mean, std)
}

/// Sets the window's scale and returns its normalized context.
pub fn normalize(w: &mut TimeSeriesWindow, norm_const: f64) -> Array2<f64> {
    w.norm_const = norm_const;
    w.normalized_context()
}

pub fn denormalize(y: ArrayView2<f64>, w: &TimeSeriesWindow) -> Array2<f64> {
    w.denormalize(y)
}

/// Number of windows `windows` would produce.
pub fn window_count(len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if len < lookback + horizon || stride == 0 {
        0
    } else {
        (len - lookback - horizon) / stride + 1
    }
}

pub fn windows(
    segment: &Segment,
    lookback: usize,
    horizon: usize,
    stride: usize,
    norm_const: f64,
) -> Result<Vec<TimeSeriesWindow>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config(
            "lookback, horizon and stride must be positive".into(),
        ));
    }
    let len = segment.len();
    if len < lookback + horizon {
        return Err(Error::InsufficientData(format!(
            "segment of {len} steps is shorter than lookback {lookback} + horizon {horizon}"
        )));
    }
    let count = window_count(len, lookback, horizon, stride);
    Ok((0..count)
        .map(|k| {
            let s0 = k * stride;
            let ctx = segment.values.slice(s![s0..s0 + lookback, ..]).to_owned();
            let tgt = segment
                .values
                .slice(s![s0 + lookback..s0 + lookback + horizon, ..])
                .to_owned();
            TimeSeriesWindow::new(segment.start + s0, ctx, tgt, norm_const)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    SinusoidMix,
    TrendPlusSeason,
    Noise,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid_mix" => Ok(SynthKind::SinusoidMix),
            "trend_plus_season" => Ok(SynthKind::TrendPlusSeason),
            "noise" => Ok(SynthKind::Noise),
            other => Err(Error::Config(format!(
                "unknown synthetic kind {other:?} (sinusoid_mix, trend_plus_season, noise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub length: usize,
    pub period: usize,
    pub amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Number of harmonics in `sinusoid_mix` (component `i` has period
    /// `period/(i+1)` and amplitude `amplitude/2^i`).
    pub harmonics: usize,
    pub n_vars: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kind: SynthKind::SinusoidMix,
            length: 5000,
            period: 24,
            amplitude: 1.0,
            noise_std: 0.1,
            seed: 0,
            harmonics: 2,
            n_vars: 1,
        }
    }
}

pub fn synth_series(spec: &SynthSpec) -> Result<Dataset> {
    if spec.period == 0 || spec.length < 2 * spec.period {
        return Err(Error::Config(format!(
            "synthetic length {} must be at least twice the period {}",
            spec.length, spec.period
        )));
    }
    if spec.n_vars == 0 {
        return Err(Error::Config("n_vars must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    let p = spec.period as f64;
    let tau = std::f64::consts::TAU;
    let mut values = Array2::zeros((spec.length, spec.n_vars));
    for j in 0..spec.n_vars {
        let phases: Vec<f64> = (0..spec.harmonics.max(1))
            .map(|_| rng.random_range(0.0..tau))
            .collect();
        for t in 0..spec.length {
            let tf = t as f64;
            let clean = match spec.kind {
                SynthKind::SinusoidMix => phases
                    .iter()
                    .enumerate()
                    .map(|(i, ph)| {
                        let a = spec.amplitude / (1u64 << i) as f64;
                        a * (tau * tf * (i + 1) as f64 / p + ph).sin()
                    })
                    .sum::<f64>(),
                SynthKind::TrendPlusSeason => {
                    spec.amplitude * (tf / spec.length as f64)
                        + spec.amplitude * (tau * tf / p + phases[0]).sin()
                }
                SynthKind::Noise => 0.0,
            };
            let eps = if spec.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            values[[t, j]] = clean + eps;
        }
    }
    let origin = NaiveDateTime::parse_from_str("2016-07-01 00:00:00", "%Y-%m-%d %H:%M:%S")
        .expect("static timestamp");
    let timestamps = (0..spec.length)
        .map(|t| {
            (origin + Duration::hours(t as i64))
                .format("%Y-%m-%d %H:%M:%S")
                .to_string()
        })
        .collect();
    Ok(Dataset {
        name: format!("synthetic_{:?}", spec.kind).to_lowercase(),
        timestamps,
        values,
        frequency_hint: "1h".into(),
    })
}
