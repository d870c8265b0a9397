//! Traffic ingestion, normalization, windowing and synthetic generation.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::graph::Topology;

/// `T x N` traffic matrix in bytes/second, one row per timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficSeries {
    /// Epoch seconds, strictly increasing.
    pub timestamps: Vec<i64>,
    pub values: Tensor,
    pub node_names: Vec<String>,
}

impl TrafficSeries {
    pub fn new(timestamps: Vec<i64>, values: Tensor, node_names: Vec<String>) -> Result<Self> {
        if values.rows() != timestamps.len() || values.cols() != node_names.len() {
            return Err(Error::Dimension {
                op: "traffic_series",
                left: values.shape(),
                right: (timestamps.len(), node_names.len()),
            });
        }
        if let Some(pos) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Ordering { row: pos + 2 });
        }
        Ok(Self {
            timestamps,
            values,
            node_names,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_names.len()
    }

    /// Spacing of the first two timestamps; recorded, not enforced.
    pub fn cadence(&self) -> Option<i64> {
        (self.len() >= 2).then(|| self.timestamps[1] - self.timestamps[0])
    }

    /// First `rows` timesteps.
    pub fn head(&self, rows: usize) -> TrafficSeries {
        let rows = rows.min(self.len());
        TrafficSeries {
            timestamps: self.timestamps[..rows].to_vec(),
            values: self.values.slice_rows(0, rows),
            node_names: self.node_names.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.node_names.iter().cloned());
        w.write_record(&header)?;
        for (r, ts) in self.timestamps.iter().enumerate() {
            let mut rec = vec![ts.to_string()];
            rec.extend(self.values.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_timestamp(raw: &str, row: usize) -> Result<i64> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<i64>() {
        return Ok(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(raw) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    Err(Error::Schema(format!(
        "data row {row}: cannot parse timestamp `{raw}`"
    )))
}

fn split_link(column: &str) -> Option<(&str, &str)> {
    column
        .split_once("->")
        .or_else(|| column.split_once('→'))
        .map(|(a, b)| (a.trim(), b.trim()))
}

/// Reads a traffic CSV whose columns are matched by name against
/// `node_names`. Link-level files (`src->dst` columns) are folded to node
/// level: each node gets the sum of its outgoing and incoming links.
pub fn read_traffic_csv<R: Read>(input: R, node_names: &[String]) -> Result<TrafficSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers()?.clone();
    let mut cols = header.iter();
    match cols.next() {
        Some(first) if first.eq_ignore_ascii_case("timestamp") => {}
        _ => return Err(Error::Schema("first column must be `timestamp`".into())),
    }
    let columns: Vec<&str> = cols.collect();
    if columns.is_empty() {
        return Err(Error::Schema("no value columns".into()));
    }
    let index_of = |name: &str| -> Result<usize> {
        node_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Schema(format!("unknown column `{name}`")))
    };

    // For each data column, the node indices it contributes to.
    let link_level = columns.iter().any(|c| split_link(c).is_some());
    let mut targets: Vec<Vec<usize>> = Vec::with_capacity(columns.len());
    if link_level {
        for c in &columns {
            let (src, dst) = split_link(c)
                .ok_or_else(|| Error::Schema(format!("column `{c}` is not a `src->dst` link")))?;
            targets.push(vec![index_of(src)?, index_of(dst)?]);
        }
    } else {
        let mut seen = vec![false; node_names.len()];
        for c in &columns {
            let idx = index_of(c)?;
            if seen[idx] {
                return Err(Error::Schema(format!("duplicate column `{c}`")));
            }
            seen[idx] = true;
            targets.push(vec![idx]);
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Schema(format!(
                "missing column for node `{}`",
                node_names[missing]
            )));
        }
    }

    let n = node_names.len();
    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != columns.len() + 1 {
            return Err(Error::Schema(format!(
                "data row {row} has {} fields, expected {}",
                record.len(),
                columns.len() + 1
            )));
        }
        let ts = parse_timestamp(&record[0], row)?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::Ordering { row });
            }
        }
        timestamps.push(ts);
        let mut values = vec![0.0; n];
        for (k, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Schema(format!("data row {row}: `{field}` is not a number")))?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Domain {
                    row,
                    column: columns[k].to_string(),
                    value: v,
                });
            }
            for &node in &targets[k] {
                values[node] += v;
            }
        }
        data.extend(values);
    }
    let t = timestamps.len();
    TrafficSeries::new(timestamps, Tensor::new(t, n, data)?, node_names.to_vec())
}

pub fn load_traffic_csv(path: &Path, topology: &Topology) -> Result<TrafficSeries> {
    let file = std::fs::File::open(path)?;
    read_traffic_csv(std::io::BufReader::new(file), &topology.node_names)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Zscore,
    Minmax,
}

impl NormMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::Zscore => "zscore",
            NormMode::Minmax => "minmax",
        }
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(NormMode::Zscore),
            "minmax" => Ok(NormMode::Minmax),
            other => Err(Error::Configuration(format!(
                "unknown normalization `{other}`"
            ))),
        }
    }
}

/// Per-node affine scaling fitted on the training rows.
///
/// In z-score mode `offset`/`scale` are the mean and population standard
/// deviation; in min-max mode they are the minimum and the range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mode: NormMode,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn fit(series: &TrafficSeries, mode: NormMode, train_rows: usize) -> Result<Self> {
        if train_rows == 0 || train_rows > series.len() {
            return Err(Error::Parameter(format!(
                "normalizer needs 1..={} training rows, got {train_rows}",
                series.len()
            )));
        }
        let n = series.n_nodes();
        let mut offset = Vec::with_capacity(n);
        let mut scale = Vec::with_capacity(n);
        for j in 0..n {
            let col: Vec<f64> = (0..train_rows).map(|r| series.values.get(r, j)).collect();
            let (o, s) = match mode {
                NormMode::Zscore => {
                    let mean = col.iter().sum::<f64>() / col.len() as f64;
                    let var =
                        col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
                    (mean, var.sqrt())
                }
                NormMode::Minmax => {
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (lo, hi - lo)
                }
            };
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::DegenerateSeries {
                    node: series.node_names[j].clone(),
                });
            }
            offset.push(o);
            scale.push(s);
        }
        Ok(Self {
            mode,
            offset,
            scale,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.offset.len()
    }

    /// Scales a `T x N` matrix (nodes along columns).
    pub fn transform(&self, values: &Tensor) -> Tensor {
        Tensor::from_fn(values.rows(), values.cols(), |r, j| {
            (values.get(r, j) - self.offset[j]) / self.scale[j]
        })
    }

    pub fn inverse(&self, values: &Tensor) -> Tensor {
        Tensor::from_fn(values.rows(), values.cols(), |r, j| {
            values.get(r, j) * self.scale[j] + self.offset[j]
        })
    }

    /// Inverse for an `N x h` matrix (nodes along rows), the layout of
    /// model outputs and targets.
    pub fn inverse_node_rows(&self, values: &Tensor) -> Tensor {
        Tensor::from_fn(values.rows(), values.cols(), |i, k| {
            values.get(i, k) * self.scale[i] + self.offset[i]
        })
    }
}

/// Fits on the first `floor(train_fraction * T)` rows and scales every row.
pub fn fit_transform(
    series: &TrafficSeries,
    mode: NormMode,
    train_fraction: f64,
) -> Result<(TrafficSeries, Normalizer)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "train fraction must lie in (0, 1], got {train_fraction}"
        )));
    }
    let rows = (train_fraction * series.len() as f64 + 1e-9).floor() as usize;
    let norm = Normalizer::fit(series, mode, rows)?;
    let scaled = TrafficSeries {
        timestamps: series.timestamps.clone(),
        values: norm.transform(&series.values),
        node_names: series.node_names.clone(),
    };
    Ok((scaled, norm))
}

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `W x N` input rows `[start, start + W)`.
    pub input: Tensor,
    /// `N x h`: rows `[start + W, start + W + h)` transposed.
    pub target: Tensor,
    /// `W x 2` sine/cosine time-of-day encodings of the input rows.
    pub time_features: Tensor,
    pub start: usize,
}

impl Sample {
    /// Last input row (inclusive).
    pub fn input_end(&self) -> usize {
        self.start + self.input.rows() - 1
    }

    pub fn target_start(&self) -> usize {
        self.start + self.input.rows()
    }

    /// Last target row (inclusive).
    pub fn target_end(&self) -> usize {
        self.target_start() + self.target.cols() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    pub samples: Vec<Sample>,
    pub window: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn subset(&self, range: std::ops::Range<usize>) -> WindowedDataset {
        WindowedDataset {
            samples: self.samples[range].to_vec(),
            window: self.window,
            horizon: self.horizon,
            stride: self.stride,
        }
    }
}

const SECONDS_PER_DAY: f64 = 86_400.0;

pub fn make_windows(
    series: &TrafficSeries,
    window: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowedDataset> {
    if window == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Parameter(format!(
            "window, horizon and stride must be >= 1 (got {window}, {horizon}, {stride})"
        )));
    }
    let t = series.len();
    if window + horizon > t {
        return Err(Error::InsufficientData {
            required: window + horizon,
            available: t,
        });
    }
    let n = series.n_nodes();
    let mut samples = Vec::new();
    let mut start = 0;
    while start + window + horizon <= t {
        let input = series.values.slice_rows(start, start + window);
        let target = Tensor::from_fn(n, horizon, |i, k| series.values.get(start + window + k, i));
        let time_features = Tensor::from_fn(window, 2, |r, c| {
            let day = series.timestamps[start + r].rem_euclid(86_400) as f64 / SECONDS_PER_DAY;
            let angle = 2.0 * std::f64::consts::PI * day;
            if c == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        });
        samples.push(Sample {
            input,
            target,
            time_features,
            start,
        });
        start += stride;
    }
    Ok(WindowedDataset {
        samples,
        window,
        horizon,
        stride,
    })
}

/// Chronological train/validation/test split by sample start time.
/// Validation and test get `floor(fraction * M)` samples; train gets the rest.
pub fn chrono_split(
    dataset: &WindowedDataset,
    fractions: (f64, f64, f64),
) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(Error::Split(format!(
            "fractions must all be positive, got {ft}/{fv}/{fs}"
        )));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "fractions must sum to 1, got {}",
            ft + fv + fs
        )));
    }
    let m = dataset.len();
    let n_val = (fv * m as f64 + 1e-9).floor() as usize;
    let n_test = (fs * m as f64 + 1e-9).floor() as usize;
    let n_train = m.saturating_sub(n_val + n_test);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Split(format!(
            "{m} samples give an empty split ({n_train}/{n_val}/{n_test})"
        )));
    }
    Ok((
        dataset.subset(0..n_train),
        dataset.subset(n_train..n_train + n_val),
        dataset.subset(n_train + n_val..m),
    ))
}

/// Knobs of the synthetic traffic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    /// Pull of each node toward its neighbors' previous-step average.
    pub coupling: f64,
    /// Standard deviation of the per-step Gaussian noise.
    pub noise: f64,
    /// Steps per daily cycle.
    pub period: usize,
    /// Node phases are drawn from `U(0, phase_spread)` radians.
    pub phase_spread: f64,
    pub cadence_secs: i64,
    pub start_epoch: i64,
    /// From this step on the coupling uses the complement graph.
    pub rewire_at: Option<usize>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            coupling: 0.3,
            noise: 5.0,
            period: 288,
            phase_spread: std::f64::consts::FRAC_PI_4,
            cadence_secs: 300,
            start_epoch: 1_104_537_600,
            rewire_at: None,
        }
    }
}

/// Daily sinusoid per node, plus diffusion toward the neighbor average of
/// the previous step, plus Gaussian noise, clamped at zero.
///
/// `x_i(t) = s_i(t) + κ (mean_{j∈N(i)} x_j(t-1) - x_i(t-1)) + ε_i(t)`
pub fn generate_synthetic(
    topology: &Topology,
    steps: usize,
    seed: u64,
    options: &SynthOptions,
) -> Result<TrafficSeries> {
    if steps == 0 {
        return Err(Error::Parameter("steps must be >= 1".into()));
    }
    if options.period == 0 {
        return Err(Error::Parameter("period must be >= 1".into()));
    }
    if !(options.noise >= 0.0) {
        return Err(Error::Parameter("noise must be >= 0".into()));
    }
    if !(options.phase_spread >= 0.0 && options.phase_spread.is_finite()) {
        return Err(Error::Parameter(
            "phase_spread must be finite and >= 0".into(),
        ));
    }
    let n = topology.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..n).map(|_| rng.gen_range(40.0..160.0)).collect();
    let amp: Vec<f64> = base.iter().map(|b| b * rng.gen_range(0.3..0.5)).collect();
    let phase: Vec<f64> = (0..n)
        .map(|_| options.phase_spread * rng.gen::<f64>())
        .collect();
    let noise = Normal::new(0.0, options.noise).map_err(|e| Error::Parameter(e.to_string()))?;

    let neighbors = topology.neighbors();
    let complement: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && !neighbors[i].contains(&j))
                .collect()
        })
        .collect();

    let seasonal = |i: usize, t: usize| {
        let pos = (t % options.period) as f64 / options.period as f64;
        base[i] + amp[i] * (std::f64::consts::TAU * pos + phase[i]).sin()
    };

    let mut values = Tensor::zeros(steps, n);
    let mut prev: Vec<f64> = Vec::new();
    for t in 0..steps {
        let graph = match options.rewire_at {
            Some(at) if t >= at => &complement,
            _ => &neighbors,
        };
        let mut row = vec![0.0; n];
        for i in 0..n {
            let mut v = seasonal(i, t);
            if t > 0 && !graph[i].is_empty() && options.coupling != 0.0 {
                let avg = graph[i].iter().map(|&j| prev[j]).sum::<f64>() / graph[i].len() as f64;
                v += options.coupling * (avg - prev[i]);
            }
            if options.noise > 0.0 {
                v += noise.sample(&mut rng);
            }
            row[i] = v.max(0.0);
        }
        for (j, v) in row.iter().enumerate() {
            values.set(t, j, *v);
        }
        prev = row;
    }
    let timestamps = (0..steps as i64)
        .map(|t| options.start_epoch + t * options.cadence_secs)
        .collect();
    TrafficSeries::new(timestamps, values, topology.node_names.clone())
}
