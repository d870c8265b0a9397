//! Regression metrics in original units, baselines and ablation grids.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Normalizer, Sample, TrafficSeries, WindowedDataset};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::graph::{AdjacencyMethod, Topology};
use crate::model::{AdjacencySource, Model, TemporalCell};
use crate::pipeline;

fn check_pair(op: &'static str, pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension {
            op,
            left: pred.shape(),
            right: truth.shape(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput(op));
    }
    Ok(())
}

pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair("mae", pred, truth)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / truth.len() as f64)
}

pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair("rmse", pred, truth)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok((sum / truth.len() as f64).sqrt())
}

/// Coefficient of determination, `1 - SS_res / SS_tot`.
pub fn r2(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair("r2", pred, truth)?;
    if truth.len() < 2 {
        return Err(Error::R2Undefined);
    }
    let mean = truth.sum() / truth.len() as f64;
    let ss_tot: f64 = truth.data().iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::R2Undefined);
    }
    let ss_res: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// The metric trio over one pooled set of predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub n_samples: usize,
}

impl Metrics {
    pub fn compute(pred: &Tensor, truth: &Tensor, n_samples: usize) -> Result<Self> {
        Ok(Self {
            mae: mae(pred, truth)?,
            rmse: rmse(pred, truth)?,
            r2: r2(pred, truth)?,
            n_samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub config_fingerprint: String,
    pub split: String,
    pub seed: u64,
    pub n_samples: usize,
    /// Always `"original"`: metrics are taken after inverse normalization.
    pub units: String,
}

impl MetricsReport {
    pub fn new(metrics: Metrics, config: &RunConfig, split: &str) -> Self {
        Self {
            mae: metrics.mae,
            rmse: metrics.rmse,
            r2: metrics.r2,
            config_fingerprint: config.fingerprint(),
            split: split.to_string(),
            seed: config.seed,
            n_samples: metrics.n_samples,
            units: "original".into(),
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            mae: self.mae,
            rmse: self.rmse,
            r2: self.r2,
            n_samples: self.n_samples,
        }
    }
}

/// Anything that maps samples to `N x h` forecasts in normalized units.
pub trait Forecaster {
    fn forecast(&self, samples: &[&Sample]) -> Result<Vec<Tensor>>;
}

pub struct ModelForecaster<'a> {
    pub model: &'a Model,
    pub source: &'a AdjacencySource,
}

impl Forecaster for ModelForecaster<'_> {
    fn forecast(&self, samples: &[&Sample]) -> Result<Vec<Tensor>> {
        self.model.predict_batch(samples, self.source)
    }
}

/// Repeats the last observed row over the horizon.
pub struct Persistence {
    pub horizon: usize,
}

impl Forecaster for Persistence {
    fn forecast(&self, samples: &[&Sample]) -> Result<Vec<Tensor>> {
        Ok(samples
            .iter()
            .map(|s| {
                let last = s.input.rows() - 1;
                Tensor::from_fn(s.input.cols(), self.horizon, |i, _| s.input.get(last, i))
            })
            .collect())
    }
}

/// Forecasts every sample, inverse-normalizes, and pools all
/// `(sample, node, step)` elements into one metric trio.
pub fn evaluate(
    forecaster: &dyn Forecaster,
    dataset: &WindowedDataset,
    normalizer: &Normalizer,
) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    let refs: Vec<&Sample> = dataset.samples.iter().collect();
    let preds = forecaster.forecast(&refs)?;
    let mut pred_rows = Vec::with_capacity(preds.len());
    let mut truth_rows = Vec::with_capacity(preds.len());
    for (p, s) in preds.iter().zip(&refs) {
        if p.shape() != s.target.shape() {
            return Err(Error::Dimension {
                op: "evaluate",
                left: p.shape(),
                right: s.target.shape(),
            });
        }
        pred_rows.push(normalizer.inverse_node_rows(p));
        truth_rows.push(normalizer.inverse_node_rows(&s.target));
    }
    let pred = Tensor::vstack(&pred_rows)?;
    let truth = Tensor::vstack(&truth_rows)?;
    Metrics::compute(&pred, &truth, dataset.len())
}

pub fn persistence_baseline(dataset: &WindowedDataset, normalizer: &Normalizer) -> Result<Metrics> {
    evaluate(
        &Persistence {
            horizon: dataset.horizon,
        },
        dataset,
        normalizer,
    )
}

/// One dimension of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub enum Axis {
    Adjacency(Vec<AdjacencyMethod>),
    Temporal(Vec<TemporalCell>),
    Attention(Vec<bool>),
    GcnLayers(Vec<usize>),
}

impl Axis {
    /// Parses `adjacency`, `temporal`, `attention` or `gcn_layers` with
    /// the default value set of each axis.
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim() {
            "adjacency" => Ok(Axis::Adjacency(AdjacencyMethod::ABLATION.to_vec())),
            "temporal" => Ok(Axis::Temporal(vec![TemporalCell::Gru, TemporalCell::Lstm])),
            "attention" => Ok(Axis::Attention(vec![false, true])),
            "gcn_layers" => Ok(Axis::GcnLayers(vec![1, 2, 3])),
            other => Err(Error::Configuration(format!(
                "unknown ablation axis `{other}` (expected adjacency, temporal, attention or gcn_layers)"
            ))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Axis::Adjacency(_) => "adjacency",
            Axis::Temporal(_) => "temporal",
            Axis::Attention(_) => "attention",
            Axis::GcnLayers(_) => "gcn_layers",
        }
    }

    fn len(&self) -> usize {
        match self {
            Axis::Adjacency(v) => v.len(),
            Axis::Temporal(v) => v.len(),
            Axis::Attention(v) => v.len(),
            Axis::GcnLayers(v) => v.len(),
        }
    }

    /// Applies value `k` to `config` and returns its label.
    fn apply(&self, k: usize, config: &mut RunConfig) -> String {
        match self {
            Axis::Adjacency(v) => {
                config.graph.adjacency = v[k];
                v[k].to_string()
            }
            Axis::Temporal(v) => {
                config.model.temporal = v[k];
                v[k].as_str().to_string()
            }
            Axis::Attention(v) => {
                config.model.attention = v[k];
                if v[k] { "on" } else { "off" }.to_string()
            }
            Axis::GcnLayers(v) => {
                let width = config.model.gcn_hidden.last().copied().unwrap_or(32);
                config.model.gcn_hidden = vec![width; v[k]];
                v[k].to_string()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    /// `axis=value` pairs joined by `;`.
    pub delta: String,
    pub config: RunConfig,
    pub outcome: std::result::Result<MetricsReport, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub base: RunConfig,
    /// Sorted by test MAE; failed cells last, in grid order.
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn best(&self) -> Option<&AblationCell> {
        self.cells.first().filter(|c| c.outcome.is_ok())
    }

    pub fn cell(&self, delta: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.delta == delta)
    }

    /// `delta,mae,rmse,r2,seed`; failed cells keep empty metric fields.
    pub fn write_csv<W: Write>(&self, out: W, header_comment: Option<&str>) -> Result<()> {
        let mut out = out;
        if let Some(comment) = header_comment {
            for line in comment.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["delta", "mae", "rmse", "r2", "seed"])?;
        for c in &self.cells {
            let seed = c.config.seed.to_string();
            match &c.outcome {
                Ok(r) => w.write_record([
                    c.delta.clone(),
                    r.mae.to_string(),
                    r.rmse.to_string(),
                    r.r2.to_string(),
                    seed,
                ])?,
                Err(_) => w.write_record([c.delta.as_str(), "", "", "", &seed])?,
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains and tests every combination of `axes` on the same data, splits
/// and seed. A cell that fails keeps its error and the grid carries on.
pub fn run_ablation(
    base: &RunConfig,
    axes: &[Axis],
    series: &TrafficSeries,
    topology: &Topology,
    mut on_cell: impl FnMut(&AblationCell),
) -> Result<AblationGrid> {
    if axes.is_empty() {
        return Err(Error::Configuration(
            "ablation needs at least one axis".into(),
        ));
    }
    for (i, a) in axes.iter().enumerate() {
        if a.len() == 0 {
            return Err(Error::Configuration(format!(
                "ablation axis `{}` has no values",
                a.name()
            )));
        }
        if axes[..i].iter().any(|b| b.name() == a.name()) {
            return Err(Error::Configuration(format!(
                "ablation axis `{}` given twice",
                a.name()
            )));
        }
    }
    base.validate()?;
    let total: usize = axes.iter().map(Axis::len).product();
    let mut cells = Vec::with_capacity(total);
    for index in 0..total {
        let mut config = base.clone();
        let mut rest = index;
        let mut labels = Vec::with_capacity(axes.len());
        for axis in axes.iter().rev() {
            let k = rest % axis.len();
            rest /= axis.len();
            labels.push(format!("{}={}", axis.name(), axis.apply(k, &mut config)));
        }
        labels.reverse();
        let outcome = pipeline::train_and_test(&config, series, topology)
            .map(|run| run.test_report)
            .map_err(|e| e.to_string());
        let cell = AblationCell {
            delta: labels.join(";"),
            config,
            outcome,
        };
        on_cell(&cell);
        cells.push(cell);
    }
    cells.sort_by(|a, b| match (&a.outcome, &b.outcome) {
        (Ok(x), Ok(y)) => x.mae.total_cmp(&y.mae),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => std::cmp::Ordering::Equal,
    });
    Ok(AblationGrid {
        base: base.clone(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn worked_examples() {
        let p = row(&[2.0, 5.0]);
        let t = row(&[1.0, 3.0]);
        assert_eq!(mae(&p, &t).unwrap(), 1.5);
        assert!((rmse(&p, &t).unwrap() - 2.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn mean_predictor_has_zero_r2() {
        let t = row(&[1.0, 4.0, 2.0, 9.0]);
        let p = row(&[4.0; 4]);
        assert!(r2(&p, &t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn r2_errors() {
        let c = row(&[3.0, 3.0]);
        assert!(matches!(r2(&c, &c), Err(Error::R2Undefined)));
        assert!(matches!(
            r2(&row(&[1.0]), &row(&[1.0])),
            Err(Error::R2Undefined)
        ));
        assert!(mae(&row(&[1.0]), &row(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn persistence_repeats_last_row() {
        let s = Sample {
            input: Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]),
            target: Tensor::zeros(2, 3),
            time_features: Tensor::zeros(2, 2),
            start: 0,
        };
        let out = Persistence { horizon: 3 }.forecast(&[&s]).unwrap();
        assert_eq!(
            out[0],
            Tensor::from_rows(&[[3.0, 3.0, 3.0], [4.0, 4.0, 4.0]])
        );
    }

    #[test]
    fn axis_names() {
        assert!(matches!(Axis::parse("adjacency").unwrap(), Axis::Adjacency(v) if v.len() == 5));
        assert!(Axis::parse("dropout").is_err());
    }
}
