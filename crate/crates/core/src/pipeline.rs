//! End-to-end glue: data preparation, graph selection, training runs and
//! checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SeedStream};
use crate::data::{self, Normalizer, TrafficSeries, WindowedDataset};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::eval::{self, Metrics, MetricsReport, ModelForecaster};
use crate::graph::{self, AdjacencyMatrix, AdjacencyMethod, Topology};
use crate::model::{AdjacencySource, Model, ModelConfig, ModelParams};
use crate::train::{self, EpochRecord, TrainHistory, TrainingSet};

/// Normalized, windowed and split data plus the graph the model reads.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub scaled: TrafficSeries,
    pub normalizer: Normalizer,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    /// Fixed adjacency for the static methods.
    pub adjacency: Option<AdjacencyMatrix>,
    pub source: AdjacencySource,
}

impl Prepared {
    pub fn split(&self, name: &str) -> Result<&WindowedDataset> {
        match name {
            "train" => Ok(&self.train),
            "val" | "validation" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Configuration(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// Rows the normalizer and the data-driven graphs may look at.
pub fn train_rows(config: &RunConfig, t: usize) -> usize {
    (config.data.split.0 * t as f64 + 1e-9).floor() as usize
}

/// Builds the fixed adjacency for a static method. Correlation-based
/// methods see only `fit_rows` leading rows.
pub fn static_adjacency(
    config: &RunConfig,
    series: &TrafficSeries,
    topology: &Topology,
    fit_rows: usize,
) -> Result<AdjacencyMatrix> {
    let g = &config.graph;
    match g.adjacency {
        AdjacencyMethod::Explicit => Ok(graph::explicit_adjacency(topology)),
        AdjacencyMethod::Distance => {
            let sigma = match g.sigma {
                Some(s) => s,
                None => graph::default_sigma(topology).ok_or_else(|| {
                    Error::Configuration(
                        "distance adjacency needs a topology with distances".into(),
                    )
                })?,
            };
            graph::distance_adjacency(topology, sigma, g.epsilon)
        }
        AdjacencyMethod::Correlation => graph::correlation_adjacency(&series.head(fit_rows), g.tau),
        AdjacencyMethod::Knn => graph::knn_adjacency(&series.head(fit_rows), g.k),
        other => Err(Error::Configuration(format!(
            "`{other}` adjacency is not static"
        ))),
    }
}

/// Fitted state restored from a checkpoint instead of refitted.
pub struct Fitted<'a> {
    pub normalizer: &'a Normalizer,
    pub adjacency: Option<&'a AdjacencyMatrix>,
}

pub fn prepare(
    config: &RunConfig,
    series: &TrafficSeries,
    topology: &Topology,
    fitted: Option<Fitted<'_>>,
) -> Result<Prepared> {
    config.validate()?;
    if topology.node_names != series.node_names {
        return Err(Error::Schema(format!(
            "series has {} nodes {:?}, topology has {} nodes {:?}",
            series.n_nodes(),
            series.node_names,
            topology.len(),
            topology.node_names
        )));
    }
    let rows = train_rows(config, series.len());
    let normalizer = match &fitted {
        Some(f) => {
            if f.normalizer.n_nodes() != series.n_nodes() {
                return Err(Error::Schema(format!(
                    "normalizer covers {} nodes, data has {}",
                    f.normalizer.n_nodes(),
                    series.n_nodes()
                )));
            }
            f.normalizer.clone()
        }
        None => Normalizer::fit(series, config.data.normalization, rows)?,
    };
    let scaled = TrafficSeries {
        timestamps: series.timestamps.clone(),
        values: normalizer.transform(&series.values),
        node_names: series.node_names.clone(),
    };
    let d = &config.data;
    let windows = data::make_windows(&scaled, d.window, d.horizon, d.stride)?;
    let (train, val, test) = data::chrono_split(&windows, d.split)?;

    let method = config.graph.adjacency;
    let (adjacency, source) = match method {
        AdjacencyMethod::Learnable => (None, AdjacencySource::Learnable),
        AdjacencyMethod::Adaptive => {
            let g = &config.graph;
            let schedule =
                graph::adaptive_adjacency(&scaled, g.adaptive_window, g.adaptive_stride, g.tau)?;
            (None, AdjacencySource::adaptive(&schedule)?)
        }
        _ => {
            let adj = match fitted.as_ref().and_then(|f| f.adjacency) {
                Some(a) => a.clone(),
                None => static_adjacency(config, series, topology, rows)?,
            };
            let source = AdjacencySource::fixed(&adj)?;
            (Some(adj), source)
        }
    };
    Ok(Prepared {
        scaled,
        normalizer,
        train,
        val,
        test,
        adjacency,
        source,
    })
}

pub struct TrainedRun {
    pub model: Model,
    pub history: TrainHistory,
    pub prepared: Prepared,
    pub test_report: MetricsReport,
    pub baseline: Metrics,
}

impl TrainedRun {
    pub fn checkpoint(&self, config: &RunConfig) -> Checkpoint {
        Checkpoint {
            run: config.clone(),
            model: self.model.clone(),
            node_names: self.prepared.scaled.node_names.clone(),
            normalizer: self.prepared.normalizer.clone(),
            adjacency: self.prepared.adjacency.clone(),
        }
    }
}

pub fn train_and_test(
    config: &RunConfig,
    series: &TrafficSeries,
    topology: &Topology,
) -> Result<TrainedRun> {
    train_with_progress(config, series, topology, |_| {})
}

/// Prepares data, trains with early stopping, and scores the best
/// snapshot and the persistence baseline on the test split.
pub fn train_with_progress(
    config: &RunConfig,
    series: &TrafficSeries,
    topology: &Topology,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedRun> {
    let prepared = prepare(config, series, topology, None)?;
    let model = Model::new(
        config.model_config(series.n_nodes()),
        &mut config.rng(SeedStream::Init),
    )?;
    let set = TrainingSet {
        train: &prepared.train,
        val: &prepared.val,
        source: &prepared.source,
        normalizer: &prepared.normalizer,
    };
    let (model, history) = train::train(
        model,
        &set,
        &config.train,
        config.rng(SeedStream::Shuffle),
        on_epoch,
    )?;
    let forecaster = ModelForecaster {
        model: &model,
        source: &prepared.source,
    };
    let test = eval::evaluate(&forecaster, &prepared.test, &prepared.normalizer)?;
    let baseline = eval::persistence_baseline(&prepared.test, &prepared.normalizer)?;
    Ok(TrainedRun {
        test_report: MetricsReport::new(test, config, "test"),
        model,
        history,
        prepared,
        baseline,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointConfig {
    run: RunConfig,
    model: ModelConfig,
    nodes: Vec<String>,
    normalization: data::NormMode,
    adjacency_method: Option<AdjacencyMethod>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    config: CheckpointConfig,
    tensors: BTreeMap<String, TensorRecord>,
}

const NORM_OFFSET: &str = "normalizer.offset";
const NORM_SCALE: &str = "normalizer.scale";
const ADJACENCY: &str = "adjacency.a";

/// Everything needed to evaluate or forecast without retraining.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub model: Model,
    pub node_names: Vec<String>,
    pub normalizer: Normalizer,
    pub adjacency: Option<AdjacencyMatrix>,
}

fn record(t: &Tensor) -> TensorRecord {
    TensorRecord {
        shape: [t.rows(), t.cols()],
        data: t.data().to_vec(),
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let mut tensors: BTreeMap<String, TensorRecord> = self
            .model
            .params
            .named()
            .into_iter()
            .map(|(name, t)| (name, record(t)))
            .collect();
        let row = |v: &[f64]| Tensor::new(1, v.len(), v.to_vec()).expect("row vector");
        tensors.insert(NORM_OFFSET.into(), record(&row(&self.normalizer.offset)));
        tensors.insert(NORM_SCALE.into(), record(&row(&self.normalizer.scale)));
        if let Some(adj) = &self.adjacency {
            tensors.insert(ADJACENCY.into(), record(&adj.a));
        }
        let file = CheckpointFile {
            version: 1,
            config: CheckpointConfig {
                run: self.run.clone(),
                model: self.model.config.clone(),
                nodes: self.node_names.clone(),
                normalization: self.normalizer.mode,
                adjacency_method: self.adjacency.as_ref().map(|a| a.method),
            },
            tensors,
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("parse error: {e}")))?;
        if file.version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let cfg = file.config;
        let mut map = BTreeMap::new();
        for (name, rec) in file.tensors {
            let t = Tensor::new(rec.shape[0], rec.shape[1], rec.data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            map.insert(name, t);
        }
        let n = cfg.nodes.len();
        if cfg.model.nodes != n {
            return Err(Error::Checkpoint(format!(
                "model expects {} nodes but {n} names are listed",
                cfg.model.nodes
            )));
        }
        cfg.model.validate()?;
        let params = ModelParams::from_tensor_map(&cfg.model, &map)?;
        let vector = |name: &str| -> Result<Vec<f64>> {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != (1, n) {
                return Err(Error::Checkpoint(format!("`{name}` must be 1x{n}")));
            }
            Ok(t.data().to_vec())
        };
        let normalizer = Normalizer {
            mode: cfg.normalization,
            offset: vector(NORM_OFFSET)?,
            scale: vector(NORM_SCALE)?,
        };
        let adjacency = match (cfg.adjacency_method, map.get(ADJACENCY)) {
            (Some(method), Some(a)) if a.shape() == (n, n) => Some(AdjacencyMatrix {
                a: a.clone(),
                method,
            }),
            (None, None) => None,
            _ => {
                return Err(Error::Checkpoint(format!(
                    "`{ADJACENCY}` missing or not {n}x{n}"
                )))
            }
        };
        Ok(Self {
            run: cfg.run,
            model: Model {
                config: cfg.model,
                params,
            },
            node_names: cfg.nodes,
            normalizer,
            adjacency,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds the data view this checkpoint was trained on, reusing its
    /// normalizer and fixed graph.
    pub fn prepare(&self, series: &TrafficSeries, topology: &Topology) -> Result<Prepared> {
        if series.n_nodes() != self.node_names.len() {
            return Err(Error::Schema(format!(
                "checkpoint has N={} nodes but data has N={}",
                self.node_names.len(),
                series.n_nodes()
            )));
        }
        prepare(
            &self.run,
            series,
            topology,
            Some(Fitted {
                normalizer: &self.normalizer,
                adjacency: self.adjacency.as_ref(),
            }),
        )
    }

    /// Topology stand-in with the checkpoint's node names and no edges;
    /// enough for every method except a fresh static build.
    pub fn bare_topology(&self) -> Result<Topology> {
        Topology::new(self.node_names.clone(), Vec::new(), None)
    }
}
