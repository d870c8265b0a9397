//! Run configuration: INI-style file, flag overrides, seeding, fingerprint.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::NormMode;
use crate::error::{Error, Result};
use crate::graph::AdjacencyMethod;
use crate::model::{ModelConfig, TemporalCell};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub window: usize,
    pub horizon: usize,
    pub stride: usize,
    pub normalization: NormMode,
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
    /// Adds sine/cosine time-of-day channels to every node's input.
    pub time_features: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            window: 12,
            horizon: 1,
            stride: 1,
            normalization: NormMode::Zscore,
            split: (0.7, 0.1, 0.2),
            time_features: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub adjacency: AdjacencyMethod,
    /// Gaussian kernel width; `None` uses the spread of the distances.
    pub sigma: Option<f64>,
    pub epsilon: f64,
    /// Correlation threshold for the correlation and adaptive methods.
    pub tau: f64,
    pub k: usize,
    pub adaptive_window: usize,
    pub adaptive_stride: usize,
    pub embedding_dim: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            adjacency: AdjacencyMethod::Explicit,
            sigma: None,
            epsilon: 0.1,
            tau: 0.5,
            k: 3,
            adaptive_window: 288,
            adaptive_stride: 48,
            embedding_dim: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub temporal: TemporalCell,
    /// Attention in every GCN layer.
    pub attention: bool,
    pub attention_negative_slope: f64,
    pub gcn_hidden: Vec<usize>,
    pub hidden: usize,
    pub gru_bias: bool,
    pub head_hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1);
        Self {
            temporal: m.temporal,
            attention: false,
            attention_negative_slope: m.attention_negative_slope,
            gcn_hidden: m.gcn_hidden,
            hidden: m.hidden,
            gru_bias: m.gru_bias,
            head_hidden: m.head_hidden,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub graph: GraphConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
}

/// Independent random streams derived from the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    Init = 1,
    Shuffle = 2,
    Synthetic = 3,
}

pub fn stream_rng(seed: u64, stream: SeedStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("invalid boolean `{value}` for `{key}`")),
    }
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn format_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses INI-style text over the defaults. `seed` may sit above the
    /// first section; everything else lives in `[data]`, `[graph]`,
    /// `[model]` or `[train]`.
    pub fn from_ini(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find(['#', ';']) {
                Some(at) => &raw[..at],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::ConfigParse {
                line: idx + 1,
                message,
            };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{line}`")))?;
                section = name.trim().to_string();
                if !["data", "graph", "model", "train"].contains(&section.as_str()) {
                    return Err(err(format!("unknown section `[{section}]`")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            config
                .set(&section, key.trim(), value.trim())
                .map_err(err)?;
        }
        Ok(config)
    }

    /// Reads an INI file, or a JSON document that is either a config or
    /// any artifact carrying one under `"config"`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if text.trim_start().starts_with('{') {
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let inner = value.get("config").cloned().unwrap_or(value);
            let inner = inner.get("run").cloned().unwrap_or(inner);
            return Ok(serde_json::from_value(inner)?);
        }
        Self::from_ini(&text)
    }

    /// Sets one key; `section` is empty for top-level keys.
    pub fn set(
        &mut self,
        section: &str,
        key: &str,
        value: &str,
    ) -> std::result::Result<(), String> {
        let full = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        let k = full.as_str();
        match k {
            "seed" => self.seed = parse(k, value)?,
            "data.window" => self.data.window = parse(k, value)?,
            "data.horizon" => self.data.horizon = parse(k, value)?,
            "data.stride" => self.data.stride = parse(k, value)?,
            "data.normalization" => self.data.normalization = parse(k, value)?,
            "data.split" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|v| parse(k, v.trim()))
                    .collect::<std::result::Result<_, _>>()?;
                match parts[..] {
                    [a, b, c] => self.data.split = (a, b, c),
                    _ => return Err(format!("`{k}` needs three comma-separated fractions")),
                }
            }
            "data.time_features" => self.data.time_features = parse_bool(k, value)?,
            "graph.adjacency" => self.graph.adjacency = parse(k, value)?,
            "graph.sigma" => {
                self.graph.sigma = match value {
                    "" | "auto" => None,
                    v => Some(parse(k, v)?),
                }
            }
            "graph.epsilon" => self.graph.epsilon = parse(k, value)?,
            "graph.tau" => self.graph.tau = parse(k, value)?,
            "graph.k" => self.graph.k = parse(k, value)?,
            "graph.adaptive_window" => self.graph.adaptive_window = parse(k, value)?,
            "graph.adaptive_stride" => self.graph.adaptive_stride = parse(k, value)?,
            "graph.embedding_dim" => self.graph.embedding_dim = parse(k, value)?,
            "model.temporal" => self.model.temporal = parse(k, value)?,
            "model.attention" => self.model.attention = parse_bool(k, value)?,
            "model.attention_negative_slope" => {
                self.model.attention_negative_slope = parse(k, value)?
            }
            "model.gcn_hidden" => self.model.gcn_hidden = parse_list(k, value)?,
            "model.hidden" => self.model.hidden = parse(k, value)?,
            "model.gru_bias" => self.model.gru_bias = parse_bool(k, value)?,
            "model.head_hidden" => self.model.head_hidden = parse_list(k, value)?,
            "train.epochs" => self.train.epochs = parse(k, value)?,
            "train.batch_size" => self.train.batch_size = parse(k, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(k, value)?,
            "train.beta1" => self.train.beta1 = parse(k, value)?,
            "train.beta2" => self.train.beta2 = parse(k, value)?,
            "train.epsilon" => self.train.epsilon = parse(k, value)?,
            "train.clip_norm" => self.train.clip_norm = parse(k, value)?,
            "train.patience" => self.train.patience = parse(k, value)?,
            _ => return Err(format!("unknown key `{k}`")),
        }
        Ok(())
    }

    /// INI text that [`RunConfig::from_ini`] maps back to `self`.
    pub fn to_ini(&self) -> String {
        let (d, g, m, t) = (&self.data, &self.graph, &self.model, &self.train);
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(
            s,
            "window = {}\nhorizon = {}\nstride = {}",
            d.window, d.horizon, d.stride
        );
        let _ = writeln!(s, "normalization = {}", d.normalization.as_str());
        let _ = writeln!(s, "split = {},{},{}", d.split.0, d.split.1, d.split.2);
        let _ = writeln!(s, "time_features = {}", d.time_features);
        let _ = writeln!(s, "\n[graph]\nadjacency = {}", g.adjacency);
        let _ = writeln!(
            s,
            "sigma = {}",
            g.sigma
                .map_or_else(|| "auto".to_string(), |v| v.to_string())
        );
        let _ = writeln!(s, "epsilon = {}\ntau = {}\nk = {}", g.epsilon, g.tau, g.k);
        let _ = writeln!(
            s,
            "adaptive_window = {}\nadaptive_stride = {}\nembedding_dim = {}",
            g.adaptive_window, g.adaptive_stride, g.embedding_dim
        );
        let _ = writeln!(s, "\n[model]\ntemporal = {}", m.temporal.as_str());
        let _ = writeln!(s, "attention = {}", m.attention);
        let _ = writeln!(
            s,
            "attention_negative_slope = {}",
            m.attention_negative_slope
        );
        let _ = writeln!(s, "gcn_hidden = {}", format_list(&m.gcn_hidden));
        let _ = writeln!(s, "hidden = {}\ngru_bias = {}", m.hidden, m.gru_bias);
        let _ = writeln!(s, "head_hidden = {}", format_list(&m.head_hidden));
        let _ = writeln!(
            s,
            "\n[train]\nepochs = {}\nbatch_size = {}",
            t.epochs, t.batch_size
        );
        let _ = writeln!(
            s,
            "learning_rate = {}\nbeta1 = {}\nbeta2 = {}",
            t.learning_rate, t.beta1, t.beta2
        );
        let _ = writeln!(
            s,
            "epsilon = {}\nclip_norm = {}\npatience = {}",
            t.epsilon, t.clip_norm, t.patience
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Configuration(m.into()));
        let d = &self.data;
        if d.window == 0 || d.horizon == 0 || d.stride == 0 {
            return bad("window, horizon and stride must be >= 1");
        }
        let g = &self.graph;
        if g.sigma.is_some_and(|s| !(s > 0.0)) {
            return bad("sigma must be > 0");
        }
        if !(0.0..1.0).contains(&g.epsilon) || !(0.0..=1.0).contains(&g.tau) {
            return bad("epsilon must lie in [0, 1) and tau in [0, 1]");
        }
        if g.k == 0 || g.adaptive_window == 0 || g.adaptive_stride == 0 || g.embedding_dim == 0 {
            return bad("k, adaptive_window, adaptive_stride and embedding_dim must be >= 1");
        }
        self.train.validate()?;
        if self.train.learning_rate <= 0.0 {
            return bad("learning_rate must be > 0");
        }
        self.model_config(1).validate()
    }

    /// Architecture for `nodes` nodes.
    pub fn model_config(&self, nodes: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            nodes,
            input_features: if self.data.time_features { 3 } else { 1 },
            gcn_hidden: m.gcn_hidden.clone(),
            attention_layers: if m.attention {
                (0..m.gcn_hidden.len()).collect()
            } else {
                Vec::new()
            },
            attention_negative_slope: m.attention_negative_slope,
            temporal: m.temporal,
            hidden: m.hidden,
            gru_bias: m.gru_bias,
            head_hidden: m.head_hidden.clone(),
            horizon: self.data.horizon,
            embedding_dim: (self.graph.adjacency == AdjacencyMethod::Learnable)
                .then_some(self.graph.embedding_dim),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn rng(&self, stream: SeedStream) -> ChaCha8Rng {
        stream_rng(self.seed, stream)
    }
}
