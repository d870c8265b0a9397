//! Adjacency construction and normalization.
//!
//! Static constructors (distance, correlation, knn, explicit) return
//! symmetric, zero-diagonal, nonnegative matrices. The adaptive schedule
//! recomputes correlation adjacency on rolling windows; the learnable
//! variant is built on a [`Tape`] from node embeddings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TrafficSeries;
use crate::diffcore::{sym_normalize, Mask, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyMethod {
    Distance,
    Correlation,
    Knn,
    Adaptive,
    Learnable,
    Explicit,
}

impl AdjacencyMethod {
    /// The five construction strategies compared in the adjacency ablation.
    pub const ABLATION: [AdjacencyMethod; 5] = [
        AdjacencyMethod::Distance,
        AdjacencyMethod::Correlation,
        AdjacencyMethod::Knn,
        AdjacencyMethod::Adaptive,
        AdjacencyMethod::Learnable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdjacencyMethod::Distance => "distance",
            AdjacencyMethod::Correlation => "correlation",
            AdjacencyMethod::Knn => "knn",
            AdjacencyMethod::Adaptive => "adaptive",
            AdjacencyMethod::Learnable => "learnable",
            AdjacencyMethod::Explicit => "explicit",
        }
    }

    pub fn is_static(self) -> bool {
        !matches!(self, AdjacencyMethod::Adaptive | AdjacencyMethod::Learnable)
    }
}

impl fmt::Display for AdjacencyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdjacencyMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "distance" => AdjacencyMethod::Distance,
            "correlation" => AdjacencyMethod::Correlation,
            "knn" => AdjacencyMethod::Knn,
            "adaptive" => AdjacencyMethod::Adaptive,
            "learnable" => AdjacencyMethod::Learnable,
            "explicit" => AdjacencyMethod::Explicit,
            other => {
                return Err(Error::Configuration(format!(
                    "unknown adjacency method `{other}`"
                )))
            }
        })
    }
}

/// Network graph: named nodes, weighted undirected edges and an optional
/// pairwise distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub node_names: Vec<String>,
    pub edges: Vec<(usize, usize, f64)>,
    pub distances: Option<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TopologyFile {
    nodes: Vec<String>,
    #[serde(default)]
    edges: Vec<(usize, usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distances: Option<Vec<Vec<f64>>>,
}

impl Topology {
    pub fn new(
        node_names: Vec<String>,
        edges: Vec<(usize, usize, f64)>,
        distances: Option<Tensor>,
    ) -> Result<Self> {
        let n = node_names.len();
        if n == 0 {
            return Err(Error::Configuration("topology has no nodes".into()));
        }
        for (k, name) in node_names.iter().enumerate() {
            if node_names[..k].contains(name) {
                return Err(Error::Configuration(format!(
                    "duplicate node name `{name}`"
                )));
            }
        }
        for &(i, j, w) in &edges {
            if i >= n || j >= n {
                return Err(Error::Configuration(format!(
                    "edge ({i}, {j}) references a node outside [0, {n})"
                )));
            }
            if i == j {
                return Err(Error::Configuration(format!("self-loop edge on node {i}")));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Configuration(format!(
                    "edge ({i}, {j}) has invalid weight {w}"
                )));
            }
        }
        if let Some(d) = &distances {
            if d.shape() != (n, n) {
                return Err(Error::Configuration(format!(
                    "distance matrix is {}x{}, expected {n}x{n}",
                    d.rows(),
                    d.cols()
                )));
            }
            if d.data().iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::Configuration(
                    "distance matrix has negative or non-finite entries".into(),
                ));
            }
            if d.max_abs_diff(&d.transpose()) > 0.0 {
                return Err(Error::Configuration(
                    "distance matrix is not symmetric".into(),
                ));
            }
        }
        Ok(Self {
            node_names,
            edges,
            distances,
        })
    }

    /// Ring of `n` nodes named `n0..`, unit edge weights and hop distances.
    pub fn ring(n: usize) -> Result<Self> {
        let names = (0..n).map(|i| format!("n{i}")).collect();
        let edges = if n < 2 {
            Vec::new()
        } else if n == 2 {
            vec![(0, 1, 1.0)]
        } else {
            (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect()
        };
        let dist = Tensor::from_fn(n, n, |i, j| {
            let d = i.abs_diff(j);
            d.min(n - d) as f64
        });
        Self::new(names, edges, Some(dist))
    }

    pub fn len(&self) -> usize {
        self.node_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_names.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TopologyFile = serde_json::from_str(text)?;
        let n = file.nodes.len();
        let distances = match file.distances {
            None => None,
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Configuration(format!(
                        "distance matrix must be {n}x{n}"
                    )));
                }
                Some(Tensor::from_rows(&rows))
            }
        };
        Self::new(file.nodes, file.edges, distances)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TopologyFile {
            nodes: self.node_names.clone(),
            edges: self.edges.clone(),
            distances: self
                .distances
                .as_ref()
                .map(|d| (0..d.rows()).map(|i| d.row(i).to_vec()).collect()),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Adjacency list view of the edge set (both directions).
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for &(i, j, _) in &self.edges {
            if !out[i].contains(&j) {
                out[i].push(j);
            }
            if !out[j].contains(&i) {
                out[j].push(i);
            }
        }
        for list in &mut out {
            list.sort_unstable();
        }
        out
    }
}

/// Raw (unnormalized) adjacency `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    pub a: Tensor,
    pub method: AdjacencyMethod,
}

impl AdjacencyMatrix {
    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn is_symmetric(&self) -> bool {
        self.a.max_abs_diff(&self.a.transpose()) == 0.0
    }

    /// Neighbor set for attention: nonzero entries plus self.
    pub fn neighbor_mask(&self) -> Mask {
        Mask::support_with_self(&self.a)
    }
}

/// `Â = D^{-1/2}(A+I)D^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    pub a_hat: Tensor,
}

pub fn normalize(adj: &AdjacencyMatrix) -> Result<NormalizedAdjacency> {
    let a = &adj.a;
    if a.rows() != a.cols() {
        return Err(Error::InvalidAdjacency(format!(
            "matrix is {}x{}, expected square",
            a.rows(),
            a.cols()
        )));
    }
    if let Some(pos) = a.data().iter().position(|&x| !(x >= 0.0 && x.is_finite())) {
        let n = a.cols();
        return Err(Error::InvalidAdjacency(format!(
            "entry ({}, {}) = {} is negative or non-finite",
            pos / n,
            pos % n,
            a.data()[pos]
        )));
    }
    let (a_hat, _) = sym_normalize(a);
    Ok(NormalizedAdjacency { a_hat })
}

/// Adjacency from the topology's own edge list, symmetrized by maximum
/// when an edge is listed twice.
pub fn explicit_adjacency(topology: &Topology) -> AdjacencyMatrix {
    let n = topology.len();
    let mut a = Tensor::zeros(n, n);
    for &(i, j, w) in &topology.edges {
        let v = a.get(i, j).max(w);
        a.set(i, j, v);
        a.set(j, i, v);
    }
    AdjacencyMatrix {
        a,
        method: AdjacencyMethod::Explicit,
    }
}

/// Explicit adjacency from CSV text: `N` rows of `N` comma-separated reals.
pub fn adjacency_from_csv(text: &str, n: usize) -> Result<AdjacencyMatrix> {
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Schema(format!("adjacency csv line {}: {e}", line_no + 1)))
            })
            .collect::<Result<_>>()?;
        if row.len() != n {
            return Err(Error::Schema(format!(
                "adjacency csv line {} has {} values, expected {n}",
                line_no + 1,
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.len() != n {
        return Err(Error::Schema(format!(
            "adjacency csv has {} rows, expected {n}",
            rows.len()
        )));
    }
    let a = Tensor::from_rows(&rows);
    if a.data().iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::InvalidAdjacency(
            "negative or non-finite entry".into(),
        ));
    }
    if (0..n).any(|i| a.get(i, i) != 0.0) {
        return Err(Error::InvalidAdjacency("nonzero diagonal".into()));
    }
    let adj = AdjacencyMatrix {
        a,
        method: AdjacencyMethod::Explicit,
    };
    if !adj.is_symmetric() {
        return Err(Error::InvalidAdjacency("matrix is not symmetric".into()));
    }
    Ok(adj)
}

/// Gaussian kernel `exp(-d²/σ²)` thresholded at `epsilon`.
pub fn distance_adjacency(
    topology: &Topology,
    sigma: f64,
    epsilon: f64,
) -> Result<AdjacencyMatrix> {
    let d = topology
        .distances
        .as_ref()
        .ok_or_else(|| Error::Configuration("distance adjacency needs a distance matrix".into()))?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Parameter(format!(
            "epsilon must lie in [0, 1), got {epsilon}"
        )));
    }
    let n = topology.len();
    let a = Tensor::from_fn(n, n, |i, j| {
        if i == j {
            return 0.0;
        }
        let dij = d.get(i, j);
        let w = (-(dij * dij) / (sigma * sigma)).exp();
        if w >= epsilon {
            w
        } else {
            0.0
        }
    });
    Ok(AdjacencyMatrix {
        a,
        method: AdjacencyMethod::Distance,
    })
}

/// Standard deviation of the off-diagonal distances; the default kernel width.
pub fn default_sigma(topology: &Topology) -> Option<f64> {
    let d = topology.distances.as_ref()?;
    let n = topology.len();
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| d.get(i, j))
        .collect();
    if vals.is_empty() {
        return None;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    (var > 0.0).then(|| var.sqrt()).or(Some(mean.max(1.0)))
}

/// Pearson correlation between the columns of `values` (`T x N`).
pub fn pearson_matrix(values: &Tensor, node_names: &[String]) -> Result<Tensor> {
    let (t, n) = values.shape();
    if t < 3 {
        return Err(Error::InsufficientData {
            required: 3,
            available: t,
        });
    }
    let mut centered = vec![vec![0.0; t]; n];
    let mut norms = vec![0.0; n];
    for j in 0..n {
        let mean = (0..t).map(|r| values.get(r, j)).sum::<f64>() / t as f64;
        for r in 0..t {
            centered[j][r] = values.get(r, j) - mean;
        }
        norms[j] = centered[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norms[j] == 0.0 || !norms[j].is_finite() {
            return Err(Error::DegenerateSeries {
                node: node_names.get(j).cloned().unwrap_or_else(|| j.to_string()),
            });
        }
    }
    let mut out = Tensor::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = centered[i]
                .iter()
                .zip(&centered[j])
                .map(|(a, b)| a * b)
                .sum();
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out.set(i, j, r);
            out.set(j, i, r);
        }
    }
    Ok(out)
}

fn abs_correlation_thresholded(corr: &Tensor, tau: f64) -> Tensor {
    let n = corr.rows();
    Tensor::from_fn(n, n, |i, j| {
        let r = corr.get(i, j).abs();
        if i != j && r >= tau {
            r
        } else {
            0.0
        }
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Parameter(format!(
            "tau must lie in [0, 1], got {tau}"
        )));
    }
    Ok(())
}

/// `|Pearson|` between node series, zeroed below `tau`.
pub fn correlation_adjacency(series: &TrafficSeries, tau: f64) -> Result<AdjacencyMatrix> {
    check_tau(tau)?;
    let corr = pearson_matrix(&series.values, &series.node_names)?;
    Ok(AdjacencyMatrix {
        a: abs_correlation_thresholded(&corr, tau),
        method: AdjacencyMethod::Correlation,
    })
}

/// Each node keeps its `k` strongest absolute correlations (ties go to the
/// lower index), then `A ← max(A, Aᵀ)`.
pub fn knn_adjacency(series: &TrafficSeries, k: usize) -> Result<AdjacencyMatrix> {
    let n = series.n_nodes();
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!(
            "knn needs 1 <= k < N, got k={k}, N={n}"
        )));
    }
    let corr = pearson_matrix(&series.values, &series.node_names)?;
    Ok(AdjacencyMatrix {
        a: knn_from_correlation(&corr, k),
        method: AdjacencyMethod::Knn,
    })
}

pub(crate) fn knn_from_correlation(corr: &Tensor, k: usize) -> Tensor {
    let n = corr.rows();
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        let mut cand: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, corr.get(i, j).abs()))
            .collect();
        // stable sort keeps the lower index first among equal strengths
        cand.sort_by(|x, y| y.1.total_cmp(&x.1));
        for &(j, w) in cand.iter().take(k) {
            a.set(i, j, w);
        }
    }
    let at = a.transpose();
    a.zip_with(&at, "knn", f64::max).expect("square")
}

/// Correlation adjacencies recomputed on rolling windows of the series.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveSchedule {
    pub window: usize,
    pub stride: usize,
    /// `(end, A)`: `A` computed on rows `[end - window, end)`.
    pub entries: Vec<(usize, AdjacencyMatrix)>,
}

impl AdaptiveSchedule {
    /// Adjacency of the latest window whose rows all lie at or before
    /// `last_row`. `None` if no window has completed yet.
    pub fn lookup(&self, last_row: usize) -> Option<&AdjacencyMatrix> {
        let idx = self
            .entries
            .partition_point(|(end, _)| *end <= last_row + 1);
        idx.checked_sub(1).map(|i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn adaptive_adjacency(
    series: &TrafficSeries,
    window: usize,
    stride: usize,
    tau: f64,
) -> Result<AdaptiveSchedule> {
    check_tau(tau)?;
    let t = series.len();
    if window > t {
        return Err(Error::Parameter(format!(
            "adaptive window {window} exceeds series length {t}"
        )));
    }
    if stride == 0 {
        return Err(Error::Parameter("adaptive stride must be >= 1".into()));
    }
    let mut entries = Vec::new();
    let mut start = 0;
    while start + window <= t {
        let slice = series.values.slice_rows(start, start + window);
        let corr = pearson_matrix(&slice, &series.node_names)?;
        entries.push((
            start + window,
            AdjacencyMatrix {
                a: abs_correlation_thresholded(&corr, tau),
                method: AdjacencyMethod::Adaptive,
            },
        ));
        start += stride;
    }
    Ok(AdaptiveSchedule {
        window,
        stride,
        entries,
    })
}

/// `row_softmax(relu(E Eᵀ))` over off-diagonal entries, recorded on `tape`.
/// A row zeroed by the relu comes out uniform over the other nodes.
pub fn learnable_adjacency(tape: &mut Tape, embeddings: Var) -> Result<Var> {
    let (n, e) = tape.value(embeddings).shape();
    if e == 0 {
        return Err(Error::Parameter("embedding dimension must be >= 1".into()));
    }
    let et = tape.transpose(embeddings);
    let scores = tape.matmul(embeddings, et)?;
    let scores = tape.relu(scores);
    tape.row_softmax_masked(scores, &Mask::off_diagonal(n))
}

/// Plain-value evaluation of [`learnable_adjacency`].
pub fn learnable_adjacency_value(embeddings: &Tensor) -> Result<AdjacencyMatrix> {
    let mut tape = Tape::new();
    let e = tape.leaf(embeddings.clone());
    let a = learnable_adjacency(&mut tape, e)?;
    Ok(AdjacencyMatrix {
        a: tape.value(a).clone(),
        method: AdjacencyMethod::Learnable,
    })
}
