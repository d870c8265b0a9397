//! GCN encoder (optionally attention-weighted), GRU/LSTM temporal cell and
//! MLP head, all recorded on a [`Tape`].
//!
//! Samples are processed in batches by stacking their node rows: a batch of
//! `B` samples turns every per-timestep `N x F` frame into a `(B*N) x F`
//! matrix. Graph aggregation is block-diagonal over the `N`-row blocks and
//! every other layer acts row-wise, so batching never mixes samples.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::diffcore::{Mask, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{self, AdaptiveSchedule, AdjacencyMatrix, AdjacencyMethod, NormalizedAdjacency};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalCell {
    Gru,
    Lstm,
}

impl TemporalCell {
    pub fn as_str(self) -> &'static str {
        match self {
            TemporalCell::Gru => "gru",
            TemporalCell::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for TemporalCell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(TemporalCell::Gru),
            "lstm" => Ok(TemporalCell::Lstm),
            other => Err(Error::Configuration(format!(
                "unknown temporal cell `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

/// Architecture sizes and switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub nodes: usize,
    pub input_features: usize,
    pub gcn_hidden: Vec<usize>,
    /// GCN layers (0-based) that aggregate with attention instead of `Â`.
    pub attention_layers: Vec<usize>,
    /// Slope of the score activation for negative inputs; 0 is plain relu.
    pub attention_negative_slope: f64,
    pub temporal: TemporalCell,
    pub hidden: usize,
    pub gru_bias: bool,
    pub head_hidden: Vec<usize>,
    pub horizon: usize,
    /// Embedding width for learnable adjacency; `None` when the graph is fixed.
    pub embedding_dim: Option<usize>,
}

impl ModelConfig {
    pub fn new(nodes: usize) -> Self {
        Self {
            nodes,
            input_features: 1,
            gcn_hidden: vec![32, 32],
            attention_layers: Vec::new(),
            attention_negative_slope: 0.0,
            temporal: TemporalCell::Gru,
            hidden: 64,
            gru_bias: false,
            head_hidden: vec![32],
            horizon: 1,
            embedding_dim: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.nodes == 0 || self.input_features == 0 || self.hidden == 0 || self.horizon == 0 {
            return bad("nodes, input_features, hidden and horizon must be >= 1".into());
        }
        if self.gcn_hidden.is_empty() || self.gcn_hidden.contains(&0) {
            return bad("gcn_hidden needs at least one nonzero width".into());
        }
        if self.head_hidden.contains(&0) {
            return bad("head_hidden widths must be nonzero".into());
        }
        if let Some(&l) = self
            .attention_layers
            .iter()
            .find(|&&l| l >= self.gcn_hidden.len())
        {
            return bad(format!(
                "attention layer {l} out of range for {} GCN layers",
                self.gcn_hidden.len()
            ));
        }
        if self.embedding_dim == Some(0) {
            return bad("embedding_dim must be >= 1".into());
        }
        if !(self.attention_negative_slope >= 0.0 && self.attention_negative_slope < 1.0) {
            return bad("attention_negative_slope must lie in [0, 1)".into());
        }
        Ok(())
    }

    fn gcn_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.gcn_hidden.len());
        let mut fan_in = self.input_features;
        for &w in &self.gcn_hidden {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    fn encoded_dim(&self) -> usize {
        *self.gcn_hidden.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `F x F'`
    pub weight: Tensor,
    /// `2F' x 1`
    pub vector: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub weight: Tensor,
    pub attention: Option<AttentionParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    /// `(b_z, b_r, b_h)`, each `1 x H`.
    pub bias: Option<(Tensor, Tensor, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmGate {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub input: LstmGate,
    pub forget: LstmGate,
    pub output: LstmGate,
    pub cell: LstmGate,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TemporalParams {
    Gru(GruParams),
    Lstm(LstmParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `(weight, bias)` per layer; the last layer has no activation.
    pub layers: Vec<(Tensor, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub gcn: Vec<GcnLayer>,
    pub temporal: TemporalParams,
    pub head: HeadParams,
    pub adjacency_embeddings: Option<Tensor>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases (LSTM forget bias 1).
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let gcn = config
            .gcn_dims()
            .into_iter()
            .enumerate()
            .map(|(l, (fi, fo))| {
                let weight = xavier(rng, fi, fo);
                let attention = config
                    .attention_layers
                    .contains(&l)
                    .then(|| AttentionParams {
                        weight: xavier(rng, fi, fo),
                        vector: xavier(rng, 2 * fo, 1),
                    });
                GcnLayer { weight, attention }
            })
            .collect();
        let (f, h) = (config.encoded_dim(), config.hidden);
        let temporal = match config.temporal {
            TemporalCell::Gru => TemporalParams::Gru(GruParams {
                w_z: xavier(rng, f, h),
                w_r: xavier(rng, f, h),
                w_h: xavier(rng, f, h),
                u_z: xavier(rng, h, h),
                u_r: xavier(rng, h, h),
                u_h: xavier(rng, h, h),
                bias: config.gru_bias.then(|| {
                    (
                        Tensor::zeros(1, h),
                        Tensor::zeros(1, h),
                        Tensor::zeros(1, h),
                    )
                }),
            }),
            TemporalCell::Lstm => {
                let mut gate = |bias: f64| LstmGate {
                    w: xavier(rng, f, h),
                    u: xavier(rng, h, h),
                    b: Tensor::filled(1, h, bias),
                };
                TemporalParams::Lstm(LstmParams {
                    input: gate(0.0),
                    forget: gate(1.0),
                    output: gate(0.0),
                    cell: gate(0.0),
                })
            }
        };
        let mut layers = Vec::new();
        let mut fan_in = h;
        for &w in config
            .head_hidden
            .iter()
            .chain(std::iter::once(&config.horizon))
        {
            layers.push((xavier(rng, fan_in, w), Tensor::zeros(1, w)));
            fan_in = w;
        }
        let adjacency_embeddings = config.embedding_dim.map(|e| xavier(rng, config.nodes, e));
        Ok(Self {
            gcn,
            temporal,
            head: HeadParams { layers },
            adjacency_embeddings,
        })
    }

    /// All trainable tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (l, layer) in self.gcn.iter().enumerate() {
            out.push((format!("gcn.{l}.weight"), &layer.weight));
            if let Some(att) = &layer.attention {
                out.push((format!("gcn.{l}.attention.weight"), &att.weight));
                out.push((format!("gcn.{l}.attention.vector"), &att.vector));
            }
        }
        match &self.temporal {
            TemporalParams::Gru(g) => {
                for (name, t) in [
                    ("w_z", &g.w_z),
                    ("w_r", &g.w_r),
                    ("w_h", &g.w_h),
                    ("u_z", &g.u_z),
                    ("u_r", &g.u_r),
                    ("u_h", &g.u_h),
                ] {
                    out.push((format!("temporal.gru.{name}"), t));
                }
                if let Some((bz, br, bh)) = &g.bias {
                    out.push(("temporal.gru.b_z".into(), bz));
                    out.push(("temporal.gru.b_r".into(), br));
                    out.push(("temporal.gru.b_h".into(), bh));
                }
            }
            TemporalParams::Lstm(p) => {
                for (gname, gate) in [
                    ("input", &p.input),
                    ("forget", &p.forget),
                    ("output", &p.output),
                    ("cell", &p.cell),
                ] {
                    out.push((format!("temporal.lstm.{gname}.w"), &gate.w));
                    out.push((format!("temporal.lstm.{gname}.u"), &gate.u));
                    out.push((format!("temporal.lstm.{gname}.b"), &gate.b));
                }
            }
        }
        for (k, (w, b)) in self.head.layers.iter().enumerate() {
            out.push((format!("head.{k}.weight"), w));
            out.push((format!("head.{k}.bias"), b));
        }
        if let Some(e) = &self.adjacency_embeddings {
            out.push(("adjacency_embeddings".into(), e));
        }
        out
    }

    /// Mutable view in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.gcn {
            out.push(&mut layer.weight);
            if let Some(att) = &mut layer.attention {
                out.push(&mut att.weight);
                out.push(&mut att.vector);
            }
        }
        match &mut self.temporal {
            TemporalParams::Gru(g) => {
                out.extend([
                    &mut g.w_z, &mut g.w_r, &mut g.w_h, &mut g.u_z, &mut g.u_r, &mut g.u_h,
                ]);
                if let Some((bz, br, bh)) = &mut g.bias {
                    out.extend([bz, br, bh]);
                }
            }
            TemporalParams::Lstm(p) => {
                for gate in [&mut p.input, &mut p.forget, &mut p.output, &mut p.cell] {
                    out.extend([&mut gate.w, &mut gate.u, &mut gate.b]);
                }
            }
        }
        for (w, b) in &mut self.head.layers {
            out.push(w);
            out.push(b);
        }
        if let Some(e) = &mut self.adjacency_embeddings {
            out.push(e);
        }
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_tensor_map(&self) -> BTreeMap<String, Tensor> {
        self.named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Rebuilds parameters for `config` from named tensors. Every expected
    /// tensor must be present with its exact shape.
    pub fn from_tensor_map(config: &ModelConfig, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut params = Self::init(config, &mut rng)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(params)
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone());
        let gcn = self
            .gcn
            .iter()
            .map(|layer| BoundGcnLayer {
                weight: leaf(&layer.weight),
                attention: layer.attention.as_ref().map(|a| BoundAttention {
                    weight: leaf(&a.weight),
                    vector: leaf(&a.vector),
                }),
            })
            .collect();
        let temporal = match &self.temporal {
            TemporalParams::Gru(g) => BoundTemporal::Gru(BoundGru {
                w_z: leaf(&g.w_z),
                w_r: leaf(&g.w_r),
                w_h: leaf(&g.w_h),
                u_z: leaf(&g.u_z),
                u_r: leaf(&g.u_r),
                u_h: leaf(&g.u_h),
                bias: g
                    .bias
                    .as_ref()
                    .map(|(bz, br, bh)| (leaf(bz), leaf(br), leaf(bh))),
            }),
            TemporalParams::Lstm(p) => {
                let mut gate = |g: &LstmGate| BoundLstmGate {
                    w: leaf(&g.w),
                    u: leaf(&g.u),
                    b: leaf(&g.b),
                };
                BoundTemporal::Lstm(BoundLstm {
                    input: gate(&p.input),
                    forget: gate(&p.forget),
                    output: gate(&p.output),
                    cell: gate(&p.cell),
                })
            }
        };
        let head = self
            .head
            .layers
            .iter()
            .map(|(w, b)| (leaf(w), leaf(b)))
            .collect();
        let adjacency_embeddings = self.adjacency_embeddings.as_ref().map(&mut leaf);
        BoundParams {
            gcn,
            temporal,
            head,
            adjacency_embeddings,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub weight: Var,
    pub vector: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGcnLayer {
    pub weight: Var,
    pub attention: Option<BoundAttention>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGru {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub bias: Option<(Var, Var, Var)>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstmGate {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub input: BoundLstmGate,
    pub forget: BoundLstmGate,
    pub output: BoundLstmGate,
    pub cell: BoundLstmGate,
}

#[derive(Clone, Copy, Debug)]
pub enum BoundTemporal {
    Gru(BoundGru),
    Lstm(BoundLstm),
}

/// Tape handles for every parameter, mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub gcn: Vec<BoundGcnLayer>,
    pub temporal: BoundTemporal,
    pub head: Vec<(Var, Var)>,
    pub adjacency_embeddings: Option<Var>,
}

impl BoundParams {
    /// Handles in the order of [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layer in &self.gcn {
            out.push(layer.weight);
            if let Some(a) = layer.attention {
                out.extend([a.weight, a.vector]);
            }
        }
        match &self.temporal {
            BoundTemporal::Gru(g) => {
                out.extend([g.w_z, g.w_r, g.w_h, g.u_z, g.u_r, g.u_h]);
                if let Some((bz, br, bh)) = g.bias {
                    out.extend([bz, br, bh]);
                }
            }
            BoundTemporal::Lstm(p) => {
                for gate in [p.input, p.forget, p.output, p.cell] {
                    out.extend([gate.w, gate.u, gate.b]);
                }
            }
        }
        for &(w, b) in &self.head {
            out.extend([w, b]);
        }
        out.extend(self.adjacency_embeddings);
        out
    }
}

fn activate(tape: &mut Tape, x: Var, activation: Activation) -> Var {
    match activation {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
    }
}

/// `σ(Â · H · W)`. `a_hat` is `N x N` (shared across the stacked blocks of
/// `h`) or `(B*N) x N` (one matrix per block).
pub fn gcn_forward(
    tape: &mut Tape,
    h: Var,
    a_hat: Var,
    w: Var,
    activation: Activation,
) -> Result<Var> {
    let block = tape.value(a_hat).cols();
    let hw = tape.matmul(h, w)?;
    let mixed = tape.block_matmul(a_hat, hw, block)?;
    Ok(activate(tape, mixed, activation))
}

/// `σ(α · H · W)`: aggregation with attention coefficients in place of `Â`.
pub fn gcn_attention_forward(
    tape: &mut Tape,
    h: Var,
    coefficients: Var,
    w: Var,
    activation: Activation,
) -> Result<Var> {
    gcn_forward(tape, h, coefficients, w, activation)
}

/// Row-stochastic attention over each node's neighbor set:
/// `α_ij ∝ exp(act(aᵀ [W x_i ‖ W x_j]))` for `j` in the mask of row `i`.
///
/// `x` stacks `B` blocks of `N` rows; `mask` is `(B*N) x N`.
pub fn attention_coefficients(
    tape: &mut Tape,
    x: Var,
    params: BoundAttention,
    mask: &Mask,
    negative_slope: f64,
) -> Result<Var> {
    let block = mask.shape().1;
    let projected = tape.matmul(x, params.weight)?;
    let width = tape.value(projected).cols();
    if tape.value(params.vector).shape() != (2 * width, 1) {
        return Err(Error::Dimension {
            op: "attention_coefficients",
            left: tape.value(params.weight).shape(),
            right: tape.value(params.vector).shape(),
        });
    }
    let a_self = tape.slice_rows(params.vector, 0, width)?;
    let a_other = tape.slice_rows(params.vector, width, 2 * width)?;
    let left = tape.matmul(projected, a_self)?;
    let right = tape.matmul(projected, a_other)?;
    let scores = tape.pair_scores(left, right, block)?;
    let scores = if negative_slope > 0.0 {
        tape.leaky_relu(scores, negative_slope)
    } else {
        tape.relu(scores)
    };
    tape.row_softmax_masked(scores, mask)
}

fn affine(tape: &mut Tape, x: Var, w: Var, h_prev: Var, u: Var, bias: Option<Var>) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h_prev, u)?;
    let pre = tape.add(xw, hu)?;
    match bias {
        Some(b) => tape.add_row(pre, b),
        None => Ok(pre),
    }
}

/// One GRU update, row-wise over nodes.
pub fn gru_step(tape: &mut Tape, x: Var, h_prev: Var, p: &BoundGru) -> Result<Var> {
    let (bz, br, bh) = match p.bias {
        Some((z, r, h)) => (Some(z), Some(r), Some(h)),
        None => (None, None, None),
    };
    let z = affine(tape, x, p.w_z, h_prev, p.u_z, bz)?;
    let z = tape.sigmoid(z);
    let r = affine(tape, x, p.w_r, h_prev, p.u_r, br)?;
    let r = tape.sigmoid(r);
    let gated = tape.hadamard(r, h_prev)?;
    let cand = affine(tape, x, p.w_h, gated, p.u_h, bh)?;
    let cand = tape.tanh(cand);
    let keep = tape.one_minus(z);
    let old = tape.hadamard(keep, h_prev)?;
    let new = tape.hadamard(z, cand)?;
    tape.add(old, new)
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

pub fn lstm_step(tape: &mut Tape, x: Var, state: LstmState, p: &BoundLstm) -> Result<LstmState> {
    let gate = |tape: &mut Tape, g: BoundLstmGate| affine(tape, x, g.w, state.h, g.u, Some(g.b));
    let i = gate(tape, p.input)?;
    let i = tape.sigmoid(i);
    let f = gate(tape, p.forget)?;
    let f = tape.sigmoid(f);
    let o = gate(tape, p.output)?;
    let o = tape.sigmoid(o);
    let g = gate(tape, p.cell)?;
    let g = tape.tanh(g);
    let kept = tape.hadamard(f, state.c)?;
    let written = tape.hadamard(i, g)?;
    let c = tape.add(kept, written)?;
    let squashed = tape.tanh(c);
    let h = tape.hadamard(o, squashed)?;
    Ok(LstmState { h, c })
}

/// Row-wise MLP: relu between layers, linear output.
pub fn mlp_head(tape: &mut Tape, h: Var, layers: &[(Var, Var)]) -> Result<Var> {
    let mut x = h;
    for (k, &(w, b)) in layers.iter().enumerate() {
        let xw = tape.matmul(x, w)?;
        x = tape.add_row(xw, b)?;
        if k + 1 < layers.len() {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Graph operator for one adjacency slot: raw support (attention mask)
/// and normalized matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSlot {
    pub mask: Mask,
    pub a_hat: Tensor,
}

impl GraphSlot {
    pub fn new(adj: &AdjacencyMatrix) -> Result<Self> {
        Ok(Self {
            mask: adj.neighbor_mask(),
            a_hat: graph::normalize(adj)?.a_hat,
        })
    }

    /// No edges: `Â = I`, each node attends only to itself.
    pub fn isolated(n: usize) -> Self {
        Self {
            mask: Mask::from_fn(n, n, |i, j| i == j),
            a_hat: Tensor::identity(n),
        }
    }
}

/// Where the forward pass gets its graph from.
#[derive(Clone, Debug, PartialEq)]
pub enum AdjacencySource {
    Static(GraphSlot),
    /// Rolling-window graphs; a sample uses the latest window that ends at
    /// or before its last input row, or no edges if none has completed.
    Adaptive {
        ends: Vec<usize>,
        slots: Vec<GraphSlot>,
    },
    /// Built from `adjacency_embeddings` on the tape.
    Learnable,
}

impl AdjacencySource {
    pub fn fixed(adj: &AdjacencyMatrix) -> Result<Self> {
        Ok(AdjacencySource::Static(GraphSlot::new(adj)?))
    }

    pub fn from_normalized(a_hat: NormalizedAdjacency, mask: Mask) -> Self {
        AdjacencySource::Static(GraphSlot {
            mask,
            a_hat: a_hat.a_hat,
        })
    }

    pub fn adaptive(schedule: &AdaptiveSchedule) -> Result<Self> {
        let mut ends = Vec::with_capacity(schedule.len());
        let mut slots = Vec::with_capacity(schedule.len());
        for (end, adj) in &schedule.entries {
            ends.push(*end);
            slots.push(GraphSlot::new(adj)?);
        }
        Ok(AdjacencySource::Adaptive { ends, slots })
    }

    pub fn method_hint(&self) -> Option<AdjacencyMethod> {
        match self {
            AdjacencySource::Static(_) => None,
            AdjacencySource::Adaptive { .. } => Some(AdjacencyMethod::Adaptive),
            AdjacencySource::Learnable => Some(AdjacencyMethod::Learnable),
        }
    }

    fn slot_for(&self, sample: &Sample) -> Option<&GraphSlot> {
        match self {
            AdjacencySource::Static(slot) => Some(slot),
            AdjacencySource::Adaptive { ends, slots } => {
                let last = sample.input_end();
                let idx = ends.partition_point(|&e| e <= last + 1);
                idx.checked_sub(1).map(|i| &slots[i])
            }
            AdjacencySource::Learnable => None,
        }
    }
}

/// Records the batch's graph operator: `(Â var, attention mask)`.
fn graph_operator(
    tape: &mut Tape,
    samples: &[&Sample],
    source: &AdjacencySource,
    bound: &BoundParams,
    n: usize,
) -> Result<(Var, Mask)> {
    let b = samples.len();
    match source {
        AdjacencySource::Static(slot) => {
            if slot.a_hat.shape() != (n, n) {
                return Err(Error::Dimension {
                    op: "graph_operator",
                    left: slot.a_hat.shape(),
                    right: (n, n),
                });
            }
            Ok((tape.leaf(slot.a_hat.clone()), slot.mask.tile_rows(b)))
        }
        AdjacencySource::Adaptive { .. } => {
            let isolated = GraphSlot::isolated(n);
            let slots: Vec<&GraphSlot> = samples
                .iter()
                .map(|s| source.slot_for(s).unwrap_or(&isolated))
                .collect();
            let stacked =
                Tensor::vstack(&slots.iter().map(|s| s.a_hat.clone()).collect::<Vec<_>>())?;
            let mask = Mask::vstack(&slots.iter().map(|s| s.mask.clone()).collect::<Vec<_>>());
            Ok((tape.leaf(stacked), mask))
        }
        AdjacencySource::Learnable => {
            let e = bound.adjacency_embeddings.ok_or_else(|| {
                Error::Configuration("learnable adjacency needs adjacency embeddings".into())
            })?;
            let a = graph::learnable_adjacency(tape, e)?;
            let a_hat = tape.sym_normalize(a)?;
            Ok((a_hat, Mask::full(n, n).tile_rows(b)))
        }
    }
}

/// Stacks timestep `t` of every sample into a `(B*N) x F` leaf.
fn frame(tape: &mut Tape, samples: &[&Sample], t: usize, features: usize) -> Result<Var> {
    let n = samples[0].input.cols();
    let mut data = Vec::with_capacity(samples.len() * n * features);
    for s in samples {
        for i in 0..n {
            data.push(s.input.get(t, i));
            if features >= 3 {
                data.push(s.time_features.get(t, 0));
                data.push(s.time_features.get(t, 1));
            }
        }
    }
    Ok(tape.leaf(Tensor::new(samples.len() * n, features, data)?))
}

/// Batched forward pass; returns the `(B*N) x horizon` prediction with
/// sample `b` occupying rows `[b*N, (b+1)*N)`.
pub fn forward(
    tape: &mut Tape,
    samples: &[&Sample],
    bound: &BoundParams,
    config: &ModelConfig,
    source: &AdjacencySource,
) -> Result<Var> {
    let first = samples.first().ok_or(Error::EmptyInput("forward"))?;
    let (window, n) = first.input.shape();
    if window == 0 {
        return Err(Error::EmptyInput("forward window"));
    }
    if n != config.nodes {
        return Err(Error::Dimension {
            op: "forward",
            left: (window, n),
            right: (window, config.nodes),
        });
    }
    if config.input_features != 1 && config.input_features != 3 {
        return Err(Error::Configuration(
            "input_features must be 1 (traffic) or 3 (traffic + time of day)".into(),
        ));
    }
    if samples.iter().any(|s| s.input.shape() != (window, n)) {
        return Err(Error::Configuration(
            "samples in a batch must share window and node count".into(),
        ));
    }
    let (a_hat, mask) = graph_operator(tape, samples, source, bound, n)?;
    let rows = samples.len() * n;

    let mut hidden = tape.leaf(Tensor::zeros(rows, config.hidden));
    let mut cell = match bound.temporal {
        BoundTemporal::Lstm(_) => Some(tape.leaf(Tensor::zeros(rows, config.hidden))),
        BoundTemporal::Gru(_) => None,
    };
    for t in 0..window {
        let mut h = frame(tape, samples, t, config.input_features)?;
        for layer in &bound.gcn {
            h = match layer.attention {
                Some(att) => {
                    let alpha = attention_coefficients(
                        tape,
                        h,
                        att,
                        &mask,
                        config.attention_negative_slope,
                    )?;
                    gcn_attention_forward(tape, h, alpha, layer.weight, Activation::Relu)?
                }
                None => gcn_forward(tape, h, a_hat, layer.weight, Activation::Relu)?,
            };
        }
        match &bound.temporal {
            BoundTemporal::Gru(p) => hidden = gru_step(tape, h, hidden, p)?,
            BoundTemporal::Lstm(p) => {
                let state = LstmState {
                    h: hidden,
                    c: cell.expect("lstm cell state"),
                };
                let next = lstm_step(tape, h, state, p)?;
                hidden = next.h;
                cell = Some(next.c);
            }
        }
    }
    mlp_head(tape, hidden, &bound.head)
}

/// Parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    /// Predictions (`N x horizon`, normalized units) for each sample,
    /// evaluated in fixed-size chunks on fresh tapes.
    pub fn predict_batch(
        &self,
        samples: &[&Sample],
        source: &AdjacencySource,
    ) -> Result<Vec<Tensor>> {
        const CHUNK: usize = 64;
        let n = self.config.nodes;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            let pred = forward(&mut tape, chunk, &bound, &self.config, source)?;
            let value = tape.value(pred);
            for b in 0..chunk.len() {
                out.push(value.slice_rows(b * n, (b + 1) * n));
            }
        }
        Ok(out)
    }

    pub fn predict(&self, sample: &Sample, source: &AdjacencySource) -> Result<Tensor> {
        Ok(self.predict_batch(&[sample], source)?.remove(0))
    }

    /// Current learned adjacency, when the graph is learnable.
    pub fn learned_adjacency(&self) -> Option<Result<AdjacencyMatrix>> {
        self.params
            .adjacency_embeddings
            .as_ref()
            .map(graph::learnable_adjacency_value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn gcn_forward_small_cases() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::identity(1));
        let h = tape.leaf(Tensor::scalar(2.0));
        let w = tape.leaf(Tensor::scalar(3.0));
        let out = gcn_forward(&mut tape, h, a, w, Activation::Relu).unwrap();
        assert_eq!(tape.value(out), &Tensor::scalar(6.0));

        let hv = Tensor::from_rows(&[[1.0, -2.0], [0.5, 4.0], [3.0, 0.0]]);
        let h = tape.leaf(hv.clone());
        let eye3 = tape.leaf(Tensor::identity(3));
        let eye2 = tape.leaf(Tensor::identity(2));
        let out = gcn_forward(&mut tape, h, eye3, eye2, Activation::Identity).unwrap();
        assert_eq!(tape.value(out), &hv);

        let a_hat = tape.leaf(Tensor::filled(2, 2, 0.5));
        let h = tape.leaf(Tensor::from_rows(&[[1.0], [3.0]]));
        let one = tape.leaf(Tensor::scalar(1.0));
        let out = gcn_forward(&mut tape, h, a_hat, one, Activation::Identity).unwrap();
        assert_eq!(tape.value(out), &Tensor::from_rows(&[[2.0], [2.0]]));

        let bad = tape.leaf(Tensor::zeros(3, 3));
        assert!(gcn_forward(&mut tape, h, a_hat, bad, Activation::Identity).is_err());
    }

    #[test]
    fn gru_zero_params_keep_zero_state() {
        let mut tape = Tape::new();
        let z = |tape: &mut Tape, r, c| tape.leaf(Tensor::zeros(r, c));
        let p = BoundGru {
            w_z: z(&mut tape, 2, 3),
            w_r: z(&mut tape, 2, 3),
            w_h: z(&mut tape, 2, 3),
            u_z: z(&mut tape, 3, 3),
            u_r: z(&mut tape, 3, 3),
            u_h: z(&mut tape, 3, 3),
            bias: None,
        };
        let x = tape.leaf(Tensor::from_rows(&[[0.3, -0.7]]));
        let h0 = z(&mut tape, 1, 3);
        let h = gru_step(&mut tape, x, h0, &p).unwrap();
        assert_eq!(tape.value(h), &Tensor::zeros(1, 3));

        let bad = z(&mut tape, 2, 3);
        assert!(gru_step(&mut tape, x, bad, &p).is_err());
    }

    #[test]
    fn lstm_saturated_forget_keeps_cell() {
        let mut tape = Tape::new();
        let big = 50.0;
        let mk = |tape: &mut Tape, b: f64| BoundLstmGate {
            w: tape.leaf(Tensor::zeros(1, 2)),
            u: tape.leaf(Tensor::zeros(2, 2)),
            b: tape.leaf(Tensor::filled(1, 2, b)),
        };
        let p = BoundLstm {
            input: mk(&mut tape, -big),
            forget: mk(&mut tape, big),
            output: mk(&mut tape, 0.0),
            cell: mk(&mut tape, 0.3),
        };
        let x = tape.leaf(Tensor::scalar(1.0));
        let c0 = Tensor::from_rows(&[[0.4, -0.9]]);
        let state = LstmState {
            h: tape.leaf(Tensor::zeros(1, 2)),
            c: tape.leaf(c0.clone()),
        };
        let next = lstm_step(&mut tape, x, state, &p).unwrap();
        assert!(tape.value(next.c).max_abs_diff(&c0) < 1e-15);
    }

    #[test]
    fn init_respects_shapes_and_names() {
        let mut cfg = ModelConfig::new(5);
        cfg.attention_layers = vec![1];
        cfg.embedding_dim = Some(4);
        cfg.gru_bias = true;
        let params = ModelParams::init(&cfg, &mut rng()).unwrap();
        let named = params.named();
        let names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"gcn.1.attention.vector"));
        assert!(!names.contains(&"gcn.0.attention.vector"));
        assert!(names.contains(&"adjacency_embeddings"));
        assert!(names.contains(&"temporal.gru.b_h"));
        let shapes: BTreeMap<&str, (usize, usize)> =
            named.iter().map(|(n, t)| (n.as_str(), t.shape())).collect();
        assert_eq!(shapes["gcn.0.weight"], (1, 32));
        assert_eq!(shapes["gcn.1.attention.vector"], (64, 1));
        assert_eq!(shapes["temporal.gru.u_z"], (64, 64));
        assert_eq!(shapes["head.1.weight"], (32, 1));
        assert_eq!(shapes["adjacency_embeddings"], (5, 4));

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let vars = bound.vars();
        assert_eq!(vars.len(), named.len());
        for (v, (_, t)) in vars.iter().zip(&named) {
            assert_eq!(tape.value(*v), *t);
        }
        let mut copy = params.clone();
        assert_eq!(copy.tensors_mut().len(), named.len());
    }

    #[test]
    fn lstm_forget_bias_starts_at_one() {
        let mut cfg = ModelConfig::new(3);
        cfg.temporal = TemporalCell::Lstm;
        let p = ModelParams::init(&cfg, &mut rng()).unwrap();
        match p.temporal {
            TemporalParams::Lstm(l) => {
                assert!(l.forget.b.data().iter().all(|&v| v == 1.0));
                assert!(l.input.b.data().iter().all(|&v| v == 0.0));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn tensor_map_roundtrip_and_shape_check() {
        let cfg = ModelConfig::new(4);
        let p = ModelParams::init(&cfg, &mut rng()).unwrap();
        let mut map = p.to_tensor_map();
        assert_eq!(ModelParams::from_tensor_map(&cfg, &map).unwrap(), p);
        map.insert("gcn.0.weight".into(), Tensor::zeros(2, 2));
        assert!(ModelParams::from_tensor_map(&cfg, &map).is_err());
        map.remove("gcn.0.weight");
        assert!(ModelParams::from_tensor_map(&cfg, &map).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(4);
        cfg.attention_layers = vec![2];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(4);
        cfg.gcn_hidden.clear();
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::new(4).validate().is_ok());
    }
}
