#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trafficgcn::data::Sample;
use trafficgcn::diffcore::Tensor;
use trafficgcn::graph::{AdjacencyMatrix, AdjacencyMethod};
use trafficgcn::model::{AdjacencySource, Model, ModelConfig, TemporalCell};
use trafficgcn::train;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Symmetric nonnegative matrix with zero diagonal; each pair is an edge
/// with probability `density`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Tensor {
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < density {
                let w = rng.gen_range(0.05..3.0);
                a.set(i, j, w);
                a.set(j, i, w);
            }
        }
    }
    a
}

pub fn random_sample(rng: &mut ChaCha8Rng, window: usize, n: usize, horizon: usize) -> Sample {
    Sample {
        input: random_tensor(rng, window, n, 1.5),
        target: random_tensor(rng, n, horizon, 1.0),
        time_features: random_tensor(rng, window, 2, 1.0),
        start: 0,
    }
}

/// `D^{-1/2}(A+I)D^{-1/2}` by explicit loops.
pub fn normalize_loops(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut d = vec![0.0; n];
    for i in 0..n {
        d[i] = 1.0;
        for j in 0..n {
            d[i] += a.get(i, j);
        }
    }
    Tensor::from_fn(n, n, |i, j| {
        let aij = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
        aij / (d[i] * d[j]).sqrt()
    })
}

/// `relu(Â H W)` with every sum written out.
pub fn gcn_triple_loop(a: &Tensor, h: &Tensor, w: &Tensor) -> Tensor {
    let a_hat = normalize_loops(a);
    let (n, f) = h.shape();
    let out = w.cols();
    Tensor::from_fn(n, out, |i, l| {
        let mut acc = 0.0;
        for j in 0..n {
            for k in 0..f {
                acc += a_hat.get(i, j) * h.get(j, k) * w.get(k, l);
            }
        }
        acc.max(0.0)
    })
}

/// Dominant-eigenvalue magnitude by power iteration.
pub fn power_iteration(m: &Tensor, iterations: usize, rng: &mut ChaCha8Rng) -> f64 {
    let n = m.rows();
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[i] += m.get(i, j) * v[j];
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let prev = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        estimate = norm / prev;
        v = next.into_iter().map(|x| x / norm).collect();
    }
    estimate
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub worst_name: String,
}

/// Compares every parameter's tape gradient against central differences
/// of the batch loss.
pub fn check_model_gradients(
    model: &Model,
    samples: &[&Sample],
    source: &AdjacencySource,
    step: f64,
    floor: f64,
) -> GradCheck {
    check_model_gradients_with(model, samples, source, step, floor, None)
}

/// As [`check_model_gradients`], but entries whose one-sided slopes differ by
/// more than `kink` relative error straddle a relu kink and are skipped.
pub fn check_model_gradients_with(
    model: &Model,
    samples: &[&Sample],
    source: &AdjacencySource,
    step: f64,
    floor: f64,
    kink: Option<f64>,
) -> GradCheck {
    let (base, grads) = train::batch_gradients(model, samples, source).expect("gradients");
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let mut probe = model.clone();
    let mut report = GradCheck {
        checked: 0,
        skipped: 0,
        worst: 0.0,
        worst_name: String::new(),
    };
    for (k, name) in names.iter().enumerate() {
        let len = grads[k].len();
        for e in 0..len {
            let original = probe.params.tensors_mut()[k].data()[e];
            probe.params.tensors_mut()[k].data_mut()[e] = original + step;
            let up = train::batch_loss(&probe, samples, source).expect("loss");
            probe.params.tensors_mut()[k].data_mut()[e] = original - step;
            let down = train::batch_loss(&probe, samples, source).expect("loss");
            probe.params.tensors_mut()[k].data_mut()[e] = original;
            if let Some(limit) = kink {
                if relative_error((up - base) / step, (base - down) / step, floor) > limit {
                    report.skipped += 1;
                    continue;
                }
            }
            let fd = (up - down) / (2.0 * step);
            let err = relative_error(grads[k].data()[e], fd, floor);
            report.checked += 1;
            if err > report.worst {
                report.worst = err;
                report.worst_name = format!("{name}[{e}]");
            }
        }
    }
    report
}

/// Small architecture for gradient checks: N nodes, two GCN layers,
/// hidden width 6.
pub fn tiny_config(
    n: usize,
    attention: bool,
    temporal: TemporalCell,
    learnable: bool,
) -> ModelConfig {
    let mut c = ModelConfig::new(n);
    c.gcn_hidden = vec![3, 3];
    c.attention_layers = if attention { vec![0, 1] } else { Vec::new() };
    c.attention_negative_slope = 0.0;
    c.temporal = temporal;
    c.hidden = 6;
    c.head_hidden = vec![4];
    c.embedding_dim = learnable.then_some(3);
    c
}

pub fn static_source(rng: &mut ChaCha8Rng, n: usize) -> AdjacencySource {
    let mut a = random_graph(rng, n, 0.6);
    // keep every node connected to its successor so attention has choices
    for i in 0..n {
        let j = (i + 1) % n;
        if i != j && a.get(i, j) == 0.0 {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
    }
    AdjacencySource::fixed(&AdjacencyMatrix {
        a,
        method: AdjacencyMethod::Explicit,
    })
    .expect("valid graph")
}
