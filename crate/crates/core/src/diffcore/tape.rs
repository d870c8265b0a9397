//! Define-by-run tape. Each forward op appends a node holding its output;
//! `backward` walks the nodes in reverse and accumulates vector-Jacobian
//! products into per-node gradients.

use super::tensor::{gemm, Mask, Operand, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    RowSoftmaxMasked(Var, Mask),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    BlockMatMul { a: Var, h: Var, block: usize },
    PairScores { left: Var, right: Var, block: usize },
    SliceRows(Var, usize),
    SymNormalize(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node on the tape.
/// Nodes the root does not depend on report `None`.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if the root does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax restricted to `mask`; masked entries are exactly zero.
pub fn masked_softmax(x: &Tensor, mask: &Mask) -> Result<Tensor> {
    if mask.shape() != x.shape() {
        return Err(Error::Dimension {
            op: "row_softmax_masked",
            left: x.shape(),
            right: mask.shape(),
        });
    }
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let keep = mask.row(r);
        let max = row
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut total = 0.0;
        let dst = &mut out.data_mut()[r * x.cols()..(r + 1) * x.cols()];
        for ((d, &v), &k) in dst.iter_mut().zip(row).zip(keep) {
            if k {
                *d = (v - max).exp();
                total += *d;
            }
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Ok(out)
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`.
/// Returns the normalized matrix and the degree vector.
pub(crate) fn sym_normalize(a: &Tensor) -> (Tensor, Vec<f64>) {
    let n = a.rows();
    let degree: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>() + 1.0).collect();
    let out = Tensor::from_fn(n, n, |i, j| {
        let self_loop = if i == j { 1.0 } else { 0.0 };
        (a.get(i, j) + self_loop) / (degree[i] * degree[j]).sqrt()
    });
    (out, degree)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_with(self.value(b), "hadamard", |x, y| x * y)?;
        Ok(self.push(Op::Hadamard(a, b), out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), out)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 - x);
        self.push(Op::OneMinus(a), out)
    }

    /// Adds the `1 x C` row vector `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.0 != 1 || bs.1 != xs.1 {
            return Err(Error::Dimension {
                op: "add_row",
                left: xs,
                right: bs,
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(xs.1.max(1)) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddRow(x, bias), out))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(relu);
        self.push(Op::Relu(a), out)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), out)
    }

    pub fn row_softmax_masked(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let out = masked_softmax(self.value(x), mask)?;
        Ok(self.push(Op::RowSoftmaxMasked(x, mask.clone()), out))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), out)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(Error::EmptyInput("sum_all"));
        }
        let out = Tensor::scalar(self.value(a).sum());
        Ok(self.push(Op::SumAll(a), out))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::EmptyInput("mean_all"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push(Op::MeanAll(a), out))
    }

    /// Block-diagonal product. `h` stacks `B` blocks of `block` rows; `a` is
    /// either one shared `block x block` matrix or `B` such matrices stacked
    /// vertically. Block `b` of the output is `a_b * h_b`.
    pub fn block_matmul(&mut self, a: Var, h: Var, block: usize) -> Result<Var> {
        let (av, hv) = (self.value(a), self.value(h));
        let bad = || Error::Dimension {
            op: "block_matmul",
            left: av.shape(),
            right: hv.shape(),
        };
        if block == 0 || hv.rows() % block != 0 || av.cols() != block {
            return Err(bad());
        }
        let blocks = hv.rows() / block;
        if av.rows() != block && av.rows() != block * blocks {
            return Err(bad());
        }
        let shared = av.rows() == block;
        let f = hv.cols();
        let mut out = Tensor::zeros(hv.rows(), f);
        for b in 0..blocks {
            let a_off = if shared { 0 } else { b * block * block };
            let a_blk = Operand::slice(
                &av.data()[a_off..a_off + block * block],
                block,
                block,
                false,
            );
            let h_blk = Operand::slice(
                &hv.data()[b * block * f..(b + 1) * block * f],
                block,
                f,
                false,
            );
            gemm(
                a_blk,
                h_blk,
                &mut out.data_mut()[b * block * f..(b + 1) * block * f],
                false,
            );
        }
        Ok(self.push(Op::BlockMatMul { a, h, block }, out))
    }

    /// Pairwise additive scores per block: with `left`, `right` both
    /// `(B*block) x 1`, output row `b*block + i`, column `j` is
    /// `left[b*block + i] + right[b*block + j]`.
    pub fn pair_scores(&mut self, left: Var, right: Var, block: usize) -> Result<Var> {
        let (l, r) = (self.value(left), self.value(right));
        if l.shape() != r.shape() || l.cols() != 1 || block == 0 || l.rows() % block != 0 {
            return Err(Error::Dimension {
                op: "pair_scores",
                left: l.shape(),
                right: r.shape(),
            });
        }
        let rows = l.rows();
        let out = Tensor::from_fn(rows, block, |row, j| {
            let base = row - row % block;
            l.data()[row] + r.data()[base + j]
        });
        Ok(self.push(Op::PairScores { left, right, block }, out))
    }

    /// Rows `[start, end)` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: t.shape(),
                right: (start, end),
            });
        }
        let out = t.slice_rows(start, end);
        Ok(self.push(Op::SliceRows(a, start), out))
    }

    /// Differentiable `D^{-1/2}(A+I)D^{-1/2}` for a square nonnegative `a`.
    pub fn sym_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != t.cols() {
            return Err(Error::Dimension {
                op: "sym_normalize",
                left: t.shape(),
                right: t.shape(),
            });
        }
        if t.data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::InvalidAdjacency(
                "negative or non-finite entry".into(),
            ));
        }
        let (out, _) = sym_normalize(t);
        Ok(self.push(Op::SymNormalize(a), out))
    }

    /// Reverse-mode sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(1, 1));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut accum = |v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(av.rows(), av.cols());
                gemm(Operand::plain(g), Operand::t(bv), da.data_mut(), false);
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                gemm(Operand::t(av), Operand::plain(g), db.data_mut(), false);
                accum(*a, da);
                accum(*b, db);
            }
            Op::Transpose(a) => accum(*a, g.transpose()),
            Op::Add(a, b) => {
                accum(*a, g.clone());
                accum(*b, g.clone());
            }
            Op::Sub(a, b) => {
                accum(*a, g.clone());
                accum(*b, g.map(|x| -x));
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accum(*a, hadamard(g, bv));
                accum(*b, hadamard(g, av));
            }
            Op::Scale(a, f) => accum(*a, g.map(|x| x * f)),
            Op::OneMinus(a) => accum(*a, g.map(|x| -x)),
            Op::AddRow(x, bias) => {
                accum(*x, g.clone());
                let mut db = Tensor::zeros(1, g.cols());
                for row in g.data().chunks(g.cols().max(1)) {
                    for (d, v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accum(*bias, db);
            }
            Op::Sigmoid(a) => accum(*a, zip(g, y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(a) => accum(*a, zip(g, y, |g, t| g * (1.0 - t * t))),
            Op::Relu(a) => {
                let x = self.value(*a);
                accum(*a, zip(g, x, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                accum(*a, zip(g, x, |g, x| if x > 0.0 { g } else { slope * g }));
            }
            Op::RowSoftmaxMasked(a, mask) => {
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                let cols = y.cols();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let keep = mask.row(r);
                    let dst = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        if keep[j] {
                            dst[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                accum(*a, dx);
            }
            Op::Square(a) => {
                let x = self.value(*a);
                accum(*a, zip(g, x, |g, x| 2.0 * g * x));
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                accum(*a, Tensor::filled(r, c, g.get(0, 0)));
            }
            Op::MeanAll(a) => {
                let (r, c) = self.shape(*a);
                accum(*a, Tensor::filled(r, c, g.get(0, 0) / (r * c) as f64));
            }
            Op::BlockMatMul { a, h, block } => {
                let (av, hv) = (self.value(*a), self.value(*h));
                let block = *block;
                let blocks = hv.rows() / block;
                let f = hv.cols();
                let shared = av.rows() == block;
                let mut da = Tensor::zeros(av.rows(), av.cols());
                let mut dh = Tensor::zeros(hv.rows(), f);
                for b in 0..blocks {
                    let a_off = if shared { 0 } else { b * block * block };
                    let rows = b * block * f..(b + 1) * block * f;
                    let g_blk = Operand::slice(&g.data()[rows.clone()], block, f, false);
                    let h_blk_t = Operand::slice(&hv.data()[rows.clone()], f, block, true);
                    let a_blk_t = Operand::slice(
                        &av.data()[a_off..a_off + block * block],
                        block,
                        block,
                        true,
                    );
                    gemm(
                        g_blk,
                        h_blk_t,
                        &mut da.data_mut()[a_off..a_off + block * block],
                        shared,
                    );
                    gemm(a_blk_t, g_blk, &mut dh.data_mut()[rows], false);
                }
                accum(*a, da);
                accum(*h, dh);
            }
            Op::PairScores { left, right, block } => {
                let block = *block;
                let rows = g.rows();
                let mut dl = Tensor::zeros(rows, 1);
                let mut dr = Tensor::zeros(rows, 1);
                for row in 0..rows {
                    let base = row - row % block;
                    let gr = g.row(row);
                    dl.data_mut()[row] = gr.iter().sum();
                    for (j, v) in gr.iter().enumerate() {
                        dr.data_mut()[base + j] += v;
                    }
                }
                accum(*left, dl);
                accum(*right, dr);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accum(*a, da);
            }
            Op::SymNormalize(a) => {
                let av = self.value(*a);
                let n = av.rows();
                let (_, degree) = sym_normalize(av);
                // Each row sum of A feeds D_ii, which scales row i and column i.
                let degree_grad: Vec<f64> = (0..n)
                    .map(|i| {
                        let via_row: f64 = (0..n).map(|l| g.get(i, l) * y.get(i, l)).sum();
                        let via_col: f64 = (0..n).map(|k| g.get(k, i) * y.get(k, i)).sum();
                        -0.5 * (via_row + via_col) / degree[i]
                    })
                    .collect();
                let da = Tensor::from_fn(n, n, |i, j| {
                    g.get(i, j) / (degree[i] * degree[j]).sqrt() + degree_grad[i]
                });
                accum(*a, da);
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip_with(b, "backward", f)
        .expect("gradient shape matches forward value")
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip(a, b, |x, y| x * y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = tape.leaf(Tensor::identity(2));
        let p = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(p), tape.value(a));

        let r = tape.leaf(t(&[&[1.0, 2.0]]));
        let c = tape.leaf(t(&[&[3.0], &[4.0]]));
        let d = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(d), &Tensor::scalar(11.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                left: (2, 3),
                right: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[&[2.0, 3.0]]));
        let b = tape.leaf(t(&[&[4.0, 5.0]]));
        let h = tape.hadamard(a, b).unwrap();
        assert_eq!(tape.value(h), &t(&[&[8.0, 15.0]]));

        let z = tape.leaf(Tensor::zeros(2, 3));
        let o = tape.one_minus(z);
        assert_eq!(tape.value(o), &Tensor::ones(2, 3));

        let x = tape.leaf(t(&[&[1.5, -2.0]]));
        let zr = tape.leaf(Tensor::zeros(1, 2));
        let s = tape.add(x, zr).unwrap();
        assert_eq!(tape.value(s), tape.value(x));

        assert!(tape.add(a, z).is_err());
        assert!(tape.hadamard(a, z).is_err());
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(1, 1));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).get(0, 0), 0.5);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 0.25);

        let th = tape.tanh(x);
        assert_eq!(tape.value(th).get(0, 0), 0.0);
        let neg = tape.leaf(Tensor::scalar(-1.0));
        let r = tape.relu(neg);
        assert_eq!(tape.value(r).get(0, 0), 0.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let r = tape.relu(x);
        let g = tape.backward(r).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn softmax_examples() {
        let sym = masked_softmax(&t(&[&[0.0, 0.0]]), &Mask::full(1, 2)).unwrap();
        assert_eq!(sym, t(&[&[0.5, 0.5]]));

        let single = Mask::from_fn(1, 2, |_, j| j == 0);
        let one = masked_softmax(&t(&[&[7.0, 100.0]]), &single).unwrap();
        assert_eq!(one, t(&[&[1.0, 0.0]]));

        let x = t(&[&[1.0, 2.0, 3.0]]);
        let out = masked_softmax(&x, &Mask::full(1, 3)).unwrap();
        let total: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for j in 0..3 {
            let expect = ((j + 1) as f64).exp() / total;
            assert!((out.get(0, j) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_named() {
        let mask = Mask::from_fn(3, 2, |i, _| i != 1);
        let err = masked_softmax(&Tensor::zeros(3, 2), &mask).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[&[1.0, 3.0]]));
        let m = tape.mean_all(a).unwrap();
        assert_eq!(tape.value(m).get(0, 0), 2.0);
        let z = tape.leaf(Tensor::zeros(3, 2));
        let s = tape.sum_all(z).unwrap();
        assert_eq!(tape.value(s).get(0, 0), 0.0);

        let big = tape.leaf(Tensor::ones(3, 4));
        let mb = tape.mean_all(big).unwrap();
        let g = tape.backward(mb).unwrap();
        assert!(g.get(big).unwrap().data().iter().all(|&v| v == 1.0 / 12.0));

        let empty = tape.leaf(Tensor::zeros(0, 3));
        assert!(matches!(tape.mean_all(empty), Err(Error::EmptyInput(_))));
        assert!(matches!(tape.sum_all(empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn backward_single_leaf_and_composite() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(4.2));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(1, 1));

        let mut tape = Tape::new();
        let xt = t(&[&[1.0, -2.0, 0.5], &[3.0, 0.0, -1.0]]);
        let x = tape.leaf(xt.clone());
        let sq = tape.square(x);
        let m = tape.mean_all(sq).unwrap();
        let g = tape.backward(m).unwrap();
        let expect = xt.map(|v| 2.0 * v / 6.0);
        assert!(g.get(x).unwrap().max_abs_diff(&expect) < 1e-15);
        assert_eq!(g.get(m).unwrap(), &Tensor::ones(1, 1));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarRoot { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn unreachable_nodes_have_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.leaf(Tensor::scalar(2.0));
        let s = tape.square(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.get_or_zeros(y, (1, 1)), Tensor::zeros(1, 1));
    }

    #[test]
    fn block_matmul_matches_per_block_products() {
        let a = Tensor::from_fn(2, 2, |i, j| (i + 2 * j) as f64 + 0.5);
        let h = Tensor::from_fn(6, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.4);
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let hv = tape.leaf(h.clone());
        let out = tape.block_matmul(av, hv, 2).unwrap();
        for b in 0..3 {
            let expect = a.matmul(&h.slice_rows(2 * b, 2 * b + 2)).unwrap();
            assert_eq!(tape.value(out).slice_rows(2 * b, 2 * b + 2), expect);
        }
    }

    #[test]
    fn sym_normalize_two_node_path() {
        let (a_hat, deg) = sym_normalize(&t(&[&[0.0, 1.0], &[1.0, 0.0]]));
        assert_eq!(deg, vec![2.0, 2.0]);
        assert_eq!(a_hat, t(&[&[0.5, 0.5], &[0.5, 0.5]]));
    }
}
