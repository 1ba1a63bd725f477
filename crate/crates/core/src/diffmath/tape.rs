//! Wengert-list reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the handles of its inputs. Nodes are only ever appended, so the list is in
//! topological order by construction and `backward` is a single reverse sweep.

use std::fmt;
use std::str::FromStr;

use super::tensor::{gemm, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn validate(self) -> Result<()> {
        if let Activation::LeakyRelu(s) = self {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Config(format!(
                    "leaky_relu slope must lie in (0,1), got {s}"
                )));
            }
        }
        Ok(())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "leaky_relu" => Ok(Activation::leaky_relu()),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => {
                if let Some(slope) = other
                    .strip_prefix("leaky_relu(")
                    .and_then(|r| r.strip_suffix(')'))
                {
                    let slope: f64 = slope.parse().map_err(|_| {
                        Error::Config(format!("bad leaky_relu slope in {other:?}"))
                    })?;
                    let act = Activation::LeakyRelu(slope);
                    act.validate()?;
                    Ok(act)
                } else {
                    Err(Error::Config(format!("unknown activation kind {other:?}")))
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::LeakyRelu(s) => write!(f, "leaky_relu({s})"),
            Activation::Sigmoid => f.write_str("sigmoid"),
            Activation::Tanh => f.write_str("tanh"),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Activation(Var, Activation),
    Relu(Var),
    GroupMean(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    RowSqNorm(Var),
    RowNorm(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn binary_name(op: &str, a: &Tensor, b: &Tensor) -> String {
    format!("{op}: shapes {:?} and {:?}", a.shape(), b.shape())
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

    /// Records a learnable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return dim_err(format!("{what} expects a matrix, got shape {:?}", t.shape()));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return dim_err(binary_name("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            (m, k),
            false,
            self.value(b).data(),
            (k, n),
            false,
            &mut out,
            false,
        );
        let value = Tensor::matrix(m, n, out)?;
        self.push(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "add_bias")?;
        let b = self.value(bias);
        if b.len() != d || b.rank() != 1 {
            return dim_err(binary_name("add_bias", self.value(x), b));
        }
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for (o, bv) in out[i * d..(i + 1) * d].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        self.push(value, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    /// `x · weight + bias`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (_, d_in) = self.matrix_dims(x, "affine")?;
        let (w_in, w_out) = self.matrix_dims(weight, "affine")?;
        if d_in != w_in {
            return dim_err(binary_name("affine", self.value(x), self.value(weight)));
        }
        if self.value(bias).len() != w_out {
            return dim_err(binary_name("affine bias", self.value(weight), self.value(bias)));
        }
        let xw = self.matmul(x, weight)?;
        self.add_bias(xw, bias)
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return dim_err(binary_name(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        kind.validate()?;
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(value, Op::Activation(x, kind), &[x], "activation")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    /// `max(x, 0)` elementwise.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x], "relu")
    }

    /// Global average pooling over contiguous column groups: `n×d → n×groups`.
    pub fn global_average_pool(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "global_average_pool")?;
        if groups == 0 || d % groups != 0 {
            return dim_err(format!(
                "global_average_pool: width {d} not divisible into {groups} groups"
            ));
        }
        let size = d / groups;
        let src = self.value(x);
        let mut out = Vec::with_capacity(n * groups);
        for i in 0..n {
            let row = src.row(i);
            for g in 0..groups {
                let s: f64 = row[g * size..(g + 1) * size].iter().sum();
                out.push(s / size as f64);
            }
        }
        let value = Tensor::matrix(n, groups, out)?;
        self.push(value, Op::GroupMean(x, groups), &[x], "global_average_pool")
    }

    /// Selects rows (with repetition allowed) from a matrix.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "gather_rows")?;
        if indices.is_empty() {
            return dim_err("gather_rows: empty index list");
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return dim_err(format!("gather_rows: row {i} out of range for {n} rows"));
            }
            out.extend_from_slice(src.row(i));
        }
        let value = Tensor::matrix(indices.len(), d, out)?;
        self.push(
            value,
            Op::GatherRows(x, indices.to_vec()),
            &[x],
            "gather_rows",
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, da) = self.matrix_dims(a, "concat_cols")?;
        let (n2, db) = self.matrix_dims(b, "concat_cols")?;
        if n != n2 {
            return dim_err(binary_name("concat_cols", self.value(a), self.value(b)));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let value = Tensor::matrix(n, da + db, out)?;
        self.push(value, Op::ConcatCols(a, b), &[a, b], "concat_cols")
    }

    /// Per-row sum of squares: `n×d → n`.
    pub fn row_sq_norm(&mut self, x: Var) -> Result<Var> {
        let (n, _) = self.matrix_dims(x, "row_sq_norm")?;
        let src = self.value(x);
        let out = (0..n).map(|i| src.row(i).iter().map(|v| v * v).sum()).collect();
        let value = Tensor::vector(out)?;
        self.push(value, Op::RowSqNorm(x), &[x], "row_sq_norm")
    }

    /// Per-row Euclidean norm: `n×d → n`. The subgradient at the origin is zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let (n, _) = self.matrix_dims(x, "row_norm")?;
        let src = self.value(x);
        let out = (0..n)
            .map(|i| src.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::vector(out)?;
        self.push(value, Op::RowNorm(x), &[x], "row_norm")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// Mean softmax cross-entropy of `n×C` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if labels.len() != n {
            return dim_err(format!(
                "softmax_cross_entropy: {n} logit rows but {} labels",
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!(
                "label index {bad} out of range for {c} classes"
            )));
        }
        let z = self.value(logits);
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            "softmax_cross_entropy",
        )
    }

    /// `Σ wᵢ·termᵢ` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return dim_err(format!(
                    "weighted_sum expects scalars, got shape {:?}",
                    t.shape()
                ));
            }
            total += w * t.data()[0];
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            &inputs,
            "weighted_sum",
        )
    }

    /// Runs the reverse sweep from a scalar `loss` and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Tensor::new(node.value.shape(), g).ok()
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                acc(*a, &mut |ga| {
                    gemm(g, (m, n), false, tb.data(), (k, n), true, ga, true)
                });
                acc(*b, &mut |gb| {
                    gemm(ta.data(), (m, k), true, g, (m, n), false, gb, true)
                });
            }
            Op::AddBias(x, b) => {
                let d = self.nodes[b.0].value.len();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let ta = self.nodes[a.0].value.data();
                let tb = self.nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(tb) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ta) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (o, gv) in ga.iter_mut().zip(g) {
                    *o += c * gv;
                }
            }),
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Activation(x, kind) => {
                let xs = self.nodes[x.0].value.data();
                let ys = node.value.data();
                acc(*x, &mut |gx| {
                    for (((o, gv), &xv), &yv) in gx.iter_mut().zip(g).zip(xs).zip(ys) {
                        *o += gv * kind.derivative(xv, yv);
                    }
                });
            }
            Op::Relu(x) => {
                let xs = self.nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((o, gv), &xv) in gx.iter_mut().zip(g).zip(xs) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::GroupMean(x, groups) => {
                let d = self.nodes[x.0].value.cols();
                let size = d / groups;
                let inv = 1.0 / size as f64;
                acc(*x, &mut |gx| {
                    for (i, grow) in g.chunks(*groups).enumerate() {
                        let row = &mut gx[i * d..(i + 1) * d];
                        for (j, &gv) in grow.iter().enumerate() {
                            for o in &mut row[j * size..(j + 1) * size] {
                                *o += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::GatherRows(x, indices) => {
                let d = self.nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for (r, &src) in indices.iter().enumerate() {
                        add_into(&mut gx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let da = self.nodes[a.0].value.cols();
                let db = self.nodes[b.0].value.cols();
                let w = da + db;
                acc(*a, &mut |ga| {
                    for (i, row) in g.chunks(w).enumerate() {
                        add_into(&mut ga[i * da..(i + 1) * da], &row[..da]);
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, row) in g.chunks(w).enumerate() {
                        add_into(&mut gb[i * db..(i + 1) * db], &row[da..]);
                    }
                });
            }
            Op::RowSqNorm(x) => {
                let tx = &self.nodes[x.0].value;
                let d = tx.cols();
                acc(*x, &mut |gx| {
                    for (i, &gv) in g.iter().enumerate() {
                        for (o, &xv) in gx[i * d..(i + 1) * d].iter_mut().zip(tx.row(i)) {
                            *o += 2.0 * gv * xv;
                        }
                    }
                });
            }
            Op::RowNorm(x) => {
                let tx = &self.nodes[x.0].value;
                let d = tx.cols();
                let norms = node.value.data();
                acc(*x, &mut |gx| {
                    for (i, (&gv, &norm)) in g.iter().zip(norms).enumerate() {
                        if norm > 0.0 {
                            let s = gv / norm;
                            for (o, &xv) in gx[i * d..(i + 1) * d].iter_mut().zip(tx.row(i)) {
                                *o += s * xv;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let s = g[0] / n as f64;
                acc(*logits, &mut |gl| {
                    for (i, &label) in labels.iter().enumerate() {
                        let row = &mut gl[i * c..(i + 1) * c];
                        for (j, (o, p)) in row.iter_mut().zip(&probs[i * c..(i + 1) * c]).enumerate()
                        {
                            let target = if j == label { 1.0 } else { 0.0 };
                            *o += s * (p - target);
                        }
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, &mut |gv| gv[0] += w * g[0]);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of the learnable leaves after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape).expect("positive shape"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[1.0, 2.0]]));
        let w = tape.constant(Tensor::identity(2).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w0 = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
        let b34 = tape.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = tape.affine(x, w0, b34).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

        let x2 = tape.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ones = tape.constant(mat(&[&[1.0, 1.0], &[1.0, 1.0]]));
        let y = tape.affine(x2, ones, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 3.0, 7.0, 7.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[1.0, 2.0, 3.0]]));
        let w = tape.constant(Tensor::identity(2).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let err = tape.affine(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.activation(x, Activation::leaky_relu()).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.01, 0.0, 2.0]);

        let z = tape.constant(Tensor::matrix(1, 2, vec![0.0, 40.0]).unwrap());
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        let t = tape.tanh(z).unwrap();
        assert_eq!(tape.value(t).data()[0], 0.0);
        assert!((tape.value(t).data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn activation_kind_parsing() {
        assert_eq!("sigmoid".parse::<Activation>().unwrap(), Activation::Sigmoid);
        assert_eq!(
            "leaky_relu(0.2)".parse::<Activation>().unwrap(),
            Activation::LeakyRelu(0.2)
        );
        assert!(matches!("swish".parse::<Activation>(), Err(Error::Config(_))));
        assert!("leaky_relu(1.5)".parse::<Activation>().is_err());
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[&[2.0, 4.0]]));
        let p = tape.global_average_pool(a, 1).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0]);
        let b = tape.constant(mat(&[&[1.0, 1.0, 1.0, 1.0]]));
        let p = tape.global_average_pool(b, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 1.0]);
        let c = tape.constant(mat(&[&[0.0, 2.0, 4.0, 6.0]]));
        let p = tape.global_average_pool(c, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 5.0]);
        assert!(matches!(
            tape.global_average_pool(c, 3),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_examples() {
        // loss = sum(w * x) -> grad w = x
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.3, -0.7, 2.0]).unwrap());
        let x = tape.constant(Tensor::vector(vec![1.5, 2.5, -3.0]).unwrap());
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.5, 2.5, -3.0]);

        // loss = ||w||^2, w = [1,2] -> [2,4]
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let sq = tape.row_sq_norm(w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);

        // disconnected parameter
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::vector(vec![5.0]).unwrap());
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get_or_zeros(w, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![f64::MAX]).unwrap());
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::zeros(&[3, 4]).unwrap());
        let ce = tape.softmax_cross_entropy(z, &[0, 1, 3]).unwrap();
        assert!((tape.value(ce).item().unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(tape.softmax_cross_entropy(z, &[0, 1, 4]).is_err());
    }
}
