use super::{DiffError, ParamStore, Tensor};
use super::tensor::matmul_raw;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, leaving one value per column.
    Rows,
    /// Reduce over columns, leaving one value per row.
    Cols,
}

/// Semantics of the min reductions used by robustness graphs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MinMode {
    Hard,
    /// `-t * ln(sum(exp(-x / t)))`, which approaches the hard min as `t -> 0`.
    Smooth { temperature: f64 },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Relu(usize),
    Sigmoid(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    MinAxis { input: usize, picks: Vec<usize> },
    ReluNeg(usize),
    L2NormSq(usize),
    Transpose(usize),
    Rows { input: usize, start: usize },
    Column { input: usize, col: usize },
    ConcatRows(Vec<usize>),
    Min2 { a: usize, b: usize, mode: MinMode },
    WindowMin { input: usize, lo: usize, hi: usize, mode: MinMode },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// Per-node gradients of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` if the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        let [r, c] = self.shapes[var.0];
        Tensor::new(r, c, g.clone()).ok()
    }
}

/// Recording of forward operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Hard or smooth min of a slice; hard ties go to the lowest index.
fn reduce_min(values: &[f64], mode: MinMode) -> f64 {
    match mode {
        MinMode::Hard => {
            let mut best = values[0];
            for &v in &values[1..] {
                if v < best {
                    best = v;
                }
            }
            best
        }
        MinMode::Smooth { temperature } => {
            let m = values.iter().copied().fold(f64::INFINITY, f64::min);
            let s: f64 = values.iter().map(|v| (-(v - m) / temperature).exp()).sum();
            m - temperature * s.ln()
        }
    }
}

/// Weights of d(min)/d(value_i) for the reduction above.
fn min_weights(values: &[f64], mode: MinMode) -> Vec<f64> {
    let mut w = vec![0.0; values.len()];
    match mode {
        MinMode::Hard => {
            let mut arg = 0;
            for (i, &v) in values.iter().enumerate() {
                if v < values[arg] {
                    arg = i;
                }
            }
            w[arg] = 1.0;
        }
        MinMode::Smooth { temperature } => {
            let m = values.iter().copied().fold(f64::INFINITY, f64::min);
            let mut s = 0.0;
            for (wi, v) in w.iter_mut().zip(values) {
                *wi = (-(v - m) / temperature).exp();
                s += *wi;
            }
            for wi in &mut w {
                *wi /= s;
            }
        }
    }
    w
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a named parameter; backward writes its gradient into the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, DiffError> {
        let value = store
            .value(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(DiffError::Shape {
                op: "add_row",
                lhs: ta.shape(),
                rhs: tb.shape(),
            });
        }
        let n = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % n])
            .collect();
        let out = Tensor::new(ta.rows(), n, data)?;
        Ok(self.push(out, Op::AddRow(a.0, bias.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| s * x);
        self.push(out, Op::Scale(a.0, s))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Shift(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0))
    }

    /// Hard min along an axis; the full gradient goes to the first minimizing entry.
    pub fn min_over_axis(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let (outer, inner, out_shape) = match axis {
            Axis::Rows => (c, r, (1, c)),
            Axis::Cols => (r, c, (r, 1)),
        };
        let mut picks = Vec::with_capacity(outer);
        let mut vals = Vec::with_capacity(outer);
        for o in 0..outer {
            let flat = |i: usize| match axis {
                Axis::Rows => i * c + o,
                Axis::Cols => o * c + i,
            };
            let mut best = flat(0);
            for i in 1..inner {
                if t.data()[flat(i)] < t.data()[best] {
                    best = flat(i);
                }
            }
            picks.push(best);
            vals.push(t.data()[best]);
        }
        let out = Tensor::new(out_shape.0, out_shape.1, vals).expect("reduction shape");
        self.push(out, Op::MinAxis { input: a.0, picks })
    }

    /// `max(0, -a)` elementwise.
    pub fn relu_of_negation(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x < 0.0 { -x } else { 0.0 });
        self.push(out, Op::ReluNeg(a.0))
    }

    /// Sum of squared entries.
    pub fn l2_norm_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        self.push(Tensor::scalar(s), Op::L2NormSq(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a.0))
    }

    /// Rows `start..end`.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let t = self.value(a);
        if start >= end || end > t.rows() {
            return Err(DiffError::Range {
                op: "rows",
                shape: t.shape(),
                start,
                end,
            });
        }
        let c = t.cols();
        let data = t.data()[start * c..end * c].to_vec();
        let out = Tensor::new(end - start, c, data)?;
        Ok(self.push(out, Op::Rows { input: a.0, start }))
    }

    /// Column `col` as an `[m, 1]` tensor.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var, DiffError> {
        let t = self.value(a);
        if col >= t.cols() {
            return Err(DiffError::Range {
                op: "column",
                shape: t.shape(),
                start: col,
                end: col + 1,
            });
        }
        let data = (0..t.rows()).map(|r| t.get(r, col)).collect();
        let out = Tensor::column(data);
        Ok(self.push(out, Op::Column { input: a.0, col }))
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts.first().ok_or(DiffError::Empty("concat_rows"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(DiffError::Shape {
                    op: "concat_rows",
                    lhs: self.value(*first).shape(),
                    rhs: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    /// Elementwise min of two equally shaped tensors.
    pub fn min2(&mut self, a: Var, b: Var, mode: MinMode) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("min2", ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| reduce_min(&[x, y], mode))
            .collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        Ok(self.push(out, Op::Min2 { a: a.0, b: b.0, mode }))
    }

    /// Sliding-window min down an `[n, 1]` column.
    ///
    /// Output row `i` is the min of input rows `i + lo ..= i + hi`, for every `i`
    /// with `i + hi < n`.
    pub fn window_min(&mut self, a: Var, lo: usize, hi: usize, mode: MinMode) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.cols() != 1 || lo > hi || hi >= t.rows() {
            return Err(DiffError::Range {
                op: "window_min",
                shape: t.shape(),
                start: lo,
                end: hi + 1,
            });
        }
        let n = t.rows() - hi;
        let data = (0..n)
            .map(|i| reduce_min(&t.data()[i + lo..=i + hi], mode))
            .collect();
        let out = Tensor::column(data);
        Ok(self.push(out, Op::WindowMin { input: a.0, lo, hi, mode }))
    }

    /// Reverse sweep from a scalar root, returning the gradient of every node.
    pub fn gradients(&self, root: Var) -> Result<Gradients, DiffError> {
        let shape = self.shape(root);
        if shape != [1, 1] {
            return Err(DiffError::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = G B^T, dB = A^T G
                    let bt = tb.transpose();
                    let da = matmul_raw(&g, m, n, bt.data(), k);
                    let at = ta.transpose();
                    let db = matmul_raw(at.data(), k, m, &g, n);
                    accumulate(&mut grads, *a, da.data());
                    accumulate(&mut grads, *b, db.data());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let n = out.cols();
                    let mut db = vec![0.0; n];
                    for (j, gv) in g.iter().enumerate() {
                        db[j % n] += gv;
                    }
                    accumulate(&mut grads, *b, &db);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da: Vec<f64> = g.iter().zip(tb.data()).map(|(gv, y)| gv * y).collect();
                    let db: Vec<f64> = g.iter().zip(ta.data()).map(|(gv, x)| gv * x).collect();
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Scale(a, s) => {
                    let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Shift(a) => accumulate(&mut grads, *a, &g),
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let d: Vec<f64> = g
                        .iter()
                        .zip(x.data())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Sigmoid(a) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(gv, s)| gv * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    let d: Vec<f64> = g.iter().zip(x.data()).map(|(gv, xv)| 2.0 * xv * gv).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Sum(a) => {
                    let n = self.nodes[*a].value.len();
                    accumulate(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len();
                    accumulate(&mut grads, *a, &vec![g[0] / n as f64; n]);
                }
                Op::MinAxis { input, picks } => {
                    let mut d = vec![0.0; self.nodes[*input].value.len()];
                    for (gv, &p) in g.iter().zip(picks) {
                        d[p] += gv;
                    }
                    accumulate(&mut grads, *input, &d);
                }
                Op::ReluNeg(a) => {
                    let x = &self.nodes[*a].value;
                    let d: Vec<f64> = g
                        .iter()
                        .zip(x.data())
                        .map(|(gv, &xv)| if xv < 0.0 { -gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::L2NormSq(a) => {
                    let x = &self.nodes[*a].value;
                    let d: Vec<f64> = x.data().iter().map(|xv| 2.0 * xv * g[0]).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Transpose(a) => {
                    let gt = Tensor::new(out.rows(), out.cols(), g.clone()).expect("grad shape");
                    accumulate(&mut grads, *a, gt.transpose().data());
                }
                Op::Rows { input, start } => {
                    let src = &self.nodes[*input].value;
                    let c = src.cols();
                    let mut d = vec![0.0; src.len()];
                    d[start * c..start * c + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *input, &d);
                }
                Op::Column { input, col } => {
                    let src = &self.nodes[*input].value;
                    let mut d = vec![0.0; src.len()];
                    for (r, gv) in g.iter().enumerate() {
                        d[r * src.cols() + col] = *gv;
                    }
                    accumulate(&mut grads, *input, &d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[*p].value.len();
                        accumulate(&mut grads, *p, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Min2 { a, b, mode } => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    for j in 0..g.len() {
                        let w = min_weights(&[ta.data()[j], tb.data()[j]], *mode);
                        da[j] = g[j] * w[0];
                        db[j] = g[j] * w[1];
                    }
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::WindowMin { input, lo, hi, mode } => {
                    let x = &self.nodes[*input].value;
                    let mut d = vec![0.0; x.len()];
                    for (i, gv) in g.iter().enumerate() {
                        let w = min_weights(&x.data()[i + lo..=i + hi], *mode);
                        for (j, wj) in w.iter().enumerate() {
                            d[i + lo + j] += gv * wj;
                        }
                    }
                    accumulate(&mut grads, *input, &d);
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes[..=root.0].iter().map(|n| n.value.shape()).collect(),
        })
    }

    /// Backpropagates from `root` and adds every parameter gradient into `store`.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<(), DiffError> {
        let grads = self.gradients(root)?;
        for (i, node) in self.nodes[..=root.0].iter().enumerate() {
            if let Some(name) = &node.param {
                match &grads.grads[i] {
                    Some(g) => store.accumulate_grad(name, g)?,
                    None => store.touch_grad(name)?,
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64]) {
    match &mut grads[idx] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution.to_vec()),
    }
}
