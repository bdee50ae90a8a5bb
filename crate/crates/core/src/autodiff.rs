//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive in execution order, so the recorded
//! order is already topological. Row-wise primitives (layer norm,
//! log-softmax, slicing, concatenation) act on the last axis and treat all
//! leading axes as rows.

use thiserror::Error;

/// Value written into masked attention scores. Finite so every array stays
/// finite; `exp` of it underflows to exactly zero.
pub const MASK_VALUE: f64 = -1e9;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("array of shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        if self.cols() == 0 {
            0
        } else {
            self.data.len() / self.cols()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    fn add_assign(&mut self, other: &[f64]) {
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs has a single element
    ScalarRhs,
    /// lhs has a single element
    ScalarLhs,
    /// rhs is a vector matching lhs's last axis
    RowRhs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    MatMul(Var, Var),
    Transpose(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Tanh(Var),
    LogSoftmax(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    CausalMask(Var),
    CrossEntropy {
        logprobs: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Array,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when `var` does not influence the loss.
    pub fn get(&self, var: Var) -> Array {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Array {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Array::zeros(&self.shapes[var.0]))
    }
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> AutodiffError {
    AutodiffError::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
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

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    fn broadcast(op: &'static str, a: &Array, b: &Array) -> Result<Broadcast> {
        if a.shape == b.shape {
            Ok(Broadcast::Same)
        } else if b.len() == 1 {
            Ok(Broadcast::ScalarRhs)
        } else if a.len() == 1 {
            Ok(Broadcast::ScalarLhs)
        } else if b.shape.len() == 1 && b.len() == a.cols() {
            Ok(Broadcast::RowRhs)
        } else {
            Err(shape_err(op, a, b))
        }
    }

    fn zip_broadcast(a: &Array, b: &Array, mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Array {
        match mode {
            Broadcast::Same => Array {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            },
            Broadcast::ScalarRhs => {
                let y = b.data[0];
                Array {
                    shape: a.shape.clone(),
                    data: a.data.iter().map(|&x| f(x, y)).collect(),
                }
            }
            Broadcast::ScalarLhs => {
                let x = a.data[0];
                Array {
                    shape: b.shape.clone(),
                    data: b.data.iter().map(|&y| f(x, y)).collect(),
                }
            }
            Broadcast::RowRhs => {
                let c = b.len();
                Array {
                    shape: a.shape.clone(),
                    data: a
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, b.data[i % c]))
                        .collect(),
                }
            }
        }
    }

    /// Elementwise sum; `b` may be a scalar or a row vector broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mode = Self::broadcast("add", av, bv)?;
        let out = Self::zip_broadcast(av, bv, mode, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b, mode)))
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mode = Self::broadcast("multiply", av, bv)?;
        let out = Self::zip_broadcast(av, bv, mode, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b, mode)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let data = matmul_raw(&av.data, &bv.data, m, k, n);
        Ok(self.push(
            Array {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(a, b),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape.len() != 2 {
            return Err(AutodiffError::Invalid {
                op: "transpose",
                reason: format!("expected 2-D, got {:?}", av.shape),
            });
        }
        let (r, c) = (av.shape[0], av.shape[1]);
        let data = transpose_raw(&av.data, r, c);
        Ok(self.push(
            Array {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(a),
        ))
    }

    /// Gathers rows `ids` of a `[n × d]` table into a `[ids.len() × d]` array.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape.len() != 2 {
            return Err(AutodiffError::Invalid {
                op: "embedding_lookup",
                reason: format!("table must be 2-D, got {:?}", tv.shape),
            });
        }
        let (n, d) = (tv.shape[0], tv.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::Invalid {
                op: "embedding_lookup",
                reason: format!("id {bad} out of range for {n} rows"),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv.data[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Array {
                shape: vec![ids.len(), d],
                data,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise normalization followed by an affine `gain`/`bias` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data[j] + bv.data[j];
            }
        }
        let out = Array {
            shape: xv.shape.clone(),
            data: out,
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Array {
            shape: av.shape.clone(),
            data: av.data.iter().map(|v| v.tanh()).collect(),
        };
        self.push(out, Op::Tanh(a))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            let lse = logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Array {
            shape: av.shape.clone(),
            data,
        };
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Array {
            shape: av.shape.clone(),
            data: av.data.iter().map(|v| v.exp()).collect(),
        };
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.data.iter().any(|&v| v <= 0.0) {
            return Err(AutodiffError::Invalid {
                op: "log",
                reason: "non-positive input".into(),
            });
        }
        let out = Array {
            shape: av.shape.clone(),
            data: av.data.iter().map(|v| v.ln()).collect(),
        };
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let out = Array {
            shape: av.shape.clone(),
            data: av.data.iter().map(|v| v * factor).collect(),
        };
        self.push(out, Op::Scale(a, factor))
    }

    /// Concatenates along the last axis. All parts need the same leading shape.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Invalid {
                op: "concat",
                reason: "no inputs".into(),
            });
        };
        let lead = self.value(first).shape[..self.value(first).shape.len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.shape[..pv.shape.len() - 1] != lead[..] {
                return Err(shape_err("concat", self.value(first), pv));
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Array { shape, data }, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if start > end || end > c {
            return Err(AutodiffError::Invalid {
                op: "slice",
                reason: format!("columns {start}..{end} of {c}"),
            });
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let mut shape = av.shape.clone();
        *shape.last_mut().expect("non-empty shape") = end - start;
        Ok(self.push(Array { shape, data }, Op::SliceCols(a, start)))
    }

    /// Rows `start..end` of a 2-D array.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape.len() != 2 || start > end || end > av.shape[0] {
            return Err(AutodiffError::Invalid {
                op: "slice",
                reason: format!("rows {start}..{end} of {:?}", av.shape),
            });
        }
        let c = av.cols();
        let data = av.data[start * c..end * c].to_vec();
        Ok(self.push(
            Array {
                shape: vec![end - start, c],
                data,
            },
            Op::SliceRows(a, start),
        ))
    }

    /// Replaces entries above the diagonal of a square matrix with [`MASK_VALUE`].
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape.len() != 2 || av.shape[0] != av.shape[1] {
            return Err(AutodiffError::Invalid {
                op: "causal_mask",
                reason: format!("expected square matrix, got {:?}", av.shape),
            });
        }
        let n = av.shape[0];
        let mut data = av.data.clone();
        for i in 0..n {
            for j in i + 1..n {
                data[i * n + j] = MASK_VALUE;
            }
        }
        Ok(self.push(
            Array {
                shape: av.shape.clone(),
                data,
            },
            Op::CausalMask(a),
        ))
    }

    /// `-Σ_i weights[i] · logprobs[i, targets[i]]` as a scalar.
    pub fn cross_entropy(
        &mut self,
        logprobs: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let lv = self.value(logprobs);
        let c = lv.cols();
        if lv.rows() != targets.len() || targets.len() != weights.len() {
            return Err(AutodiffError::Invalid {
                op: "cross_entropy_from_logprobs",
                reason: format!(
                    "{} rows, {} targets, {} weights",
                    lv.rows(),
                    targets.len(),
                    weights.len()
                ),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::Invalid {
                op: "cross_entropy_from_logprobs",
                reason: format!("target {bad} out of range for {c} classes"),
            });
        }
        let total: f64 = targets
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&t, &w))| -w * lv.data[i * c + t])
            .sum();
        Ok(self.push(
            Array::scalar(total),
            Op::CrossEntropy {
                logprobs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        self.push(Array::scalar(total), Op::Sum(a))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array {
            shape: lv.shape.clone(),
            data: vec![1.0],
        });

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let acc =
                |v: Var, delta: Vec<f64>, grads: &mut Vec<Option<Array>>| match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => {
                        *slot = Some(Array {
                            shape: self.nodes[v.0].value.shape.clone(),
                            data: delta,
                        });
                    }
                };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b, mode) => {
                    acc(*a, reduce_to(&g, self.value(*a), *mode, true), &mut grads);
                    acc(*b, reduce_to(&g, self.value(*b), *mode, false), &mut grads);
                }
                Op::Mul(a, b, mode) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga =
                        Self::zip_broadcast(&g, bv, broadcast_rhs_view(*mode, true), |x, y| x * y);
                    let gb_full =
                        Self::zip_broadcast(&g, av, broadcast_rhs_view(*mode, false), |x, y| x * y);
                    acc(*a, reduce_to(&ga, av, *mode, true), &mut grads);
                    acc(*b, reduce_to(&gb_full, bv, *mode, false), &mut grads);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                    let bt = transpose_raw(&bv.data, k, n);
                    acc(*a, matmul_raw(&g.data, &bt, m, n, k), &mut grads);
                    let at = transpose_raw(&av.data, m, k);
                    acc(*b, matmul_raw(&at, &g.data, k, m, n), &mut grads);
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.value.shape[0], node.value.shape[1]);
                    acc(*a, transpose_raw(&g.data, r, c), &mut grads);
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut delta = vec![0.0; tv.len()];
                    for (row, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            delta[i * d + j] += g.data[row * d + j];
                        }
                    }
                    acc(*table, delta, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let c = gv.len();
                    let rows = rstd.len();
                    let mut dx = vec![0.0; g.len()];
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    for r in 0..rows {
                        let gr = &g.data[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_gh = 0.0;
                        let mut mean_ghh = 0.0;
                        for j in 0..c {
                            let gh = gr[j] * gv.data[j];
                            mean_gh += gh;
                            mean_ghh += gh * hr[j];
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                        }
                        mean_gh /= c as f64;
                        mean_ghh /= c as f64;
                        for j in 0..c {
                            let gh = gr[j] * gv.data[j];
                            dx[r * c + j] = rstd[r] * (gh - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                    acc(*x, dx, &mut grads);
                    acc(*gain, dgain, &mut grads);
                    acc(*bias, dbias, &mut grads);
                }
                Op::Tanh(a) => {
                    let d = g
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    acc(*a, d, &mut grads);
                }
                Op::LogSoftmax(a) => {
                    let c = node.value.cols().max(1);
                    let mut d = vec![0.0; g.len()];
                    for ((drow, grow), yrow) in d
                        .chunks_mut(c)
                        .zip(g.data.chunks(c))
                        .zip(node.value.data.chunks(c))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            drow[j] = grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Exp(a) => {
                    let d = g
                        .data
                        .iter()
                        .zip(&node.value.data)
                        .map(|(g, y)| g * y)
                        .collect();
                    acc(*a, d, &mut grads);
                }
                Op::Log(a) => {
                    let d = g
                        .data
                        .iter()
                        .zip(&self.value(*a).data)
                        .map(|(g, x)| g / x)
                        .collect();
                    acc(*a, d, &mut grads);
                }
                Op::Scale(a, f) => {
                    acc(*a, g.data.iter().map(|v| v * f).collect(), &mut grads);
                }
                Op::Concat(parts) => {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut d = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            d.extend_from_slice(
                                &g.data[r * total + offset..r * total + offset + pc],
                            );
                        }
                        acc(p, d, &mut grads);
                        offset += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let (c, w) = (av.cols(), node.value.cols());
                    let mut d = vec![0.0; av.len()];
                    for r in 0..av.rows() {
                        d[r * c + start..r * c + start + w]
                            .copy_from_slice(&g.data[r * w..(r + 1) * w]);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut d = vec![0.0; av.len()];
                    d[start * c..start * c + g.len()].copy_from_slice(&g.data);
                    acc(*a, d, &mut grads);
                }
                Op::CausalMask(a) => {
                    let n = node.value.shape[0];
                    let mut d = g.data.clone();
                    for i in 0..n {
                        for j in i + 1..n {
                            d[i * n + j] = 0.0;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::CrossEntropy {
                    logprobs,
                    targets,
                    weights,
                } => {
                    let lv = self.value(*logprobs);
                    let c = lv.cols();
                    let mut d = vec![0.0; lv.len()];
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        d[i * c + t] -= w * g.data[0];
                    }
                    acc(*logprobs, d, &mut grads);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    acc(*a, vec![g.data[0]; n], &mut grads);
                }
            }
            // keep leaf gradients; intermediate buffers are no longer needed
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// For the product rule the "other" operand is broadcast against `g`, which
/// always has the output shape.
fn broadcast_rhs_view(mode: Broadcast, grad_for_lhs: bool) -> Broadcast {
    match (mode, grad_for_lhs) {
        (Broadcast::Same, _) => Broadcast::Same,
        // g has lhs shape; other operand is the scalar rhs / lhs
        (Broadcast::ScalarRhs, true) => Broadcast::ScalarRhs,
        (Broadcast::ScalarRhs, false) => Broadcast::Same,
        (Broadcast::ScalarLhs, true) => Broadcast::Same,
        (Broadcast::ScalarLhs, false) => Broadcast::ScalarRhs,
        (Broadcast::RowRhs, true) => Broadcast::RowRhs,
        (Broadcast::RowRhs, false) => Broadcast::Same,
    }
}

/// Sums an output-shaped gradient down to the shape of one operand.
fn reduce_to(g: &Array, operand: &Array, mode: Broadcast, is_lhs: bool) -> Vec<f64> {
    match (mode, is_lhs) {
        (Broadcast::Same, _)
        | (Broadcast::ScalarRhs, true)
        | (Broadcast::ScalarLhs, false)
        | (Broadcast::RowRhs, true) => g.data.clone(),
        (Broadcast::ScalarRhs, false) | (Broadcast::ScalarLhs, true) => vec![g.data.iter().sum()],
        (Broadcast::RowRhs, false) => {
            let c = operand.len();
            let mut d = vec![0.0; c];
            for (i, v) in g.data.iter().enumerate() {
                d[i % c] += v;
            }
            d
        }
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
