//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in execution order; [`Tape::backward`]
//! walks the record once in reverse. Every value is treated as a matrix
//! (`rows × cols`); vectors are `1 × h` rows and scalars have shape `[1]`.

mod gradcheck;
mod kernels;
mod param;
mod tensor;

use std::collections::HashMap;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Rows whose norm falls below this pass through `l2_normalize_rows` unscaled.
pub const NORMALIZE_FLOOR: f64 = 1e-8;
/// Variance epsilon used by `layernorm`.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// The operation vocabulary, for callers that want to dispatch by kind.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale(f64),
    Exp,
    Log,
    Relu,
    SoftmaxRows,
    /// Inputs: x, gamma (1×m), beta (1×m).
    LayerNorm,
    Concat(Axis),
    Slice {
        axis: Axis,
        start: usize,
        len: usize,
    },
    Sum,
    Mean,
    L2NormalizeRows,
    CosineSimMatrix,
    /// Mean cross-entropy of each row's logits against its target index.
    CrossEntropyRows(Vec<usize>),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    LogFloor(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: Axis,
    },
    Slice {
        x: Var,
        axis: Axis,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    L2NormalizeRows {
        x: Var,
        /// Row norms; zero marks a guarded pass-through row.
        norms: Vec<f64>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    RowNorms(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_lookup: HashMap<ParamId, Var>,
    normalize_guard_hits: usize,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    /// How many rows `l2_normalize_rows` passed through unscaled.
    pub fn normalize_guard_hits(&self) -> usize {
        self.normalize_guard_hits
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().copied()
    }

    /// Clears every gradient slot on the tape.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter once per tape; later calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_lookup.get(&id) {
            return v;
        }
        let p = store.get(id);
        let mut value = p.tensor.clone();
        value.clear_grad();
        let v = self.leaf(value, p.trainable);
        self.params.push((id, v));
        self.param_lookup.insert(id, v);
        v
    }

    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::CosineSimMatrix => 2,
            OpKind::LayerNorm => 3,
            OpKind::Concat(_) => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(
                "forward_op",
                format!("{kind:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        let x = inputs[0];
        match kind {
            OpKind::MatMul => self.matmul(x, inputs[1]),
            OpKind::Add => self.add(x, inputs[1]),
            OpKind::Mul => self.mul(x, inputs[1]),
            OpKind::Scale(c) => Ok(self.scale(x, c)),
            OpKind::Exp => self.exp(x),
            OpKind::Log => self.log(x),
            OpKind::Relu => Ok(self.relu(x)),
            OpKind::SoftmaxRows => self.softmax_rows(x),
            OpKind::LayerNorm => self.layernorm(x, inputs[1], inputs[2]),
            OpKind::Concat(axis) => self.concat(inputs, axis),
            OpKind::Slice { axis, start, len } => self.slice(x, axis, start, len),
            OpKind::Sum => Ok(self.sum(x)),
            OpKind::Mean => Ok(self.mean(x)),
            OpKind::L2NormalizeRows => Ok(self.l2_normalize_rows(x)),
            OpKind::CosineSimMatrix => self.cosine_sim_matrix(x, inputs[1]),
            OpKind::CrossEntropyRows(targets) => self.cross_entropy_rows(x, &targets),
        }
    }

    /// `a · b` for `a: n×k`, `b: k×m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims(self.value(a));
        let (k2, m) = dims(self.value(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{n}x{k} · {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul_acc(
            self.value(a).values(),
            self.value(b).values(),
            n,
            k,
            m,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: n×k`, `b: m×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims(self.value(a));
        let (m, k2) = dims(self.value(b));
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("{n}x{k} · ({m}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul_t_acc(
            self.value(a).values(),
            self.value(b).values(),
            n,
            k,
            m,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, m) = dims(self.value(a));
        let out = kernels::transpose(self.value(a).values(), n, m);
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(m, n, out).expect("transpose shape"),
            Op::Transpose(a),
            rg,
        )
    }

    /// Elementwise sum. `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let (n, m) = dims(ta);
        let (bn, bm) = dims(tb);
        let values: Vec<f64> = if ta.shape() == tb.shape() {
            ta.values()
                .iter()
                .zip(tb.values())
                .map(|(x, y)| x + y)
                .collect()
        } else if bn == 1 && bm == m {
            let row = tb.values();
            ta.values()
                .chunks(m)
                .flat_map(|r| r.iter().zip(row).map(|(x, y)| x + y))
                .collect()
        } else {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        };
        let shape = if ta.shape().len() == 1 && n == 1 {
            ta.shape().to_vec()
        } else {
            vec![n, m]
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, values)?, Op::Add(a, b), rg))
    }

    /// `a - b`, recorded as `a + (-1)·b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} ∘ {:?}", ta.shape(), tb.shape()),
            ));
        }
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, values)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let values = t.values().iter().map(|x| c * x).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(shape, values).expect("scale shape"),
            Op::Scale(a, c),
            rg,
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let values: Vec<f64> = t.values().iter().map(|x| x.exp()).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "exp",
                detail: "result overflowed to infinity".into(),
            });
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, values)?, Op::Exp(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.values().iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("input {bad} is not a finite positive number"),
            });
        }
        let values = t.values().iter().map(|x| x.ln()).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, values)?, Op::Log(a), rg))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Result<Var> {
        if !(floor > 0.0) {
            return Err(Error::Domain {
                op: "log_floor",
                detail: format!("floor {floor} must be positive"),
            });
        }
        let t = self.value(a);
        if t.values().iter().any(|x| x.is_nan()) {
            return Err(Error::Domain {
                op: "log_floor",
                detail: "NaN input".into(),
            });
        }
        let values = t.values().iter().map(|x| x.max(floor).ln()).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, values)?, Op::LogFloor(a, floor), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let values = t.values().iter().map(|x| x.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(shape, values).expect("relu shape"),
            Op::Relu(a),
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.all_finite() {
            return Err(Error::Domain {
                op: "softmax_rows",
                detail: "non-finite input".into(),
            });
        }
        let (n, m) = dims(t);
        let values = kernels::softmax_rows(t.values(), n, m);
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, values)?, Op::SoftmaxRows(a), rg))
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, m) = dims(self.value(x));
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if dims(self.value(p)) != (1, m) {
                return Err(Error::shape(
                    "layernorm",
                    format!("{name} must be 1x{m}, got {:?}", self.value(p).shape()),
                ));
            }
        }
        let xv = self.value(x).values();
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..m {
                let h = (row[j] - mean) * r;
                xhat[i * m + j] = h;
                out[i * m + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let (n0, m0) = dims(self.value(parts[0]));
        let (n, m, values) = match axis {
            Axis::Rows => {
                let mut values = Vec::new();
                let mut n = 0;
                for &p in parts {
                    let (pn, pm) = dims(self.value(p));
                    if pm != m0 {
                        return Err(Error::shape(
                            "concat",
                            format!("row concat of width {pm} onto {m0}"),
                        ));
                    }
                    n += pn;
                    values.extend_from_slice(self.value(p).values());
                }
                (n, m0, values)
            }
            Axis::Cols => {
                let mut m = 0;
                for &p in parts {
                    let (pn, pm) = dims(self.value(p));
                    if pn != n0 {
                        return Err(Error::shape(
                            "concat",
                            format!("column concat of height {pn} onto {n0}"),
                        ));
                    }
                    m += pm;
                }
                let mut values = vec![0.0; n0 * m];
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let pm = t.cols();
                    for i in 0..n0 {
                        values[i * m + off..i * m + off + pm].copy_from_slice(t.row(i));
                    }
                    off += pm;
                }
                (n0, m, values)
            }
        };
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(n, m, values)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = dims(t);
        let limit = if axis == Axis::Rows { n } else { m };
        if len == 0 || start + len > limit {
            return Err(Error::shape(
                "slice",
                format!(
                    "[{start}, {}) out of range for {axis:?} extent {limit}",
                    start + len
                ),
            ));
        }
        let (rows, cols, values) = match axis {
            Axis::Rows => (len, m, t.values()[start * m..(start + len) * m].to_vec()),
            Axis::Cols => {
                let mut v = Vec::with_capacity(n * len);
                for i in 0..n {
                    v.extend_from_slice(&t.row(i)[start..start + len]);
                }
                (n, len, v)
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(rows, cols, values)?,
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.values().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Scales each row to unit Euclidean norm. Rows with norm below
    /// [`NORMALIZE_FLOOR`] pass through unscaled and bump the guard counter.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = dims(t);
        let mut norms = vec![0.0; n];
        let mut values = t.values().to_vec();
        let mut hits = 0;
        for i in 0..n {
            let row = &mut values[i * m..(i + 1) * m];
            let norm = kernels::dot(row, row).sqrt();
            if norm < NORMALIZE_FLOOR {
                hits += 1;
                continue;
            }
            norms[i] = norm;
            row.iter_mut().for_each(|v| *v /= norm);
        }
        if hits > 0 {
            log::warn!("l2_normalize_rows: {hits} row(s) below norm floor passed through");
        }
        let shape = t.shape().to_vec();
        self.normalize_guard_hits += hits;
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(shape, values).expect("normalize shape"),
            Op::L2NormalizeRows { x: a, norms },
            rg,
        )
    }

    /// `n×m` matrix of cosine similarities between rows of `a` (n×h) and `b` (m×h).
    pub fn cosine_sim_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let ha = self.value(a).cols();
        let hb = self.value(b).cols();
        if ha != hb {
            return Err(Error::shape(
                "cosine_sim_matrix",
                format!("row widths {ha} vs {hb}"),
            ));
        }
        let an = self.l2_normalize_rows(a);
        let bn = self.l2_normalize_rows(b);
        self.matmul_t(an, bn)
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`, computed with
    /// max subtraction.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, m) = dims(t);
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= m) {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("target {bad} out of range for {m} columns"),
            ));
        }
        if !t.all_finite() {
            return Err(Error::Domain {
                op: "cross_entropy_rows",
                detail: "non-finite logits".into(),
            });
        }
        let probs = kernels::softmax_rows(t.values(), n, m);
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, m) = dims(t);
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let mut values = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            if id >= n {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {id} out of range for {n} rows"),
                ));
            }
            values.extend_from_slice(t.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), m, values)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Euclidean norm of each row as an `n×1` column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.rows();
        let values = (0..n)
            .map(|i| kernels::dot(t.row(i), t.row(i)).sqrt())
            .collect();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(n, 1, values).expect("norm shape"),
            Op::RowNorms(a),
            rg,
        )
    }

    /// Propagates `∂root/∂·` to every node that requires a gradient.
    /// Gradients accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rt = &self.nodes[root.0].value;
        if !rt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            let dst = self.nodes[i].value.grad_mut();
            kernels::add_into(&g, dst);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.values();
        let val = |v: Var| &self.nodes[v.0].value;
        // Lazily allocates the input's gradient buffer; skips frozen inputs.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
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
                let (n, k) = dims(val(*a));
                let m = val(*b).cols();
                let (av, bv) = (val(*a).values(), val(*b).values());
                with(*a, &mut |ga| kernels::matmul_t_acc(g, bv, n, m, k, ga));
                with(*b, &mut |gb| kernels::matmul_tn_acc(av, g, n, k, m, gb));
            }
            Op::MatMulT(a, b) => {
                let (n, k) = dims(val(*a));
                let m = val(*b).rows();
                let (av, bv) = (val(*a).values(), val(*b).values());
                with(*a, &mut |ga| kernels::matmul_acc(g, bv, n, m, k, ga));
                with(*b, &mut |gb| kernels::matmul_tn_acc(g, av, n, m, k, gb));
            }
            Op::Transpose(a) => {
                let (n, m) = dims(val(*a));
                let gt = kernels::transpose(g, m, n);
                with(*a, &mut |ga| kernels::add_into(&gt, ga));
            }
            Op::Add(a, b) => {
                with(*a, &mut |ga| kernels::add_into(g, ga));
                let broadcast = val(*a).shape() != val(*b).shape();
                with(*b, &mut |gb| {
                    if broadcast {
                        let m = gb.len();
                        for row in g.chunks(m) {
                            kernels::add_into(row, gb);
                        }
                    } else {
                        kernels::add_into(g, gb);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).values(), val(*b).values());
                with(*a, &mut |ga| {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                with(*b, &mut |gb| {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => with(*a, &mut |ga| kernels::axpy(*c, g, ga)),
            Op::Exp(a) => with(*a, &mut |ga| {
                for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *d += gi * yi;
                }
            }),
            Op::Log(a) => {
                let xv = val(*a).values();
                with(*a, &mut |ga| {
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(xv) {
                        *d += gi / xi;
                    }
                });
            }
            Op::LogFloor(a, floor) => {
                let xv = val(*a).values();
                with(*a, &mut |ga| {
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(xv) {
                        if *xi > *floor {
                            *d += gi / xi;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let xv = val(*a).values();
                with(*a, &mut |ga| {
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let m = node.value.cols();
                with(*a, &mut |ga| {
                    for ((yr, gr), dr) in y.chunks(m).zip(g.chunks(m)).zip(ga.chunks_mut(m)) {
                        let inner = kernels::dot(yr, gr);
                        for j in 0..m {
                            dr[j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let m = node.value.cols();
                let gv = val(*gamma).values();
                with(*gamma, &mut |gg| {
                    for (hr, gr) in xhat.chunks(m).zip(g.chunks(m)) {
                        for j in 0..m {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                with(*beta, &mut |gb| {
                    for gr in g.chunks(m) {
                        kernels::add_into(gr, gb);
                    }
                });
                with(*x, &mut |gx| {
                    let mut dh = vec![0.0; m];
                    for (i, ((hr, gr), dr)) in xhat
                        .chunks(m)
                        .zip(g.chunks(m))
                        .zip(gx.chunks_mut(m))
                        .enumerate()
                    {
                        for j in 0..m {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / m as f64;
                        let mean_dh_h = kernels::dot(&dh, hr) / m as f64;
                        for j in 0..m {
                            dr[j] += rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let (pn, pm) = dims(val(p));
                    match axis {
                        Axis::Rows => {
                            let span = &g[off * total_cols..(off + pn) * total_cols];
                            with(p, &mut |gp| kernels::add_into(span, gp));
                            off += pn;
                        }
                        Axis::Cols => {
                            with(p, &mut |gp| {
                                for r in 0..pn {
                                    let src = &g[r * total_cols + off..r * total_cols + off + pm];
                                    kernels::add_into(src, &mut gp[r * pm..(r + 1) * pm]);
                                }
                            });
                            off += pm;
                        }
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let (_, m) = dims(val(*x));
                let (sn, sm) = dims(&node.value);
                with(*x, &mut |gx| match axis {
                    Axis::Rows => kernels::add_into(g, &mut gx[start * m..(start + sn) * m]),
                    Axis::Cols => {
                        for r in 0..sn {
                            kernels::add_into(
                                &g[r * sm..(r + 1) * sm],
                                &mut gx[r * m + start..r * m + start + sm],
                            );
                        }
                    }
                });
            }
            Op::Sum(a) => with(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                with(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::L2NormalizeRows { x, norms } => {
                let m = node.value.cols();
                with(*x, &mut |gx| {
                    for (i, ((yr, gr), dr)) in y
                        .chunks(m)
                        .zip(g.chunks(m))
                        .zip(gx.chunks_mut(m))
                        .enumerate()
                    {
                        let norm = norms[i];
                        if norm == 0.0 {
                            kernels::add_into(gr, dr);
                            continue;
                        }
                        let inner = kernels::dot(yr, gr);
                        for j in 0..m {
                            dr[j] += (gr[j] - yr[j] * inner) / norm;
                        }
                    }
                });
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let m = val(*logits).cols();
                let n = targets.len() as f64;
                with(*logits, &mut |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..m {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * m + j] += g[0] * (probs[i * m + j] - onehot) / n;
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let m = node.value.cols();
                with(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::add_into(&g[r * m..(r + 1) * m], &mut gt[id * m..(id + 1) * m]);
                    }
                });
            }
            Op::RowNorms(a) => {
                let xa = val(*a);
                let m = xa.cols();
                with(*a, &mut |ga| {
                    for (i, norm) in y.iter().enumerate() {
                        if *norm == 0.0 {
                            continue;
                        }
                        kernels::axpy(g[i] / norm, xa.row(i), &mut ga[i * m..(i + 1) * m]);
                    }
                });
            }
        }
    }
}
