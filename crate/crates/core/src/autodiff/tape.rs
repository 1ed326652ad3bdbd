//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]. Nodes only ever refer to
//! earlier nodes, so walking the tape backwards visits outputs before inputs.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamRegistry};
use super::tensor::{log_sum_exp, matmul, matmul_at, matmul_bt, Tensor};
use crate::crf::{inference, PotentialTable};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    AddCol,
    Transpose,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    Gather,
    Tanh,
    Sigmoid,
    Exp,
    Conv1d,
    MaxOverTime,
    Dropout,
    Softmax,
    LogSumExp,
    SumAll,
    LogPartition,
    ChainScore,
    L2Penalty,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRow => "add_row",
            OpKind::AddCol => "add_col",
            OpKind::Transpose => "transpose",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::Gather => "gather",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Conv1d => "conv1d",
            OpKind::MaxOverTime => "max_over_time",
            OpKind::Dropout => "dropout",
            OpKind::Softmax => "softmax",
            OpKind::LogSumExp => "log_sum_exp",
            OpKind::SumAll => "sum",
            OpKind::LogPartition => "log_partition",
            OpKind::ChainScore => "chain_score",
            OpKind::L2Penalty => "l2_penalty",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum GatherSource {
    Var(Var),
    Param(ParamId),
}

#[derive(Debug, Clone)]
struct ChainInputs {
    unary: Var,
    transition: Var,
    start: Option<Var>,
    stop: Option<Var>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(GatherSource, Vec<usize>),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        width: usize,
    },
    MaxOverTime(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    Softmax(Var),
    LogSumExp(Var, usize),
    SumAll(Var),
    LogPartition {
        chain: ChainInputs,
        node: Tensor,
        edge_totals: Vec<f64>,
    },
    ChainScore {
        chain: ChainInputs,
        labels: Vec<usize>,
    },
    L2Penalty(f64),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::AddCol(..) => OpKind::AddCol,
            Op::Transpose(_) => OpKind::Transpose,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::Gather(..) => OpKind::Gather,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Exp(_) => OpKind::Exp,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::MaxOverTime(..) => OpKind::MaxOverTime,
            Op::Dropout(..) => OpKind::Dropout,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSumExp(..) => OpKind::LogSumExp,
            Op::SumAll(_) => OpKind::SumAll,
            Op::LogPartition { .. } => OpKind::LogPartition,
            Op::ChainScore { .. } => OpKind::ChainScore,
            Op::L2Penalty(_) => OpKind::L2Penalty,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation for one training step.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn shape_err(kind: OpKind, shapes: String) -> Error {
    Error::Shape {
        kind: kind.name(),
        shapes,
    }
}

impl Tape {
    /// Inference-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            fault: None,
        }
    }

    /// Training-mode tape whose dropout masks derive from `seed`.
    pub fn training(seed: u64) -> Self {
        Tape {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Tape::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Makes the backward rule of `kind` wrong on purpose. Only useful for
    /// checking that gradient verification catches broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.param_nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Distinct operation kinds recorded so far.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        let mut kinds: Vec<OpKind> = self.nodes.iter().map(|n| n.op.kind()).collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients do not flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let (r, c) = (value.rows(), value.cols());
        let value = Tensor::raw(r, c, value.into_data());
        self.push(Op::Leaf, value, false)
    }

    /// Differentiable input whose gradient is readable through [`Tape::grad`].
    pub fn input(&mut self, value: Tensor) -> Var {
        let (r, c) = (value.rows(), value.cols());
        let value = Tensor::raw(r, c, value.into_data());
        self.push(Op::Leaf, value, true)
    }

    /// Node for a registry parameter. Repeated calls return the same node.
    pub fn param(&mut self, reg: &ParamRegistry, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let t = reg.value(id);
        let value = Tensor::raw(t.rows(), t.cols(), t.data().to_vec());
        let v = self.push(Op::Param(id), value, true);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err(OpKind::MatMul, format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::raw(m, n, out), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, kind: OpKind, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err(kind, format!("{da:?} vs {db:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, Tensor::raw(da.0, da.1, data), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, OpKind::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, OpKind::Sub, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, OpKind::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let data = self.value(a).data().iter().map(|v| v * s).collect();
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), Tensor::raw(r, c, data), rg)
    }

    /// `a (m×n) + b (1×n)` with `b` repeated on every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, n), (br, bc)) = (self.dims(a), self.dims(b));
        if br != 1 || bc != n {
            return Err(shape_err(OpKind::AddRow, format!("{m}x{n} + {br}x{bc}")));
        }
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::AddRow(a, b), Tensor::raw(m, n, data), rg))
    }

    /// `a (m×n) + b (m×1)` with `b` repeated on every column.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, n), (br, bc)) = (self.dims(a), self.dims(b));
        if br != m || bc != 1 {
            return Err(shape_err(OpKind::AddCol, format!("{m}x{n} + {br}x{bc}")));
        }
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .zip(bv)
            .flat_map(|(row, y)| row.iter().map(move |x| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::AddCol(a, b), Tensor::raw(m, n, data), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let av = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose(a), Tensor::raw(n, m, data), rg)
    }

    /// Stacks inputs vertically (axis 0).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| shape_err(OpKind::ConcatRows, "no inputs".into()))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(shape_err(OpKind::ConcatRows, format!("column counts {cols} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::raw(rows, cols, data), rg))
    }

    /// Joins inputs side by side (axis 1).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| shape_err(OpKind::ConcatCols, "no inputs".into()))?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(shape_err(OpKind::ConcatCols, format!("row counts {rows} vs {r}")));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::raw(rows, cols, data), rg))
    }

    /// Concatenation along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        match axis {
            0 => self.concat_rows(parts),
            1 => self.concat_cols(parts),
            _ => Err(shape_err(OpKind::ConcatRows, format!("axis {axis} on a matrix"))),
        }
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > m || len == 0 {
            return Err(shape_err(OpKind::SliceRows, format!("rows {start}..{} of {m}", start + len)));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::SliceRows(a, start), Tensor::raw(len, n, data), rg))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice_rows(a, i, 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n || len == 0 {
            return Err(shape_err(OpKind::SliceCols, format!("cols {start}..{} of {n}", start + len)));
        }
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a, start), Tensor::raw(m, len, data), rg))
    }

    fn gather_from(&mut self, table: &Tensor, source: GatherSource, ids: &[usize], rg: bool) -> Result<Var> {
        let (rows, cols) = (table.rows(), table.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::Index {
                    kind: "gather",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(table.row(i));
        }
        if ids.is_empty() {
            return Err(shape_err(OpKind::Gather, "empty index list".into()));
        }
        Ok(self.push(Op::Gather(source, ids.to_vec()), Tensor::raw(ids.len(), cols, data), rg))
    }

    /// Rows `ids` of `a`, in order.
    pub fn gather(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let table = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        self.gather_from(&table, GatherSource::Var(a), ids, rg)
    }

    /// Embedding lookup straight from a registry table. Padding rows of
    /// padded tables never receive gradient.
    pub fn gather_param(&mut self, reg: &ParamRegistry, id: ParamId, ids: &[usize]) -> Result<Var> {
        self.gather_from(reg.value(id), GatherSource::Param(id), ids, true)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let data = self.value(a).data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(a);
        self.push(op, Tensor::raw(r, c, data), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Valid 1-D convolution over time.
    ///
    /// `input` is `T × c`, `weight` is `(width·c) × f`, `bias` is `1 × f`;
    /// output row `t` is the flattened window `input[t..t+width]` times
    /// `weight`, plus `bias`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, width: usize) -> Result<Var> {
        let ((t, c), (wr, f), (br, bc)) = (self.dims(input), self.dims(weight), self.dims(bias));
        if width == 0 || t < width || wr != width * c || br != 1 || bc != f {
            return Err(shape_err(
                OpKind::Conv1d,
                format!("input {t}x{c}, weight {wr}x{f}, bias {br}x{bc}, width {width}"),
            ));
        }
        let steps = t - width + 1;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(steps * f);
        for s in 0..steps {
            let window = &x[s * c..(s + width) * c];
            let mut row = matmul(window, w, 1, width * c, f);
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
            out.extend(row);
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Op::Conv1d {
                input,
                weight,
                bias,
                width,
            },
            Tensor::raw(steps, f, out),
            rg,
        ))
    }

    /// Column-wise maximum over rows (`T × f → 1 × f`); ties pick the first row.
    pub fn max_over_time(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let av = self.value(a).data();
        let mut arg = vec![0usize; n];
        let mut out = av[..n].to_vec();
        for i in 1..m {
            for j in 0..n {
                let v = av[i * n + j];
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        let rg = self.rg(a);
        self.push(Op::MaxOverTime(a, arg), Tensor::raw(1, n, out), rg)
    }

    /// Inverted dropout: active only on training tapes.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let (r, c) = self.dims(a);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::Dropout(a, mask), Tensor::raw(r, c, data), rg))
    }

    /// Softmax along `axis` (1 = within each row, 0 = within each column).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if self.value(a).data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input contains NaN".into()));
        }
        match axis {
            1 => Ok(self.softmax_rows(a)),
            0 => {
                let t = self.transpose(a);
                let s = self.softmax_rows(t);
                Ok(self.transpose(s))
            }
            _ => Err(shape_err(OpKind::Softmax, format!("axis {axis} on a matrix"))),
        }
    }

    fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut data = Vec::with_capacity(m * n);
        for row in self.value(a).data().chunks(n) {
            data.extend(softmax_slice(row));
        }
        let rg = self.rg(a);
        self.push(Op::Softmax(a), Tensor::raw(m, n, data), rg)
    }

    /// log Σ exp along `axis`: axis 1 gives `m × 1`, axis 0 gives `1 × n`.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        let av = self.value(a).data();
        let value = match axis {
            1 => Tensor::raw(m, 1, av.chunks(n).map(|r| log_sum_exp(r.iter().copied())).collect()),
            0 => Tensor::raw(
                1,
                n,
                (0..n)
                    .map(|j| log_sum_exp((0..m).map(|i| av[i * n + j])))
                    .collect(),
            ),
            _ => return Err(shape_err(OpKind::LogSumExp, format!("axis {axis} on a matrix"))),
        };
        let rg = self.rg(a);
        Ok(self.push(Op::LogSumExp(a, axis), value, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), rg)
    }

    fn chain_table(&self, chain: &ChainInputs) -> Result<PotentialTable> {
        let boundary = |v: Option<Var>| v.map(|v| self.value(v).data().to_vec());
        PotentialTable::with_boundaries(
            self.value(chain.unary).clone(),
            self.value(chain.transition).clone(),
            boundary(chain.start),
            boundary(chain.stop),
        )
    }

    fn chain_rg(&self, chain: &ChainInputs) -> bool {
        [Some(chain.unary), Some(chain.transition), chain.start, chain.stop]
            .into_iter()
            .flatten()
            .any(|v| self.rg(v))
    }

    /// log Z of the chain CRF with the given potentials (forward recursion).
    /// Its gradient is the node / edge marginals.
    pub fn log_partition(
        &mut self,
        unary: Var,
        transition: Var,
        start: Option<Var>,
        stop: Option<Var>,
    ) -> Result<Var> {
        let chain = ChainInputs {
            unary,
            transition,
            start,
            stop,
        };
        let pot = self.chain_table(&chain)?;
        let marg = inference::forward_backward(&pot);
        let edge_totals = marg.edge_totals();
        let rg = self.chain_rg(&chain);
        Ok(self.push(
            Op::LogPartition {
                chain,
                node: marg.node,
                edge_totals,
            },
            Tensor::scalar(marg.log_z),
            rg,
        ))
    }

    /// Unnormalised score of one label sequence under the chain potentials.
    pub fn chain_score(
        &mut self,
        unary: Var,
        transition: Var,
        start: Option<Var>,
        stop: Option<Var>,
        labels: &[usize],
    ) -> Result<Var> {
        let chain = ChainInputs {
            unary,
            transition,
            start,
            stop,
        };
        let score = self.chain_table(&chain)?.score(labels)?;
        let rg = self.chain_rg(&chain);
        Ok(self.push(
            Op::ChainScore {
                chain,
                labels: labels.to_vec(),
            },
            Tensor::scalar(score),
            rg,
        ))
    }

    /// `lambda · Σ‖Θ‖²` over every registry parameter, padding rows excluded.
    pub fn l2_penalty(&mut self, reg: &ParamRegistry, lambda: f64) -> Var {
        let value = lambda * reg.l2_norm_sq();
        self.push(Op::L2Penalty(lambda), Tensor::scalar(value), lambda != 0.0)
    }

    /// Accumulates `∂loss/∂θ` into every parameter's `grad` buffer.
    pub fn backward(&mut self, loss: Var, reg: &mut ParamRegistry) -> Result<()> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(shape_err(OpKind::SumAll, format!("loss must be scalar, got {r}x{c}")));
        }
        self.backward_seeded(loss, vec![1.0], reg)
    }

    /// Back-propagates an explicit output gradient `seed` from `out`.
    pub(crate) fn backward_seeded(&mut self, out: Var, seed: Vec<f64>, reg: &mut ParamRegistry) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return Err(shape_err(OpKind::Leaf, "seed gradient length".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            let kind = node.op.kind();
            let factor = if self.fault == Some(kind) { 1.5 } else { 1.0 };
            let mut sink = Sink {
                nodes: &self.nodes,
                grads: before,
                factor,
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let p = reg.get_mut(*id);
                    let skip = p.pad_len();
                    for (k, (pg, gv)) in p.grad.iter_mut().zip(g).enumerate() {
                        if k >= skip {
                            *pg += gv;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = node.value.cols();
                    if sink.wants(*a) {
                        sink.add(*a, matmul_bt(g, self.value(*b).data(), m, n, k));
                    }
                    if sink.wants(*b) {
                        sink.add(*b, matmul_at(self.value(*a).data(), g, m, k, n));
                    }
                }
                Op::Add(a, b) => {
                    sink.add_slice(*a, g);
                    sink.add_slice(*b, g);
                }
                Op::Sub(a, b) => {
                    sink.add_slice(*a, g);
                    if sink.wants(*b) {
                        sink.add(*b, g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if sink.wants(*a) {
                        sink.add(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    }
                    if sink.wants(*b) {
                        sink.add(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                    }
                }
                Op::Scale(a, s) => sink.add(*a, g.iter().map(|v| v * s).collect()),
                Op::AddRow(a, b) => {
                    sink.add_slice(*a, g);
                    if sink.wants(*b) {
                        let n = node.value.cols();
                        let mut gb = vec![0.0; n];
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                        }
                        sink.add(*b, gb);
                    }
                }
                Op::AddCol(a, b) => {
                    sink.add_slice(*a, g);
                    if sink.wants(*b) {
                        let n = node.value.cols();
                        sink.add(*b, g.chunks(n).map(|row| row.iter().sum()).collect());
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = self.dims(*a);
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = g[j * m + i];
                        }
                    }
                    sink.add(*a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        sink.add_slice(p, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let (m, c) = self.dims(p);
                        if sink.wants(p) {
                            let gp = (0..m)
                                .flat_map(|i| g[i * total + offset..i * total + offset + c].iter().copied())
                                .collect();
                            sink.add(p, gp);
                        }
                        offset += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    if sink.wants(*a) {
                        let n = node.value.cols();
                        let mut ga = vec![0.0; self.value(*a).len()];
                        ga[start * n..start * n + g.len()].copy_from_slice(g);
                        sink.add(*a, ga);
                    }
                }
                Op::SliceCols(a, start) => {
                    if sink.wants(*a) {
                        let (m, n) = self.dims(*a);
                        let len = node.value.cols();
                        let mut ga = vec![0.0; m * n];
                        for i in 0..m {
                            ga[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                        }
                        sink.add(*a, ga);
                    }
                }
                Op::Gather(source, ids) => {
                    let cols = node.value.cols();
                    match source {
                        GatherSource::Var(a) => {
                            if sink.wants(*a) {
                                let mut ga = vec![0.0; self.value(*a).len()];
                                for (k, &row) in ids.iter().enumerate() {
                                    for j in 0..cols {
                                        ga[row * cols + j] += g[k * cols + j];
                                    }
                                }
                                sink.add(*a, ga);
                            }
                        }
                        GatherSource::Param(id) => {
                            let p = reg.get_mut(*id);
                            let masked = p.pad_row;
                            for (k, &row) in ids.iter().enumerate() {
                                if masked && row == 0 {
                                    continue;
                                }
                                for j in 0..cols {
                                    p.grad[row * cols + j] += factor * g[k * cols + j];
                                }
                            }
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    sink.add(*a, g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect());
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    sink.add(*a, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect());
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    sink.add(*a, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect());
                }
                Op::Conv1d {
                    input,
                    weight,
                    bias,
                    width,
                } => {
                    let (_, c) = self.dims(*input);
                    let f = node.value.cols();
                    let steps = node.value.rows();
                    let span = width * c;
                    let x = self.value(*input).data();
                    let w = self.value(*weight).data();
                    if sink.wants(*input) {
                        let mut gx = vec![0.0; x.len()];
                        for s in 0..steps {
                            let gw = matmul_bt(&g[s * f..(s + 1) * f], w, 1, f, span);
                            gx[s * c..s * c + span].iter_mut().zip(gw).for_each(|(o, v)| *o += v);
                        }
                        sink.add(*input, gx);
                    }
                    if sink.wants(*weight) {
                        let mut gw = vec![0.0; w.len()];
                        for s in 0..steps {
                            let window = &x[s * c..s * c + span];
                            let gs = &g[s * f..(s + 1) * f];
                            for (p, &xv) in window.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                gw[p * f..(p + 1) * f].iter_mut().zip(gs).for_each(|(o, v)| *o += xv * v);
                            }
                        }
                        sink.add(*weight, gw);
                    }
                    if sink.wants(*bias) {
                        let mut gb = vec![0.0; f];
                        for row in g.chunks(f) {
                            gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                        }
                        sink.add(*bias, gb);
                    }
                }
                Op::MaxOverTime(a, arg) => {
                    if sink.wants(*a) {
                        let n = node.value.cols();
                        let mut ga = vec![0.0; self.value(*a).len()];
                        for (j, &i) in arg.iter().enumerate() {
                            ga[i * n + j] = g[j];
                        }
                        sink.add(*a, ga);
                    }
                }
                Op::Dropout(a, mask) => {
                    sink.add(*a, g.iter().zip(mask).map(|(x, m)| x * m).collect());
                }
                Op::Softmax(a) => {
                    let n = node.value.cols();
                    let y = node.value.data();
                    let mut ga = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        ga.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                    }
                    sink.add(*a, ga);
                }
                Op::LogSumExp(a, axis) => {
                    let (m, n) = self.dims(*a);
                    let av = self.value(*a).data();
                    let out = node.value.data();
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            let k = if *axis == 1 { i } else { j };
                            ga[i * n + j] = g[k] * (av[i * n + j] - out[k]).exp();
                        }
                    }
                    sink.add(*a, ga);
                }
                Op::SumAll(a) => {
                    let len = self.value(*a).len();
                    sink.add(*a, vec![g[0]; len]);
                }
                Op::LogPartition {
                    chain,
                    node: marg,
                    edge_totals,
                } => {
                    let gz = g[0];
                    sink.add(chain.unary, marg.data().iter().map(|p| gz * p).collect());
                    sink.add(chain.transition, edge_totals.iter().map(|p| gz * p).collect());
                    let n = marg.rows();
                    if let Some(s) = chain.start {
                        sink.add(s, marg.row(0).iter().map(|p| gz * p).collect());
                    }
                    if let Some(s) = chain.stop {
                        sink.add(s, marg.row(n - 1).iter().map(|p| gz * p).collect());
                    }
                }
                Op::ChainScore { chain, labels } => {
                    let gs = g[0];
                    let l = self.value(chain.unary).cols();
                    if sink.wants(chain.unary) {
                        let mut gu = vec![0.0; labels.len() * l];
                        for (t, &y) in labels.iter().enumerate() {
                            gu[t * l + y] = gs;
                        }
                        sink.add(chain.unary, gu);
                    }
                    if sink.wants(chain.transition) {
                        let mut gt = vec![0.0; l * l];
                        for w in labels.windows(2) {
                            gt[w[0] * l + w[1]] += gs;
                        }
                        sink.add(chain.transition, gt);
                    }
                    if let Some(s) = chain.start {
                        let mut gb = vec![0.0; l];
                        gb[labels[0]] = gs;
                        sink.add(s, gb);
                    }
                    if let Some(s) = chain.stop {
                        let mut gb = vec![0.0; l];
                        gb[labels[labels.len() - 1]] = gs;
                        sink.add(s, gb);
                    }
                }
                Op::L2Penalty(lambda) => {
                    let scale = factor * 2.0 * lambda * g[0];
                    for p in reg.iter_mut() {
                        let skip = p.pad_len();
                        for (k, (pg, v)) in p.grad.iter_mut().zip(p.value.data()).enumerate() {
                            if k >= skip {
                                *pg += scale * v;
                            }
                        }
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
    factor: f64,
}

impl Sink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, mut g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        if self.factor != 1.0 {
            g.iter_mut().for_each(|x| *x *= self.factor);
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn add_slice(&mut self, v: Var, g: &[f64]) {
        if self.wants(v) {
            self.add(v, g.to_vec());
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
