use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{DenseArray, NumericsError, Real};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op<T: Real> {
    Input(String),
    Constant(DenseArray<T>),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[m, n] + [n]`, broadcast over rows.
    AddBias(NodeId, NodeId),
    Scale(NodeId, T),
    /// `x * exp(s)` for a scalar node `s`.
    ExpScale(NodeId, NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows {
        x: NodeId,
        indices: Vec<usize>,
    },
    L2NormalizeRows(NodeId),
    Diagonal(NodeId),
    Mean(NodeId),
    Sum(NodeId),
}

impl<T: Real> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::ExpScale(..) => "exp_scale",
            Op::Exp(_) => "exp",
            Op::Gelu(_) => "gelu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSumExpRows(_) => "logsumexp_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::L2NormalizeRows(_) => "l2_normalize_rows",
            Op::Diagonal(_) => "diagonal",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Constant(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ExpScale(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSumExpRows(a)
            | Op::L2NormalizeRows(a)
            | Op::Diagonal(a)
            | Op::Mean(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } | Op::GatherRows { x, .. } => {
                vec![*x]
            }
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Named input arrays for one evaluation.
pub struct Bindings<'a, T: Real> {
    map: HashMap<&'a str, &'a DenseArray<T>>,
}

impl<T: Real> Default for Bindings<'_, T> {
    fn default() -> Self {
        Self {
            map: HashMap::new(),
        }
    }
}

impl<'a, T: Real> Bindings<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &'a str, value: &'a DenseArray<T>) -> Self {
        self.map.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: &'a str, value: &'a DenseArray<T>) {
        self.map.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&'a DenseArray<T>> {
        self.map.get(name).copied()
    }

    pub fn extend(&mut self, named: &'a BTreeMap<String, DenseArray<T>>) {
        for (k, v) in named {
            self.map.insert(k.as_str(), v);
        }
    }
}

/// Acyclic graph of array primitives.
///
/// Nodes are appended in topological order: every operand of a node was
/// created before it. Shape rules are checked when a node is added, so a
/// built graph is always shape-consistent; bindings are checked against
/// the declared input shapes at evaluation time.
#[derive(Debug, Clone)]
pub struct Graph<T: Real = f64> {
    id: u64,
    nodes: Vec<Node<T>>,
    inputs: HashMap<String, NodeId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Values of every node after a forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation<T: Real = f64> {
    graph_id: u64,
    values: Vec<DenseArray<T>>,
}

impl<T: Real> Evaluation<T> {
    pub fn value(&self, node: NodeId) -> &DenseArray<T> {
        &self.values[node.0]
    }

    pub fn scalar(&self, node: NodeId) -> T {
        self.values[node.0].data()[0]
    }
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f64> {
    by_node: Vec<Option<DenseArray<T>>>,
    inputs: BTreeMap<String, NodeId>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a named input. Inputs that do not influence
    /// the output get a zero array.
    pub fn get(&self, name: &str) -> Option<&DenseArray<T>> {
        self.inputs
            .get(name)
            .and_then(|id| self.by_node[id.0].as_ref())
    }

    pub fn node(&self, id: NodeId) -> Option<&DenseArray<T>> {
        self.by_node.get(id.0).and_then(Option::as_ref)
    }

    pub fn into_named(mut self) -> BTreeMap<String, DenseArray<T>> {
        self.inputs
            .iter()
            .filter_map(|(name, id)| self.by_node[id.0].take().map(|g| (name.clone(), g)))
            .collect()
    }
}

fn structural(node: usize, op: &'static str, detail: impl Into<String>) -> NumericsError {
    NumericsError::Structural {
        node,
        op,
        detail: detail.into(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            inputs: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn op_name(&self, node: NodeId) -> &'static str {
        self.nodes[node.0].op.name()
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn next(&self) -> usize {
        self.nodes.len()
    }

    fn dims2(&self, a: NodeId, op: &'static str) -> Result<(usize, usize), NumericsError> {
        match self.shape(a) {
            [m, n] => Ok((*m, *n)),
            s => Err(structural(
                self.next(),
                op,
                format!("expected a matrix operand, got shape {s:?}"),
            )),
        }
    }

    fn rows_cols(&self, a: NodeId, op: &'static str) -> Result<(usize, usize), NumericsError> {
        match self.shape(a) {
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            s => Err(structural(
                self.next(),
                op,
                format!("expected a vector or matrix operand, got shape {s:?}"),
            )),
        }
    }

    /// Declares a named free input. Declaring the same name twice returns the
    /// existing node when the shapes agree.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, NumericsError> {
        if let Some(&id) = self.inputs.get(name) {
            if self.shape(id) != shape {
                return Err(structural(
                    id.0,
                    "input",
                    format!(
                        "'{name}' redeclared with shape {shape:?}, was {:?}",
                        self.shape(id)
                    ),
                ));
            }
            return Ok(id);
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(structural(
                self.next(),
                "input",
                format!("'{name}' has invalid shape {shape:?}"),
            ));
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: DenseArray<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(structural(
                self.next(),
                "matmul",
                format!("inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        Ok(self.push(Op::MatMul(a, b), vec![m, n]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let (m, n) = self.dims2(a, "transpose")?;
        Ok(self.push(Op::Transpose(a), vec![n, m]))
    }

    fn same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<T>,
        name: &'static str,
    ) -> Result<NodeId, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(structural(
                self.next(),
                name,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape(a, b, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape(a, b, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape(a, b, Op::Mul(a, b), "mul")
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (_, n) = self.rows_cols(x, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(structural(
                self.next(),
                "add_bias",
                format!("bias shape {:?} does not match row length {n}", self.shape(bias)),
            ));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::AddBias(x, bias), shape))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(x, factor), shape)
    }

    pub fn exp_scale(&mut self, x: NodeId, log_scale: NodeId) -> Result<NodeId, NumericsError> {
        if self.shape(log_scale) != [1] {
            return Err(structural(
                self.next(),
                "exp_scale",
                format!("log-scale must be shape [1], got {:?}", self.shape(log_scale)),
            ));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::ExpScale(x, log_scale), shape))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Exp(x), shape)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Gelu(x), shape)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.rows_cols(x, "softmax_rows")?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::SoftmaxRows(x), shape))
    }

    /// Row-wise log-sum-exp; a `[m, n]` input yields `[m]`.
    pub fn logsumexp_rows(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let (m, _) = self.rows_cols(x, "logsumexp_rows")?;
        Ok(self.push(Op::LogSumExpRows(x), vec![m]))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let (_, n) = self.rows_cols(x, "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(structural(
                self.next(),
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must both be [{n}]",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::LayerNorm { x, gain, bias }, shape))
    }

    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId, NumericsError> {
        let (rows, dim) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(structural(self.next(), "embedding", "empty id list"));
        }
        if let Some(bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(structural(
                self.next(),
                "embedding",
                format!("id {bad} out of range for table with {rows} rows"),
            ));
        }
        let n = ids.len();
        Ok(self.push(Op::Embedding { table, ids }, vec![n, dim]))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(structural(
                self.next(),
                "slice_rows",
                format!("rows {start}..{} out of range for {m} rows", start + len),
            ));
        }
        Ok(self.push(Op::SliceRows { x, start, len }, vec![len, n]))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(structural(
                self.next(),
                "slice_cols",
                format!("cols {start}..{} out of range for {n} cols", start + len),
            ));
        }
        Ok(self.push(Op::SliceCols { x, start, len }, vec![m, len]))
    }

    pub fn concat_rows(&mut self, xs: Vec<NodeId>) -> Result<NodeId, NumericsError> {
        let first = *xs
            .first()
            .ok_or_else(|| structural(self.next(), "concat_rows", "no operands"))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &x in &xs {
            let (m, n2) = self.dims2(x, "concat_rows")?;
            if n2 != n {
                return Err(structural(
                    self.next(),
                    "concat_rows",
                    format!("column counts differ: {n} vs {n2}"),
                ));
            }
            rows += m;
        }
        Ok(self.push(Op::ConcatRows(xs), vec![rows, n]))
    }

    pub fn concat_cols(&mut self, xs: Vec<NodeId>) -> Result<NodeId, NumericsError> {
        let first = *xs
            .first()
            .ok_or_else(|| structural(self.next(), "concat_cols", "no operands"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut cols = 0;
        for &x in &xs {
            let (m2, n) = self.dims2(x, "concat_cols")?;
            if m2 != m {
                return Err(structural(
                    self.next(),
                    "concat_cols",
                    format!("row counts differ: {m} vs {m2}"),
                ));
            }
            cols += n;
        }
        Ok(self.push(Op::ConcatCols(xs), vec![m, cols]))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId, NumericsError> {
        let (m, n) = self.dims2(x, "gather_rows")?;
        if indices.is_empty() || indices.iter().any(|&i| i >= m) {
            return Err(structural(
                self.next(),
                "gather_rows",
                format!("indices {indices:?} invalid for {m} rows"),
            ));
        }
        let len = indices.len();
        Ok(self.push(Op::GatherRows { x, indices }, vec![len, n]))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        self.rows_cols(x, "l2_normalize_rows")?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::L2NormalizeRows(x), shape))
    }

    pub fn diagonal(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let (m, n) = self.dims2(x, "diagonal")?;
        if m != n {
            return Err(structural(
                self.next(),
                "diagonal",
                format!("matrix must be square, got [{m}, {n}]"),
            ));
        }
        Ok(self.push(Op::Diagonal(x), vec![m]))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), vec![1])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![1])
    }

    /// Runs the forward pass over every node.
    pub fn evaluate(&self, bindings: &Bindings<'_, T>) -> Result<Evaluation<T>, NumericsError> {
        let mut values: Vec<DenseArray<T>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input(name) => {
                    let bound = bindings.get(name).ok_or_else(|| {
                        NumericsError::Usage(format!("input '{name}' (node #{idx}) is not bound"))
                    })?;
                    if bound.shape() != node.shape.as_slice() {
                        return Err(structural(
                            idx,
                            "input",
                            format!(
                                "'{name}' bound with shape {:?}, declared {:?}",
                                bound.shape(),
                                node.shape
                            ),
                        ));
                    }
                    bound.clone()
                }
                op => forward(op, &node.shape, &values),
            };
            if !value.is_finite() {
                return Err(NumericsError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(value);
        }
        Ok(Evaluation {
            graph_id: self.id,
            values,
        })
    }

    /// Propagates adjoints from `output` back to every node it depends on.
    ///
    /// `seed` defaults to ones for a scalar output and must match the output
    /// shape otherwise.
    pub fn backward(
        &self,
        evaluation: &Evaluation<T>,
        output: NodeId,
        seed: Option<&DenseArray<T>>,
    ) -> Result<Gradients<T>, NumericsError> {
        if evaluation.graph_id != self.id || evaluation.values.len() != self.nodes.len() {
            return Err(NumericsError::Usage(
                "backward requires an evaluation of this graph; run evaluate first".into(),
            ));
        }
        let out_shape = self.shape(output).to_vec();
        let seed = match seed {
            Some(s) if s.shape() == out_shape.as_slice() => s.clone(),
            Some(s) => {
                return Err(NumericsError::Usage(format!(
                    "seed shape {:?} does not match output shape {out_shape:?}",
                    s.shape()
                )))
            }
            None if out_shape == [1] => DenseArray::scalar(T::one()),
            None => {
                return Err(NumericsError::Usage(format!(
                    "output has shape {out_shape:?}; a seed is required for non-scalar outputs"
                )))
            }
        };

        let mut needed = vec![false; output.0 + 1];
        needed[output.0] = true;
        for idx in (0..=output.0).rev() {
            if needed[idx] {
                for operand in self.nodes[idx].op.operands() {
                    needed[operand.0] = true;
                }
            }
        }

        let mut adjoints: Vec<Option<DenseArray<T>>> = vec![None; self.nodes.len()];
        adjoints[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(upstream) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contributions = backward_op(&node.op, &evaluation.values, idx, &upstream);
            adjoints[idx] = Some(upstream);
            for (operand, grad) in contributions {
                if !needed[operand.0] {
                    continue;
                }
                accumulate(&mut adjoints[operand.0], grad);
            }
        }

        for id in self.inputs.values() {
            if id.0 <= output.0 && adjoints[id.0].is_none() {
                adjoints[id.0] = Some(DenseArray::zeros(self.shape(*id)));
            }
        }
        let inputs = self
            .inputs
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        Ok(Gradients {
            by_node: adjoints,
            inputs,
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<DenseArray<T>>, grad: DenseArray<T>) {
    match slot {
        Some(existing) => {
            for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                *e = *e + *g;
            }
        }
        None => *slot = Some(grad),
    }
}

fn arr<T: Real>(shape: &[usize], data: Vec<T>) -> DenseArray<T> {
    DenseArray::new(shape.to_vec(), data).expect("shape rules guarantee consistent sizes")
}

fn forward<T: Real>(op: &Op<T>, shape: &[usize], values: &[DenseArray<T>]) -> DenseArray<T> {
    let v = |id: &NodeId| &values[id.0];
    match op {
        Op::Input(_) => unreachable!("inputs are bound by the caller"),
        Op::Constant(c) => c.clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            arr(shape, kernels::matmul(a.data(), b.data(), m, k, n))
        }
        Op::Transpose(a) => {
            let a = v(a);
            arr(shape, kernels::transpose(a.data(), a.shape()[0], a.shape()[1]))
        }
        Op::Add(a, b) => zip_with(v(a), v(b), |x, y| x + y),
        Op::Sub(a, b) => zip_with(v(a), v(b), |x, y| x - y),
        Op::Mul(a, b) => zip_with(v(a), v(b), |x, y| x * y),
        Op::AddBias(x, b) => {
            let (x, b) = (v(x), v(b));
            let n = x.cols();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &xv)| xv + b.data()[i % n])
                .collect();
            arr(shape, data)
        }
        Op::Scale(x, c) => v(x).map(|xv| xv * *c),
        Op::ExpScale(x, s) => {
            let factor = v(s).data()[0].exp();
            v(x).map(|xv| xv * factor)
        }
        Op::Exp(x) => v(x).map(T::exp),
        Op::Gelu(x) => v(x).map(kernels::gelu),
        Op::SoftmaxRows(x) => {
            let x = v(x);
            let n = x.cols();
            let mut out = vec![T::zero(); x.len()];
            for (row, o) in x.data().chunks(n).zip(out.chunks_mut(n)) {
                kernels::softmax_row(row, o);
            }
            arr(shape, out)
        }
        Op::LogSumExpRows(x) => {
            let x = v(x);
            arr(shape, x.data().chunks(x.cols()).map(kernels::logsumexp_row).collect())
        }
        Op::LayerNorm { x, gain, bias } => {
            let (x, g, b) = (v(x), v(gain), v(bias));
            let n = x.cols();
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let (mean, rstd) = kernels::row_moments(row);
                for (j, &xv) in row.iter().enumerate() {
                    out.push((xv - mean) * rstd * g.data()[j] + b.data()[j]);
                }
            }
            arr(shape, out)
        }
        Op::Embedding { table, ids } => {
            let t = v(table);
            let mut out = Vec::with_capacity(ids.len() * t.cols());
            for &id in ids {
                out.extend_from_slice(t.row(id));
            }
            arr(shape, out)
        }
        Op::SliceRows { x, start, len } => {
            let x = v(x);
            let n = x.cols();
            arr(shape, x.data()[start * n..(start + len) * n].to_vec())
        }
        Op::SliceCols { x, start, len } => {
            let x = v(x);
            let mut out = Vec::with_capacity(x.rows() * len);
            for row in x.data().chunks(x.cols()) {
                out.extend_from_slice(&row[*start..start + len]);
            }
            arr(shape, out)
        }
        Op::ConcatRows(xs) => {
            let mut out = Vec::with_capacity(shape.iter().product());
            for x in xs {
                out.extend_from_slice(v(x).data());
            }
            arr(shape, out)
        }
        Op::ConcatCols(xs) => {
            let m = shape[0];
            let mut out = Vec::with_capacity(shape.iter().product());
            for i in 0..m {
                for x in xs {
                    out.extend_from_slice(v(x).row(i));
                }
            }
            arr(shape, out)
        }
        Op::GatherRows { x, indices } => {
            let x = v(x);
            let mut out = Vec::with_capacity(indices.len() * x.cols());
            for &i in indices {
                out.extend_from_slice(x.row(i));
            }
            arr(shape, out)
        }
        Op::L2NormalizeRows(x) => {
            let x = v(x);
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(x.cols()) {
                let norm = kernels::dot(row, row).sqrt();
                out.extend(row.iter().map(|&r| r / norm));
            }
            arr(shape, out)
        }
        Op::Diagonal(x) => {
            let x = v(x);
            let n = x.cols();
            arr(shape, (0..n).map(|i| x.data()[i * n + i]).collect())
        }
        Op::Mean(x) => {
            let x = v(x);
            let total: T = x.data().iter().copied().sum();
            DenseArray::scalar(total / T::lit(x.len() as f64))
        }
        Op::Sum(x) => DenseArray::scalar(v(x).data().iter().copied().sum()),
    }
}

fn zip_with<T: Real>(a: &DenseArray<T>, b: &DenseArray<T>, f: impl Fn(T, T) -> T) -> DenseArray<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    arr(a.shape(), data)
}

/// Returns the contribution of `upstream` (the adjoint of node `idx`) to
/// each operand.
fn backward_op<T: Real>(
    op: &Op<T>,
    values: &[DenseArray<T>],
    idx: usize,
    upstream: &DenseArray<T>,
) -> Vec<(NodeId, DenseArray<T>)> {
    let v = |id: &NodeId| &values[id.0];
    let out = &values[idx];
    let up = upstream.data();
    match op {
        Op::Input(_) | Op::Constant(_) => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (v(a), v(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let da = kernels::matmul_a_bt(up, bv.data(), m, n, k);
            let db = kernels::matmul_at_b(av.data(), up, m, k, n);
            vec![(*a, arr(av.shape(), da)), (*b, arr(bv.shape(), db))]
        }
        Op::Transpose(a) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            vec![(*a, arr(v(a).shape(), kernels::transpose(up, m, n)))]
        }
        Op::Add(a, b) => vec![(*a, upstream.clone()), (*b, upstream.clone())],
        Op::Sub(a, b) => vec![(*a, upstream.clone()), (*b, upstream.map(|g| -g))],
        Op::Mul(a, b) => {
            let (av, bv) = (v(a), v(b));
            vec![
                (*a, zip_with(upstream, bv, |g, y| g * y)),
                (*b, zip_with(upstream, av, |g, x| g * x)),
            ]
        }
        Op::AddBias(x, b) => {
            let n = upstream.cols();
            let mut db = vec![T::zero(); n];
            for row in up.chunks(n) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d = *d + g;
                }
            }
            vec![(*x, upstream.clone()), (*b, arr(&[n], db))]
        }
        Op::Scale(x, c) => vec![(*x, upstream.map(|g| g * *c))],
        Op::ExpScale(x, s) => {
            let factor = v(s).data()[0].exp();
            let ds = kernels::dot(up, out.data());
            vec![
                (*x, upstream.map(|g| g * factor)),
                (*s, DenseArray::scalar(ds)),
            ]
        }
        Op::Exp(x) => vec![(*x, zip_with(upstream, out, |g, y| g * y))],
        Op::Gelu(x) => vec![(*x, zip_with(upstream, v(x), |g, xv| g * kernels::gelu_grad(xv)))],
        Op::SoftmaxRows(x) => {
            let n = out.cols();
            let mut dx = Vec::with_capacity(out.len());
            for (y, g) in out.data().chunks(n).zip(up.chunks(n)) {
                let inner = kernels::dot(y, g);
                dx.extend(y.iter().zip(g).map(|(&yv, &gv)| yv * (gv - inner)));
            }
            vec![(*x, arr(out.shape(), dx))]
        }
        Op::LogSumExpRows(x) => {
            let xv = v(x);
            let n = xv.cols();
            let mut dx = vec![T::zero(); xv.len()];
            for ((row, o), (&g, &lse)) in xv
                .data()
                .chunks(n)
                .zip(dx.chunks_mut(n))
                .zip(up.iter().zip(out.data()))
            {
                for (d, &r) in o.iter_mut().zip(row) {
                    *d = g * (r - lse).exp();
                }
            }
            vec![(*x, arr(xv.shape(), dx))]
        }
        Op::LayerNorm { x, gain, bias } => {
            let (xv, gv) = (v(x), v(gain));
            let n = xv.cols();
            let nf = T::lit(n as f64);
            let mut dx = Vec::with_capacity(xv.len());
            let mut dg = vec![T::zero(); n];
            let mut db = vec![T::zero(); n];
            let mut xhat = vec![T::zero(); n];
            let mut dxhat = vec![T::zero(); n];
            for (row, g) in xv.data().chunks(n).zip(up.chunks(n)) {
                let (mean, rstd) = kernels::row_moments(row);
                for j in 0..n {
                    xhat[j] = (row[j] - mean) * rstd;
                    dxhat[j] = g[j] * gv.data()[j];
                    dg[j] = dg[j] + g[j] * xhat[j];
                    db[j] = db[j] + g[j];
                }
                let mean_dxhat = dxhat.iter().copied().sum::<T>() / nf;
                let mean_dxhat_xhat = kernels::dot(&dxhat, &xhat) / nf;
                for j in 0..n {
                    dx.push(rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat));
                }
            }
            vec![
                (*x, arr(xv.shape(), dx)),
                (*gain, arr(&[n], dg)),
                (*bias, arr(&[n], db)),
            ]
        }
        Op::Embedding { table, ids } => {
            let t = v(table);
            let d = t.cols();
            let mut dt = vec![T::zero(); t.len()];
            for (row, &id) in up.chunks(d).zip(ids) {
                for (o, &g) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                    *o = *o + g;
                }
            }
            vec![(*table, arr(t.shape(), dt))]
        }
        Op::SliceRows { x, start, len } => {
            let xv = v(x);
            let n = xv.cols();
            let mut dx = vec![T::zero(); xv.len()];
            dx[start * n..(start + len) * n].copy_from_slice(up);
            vec![(*x, arr(xv.shape(), dx))]
        }
        Op::SliceCols { x, start, len } => {
            let xv = v(x);
            let n = xv.cols();
            let mut dx = vec![T::zero(); xv.len()];
            for (drow, grow) in dx.chunks_mut(n).zip(up.chunks(*len)) {
                drow[*start..start + len].copy_from_slice(grow);
            }
            vec![(*x, arr(xv.shape(), dx))]
        }
        Op::ConcatRows(xs) => {
            let mut offset = 0;
            xs.iter()
                .map(|x| {
                    let len = v(x).len();
                    let piece = arr(v(x).shape(), up[offset..offset + len].to_vec());
                    offset += len;
                    (*x, piece)
                })
                .collect()
        }
        Op::ConcatCols(xs) => {
            let total = out.cols();
            let mut col = 0;
            xs.iter()
                .map(|x| {
                    let w = v(x).cols();
                    let mut piece = Vec::with_capacity(v(x).len());
                    for row in up.chunks(total) {
                        piece.extend_from_slice(&row[col..col + w]);
                    }
                    col += w;
                    (*x, arr(v(x).shape(), piece))
                })
                .collect()
        }
        Op::GatherRows { x, indices } => {
            let xv = v(x);
            let n = xv.cols();
            let mut dx = vec![T::zero(); xv.len()];
            for (grow, &i) in up.chunks(n).zip(indices) {
                for (d, &g) in dx[i * n..(i + 1) * n].iter_mut().zip(grow) {
                    *d = *d + g;
                }
            }
            vec![(*x, arr(xv.shape(), dx))]
        }
        Op::L2NormalizeRows(x) => {
            let xv = v(x);
            let n = xv.cols();
            let mut dx = Vec::with_capacity(xv.len());
            for ((row, y), g) in xv.data().chunks(n).zip(out.data().chunks(n)).zip(up.chunks(n)) {
                let norm = kernels::dot(row, row).sqrt();
                let yg = kernels::dot(y, g);
                dx.extend(y.iter().zip(g).map(|(&yv, &gv)| (gv - yv * yg) / norm));
            }
            vec![(*x, arr(xv.shape(), dx))]
        }
        Op::Diagonal(x) => {
            let xv = v(x);
            let n = xv.cols();
            let mut dx = vec![T::zero(); xv.len()];
            for i in 0..n {
                dx[i * n + i] = up[i];
            }
            vec![(*x, arr(xv.shape(), dx))]
        }
        Op::Mean(x) => {
            let xv = v(x);
            let g = up[0] / T::lit(xv.len() as f64);
            vec![(*x, DenseArray::filled(xv.shape(), g))]
        }
        Op::Sum(x) => vec![(*x, DenseArray::filled(v(x).shape(), up[0]))],
    }
}
