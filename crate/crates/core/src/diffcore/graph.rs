use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{gemm, log_softmax_rows, softmax_rows};
use super::{DiffError, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input { name: String },
    Param { name: String, value: Arc<Tensor> },
    Constant(Arc<Tensor>),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    TopKMean(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    Transpose(NodeId),
    Concat(Vec<NodeId>, usize),
    SliceCols(NodeId, usize, usize),
    Reshape(NodeId),
    NormalizeRows(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Ln(_) => "ln",
            Op::Exp(_) => "exp",
            Op::Clamp(..) => "clamp",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::TopKMean(..) => "topk_mean",
            Op::GatherRows(..) => "gather_rows",
            Op::Transpose(_) => "transpose",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(_) => "reshape",
            Op::NormalizeRows(_) => "normalize_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    /// Some tracked leaf (parameter or tracked input) feeds this node.
    tracked: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<String, Tensor>,
}

/// A define-then-run computation graph.
///
/// Nodes are appended in topological order by the builder methods; shapes are
/// checked at build time. [`Graph::forward`] evaluates every node from named
/// input feeds, after which [`Graph::backward`] propagates a seed gradient
/// from the designated output back to parameters and tracked inputs.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Arc<Tensor>>>,
    // indices picked by each TopKMean node during the last forward
    picks: Vec<Vec<usize>>,
    inputs: BTreeMap<String, NodeId>,
    params: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
    evaluated: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, tracked: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape, tracked });
        self.values.push(None);
        self.picks.push(Vec::new());
        self.evaluated = false;
        id
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn mismatch(op: &'static str, detail: String) -> DiffError {
        DiffError::ShapeMismatch { op, detail }
    }

    // ---- leaves -------------------------------------------------------

    /// Declares a named input that receives no gradient.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.add_input(name, shape, false)
    }

    /// Declares a named input whose gradient is reported by backward.
    pub fn input_tracked(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.add_input(name, shape, true)
    }

    fn add_input(&mut self, name: &str, shape: &[usize], tracked: bool) -> Result<NodeId, DiffError> {
        if self.inputs.contains_key(name) || self.params.contains_key(name) {
            return Err(DiffError::DuplicateName(name.to_string()));
        }
        if shape.contains(&0) {
            return Err(Self::mismatch("input", format!("zero extent in {shape:?}")));
        }
        let id = self.push(Op::Input { name: name.to_string() }, shape.to_vec(), tracked);
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a named trainable leaf. The tensor is shared, not copied.
    pub fn param(&mut self, name: &str, value: Arc<Tensor>) -> Result<NodeId, DiffError> {
        if self.inputs.contains_key(name) || self.params.contains_key(name) {
            return Err(DiffError::DuplicateName(name.to_string()));
        }
        let shape = value.shape().to_vec();
        let id = self.push(Op::Param { name: name.to_string(), value }, shape, true);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape, false)
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        let id = self.params.get(name)?;
        match &self.nodes[id.0].op {
            Op::Param { value, .. } => Some(value),
            _ => None,
        }
    }

    /// Replaces a parameter's value; used by finite-difference probes.
    pub(crate) fn set_param_value(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        let id = *self
            .params
            .get(name)
            .ok_or_else(|| DiffError::UnknownName(name.to_string()))?;
        if value.shape() != self.nodes[id.0].shape.as_slice() {
            return Err(Self::mismatch("param", format!("new value shape {:?}", value.shape())));
        }
        if let Op::Param { value: slot, .. } = &mut self.nodes[id.0].op {
            *slot = Arc::new(value);
        }
        self.evaluated = false;
        Ok(())
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    // ---- primitives ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]], t))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let s = self.same_shape("add", a, b)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Add(a, b), s, t))
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sr) = (self.shape(a).to_vec(), self.shape(row).to_vec());
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            return Err(Self::mismatch("add_row", format!("{sa:?} + {sr:?}")));
        }
        let t = self.tracked(a) || self.tracked(row);
        Ok(self.push(Op::AddRow(a, row), sa, t))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let s = self.same_shape("sub", a, b)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Sub(a, b), s, t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let s = self.same_shape("mul", a, b)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Mul(a, b), s, t))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        let t = self.tracked(a);
        self.push(op, s, t)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(Op::Scale(a, factor), a)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> NodeId {
        self.unary(Op::AddScalar(a, offset), a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a), a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Ln(a), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through inside the range.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(Op::Clamp(a, lo, hi), a)
    }

    fn require_rank(&self, op: &'static str, a: NodeId, min: usize, max: usize) -> Result<(), DiffError> {
        let r = self.shape(a).len();
        if r < min || r > max {
            return Err(Self::mismatch(op, format!("rank {r} not in [{min}, {max}]")));
        }
        Ok(())
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.require_rank("softmax", a, 1, 2)?;
        Ok(self.unary(Op::Softmax(a), a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.require_rank("log_softmax", a, 1, 2)?;
        Ok(self.unary(Op::LogSoftmax(a), a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let t = self.tracked(a);
        self.push(Op::Sum(a), Vec::new(), t)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.tracked(a);
        self.push(Op::Mean(a), Vec::new(), t)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.require_rank("sum_last", a, 1, 2)?;
        let mut s = self.shape(a).to_vec();
        s.pop();
        let t = self.tracked(a);
        Ok(self.push(Op::SumLast(a), s, t))
    }

    /// Mean of the `k` largest entries along the last axis (`k = 1` is max).
    /// Ties prefer the lower index.
    pub fn topk_mean(&mut self, a: NodeId, k: usize) -> Result<NodeId, DiffError> {
        self.require_rank("topk_mean", a, 1, 2)?;
        let mut s = self.shape(a).to_vec();
        let last = s.pop().unwrap_or(1);
        if k == 0 || k > last {
            return Err(Self::mismatch("topk_mean", format!("k={k} with last axis {last}")));
        }
        let t = self.tracked(a);
        Ok(self.push(Op::TopKMean(a, k), s, t))
    }

    /// Selects rows (or elements of a vector) by index; repeats allowed.
    pub fn gather_rows(&mut self, table: NodeId, rows: Vec<usize>) -> Result<NodeId, DiffError> {
        self.require_rank("gather_rows", table, 1, 2)?;
        let s = self.shape(table).to_vec();
        if rows.is_empty() {
            return Err(Self::mismatch("gather_rows", "empty index list".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Self::mismatch("gather_rows", format!("row {bad} out of {}", s[0])));
        }
        let mut out = s.clone();
        out[0] = rows.len();
        let t = self.tracked(table);
        Ok(self.push(Op::GatherRows(table, rows), out, t))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.require_rank("transpose", a, 2, 2)?;
        let s = self.shape(a);
        let out = vec![s[1], s[0]];
        let t = self.tracked(a);
        Ok(self.push(Op::Transpose(a), out, t))
    }

    /// Concatenates rank-1 or rank-2 tensors along `axis`.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        let first = parts
            .first()
            .ok_or_else(|| Self::mismatch("concat", "no parts".into()))?;
        let base = self.shape(*first).to_vec();
        if base.is_empty() || base.len() > 2 || axis >= base.len() {
            return Err(Self::mismatch("concat", format!("axis {axis} on {base:?}")));
        }
        let mut out = base.clone();
        out[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Self::mismatch("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            out[axis] += s[axis];
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Op::Concat(parts.to_vec(), axis), out, t))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        self.require_rank("slice_cols", a, 2, 2)?;
        let s = self.shape(a).to_vec();
        if len == 0 || start + len > s[1] {
            return Err(Self::mismatch("slice_cols", format!("{start}+{len} of {}", s[1])));
        }
        let t = self.tracked(a);
        Ok(self.push(Op::SliceCols(a, start, len), vec![s[0], len], t))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        if numel(shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(Self::mismatch("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let t = self.tracked(a);
        Ok(self.push(Op::Reshape(a), shape.to_vec(), t))
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.require_rank("normalize_rows", a, 2, 2)?;
        Ok(self.unary(Op::NormalizeRows(a), a))
    }

    // ---- evaluation ---------------------------------------------------

    /// Evaluates every node. Feeds must cover each declared input exactly.
    pub fn forward(&mut self, feeds: &[(&str, &Tensor)]) -> Result<(), DiffError> {
        self.evaluated = false;
        let mut by_name: BTreeMap<&str, &Tensor> = BTreeMap::new();
        for &(name, t) in feeds {
            if !self.inputs.contains_key(name) {
                return Err(DiffError::UnknownName(name.to_string()));
            }
            by_name.insert(name, t);
        }
        for i in 0..self.nodes.len() {
            let value = self.eval_node(i, &by_name)?;
            if !value.is_finite() {
                return Err(DiffError::NonFinite {
                    op: self.nodes[i].op.name(),
                    node: i,
                });
            }
            self.values[i] = Some(value);
        }
        self.evaluated = true;
        Ok(())
    }

    /// Value of a node after [`Graph::forward`].
    pub fn value(&self, id: NodeId) -> Result<&Tensor, DiffError> {
        if !self.evaluated {
            return Err(DiffError::NotEvaluated);
        }
        Ok(self.values[id.0].as_deref().expect("evaluated graph has all values"))
    }

    pub fn output_value(&self) -> Result<&Tensor, DiffError> {
        let out = self.output.ok_or(DiffError::NoOutput)?;
        self.value(out)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_deref().expect("operand evaluated before use")
    }

    fn eval_node(&mut self, i: usize, feeds: &BTreeMap<&str, &Tensor>) -> Result<Arc<Tensor>, DiffError> {
        let shape = self.nodes[i].shape.clone();
        let out = match &self.nodes[i].op {
            Op::Input { name } => {
                let t = feeds
                    .get(name.as_str())
                    .ok_or_else(|| DiffError::MissingInput(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(Self::mismatch(
                        "input",
                        format!("`{name}` declared {shape:?}, fed {:?}", t.shape()),
                    ));
                }
                return Ok(Arc::new((*t).clone()));
            }
            Op::Param { value, .. } => return Ok(Arc::clone(value)),
            Op::Constant(value) => return Ok(Arc::clone(value)),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
                out
            }
            Op::Add(a, b) => zip_with(self.val(*a), self.val(*b), |x, y| x + y),
            Op::Sub(a, b) => zip_with(self.val(*a), self.val(*b), |x, y| x - y),
            Op::Mul(a, b) => zip_with(self.val(*a), self.val(*b), |x, y| x * y),
            Op::AddRow(a, r) => {
                let (a, r) = (self.val(*a), self.val(*r));
                let n = r.numel();
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(idx, v)| v + r.data()[idx % n])
                    .collect()
            }
            Op::Scale(a, f) => map(self.val(*a), |x| x * f),
            Op::AddScalar(a, c) => map(self.val(*a), |x| x + c),
            Op::Relu(a) => map(self.val(*a), |x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid(a) => map(self.val(*a), sigmoid),
            Op::Ln(a) => map(self.val(*a), f64::ln),
            Op::Exp(a) => map(self.val(*a), f64::exp),
            Op::Clamp(a, lo, hi) => map(self.val(*a), |x| x.clamp(*lo, *hi)),
            Op::Softmax(a) => {
                let a = self.val(*a);
                softmax_rows(a.data(), a.cols())
            }
            Op::LogSoftmax(a) => {
                let a = self.val(*a);
                log_softmax_rows(a.data(), a.cols())
            }
            Op::Sum(a) => vec![self.val(*a).data().iter().sum()],
            Op::Mean(a) => {
                let a = self.val(*a);
                vec![a.data().iter().sum::<f64>() / a.numel() as f64]
            }
            Op::SumLast(a) => {
                let a = self.val(*a);
                a.data().chunks(a.cols()).map(|r| r.iter().sum()).collect()
            }
            Op::TopKMean(a, k) => {
                let k = *k;
                let a = self.val(*a);
                let c = a.cols();
                let mut picks = Vec::with_capacity(a.rows() * k);
                let mut out = Vec::new();
                for (r, row) in a.data().chunks(c).enumerate() {
                    let mut order: Vec<usize> = (0..c).collect();
                    // stable: equal values keep ascending index order
                    order.sort_by(|&x, &y| row[y].total_cmp(&row[x]));
                    let top = &order[..k];
                    out.push(top.iter().map(|&j| row[j]).sum::<f64>() / k as f64);
                    picks.extend(top.iter().map(|&j| r * c + j));
                }
                self.picks[i] = picks;
                out
            }
            Op::GatherRows(t, rows) => {
                let t = self.val(*t);
                let w = if t.rank() == 1 { 1 } else { t.cols() };
                let mut out = Vec::with_capacity(rows.len() * w);
                for &r in rows {
                    out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
                out
            }
            Op::Transpose(a) => {
                let a = self.val(*a);
                transpose(a.data(), a.shape()[0], a.shape()[1])
            }
            Op::Concat(parts, axis) => {
                let parts: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                concat_values(&parts, *axis, &shape)
            }
            Op::SliceCols(a, start, len) => {
                let a = self.val(*a);
                let c = a.cols();
                a.data()
                    .chunks(c)
                    .flat_map(|row| row[*start..*start + *len].iter().copied())
                    .collect()
            }
            Op::Reshape(a) => self.val(*a).data().to_vec(),
            Op::NormalizeRows(a) => {
                let a = self.val(*a);
                let c = a.cols();
                let mut out = Vec::with_capacity(a.numel());
                for (r, row) in a.data().chunks(c).enumerate() {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        return Err(DiffError::ZeroNorm { row: r });
                    }
                    out.extend(row.iter().map(|v| v / norm));
                }
                out
            }
        };
        Ok(Arc::new(Tensor::from_parts(shape, out)))
    }

    /// Backpropagates `seed` from the designated output.
    pub fn backward(&self, seed: &Tensor) -> Result<Gradients, DiffError> {
        let out = self.output.ok_or(DiffError::NoOutput)?;
        self.backward_from(&[(out, seed)])
    }

    /// Backpropagates several seeds at once (gradients add).
    pub fn backward_from(&self, seeds: &[(NodeId, &Tensor)]) -> Result<Gradients, DiffError> {
        if !self.evaluated {
            return Err(DiffError::NotEvaluated);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for &(id, seed) in seeds {
            if seed.shape() != self.shape(id) {
                return Err(Self::mismatch(
                    "backward",
                    format!("seed {:?} for node of shape {:?}", seed.shape(), self.shape(id)),
                ));
            }
            accumulate(&mut grads[id.0], seed.data());
        }
        let mut result = Gradients::default();
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFinite {
                    op: self.nodes[i].op.name(),
                    node: i,
                });
            }
            self.propagate(i, g, &mut grads, &mut result)?;
        }
        Ok(result)
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        result: &mut Gradients,
    ) -> Result<(), DiffError> {
        let node = &self.nodes[i];
        let shape = node.shape.clone();
        let y = self.values[i].as_deref().expect("evaluated");
        let send = |grads: &mut [Option<Vec<f64>>], id: NodeId, d: Vec<f64>| {
            if self.nodes[id.0].tracked {
                accumulate(&mut grads[id.0], &d);
            }
        };
        match &node.op {
            Op::Input { name } => {
                result.inputs.insert(name.clone(), Tensor::from_parts(shape, g));
            }
            Op::Param { name, .. } => {
                result.params.insert(name.clone(), Tensor::from_parts(shape, g));
            }
            Op::Constant(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.tracked(*a) {
                    let da = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(m, n, k, &g, false, bv.data(), true, da, 1.0);
                }
                if self.tracked(*b) {
                    let db = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm(k, m, n, av.data(), true, &g, false, db, 1.0);
                }
            }
            Op::Add(a, b) => {
                send(grads, *a, g.clone());
                send(grads, *b, g);
            }
            Op::Sub(a, b) => {
                send(grads, *b, g.iter().map(|v| -v).collect());
                send(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                send(grads, *a, g.iter().zip(bv.data()).map(|(d, x)| d * x).collect());
                send(grads, *b, g.iter().zip(av.data()).map(|(d, x)| d * x).collect());
            }
            Op::AddRow(a, r) => {
                let n = self.shape(*r)[0];
                let mut dr = vec![0.0; n];
                for row in g.chunks(n) {
                    for (acc, v) in dr.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                send(grads, *r, dr);
                send(grads, *a, g);
            }
            Op::Scale(a, f) => send(grads, *a, g.iter().map(|d| d * f).collect()),
            Op::AddScalar(a, _) => send(grads, *a, g),
            Op::Relu(a) => {
                let x = self.val(*a);
                let d = g
                    .iter()
                    .zip(x.data())
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                send(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(y.data()).map(|(d, s)| d * s * (1.0 - s)).collect();
                send(grads, *a, d);
            }
            Op::Ln(a) => {
                let x = self.val(*a);
                send(grads, *a, g.iter().zip(x.data()).map(|(d, x)| d / x).collect());
            }
            Op::Exp(a) => {
                send(grads, *a, g.iter().zip(y.data()).map(|(d, e)| d * e).collect());
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.val(*a);
                let d = g
                    .iter()
                    .zip(x.data())
                    .map(|(d, x)| if x >= lo && x <= hi { *d } else { 0.0 })
                    .collect();
                send(grads, *a, d);
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                }
                send(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let c = y.cols();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    d.extend(gr.iter().zip(yr).map(|(gv, lv)| gv - lv.exp() * total));
                }
                send(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = numel(self.shape(*a));
                send(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = numel(self.shape(*a));
                send(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumLast(a) => {
                let c = *self.shape(*a).last().unwrap_or(&1);
                send(grads, *a, g.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect());
            }
            Op::TopKMean(a, k) => {
                let n = numel(self.shape(*a));
                let mut d = vec![0.0; n];
                for (r, gv) in g.iter().enumerate() {
                    for &flat in &self.picks[i][r * k..(r + 1) * k] {
                        d[flat] += gv / *k as f64;
                    }
                }
                send(grads, *a, d);
            }
            Op::GatherRows(t, rows) => {
                let ts = self.shape(*t);
                let w = if ts.len() == 1 { 1 } else { ts[1] };
                let mut d = vec![0.0; numel(ts)];
                for (src, &r) in g.chunks(w).zip(rows) {
                    for (acc, v) in d[r * w..(r + 1) * w].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
                send(grads, *t, d);
            }
            Op::Transpose(a) => {
                send(grads, *a, transpose(&g, shape[0], shape[1]));
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let d = if *axis == 0 {
                        let len = numel(&ps);
                        let d = g[offset..offset + len].to_vec();
                        offset += len;
                        d
                    } else {
                        let total = shape[1];
                        let d = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + ps[1]].iter().copied())
                            .collect();
                        offset += ps[1];
                        d
                    };
                    send(grads, p, d);
                }
            }
            Op::SliceCols(a, start, len) => {
                let sa = self.shape(*a);
                let (rows, cols) = (sa[0], sa[1]);
                let mut d = vec![0.0; rows * cols];
                for (r, src) in g.chunks(*len).enumerate() {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(src);
                }
                send(grads, *a, d);
            }
            Op::Reshape(a) => send(grads, *a, g),
            Op::NormalizeRows(a) => {
                let x = self.val(*a);
                let c = x.cols();
                let mut d = Vec::with_capacity(g.len());
                for ((gr, yr), xr) in g.chunks(c).zip(y.data().chunks(c)).zip(x.data().chunks(c)) {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / norm));
                }
                send(grads, *a, d);
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, d: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(d) {
                *a += v;
            }
        }
        None => *slot = Some(d.to_vec()),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data().iter().map(|&x| f(x)).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn concat_values(parts: &[&Tensor], axis: usize, out_shape: &[usize]) -> Vec<f64> {
    if axis == 0 {
        return parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    }
    let rows = out_shape[0];
    let mut out = Vec::with_capacity(numel(out_shape));
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    out
}
