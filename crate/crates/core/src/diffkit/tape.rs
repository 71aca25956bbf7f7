//! Operation tape with reverse-mode gradient evaluation.
//!
//! Every primitive is recorded as a node holding its operation and forward
//! value. Nodes are appended in evaluation order, so tape order is already a
//! topological order and the backward pass walks it in reverse.

use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Lower/upper clamp applied to the argument of `arccos`.
pub const ARCCOS_CLAMP: f64 = 1e-7;

/// Sentinel in a gather index meaning "emit zero".
pub const GATHER_ZERO: u32 = u32::MAX;

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
    MatMul {
        lhs: Var,
        rhs: Var,
        trans_lhs: bool,
        trans_rhs: bool,
    },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Arccos(Var),
    NormalizeRows(Var),
    MeanAxis { src: Var, axis: usize },
    SegmentMean { src: Var, segments: Vec<(usize, usize)> },
    Sum(Var),
    Gather { src: Var, index: Vec<u32> },
    ConcatRows(Var, Var),
    SelectMax { src: Var, groups: Vec<Vec<usize>> },
    SelectMin { src: Var, groups: Vec<Vec<usize>> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Arccos(_) => "arccos",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::MeanAxis { .. } => "mean_axis",
            Op::SegmentMean { .. } => "segment_mean",
            Op::Sum(_) => "sum",
            Op::Gather { .. } => "gather",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectMax { .. } => "select_max",
            Op::SelectMin { .. } => "select_min",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

/// Side data computed by the forward pass and reused by backward.
#[derive(Clone, Debug, Default)]
enum Aux {
    #[default]
    None,
    Selected(Vec<usize>),
    Norms(Vec<f64>),
    Probs(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    aux: Aux,
}

/// Records primitive operations and their values for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visit_order: Vec<usize>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> DiffError {
    DiffError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), DiffError> {
    if t.rank() != 2 {
        return Err(invalid(
            op,
            format!("expected a rank-2 tensor, got shape {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn select(values: &[f64], groups: &[Vec<usize>], want_max: bool) -> Vec<usize> {
    groups
        .iter()
        .map(|group| {
            let mut best = group[0];
            for &idx in &group[1..] {
                let (v, b) = (values[idx], values[best]);
                let better = if want_max { v > b } else { v < b };
                if better || (v == b && idx < best) {
                    best = idx;
                }
            }
            best
        })
        .collect()
}

/// Forward semantics of every primitive. Used both when recording and when replaying.
fn forward(op: &Op, nodes: &[Node]) -> Result<(Tensor, Aux), DiffError> {
    let val = |v: &Var| &nodes[v.0].value;
    let out = match op {
        Op::Leaf => unreachable!("leaves carry their own values"),
        Op::MatMul {
            lhs,
            rhs,
            trans_lhs,
            trans_rhs,
        } => {
            let (a, b) = (val(lhs), val(rhs));
            let a_shape = require_matrix("matmul", a)?;
            let b_shape = require_matrix("matmul", b)?;
            let (m, k) = if *trans_lhs {
                (a_shape.1, a_shape.0)
            } else {
                a_shape
            };
            let (k2, n) = if *trans_rhs {
                (b_shape.1, b_shape.0)
            } else {
                b_shape
            };
            if k != k2 {
                return Err(mismatch("matmul", a, b));
            }
            let mut data = vec![0.0; m * n];
            gemm(
                a.data(),
                a_shape,
                *trans_lhs,
                b.data(),
                b_shape,
                *trans_rhs,
                &mut data,
                false,
            );
            (Tensor::new(vec![m, n], data)?, Aux::None)
        }
        Op::Reshape(_) => unreachable!("reshape is recorded directly"),
        Op::Add(a, b) => {
            let (a, b) = (val(a), val(b));
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                (Tensor::new(a.shape().to_vec(), data)?, Aux::None)
            } else if a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0] {
                let n = b.numel();
                let mut out = a.clone();
                for row in out.data_mut().chunks_mut(n) {
                    for (x, y) in row.iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                (out, Aux::None)
            } else {
                return Err(mismatch("add", a, b));
            }
        }
        Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (val(a), val(b));
            let is_sub = matches!(op, Op::Sub(..));
            if a.shape() != b.shape() {
                return Err(mismatch(if is_sub { "sub" } else { "mul" }, a, b));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| if is_sub { x - y } else { x * y })
                .collect();
            (Tensor::new(a.shape().to_vec(), data)?, Aux::None)
        }
        Op::Scale(a, c) => (map(val(a), |x| x * c), Aux::None),
        Op::Shift(a, c) => (map(val(a), |x| x + c), Aux::None),
        Op::Relu(a) => (map(val(a), |x| if x > 0.0 { x } else { 0.0 }), Aux::None),
        Op::Tanh(a) => (map(val(a), f64::tanh), Aux::None),
        Op::Sigmoid(a) => (map(val(a), sigmoid), Aux::None),
        Op::Arccos(a) => (
            map(val(a), |x| {
                x.clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP).acos()
            }),
            Aux::None,
        ),
        Op::NormalizeRows(a) => {
            let a = val(a);
            if a.rank() > 2 || a.rank() == 0 {
                return Err(invalid("normalize_rows", "expected rank 1 or 2"));
            }
            let cols = a.cols();
            let mut out = a.clone();
            let mut norms = Vec::with_capacity(a.rows());
            for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    return Err(invalid(
                        "normalize_rows",
                        format!("row {r} has norm {norm}"),
                    ));
                }
                for v in row.iter_mut() {
                    *v /= norm;
                }
                norms.push(norm);
            }
            (out, Aux::Norms(norms))
        }
        Op::MeanAxis { src, axis } => {
            let a = val(src);
            let (m, n) = require_matrix("mean_axis", a)?;
            match axis {
                0 => {
                    let mut out = vec![0.0; n];
                    for row in a.data().chunks(n) {
                        for (o, v) in out.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out.iter_mut().for_each(|o| *o /= m as f64);
                    (Tensor::vector(out), Aux::None)
                }
                1 => {
                    let out = a
                        .data()
                        .chunks(n)
                        .map(|row| row.iter().sum::<f64>() / n as f64)
                        .collect();
                    (Tensor::vector(out), Aux::None)
                }
                _ => return Err(invalid("mean_axis", format!("axis {axis} out of range"))),
            }
        }
        Op::SegmentMean { src, segments } => {
            let a = val(src);
            let (m, n) = require_matrix("segment_mean", a)?;
            let mut out = vec![0.0; segments.len() * n];
            for (s, &(start, len)) in segments.iter().enumerate() {
                if len == 0 || start + len > m {
                    return Err(invalid(
                        "segment_mean",
                        format!("segment ({start}, {len}) invalid for {m} rows"),
                    ));
                }
                let dst = &mut out[s * n..(s + 1) * n];
                for row in a.data()[start * n..(start + len) * n].chunks(n) {
                    for (o, v) in dst.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                dst.iter_mut().for_each(|o| *o /= len as f64);
            }
            if segments.is_empty() {
                return Err(invalid("segment_mean", "no segments"));
            }
            (Tensor::new(vec![segments.len(), n], out)?, Aux::None)
        }
        Op::Sum(a) => (Tensor::scalar(val(a).sum()), Aux::None),
        Op::Gather { src, index } => {
            let a = val(src);
            let data = a.data();
            let out = index
                .iter()
                .map(|&i| if i == GATHER_ZERO { 0.0 } else { data[i as usize] })
                .collect::<Vec<_>>();
            // shape assigned by the recording method
            (Tensor::vector(out), Aux::None)
        }
        Op::ConcatRows(a, b) => {
            let (a, b) = (val(a), val(b));
            let (m, n) = require_matrix("concat_rows", a)?;
            let (p, n2) = require_matrix("concat_rows", b)?;
            if n != n2 {
                return Err(mismatch("concat_rows", a, b));
            }
            let mut data = Vec::with_capacity((m + p) * n);
            data.extend_from_slice(a.data());
            data.extend_from_slice(b.data());
            (Tensor::new(vec![m + p, n], data)?, Aux::None)
        }
        Op::SelectMax { src, groups } | Op::SelectMin { src, groups } => {
            let a = val(src);
            let want_max = matches!(op, Op::SelectMax { .. });
            let name = op.name();
            if groups.is_empty() {
                return Err(invalid(name, "no groups"));
            }
            for g in groups {
                if g.is_empty() {
                    return Err(invalid(name, "empty selection group"));
                }
                if let Some(&bad) = g.iter().find(|&&i| i >= a.numel()) {
                    return Err(invalid(
                        name,
                        format!("index {bad} out of range for {} elements", a.numel()),
                    ));
                }
            }
            let chosen = select(a.data(), groups, want_max);
            let out = chosen.iter().map(|&i| a.data()[i]).collect();
            (Tensor::vector(out), Aux::Selected(chosen))
        }
        Op::SoftmaxCrossEntropy { logits, targets } => {
            let a = val(logits);
            let (m, v) = require_matrix("softmax_cross_entropy", a)?;
            if targets.len() != m {
                return Err(invalid(
                    "softmax_cross_entropy",
                    format!("{} targets for {m} rows", targets.len()),
                ));
            }
            let mut probs = vec![0.0; m * v];
            let mut losses = Vec::with_capacity(m);
            for (r, (row, &t)) in a.data().chunks(v).zip(targets).enumerate() {
                if t >= v {
                    return Err(invalid(
                        "softmax_cross_entropy",
                        format!("target {t} out of range for {v} classes"),
                    ));
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let p = &mut probs[r * v..(r + 1) * v];
                let mut total = 0.0;
                for (pi, &x) in p.iter_mut().zip(row) {
                    *pi = (x - max).exp();
                    total += *pi;
                }
                p.iter_mut().for_each(|pi| *pi /= total);
                losses.push(total.ln() + max - row[t]);
            }
            (Tensor::vector(losses), Aux::Probs(probs))
        }
    };
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            aux: Aux::None,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var, DiffError> {
        let (value, aux) = forward(&op, &self.nodes)?;
        self.nodes.push(Node { op, value, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var, DiffError> {
        self.matmul_t(lhs, false, rhs, false)
    }

    /// Matrix product with optional logical transposes of either operand.
    pub fn matmul_t(
        &mut self,
        lhs: Var,
        trans_lhs: bool,
        rhs: Var,
        trans_rhs: bool,
    ) -> Result<Var, DiffError> {
        self.record(Op::MatMul {
            lhs,
            rhs,
            trans_lhs,
            trans_rhs,
        })
    }

    pub fn reshape(&mut self, src: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let value = self.value(src).clone().reshape(shape)?;
        self.nodes.push(Node {
            op: Op::Reshape(src),
            value,
            aux: Aux::None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Elementwise sum; `rhs` may also be a row vector broadcast over the rows of `lhs`.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var, DiffError> {
        self.record(Op::Add(lhs, rhs))
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var, DiffError> {
        self.record(Op::Sub(lhs, rhs))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var, DiffError> {
        self.record(Op::Mul(lhs, rhs))
    }

    pub fn scale(&mut self, src: Var, factor: f64) -> Result<Var, DiffError> {
        self.record(Op::Scale(src, factor))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, src: Var, offset: f64) -> Result<Var, DiffError> {
        self.record(Op::Shift(src, offset))
    }

    pub fn relu(&mut self, src: Var) -> Result<Var, DiffError> {
        self.record(Op::Relu(src))
    }

    /// `max(0, x)`; identical to [`Tape::relu`], named for loss code.
    pub fn hinge(&mut self, src: Var) -> Result<Var, DiffError> {
        self.record(Op::Relu(src))
    }

    pub fn tanh(&mut self, src: Var) -> Result<Var, DiffError> {
        self.record(Op::Tanh(src))
    }

    pub fn sigmoid(&mut self, src: Var) -> Result<Var, DiffError> {
        self.record(Op::Sigmoid(src))
    }

    /// `arccos` with its argument clamped to `[-1 + 1e-7, 1 - 1e-7]`.
    pub fn arccos(&mut self, src: Var) -> Result<Var, DiffError> {
        self.record(Op::Arccos(src))
    }

    /// Divides every row by its L2 norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, src: Var) -> Result<Var, DiffError> {
        self.record(Op::NormalizeRows(src))
    }

    pub fn mean_axis(&mut self, src: Var, axis: usize) -> Result<Var, DiffError> {
        self.record(Op::MeanAxis { src, axis })
    }

    /// Row means over contiguous `(start, len)` row ranges of a matrix.
    pub fn segment_mean(
        &mut self,
        src: Var,
        segments: Vec<(usize, usize)>,
    ) -> Result<Var, DiffError> {
        self.record(Op::SegmentMean { src, segments })
    }

    pub fn sum(&mut self, src: Var) -> Result<Var, DiffError> {
        self.record(Op::Sum(src))
    }

    pub fn mean_all(&mut self, src: Var) -> Result<Var, DiffError> {
        let n = self.value(src).numel() as f64;
        let s = self.sum(src)?;
        self.scale(s, 1.0 / n)
    }

    /// Picks elements by flat index into a new tensor of `shape`.
    /// [`GATHER_ZERO`] entries produce zeros.
    pub fn gather(
        &mut self,
        src: Var,
        index: Vec<u32>,
        shape: Vec<usize>,
    ) -> Result<Var, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != index.len() || shape.iter().any(|&d| d == 0) {
            return Err(invalid(
                "gather",
                format!("{} indices cannot fill shape {shape:?}", index.len()),
            ));
        }
        let n = self.value(src).numel();
        if let Some(&bad) = index
            .iter()
            .find(|&&i| i != GATHER_ZERO && i as usize >= n)
        {
            return Err(invalid(
                "gather",
                format!("index {bad} out of range for {n} elements"),
            ));
        }
        let var = self.record(Op::Gather { src, index })?;
        let node = &mut self.nodes[var.0];
        node.value = std::mem::replace(&mut node.value, Tensor::scalar(0.0)).reshape(shape)?;
        Ok(var)
    }

    /// Selects whole rows of a matrix.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var, DiffError> {
        let (m, n) = require_matrix("gather_rows", self.value(src))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(invalid(
                "gather_rows",
                format!("row {bad} out of range for {m} rows"),
            ));
        }
        let mut index = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            index.extend((r * n..(r + 1) * n).map(|i| i as u32));
        }
        self.gather(src, index, vec![rows.len(), n])
    }

    pub fn concat_rows(&mut self, top: Var, bottom: Var) -> Result<Var, DiffError> {
        self.record(Op::ConcatRows(top, bottom))
    }

    /// Maximum of each index group (flat indices into `src`); ties go to the lowest index.
    pub fn select_max(&mut self, src: Var, groups: Vec<Vec<usize>>) -> Result<Var, DiffError> {
        self.record(Op::SelectMax { src, groups })
    }

    /// Minimum of each index group (flat indices into `src`); ties go to the lowest index.
    pub fn select_min(&mut self, src: Var, groups: Vec<Vec<usize>>) -> Result<Var, DiffError> {
        self.record(Op::SelectMin { src, groups })
    }

    /// Per-row `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
    ) -> Result<Var, DiffError> {
        self.record(Op::SoftmaxCrossEntropy { logits, targets })
    }

    /// Flat indices chosen by a selection node.
    pub fn selected(&self, var: Var) -> Option<&[usize]> {
        match &self.nodes[var.0].aux {
            Aux::Selected(s) => Some(s),
            _ => None,
        }
    }

    /// Re-evaluates every recorded node from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>, DiffError> {
        let mut nodes: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (value, aux) = match &node.op {
                Op::Leaf => (node.value.clone(), Aux::None),
                Op::Reshape(src) => (
                    nodes[src.0]
                        .value
                        .clone()
                        .reshape(node.value.shape().to_vec())?,
                    Aux::None,
                ),
                Op::Gather { .. } => {
                    let (v, aux) = forward(&node.op, &nodes)?;
                    (v.reshape(node.value.shape().to_vec())?, aux)
                }
                op => forward(op, &nodes)?,
            };
            nodes.push(Node {
                op: node.op.clone(),
                value,
                aux,
            });
        }
        Ok(nodes.into_iter().map(|n| n.value).collect())
    }

    /// Reverse-mode gradients of a one-element output with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients, DiffError> {
        let out = self.value(output);
        if !out.is_scalar_like() {
            return Err(DiffError::NonScalarOutput {
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));
        let mut visit_order = Vec::new();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            visit_order.push(i);
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visit_order,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contribution: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                lhs,
                rhs,
                trans_lhs,
                trans_rhs,
            } => {
                let (a, b) = (val(*lhs), val(*rhs));
                let a_shape = (a.shape()[0], a.shape()[1]);
                let b_shape = (b.shape()[0], b.shape()[1]);
                let g_shape = (g.shape()[0], g.shape()[1]);
                let mut da = vec![0.0; a.numel()];
                if *trans_lhs {
                    // stored A is k×m: dA = B_logical · gᵀ
                    gemm(b.data(), b_shape, *trans_rhs, g.data(), g_shape, true, &mut da, false);
                } else {
                    gemm(g.data(), g_shape, false, b.data(), b_shape, !*trans_rhs, &mut da, false);
                }
                let mut db = vec![0.0; b.numel()];
                if *trans_rhs {
                    // stored B is n×k: dB = gᵀ · A_logical
                    gemm(g.data(), g_shape, true, a.data(), a_shape, *trans_lhs, &mut db, false);
                } else {
                    gemm(a.data(), a_shape, !*trans_lhs, g.data(), g_shape, false, &mut db, false);
                }
                acc(*lhs, Tensor::new(a.shape().to_vec(), da).expect("shape"));
                acc(*rhs, Tensor::new(b.shape().to_vec(), db).expect("shape"));
            }
            Op::Reshape(src) => {
                let shaped = g.clone().reshape(val(*src).shape().to_vec()).expect("shape");
                acc(*src, shaped);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                let bv = val(*b);
                if bv.shape() == g.shape() {
                    acc(*b, g.clone());
                } else {
                    let n = bv.numel();
                    let mut col = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (c, v) in col.iter_mut().zip(row) {
                            *c += v;
                        }
                    }
                    acc(*b, Tensor::new(bv.shape().to_vec(), col).expect("shape"));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), ga).expect("shape"));
                acc(*b, Tensor::new(g.shape().to_vec(), gb).expect("shape"));
            }
            Op::Scale(a, c) => acc(*a, map(g, |x| x * c)),
            Op::Shift(a, _) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Tanh(a) | Op::Sigmoid(a) => {
                let is_tanh = matches!(node.op, Op::Tanh(_));
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gi, &y)| if is_tanh { gi * (1.0 - y * y) } else { gi * y * (1.0 - y) })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Arccos(a) => {
                let (lo, hi) = (-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP);
                let data = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gi, &x)| {
                        if x > lo && x < hi {
                            -gi / (1.0 - x * x).sqrt()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::NormalizeRows(a) => {
                let Aux::Norms(norms) = &node.aux else {
                    unreachable!()
                };
                let y = &node.value;
                let cols = y.cols();
                let mut data = vec![0.0; y.numel()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        data[r * cols + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                acc(*a, Tensor::new(y.shape().to_vec(), data).expect("shape"));
            }
            Op::MeanAxis { src, axis } => {
                let s = val(*src);
                let (m, n) = (s.shape()[0], s.shape()[1]);
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[i * n + j] = if *axis == 0 {
                            g.data()[j] / m as f64
                        } else {
                            g.data()[i] / n as f64
                        };
                    }
                }
                acc(*src, Tensor::new(vec![m, n], data).expect("shape"));
            }
            Op::SegmentMean { src, segments } => {
                let s = val(*src);
                let n = s.shape()[1];
                let mut data = vec![0.0; s.numel()];
                for (k, &(start, len)) in segments.iter().enumerate() {
                    let gk = &g.data()[k * n..(k + 1) * n];
                    for row in data[start * n..(start + len) * n].chunks_mut(n) {
                        for (d, gv) in row.iter_mut().zip(gk) {
                            *d += gv / len as f64;
                        }
                    }
                }
                acc(*src, Tensor::new(s.shape().to_vec(), data).expect("shape"));
            }
            Op::Sum(a) => {
                let s = val(*a);
                acc(*a, Tensor::filled(s.shape(), g.data()[0]));
            }
            Op::Gather { src, index } => {
                let s = val(*src);
                let mut data = vec![0.0; s.numel()];
                for (&i, gv) in index.iter().zip(g.data()) {
                    if i != GATHER_ZERO {
                        data[i as usize] += gv;
                    }
                }
                acc(*src, Tensor::new(s.shape().to_vec(), data).expect("shape"));
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).numel();
                let (top, bottom) = g.data().split_at(split);
                acc(*a, Tensor::new(val(*a).shape().to_vec(), top.to_vec()).expect("shape"));
                acc(*b, Tensor::new(val(*b).shape().to_vec(), bottom.to_vec()).expect("shape"));
            }
            Op::SelectMax { src, .. } | Op::SelectMin { src, .. } => {
                let Aux::Selected(chosen) = &node.aux else {
                    unreachable!()
                };
                let s = val(*src);
                let mut data = vec![0.0; s.numel()];
                for (&idx, gv) in chosen.iter().zip(g.data()) {
                    data[idx] += gv;
                }
                acc(*src, Tensor::new(s.shape().to_vec(), data).expect("shape"));
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let Aux::Probs(probs) = &node.aux else {
                    unreachable!()
                };
                let l = val(*logits);
                let v = l.shape()[1];
                let mut data = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    data[r * v + t] -= 1.0;
                    let gr = g.data()[r];
                    data[r * v..(r + 1) * v].iter_mut().for_each(|d| *d *= gr);
                }
                acc(*logits, Tensor::new(l.shape().to_vec(), data).expect("shape"));
            }
        }
    }
}
