use std::cell::{Ref, RefCell};
use std::fmt;

use super::matrix::{gemm, GemmOperand};
use super::{Matrix, TensorError};

/// Backward rule for an operation implemented outside this module.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the tape only needs the vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, in input order.
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad_output: &Matrix) -> Vec<Matrix>;
}

/// How the right operand of a binary elementwise op is broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// 1 x cols, repeated over rows.
    Row,
    /// rows x 1, repeated over columns.
    Col,
    Scalar,
}

impl Broadcast {
    fn resolve(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<Self, TensorError> {
        if a == b {
            Ok(Self::Same)
        } else if b == (1, 1) {
            Ok(Self::Scalar)
        } else if b == (1, a.1) {
            Ok(Self::Row)
        } else if b == (a.0, 1) {
            Ok(Self::Col)
        } else {
            Err(TensorError::shape(op, a, b))
        }
    }

    #[inline]
    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Self::Same => r * cols + c,
            Self::Row => c,
            Self::Col => r,
            Self::Scalar => 0,
        }
    }

    /// Reduce a full-shape gradient onto the broadcast operand's shape.
    fn reduce(self, g: &Matrix, shape: (usize, usize)) -> Matrix {
        if self == Self::Same {
            return g.clone();
        }
        let mut out = Matrix::zeros(shape.0, shape.1);
        let cols = g.cols();
        for r in 0..g.rows() {
            for c in 0..cols {
                out.as_mut_slice()[self.index(r, c, cols)] += g.get(r, c);
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Abs(usize),
    ClampMin(usize, f64),
    Powf(usize, f64),
    SoftmaxRows(usize),
    CumsumRows(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Max(usize, usize),
    Pick(usize, Vec<usize>),
    SelectRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

struct Node {
    value: Matrix,
    requires_grad: bool,
    op: Op,
    /// Accumulated gradient; only populated for leaves.
    grad: Option<Matrix>,
}

/// Records operations in execution order so gradients can be replayed in
/// reverse. One tape per batch; drop it after the optimizer step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, requires_grad: bool, op: Op) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
            grad: None,
        });
        Tensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Register an input. Non-finite values are rejected.
    pub fn leaf(&self, value: Matrix, requires_grad: bool) -> Result<Tensor<'_>, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                context: "leaf value".into(),
            });
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Trainable leaf.
    pub fn param(&self, value: Matrix) -> Result<Tensor<'_>, TensorError> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Matrix) -> Result<Tensor<'_>, TensorError> {
        self.leaf(value, false)
    }

    /// Record an externally computed op. `output` must be the forward value of
    /// `op` applied to `inputs`.
    pub fn custom<'t>(
        &'t self,
        op: Box<dyn CustomOp>,
        inputs: &[Tensor<'t>],
        output: Matrix,
    ) -> Result<Tensor<'t>, TensorError> {
        for t in inputs {
            self.check_owner(*t)?;
        }
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let ids = inputs.iter().map(|t| t.id).collect();
        Ok(self.push(output, requires_grad, Op::Custom(ids, op)))
    }

    /// Stack tensors with a common column count vertically.
    pub fn concat_rows<'t>(&'t self, parts: &[Tensor<'t>]) -> Result<Tensor<'t>, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_rows" })?;
        let cols = first.shape().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for t in parts {
            self.check_owner(*t)?;
            let v = t.value_ref();
            if v.cols() != cols {
                return Err(TensorError::shape("concat_rows", first.shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let requires_grad = parts.iter().any(|t| t.requires_grad());
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(
            value,
            requires_grad,
            Op::ConcatRows(parts.iter().map(|t| t.id).collect()),
        ))
    }

    fn check_owner(&self, t: Tensor<'_>) -> Result<(), TensorError> {
        if std::ptr::eq(t.tape, self) {
            Ok(())
        } else {
            Err(TensorError::ForeignTensor)
        }
    }

    /// Clear accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Accumulate d(root)/d(leaf) into every leaf that requires a gradient.
    pub fn backward(&self, root: Tensor<'_>) -> Result<(), TensorError> {
        self.check_owner(root)?;
        let shape = root.shape();
        if shape != (1, 1) {
            return Err(TensorError::NotScalar { shape });
        }
        let mut grads: Vec<Option<Matrix>> = {
            let nodes = self.nodes.borrow();
            if !nodes[root.id].requires_grad {
                return Ok(());
            }
            let mut grads: Vec<Option<Matrix>> = (0..=root.id).map(|_| None).collect();
            grads[root.id] = Some(Matrix::scalar(1.0));
            for id in (0..=root.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if matches!(node.op, Op::Leaf) {
                    grads[id] = Some(g);
                    continue;
                }
                propagate(&nodes, node, &g, &mut grads);
            }
            grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in grads.iter_mut().enumerate() {
            let node = &mut nodes[id];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            if let Some(g) = g.take() {
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], nodes: &[Node], id: usize, g: Matrix) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(x: &Matrix, g: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = x
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(&x, &g)| f(x, g))
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

fn propagate(nodes: &[Node], node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
    let value = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (value(*a), value(*b));
            if nodes[*a].requires_grad {
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                gemm(GemmOperand::plain(g), GemmOperand::transposed(vb), &mut ga, 0.0);
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                gemm(GemmOperand::transposed(va), GemmOperand::plain(g), &mut gb, 0.0);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::AddBias(a, bias) => {
            accumulate(grads, nodes, *a, g.clone());
            let vb = value(*bias);
            accumulate(grads, nodes, *bias, Broadcast::Row.reduce(g, vb.shape()));
        }
        Op::Add(a, b, bc) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, bc.reduce(g, value(*b).shape()));
        }
        Op::Sub(a, b, bc) => {
            accumulate(grads, nodes, *a, g.clone());
            let gb = bc.reduce(g, value(*b).shape()).map(|v| -v);
            accumulate(grads, nodes, *b, gb);
        }
        Op::Mul(a, b, bc) => {
            let (va, vb) = (value(*a), value(*b));
            let cols = va.cols();
            if nodes[*a].requires_grad {
                let mut ga = g.clone();
                for r in 0..va.rows() {
                    for c in 0..cols {
                        let bv = vb.as_slice()[bc.index(r, c, cols)];
                        ga.as_mut_slice()[r * cols + c] *= bv;
                    }
                }
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let full = elementwise(va, g, |x, g| x * g);
                accumulate(grads, nodes, *b, bc.reduce(&full, vb.shape()));
            }
        }
        Op::Relu(a) => {
            let ga = elementwise(value(*a), g, |x, g| if x > 0.0 { g } else { 0.0 });
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = elementwise(&node.value, g, |s, g| g * s * (1.0 - s));
            accumulate(grads, nodes, *a, ga);
        }
        Op::Log(a) => {
            let ga = elementwise(value(*a), g, |x, g| g / x);
            accumulate(grads, nodes, *a, ga);
        }
        Op::Abs(a) => {
            let ga = elementwise(value(*a), g, |x, g| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, *a, ga);
        }
        Op::ClampMin(a, floor) => {
            let ga = elementwise(value(*a), g, |x, g| if x > *floor { g } else { 0.0 });
            accumulate(grads, nodes, *a, ga);
        }
        Op::Powf(a, exponent) => {
            let e = *exponent;
            let ga = elementwise(value(*a), g, |x, g| {
                if x == 0.0 {
                    // d/dx x^e at 0: 1 for e == 1, otherwise taken as 0.
                    if e == 1.0 {
                        g
                    } else {
                        0.0
                    }
                } else {
                    g * e * x.powf(e - 1.0)
                }
            });
            accumulate(grads, nodes, *a, ga);
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let mut ga = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for (out, (y, g)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                    *out = y * (g - dot);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::CumsumRows(a) => {
            let mut ga = g.clone();
            for r in 0..ga.rows() {
                let row = ga.row_mut(r);
                for j in (0..row.len().saturating_sub(1)).rev() {
                    row[j] += row[j + 1];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sum(a) => {
            let (r, c) = value(*a).shape();
            accumulate(grads, nodes, *a, Matrix::filled(r, c, g.as_slice()[0]));
        }
        Op::Mean(a) => {
            let (r, c) = value(*a).shape();
            let scale = g.as_slice()[0] / (r * c) as f64;
            accumulate(grads, nodes, *a, Matrix::filled(r, c, scale));
        }
        Op::SumRows(a) => {
            let (r, c) = value(*a).shape();
            let mut ga = Matrix::zeros(r, c);
            for i in 0..r {
                ga.row_mut(i).fill(g.as_slice()[i]);
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, *a, g.map(|v| v * s));
        }
        Op::AddScalar(a) => {
            accumulate(grads, nodes, *a, g.clone());
        }
        Op::Max(a, argmax) => {
            let (r, c) = value(*a).shape();
            let mut ga = Matrix::zeros(r, c);
            ga.as_mut_slice()[*argmax] = g.as_slice()[0];
            accumulate(grads, nodes, *a, ga);
        }
        Op::Pick(a, cols) => {
            let (r, c) = value(*a).shape();
            let mut ga = Matrix::zeros(r, c);
            for (i, &col) in cols.iter().enumerate() {
                ga.set(i, col, g.as_slice()[i]);
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::SelectRows(a, rows) => {
            let (r, c) = value(*a).shape();
            let mut ga = Matrix::zeros(r, c);
            for (i, &src) in rows.iter().enumerate() {
                for (out, v) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                    *out += v;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (r, c) = value(p).shape();
                let slice = g.as_slice()[offset * c..(offset + r) * c].to_vec();
                offset += r;
                accumulate(grads, nodes, p, Matrix::from_vec(r, c, slice).expect("shape"));
            }
        }
        Op::Custom(inputs, op) => {
            let values: Vec<&Matrix> = inputs.iter().map(|&i| value(i)).collect();
            let gs = op.backward(&values, &node.value, g);
            debug_assert_eq!(gs.len(), inputs.len(), "{} backward arity", op.name());
            for (&i, gi) in inputs.iter().zip(gs) {
                accumulate(grads, nodes, i, gi);
            }
        }
    }
}

impl<'t> Tensor<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value_ref(&self) -> Ref<'t, Matrix> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Matrix {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value_ref().shape()
    }

    /// Scalar value; panics on non-scalars.
    pub fn item(&self) -> f64 {
        self.value_ref()
            .item()
            .unwrap_or_else(|| panic!("item() on {:?} tensor", self.shape()))
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient (leaves only).
    pub fn grad(&self) -> Option<Matrix> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn unary(&self, value: Matrix, op: Op) -> Tensor<'t> {
        self.tape.push(value, self.requires_grad(), op)
    }

    fn binary(&self, other: Tensor<'t>, value: Matrix, op: Op) -> Tensor<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, rg, op)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        self.value_ref().map(f)
    }

    pub fn matmul(&self, other: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.tape.check_owner(other)?;
        let value = self.value_ref().matmul(&other.value_ref())?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    /// Add a 1 x cols bias row to every row.
    pub fn add_bias(&self, bias: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.tape.check_owner(bias)?;
        let (a, b) = (self.shape(), bias.shape());
        if b != (1, a.1) {
            return Err(TensorError::shape("add_bias", a, b));
        }
        let mut value = self.value();
        {
            let bv = bias.value_ref();
            for r in 0..a.0 {
                for (x, b) in value.row_mut(r).iter_mut().zip(bv.as_slice()) {
                    *x += b;
                }
            }
        }
        Ok(self.binary(bias, value, Op::AddBias(self.id, bias.id)))
    }

    fn broadcast_op(
        &self,
        other: Tensor<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Tensor<'t>, TensorError> {
        self.tape.check_owner(other)?;
        let bc = Broadcast::resolve(name, self.shape(), other.shape())?;
        let mut value = self.value();
        {
            let bv = other.value_ref();
            let cols = value.cols();
            for r in 0..value.rows() {
                for c in 0..cols {
                    let x = &mut value.as_mut_slice()[r * cols + c];
                    *x = f(*x, bv.as_slice()[bc.index(r, c, cols)]);
                }
            }
        }
        Ok(self.binary(other, value, make(self.id, other.id, bc)))
    }

    /// Elementwise sum; `other` may be same-shape, a row, a column or a scalar.
    pub fn add(&self, other: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.broadcast_op(other, "add", |a, b| a + b, Op::Add)
    }

    /// Elementwise difference with the same broadcasting as [`Tensor::add`].
    pub fn sub(&self, other: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.broadcast_op(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        self.broadcast_op(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn relu(&self) -> Tensor<'t> {
        let v = self.map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Tensor<'t> {
        let v = self.map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn log(&self) -> Tensor<'t> {
        let v = self.map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn abs(&self) -> Tensor<'t> {
        let v = self.map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    /// `max(x, floor)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, floor: f64) -> Tensor<'t> {
        let v = self.map(|x| x.max(floor));
        self.unary(v, Op::ClampMin(self.id, floor))
    }

    pub fn powf(&self, exponent: f64) -> Tensor<'t> {
        let v = self.map(|x| x.powf(exponent));
        self.unary(v, Op::Powf(self.id, exponent))
    }

    /// Numerically stable softmax of each row.
    pub fn softmax_rows(&self) -> Tensor<'t> {
        let mut v = self.value();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.unary(v, Op::SoftmaxRows(self.id))
    }

    pub fn cumsum_rows(&self) -> Tensor<'t> {
        let mut v = self.value();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            for j in 1..row.len() {
                row[j] += row[j - 1];
            }
        }
        self.unary(v, Op::CumsumRows(self.id))
    }

    pub fn sum(&self) -> Tensor<'t> {
        let s = self.value_ref().as_slice().iter().sum();
        self.unary(Matrix::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Tensor<'t>, TensorError> {
        let v = self.value_ref();
        if v.is_empty() {
            return Err(TensorError::Empty { op: "mean" });
        }
        let m = v.as_slice().iter().sum::<f64>() / v.len() as f64;
        drop(v);
        Ok(self.unary(Matrix::scalar(m), Op::Mean(self.id)))
    }

    /// Sum each row into an n x 1 column.
    pub fn sum_rows(&self) -> Tensor<'t> {
        let v = self.value_ref();
        let sums: Vec<f64> = v.iter_rows().map(|r| r.iter().sum()).collect();
        drop(v);
        self.unary(Matrix::column_vector(&sums), Op::SumRows(self.id))
    }

    pub fn scale(&self, factor: f64) -> Tensor<'t> {
        let v = self.map(|x| x * factor);
        self.unary(v, Op::Scale(self.id, factor))
    }

    pub fn add_scalar(&self, offset: f64) -> Tensor<'t> {
        let v = self.map(|x| x + offset);
        self.unary(v, Op::AddScalar(self.id))
    }

    /// Largest entry; the gradient routes to the first maximal index.
    pub fn max(&self) -> Result<Tensor<'t>, TensorError> {
        let v = self.value_ref();
        let (idx, best) = first_argmax(v.as_slice()).ok_or(TensorError::Empty { op: "max" })?;
        drop(v);
        Ok(self.unary(Matrix::scalar(best), Op::Max(self.id, idx)))
    }

    /// Gather `x[i, cols[i]]` into an n x 1 column.
    pub fn pick(&self, cols: &[usize]) -> Result<Tensor<'t>, TensorError> {
        let v = self.value_ref();
        if cols.len() != v.rows() {
            return Err(TensorError::shape("pick", v.shape(), (cols.len(), 1)));
        }
        let mut out = Vec::with_capacity(cols.len());
        for (i, &c) in cols.iter().enumerate() {
            if c >= v.cols() {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: c,
                    bound: v.cols(),
                });
            }
            out.push(v.get(i, c));
        }
        drop(v);
        Ok(self.unary(Matrix::column_vector(&out), Op::Pick(self.id, cols.to_vec())))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor<'t>, TensorError> {
        let v = self.value_ref();
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.rows()) {
            return Err(TensorError::IndexOutOfRange {
                op: "select_rows",
                index: bad,
                bound: v.rows(),
            });
        }
        let out = v.select_rows(rows);
        drop(v);
        Ok(self.unary(out, Op::SelectRows(self.id, rows.to_vec())))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// First index of the maximum, or `None` for an empty slice.
pub fn first_argmax(values: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best
}
