//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! Each operation appends a node and computes its value eagerly. The
//! backward pass walks nodes in reverse creation order and *builds new
//! nodes* for the gradients, so a gradient (e.g. a gradient-norm term)
//! can itself be differentiated again. Tapes are rebuilt per training
//! step and never shared between threads.

use crate::error::{Error, Result};
use crate::scalar::{Real, DIV_GUARD};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op<F: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ScalarMul(NodeId, F),
    ScalarAdd(NodeId, F),
    Relu(NodeId),
    LeakyRelu(NodeId, F),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    Broadcast(NodeId, Vec<usize>),
    Concat0(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    PadRows(NodeId, usize, usize),
    TakeRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>, usize),
    Reshape(NodeId, Vec<usize>),
    // Elementwise derivative masks. Their own derivative is zero a.e.
    // (the measure-zero kink is resolved toward the negative side).
    LeakyMask(NodeId, F),
    SignMask(NodeId),
}

#[derive(Debug, Clone)]
struct Node<F: Real> {
    op: Op<F>,
    value: Tensor<F>,
}

#[derive(Debug, Default)]
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

/// Gradients of one scalar root, as node ids back into the tape.
pub struct Gradients {
    root: NodeId,
    ids: Vec<Option<NodeId>>,
}

impl Gradients {
    pub fn root(&self) -> NodeId {
        self.root
    }

    /// Gradient node for `wrt`, if the root depends on it.
    pub fn node(&self, wrt: NodeId) -> Option<NodeId> {
        self.ids.get(wrt.0).copied().flatten()
    }
}

enum Shaping {
    Same(Vec<usize>),
    LhsScalar(Vec<usize>),
    RhsScalar(Vec<usize>),
    // (rows, cols, lhs_row_vec) for row/column vector against matrix
    LhsRow(usize, usize),
    RhsRow(usize, usize),
    LhsCol(usize, usize),
    RhsCol(usize, usize),
}

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Shaping> {
    if a == b {
        return Ok(Shaping::Same(a.to_vec()));
    }
    let scalar = |s: &[usize]| s.iter().product::<usize>() == 1;
    if scalar(a) {
        return Ok(Shaping::LhsScalar(b.to_vec()));
    }
    if scalar(b) {
        return Ok(Shaping::RhsScalar(a.to_vec()));
    }
    if a.len() == 2 && b.len() == 2 {
        let (ar, ac, br, bc) = (a[0], a[1], b[0], b[1]);
        if ar == 1 && ac == bc {
            return Ok(Shaping::LhsRow(br, bc));
        }
        if br == 1 && bc == ac {
            return Ok(Shaping::RhsRow(ar, ac));
        }
        if ac == 1 && ar == br {
            return Ok(Shaping::LhsCol(br, bc));
        }
        if bc == 1 && br == ar {
            return Ok(Shaping::RhsCol(ar, ac));
        }
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

fn binary_ew<F: Real>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    let out = match broadcast_shapes(op, a.shape(), b.shape())? {
        Shaping::Same(shape) => {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_vec(shape, data)?
        }
        Shaping::LhsScalar(shape) => {
            let x = a.data()[0];
            Tensor::from_vec(shape, b.data().iter().map(|&y| f(x, y)).collect())?
        }
        Shaping::RhsScalar(shape) => {
            let y = b.data()[0];
            Tensor::from_vec(shape, a.data().iter().map(|&x| f(x, y)).collect())?
        }
        Shaping::LhsRow(r, c) => {
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    data.push(f(a.data()[j], b.data()[i * c + j]));
                }
            }
            Tensor::from_vec(vec![r, c], data)?
        }
        Shaping::RhsRow(r, c) => {
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    data.push(f(a.data()[i * c + j], b.data()[j]));
                }
            }
            Tensor::from_vec(vec![r, c], data)?
        }
        Shaping::LhsCol(r, c) => {
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    data.push(f(a.data()[i], b.data()[i * c + j]));
                }
            }
            Tensor::from_vec(vec![r, c], data)?
        }
        Shaping::RhsCol(r, c) => {
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    data.push(f(a.data()[i * c + j], b.data()[i]));
                }
            }
            Tensor::from_vec(vec![r, c], data)?
        }
    };
    Ok(out)
}

fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push_unchecked(Op::Leaf, value)
    }

    /// Rebind a leaf's value (shape must match), for finite differences.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor<F>) -> Result<()> {
        match self.nodes[id.0].op {
            Op::Leaf => {
                if self.nodes[id.0].value.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "set_leaf",
                        lhs: self.nodes[id.0].value.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    });
                }
                self.nodes[id.0].value = value;
                Ok(())
            }
            _ => Err(Error::Contract("set_leaf on a non-leaf node".into())),
        }
    }

    fn push_unchecked(&mut self, op: Op<F>, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op<F>, value: Tensor<F>) -> Result<NodeId> {
        value.check_finite(name)?;
        Ok(self.push_unchecked(op, value))
    }

    fn eval(&self, op: &Op<F>) -> Result<Tensor<F>> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        let guard = F::from_f64_lit(DIV_GUARD);
        Ok(match op {
            Op::Leaf => unreachable!("leaves are never re-evaluated through eval"),
            Op::Add(a, b) => binary_ew("add", v(*a), v(*b), |x, y| x + y)?,
            Op::Sub(a, b) => binary_ew("sub", v(*a), v(*b), |x, y| x - y)?,
            Op::Mul(a, b) => binary_ew("mul", v(*a), v(*b), |x, y| x * y)?,
            Op::Div(a, b) => {
                if v(*b).data().iter().any(|d| d.abs() < guard) {
                    return Err(Error::DivisionGuard { op: "div" });
                }
                binary_ew("div", v(*a), v(*b), |x, y| x / y)?
            }
            Op::MatMul(a, b) => matmul(v(*a), v(*b))?,
            Op::Transpose(a) => {
                let t = v(*a);
                if t.shape().len() != 2 {
                    return Err(Error::ShapeMismatch {
                        op: "transpose",
                        lhs: t.shape().to_vec(),
                        rhs: vec![],
                    });
                }
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut out = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = t.data()[i * c + j];
                    }
                }
                Tensor::from_vec(vec![c, r], out)?
            }
            Op::ScalarMul(a, c) => v(*a).map(|x| x * *c),
            Op::ScalarAdd(a, c) => v(*a).map(|x| x + *c),
            Op::Relu(a) => v(*a).map(|x| if x > F::zero() { x } else { F::zero() }),
            Op::LeakyRelu(a, alpha) => v(*a).map(|x| if x > F::zero() { x } else { *alpha * x }),
            Op::Tanh(a) => v(*a).map(|x| x.tanh()),
            Op::Sigmoid(a) => v(*a).map(sigmoid),
            Op::Softplus(a) => v(*a).map(softplus),
            Op::Square(a) => v(*a).map(|x| x * x),
            Op::Sqrt(a) => v(*a).map(|x| x.sqrt()),
            Op::Ln(a) => {
                if v(*a).data().iter().any(|d| d.abs() < guard) {
                    return Err(Error::DivisionGuard { op: "ln" });
                }
                v(*a).map(|x| x.ln())
            }
            Op::Abs(a) => v(*a).map(|x| x.abs()),
            Op::Sum(a) => Tensor::scalar(v(*a).data().iter().fold(F::zero(), |s, &x| s + x)),
            Op::Mean(a) => {
                let t = v(*a);
                let n = F::from_f64_lit(t.len() as f64);
                Tensor::scalar(t.data().iter().fold(F::zero(), |s, &x| s + x) / n)
            }
            Op::SumAxis(a, axis) => {
                let t = v(*a);
                if t.shape().len() != 2 || *axis > 1 {
                    return Err(Error::ShapeMismatch {
                        op: "sum_axis",
                        lhs: t.shape().to_vec(),
                        rhs: vec![*axis],
                    });
                }
                let (r, c) = (t.shape()[0], t.shape()[1]);
                if *axis == 0 {
                    let mut out = vec![F::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j] += t.data()[i * c + j];
                        }
                    }
                    Tensor::from_vec(vec![1, c], out)?
                } else {
                    let mut out = vec![F::zero(); r];
                    for i in 0..r {
                        for j in 0..c {
                            out[i] += t.data()[i * c + j];
                        }
                    }
                    Tensor::from_vec(vec![r, 1], out)?
                }
            }
            Op::Broadcast(a, shape) => {
                let t = v(*a);
                let n: usize = shape.iter().product();
                if t.len() == 1 {
                    Tensor::full(shape.clone(), t.data()[0])
                } else if shape.len() == 2 && t.shape().len() == 2 {
                    let (r, c) = (shape[0], shape[1]);
                    if t.shape() == [1, c] {
                        let mut out = Vec::with_capacity(n);
                        for _ in 0..r {
                            out.extend_from_slice(t.data());
                        }
                        Tensor::from_vec(shape.clone(), out)?
                    } else if t.shape() == [r, 1] {
                        let mut out = Vec::with_capacity(n);
                        for i in 0..r {
                            out.extend(std::iter::repeat(t.data()[i]).take(c));
                        }
                        Tensor::from_vec(shape.clone(), out)?
                    } else {
                        return Err(Error::ShapeMismatch {
                            op: "broadcast",
                            lhs: t.shape().to_vec(),
                            rhs: shape.clone(),
                        });
                    }
                } else {
                    return Err(Error::ShapeMismatch {
                        op: "broadcast",
                        lhs: t.shape().to_vec(),
                        rhs: shape.clone(),
                    });
                }
            }
            Op::Concat0(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                if ta.cols() != tb.cols() {
                    return Err(Error::ShapeMismatch {
                        op: "concat0",
                        lhs: ta.shape().to_vec(),
                        rhs: tb.shape().to_vec(),
                    });
                }
                let mut data = Vec::with_capacity(ta.len() + tb.len());
                data.extend_from_slice(ta.data());
                data.extend_from_slice(tb.data());
                Tensor::from_vec(vec![ta.rows() + tb.rows(), ta.cols()], data)?
            }
            Op::SliceRows(a, start, end) => {
                let t = v(*a);
                if *end > t.rows() || start >= end {
                    return Err(Error::Contract(format!(
                        "slice_rows {start}..{end} out of range for {} rows",
                        t.rows()
                    )));
                }
                let c = t.cols();
                Tensor::from_vec(
                    vec![end - start, c],
                    t.data()[start * c..end * c].to_vec(),
                )?
            }
            Op::PadRows(a, before, after) => {
                let t = v(*a);
                let c = t.cols();
                let rows = before + t.rows() + after;
                let mut data = vec![F::zero(); rows * c];
                data[before * c..(before + t.rows()) * c].copy_from_slice(t.data());
                Tensor::from_vec(vec![rows, c], data)?
            }
            Op::TakeRows(a, idx) => {
                let t = v(*a);
                let c = t.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    if i >= t.rows() {
                        return Err(Error::Contract(format!(
                            "take_rows index {i} out of range for {} rows",
                            t.rows()
                        )));
                    }
                    data.extend_from_slice(t.row(i));
                }
                Tensor::from_vec(vec![idx.len(), c], data)?
            }
            Op::ScatterRows(a, idx, rows) => {
                let t = v(*a);
                let c = t.cols();
                let mut data = vec![F::zero(); rows * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        data[i * c + j] += t.data()[k * c + j];
                    }
                }
                Tensor::from_vec(vec![*rows, c], data)?
            }
            Op::Reshape(a, shape) => {
                let t = v(*a);
                if shape.iter().product::<usize>() != t.len() {
                    return Err(Error::ShapeMismatch {
                        op: "reshape",
                        lhs: t.shape().to_vec(),
                        rhs: shape.clone(),
                    });
                }
                Tensor::from_vec(shape.clone(), t.data().to_vec())?
            }
            Op::LeakyMask(a, alpha) => {
                v(*a).map(|x| if x > F::zero() { F::one() } else { *alpha })
            }
            Op::SignMask(a) => v(*a).map(|x| {
                if x > F::zero() {
                    F::one()
                } else if x < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            }),
        })
    }

    fn apply(&mut self, name: &'static str, op: Op<F>) -> Result<NodeId> {
        let value = self.eval(&op)?;
        self.push(name, op, value)
    }

    // -- op constructors -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply("add", Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply("sub", Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply("mul", Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply("div", Op::Div(a, b))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply("matmul", Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply("transpose", Op::Transpose(a))
    }
    pub fn scalar_mul(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        self.apply("scalar_mul", Op::ScalarMul(a, c))
    }
    pub fn scalar_add(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        self.apply("scalar_add", Op::ScalarAdd(a, c))
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply("relu", Op::Relu(a))
    }
    pub fn leaky_relu(&mut self, a: NodeId, alpha: F) -> Result<NodeId> {
        self.apply("leaky_relu", Op::LeakyRelu(a, alpha))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply("tanh", Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply("sigmoid", Op::Sigmoid(a))
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply("softplus", Op::Softplus(a))
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply("square", Op::Square(a))
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply("sqrt", Op::Sqrt(a))
    }
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply("ln", Op::Ln(a))
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply("abs", Op::Abs(a))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply("sum", Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply("mean", Op::Mean(a))
    }
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.apply("sum_axis", Op::SumAxis(a, axis))
    }
    pub fn broadcast(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.apply("broadcast", Op::Broadcast(a, shape))
    }
    pub fn concat0(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply("concat0", Op::Concat0(a, b))
    }
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply("slice_rows", Op::SliceRows(a, start, end))
    }
    pub fn pad_rows(&mut self, a: NodeId, before: usize, after: usize) -> Result<NodeId> {
        self.apply("pad_rows", Op::PadRows(a, before, after))
    }
    pub fn take_rows(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        self.apply("take_rows", Op::TakeRows(a, idx))
    }
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.apply("reshape", Op::Reshape(a, shape))
    }

    fn leaky_mask(&mut self, a: NodeId, alpha: F) -> Result<NodeId> {
        self.apply("leaky_mask", Op::LeakyMask(a, alpha))
    }
    fn sign_mask(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply("sign_mask", Op::SignMask(a))
    }

    // -- composites ------------------------------------------------------

    /// L2 norm along an axis of a 2D tensor (axis 1: per-row norms as m x 1).
    pub fn l2_norm_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sq = self.square(a)?;
        let s = self.sum_axis(sq, axis)?;
        self.sqrt(s)
    }

    /// Rows scaled to unit L2 norm.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let norms = self.l2_norm_axis(a, 1)?;
        self.div(a, norms)
    }

    // -- backward --------------------------------------------------------

    /// Reduce a gradient of `out`-shape back to the shape of a broadcast input.
    fn reduce_to(&mut self, g: NodeId, target: &[usize]) -> Result<NodeId> {
        let gshape = self.value(g).shape().to_vec();
        if gshape == target {
            return Ok(g);
        }
        if target.iter().product::<usize>() == 1 {
            let s = self.sum(g)?;
            return if target.len() == 1 {
                Ok(s)
            } else {
                self.reshape(s, target.to_vec())
            };
        }
        if target.len() == 2 && gshape.len() == 2 {
            if target[0] == 1 && target[1] == gshape[1] {
                return self.sum_axis(g, 0);
            }
            if target[1] == 1 && target[0] == gshape[0] {
                return self.sum_axis(g, 1);
            }
        }
        Err(Error::ShapeMismatch {
            op: "reduce_to",
            lhs: gshape,
            rhs: target.to_vec(),
        })
    }

    /// Gradient contributions of `node` given upstream gradient `g`
    /// (same shape as the node's value). Built from primitive ops so the
    /// result is differentiable again.
    fn vjp(&mut self, node: NodeId, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[node.0].op.clone();
        let shape_of = |t: &Tape<F>, id: NodeId| t.value(id).shape().to_vec();
        Ok(match op {
            Op::Leaf | Op::LeakyMask(..) | Op::SignMask(..) => vec![],
            Op::Add(a, b) => {
                let (sa, sb) = (shape_of(self, a), shape_of(self, b));
                let da = self.reduce_to(g, &sa)?;
                let db = self.reduce_to(g, &sb)?;
                vec![(a, da), (b, db)]
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (shape_of(self, a), shape_of(self, b));
                let da = self.reduce_to(g, &sa)?;
                let ng = self.scalar_mul(g, -F::one())?;
                let db = self.reduce_to(ng, &sb)?;
                vec![(a, da), (b, db)]
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (shape_of(self, a), shape_of(self, b));
                let gb = self.mul(g, b)?;
                let da = self.reduce_to(gb, &sa)?;
                let ga = self.mul(g, a)?;
                let db = self.reduce_to(ga, &sb)?;
                vec![(a, da), (b, db)]
            }
            Op::Div(a, b) => {
                let (sa, sb) = (shape_of(self, a), shape_of(self, b));
                let gb = self.div(g, b)?;
                let da = self.reduce_to(gb, &sa)?;
                // d/db (a/b) = -out/b
                let ob = self.div(node, b)?;
                let gob = self.mul(g, ob)?;
                let ngob = self.scalar_mul(gob, -F::one())?;
                let db = self.reduce_to(ngob, &sb)?;
                vec![(a, da), (b, db)]
            }
            Op::MatMul(a, b) => {
                let bt = self.transpose(b)?;
                let da = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let db = self.matmul(at, g)?;
                vec![(a, da), (b, db)]
            }
            Op::Transpose(a) => {
                let da = self.transpose(g)?;
                vec![(a, da)]
            }
            Op::ScalarMul(a, c) => {
                let da = self.scalar_mul(g, c)?;
                vec![(a, da)]
            }
            Op::ScalarAdd(a, _) => vec![(a, g)],
            Op::Relu(a) => {
                let m = self.leaky_mask(a, F::zero())?;
                let da = self.mul(g, m)?;
                vec![(a, da)]
            }
            Op::LeakyRelu(a, alpha) => {
                let m = self.leaky_mask(a, alpha)?;
                let da = self.mul(g, m)?;
                vec![(a, da)]
            }
            Op::Tanh(a) => {
                let y2 = self.square(node)?;
                let ny2 = self.scalar_mul(y2, -F::one())?;
                let d = self.scalar_add(ny2, F::one())?;
                let da = self.mul(g, d)?;
                vec![(a, da)]
            }
            Op::Sigmoid(a) => {
                let ny = self.scalar_mul(node, -F::one())?;
                let om = self.scalar_add(ny, F::one())?;
                let d = self.mul(node, om)?;
                let da = self.mul(g, d)?;
                vec![(a, da)]
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a)?;
                let da = self.mul(g, s)?;
                vec![(a, da)]
            }
            Op::Square(a) => {
                let two_a = self.scalar_mul(a, F::from_f64_lit(2.0))?;
                let da = self.mul(g, two_a)?;
                vec![(a, da)]
            }
            Op::Sqrt(a) => {
                let go = self.div(g, node)?;
                let da = self.scalar_mul(go, F::from_f64_lit(0.5))?;
                vec![(a, da)]
            }
            Op::Ln(a) => {
                let da = self.div(g, a)?;
                vec![(a, da)]
            }
            Op::Abs(a) => {
                let s = self.sign_mask(a)?;
                let da = self.mul(g, s)?;
                vec![(a, da)]
            }
            Op::Sum(a) => {
                let sa = shape_of(self, a);
                let da = self.broadcast(g, sa)?;
                vec![(a, da)]
            }
            Op::Mean(a) => {
                let sa = shape_of(self, a);
                let n = sa.iter().product::<usize>();
                let da = self.broadcast(g, sa)?;
                let da = self.scalar_mul(da, F::one() / F::from_f64_lit(n as f64))?;
                vec![(a, da)]
            }
            Op::SumAxis(a, _) => {
                let sa = shape_of(self, a);
                let da = self.broadcast(g, sa)?;
                vec![(a, da)]
            }
            Op::Broadcast(a, _) => {
                let sa = shape_of(self, a);
                let da = self.reduce_to(g, &sa)?;
                vec![(a, da)]
            }
            Op::Concat0(a, b) => {
                let ra = self.value(a).rows();
                let rb = self.value(b).rows();
                let da = self.slice_rows(g, 0, ra)?;
                let db = self.slice_rows(g, ra, ra + rb)?;
                vec![(a, da), (b, db)]
            }
            Op::SliceRows(a, start, end) => {
                let ra = self.value(a).rows();
                let da = self.pad_rows(g, start, ra - end)?;
                vec![(a, da)]
            }
            Op::PadRows(a, before, _) => {
                let ra = self.value(a).rows();
                let da = self.slice_rows(g, before, before + ra)?;
                vec![(a, da)]
            }
            Op::TakeRows(a, idx) => {
                let ra = self.value(a).rows();
                let da = self.apply("scatter_rows", Op::ScatterRows(g, idx, ra))?;
                vec![(a, da)]
            }
            Op::ScatterRows(a, idx, _) => {
                let da = self.take_rows(g, idx)?;
                vec![(a, da)]
            }
            Op::Reshape(a, _) => {
                let sa = shape_of(self, a);
                let da = self.reshape(g, sa)?;
                vec![(a, da)]
            }
        })
    }

    /// Reverse pass from a scalar root. Gradients are appended to the tape
    /// as new nodes, so they can be differentiated again.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        let limit = root.0;
        let mut ids: Vec<Option<NodeId>> = vec![None; limit + 1];
        let seed = self.leaf(Tensor::scalar(F::one()));
        ids[limit] = Some(seed);
        for i in (0..=limit).rev() {
            let Some(g) = ids[i] else { continue };
            for (input, contrib) in self.vjp(NodeId(i), g)? {
                if input.0 > limit {
                    continue;
                }
                ids[input.0] = Some(match ids[input.0] {
                    // shared subexpressions accumulate additively
                    Some(existing) => self.add(existing, contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(Gradients { root, ids })
    }

    /// Gradient tensor of `root` w.r.t. `wrt` (zeros if independent).
    pub fn grad(&self, grads: &Gradients, wrt: NodeId) -> Tensor<F> {
        match grads.node(wrt) {
            Some(id) => self.value(id).clone(),
            None => Tensor::zeros(self.value(wrt).shape().to_vec()),
        }
    }

    /// Recompute every non-leaf value up to and including `limit`, in
    /// creation order. Used after `set_leaf` for finite differences.
    pub fn refresh_until(&mut self, limit: NodeId) -> Result<()> {
        for i in 0..=limit.0 {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.eval(&op)?;
            value.check_finite("refresh")?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Max over entries of `leaf` of the relative disagreement between the
    /// analytic gradient and a central finite difference of `root`.
    pub fn finite_diff_check(&mut self, root: NodeId, leaf: NodeId, step: F) -> Result<F> {
        let grads = self.backward(root)?;
        let analytic = self.grad(&grads, leaf);
        let base = self.value(leaf).clone();
        let mut max_err = F::zero();
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[k] += step;
            self.set_leaf(leaf, plus)?;
            self.refresh_until(root)?;
            let f_plus = self.value(root).item();

            let mut minus = base.clone();
            minus.data_mut()[k] -= step;
            self.set_leaf(leaf, minus)?;
            self.refresh_until(root)?;
            let f_minus = self.value(root).item();

            let numeric = (f_plus - f_minus) / (F::from_f64_lit(2.0) * step);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / F::one().max(a.abs());
            if err > max_err {
                max_err = err;
            }
        }
        self.set_leaf(leaf, base)?;
        self.refresh_until(root)?;
        Ok(max_err)
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn softplus<F: Real>(x: F) -> F {
    // ln(1 + e^x), stable on both tails
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
