//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] is an append-only list of nodes. Every operation reads only
//! nodes that already exist, so insertion order is a topological order and
//! [`Tape::backward`] can sweep the list once in reverse. Tapes are built
//! fresh for every forward pass.

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows (the batch axis): `n x m -> 1 x m`.
    Batch,
    /// Reduce over columns: `n x m -> n x 1`.
    Features,
    /// Reduce everything: `n x m -> 1 x 1`.
    All,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Square(NodeId),
    FloorAt(NodeId, f64),
    Mean(NodeId, Axis),
    Var(NodeId, Axis),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: &'static str, kind: Op, value: Matrix) -> Result<NodeId> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite { op, index });
        }
        self.nodes.push(Node { op: kind, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "node {} does not exist on this tape ({} nodes)",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    /// Registers an input or parameter. Gradients are reported for every leaf.
    pub fn leaf(&mut self, value: Matrix) -> Result<NodeId> {
        self.push("leaf", Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", Op::MatMul(a, b), v)
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(row)?;
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + broadcast {:?}", xv.shape(), rv.shape()),
            ));
        }
        let mut out = xv.clone();
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += rv.data()[i % cols];
        }
        self.push("add_row", Op::AddRow(x, row), out)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub(a, b), v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * factor);
        self.push("scale", Op::Scale(a, factor), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| x + offset);
        self.push("add_scalar", Op::AddScalar(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", Op::Relu(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let av = self.value(a);
        if let Some(index) = av.data().iter().position(|&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                index,
                value: av.data()[index],
            });
        }
        let v = av.map(f64::ln);
        self.push("log", Op::Log(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * x);
        self.push("square", Op::Square(a), v)
    }

    /// `max(x, floor)` elementwise. The adjoint is blocked where the floor is active.
    pub fn floor_at(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| x.max(floor));
        self.push("floor_at", Op::FloorAt(a, floor), v)
    }

    pub fn mean(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        self.check(a)?;
        let v = reduce_mean(self.value(a), axis)?;
        self.push("mean", Op::Mean(a, axis), v)
    }

    /// Population variance (normalized by the count, not count - 1).
    pub fn var(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        self.check(a)?;
        let v = reduce_var(self.value(a), axis)?;
        self.push("var", Op::Var(a, axis), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let n = self.value(a).len() as f64;
        let m = self.mean(a, Axis::All)?;
        self.scale(m, n)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} beside {:?}", av.shape(), bv.shape()),
            ));
        }
        let cols = av.cols() + bv.cols();
        let mut data = Vec::with_capacity(av.rows() * cols);
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let v = Matrix::new(av.rows(), cols, data)?;
        self.push("concat_cols", Op::ConcatCols(a, b), v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).slice_rows(start, end)?;
        self.push("slice_rows", Op::SliceRows(a, start), v)
    }

    /// Propagates adjoints from a scalar `loss` node back to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).as_scalar().is_none() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} is {:?}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, a, g.matmul_t(val(b)));
                accumulate(grads, b, val(a).t_matmul(g));
            }
            Op::AddRow(x, row) => {
                accumulate(grads, x, g.clone());
                accumulate(grads, row, Matrix::row_vector(g.column_sums()));
            }
            Op::Add(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(grads, a, g.zip_map(val(b), |gv, bv| gv * bv));
                accumulate(grads, b, g.zip_map(val(a), |gv, av| gv * av));
            }
            Op::Scale(a, factor) => accumulate(grads, a, g.map(|v| v * factor)),
            Op::AddScalar(a) => accumulate(grads, a, g.clone()),
            Op::Relu(a) => {
                accumulate(grads, a, g.zip_map(val(a), |gv, x| if x > 0.0 { gv } else { 0.0 }))
            }
            Op::Log(a) => accumulate(grads, a, g.zip_map(val(a), |gv, x| gv / x)),
            Op::Square(a) => accumulate(grads, a, g.zip_map(val(a), |gv, x| 2.0 * gv * x)),
            Op::FloorAt(a, floor) => accumulate(
                grads,
                a,
                g.zip_map(val(a), |gv, x| if x > floor { gv } else { 0.0 }),
            ),
            Op::Mean(a, axis) => {
                let x = val(a);
                let count = reduced_count(x, axis) as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        d.set(r, c, broadcast(g, axis, r, c) / count);
                    }
                }
                accumulate(grads, a, d);
            }
            Op::Var(a, axis) => {
                let x = val(a);
                let means = reduce_mean(x, axis).expect("shape checked on forward");
                let count = reduced_count(x, axis) as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        let centered = x.get(r, c) - broadcast(&means, axis, r, c);
                        d.set(r, c, broadcast(g, axis, r, c) * 2.0 * centered / count);
                    }
                }
                accumulate(grads, a, d);
            }
            Op::ConcatCols(a, b) => {
                let ca = val(a).cols();
                let cb = val(b).cols();
                let mut da = Vec::with_capacity(g.rows() * ca);
                let mut db = Vec::with_capacity(g.rows() * cb);
                for r in 0..g.rows() {
                    let row = g.row(r);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, a, Matrix::new(g.rows(), ca, da).expect("shape"));
                accumulate(grads, b, Matrix::new(g.rows(), cb, db).expect("shape"));
            }
            Op::SliceRows(a, start) => {
                let x = val(a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                let cols = x.cols();
                d.data_mut()[start * cols..start * cols + out.len()].copy_from_slice(g.data());
                accumulate(grads, a, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn reduced_count(x: &Matrix, axis: Axis) -> usize {
    match axis {
        Axis::Batch => x.rows(),
        Axis::Features => x.cols(),
        Axis::All => x.len(),
    }
}

/// Entry of a reduced matrix that corresponds to position `(r, c)` of its source.
fn broadcast(reduced: &Matrix, axis: Axis, r: usize, c: usize) -> f64 {
    match axis {
        Axis::Batch => reduced.get(0, c),
        Axis::Features => reduced.get(r, 0),
        Axis::All => reduced.get(0, 0),
    }
}

pub fn reduce_mean(x: &Matrix, axis: Axis) -> Result<Matrix> {
    if reduced_count(x, axis) == 0 {
        return Err(Error::shape("mean", format!("cannot reduce {:?} along {axis:?}", x.shape())));
    }
    Ok(match axis {
        Axis::Batch => Matrix::row_vector(x.column_means()),
        Axis::Features => {
            let n = x.cols() as f64;
            let data = (0..x.rows()).map(|r| x.row(r).iter().sum::<f64>() / n).collect();
            Matrix::new(x.rows(), 1, data)?
        }
        Axis::All => Matrix::scalar(x.sum() / x.len() as f64),
    })
}

pub fn reduce_var(x: &Matrix, axis: Axis) -> Result<Matrix> {
    let means = reduce_mean(x, axis)?;
    let count = reduced_count(x, axis) as f64;
    let mut out = Matrix::zeros(means.rows(), means.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let d = x.get(r, c) - broadcast(&means, axis, r, c);
            let (orow, ocol) = match axis {
                Axis::Batch => (0, c),
                Axis::Features => (r, 0),
                Axis::All => (0, 0),
            };
            let cur = out.get(orow, ocol);
            out.set(orow, ocol, cur + d * d / count);
        }
    }
    Ok(out)
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// The adjoint of `id`, or `None` when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// The adjoint of `id`, with zeros standing in for an unreached node.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Matrix {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}
