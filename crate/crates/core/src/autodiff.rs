//! Reverse-mode gradient tape over tensors.
//!
//! The tape records the primitive set needed by the time-mixing,
//! channel-mixing and diffusion-loss computations, nothing more. Each node
//! stores its output value and the indices of its parents; appending order is
//! topological, so backpropagation is a single reverse sweep that visits each
//! node exactly once. Gradients of non-leaf nodes are dropped as soon as they
//! have been scattered to keep the working set small.

use std::cell::RefCell;
use std::rc::Rc;

use crate::arena::CountedBuf;
use crate::block::{q_shift, q_shift_adjoint, PatchGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wkv::{bi_wkv_backward, bi_wkv_direct, bi_wkv_direct_backward, bi_wkv_scan, WkvParams};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Sigmoid(usize),
    ReluSq(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    AddRow { x: usize, row: usize },
    LerpRows { x: usize, y: usize, mu: usize },
    SliceRows { x: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    QShift { x: usize, grid: PatchGrid, shift: usize, gamma: f64 },
    BiWkv { k: usize, v: usize, w: usize, u: usize, direct: bool },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording tape. Clone handles share the same underlying record.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one recorded value.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Records a leaf. Leaves are the differentiation targets: trainable
    /// parameters and inputs alike.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { value, op });
        Var {
            tape: self.clone(),
            id,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates rank-2 vars along the row axis.
    pub fn concat_rows(&self, parts: &[&Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat of zero parts"));
        }
        let mut cols = None;
        let mut total_rows = 0;
        let mut data = Vec::new();
        for part in parts {
            part.check_tape(self)?;
            let v = part.value();
            if v.rank() != 2 {
                return Err(Error::dim("concat_rows expects rank-2 parts".to_string()));
            }
            match cols {
                None => cols = Some(v.shape()[1]),
                Some(c) if c != v.shape()[1] => {
                    return Err(Error::dim("concat_rows column mismatch".to_string()))
                }
                _ => {}
            }
            total_rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_vec_unchecked(vec![total_rows, cols.unwrap()], data);
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            value,
        ))
    }
}

impl Var {
    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.inner, &tape.inner) {
            return Err(Error::contract("vars belong to different tapes".to_string()));
        }
        Ok(())
    }

    fn same_tape(&self, other: &Var) -> Result<()> {
        other.check_tape(&self.tape)
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let value = self.value().add(&other.value())?;
        Ok(self.tape.push(Op::Add(self.id, other.id), value))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let value = self.value().sub(&other.value())?;
        Ok(self.tape.push(Op::Sub(self.id, other.id), value))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let value = self.value().mul(&other.value())?;
        Ok(self.tape.push(Op::Mul(self.id, other.id), value))
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = self.value().scale(c);
        self.tape.push(Op::Scale(self.id, c), value)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let value = self.value().matmul(&other.value())?;
        Ok(self.tape.push(Op::Matmul(self.id, other.id), value))
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().sigmoid();
        self.tape.push(Op::Sigmoid(self.id), value)
    }

    pub fn relu_sq(&self) -> Var {
        let value = self.value().relu_sq();
        self.tape.push(Op::ReluSq(self.id), value)
    }

    /// Sum of all elements as a rank-0 var.
    pub fn sum(&self) -> Var {
        let value = Tensor::from_vec_unchecked(vec![], vec![self.value().sum()]);
        self.tape.push(Op::Sum(self.id), value)
    }

    /// Mean of all elements as a rank-0 var.
    pub fn mean(&self) -> Var {
        let value = Tensor::from_vec_unchecked(vec![], vec![self.value().mean()]);
        self.tape.push(Op::Mean(self.id), value)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.push(Op::Reshape(self.id), value))
    }

    /// Adds a rank-1 row vector to every row of a rank-2 var.
    pub fn add_row(&self, row: &Var) -> Result<Var> {
        self.same_tape(row)?;
        let x = self.value();
        let r = row.value();
        if x.rank() != 2 || r.rank() != 1 || x.shape()[1] != r.len() {
            return Err(Error::dim(format!(
                "add_row: {:?} + {:?}",
                x.shape(),
                r.shape()
            )));
        }
        let cols = r.len();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (o, &b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let value = Tensor::from_vec_unchecked(x.shape().to_vec(), data);
        Ok(self.tape.push(
            Op::AddRow {
                x: self.id,
                row: row.id,
            },
            value,
        ))
    }

    /// Channel-wise interpolation between two rank-2 vars:
    /// `out[r,c] = mu[c] * self[r,c] + (1 - mu[c]) * other[r,c]`.
    pub fn lerp_rows(&self, other: &Var, mu: &Var) -> Result<Var> {
        self.same_tape(other)?;
        self.same_tape(mu)?;
        let x = self.value();
        let y = other.value();
        let m = mu.value();
        if x.shape() != y.shape() || x.rank() != 2 || m.rank() != 1 || m.len() != x.shape()[1] {
            return Err(Error::dim(format!(
                "lerp_rows: {:?}, {:?}, mu {:?}",
                x.shape(),
                y.shape(),
                m.shape()
            )));
        }
        let cols = m.len();
        let md = m.data();
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(y.data())
            .enumerate()
            .map(|(i, (&a, &b))| {
                let mu_c = md[i % cols];
                mu_c * a + (1.0 - mu_c) * b
            })
            .collect();
        let value = Tensor::from_vec_unchecked(x.shape().to_vec(), data);
        Ok(self.tape.push(
            Op::LerpRows {
                x: self.id,
                y: other.id,
                mu: mu.id,
            },
            value,
        ))
    }

    /// Contiguous row slice of a rank-2 var.
    pub fn slice_rows(&self, start: usize, rows: usize) -> Result<Var> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::dim("slice_rows expects rank 2".to_string()));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        if start + rows > r {
            return Err(Error::dim(format!(
                "slice_rows {start}..{} out of {r} rows",
                start + rows
            )));
        }
        let data = x.data()[start * c..(start + rows) * c].to_vec();
        let value = Tensor::from_vec_unchecked(vec![rows, c], data);
        Ok(self.tape.push(
            Op::SliceRows { x: self.id, start },
            value,
        ))
    }

    /// Quad-directional patch shift (see `block::q_shift`).
    pub fn q_shift(&self, grid: PatchGrid, shift: usize, gamma: f64) -> Result<Var> {
        let value = q_shift(&self.value(), grid, shift, gamma)?;
        Ok(self.tape.push(
            Op::QShift {
                x: self.id,
                grid,
                shift,
                gamma,
            },
            value,
        ))
    }

    /// Bidirectional WKV over the rows of `self` (keys) and `v` (values),
    /// with decay and bonus vars. Evaluated by the linear scan; the backward
    /// pass uses the analytic linear-time gradients.
    pub fn bi_wkv(&self, v: &Var, w: &Var, u: &Var) -> Result<Var> {
        self.wkv_node(v, w, u, false)
    }

    /// Same mechanism evaluated by direct summation (quadratic oracle).
    pub fn bi_wkv_direct(&self, v: &Var, w: &Var, u: &Var) -> Result<Var> {
        self.wkv_node(v, w, u, true)
    }

    fn wkv_node(&self, v: &Var, w: &Var, u: &Var, direct: bool) -> Result<Var> {
        self.same_tape(v)?;
        self.same_tape(w)?;
        self.same_tape(u)?;
        let params = WkvParams::new(w.value(), u.value())?;
        let value = if direct {
            bi_wkv_direct(&self.value(), &v.value(), &params)?
        } else {
            bi_wkv_scan(&self.value(), &v.value(), &params)?
        };
        Ok(self.tape.push(
            Op::BiWkv {
                k: self.id,
                v: v.id,
                w: w.id,
                u: u.id,
                direct,
            },
            value,
        ))
    }

    /// Backpropagates from this scalar var to every leaf.
    pub fn backward(&self) -> Result<Gradients> {
        backward(self)
    }
}

/// Gradient per tape node, indexed by var. Leaves that the loss never
/// touched report zero gradients of the leaf shape.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Tensor {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &var.tape.inner),
            "gradient lookup from a different tape"
        );
        match &self.grads[var.id] {
            Some(t) => t.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }
}

fn grad_slot(slots: &mut [Option<CountedBuf>], id: usize, len: usize) -> &mut [f64] {
    if slots[id].is_none() {
        slots[id] = Some(CountedBuf::zeroed(len));
    }
    slots[id].as_mut().unwrap().as_mut_slice()
}

fn backward(loss: &Var) -> Result<Gradients> {
    let inner = loss.tape.inner.borrow();
    let nodes = &inner.nodes;
    if nodes[loss.id].value.len() != 1 {
        return Err(Error::contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        )));
    }

    let mut grads: Vec<Option<CountedBuf>> = (0..nodes.len()).map(|_| None).collect();
    grads[loss.id] = Some(CountedBuf::from_vec(vec![1.0]));

    for id in (0..=loss.id).rev() {
        if grads[id].is_none() {
            continue;
        }
        let node = &nodes[id];
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        // Parents always precede their node, so split the grad buffer to
        // borrow this node's gradient while writing into parents.
        let (parents_side, rest) = grads.split_at_mut(id);
        let g_buf = rest[0].take().unwrap();
        let g = g_buf.as_slice();

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                let len = g.len();
                for (o, &gv) in grad_slot(parents_side, *a, len).iter_mut().zip(g) {
                    *o += gv;
                }
                for (o, &gv) in grad_slot(parents_side, *b, len).iter_mut().zip(g) {
                    *o += gv;
                }
            }
            Op::Sub(a, b) => {
                let len = g.len();
                for (o, &gv) in grad_slot(parents_side, *a, len).iter_mut().zip(g) {
                    *o += gv;
                }
                for (o, &gv) in grad_slot(parents_side, *b, len).iter_mut().zip(g) {
                    *o -= gv;
                }
            }
            Op::Mul(a, b) => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                let len = g.len();
                {
                    let ga = grad_slot(parents_side, *a, len);
                    for i in 0..len {
                        ga[i] += g[i] * bv[i];
                    }
                }
                let gb = grad_slot(parents_side, *b, len);
                for i in 0..len {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::Scale(a, c) => {
                let len = g.len();
                let ga = grad_slot(parents_side, *a, len);
                for i in 0..len {
                    ga[i] += g[i] * c;
                }
            }
            Op::Matmul(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let (m, kk) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let ad = av.data();
                let bd = bv.data();
                {
                    // gA[i,p] += sum_j g[i,j] * B[p,j]
                    let ga = grad_slot(parents_side, *a, m * kk);
                    for i in 0..m {
                        for p in 0..kk {
                            let mut acc = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bd[p * n..(p + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            ga[i * kk + p] += acc;
                        }
                    }
                }
                // gB[p,j] += sum_i A[i,p] * g[i,j]
                let gb = grad_slot(parents_side, *b, kk * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..kk {
                        let aip = ad[i * kk + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            gbrow[j] += aip * grow[j];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                let len = g.len();
                let ga = grad_slot(parents_side, *a, len);
                for i in 0..len {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
            Op::ReluSq(a) => {
                let x = nodes[*a].value.data();
                let len = g.len();
                let ga = grad_slot(parents_side, *a, len);
                for i in 0..len {
                    ga[i] += g[i] * 2.0 * x[i].max(0.0);
                }
            }
            Op::Sum(a) => {
                let len = nodes[*a].value.len();
                let gv = g[0];
                let ga = grad_slot(parents_side, *a, len);
                for o in ga.iter_mut() {
                    *o += gv;
                }
            }
            Op::Mean(a) => {
                let len = nodes[*a].value.len();
                let gv = g[0] / len as f64;
                let ga = grad_slot(parents_side, *a, len);
                for o in ga.iter_mut() {
                    *o += gv;
                }
            }
            Op::Reshape(a) => {
                let len = g.len();
                let ga = grad_slot(parents_side, *a, len);
                for i in 0..len {
                    ga[i] += g[i];
                }
            }
            Op::AddRow { x, row } => {
                let len = g.len();
                let cols = nodes[*row].value.len();
                {
                    let gx = grad_slot(parents_side, *x, len);
                    for i in 0..len {
                        gx[i] += g[i];
                    }
                }
                let gr = grad_slot(parents_side, *row, cols);
                for (i, &gv) in g.iter().enumerate() {
                    gr[i % cols] += gv;
                }
            }
            Op::LerpRows { x, y, mu } => {
                let xv = nodes[*x].value.data();
                let yv = nodes[*y].value.data();
                let mv = nodes[*mu].value.data();
                let cols = mv.len();
                let len = g.len();
                {
                    let gx = grad_slot(parents_side, *x, len);
                    for i in 0..len {
                        gx[i] += g[i] * mv[i % cols];
                    }
                }
                {
                    let gy = grad_slot(parents_side, *y, len);
                    for i in 0..len {
                        gy[i] += g[i] * (1.0 - mv[i % cols]);
                    }
                }
                let gm = grad_slot(parents_side, *mu, cols);
                for i in 0..len {
                    gm[i % cols] += g[i] * (xv[i] - yv[i]);
                }
            }
            Op::SliceRows { x, start } => {
                let xv = &nodes[*x].value;
                let cols = xv.shape()[1];
                let gx = grad_slot(parents_side, *x, xv.len());
                for (i, &gv) in g.iter().enumerate() {
                    gx[start * cols + i] += gv;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for part in parts {
                    let len = nodes[*part].value.len();
                    let gp = grad_slot(parents_side, *part, len);
                    for i in 0..len {
                        gp[i] += g[offset + i];
                    }
                    offset += len;
                }
            }
            Op::QShift {
                x,
                grid,
                shift,
                gamma,
            } => {
                let g_tensor = Tensor::from_vec_unchecked(node.value.shape().to_vec(), g.to_vec());
                let gx_t = q_shift_adjoint(&g_tensor, *grid, *shift, *gamma)?;
                let gx = grad_slot(parents_side, *x, gx_t.len());
                for (o, &gv) in gx.iter_mut().zip(gx_t.data()) {
                    *o += gv;
                }
            }
            Op::BiWkv { k, v, w, u, direct } => {
                let params = WkvParams::new(nodes[*w].value.clone(), nodes[*u].value.clone())?;
                let upstream = Tensor::from_vec_unchecked(node.value.shape().to_vec(), g.to_vec());
                let wg = if *direct {
                    bi_wkv_direct_backward(&nodes[*k].value, &nodes[*v].value, &params, &upstream)?
                } else {
                    bi_wkv_backward(&nodes[*k].value, &nodes[*v].value, &params, &upstream)?
                };
                for (pid, grad) in [(*k, &wg.k), (*v, &wg.v), (*w, &wg.w), (*u, &wg.u)] {
                    let gp = grad_slot(parents_side, pid, grad.len());
                    for (o, &gv) in gp.iter_mut().zip(grad.data()) {
                        *o += gv;
                    }
                }
            }
        }
    }

    let grads_out: Vec<Option<Tensor>> = grads
        .into_iter()
        .enumerate()
        .map(|(i, buf)| buf.map(|b| Tensor::from_buf_unchecked(nodes[i].value.shape().to_vec(), b)))
        .collect();
    drop(inner);
    Ok(Gradients {
        tape: loss.tape.clone(),
        grads: grads_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = x.sum();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = x.mul(&x).unwrap().sum();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let loss = x.sum();
        let grads = loss.backward().unwrap();
        let gu = grads.get(&unused);
        assert_eq!(gu.shape(), &[4]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x + x) -> grad 2 per element
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![5.0, -1.0]).unwrap());
        let loss = x.add(&x).unwrap().sum();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_result() {
        // loss = sum(A B); dA = ones * B^T, dB = A^T * ones
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let loss = a.matmul(&b).unwrap().sum();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&a).data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(grads.get(&b).data(), &[4.0, 6.0]);
    }

    #[test]
    fn cross_tape_ops_are_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.leaf(Tensor::new(vec![1], vec![1.0]).unwrap());
        let y = t2.leaf(Tensor::new(vec![1], vec![1.0]).unwrap());
        assert!(matches!(x.add(&y), Err(Error::Contract(_))));
    }
}
