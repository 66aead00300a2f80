//! Dense row-major f64 tensors with deterministic operations.
//!
//! Tensors are immutable after construction and cheap to clone (the buffer is
//! shared). Every reduction uses a fixed left-to-right accumulation order so
//! results are bit-reproducible run to run.

use std::sync::Arc;

use crate::arena::CountedBuf;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<CountedBuf>,
}

fn shape_len(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &e in shape {
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::dim(format!("shape {shape:?} overflows")))?;
    }
    Ok(n)
}

impl Tensor {
    /// Builds a tensor, validating that the data length matches the shape and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = shape_len(&shape)?;
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} expects {expected} values, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self::from_vec_unchecked(shape, data))
    }

    /// Internal constructor trusted on shape. Finiteness is enforced at the
    /// fallible operation boundaries instead, so transient overflow surfaces
    /// as an error value rather than a panic.
    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape_len(&shape).unwrap(), data.len());
        Tensor {
            shape,
            data: Arc::new(CountedBuf::from_vec(data)),
        }
    }

    pub(crate) fn from_buf_unchecked(shape: Vec<usize>, buf: CountedBuf) -> Self {
        debug_assert_eq!(shape_len(&shape).unwrap(), buf.len());
        Tensor {
            shape,
            data: Arc::new(buf),
        }
    }

    fn finite_or(self, op: &str) -> Result<Tensor> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape_len(&shape).expect("shape overflow");
        Tensor {
            shape,
            data: Arc::new(CountedBuf::zeroed(n)),
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = shape_len(&shape)?;
        Tensor::new(shape, vec![value; n])
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when the tensor holds exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        self.data.as_slice()
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Same buffer under a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expected = shape_len(&shape)?;
        if expected != self.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} ({} elems) to {shape:?} ({expected} elems)",
                self.shape,
                self.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, op)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec_unchecked(self.shape.clone(), data).finite_or(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_vec_unchecked(self.shape.clone(), data)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// Squared ReLU: `max(x, 0)^2`.
    pub fn relu_sq(&self) -> Tensor {
        self.map(|v| {
            let r = v.max(0.0);
            r * r
        })
    }

    /// Sum of all elements, accumulated left to right.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in self.data() {
            acc += v;
        }
        acc
    }

    pub fn mean(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.sum() / self.len() as f64
    }

    /// Matrix product of two rank-2 tensors with fixed accumulation order
    /// (ascending over the inner dimension).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dim(format!(
                "matmul expects rank-2 operands, got {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row_out = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let row_b = &b[p * n..(p + 1) * n];
                for (o, &bv) in row_out.iter_mut().zip(row_b) {
                    *o += aip * bv;
                }
            }
        }
        Tensor::from_vec_unchecked(vec![m, n], out).finite_or("matmul")
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim(format!(
                "transpose expects rank 2, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        Ok(Tensor::from_vec_unchecked(vec![n, m], out))
    }

    fn axis_split(&self, axis: usize, op: &str) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::dim(format!(
                "{op}: axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let lanes = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        Ok((outer, lanes, inner))
    }

    fn reduce_axis(&self, axis: usize, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (outer, lanes, inner) = self.axis_split(axis, op)?;
        if lanes == 0 {
            return Err(Error::EmptyInput("reduction over an empty axis"));
        }
        let data = self.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = data[o * lanes * inner + i];
                for j in 1..lanes {
                    acc = f(acc, data[(o * lanes + j) * inner + i]);
                }
                out.push(acc);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::from_vec_unchecked(shape, out).finite_or(op)
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, "sum_axis", |a, b| a + b)
    }

    /// Maximum along one axis; the axis is removed from the shape.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, "max_axis", f64::max)
    }

    /// Softmax along one axis, stabilized by per-lane max subtraction.
    /// Each lane sums to 1 within 1e-12 and every output lies in (0, 1].
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, lanes, inner) = self.axis_split(axis, "softmax_axis")?;
        if lanes == 0 {
            return Err(Error::EmptyInput("softmax over an empty axis"));
        }
        let data = self.data();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * lanes + j) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..lanes {
                    m = m.max(data[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..lanes {
                    let e = (data[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..lanes {
                    out[at(j)] /= z;
                }
            }
        }
        Ok(Tensor::from_vec_unchecked(self.shape.clone(), out))
    }
}

/// Selector for the elementwise / axis-reduction suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapReduce {
    Exp,
    Sigmoid,
    ReluSq,
    SumAxis(usize),
    MaxAxis(usize),
    SoftmaxAxis(usize),
}

/// Applies one member of the map/reduce suite.
pub fn map_reduce(x: &Tensor, kind: MapReduce) -> Result<Tensor> {
    match kind {
        MapReduce::Exp => x.exp().finite_or("exp"),
        MapReduce::Sigmoid => Ok(x.sigmoid()),
        MapReduce::ReluSq => x.relu_sq().finite_or("relu_sq"),
        MapReduce::SumAxis(a) => x.sum_axis(a),
        MapReduce::MaxAxis(a) => x.max_axis(a),
        MapReduce::SoftmaxAxis(a) => x.softmax_axis(a),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
