//! Dense row-major N-dimensional arrays.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type a [`Tensor`] can hold. Models train in `f32`; `f64` is used
/// for finite-difference gradient checks.
pub trait Real: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    /// Index of the maximum, stored as a real; ties resolve to the lowest index.
    Argmax,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn volume(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if volume(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                volume(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); volume(shape)],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; volume(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a tensor whose entry at each multi-index is `f(index)`.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n = volume(shape);
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for k in (0..shape.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i[0] == i[1] { T::one() } else { T::zero() })
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major strides; the last axis has stride 1.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for k in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.shape[k + 1];
        }
        strides
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, s)| i >= s) {
            return Err(Error::Shape(format!(
                "index {index:?} invalid for shape {:?}",
                self.shape
            )));
        }
        Ok(index.iter().zip(self.strides()).map(|(i, s)| i * s).sum())
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.flat_index(index)?])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Pairwise `op`; either operand may be a rank-0 scalar.
    pub fn elementwise(&self, other: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
        let apply = |a: T, b: T| match op {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        };
        if op == BinaryOp::Div {
            if let Some(i) = other.data.iter().position(|&b| b == T::zero()) {
                return Err(Error::DivisionByZero(i));
            }
        }
        let (shape, data) = if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| apply(a, b))
                .collect();
            (self.shape.clone(), data)
        } else if other.rank() == 0 {
            let b = other.data[0];
            (self.shape.clone(), self.data.iter().map(|&a| apply(a, b)).collect())
        } else if self.rank() == 0 {
            let a = self.data[0];
            (other.shape.clone(), other.data.iter().map(|&b| apply(a, b)).collect())
        } else {
            return Err(Error::Shape(format!(
                "elementwise {:?} vs {:?}",
                self.shape, other.shape
            )));
        };
        Ok(Tensor { shape, data })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(other, BinaryOp::Div)
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!("transpose of rank {}", self.rank())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Tensor::from_fn(&[c, r], |i| self.data[i[1] * c + i[0]]))
    }

    /// Reduces along `axis`, removing it from the shape.
    pub fn reduce(&self, op: ReduceOp, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if extent == 0 && op != ReduceOp::Sum {
            return Err(Error::Empty("reduction over an empty axis"));
        }
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| self.data[(o * extent + j) * inner + i];
                let v = match op {
                    ReduceOp::Sum => (0..extent).fold(T::zero(), |acc, j| acc + at(j)),
                    ReduceOp::Max => (1..extent).fold(at(0), |acc, j| acc.max(at(j))),
                    ReduceOp::Argmax => {
                        let mut best = 0;
                        for j in 1..extent {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        T::from_f64(best as f64)
                    }
                };
                data.push(v);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Argmax of each row of a rank-2 tensor (lowest index on ties).
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 || self.shape[1] == 0 {
            return Err(Error::Shape(format!("argmax_rows on {:?}", self.shape)));
        }
        Ok(self.data.chunks(self.shape[1]).map(argmax).collect())
    }
}

/// Index of the first maximal entry.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// `c += a (m×k) · b (k×n)`, all row-major.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c += aᵀ · b` where `a` is (p×m) and `b` is (p×n).
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, m: usize, n: usize) {
    for r in 0..p {
        let a_row = &a[r * m..(r + 1) * m];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c = a · bᵀ` where `a` is (m×k) and `b` is (n×k).
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(a_row, b_row);
        }
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Eight independent accumulators so the loop vectorizes.
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] = acc[l] + a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..a.len() {
        s = s + a[i] * b[i];
    }
    acc.iter().fold(s, |x, &y| x + y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn lcg_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        })
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f32>::scalar(1.0).len(), 1);
        assert_eq!(Tensor::<f32>::zeros(&[]).shape(), &[] as &[usize]);
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(t(&[2], &[1., 2.]).add(&t(&[2], &[3., 4.])).unwrap().data(), &[4., 6.]);
        let z = t(&[3], &[1., 2., 3.]).mul(&Tensor::scalar(0.0)).unwrap();
        assert_eq!(z.data(), &[0., 0., 0.]);
        assert_eq!(z.shape(), &[3]);
        let left = Tensor::scalar(6.0f32).div(&t(&[2], &[2., 3.])).unwrap();
        assert_eq!(left.data(), &[3., 2.]);
    }

    #[test]
    fn elementwise_errors() {
        assert!(matches!(
            t(&[2], &[1., 2.]).add(&t(&[3], &[1., 2., 3.])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            t(&[2], &[1., 2.]).div(&t(&[2], &[1., 0.])),
            Err(Error::DivisionByZero(1))
        ));
        assert!(matches!(
            t(&[2], &[1., 2.]).div(&Tensor::scalar(0.0)),
            Err(Error::DivisionByZero(0))
        ));
    }

    #[test]
    fn elementwise_matches_loop_oracle() {
        let a = lcg_tensor(&[2, 3], 1);
        let b = lcg_tensor(&[2, 3], 2).map(|x| if x == 0.0 { 1.0 } else { x });
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
            let got = a.elementwise(&b, op).unwrap();
            for i in 0..2 {
                for j in 0..3 {
                    let (x, y) = (a.get(&[i, j]).unwrap(), b.get(&[i, j]).unwrap());
                    let want = match op {
                        BinaryOp::Add => x + y,
                        BinaryOp::Sub => x - y,
                        BinaryOp::Mul => x * y,
                        BinaryOp::Div => x / y,
                    };
                    assert_eq!(got.get(&[i, j]).unwrap(), want);
                }
            }
        }
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let d = t(&[1, 2], &[1., 2.]).matmul(&t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(d.shape(), &[1, 1]);
        assert_eq!(d.data(), &[11.]);
        assert!(t(&[1, 2], &[1., 2.]).matmul(&a.reshape(&[4, 1]).unwrap()).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = lcg_tensor(&[3, 4], 3);
        let b = lcg_tensor(&[4, 2], 4);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.get(&[i, p]).unwrap() * b.get(&[p, j]).unwrap();
                }
                assert!((c.get(&[i, j]).unwrap() - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_variants_agree() {
        let a = lcg_tensor(&[5, 11], 5);
        let b = lcg_tensor(&[11, 3], 6);
        let want = a.matmul(&b).unwrap();
        let mut tn = vec![0.0; 15];
        gemm_tn(a.transpose().unwrap().data(), b.data(), &mut tn, 11, 5, 3);
        let mut nt = vec![0.0; 15];
        gemm_nt(a.data(), b.transpose().unwrap().data(), &mut nt, 5, 11, 3);
        for i in 0..15 {
            assert!((tn[i] - want.data()[i]).abs() < 1e-12);
            assert!((nt[i] - want.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(a.reduce(ReduceOp::Sum, 1).unwrap().data(), &[3., 7.]);
        let am = t(&[3], &[0.2, 0.5, 0.5]).reduce(ReduceOp::Argmax, 0).unwrap();
        assert_eq!(am.rank(), 0);
        assert_eq!(am.data(), &[1.]);
        assert!(matches!(
            a.reduce(ReduceOp::Max, 2),
            Err(Error::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn reduce_matches_loop_oracle() {
        let a = lcg_tensor(&[4, 5], 7);
        for op in [ReduceOp::Sum, ReduceOp::Max, ReduceOp::Argmax] {
            for axis in 0..2 {
                let got = a.reduce(op, axis).unwrap();
                let other = 1 - axis;
                assert_eq!(got.shape(), &[a.shape()[other]]);
                for o in 0..a.shape()[other] {
                    let vals: Vec<f64> = (0..a.shape()[axis])
                        .map(|j| {
                            let idx = if axis == 0 { [j, o] } else { [o, j] };
                            a.get(&idx).unwrap()
                        })
                        .collect();
                    let want = match op {
                        ReduceOp::Sum => vals.iter().sum(),
                        ReduceOp::Max => vals.iter().cloned().fold(f64::MIN, f64::max),
                        ReduceOp::Argmax => {
                            let m = vals.iter().cloned().fold(f64::MIN, f64::max);
                            vals.iter().position(|&v| v == m).unwrap() as f64
                        }
                    };
                    assert!((got.data()[o] - want).abs() < 1e-12, "{op:?} axis {axis}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn flat_index_reconstructs_entries(shape in prop::collection::vec(1usize..5, 0..5)) {
            let n: usize = shape.iter().product();
            let tensor = Tensor::<f32>::new(shape.clone(), (0..n).map(|i| i as f32).collect()).unwrap();
            let strides = tensor.strides();
            if let Some(last) = strides.last() {
                prop_assert_eq!(*last, 1);
            }
            let rebuilt = Tensor::<f32>::from_fn(&shape, |idx| {
                idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>() as f32
            });
            prop_assert_eq!(rebuilt, tensor);
        }

        #[test]
        fn matmul_identity_both_sides(n in 1usize..6, seed in any::<u64>()) {
            let a = lcg_tensor(&[n, n], seed);
            let id = Tensor::<f64>::identity(n);
            prop_assert_eq!(a.matmul(&id).unwrap(), a.clone());
            prop_assert_eq!(id.matmul(&a).unwrap(), a);
        }

        #[test]
        fn elementwise_commutes_with_transpose(r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
            let a = lcg_tensor(&[r, c], seed);
            let b = lcg_tensor(&[r, c], seed ^ 0xdead).map(|x| x + 3.0);
            for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
                let lhs = a.elementwise(&b, op).unwrap().transpose().unwrap();
                let rhs = a.transpose().unwrap().elementwise(&b.transpose().unwrap(), op).unwrap();
                prop_assert_eq!(lhs, rhs);
            }
        }
    }
}
