//! Dense tensors, a reverse-mode tape, Adam, and a finite-difference oracle.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::{Error, Result};

pub mod gradcheck;
pub mod optim;
pub mod tape;

pub use optim::{Adam, AdamConfig, Parameter};
pub use tape::{Grads, Tape, Var};

/// Element kind of a tensor. `F64` is used for gradient checks and
/// deterministic runs, `F32` for training and benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElemKind {
    F32,
    F64,
}

impl ElemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ElemKind::F32 => "f32",
            ElemKind::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(ElemKind::F32),
            "f64" => Some(ElemKind::F64),
            _ => None,
        }
    }
}

/// Real scalar the whole stack is generic over.
pub trait Float:
    Copy
    + Default
    + Debug
    + Display
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const KIND: ElemKind;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    /// `c = alpha * a·b + beta * c` over row-major strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_float {
    ($t:ty, $kind:expr, $exp:path, $ln:path, $sqrt:path, $gemm:path) => {
        impl Float for $t {
            const KIND: ElemKind = $kind;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                $exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                $ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                $sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(span(m, k, rsa, csa) as usize <= a.len());
                assert!(span(k, n, rsb, csb) as usize <= b.len());
                assert!(span(m, n, rsc, csc) as usize <= c.len());
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
            }
        }
    };
}

// Bounds are asserted by `Float::gemm` before these are reached; strides are
// never negative.
#[allow(unsafe_code)]
mod gemm_shim {

    #[allow(clippy::too_many_arguments)]
    pub fn sgemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn dgemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl_float!(
    f32,
    ElemKind::F32,
    libm::expf,
    libm::logf,
    libm::sqrtf,
    gemm_shim::sgemm
);
impl_float!(f64, ElemKind::F64, libm::exp, libm::log, libm::sqrt, gemm_shim::dgemm);

/// Row-major `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub fn matmul_into<F: Float>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    if k == 0 {
        out[..m * n].fill(F::ZERO);
        return;
    }
    F::gemm(
        m,
        k,
        n,
        F::ONE,
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        F::ZERO,
        out,
        n as isize,
        1,
    );
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Like [`Tensor::new`] but rejects non-finite elements.
    pub fn checked(shape: &[usize], data: Vec<F>, op: &'static str) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| F::from_f64(x)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::ONE;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a rank-2 tensor; a vector is a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => (self.shape[0], self.data.len() / self.shape[0]),
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let (_, n) = self.dims2();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(x.to_f64())).collect(),
        }
    }

    /// Plain (untaped) matrix product.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![F::ZERO; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::checked(&[m, n], out, "matmul")
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a.to_f64() - b.to_f64()))
            .fold(0.0, f64::max)
    }
}

/// Numerically stable softmax of one row, written into `out`. Returns the
/// log-sum-exp of the row.
pub fn softmax_row<F: Float>(row: &[F], out: &mut [F]) -> F {
    let mut max = row[0];
    for &x in &row[1..] {
        max = max.max(x);
    }
    let mut sum = F::ZERO;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = F::ONE / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    max + sum.ln()
}

#[inline]
pub fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}
