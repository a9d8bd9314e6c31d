//! Dense tensors and a small reverse-mode autodiff engine.
//!
//! Image tensors use N×C×H×W layout. The engine is deliberately narrow: it
//! provides the handful of layers the hourglass networks need, each with a
//! hand-written backward rule that is checked against finite differences in
//! the test suite.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

pub use graph::{BatchStats, BnMode, Graph, Var};
pub use params::{he_init, Param, ParamStore};

/// Floating point element type. `f32` is used for training, `f64` exists so
/// gradients can be checked numerically.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + 'static
{
    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
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

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
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
                // Bounds: the furthest element touched must lie inside each slice.
                debug_assert!(
                    k == 0 || (m - 1) as isize * rsa + (k - 1) as isize * csa < a.len() as isize
                );
                debug_assert!(
                    k == 0 || (k - 1) as isize * rsb + (n - 1) as isize * csb < b.len() as isize
                );
                debug_assert!(((m - 1) as isize * rsc + (n - 1) as isize * csc) < c.len() as isize);
                unsafe {
                    $gemm(
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
                    );
                }
            }

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// N-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "dims {:?} hold {} elements but {} were given",
                    dims,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as trainable and allocates a zeroed gradient.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Dims as (N, C, H, W); fails for anything that is not rank 4.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                "nchw",
                format!("expected rank-4 tensor, got {:?}", self.dims),
            )),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion between precisions (gradient is dropped).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.dims, dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Copies one batch item out of an N×C×H×W tensor.
    pub fn batch_item(&self, index: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.nchw()?;
        if index >= n {
            return Err(Error::shape(
                "batch_item",
                format!("index {} out of batch {}", index, n),
            ));
        }
        let plane = c * h * w;
        Tensor::from_vec(
            &[1, c, h, w],
            self.data[index * plane..(index + 1) * plane].to_vec(),
        )
    }

    /// Stacks N×C×H×W tensors along the batch axis.
    pub fn stack_batch(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack_batch", "no tensors"))?;
        let (_, c, h, w) = first.nchw()?;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.numel()).sum());
        let mut n = 0;
        for t in items {
            let (tn, tc, th, tw) = t.nchw()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::shape(
                    "stack_batch",
                    format!("{:?} vs {:?}", first.dims, t.dims),
                ));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(&[n, c, h, w], data)
    }
}
