//! Dense row-major tensors and the scalar types they may hold.
//!
//! Feature maps are rank-4 `(batch, channels, height, width)`; convolution
//! kernels are rank-4 `(out, in / groups, kh, kw)`; biases are rank-1.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f32` (inference and
/// training) and `f64` (gradient checks and oracles).
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c <- alpha * a @ b + beta * c` with explicit row/column strides.
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

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
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
                assert!(span(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
                // SAFETY: the asserts above keep every strided access inside the slices.
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
                    )
                }
            }
        }
    };
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    debug_assert!(rs >= 0 && cs >= 0);
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

/// A rank-4 `(batch, channels, height, width)` tensor.
pub type FeatureMap<T = f32> = Tensor<T>;

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.dims)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Shape(format!("degenerate dimensions {dims:?}")));
        }
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dimensions {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        assert!(!dims.is_empty() && !dims.contains(&0), "degenerate dimensions {dims:?}");
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(dims);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a rank-4 feature map, got dimensions {:?}",
                self.dims
            ))),
        }
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {dims:?}", self.dims)));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_dims(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a = *a + b);
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {:?} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn expect_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "dimension mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Index into a rank-4 tensor.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let (_, cs, hs, ws) = (self.dims[0], self.dims[1], self.dims[2], self.dims[3]);
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    /// Batch items `[start, start + count)` of a rank-4 tensor.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        let (n, c, h, w) = self.nchw()?;
        if count == 0 || start + count > n {
            return Err(Error::Shape(format!(
                "batch range {start}..{} outside batch of {n}",
                start + count
            )));
        }
        let item = c * h * w;
        Tensor::new(
            vec![count, c, h, w],
            self.data[start * item..(start + count) * item].to_vec(),
        )
    }

    /// Stack rank-4 tensors with identical `(c, h, w)` along the batch axis.
    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let (_, c, h, w) = first.nchw()?;
        let mut data = Vec::new();
        let mut n_total = 0;
        for t in items {
            let (n, c2, h2, w2) = t.nchw()?;
            if (c2, h2, w2) != (c, h, w) {
                return Err(Error::Shape(format!("cannot stack {:?} with {:?}", first.dims, t.dims)));
            }
            n_total += n;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![n_total, c, h, w], data)
    }
}
