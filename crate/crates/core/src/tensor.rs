//! Dense row-major tensors and the forward kernels the tape builds on.
//!
//! A [`Tensor`] is a shape plus a contiguous buffer. It carries no gradient
//! state of its own; differentiation happens on a [`crate::tape::Tape`], which
//! records tensors as leaves or operation outputs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 5;

/// Scalar element type. Training runs in `f32`; gradient checks run in `f64`.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Width in bytes, also the element code of the volume file format.
    const WIDTH: u8;

    /// `c = a·b (+ c if accumulate)` where `a` is logically `[m, k]` and `b` is
    /// logically `[k, n]`. `a_t`/`b_t` mean the buffer holds the transpose.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    fn cast<U: Element>(self) -> U {
        U::from_f64(self.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan)
    }

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

macro_rules! impl_element {
    ($t:ty, $width:expr, $gemm:path) => {
        impl Element for $t {
            const WIDTH: u8 = $width;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert_eq!(a.len(), m * k);
                assert_eq!(b.len(), k * n);
                assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_t {
                    (1, m as isize)
                } else {
                    (k as isize, 1)
                };
                let (rsb, csb) = if b_t {
                    (1, k as isize)
                } else {
                    (n as isize, 1)
                };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above guarantee every strided access stays
                // inside the three buffers, and `c` does not alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $width];
                buf.copy_from_slice(&bytes[..$width]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_element!(f32, 4, matrixmultiply::sgemm);
impl_element!(f64, 8, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview = &self.data[..self.data.len().min(8)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("len", &self.data.len())
            .finish()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::UnsupportedRank(shape.len()));
    }
    if shape.contains(&0) {
        return Err(Error::EmptyShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if data.len() != len {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor from `f64` values, the common case in tests and fixtures.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
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

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.cast()).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v.cast()).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        let len = check_shape(new_shape)?;
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: new_shape.to_vec(),
            });
        }
        Ok(Self {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Transposes axes into `axis_order`, then reshapes to `new_shape`. The
    /// result is materialized contiguously.
    pub fn permute_reshape(&self, axis_order: &[usize], new_shape: &[usize]) -> Result<Self> {
        validate_permutation(axis_order, self.rank())?;
        let len = check_shape(new_shape)?;
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: new_shape.to_vec(),
            });
        }
        Ok(Self {
            shape: new_shape.to_vec(),
            data: permute_data(&self.data, &self.shape, axis_order),
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.data,
            false,
            &other.data,
            false,
            &mut out,
            false,
        );
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::RankMismatch {
                expected: 2,
                actual: self.rank(),
            });
        }
        self.permute_reshape(&[1, 0], &[self.shape[1], self.shape[0]])
    }

    /// Row-wise softmax of a rank-2 tensor with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::RankMismatch {
                expected: 2,
                actual: self.rank(),
            });
        }
        if !self.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        let cols = self.shape[1];
        let mut out = self.data.clone();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Maximum absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.cast::<f64>() - b.cast::<f64>()).abs())
            .fold(0.0, f64::max)
    }

    /// Maximum elementwise relative difference, with denominators floored at 1.
    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_rel_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let (a, b) = (a.cast::<f64>(), b.cast::<f64>());
                (a - b).abs() / a.abs().max(b.abs()).max(1.0)
            })
            .fold(0.0, f64::max)
    }
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 {
        return Err(Error::RankMismatch {
            expected: 2,
            actual: a.len(),
        });
    }
    if b.len() != 2 {
        return Err(Error::RankMismatch {
            expected: 2,
            actual: b.len(),
        });
    }
    if a[1] != b[0] {
        return Err(Error::InnerDimMismatch {
            m: a[0],
            k_left: a[1],
            k_right: b[0],
            n: b[1],
        });
    }
    Ok((a[0], a[1], b[1]))
}

pub(crate) fn validate_permutation(order: &[usize], rank: usize) -> Result<()> {
    let mut seen = [false; MAX_RANK];
    let ok = order.len() == rank
        && order.iter().all(|&axis| {
            if axis >= rank || seen[axis] {
                false
            } else {
                seen[axis] = true;
                true
            }
        });
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidPermutation {
            order: order.to_vec(),
            rank,
        })
    }
}

pub(crate) fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inverse = vec![0; order.len()];
    for (position, &axis) in order.iter().enumerate() {
        inverse[axis] = position;
    }
    inverse
}

/// Materializes `data` (laid out as `shape`) with its axes reordered.
pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], order: &[usize]) -> Vec<T> {
    if order.iter().enumerate().all(|(i, &a)| i == a) {
        return data.to_vec();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = index[..rank - 1]
            .iter()
            .zip(&src_strides)
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        for axis in (0..rank - 1).rev() {
            index[axis] += 1;
            if index[axis] < out_shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_checks_length_and_extents() {
        let t = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = Tensor::<f64>::from_f64(&[1], &[5.0]).unwrap();
        assert_eq!(s.item(), 5.0);
        assert!(matches!(
            Tensor::<f64>::from_f64(&[2], &[1.0, 2.0, 3.0]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Tensor::<f64>::zeros(&[2, 0]),
            Err(Error::EmptyShape(_))
        ));
        assert!(matches!(
            Tensor::<f64>::zeros(&[1, 1, 1, 1, 1, 1]),
            Err(Error::UnsupportedRank(6))
        ));
    }

    #[test]
    fn transpose_and_identity_permutation() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tt = t.permute_reshape(&[1, 0], &[3, 2]).unwrap();
        assert_eq!(tt.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let same = t.permute_reshape(&[0, 1], &[2, 3]).unwrap();
        assert_eq!(same, t);
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        // [C=1, D=2, H=2, W=2] with D moved first, flattened to [D, C*H*W].
        let values: Vec<f64> = (0..8).map(|v| v as f64 * 1.5 - 2.0).collect();
        let t = Tensor::<f64>::from_f64(&[1, 2, 2, 2], &values).unwrap();
        let out = t.permute_reshape(&[1, 0, 2, 3], &[2, 4]).unwrap();
        for d in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    let src = d * 4 + h * 2 + w;
                    let dst = d * 4 + h * 2 + w;
                    assert_eq!(out.data()[dst], values[src]);
                }
            }
        }
        // Axis order (C,H,W,D) flattened to [C*H*W, D].
        let m1 = t.permute_reshape(&[0, 2, 3, 1], &[4, 2]).unwrap();
        for d in 0..2 {
            for hw in 0..4 {
                assert_eq!(m1.data()[hw * 2 + d], values[d * 4 + hw]);
            }
        }
    }

    #[test]
    fn permute_errors() {
        let t = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(matches!(
            t.permute_reshape(&[0, 0], &[2, 3]),
            Err(Error::InvalidPermutation { .. })
        ));
        assert!(matches!(
            t.permute_reshape(&[1, 0], &[4, 2]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        let eye = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);
        let bad = Tensor::<f64>::zeros(&[4, 5]).unwrap();
        let left = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(matches!(
            left.matmul(&bad),
            Err(Error::InnerDimMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::<f64>::from_f64(&[3, 2], &[0.0, 0.0, 1.0, 2.0, 1000.0, 1000.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        let d = s.data();
        assert_eq!(&d[0..2], &[0.5, 0.5]);
        assert!((d[2] - 0.268_941_421_369_995).abs() < 1e-12);
        assert!((d[3] - 0.731_058_578_630_005).abs() < 1e-12);
        assert_eq!(&d[4..6], &[0.5, 0.5]);
        let bad = Tensor::<f64>::from_f64(&[1, 2], &[f64::NAN, 0.0]).unwrap();
        assert!(matches!(bad.softmax_rows(), Err(Error::NonFiniteInput)));
    }
}
