//! Dense row-major tensors.
//!
//! Activations are rank-4 NHWC, convolution weights are `[Kh, Kw, Cin, Cout]`,
//! per-channel vectors are rank-1. A tensor never changes shape after it is
//! constructed; kernels build new tensors rather than mutating in place.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("rank {0} is not supported (expected 1, 2 or 4)")]
    BadRank(usize),
    #[error("dimension {index} is zero in {dims:?}")]
    ZeroDim { index: usize, dims: Vec<usize> },
    #[error("dims {dims:?} hold {expected} values but {got} were supplied")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

/// Storage type tag, also used as the on-disk dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Float32 => 1,
            DType::Float64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::Float32),
            2 => Some(DType::Float64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Float64 => 8,
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    /// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// Panics if any slice is too short for the given dimensions and strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite cast")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize + 1
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a_strides.0 >= 0 && a_strides.1 >= 0);
                assert!(b_strides.0 >= 0 && b_strides.1 >= 0);
                assert!(c_strides.0 >= 0 && c_strides.1 >= 0);
                assert!(a.len() >= span(m, k, a_strides), "gemm: A too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: B too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_element!(f32, DType::Float32, matrixmultiply::sgemm);
impl_element!(f64, DType::Float64, matrixmultiply::dgemm);

/// Dense tensor with rank 1, 2 or 4.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        check_dims(dims)?;
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                dims: dims.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self, TensorError> {
        check_dims(dims)?;
        let len = dims.iter().product();
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, TensorError> {
        Self::full(dims, T::zero())
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self, TensorError> {
        check_dims(dims)?;
        let len: usize = dims.iter().product();
        Ok(Self {
            dims: dims.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    /// Internal constructor for kernels that already guarantee the invariants.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
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

    /// NHWC dims of a rank-4 tensor.
    pub fn nhwc(&self) -> Result<[usize; 4], TensorError> {
        match self.dims[..] {
            [n, h, w, c] => Ok([n, h, w, c]),
            _ => Err(TensorError::BadRank(self.dims.len())),
        }
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self, TensorError> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        self.expect_same_dims(other)?;
        Ok(Self::from_parts(
            self.dims.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn expect_same_dims(&self, other: &Self) -> Result<(), TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch(
                self.dims.clone(),
                other.dims.clone(),
            ));
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.dims.clone(),
            self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    /// Rows `[start, start+count)` of the leading (batch) dimension.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self, TensorError> {
        let n = self.dims[0];
        if count == 0 || start + count > n {
            return Err(TensorError::Invalid(format!(
                "batch slice {start}..{} out of range 0..{n}",
                start + count
            )));
        }
        let stride = self.data.len() / n;
        let mut dims = self.dims.clone();
        dims[0] = count;
        Ok(Self::from_parts(
            dims,
            self.data[start * stride..(start + count) * stride].to_vec(),
        ))
    }

    /// Gathers batch rows by index.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self, TensorError> {
        let n = self.dims[0];
        if indices.is_empty() {
            return Err(TensorError::Invalid("empty gather".into()));
        }
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= n {
                return Err(TensorError::Invalid(format!("row {i} out of range 0..{n}")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        Ok(Self::from_parts(dims, data))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(
            f,
            "Tensor<{:?}>{:?} {:?}{}",
            T::DTYPE,
            self.dims,
            preview,
            if self.data.len() > 8 { " .." } else { "" }
        )
    }
}

fn check_dims(dims: &[usize]) -> Result<(), TensorError> {
    if !matches!(dims.len(), 1 | 2 | 4) {
        return Err(TensorError::BadRank(dims.len()));
    }
    if let Some(index) = dims.iter().position(|&d| d == 0) {
        return Err(TensorError::ZeroDim {
            index,
            dims: dims.to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_rank_and_zero_dims() {
        assert_eq!(
            Tensor::<f64>::zeros(&[1, 2, 3]).unwrap_err(),
            TensorError::BadRank(3)
        );
        assert!(matches!(
            Tensor::<f64>::zeros(&[2, 0]),
            Err(TensorError::ZeroDim { index: 1, .. })
        ));
    }

    #[test]
    fn length_must_match_dims() {
        assert!(Tensor::new(&[2, 2], vec![1.0f64; 3]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0f64; 4]).is_ok());
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, (3, 1), &b, (4, 1), 0.0, &mut c, (4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn gather_and_slice_batch() {
        let t = Tensor::<f32>::from_fn(&[3, 1, 1, 2], |i| i as f32).unwrap();
        let s = t.slice_batch(1, 2).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0]);
        let g = t.gather_batch(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
    }
}
