use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major array. Storage is reference counted, so clones are cheap
/// and a tensor without a tape record is safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::ValueCount {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(&[], v)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        let d = t.data_mut();
        for i in 0..n {
            d[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    /// Row vector `[1, n]`.
    pub fn row(values: Vec<T>) -> Self {
        let n = values.len();
        Self {
            shape: vec![1, n],
            data: Arc::new(values),
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&e| e == 1)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if n != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other * s`.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a = *a + b * s;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// General matrix product with optional transposition of either operand,
    /// without materialising the transpose.
    pub fn matmul_ex(&self, trans_a: bool, other: &Self, trans_b: bool) -> Result<Self> {
        let (ar, ac) = self.dims2("matmul")?;
        let (br, bc) = other.dims2("matmul")?;
        let (m, k, rsa, csa) = if trans_a {
            (ac, ar, 1isize, ac as isize)
        } else {
            (ar, ac, ac as isize, 1isize)
        };
        let (k2, n, rsb, csb) = if trans_b {
            (bc, br, 1isize, bc as isize)
        } else {
            (br, bc, bc as isize, 1isize)
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: strides describe the row-major buffers checked above.
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    self.data.as_ptr(),
                    rsa,
                    csa,
                    other.data.as_ptr(),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Self::new(&[m, n], out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_ex(false, other, false)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let src = self.data();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(src[i * c + j]);
            }
        }
        Self::new(&[c, r], out)
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_rows")?;
        if start > end || end > r {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                start,
                end,
                extent: r,
            });
        }
        Self::new(&[end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_cols")?;
        if start > end || end > c {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                start,
                end,
                extent: c,
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Self::new(&[r, w], out)
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let (r0, c0) = first.dims2("concat")?;
        match axis {
            0 => {
                let mut rows = 0;
                let mut out = Vec::new();
                for p in parts {
                    let (r, c) = p.dims2("concat")?;
                    if c != c0 {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            left: first.shape.clone(),
                            right: p.shape.clone(),
                        });
                    }
                    rows += r;
                    out.extend_from_slice(p.data());
                }
                Self::new(&[rows, c0], out)
            }
            1 => {
                let mut cols = 0;
                for p in parts {
                    let (r, c) = p.dims2("concat")?;
                    if r != r0 {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            left: first.shape.clone(),
                            right: p.shape.clone(),
                        });
                    }
                    cols += c;
                }
                let mut out = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for p in parts {
                        let c = p.shape[1];
                        out.extend_from_slice(&p.data[i * c..(i + 1) * c]);
                    }
                }
                Self::new(&[r0, cols], out)
            }
            _ => Err(TensorError::Invalid(format!("concat axis {axis} unsupported"))),
        }
    }

    /// Size of the value buffer in bytes.
    pub fn nbytes(&self) -> usize {
        self.numel() * T::DTYPE.size_of()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                    .collect(),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = a.dims2("t").unwrap();
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at2(i, p) * b.at2(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn value_count_checked() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn identity_and_annihilator() {
        let mut rng = Rng::seed(1);
        let x = rng.normal_tensor::<f64>(&[3, 5], 1.0);
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
        let z = x.matmul(&Tensor::zeros(&[5, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::seed(7);
        let a = rng.normal_tensor::<f64>(&[4, 3], 1.0);
        let b = rng.normal_tensor::<f64>(&[3, 2], 1.0);
        let got = a.matmul(&b).unwrap();
        for (g, w) in got.data().iter().zip(naive(&a, &b)) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn transposed_operands() {
        let mut rng = Rng::seed(3);
        let a = rng.normal_tensor::<f64>(&[5, 4], 1.0);
        let b = rng.normal_tensor::<f64>(&[6, 4], 1.0);
        let got = a.matmul_ex(false, &b, true).unwrap();
        let want = naive(&a, &b.transpose().unwrap());
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() <= 1e-12);
        }
        let got = a.matmul_ex(true, &a, false).unwrap();
        let want = naive(&a.transpose().unwrap(), &a);
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = Tensor::<f64>::zeros(&[2, 3])
            .matmul(&Tensor::zeros(&[2, 3]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut rng = Rng::seed(5);
        let a = rng.normal_tensor::<f64>(&[3, 4], 1.0);
        let left = a.slice_cols(0, 1).unwrap();
        let right = a.slice_cols(1, 4).unwrap();
        assert_eq!(Tensor::concat(&[&left, &right], 1).unwrap(), a);
        let top = a.slice_rows(0, 2).unwrap();
        let bottom = a.slice_rows(2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&top, &bottom], 0).unwrap(), a);
    }
}
