//! Dense row-major tensors with f32/f64 storage.
//!
//! Tensors are immutable values: every operation allocates its output. All
//! operations check that their result is finite and surface NaN/Inf as
//! [`Error::NonFinite`] instead of letting it propagate.

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element of a tensor. Implemented for f32 and f64 only. Generic code
/// (the tape, kernels) is written once over `Element` and instantiated per
/// dtype at the boundary.
pub trait Element:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::fmt::Debug
    + 'static
{
    const DTYPE: DType;
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
    /// Wrap a typed buffer into tensor storage.
    fn wrap(data: Vec<Self>) -> Data;
    /// Borrow tensor storage as a typed slice; the caller must have checked
    /// the dtype.
    fn unwrap(data: &Data) -> &[Self];
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $variant:ident) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            fn wrap(data: Vec<Self>) -> Data {
                Data::$variant(data)
            }
            fn unwrap(data: &Data) -> &[Self] {
                match data {
                    Data::$variant(v) => v,
                    other => panic!("expected {} storage, got {}", $dtype, other.dtype()),
                }
            }
        }
    };
}

impl_element!(f32, DType::F32, F32);
impl_element!(f64, DType::F64, F64);

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Data::F32(_) => DType::F32,
            Data::F64(_) => DType::F64,
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Data,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::check_len(&shape, data.len())?;
        Ok(Tensor { shape, data: Data::F64(data) })
    }

    pub fn new_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::check_len(&shape, data.len())?;
        Ok(Tensor { shape, data: Data::F32(data) })
    }

    fn check_len(shape: &[usize], len: usize) -> Result<()> {
        if numel(shape) != len {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                len
            )));
        }
        Ok(())
    }

    pub(crate) fn from_elems<E: Element>(shape: Vec<usize>, data: Vec<E>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data: E::wrap(data) }
    }

    pub(crate) fn elems<E: Element>(&self) -> &[E] {
        E::unwrap(&self.data)
    }

    /// Build from f64 values, converting into the requested dtype.
    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Result<Self> {
        match dtype {
            DType::F64 => Tensor::new_f64(shape, data),
            DType::F32 => Tensor::new_f32(shape, data.into_iter().map(|x| x as f32).collect()),
        }
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let n = numel(&shape);
        let data = match dtype {
            DType::F32 => Data::F32(vec![0.0; n]),
            DType::F64 => Data::F64(vec![0.0; n]),
        };
        Tensor { shape, data }
    }

    pub fn full(shape: Vec<usize>, value: f64, dtype: DType) -> Self {
        let n = numel(&shape);
        let data = match dtype {
            DType::F32 => Data::F32(vec![value as f32; n]),
            DType::F64 => Data::F64(vec![value; n]),
        };
        Tensor { shape, data }
    }

    /// Identity matrix.
    pub fn eye(n: usize, dtype: DType) -> Self {
        let mut t = Tensor::zeros(vec![n, n], dtype);
        for i in 0..n {
            t.set(i * n + i, 1.0);
        }
        t
    }

    /// Seeded Gaussian with the given standard deviation.
    pub fn gaussian(shape: Vec<usize>, std: f64, rng: &mut Rng, dtype: DType) -> Self {
        let n = numel(&shape);
        let vals: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
        Tensor::from_f64(shape, vals, dtype).expect("shape/len consistent by construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a 2-D tensor (1 for a vector).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a 2-D tensor (length for a vector).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn get(&self, idx: usize) -> f64 {
        match &self.data {
            Data::F32(v) => v[idx] as f64,
            Data::F64(v) => v[idx],
        }
    }

    pub fn set(&mut self, idx: usize, value: f64) {
        match &mut self.data {
            Data::F32(v) => v[idx] = value as f32,
            Data::F64(v) => v[idx] = value,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.get(row * self.shape[1] + col)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
        }
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if self.dtype() == dtype {
            return self.clone();
        }
        Tensor::from_f64(self.shape.clone(), self.to_f64_vec(), dtype).expect("same numel")
    }

    /// Same data, new shape (must preserve numel).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Self::check_len(&shape, self.numel())?;
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn all_finite(&self) -> bool {
        match &self.data {
            Data::F32(v) => v.iter().all(|x| x.is_finite()),
            Data::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("output of {op}")))
        }
    }

    /// Max |a - b| over all elements. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        let a = self.to_f64_vec();
        let b = other.to_f64_vec();
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data == other.data
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.to_f64_vec().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Plain matrix product at the tensors' dtype. Used outside the tape
    /// (featurizer application, LoRA weight merging, oracles).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Dimension("matmul needs 2-D operands".into()));
        }
        if self.dtype() != other.dtype() {
            return Err(Error::Dimension("matmul dtype mismatch".into()));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims disagree: {m}x{k} vs {k2}x{n}"
            )));
        }
        fn go<E: Element>(a: &Tensor, b: &Tensor, m: usize, k: usize, n: usize) -> Tensor {
            let out = super::kernels::matmul(a.elems::<E>(), b.elems::<E>(), m, k, n);
            Tensor::from_elems(vec![m, n], out)
        }
        let out = match self.dtype() {
            DType::F32 => go::<f32>(self, other, m, k, n),
            DType::F64 => go::<f64>(self, other, m, k, n),
        };
        out.check_finite("matmul")?;
        Ok(out)
    }

    /// Elementwise sum at the tensors' dtype.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape || self.dtype() != other.dtype() {
            return Err(Error::Dimension("add shape/dtype mismatch".into()));
        }
        fn go<E: Element>(a: &Tensor, b: &Tensor) -> Tensor {
            let out = a
                .elems::<E>()
                .iter()
                .zip(b.elems::<E>())
                .map(|(&x, &y)| x + y)
                .collect();
            Tensor::from_elems(a.shape().to_vec(), out)
        }
        let out = match self.dtype() {
            DType::F32 => go::<f32>(self, other),
            DType::F64 => go::<f64>(self, other),
        };
        out.check_finite("add")?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new_f64(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new_f64(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn dtype_round_trip() {
        let t = Tensor::new_f64(vec![2], vec![1.5, -2.25]).unwrap();
        let t32 = t.to_dtype(DType::F32);
        assert_eq!(t32.dtype(), DType::F32);
        assert_eq!(t32.to_f64_vec(), vec![1.5, -2.25]);
    }

    #[test]
    fn finiteness_is_detected() {
        let t = Tensor::new_f64(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.check_finite("test").is_err());
    }

    #[test]
    fn gaussian_is_seeded() {
        let mut r1 = Rng::new(9);
        let mut r2 = Rng::new(9);
        let a = Tensor::gaussian(vec![4, 4], 0.02, &mut r1, DType::F32);
        let b = Tensor::gaussian(vec![4, 4], 0.02, &mut r2, DType::F32);
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn plain_matmul_matches_hand_expansion() {
        let a = Tensor::new_f64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new_f64(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_f64_vec(), vec![17.0, 39.0]);
    }

    #[test]
    fn identity_matmul_is_identity() {
        let b = Tensor::new_f64(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let id = Tensor::eye(2, DType::F64);
        let c = id.matmul(&b).unwrap();
        assert!(c.bitwise_eq(&b));
    }
}
