//! Dense row-major tensors of `f64` or `Complex64`.

use num_complex::Complex64;

use crate::error::{AdError, Result};

pub type C64 = Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    C128,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    Real(Vec<f64>),
    Complex(Vec<C64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn real(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(AdError::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), storage: Storage::Real(data) })
    }

    pub fn complex(shape: &[usize], data: Vec<C64>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(AdError::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), storage: Storage::Complex(data) })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], storage: Storage::Real(vec![v]) }
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        let n = numel(shape);
        let storage = match dtype {
            DType::F64 => Storage::Real(vec![0.0; n]),
            DType::C128 => Storage::Complex(vec![C64::new(0.0, 0.0); n]),
        };
        Self { shape: shape.to_vec(), storage }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape, other.dtype())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self.storage {
            Storage::Real(_) => DType::F64,
            Storage::Complex(_) => DType::C128,
        }
    }

    pub fn is_complex(&self) -> bool {
        self.dtype() == DType::C128
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    /// Real values; panics on a complex tensor.
    pub fn re(&self) -> &[f64] {
        match &self.storage {
            Storage::Real(v) => v,
            Storage::Complex(_) => panic!("expected a real tensor"),
        }
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        match &mut self.storage {
            Storage::Real(v) => v,
            Storage::Complex(_) => panic!("expected a real tensor"),
        }
    }

    /// Complex values; panics on a real tensor.
    pub fn cx(&self) -> &[C64] {
        match &self.storage {
            Storage::Complex(v) => v,
            Storage::Real(_) => panic!("expected a complex tensor"),
        }
    }

    pub fn cx_mut(&mut self) -> &mut [C64] {
        match &mut self.storage {
            Storage::Complex(v) => v,
            Storage::Real(_) => panic!("expected a complex tensor"),
        }
    }

    pub fn into_re(self) -> Vec<f64> {
        match self.storage {
            Storage::Real(v) => v,
            Storage::Complex(_) => panic!("expected a real tensor"),
        }
    }

    pub fn into_cx(self) -> Vec<C64> {
        match self.storage {
            Storage::Complex(v) => v,
            Storage::Real(_) => panic!("expected a complex tensor"),
        }
    }

    pub fn expect_dtype(&self, dtype: DType, what: &str) -> Result<()> {
        if self.dtype() != dtype {
            return Err(AdError::DType(format!("{what}: expected {dtype:?}, got {:?}", self.dtype())));
        }
        Ok(())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(AdError::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `self += other`, same shape and dtype.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        match (&mut self.storage, &other.storage) {
            (Storage::Real(a), Storage::Real(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (Storage::Complex(a), Storage::Complex(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            _ => panic!("add_assign dtype"),
        }
    }

    pub fn scale(&mut self, s: f64) {
        match &mut self.storage {
            Storage::Real(a) => a.iter_mut().for_each(|x| *x *= s),
            Storage::Complex(a) => a.iter_mut().for_each(|x| *x *= s),
        }
    }

    /// Sum of squared magnitudes.
    pub fn norm_sq(&self) -> f64 {
        match &self.storage {
            Storage::Real(a) => a.iter().map(|x| x * x).sum(),
            Storage::Complex(a) => a.iter().map(|x| x.norm_sqr()).sum(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        match &self.storage {
            Storage::Real(a) => a.iter().fold(0.0, |m, x| m.max(x.abs())),
            Storage::Complex(a) => a.iter().fold(0.0, |m, x| m.max(x.norm())),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        match (&self.storage, &other.storage) {
            (Storage::Real(a), Storage::Real(b)) => a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs())),
            (Storage::Complex(a), Storage::Complex(b)) => {
                a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).norm()))
            }
            _ => f64::INFINITY,
        }
    }

    pub fn all_finite(&self) -> bool {
        match &self.storage {
            Storage::Real(a) => a.iter().all(|x| x.is_finite()),
            Storage::Complex(a) => a.iter().all(|x| x.re.is_finite() && x.im.is_finite()),
        }
    }

    /// Number of real scalars held (complex entries count twice).
    pub fn real_scalars(&self) -> usize {
        match self.dtype() {
            DType::F64 => self.len(),
            DType::C128 => 2 * self.len(),
        }
    }

    /// The `k`-th real scalar, with complex entries laid out as (re, im).
    pub fn scalar_at(&self, k: usize) -> f64 {
        match &self.storage {
            Storage::Real(a) => a[k],
            Storage::Complex(a) => {
                if k % 2 == 0 {
                    a[k / 2].re
                } else {
                    a[k / 2].im
                }
            }
        }
    }

    pub fn set_scalar_at(&mut self, k: usize, v: f64) {
        match &mut self.storage {
            Storage::Real(a) => a[k] = v,
            Storage::Complex(a) => {
                if k % 2 == 0 {
                    a[k / 2].re = v
                } else {
                    a[k / 2].im = v
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::real(&[2, 2], vec![0.0; 3]).is_err());
        let t = Tensor::complex(&[2], vec![C64::new(1.0, 2.0), C64::new(3.0, -1.0)]).unwrap();
        assert_eq!(t.real_scalars(), 4);
        assert_eq!(t.scalar_at(3), -1.0);
    }
}
