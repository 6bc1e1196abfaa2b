//! Vector-valued smooth maps of the decision vector, with dense Jacobians.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Values and Jacobian (`len` rows, one column per decision variable).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub values: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

impl Evaluation {
    pub fn scalar(&self) -> f64 {
        self.values[0]
    }
}

pub trait SmoothMap: Send + Sync {
    fn len(&self) -> usize;
    fn eval(&self, v: &[f64]) -> Result<Evaluation>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub type MapRef = Arc<dyn SmoothMap>;

/// Picks decision variables by index.
#[derive(Debug, Clone)]
pub struct Select {
    pub indices: Vec<usize>,
}

impl Select {
    pub fn new(indices: Vec<usize>) -> Arc<Self> {
        Arc::new(Self { indices })
    }

    pub fn range(start: usize, len: usize) -> Arc<Self> {
        Self::new((start..start + len).collect())
    }
}

impl SmoothMap for Select {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn eval(&self, v: &[f64]) -> Result<Evaluation> {
        let mut jacobian = DMatrix::zeros(self.indices.len(), v.len());
        let mut values = DVector::zeros(self.indices.len());
        for (r, &i) in self.indices.iter().enumerate() {
            let x = *v.get(i).ok_or_else(|| Error::InvalidArgument(format!("variable index {i} out of range")))?;
            values[r] = x;
            jacobian[(r, i)] = 1.0;
        }
        Ok(Evaluation { values, jacobian })
    }
}

/// `offset + coeffs * v`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub offset: DVector<f64>,
    pub coeffs: DMatrix<f64>,
}

impl Affine {
    pub fn new(offset: DVector<f64>, coeffs: DMatrix<f64>) -> Arc<Self> {
        Arc::new(Self { offset, coeffs })
    }

    pub fn constant(values: &[f64], dim: usize) -> Arc<Self> {
        Self::new(DVector::from_column_slice(values), DMatrix::zeros(values.len(), dim))
    }
}

impl SmoothMap for Affine {
    fn len(&self) -> usize {
        self.offset.len()
    }

    fn eval(&self, v: &[f64]) -> Result<Evaluation> {
        if v.len() != self.coeffs.ncols() {
            return Err(Error::InvalidArgument("affine map dimension mismatch".into()));
        }
        let x = DVector::from_column_slice(v);
        Ok(Evaluation { values: &self.offset + &self.coeffs * x, jacobian: self.coeffs.clone() })
    }
}

/// A map given by a closure returning values and Jacobian.
pub struct FnMap<F> {
    len: usize,
    f: F,
}

impl<F> FnMap<F>
where
    F: Fn(&[f64]) -> Result<Evaluation> + Send + Sync,
{
    pub fn new(len: usize, f: F) -> Arc<Self> {
        Arc::new(Self { len, f })
    }
}

impl<F> SmoothMap for FnMap<F>
where
    F: Fn(&[f64]) -> Result<Evaluation> + Send + Sync,
{
    fn len(&self) -> usize {
        self.len
    }

    fn eval(&self, v: &[f64]) -> Result<Evaluation> {
        (self.f)(v)
    }
}

/// Vertical concatenation of several maps.
pub struct Stack {
    parts: Vec<MapRef>,
}

impl Stack {
    pub fn new(parts: Vec<MapRef>) -> Arc<Self> {
        Arc::new(Self { parts })
    }
}

impl SmoothMap for Stack {
    fn len(&self) -> usize {
        self.parts.iter().map(|p| p.len()).sum()
    }

    fn eval(&self, v: &[f64]) -> Result<Evaluation> {
        let m = self.len();
        let mut values = DVector::zeros(m);
        let mut jacobian = DMatrix::zeros(m, v.len());
        let mut row = 0;
        for p in &self.parts {
            let e = p.eval(v)?;
            let k = e.values.len();
            values.rows_mut(row, k).copy_from(&e.values);
            jacobian.rows_mut(row, k).copy_from(&e.jacobian);
            row += k;
        }
        Ok(Evaluation { values, jacobian })
    }
}

/// Row-wise constant rescaling of a map.
pub struct Scale {
    inner: MapRef,
    factors: DVector<f64>,
}

impl Scale {
    pub fn new(inner: MapRef, factors: Vec<f64>) -> Arc<Self> {
        assert_eq!(inner.len(), factors.len(), "one factor per row");
        Arc::new(Self { inner, factors: DVector::from_vec(factors) })
    }
}

impl SmoothMap for Scale {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn eval(&self, v: &[f64]) -> Result<Evaluation> {
        let mut e = self.inner.eval(v)?;
        for (i, f) in self.factors.iter().enumerate() {
            e.values[i] *= f;
            e.jacobian.row_mut(i).scale_mut(*f);
        }
        Ok(e)
    }
}

/// Central-difference Jacobian of the values of `map`.
pub fn fd_jacobian(map: &dyn SmoothMap, v: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let mut jac = DMatrix::zeros(map.len(), v.len());
    let mut w = v.to_vec();
    for j in 0..v.len() {
        let h = step * v[j].abs().max(1.0);
        w[j] = v[j] + h;
        let plus = map.eval(&w)?.values;
        w[j] = v[j] - h;
        let minus = map.eval(&w)?.values;
        w[j] = v[j];
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_and_stack() {
        let s = Stack::new(vec![Select::new(vec![2, 0]), Affine::constant(&[5.0], 3)]);
        let e = s.eval(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(e.values.as_slice(), &[3.0, 1.0, 5.0]);
        assert_eq!(e.jacobian[(0, 2)], 1.0);
        assert_eq!(e.jacobian[(1, 0)], 1.0);
        assert_eq!(e.jacobian.row(2).sum(), 0.0);
    }

    #[test]
    fn fd_matches_affine() {
        let a = Affine::new(DVector::from_vec(vec![1.0]), DMatrix::from_row_slice(1, 2, &[2.0, -3.0]));
        let j = fd_jacobian(a.as_ref(), &[0.3, 0.7], 1e-6).unwrap();
        assert!((j - DMatrix::from_row_slice(1, 2, &[2.0, -3.0])).amax() < 1e-8);
    }
}
