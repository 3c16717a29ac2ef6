use nalgebra::{DMatrix, DVector};

use super::poly::{Polynomial, PolynomialJson};
use crate::error::{Error, Result};

/// A nonzero homogeneous polynomial of degree `k >= 2`.
///
/// Besides the coefficient table this keeps a sparse copy of every monomial
/// (`(variable, exponent)` pairs) so that evaluation, gradients and Hessians
/// cost time proportional to the support rather than to the dimension.
#[derive(Debug, Clone)]
pub struct HomogeneousPoly {
    degree: u32,
    poly: Polynomial,
    sparse: Vec<(f64, Vec<(usize, u32)>)>,
}

impl PartialEq for HomogeneousPoly {
    fn eq(&self, other: &Self) -> bool {
        self.degree == other.degree && self.poly == other.poly
    }
}

impl HomogeneousPoly {
    pub fn new(poly: Polynomial) -> Result<Self> {
        if poly.is_zero() {
            return Err(Error::InvalidInput("homogeneous polynomial is zero".into()));
        }
        let degree = poly.degree();
        if degree < 2 {
            return Err(Error::InvalidInput(format!(
                "homogeneous polynomial must have degree >= 2, got {degree}"
            )));
        }
        if let Some((e, _)) = poly.terms().find(|(e, _)| e.iter().sum::<u32>() != degree) {
            return Err(Error::InvalidInput(format!(
                "monomial {e:?} does not have total degree {degree}"
            )));
        }
        let sparse = poly
            .terms()
            .map(|(e, c)| {
                let support = e
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x > 0)
                    .map(|(i, &x)| (i, x))
                    .collect();
                (c, support)
            })
            .collect();
        Ok(Self {
            degree,
            poly,
            sparse,
        })
    }

    pub fn from_terms<I>(dim: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        Self::new(Polynomial::from_terms(dim, terms)?)
    }

    pub fn from_json(json: &PolynomialJson) -> Result<Self> {
        Self::new(Polynomial::from_json(json)?)
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.poly.dim()
    }

    pub fn as_polynomial(&self) -> &Polynomial {
        &self.poly
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.poly.max_abs_coefficient()
    }

    /// Euclidean norm of the coefficient vector.
    pub fn coefficient_norm(&self) -> f64 {
        self.sparse.iter().map(|(c, _)| c * c).sum::<f64>().sqrt()
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        self.sparse
            .iter()
            .map(|(c, m)| m.iter().fold(*c, |acc, &(i, e)| acc * v[i].powi(e as i32)))
            .sum()
    }

    pub fn gradient(&self, v: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for (c, m) in &self.sparse {
            for (a, &(i, ei)) in m.iter().enumerate() {
                let mut prod = c * f64::from(ei) * v[i].powi(ei as i32 - 1);
                for (b, &(j, ej)) in m.iter().enumerate() {
                    if a != b {
                        prod *= v[j].powi(ej as i32);
                    }
                }
                g[i] += prod;
            }
        }
        g
    }

    pub fn hessian(&self, v: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for (c, m) in &self.sparse {
            for (a, &(i, ei)) in m.iter().enumerate() {
                for (b, &(j, ej)) in m.iter().enumerate().skip(a) {
                    let mut prod = *c;
                    if a == b {
                        if ei < 2 {
                            continue;
                        }
                        prod *= f64::from(ei * (ei - 1)) * v[i].powi(ei as i32 - 2);
                    } else {
                        prod *= f64::from(ei) * v[i].powi(ei as i32 - 1);
                        prod *= f64::from(ej) * v[j].powi(ej as i32 - 1);
                    }
                    for (l, &(q, eq)) in m.iter().enumerate() {
                        if l != a && l != b {
                            prod *= v[q].powi(eq as i32);
                        }
                    }
                    h[(i, j)] += prod;
                    if i != j {
                        h[(j, i)] += prod;
                    }
                }
            }
        }
        h
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        Self::new(self.poly.scale(s))
    }

    pub fn negate(&self) -> Self {
        Self::new(self.poly.scale(-1.0)).expect("negation preserves homogeneity")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_general_polynomial_derivatives() {
        let p = HomogeneousPoly::from_terms(
            3,
            vec![
                (vec![1, 1, 1], -1.0),
                (vec![3, 0, 0], 0.5),
                (vec![0, 2, 1], 2.0),
            ],
        )
        .unwrap();
        let v = [0.3, -0.7, 1.1];
        let g1 = p.gradient(&v);
        let g2 = p.as_polynomial().gradient(&v);
        assert!((g1 - g2).norm() < 1e-14);
        let h1 = p.hessian(&v);
        let h2 = p.as_polynomial().hessian(&v);
        assert!((h1 - h2).norm() < 1e-14);
    }

    #[test]
    fn rejects_mixed_degrees() {
        assert!(HomogeneousPoly::from_terms(2, vec![(vec![2, 0], 1.0), (vec![1, 0], 1.0)]).is_err());
        assert!(HomogeneousPoly::from_terms(2, vec![(vec![1, 0], 1.0)]).is_err());
        assert!(HomogeneousPoly::from_terms(2, Vec::new()).is_err());
    }
}
