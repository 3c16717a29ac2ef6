//! Sparse multivariate polynomials over `f64`.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A multivariate polynomial in `dim` variables, stored as a map from
/// exponent vectors to coefficients. Zero coefficients are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    dim: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

/// One serialized monomial.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TermJson {
    pub exps: Vec<u32>,
    pub coef: f64,
}

/// Wire format: `{"dim": d, "terms": [{"exps": [..], "coef": x}, ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PolynomialJson {
    pub dim: usize,
    pub terms: Vec<TermJson>,
}

fn binomial(n: u32, k: u32) -> f64 {
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * f64::from(n - i) / f64::from(i + 1);
    }
    acc
}

impl Polynomial {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        let mut p = Self::zero(dim);
        p.add_term(vec![0; dim], c);
        p
    }

    /// The coordinate function `w_i`.
    pub fn variable(dim: usize, i: usize) -> Self {
        let mut exps = vec![0; dim];
        exps[i] = 1;
        let mut p = Self::zero(dim);
        p.add_term(exps, 1.0);
        p
    }

    /// Builds a polynomial from `(exponents, coefficient)` pairs, merging
    /// duplicates. Fails on wrong exponent length or non-finite coefficients.
    pub fn from_terms<I>(dim: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        let mut p = Self::zero(dim);
        for (exps, c) in terms {
            if exps.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "monomial has {} exponents, expected {dim}",
                    exps.len()
                )));
            }
            if !c.is_finite() {
                return Err(Error::InvalidInput("non-finite coefficient".into()));
            }
            p.add_term(exps, c);
        }
        Ok(p)
    }

    pub fn from_json(json: &PolynomialJson) -> Result<Self> {
        Self::from_terms(
            json.dim,
            json.terms.iter().map(|t| (t.exps.clone(), t.coef)),
        )
    }

    pub fn to_json(&self) -> PolynomialJson {
        PolynomialJson {
            dim: self.dim,
            terms: self
                .terms
                .iter()
                .map(|(e, &c)| TermJson {
                    exps: e.clone(),
                    coef: c,
                })
                .collect(),
        }
    }

    pub(crate) fn add_term(&mut self, exps: Vec<u32>, c: f64) {
        if c == 0.0 {
            return;
        }
        match self.terms.entry(exps) {
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if *o.get() == 0.0 {
                    o.remove();
                }
            }
            Entry::Vacant(v) => {
                v.insert(c);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u32], f64)> {
        self.terms.iter().map(|(e, &c)| (e.as_slice(), c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, exps: &[u32]) -> f64 {
        self.terms.get(exps).copied().unwrap_or(0.0)
    }

    /// Total degree; zero for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|e| e.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn eval(&self, w: &[f64]) -> f64 {
        debug_assert_eq!(w.len(), self.dim);
        self.terms
            .iter()
            .map(|(e, &c)| c * monomial_value(e, w))
            .sum()
    }

    pub fn gradient(&self, w: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim);
        for (e, &c) in &self.terms {
            for (i, &ei) in e.iter().enumerate() {
                if ei == 0 {
                    continue;
                }
                let mut prod = c * f64::from(ei) * w[i].powi(ei as i32 - 1);
                for (j, &ej) in e.iter().enumerate() {
                    if j != i && ej > 0 {
                        prod *= w[j].powi(ej as i32);
                    }
                }
                g[i] += prod;
            }
        }
        g
    }

    pub fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        let n = self.dim;
        let mut h = DMatrix::zeros(n, n);
        for (e, &c) in &self.terms {
            let support: Vec<usize> = (0..n).filter(|&i| e[i] > 0).collect();
            for &i in &support {
                for &j in &support {
                    if j < i {
                        continue;
                    }
                    let mut prod = c;
                    for &l in &support {
                        let el = e[l] as i32;
                        let drop = i32::from(l == i) + i32::from(l == j);
                        if el < drop {
                            prod = 0.0;
                            break;
                        }
                        let factor = match drop {
                            0 => 1.0,
                            1 => f64::from(el),
                            _ => f64::from(el * (el - 1)),
                        };
                        prod *= factor * w[l].powi(el - drop);
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

    pub fn scale(&self, s: f64) -> Self {
        let mut p = Self::zero(self.dim);
        for (e, &c) in &self.terms {
            p.add_term(e.clone(), c * s);
        }
        p
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim, other.dim);
        let mut p = self.clone();
        for (e, &c) in &other.terms {
            p.add_term(e.clone(), c);
        }
        p
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim, other.dim);
        let mut p = Self::zero(self.dim);
        for (ea, &ca) in &self.terms {
            for (eb, &cb) in &other.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                p.add_term(e, ca * cb);
            }
        }
        p
    }

    /// Expansion around `center`: returns `q` with `q(h) = self(center + h)`.
    pub fn shift(&self, center: &[f64]) -> Self {
        debug_assert_eq!(center.len(), self.dim);
        let mut out = Self::zero(self.dim);
        for (e, &c) in &self.terms {
            // partial expansions: list of (exponent vector, coefficient)
            let mut partial: Vec<(Vec<u32>, f64)> = vec![(vec![0; self.dim], c)];
            for (i, &ei) in e.iter().enumerate() {
                if ei == 0 {
                    continue;
                }
                let mut next = Vec::with_capacity(partial.len() * (ei as usize + 1));
                for (pe, pc) in &partial {
                    for j in 0..=ei {
                        let w = binomial(ei, j) * center[i].powi((ei - j) as i32);
                        if w == 0.0 {
                            continue;
                        }
                        let mut ne = pe.clone();
                        ne[i] = j;
                        next.push((ne, pc * w));
                    }
                }
                partial = next;
            }
            for (pe, pc) in partial {
                out.add_term(pe, pc);
            }
        }
        out
    }

    /// Bound on the magnitude of the terms produced by `shift(center)`;
    /// used to scale zero tests after shifting.
    pub fn shift_scale(&self, center: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, &c)| {
                e.iter()
                    .zip(center)
                    .fold(c.abs(), |acc, (&ei, &x)| acc * (1.0 + x.abs()).powi(ei as i32))
            })
            .fold(0.0, f64::max)
    }

    /// The part of total degree exactly `k`.
    pub fn homogeneous_part(&self, k: u32) -> Self {
        let mut p = Self::zero(self.dim);
        for (e, &c) in &self.terms {
            if e.iter().sum::<u32>() == k {
                p.add_term(e.clone(), c);
            }
        }
        p
    }

    /// Removes coefficients with `|c| <= threshold`.
    pub fn prune(&self, threshold: f64) -> Self {
        let mut p = Self::zero(self.dim);
        for (e, &c) in &self.terms {
            if c.abs() > threshold {
                p.add_term(e.clone(), c);
            }
        }
        p
    }
}

pub(crate) fn monomial_value(exps: &[u32], w: &[f64]) -> f64 {
    exps.iter()
        .zip(w)
        .filter(|(&e, _)| e > 0)
        .fold(1.0, |acc, (&e, &x)| acc * x.powi(e as i32))
}

/// All exponent vectors in `dim` variables with total degree `k`, in
/// lexicographically descending order.
pub fn monomials_of_degree(dim: usize, k: u32) -> Vec<Vec<u32>> {
    fn rec(dim: usize, k: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == dim - 1 {
            prefix.push(k);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=k).rev() {
            prefix.push(e);
            rec(dim, k - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if dim > 0 {
        rec(dim, k, &mut Vec::with_capacity(dim), &mut out);
    }
    out
}
