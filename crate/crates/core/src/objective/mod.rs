//! Objectives on ℝ^d: evaluation, derivatives, order of vanishing at a point
//! and the leading homogeneous Taylor polynomial there.
//!
//! The leading polynomial is normalized as a Taylor coefficient:
//! `f(w* + h) = f(w*) + P(h) + O(|h|^{k+1})`.

mod homogeneous;
mod poly;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use homogeneous::HomogeneousPoly;
pub use poly::{monomials_of_degree, Polynomial, PolynomialJson, TermJson};

use crate::error::{check_finite, Error, Result};

/// Default cap on the order of vanishing.
pub const DEFAULT_K_MAX: usize = 12;
/// Default relative threshold below which Taylor coefficients count as zero.
pub const DEFAULT_ORDER_TOL: f64 = 1e-9;
/// Default finite-difference step for black-box objectives.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

pub type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;

/// A black-box objective given by callbacks.
#[derive(Clone)]
pub struct BlackBox {
    pub value: ValueFn,
    pub gradient: Option<GradientFn>,
    pub fd_step: f64,
}

impl fmt::Debug for BlackBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlackBox")
            .field("has_gradient", &self.gradient.is_some())
            .field("fd_step", &self.fd_step)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum ObjectiveKind {
    Polynomial(Polynomial),
    BlackBox(BlackBox),
}

/// An objective `f: ℝ^d → ℝ`.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    dim: usize,
    kind: ObjectiveKind,
}

impl ObjectiveSpec {
    pub fn polynomial(poly: Polynomial) -> Self {
        Self {
            dim: poly.dim(),
            kind: ObjectiveKind::Polynomial(poly),
        }
    }

    pub fn black_box<F>(dim: usize, value: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::black_box_with(dim, Arc::new(value), None, DEFAULT_FD_STEP)
    }

    pub fn black_box_with(
        dim: usize,
        value: ValueFn,
        gradient: Option<GradientFn>,
        fd_step: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        if !(fd_step > 0.0 && fd_step.is_finite()) {
            return Err(Error::InvalidInput("finite-difference step must be > 0".into()));
        }
        Ok(Self {
            dim,
            kind: ObjectiveKind::BlackBox(BlackBox {
                value,
                gradient,
                fd_step,
            }),
        })
    }

    pub fn from_json(json: &PolynomialJson) -> Result<Self> {
        Ok(Self::polynomial(Polynomial::from_json(json)?))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &ObjectiveKind {
        &self.kind
    }

    pub fn as_polynomial(&self) -> Option<&Polynomial> {
        match &self.kind {
            ObjectiveKind::Polynomial(p) => Some(p),
            ObjectiveKind::BlackBox(_) => None,
        }
    }

    fn check_point(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "point has length {}, objective dimension is {}",
                w.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn raw_eval(&self, w: &[f64]) -> f64 {
        match &self.kind {
            ObjectiveKind::Polynomial(p) => p.eval(w),
            ObjectiveKind::BlackBox(b) => (b.value)(w),
        }
    }

    pub fn eval(&self, w: &[f64]) -> Result<f64> {
        self.check_point(w)?;
        check_finite(self.raw_eval(w), "objective value")
    }

    pub fn gradient(&self, w: &[f64]) -> Result<DVector<f64>> {
        self.check_point(w)?;
        let g = match &self.kind {
            ObjectiveKind::Polynomial(p) => p.gradient(w),
            ObjectiveKind::BlackBox(b) => match &b.gradient {
                Some(grad) => grad(w),
                None => central_gradient(|x| (b.value)(x), w, b.fd_step),
            },
        };
        if g.len() != self.dim || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        Ok(g)
    }

    pub fn hessian(&self, w: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(w)?;
        let h = match &self.kind {
            ObjectiveKind::Polynomial(p) => p.hessian(w),
            ObjectiveKind::BlackBox(b) => match &b.gradient {
                Some(grad) => {
                    let step = b.fd_step.max(1e-7);
                    let mut h = DMatrix::zeros(self.dim, self.dim);
                    let mut x = w.to_vec();
                    for j in 0..self.dim {
                        x[j] = w[j] + step;
                        let gp = grad(&x);
                        x[j] = w[j] - step;
                        let gm = grad(&x);
                        x[j] = w[j];
                        h.set_column(j, &((gp - gm) / (2.0 * step)));
                    }
                    h
                }
                None => second_differences(|x| (b.value)(x), w, b.fd_step.max(1e-4)),
            },
        };
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite Hessian".into()));
        }
        Ok((&h + h.transpose()) * 0.5)
    }
}

pub(crate) fn central_gradient<F: Fn(&[f64]) -> f64>(f: F, w: &[f64], step: f64) -> DVector<f64> {
    let mut x = w.to_vec();
    DVector::from_iterator(
        w.len(),
        (0..w.len()).map(|i| {
            x[i] = w[i] + step;
            let fp = f(&x);
            x[i] = w[i] - step;
            let fm = f(&x);
            x[i] = w[i];
            (fp - fm) / (2.0 * step)
        }),
    )
}

fn second_differences<F: Fn(&[f64]) -> f64>(f: F, w: &[f64], step: f64) -> DMatrix<f64> {
    let n = w.len();
    let f0 = f(w);
    let mut h = DMatrix::zeros(n, n);
    let mut x = w.to_vec();
    for i in 0..n {
        x[i] = w[i] + step;
        let fp = f(&x);
        x[i] = w[i] - step;
        let fm = f(&x);
        x[i] = w[i];
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (step * step);
        for j in (i + 1)..n {
            let mut corner = |si: f64, sj: f64| {
                x[i] = w[i] + si * step;
                x[j] = w[j] + sj * step;
                let v = f(&x);
                x[i] = w[i];
                x[j] = w[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * step * step);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// Order of vanishing of `f - f(w*)` at `w*`: the largest `k <= k_max` such
/// that every partial derivative of order `<= k - 1` vanishes.
///
/// Polynomial objectives are shifted exactly; coefficients below
/// `tol * scale` (scale: magnitude bound of the shifted terms) count as zero.
/// Black-box objectives are probed along `2d + 10` directions.
pub fn vanishing_order(obj: &ObjectiveSpec, w_star: &[f64], k_max: usize, tol: f64) -> Result<usize> {
    obj.check_point(w_star)?;
    if k_max < 2 {
        return Err(Error::InvalidInput("k_max must be >= 2".into()));
    }
    match obj.kind() {
        ObjectiveKind::Polynomial(p) => {
            let shifted = shifted_without_constant(p, w_star, tol);
            lowest_degree(&shifted, k_max)
        }
        ObjectiveKind::BlackBox(b) => {
            let probes = DirectionalProbes::run(obj.dim, b, w_star, k_max, tol, 0)?;
            probes.order()
        }
    }
}

fn shifted_without_constant(p: &Polynomial, w_star: &[f64], tol: f64) -> Polynomial {
    let scale = p.shift_scale(w_star).max(f64::MIN_POSITIVE);
    let shifted = p.shift(w_star);
    let constant = vec![0u32; p.dim()];
    let mut out = Polynomial::zero(p.dim());
    for (e, c) in shifted.terms() {
        if e != constant.as_slice() && c.abs() > tol * scale {
            out.add_term(e.to_vec(), c);
        }
    }
    out
}

fn lowest_degree(p: &Polynomial, k_max: usize) -> Result<usize> {
    p.terms()
        .map(|(e, _)| e.iter().sum::<u32>() as usize)
        .min()
        .filter(|&k| k <= k_max)
        .ok_or(Error::OrderExceedsCap { k_max })
}

/// Leading homogeneous Taylor term `(k, P)` at `w*` with default cap and tolerance.
pub fn leading_term(obj: &ObjectiveSpec, w_star: &[f64]) -> Result<(usize, HomogeneousPoly)> {
    leading_term_with(obj, w_star, DEFAULT_K_MAX, DEFAULT_ORDER_TOL)
}

pub fn leading_term_with(
    obj: &ObjectiveSpec,
    w_star: &[f64],
    k_max: usize,
    tol: f64,
) -> Result<(usize, HomogeneousPoly)> {
    obj.check_point(w_star)?;
    match obj.kind() {
        ObjectiveKind::Polynomial(p) => {
            let shifted = shifted_without_constant(p, w_star, tol);
            let k = lowest_degree(&shifted, k_max)?;
            if k < 2 {
                return Err(Error::NotCritical {
                    residual: obj.gradient(w_star)?.norm(),
                    tol,
                });
            }
            let lead = HomogeneousPoly::new(shifted.homogeneous_part(k as u32))?;
            Ok((k, lead))
        }
        ObjectiveKind::BlackBox(b) => {
            let probes = DirectionalProbes::run(obj.dim, b, w_star, k_max, tol, 0)?;
            let k = probes.order()?;
            if k < 2 {
                return Err(Error::NotCritical {
                    residual: obj.gradient(w_star)?.norm(),
                    tol,
                });
            }
            let lead = probes.recover_leading(k as u32, tol)?;
            Ok((k, lead))
        }
    }
}

/// Directional polynomial fits `t ↦ f(w* + τ t e) - f(w*)` on Chebyshev nodes.
struct DirectionalProbes {
    dim: usize,
    radius: f64,
    directions: Vec<DVector<f64>>,
    /// Fitted coefficients (in the scaled variable `t ∈ [-1, 1]`) per direction.
    coefficients: Vec<DVector<f64>>,
    scales: Vec<f64>,
    tol: f64,
    k_max: usize,
}

impl DirectionalProbes {
    const RADIUS: f64 = 0.05;

    fn run(dim: usize, b: &BlackBox, w_star: &[f64], k_max: usize, tol: f64, seed: u64) -> Result<Self> {
        let n_monomials = monomials_of_degree(dim, k_max.min(6) as u32).len();
        let n_dirs = (2 * dim + 10).max(2 * n_monomials.min(400));
        let mut directions = Vec::with_capacity(n_dirs);
        for i in 0..dim {
            for s in [1.0, -1.0] {
                let mut e = DVector::zeros(dim);
                e[i] = s;
                directions.push(e);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 ^ seed);
        while directions.len() < n_dirs {
            let e = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = e.norm();
            if n > 1e-8 {
                directions.push(e / n);
            }
        }
        let fit_degree = k_max + 2;
        let n_nodes = 3 * (fit_degree + 1);
        let nodes: Vec<f64> = (0..n_nodes)
            .map(|j| (std::f64::consts::PI * (j as f64 + 0.5) / n_nodes as f64).cos())
            .collect();
        let vander = DMatrix::from_fn(n_nodes, fit_degree + 1, |r, c| nodes[r].powi(c as i32));
        let svd = vander.svd(true, true);
        let f0 = check_finite((b.value)(w_star), "objective value")?;
        let radius = Self::RADIUS * (1.0 + DVector::from_column_slice(w_star).amax()).min(10.0);
        let mut coefficients = Vec::with_capacity(directions.len());
        let mut scales = Vec::with_capacity(directions.len());
        let mut x = vec![0.0; dim];
        for e in &directions {
            let mut rhs = DVector::zeros(n_nodes);
            for (r, &t) in nodes.iter().enumerate() {
                for i in 0..dim {
                    x[i] = w_star[i] + radius * t * e[i];
                }
                rhs[r] = check_finite((b.value)(&x) - f0, "probe value")?;
            }
            let scale = rhs.amax().max(f0.abs() * f64::EPSILON);
            let coef = svd
                .solve(&rhs, 1e-14)
                .map_err(|m| Error::Numerical(m.to_string()))?;
            coefficients.push(coef);
            scales.push(scale);
        }
        Ok(Self {
            dim,
            radius,
            directions,
            coefficients,
            scales,
            tol,
            k_max,
        })
    }

    fn order(&self) -> Result<usize> {
        self.coefficients
            .iter()
            .zip(&self.scales)
            .filter_map(|(c, &s)| (1..=self.k_max).find(|&j| c[j].abs() > self.tol * s))
            .min()
            .ok_or(Error::OrderExceedsCap { k_max: self.k_max })
    }

    /// Least-squares recovery of the degree-`k` coefficient table from the
    /// per-direction values `P(e) = c_k / τ^k`.
    fn recover_leading(&self, k: u32, tol: f64) -> Result<HomogeneousPoly> {
        let monos = monomials_of_degree(self.dim, k);
        let rows = self.directions.len();
        let a = DMatrix::from_fn(rows, monos.len(), |r, c| {
            poly::monomial_value(&monos[c], self.directions[r].as_slice())
        });
        let tau_k = self.radius.powi(k as i32);
        let rhs = DVector::from_iterator(
            rows,
            self.coefficients.iter().map(|c| c[k as usize] / tau_k),
        );
        let sol = a
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|m| Error::Numerical(m.to_string()))?;
        let largest = sol.amax();
        let cutoff = largest * tol.max(1e-8);
        HomogeneousPoly::from_terms(
            self.dim,
            monos
                .into_iter()
                .zip(sol.iter())
                .filter(|(_, c)| c.abs() > cutoff)
                .map(|(e, &c)| (e, c)),
        )
    }
}
