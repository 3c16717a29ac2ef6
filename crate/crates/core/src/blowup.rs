//! The blown-up gradient field on the half-cylinder `[0, r_max) × S^{d-1}`.
//!
//! In normal coordinates around the critical point the metric is
//! `g = g0 + r² b` with `b_ij = B_ij`. Pulling the gradient of `f` back
//! through the polar map `(r, u) ↦ w* + r u` and rescaling it by `r^{2-k}`
//! gives a field that extends to `r = 0` with `X(0, u) = (0, ∇p(u))`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::objective::{leading_term_with, HomogeneousPoly, ObjectiveSpec, DEFAULT_K_MAX, DEFAULT_ORDER_TOL};
use crate::sphere::{halton_sphere_points, sphere_grad_unchecked, tangent_basis, SphereCritPoint};

pub type MetricFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Riemannian metric in normal coordinates around the critical point.
#[derive(Clone)]
pub enum MetricField {
    Euclidean,
    /// `g = g0 + r² b`, with the callback returning the symmetric matrix
    /// `B(w)` at chart coordinate `w`.
    Perturbed(MetricFn),
}

impl fmt::Debug for MetricField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricField::Euclidean => f.write_str("Euclidean"),
            MetricField::Perturbed(_) => f.write_str("Perturbed(..)"),
        }
    }
}

/// Blocks of the pulled-back metric relative to `dr² + h`. Tangent objects
/// are stored as ambient vectors / operators orthogonal to `u`.
#[derive(Debug, Clone)]
pub struct MetricBlocks {
    pub lambda: f64,
    pub v: DVector<f64>,
    pub alpha: DMatrix<f64>,
    pub w: DVector<f64>,
    pub c: f64,
    basis: DMatrix<f64>,
    /// `I + r² α` in the tangent basis.
    shifted_alpha: DMatrix<f64>,
}

impl MetricBlocks {
    fn euclidean(u: &DVector<f64>) -> Self {
        let d = u.len();
        let basis = tangent_basis(u);
        Self {
            lambda: 0.0,
            v: DVector::zeros(d),
            alpha: DMatrix::zeros(d, d),
            w: DVector::zeros(d),
            c: 1.0,
            shifted_alpha: DMatrix::identity(d - 1, d - 1),
            basis,
        }
    }

    /// Applies `(I + r² α)^{-1}` to a tangent vector.
    fn solve_shifted(&self, rhs: &DVector<f64>, r: f64) -> Result<DVector<f64>> {
        let t = self.basis.transpose() * rhs;
        let sol = self
            .shifted_alpha
            .clone()
            .lu()
            .solve(&t)
            .ok_or(Error::MetricSingular { r })?;
        Ok(&self.basis * sol)
    }
}

fn unit_check(u: &DVector<f64>) -> Result<()> {
    if (u.norm() - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput("sphere point is not a unit vector".into()));
    }
    Ok(())
}

/// `λ = <B u, u>`, `v = π_u B u`, `α = π_u B|_{u^⊥}`, `w = (I + r²α)^{-1} v`,
/// `c = 1 / (1 + r² λ - r⁴ <v, (I + r²α)^{-1} v>)`, with `B = B(r u)`.
pub fn pullback_metric_blocks(metric: &MetricField, r: f64, u: &DVector<f64>) -> Result<MetricBlocks> {
    unit_check(u)?;
    let b_fn = match metric {
        MetricField::Euclidean => return Ok(MetricBlocks::euclidean(u)),
        MetricField::Perturbed(b) => b,
    };
    let d = u.len();
    let point: Vec<f64> = u.iter().map(|x| r * x).collect();
    let b = b_fn(&point);
    if b.shape() != (d, d) {
        return Err(Error::ShapeMismatch(format!(
            "metric callback returned {:?}, expected ({d}, {d})",
            b.shape()
        )));
    }
    if (&b - b.transpose()).amax() > 1e-12 * (1.0 + b.amax()) {
        return Err(Error::InvalidInput("metric perturbation B is not symmetric".into()));
    }
    if b.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite metric perturbation".into()));
    }
    let basis = tangent_basis(u);
    let bu = &b * u;
    let lambda = u.dot(&bu);
    let v_t = basis.transpose() * &bu;
    let alpha_t = basis.transpose() * &b * &basis;
    let r2 = r * r;
    let shifted = DMatrix::identity(d - 1, d - 1) + &alpha_t * r2;
    let lu = shifted.clone().lu();
    let det = lu.determinant();
    if !det.is_finite() || det.abs() <= 1e-12 {
        return Err(Error::MetricSingular { r });
    }
    let w_t = lu.solve(&v_t).ok_or(Error::MetricSingular { r })?;
    let denom = 1.0 + r2 * lambda - r2 * r2 * v_t.dot(&w_t);
    if !(denom > 1e-12) {
        return Err(Error::MetricSingular { r });
    }
    Ok(MetricBlocks {
        lambda,
        v: &basis * v_t,
        alpha: &basis * alpha_t * basis.transpose(),
        w: &basis * w_t,
        c: 1.0 / denom,
        basis,
        shifted_alpha: shifted,
    })
}

/// A point `(r, u)` of the cylinder.
#[derive(Debug, Clone, PartialEq)]
pub struct CylinderPoint {
    pub r: f64,
    pub u: DVector<f64>,
}

impl CylinderPoint {
    pub fn new(r: f64, u: DVector<f64>) -> Self {
        Self { r, u }
    }

    /// Image under the polar map, relative to the center.
    pub fn to_chart(&self) -> DVector<f64> {
        &self.u * self.r
    }
}

/// The blown-up field of `f` at a critical point `w*`.
#[derive(Debug, Clone)]
pub struct BlowupField {
    obj: ObjectiveSpec,
    w_star: DVector<f64>,
    k: usize,
    p: HomogeneousPoly,
    metric: MetricField,
    r_max: f64,
}

impl BlowupField {
    /// Builds the field with the Euclidean metric and `r_max = rho`.
    pub fn new(obj: ObjectiveSpec, w_star: &[f64], rho: f64) -> Result<Self> {
        Self::with_metric(obj, w_star, MetricField::Euclidean, rho)
    }

    /// Builds the field; for perturbed metrics `r_max` is found by bisection
    /// on metric singularity along sampled directions, capped at `rho`.
    pub fn with_metric(obj: ObjectiveSpec, w_star: &[f64], metric: MetricField, rho: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::InvalidInput("rho must be positive".into()));
        }
        if obj.dim() < 2 {
            return Err(Error::InvalidInput("blow-up needs dimension >= 2".into()));
        }
        let (k, p) = leading_term_with(&obj, w_star, DEFAULT_K_MAX, DEFAULT_ORDER_TOL)?;
        let r_max = match &metric {
            MetricField::Euclidean => rho,
            MetricField::Perturbed(_) => invertibility_radius(&metric, obj.dim(), rho)?,
        };
        Ok(Self {
            w_star: DVector::from_column_slice(w_star),
            obj,
            k,
            p,
            metric,
            r_max,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn leading_poly(&self) -> &HomogeneousPoly {
        &self.p
    }

    pub fn objective(&self) -> &ObjectiveSpec {
        &self.obj
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.w_star
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn metric(&self) -> &MetricField {
        &self.metric
    }

    pub fn dim(&self) -> usize {
        self.obj.dim()
    }
}

fn invertibility_radius(metric: &MetricField, dim: usize, rho: f64) -> Result<f64> {
    let ok = |r: f64, u: &DVector<f64>| pullback_metric_blocks(metric, r, u).is_ok();
    let mut r_max = rho;
    for u in halton_sphere_points(dim, 64, 0) {
        if !ok(0.0, &u) {
            return Err(Error::MetricSingular { r: 0.0 });
        }
        if ok(r_max, &u) {
            continue;
        }
        let (mut lo, mut hi) = (0.0, r_max);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if ok(mid, &u) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        r_max = lo;
    }
    Ok(r_max * 0.99)
}

/// Gradient of `F(r, u) = f(w* + r u)` for the pulled-back metric, as
/// `(a, z)` with `a` the radial and `z` the tangent component.
pub fn lifted_gradient_components(field: &BlowupField, r: f64, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("lifted gradient needs r > 0, got {r}")));
    }
    if r >= field.r_max {
        return Err(Error::Domain(format!("r = {r} is beyond r_max = {}", field.r_max)));
    }
    unit_check(u)?;
    lifted_unchecked(field, r, u)
}

fn lifted_unchecked(field: &BlowupField, r: f64, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let x = &field.w_star + u * r;
    let grad = field.obj.gradient(x.as_slice())?;
    let d1f = grad.dot(u);
    let tangential = &grad - u * d1f;
    match field.metric {
        MetricField::Euclidean => Ok((d1f, tangential / r)),
        MetricField::Perturbed(_) => {
            let blocks = pullback_metric_blocks(&field.metric, r, u)?;
            let grad_fr = tangential * r;
            let bracket = d1f - r * blocks.w.dot(&grad_fr);
            let a = blocks.c * bracket;
            let z = &blocks.w * (-blocks.c * r * bracket) + blocks.solve_shifted(&grad_fr, r)? / (r * r);
            Ok((a, z))
        }
    }
}

/// The extended field `X(r, u)`: `r^{2-k} (a, z)` for `r > 0` and
/// `(0, ∇p(u))` at `r = 0`.
pub fn vector_field(field: &BlowupField, pt: &CylinderPoint) -> Result<(f64, DVector<f64>)> {
    unit_check(&pt.u)?;
    if pt.r < 0.0 || pt.r >= field.r_max {
        return Err(Error::Domain(format!(
            "r = {} outside [0, {})",
            pt.r, field.r_max
        )));
    }
    field_unchecked(field, pt.r, &pt.u)
}

pub(crate) fn field_unchecked(field: &BlowupField, r: f64, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    if r == 0.0 {
        return Ok((0.0, sphere_grad_unchecked(&field.p, u)));
    }
    let (a, z) = lifted_unchecked(field, r, u)?;
    let s = r.powi(2 - field.k as i32);
    Ok((s * a, z * s))
}

/// `max_u ‖X(r, u) − (0, ∇p(u))‖` over the given unit vectors; linear in
/// `r` as `r → 0`.
pub fn field_residual_max(field: &BlowupField, r: f64, us: &[DVector<f64>]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for u in us {
        let (x1, x2) = vector_field(field, &CylinderPoint::new(r, u.clone()))?;
        let limit = sphere_grad_unchecked(&field.p, u);
        worst = worst.max((x1 * x1 + (x2 - limit).norm_squared()).sqrt());
    }
    Ok(worst)
}

fn sphere_exp(u: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
    let n = xi.norm();
    if n == 0.0 {
        return u.clone();
    }
    (u * n.cos() + xi * (n.sin() / n)).normalize()
}

/// Eigenvalues of the linearization of `X` at the rest point `(0, u*)`,
/// computed by finite differences in the chart `(r, s) ↦ (r, exp_{u*}(Z s))`.
/// Sorted by real part, then imaginary part.
pub fn linearization_spectrum(field: &BlowupField, crit: &SphereCritPoint, crit_tol: f64) -> Result<Vec<Complex<f64>>> {
    let u_star = DVector::from_column_slice(&crit.u);
    unit_check(&u_star)?;
    let residual = sphere_grad_unchecked(&field.p, &u_star).norm();
    if residual > crit_tol {
        return Err(Error::NotCritical {
            residual,
            tol: crit_tol,
        });
    }
    let d = field.dim();
    let k = field.k as f64;
    let kp = k * field.p.eval(u_star.as_slice());
    let h = 1e-5 * (1.0 + kp.abs());
    let basis = tangent_basis(&u_star);
    let chart = |r: f64, s: &DVector<f64>| -> Result<DVector<f64>> {
        let u = sphere_exp(&u_star, &(&basis * s));
        let (x1, x2) = field_unchecked(field, r, &u)?;
        let mut out = DVector::zeros(d);
        out[0] = x1;
        out.rows_mut(1, d - 1).copy_from(&(basis.transpose() * x2));
        Ok(out)
    };
    let zero = DVector::zeros(d - 1);
    let mut jac = DMatrix::zeros(d, d);
    // one-sided second-order difference in r keeps r >= 0
    let g0 = chart(0.0, &zero)?;
    let g1 = chart(h, &zero)?;
    let g2 = chart(2.0 * h, &zero)?;
    jac.set_column(0, &((g1 * 4.0 - g0 * 3.0 - g2) / (2.0 * h)));
    for j in 0..d - 1 {
        let mut s = zero.clone();
        s[j] = h;
        let gp = chart(0.0, &s)?;
        s[j] = -h;
        let gm = chart(0.0, &s)?;
        jac.set_column(j + 1, &((gp - gm) / (2.0 * h)));
    }
    let mut eigs: Vec<Complex<f64>> = jac.complex_eigenvalues().iter().copied().collect();
    sort_complex(&mut eigs);
    Ok(eigs)
}

pub fn sort_complex(v: &mut [Complex<f64>]) {
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
}

/// The spectrum predicted from sphere data: `{k p(u*)} ∪ σ(Hess p(u*))`.
pub fn predicted_spectrum(k: usize, crit: &SphereCritPoint) -> Vec<Complex<f64>> {
    let mut out: Vec<Complex<f64>> = std::iter::once(k as f64 * crit.value)
        .chain(crit.tangent_eigs.iter().copied())
        .map(|x| Complex::new(x, 0.0))
        .collect();
    sort_complex(&mut out);
    out
}

/// Bottleneck distance between two multisets of equal size: the smallest,
/// over bijections, of the largest matched distance. Exact for up to eight
/// elements; sorted pairing beyond that.
pub fn multiset_distance(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let n = a.len();
    if n > 8 {
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        sort_complex(&mut a);
        sort_complex(&mut b);
        return a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    }
    fn rec(a: &[Complex<f64>], b: &[Complex<f64>], used: &mut Vec<bool>, i: usize, cur: f64, best: &mut f64) {
        if cur >= *best {
            return;
        }
        if i == a.len() {
            *best = cur;
            return;
        }
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                rec(a, b, used, i + 1, cur.max((a[i] - b[j]).norm()), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(a, b, &mut vec![false; n], 0, 0.0, &mut best);
    best
}
