//! The leading polynomial restricted to the unit sphere: sphere gradient and
//! Hessian, multi-start critical point search, and the weakly-strict / tamed
//! classification of a critical point of the objective.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{leading_term_with, HomogeneousPoly, ObjectiveSpec, PolynomialJson};

/// A critical point of `p = P|_S` with its Morse data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereCritPoint {
    pub u: Vec<f64>,
    pub value: f64,
    pub grad_residual: f64,
    /// Eigenvalues of the tangent Hessian, ascending.
    pub tangent_eigs: Vec<f64>,
    pub morse_index: usize,
    pub nullity: usize,
}

/// How the "tamed" verdict was reached. Never a proof.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamedEvidence {
    /// Every found critical point has nullity zero.
    Nondegenerate,
    /// Degenerate points exist but the deduplicated set was identical at two
    /// search resolutions.
    StableAcrossResolutions,
    /// The critical set grew with the search resolution: a continuum is likely.
    ContinuumSuspected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleReport {
    pub k: usize,
    pub weakly_strict: bool,
    pub tamed: bool,
    pub tamed_evidence: TamedEvidence,
    pub is_saddle: bool,
    pub leading_poly: PolynomialJson,
    pub crit_points: Vec<SphereCritPoint>,
    pub violation: Option<SphereCritPoint>,
    /// Linearization spectra of the blown-up field at each critical point,
    /// as sorted `(re, im)` pairs, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectra: Option<Vec<Vec<(f64, f64)>>>,
}

/// Options for [`find_crit_points`] and [`classify_saddle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchOptions {
    /// Number of starts; `None` means `200 * d`.
    pub n_starts: Option<usize>,
    pub max_iter: usize,
    /// Sphere-gradient tolerance; `None` means `1e-10 * (1 + max |coef|)`.
    pub crit_tol: Option<f64>,
    pub dedup_dist: f64,
    pub lambda_tol: f64,
    pub p_tol: f64,
    /// Gradient tolerance for the objective at the point being classified.
    pub point_tol: f64,
    pub k_max: usize,
    pub order_tol: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            n_starts: None,
            max_iter: 200,
            crit_tol: None,
            dedup_dist: 1e-4,
            lambda_tol: 1e-8,
            p_tol: 1e-10,
            point_tol: 1e-8,
            k_max: crate::objective::DEFAULT_K_MAX,
            order_tol: crate::objective::DEFAULT_ORDER_TOL,
        }
    }
}

impl SearchOptions {
    pub fn crit_tol_for(&self, p: &HomogeneousPoly) -> f64 {
        self.crit_tol
            .unwrap_or(1e-10 * (1.0 + p.max_abs_coefficient()))
    }

    pub fn n_starts_for(&self, dim: usize) -> usize {
        self.n_starts.unwrap_or(200 * dim).max(1)
    }
}

/// Orthonormal basis of `u^⊥` as the columns of a `d × (d-1)` matrix.
///
/// Gram–Schmidt over the standard basis vectors, skipping the axis most
/// aligned with `u`.
pub fn tangent_basis(u: &DVector<f64>) -> DMatrix<f64> {
    let d = u.len();
    let skip = u.iamax();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(d.saturating_sub(1));
    for i in (0..d).filter(|&i| i != skip) {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        for _ in 0..2 {
            v -= u * u.dot(&v);
            for b in &cols {
                v -= b * b.dot(&v);
            }
        }
        let n = v.norm();
        cols.push(v / n);
    }
    if cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Great-circle distance between unit vectors.
pub fn geodesic_distance(a: &[f64], b: &[f64]) -> f64 {
    let chord = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    2.0 * (0.5 * chord).min(1.0).asin()
}

fn check_unit(u: &DVector<f64>, dim: usize) -> Result<()> {
    if u.len() != dim {
        return Err(Error::InvalidInput(format!(
            "sphere point has length {}, expected {dim}",
            u.len()
        )));
    }
    if (u.norm() - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput("sphere point is not a unit vector".into()));
    }
    Ok(())
}

/// Sphere gradient `∇p(u) = ∇P(u) - k P(u) u`.
pub fn sphere_grad(p: &HomogeneousPoly, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_unit(u, p.dim())?;
    Ok(sphere_grad_unchecked(p, u))
}

pub(crate) fn sphere_grad_unchecked(p: &HomogeneousPoly, u: &DVector<f64>) -> DVector<f64> {
    let k = f64::from(p.degree());
    p.gradient(u.as_slice()) - u * (k * p.eval(u.as_slice()))
}

/// Riemannian Hessian of `p` at `u` in the given tangent basis. Equals the
/// Hessian of `p` only at critical points.
fn tangent_hessian_in(p: &HomogeneousPoly, u: &DVector<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    let k = f64::from(p.degree());
    let mut h = p.hessian(u.as_slice());
    let shift = k * p.eval(u.as_slice());
    for i in 0..h.nrows() {
        h[(i, i)] -= shift;
    }
    let t = basis.transpose() * h * basis;
    (&t + t.transpose()) * 0.5
}

/// Hessian of `p` at a critical point `u` in the deterministic tangent basis
/// of [`tangent_basis`]. Fails with `NotCritical` when `|∇p(u)| > crit_tol`.
pub fn sphere_hess(p: &HomogeneousPoly, u: &DVector<f64>, crit_tol: f64) -> Result<DMatrix<f64>> {
    check_unit(u, p.dim())?;
    let residual = sphere_grad_unchecked(p, u).norm();
    if residual > crit_tol {
        return Err(Error::NotCritical {
            residual,
            tol: crit_tol,
        });
    }
    Ok(tangent_hessian_in(p, u, &tangent_basis(u)))
}

fn sorted_eigenvalues(m: DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut eigs: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    eigs.sort_by(f64::total_cmp);
    eigs
}

/// Attaches Morse data to a critical point.
pub fn crit_point_data(
    p: &HomogeneousPoly,
    u: &DVector<f64>,
    crit_tol: f64,
    lambda_tol: f64,
) -> Result<SphereCritPoint> {
    let hess = sphere_hess(p, u, crit_tol)?;
    let tangent_eigs = sorted_eigenvalues(hess);
    Ok(SphereCritPoint {
        u: u.iter().copied().collect(),
        value: p.eval(u.as_slice()),
        grad_residual: sphere_grad_unchecked(p, u).norm(),
        morse_index: tangent_eigs.iter().filter(|&&l| l < -lambda_tol).count(),
        nullity: tangent_eigs.iter().filter(|&&l| l.abs() <= lambda_tol).count(),
        tangent_eigs,
    })
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut c = 2u64;
    while primes.len() < n {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Low-discrepancy points on `S^{d-1}`: Halton points pushed through
/// Box–Muller and normalized. `offset` skips the first points of the sequence.
pub fn halton_sphere_points(dim: usize, n: usize, offset: usize) -> Vec<DVector<f64>> {
    let pairs = dim.div_ceil(2);
    let primes = first_primes(2 * pairs);
    let mut out = Vec::with_capacity(n);
    let mut index = offset as u64 + 1;
    while out.len() < n {
        let mut g = Vec::with_capacity(2 * pairs);
        for j in 0..pairs {
            let a = radical_inverse(index, primes[2 * j]).max(1e-300);
            let b = radical_inverse(index, primes[2 * j + 1]);
            let rad = (-2.0 * a.ln()).sqrt();
            let ang = 2.0 * std::f64::consts::PI * b;
            g.push(rad * ang.cos());
            g.push(rad * ang.sin());
        }
        index += 1;
        let v = DVector::from_iterator(dim, g.into_iter().take(dim));
        let n = v.norm();
        if n > 1e-12 {
            out.push(v / n);
        }
    }
    out
}

/// Newton iteration on the sphere gradient, converging to nearby critical
/// points of any index. Returns the point if `|∇p| <= crit_tol`.
pub fn newton_polish(
    p: &HomogeneousPoly,
    start: &DVector<f64>,
    max_iter: usize,
    crit_tol: f64,
) -> Option<DVector<f64>> {
    let mut u = start.normalize();
    for _ in 0..max_iter {
        let grad = sphere_grad_unchecked(p, &u);
        if grad.norm() <= crit_tol {
            return Some(u);
        }
        let basis = tangent_basis(&u);
        let g = basis.transpose() * &grad;
        let h = tangent_hessian_in(p, &u, &basis);
        let scale = 1.0 + h.amax();
        let eig = SymmetricEigen::new(h);
        let mut step = DVector::zeros(g.len());
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            let q = eig.eigenvectors.column(i);
            let floor = 1e-10 * scale;
            let lam = if lam.abs() < floor { floor.copysign(lam) } else { lam };
            step -= q * (q.dot(&g) / lam);
        }
        let len = step.norm();
        if len > 0.3 {
            step *= 0.3 / len;
        }
        let next = (&u + &basis * step).normalize();
        if next.iter().any(|x| !x.is_finite()) {
            return None;
        }
        u = next;
    }
    (sphere_grad_unchecked(p, &u).norm() <= crit_tol).then_some(u)
}

/// Projected gradient descent of `sign * p` with backtracking.
fn projected_descent(p: &HomogeneousPoly, start: &DVector<f64>, sign: f64, iters: usize) -> DVector<f64> {
    let value = |u: &DVector<f64>| sign * p.eval(u.as_slice());
    let mut u = start.clone();
    let mut alpha = 0.5 / (1.0 + p.coefficient_norm());
    for _ in 0..iters {
        let g = sphere_grad_unchecked(p, &u) * sign;
        let gn2 = g.norm_squared();
        if gn2 < 1e-16 {
            break;
        }
        let f0 = value(&u);
        let mut accepted = false;
        for _ in 0..30 {
            let cand = (&u - &g * alpha).normalize();
            if value(&cand) <= f0 - 1e-4 * alpha * gn2 {
                u = cand;
                accepted = true;
                alpha *= 1.5;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    u
}

/// Sorts candidates lexicographically and merges those closer than
/// `dedup_dist` in geodesic distance; the first of each cluster is kept.
pub fn dedup_points(mut candidates: Vec<DVector<f64>>, dedup_dist: f64) -> Vec<DVector<f64>> {
    candidates.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for c in candidates {
        if kept
            .iter()
            .all(|k| geodesic_distance(k.as_slice(), c.as_slice()) >= dedup_dist)
        {
            kept.push(c);
        }
    }
    kept
}

fn search_candidates(
    p: &HomogeneousPoly,
    starts: &[DVector<f64>],
    max_iter: usize,
    crit_tol: f64,
) -> (Vec<DVector<f64>>, usize) {
    let per_start: Vec<Vec<DVector<f64>>> = starts
        .par_iter()
        .map(|s| {
            let mut found = Vec::with_capacity(3);
            if let Some(u) = newton_polish(p, s, max_iter, crit_tol) {
                found.push(u);
            }
            for sign in [1.0, -1.0] {
                let pre = projected_descent(p, s, sign, max_iter / 2);
                if let Some(u) = newton_polish(p, &pre, max_iter, crit_tol) {
                    found.push(u);
                }
            }
            found
        })
        .collect();
    let converged = per_start.iter().filter(|f| !f.is_empty()).count();
    (per_start.into_iter().flatten().collect(), converged)
}

fn find_with_starts(
    p: &HomogeneousPoly,
    opts: &SearchOptions,
    n_starts: usize,
    offset: usize,
) -> Result<Vec<SphereCritPoint>> {
    let crit_tol = opts.crit_tol_for(p);
    let starts = halton_sphere_points(p.dim(), n_starts, offset);
    let (candidates, converged) = search_candidates(p, &starts, opts.max_iter, crit_tol);
    if converged * 10 < n_starts {
        return Err(Error::SearchBudgetExhausted {
            converged,
            starts: n_starts,
        });
    }
    dedup_points(candidates, opts.dedup_dist)
        .iter()
        .map(|u| crit_point_data(p, u, crit_tol, opts.lambda_tol))
        .collect()
}

/// Multi-start search for the critical points of `p = P|_S`.
///
/// Each low-discrepancy start runs a direct Newton polish plus projected
/// descent on `p` and on `-p` followed by a Newton polish. Converged points
/// are deduplicated by geodesic distance and given Morse data. The result is
/// independent of the number of worker threads.
pub fn find_crit_points(p: &HomogeneousPoly, opts: &SearchOptions) -> Result<Vec<SphereCritPoint>> {
    find_with_starts(p, opts, opts.n_starts_for(p.dim()), 0)
}

/// Classifies the critical point `w_star` of `obj` through its leading
/// homogeneous polynomial.
pub fn classify_saddle(obj: &ObjectiveSpec, w_star: &[f64], opts: &SearchOptions) -> Result<SaddleReport> {
    let residual = obj.gradient(w_star)?.norm();
    if residual > opts.point_tol {
        return Err(Error::NotCritical {
            residual,
            tol: opts.point_tol,
        });
    }
    let (k, p) = leading_term_with(obj, w_star, opts.k_max, opts.order_tol)?;
    classify_polynomial(k, &p, opts)
}

/// Classification from an already extracted leading polynomial.
pub fn classify_polynomial(k: usize, p: &HomogeneousPoly, opts: &SearchOptions) -> Result<SaddleReport> {
    let n_starts = opts.n_starts_for(p.dim());
    let crit_points = find_with_starts(p, opts, n_starts, 0)?;

    let violation = crit_points
        .iter()
        .find(|c| c.value >= -opts.p_tol && c.morse_index == 0)
        .cloned();
    let weakly_strict = violation.is_none();

    let tamed_evidence = if crit_points.iter().all(|c| c.nullity == 0) {
        TamedEvidence::Nondegenerate
    } else {
        let refined = find_with_starts(p, opts, 2 * n_starts, n_starts)?;
        let same = refined.len() == crit_points.len()
            && refined.iter().all(|r| {
                crit_points
                    .iter()
                    .any(|c| geodesic_distance(&c.u, &r.u) < 10.0 * opts.dedup_dist)
            });
        if same {
            TamedEvidence::StableAcrossResolutions
        } else {
            TamedEvidence::ContinuumSuspected
        }
    };
    let tamed = tamed_evidence != TamedEvidence::ContinuumSuspected;

    let min_value = crit_points.iter().map(|c| c.value).fold(f64::INFINITY, f64::min);
    let max_value = crit_points
        .iter()
        .map(|c| c.value)
        .fold(f64::NEG_INFINITY, f64::max);
    let is_saddle = min_value < -opts.p_tol && max_value > opts.p_tol;

    Ok(SaddleReport {
        k,
        weakly_strict,
        tamed,
        tamed_evidence,
        is_saddle,
        leading_poly: p.as_polynomial().to_json(),
        crit_points,
        violation,
        spectra: None,
    })
}
