#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use saddle_blowup::objective::{ObjectiveSpec, Polynomial, PolynomialJson, TermJson};

pub fn poly(dim: usize, terms: &[(&[u32], f64)]) -> PolynomialJson {
    PolynomialJson {
        dim,
        terms: terms
            .iter()
            .map(|(e, c)| TermJson {
                exps: e.to_vec(),
                coef: *c,
            })
            .collect(),
    }
}

/// ½(xyz − 1)²
pub fn xyz_json() -> PolynomialJson {
    poly(3, &[(&[2, 2, 2], 0.5), (&[1, 1, 1], -1.0), (&[0, 0, 0], 0.5)])
}

/// ½(x² − y²)
pub fn quad_json() -> PolynomialJson {
    poly(2, &[(&[2, 0], 0.5), (&[0, 2], -0.5)])
}

/// ‖w‖²
pub fn norm_json() -> PolynomialJson {
    poly(2, &[(&[2, 0], 1.0), (&[0, 2], 1.0)])
}

pub fn objective(json: &PolynomialJson) -> ObjectiveSpec {
    ObjectiveSpec::from_json(json).unwrap()
}

pub fn polynomial(json: &PolynomialJson) -> Polynomial {
    Polynomial::from_json(json).unwrap()
}

/// Rotated cube-sphere grid on S² with `6 n²` points.
pub fn sphere_grid(n: usize) -> Vec<Vector3<f64>> {
    let rot = Rotation3::from_euler_angles(0.3, 0.7, 1.1);
    let mut pts = Vec::with_capacity(6 * n * n);
    for face in 0..6 {
        for i in 0..n {
            for j in 0..n {
                let a = -1.0 + (2 * i + 1) as f64 / n as f64;
                let b = -1.0 + (2 * j + 1) as f64 / n as f64;
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                let v = match face / 2 {
                    0 => Vector3::new(s, a, b),
                    1 => Vector3::new(a, s, b),
                    _ => Vector3::new(a, b, s),
                };
                pts.push(rot * v.normalize());
            }
        }
    }
    pts
}

/// Largest geodesic distance from a grid point to its nearest neighbour, bounded
/// by the face-centre spacing of the cube-sphere construction.
pub fn sphere_grid_spacing(n: usize) -> f64 {
    2.0 / n as f64
}

/// Critical clusters of `p = P|_S` on a sphere grid: points where the squared
/// sphere gradient (from central differences of `P`) is below `tau`, grouped
/// greedily and represented by their argmin.
pub fn grid_critical_points(p: impl Fn(&[f64]) -> f64 + Sync, n: usize, tau: f64, cluster: f64) -> Vec<Vector3<f64>> {
    use rayon::prelude::*;
    let h = 1e-6;
    let pts = sphere_grid(n);
    let mut small: Vec<(f64, Vector3<f64>)> = pts
        .par_iter()
        .filter_map(|u| {
            let mut g = Vector3::zeros();
            for i in 0..3 {
                let mut a = *u;
                a[i] += h;
                let mut b = *u;
                b[i] -= h;
                g[i] = (p(a.as_slice()) - p(b.as_slice())) / (2.0 * h);
            }
            let tangent = g - *u * g.dot(u);
            let q = tangent.norm_squared();
            (q < tau).then_some((q, *u))
        })
        .collect();
    small.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut reps: Vec<Vector3<f64>> = Vec::new();
    for (_, u) in small {
        if reps.iter().all(|r| (r - u).norm() > cluster) {
            reps.push(u);
        }
    }
    reps
}

pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&dvec(v))
}
