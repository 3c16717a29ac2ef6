mod common;

use std::sync::Arc;

use common::*;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use saddle_blowup::blowup::{vector_field, BlowupField, CylinderPoint, MetricField};
use saddle_blowup::centerstable::{
    bump_localize, contraction_bound, graph_transform, invert_map, measure_lip_dev, solve_center_stable,
    split_spectrum, GraphFunction, GraphProblem, GraphTolerances, GridSpec, MapFn, SplitOptions,
};
use saddle_blowup::flow::{integrate_blowup_flow, monte_carlo_avoidance, FlowConfig};
use saddle_blowup::lnn::{certify_weakly_strict, kappa, LNNProblem, WeightVector};
use saddle_blowup::objective::{leading_term, ObjectiveSpec, Polynomial};
use saddle_blowup::sphere::{
    find_crit_points, halton_sphere_points, newton_polish, sphere_hess, tangent_basis, SearchOptions,
};

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(&mut *rng)).normalize()
}

/// Polynomial in 3 variables with random coefficients on degrees `lo..=hi`.
fn random_poly(coefs: &[f64], lo: u32, hi: u32) -> Polynomial {
    let mut terms = Vec::new();
    let mut i = 0;
    for a in 0..=hi {
        for b in 0..=hi - a {
            for c in 0..=hi - a - b {
                let deg = a + b + c;
                if deg >= lo {
                    terms.push((vec![a, b, c], coefs[i % coefs.len()]));
                    i += 1;
                }
            }
        }
    }
    Polynomial::from_terms(3, terms).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn leading_term_is_homogeneous(
        coefs in prop::collection::vec(0.2f64..2.0, 30),
        signs in prop::collection::vec(any::<bool>(), 30),
        lo in 2u32..4,
        seed in 0u64..1000,
    ) {
        let c: Vec<f64> = coefs.iter().zip(&signs).map(|(x, s)| if *s { *x } else { -*x }).collect();
        let obj = ObjectiveSpec::polynomial(random_poly(&c, lo, 4));
        let (k, p) = leading_term(&obj, &[0.0; 3]).unwrap();
        prop_assert_eq!(k as u32, lo);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let v = random_unit(&mut rng, 3);
            let pv = p.eval(v.as_slice());
            for t in [0.5, 2.0] {
                let tv = &v * t;
                prop_assert!((p.eval(tv.as_slice()) - t.powi(k as i32) * pv).abs() <= 1e-10 * (1.0 + pv.abs()));
            }
            let euler = p.gradient(v.as_slice()).dot(&v);
            prop_assert!((euler - k as f64 * pv).abs() <= 1e-10 * (1.0 + pv.abs()));
        }
    }

    #[test]
    fn polynomial_derivatives_match_differences(
        coefs in prop::collection::vec(-2.0f64..2.0, 35),
        x in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let p = random_poly(&coefs, 0, 4);
        let g = p.gradient(&x);
        let hess = p.hessian(&x);
        let h = 1e-5;
        for i in 0..3 {
            let mut a = x.clone();
            a[i] += h;
            let mut b = x.clone();
            b[i] -= h;
            let fd = (p.eval(&a) - p.eval(&b)) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()));
            let gd = (p.gradient(&a) - p.gradient(&b)) / (2.0 * h);
            for j in 0..3 {
                prop_assert!((gd[j] - hess[(j, i)]).abs() <= 1e-6 * (1.0 + hess[(j, i)].abs()));
            }
        }
    }
}

#[test]
fn taylor_remainder_has_order_k_plus_one() {
    for (json, center) in [(xyz_json(), vec![0.0; 3]), (quad_json(), vec![0.0; 2])] {
        let obj = objective(&json);
        let (k, p) = leading_term(&obj, &center).unwrap();
        let f0 = obj.eval(&center).unwrap();
        let us = halton_sphere_points(center.len(), 20, 3);
        let hs: Vec<f64> = (0..5).map(|i| 1e-1 * 10f64.powf(-0.5 * i as f64)).collect();
        let errs: Vec<f64> = hs
            .iter()
            .map(|&h| {
                us.iter()
                    .map(|u| {
                        let v = u * h;
                        let w: Vec<f64> = center.iter().zip(v.iter()).map(|(c, x)| c + x).collect();
                        (obj.eval(&w).unwrap() - f0 - p.eval(v.as_slice())).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        if errs.iter().all(|&e| e == 0.0) {
            continue;
        }
        let slope = log_log_slope(&hs, &errs);
        assert!(slope >= k as f64 + 0.9, "slope {slope} for k = {k}");
    }
    // a genuine remainder: ½(x² − y²) + x³
    let obj = objective(&poly(2, &[(&[2, 0], 0.5), (&[0, 2], -0.5), (&[3, 0], 1.0)]));
    let (k, p) = leading_term(&obj, &[0.0, 0.0]).unwrap();
    let hs: Vec<f64> = (0..5).map(|i| 1e-1 * 10f64.powf(-0.5 * i as f64)).collect();
    let errs: Vec<f64> = hs.iter().map(|&h| (obj.eval(&[h, 0.0]).unwrap() - p.eval(&[h, 0.0])).abs()).collect();
    assert!(log_log_slope(&hs, &errs) >= k as f64 + 0.9);
}

#[test]
fn sphere_critical_points_satisfy_euler_and_antipodes() {
    let obj = objective(&xyz_json());
    let (k, p) = leading_term(&obj, &[0.0; 3]).unwrap();
    let opts = SearchOptions::default();
    let tol = opts.crit_tol_for(&p);
    let crits = find_crit_points(&p, &opts).unwrap();
    for c in &crits {
        let u = dvec(&c.u);
        let euler = p.gradient(&c.u).dot(&u) - k as f64 * p.eval(&c.u);
        assert!(euler.abs() <= 1e-10 && c.grad_residual <= tol);
        let back = newton_polish(&p, &(-&u), opts.max_iter, tol).unwrap();
        assert!((back + &u).norm() <= 1e-10);
        assert!((p.eval((-&u).as_slice()) + c.value).abs() <= 1e-10);
    }
}

#[test]
fn sphere_hessian_matches_geodesic_differences() {
    for json in [xyz_json(), quad_json()] {
        let obj = objective(&json);
        let d = obj.dim();
        let (_, p) = leading_term(&obj, &vec![0.0; d]).unwrap();
        let opts = SearchOptions::default();
        for c in find_crit_points(&p, &opts).unwrap() {
            let u = dvec(&c.u);
            let hess = sphere_hess(&p, &u, opts.crit_tol_for(&p)).unwrap();
            let z = tangent_basis(&u);
            let phi = |s: &DVector<f64>| {
                let xi = &z * s;
                let n = xi.norm();
                let pt = if n == 0.0 { u.clone() } else { &u * n.cos() + &xi * (n.sin() / n) };
                p.eval(pt.as_slice())
            };
            let m = d - 1;
            let h = 1e-4;
            let mut fd = DMatrix::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    let e = |a: f64, b: f64| {
                        let mut s = DVector::zeros(m);
                        s[i] += a;
                        s[j] += b;
                        phi(&s)
                    };
                    fd[(i, j)] = (e(h, h) - e(h, -h) - e(-h, h) + e(-h, -h)) / (4.0 * h * h);
                }
            }
            let mut a: Vec<f64> = SymmetricEigen::new(hess).eigenvalues.iter().copied().collect();
            let mut b: Vec<f64> = SymmetricEigen::new(fd).eigenvalues.iter().copied().collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            let scale = a.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-12);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-5 * scale, "{a:?} vs {b:?}");
            }
        }
    }
}

#[test]
fn blowup_field_is_tangent_and_metric_consistent() {
    let obj = objective(&xyz_json());
    let eu = BlowupField::new(obj.clone(), &[0.0; 3], 1.0).unwrap();
    let zero: MetricField = MetricField::Perturbed(Arc::new(|_: &[f64]| DMatrix::zeros(3, 3)));
    let pert = BlowupField::with_metric(obj, &[0.0; 3], zero, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let u = random_unit(&mut rng, 3);
        let r: f64 = rng.random_range(1e-4..0.9);
        let pt = CylinderPoint::new(r, u.clone());
        let (a1, z1) = vector_field(&eu, &pt).unwrap();
        let (a2, z2) = vector_field(&pert, &pt).unwrap();
        assert!(z1.dot(&u).abs() <= 1e-10);
        assert!((a1 - a2).abs() <= 1e-13 && (z1 - z2).amax() <= 1e-13);
    }
}

#[test]
fn blown_up_trajectories_stay_on_cylinder() {
    let field = BlowupField::new(objective(&xyz_json()), &[0.0; 3], 2.0).unwrap();
    let config = FlowConfig {
        t_max: 30.0,
        ..FlowConfig::default()
    };
    let traj = integrate_blowup_flow(&field, &CylinderPoint::new(0.05, dvec(&[0.6, 0.0, 0.8])), &config).unwrap();
    for s in &traj.samples {
        assert!((dvec(&s.state[1..]).norm() - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn avoidance_report_ignores_thread_count() {
    let obj = objective(&xyz_json());
    let config = FlowConfig {
        t_max: 40.0,
        ..FlowConfig::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| monte_carlo_avoidance(&obj, &[0.0; 3], 0.1, 64, &config, 5).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn kappa_bounded_and_nonnegative_points_have_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let g = |rng: &mut ChaCha8Rng, r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut *rng));
    let mut certified = 0;
    for trial in 0..100 {
        let n = rng.random_range(1..=4);
        let dims: Vec<usize> = (0..=n).map(|_| rng.random_range(1..=3)).collect();
        let m = rng.random_range(1..=3);
        let x = g(&mut rng, dims[0], m);
        let y = g(&mut rng, dims[n], m);
        let prob = LNNProblem::new(dims, x, y).unwrap();
        let mut blocks: Vec<DMatrix<f64>> = (0..n)
            .map(|i| {
                let (r, c) = prob.block_shape(i);
                g(&mut rng, r, c)
            })
            .collect();
        for b in blocks.iter_mut() {
            if rng.random_bool(0.5) {
                b.fill(0.0);
            }
        }
        let w = WeightVector::new(blocks);
        let k = kappa(&prob, &w, 2 * n + 2).unwrap();
        assert!(k <= 2 * n, "trial {trial}: kappa {k} > {}", 2 * n);
        if n <= 3 && prob.num_weights() <= 12 {
            if let Ok(rep) = certify_weakly_strict(&prob, &w, &SearchOptions::default()) {
                for c in rep.crit_points.iter().filter(|c| c.value >= 0.0) {
                    assert!(c.morse_index > 0 && c.tangent_eigs[0] <= -1e-8);
                }
                certified += 1;
            }
        }
    }
    assert!(certified >= 10);
}

fn bump_problem() -> GraphProblem {
    let t = diag(&[0.5, 2.0]);
    let split = split_spectrum(&t, &SplitOptions::default()).unwrap();
    let eps = 2e-4;
    let h: MapFn = Arc::new(move |z: &DVector<f64>| DVector::from_vec(vec![0.0, eps * z[0] * z[0]]));
    let (map, _) = bump_localize(h, &t, 1.0, 500, 0).unwrap();
    let lip = measure_lip_dev(&split, &map, 2.0, 2000, 0);
    let grid = GridSpec {
        half_width: 2.0,
        ..GridSpec::default()
    };
    GraphProblem::new(split, map, lip, grid, GraphTolerances::default()).unwrap()
}

#[test]
fn unstable_cone_is_trapping_and_expanding() {
    let p = bump_problem();
    let s = p.splitting();
    let eta = p.lip_dev();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut n = 0;
    while n < 100 {
        let z = DVector::from_fn(2, |_, _| rng.random_range(-1.5..1.5));
        let (x, y) = s.to_coords(&z);
        if s.norm2(&y) < s.norm1(&x) {
            continue;
        }
        n += 1;
        let n0 = s.norm(&x, &y);
        let mut w = z.clone();
        for k in 1..=10 {
            w = p.map(&w);
            let (x, y) = s.to_coords(&w);
            assert!(s.norm2(&y) >= s.norm1(&x));
            assert!(s.norm(&x, &y) >= (s.mu() - eta).powi(k) * n0 * (1.0 - 1e-12));
        }
    }
}

#[test]
fn inverse_is_lipschitz_on_graph_nodes() {
    let p = bump_problem();
    let s = p.splitting();
    let (g, _) = solve_center_stable(&p).unwrap();
    let (_, t_inv) = s.operator_norm_bounds();
    let pts: Vec<DVector<f64>> = (0..g.num_nodes()).map(|i| s.from_coords(&g.node(i), g.value(i))).collect();
    let inv: Vec<DVector<f64>> = pts.iter().map(|z| invert_map(&p, z).unwrap()).collect();
    let mut worst: f64 = 0.0;
    for i in 0..pts.len() {
        for j in (i + 1..pts.len()).step_by(7) {
            let ratio = s.ambient_norm(&(&inv[i] - &inv[j])) / s.ambient_norm(&(&pts[i] - &pts[j]));
            worst = worst.max(ratio);
        }
    }
    assert!(worst <= 2.0 * t_inv, "{worst} > {}", 2.0 * t_inv);
}

#[test]
fn graph_transform_contracts_random_graphs() {
    let p = bump_problem();
    let s = p.splitting();
    let axes = p.initial_graph().unwrap().axes().to_vec();
    let bound = contraction_bound(s, p.lip_dev());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let mut draw = || {
            let a: f64 = rng.random_range(-0.9..0.9);
            let b: f64 = rng.random_range(0.5..3.0);
            GraphFunction::from_fn(axes.clone(), 1, move |x| DVector::from_vec(vec![a * (b * x[0]).tanh() / b])).unwrap()
        };
        let (g1, g2) = (draw(), draw());
        let d0 = g1.distance(&g2, s);
        let d1 = graph_transform(&p, &g1).unwrap().distance(&graph_transform(&p, &g2).unwrap(), s);
        assert!(d1 <= bound * d0 + 1e-6, "{d1} > {bound} * {d0}");
    }
}
