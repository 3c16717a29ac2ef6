//! Gradient flow, blown-up flow, and Monte Carlo avoidance experiments.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blowup::{field_unchecked, BlowupField, CylinderPoint};
use crate::error::{Error, Result};
use crate::objective::{HomogeneousPoly, ObjectiveSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Integrator {
    Rk4 { h: f64 },
    /// Dormand–Prince 5(4) with per-component error control.
    DormandPrince { rel_tol: f64, abs_tol: f64 },
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator::DormandPrince {
            rel_tol: 1e-9,
            abs_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub integrator: Integrator,
    pub t_max: f64,
    pub stop_radius: f64,
    pub grad_tol: f64,
    pub renormalize_sphere: bool,
    /// Center for the escape test; no escape test when absent.
    pub center: Option<Vec<f64>>,
    pub max_steps: usize,
    /// Largest adaptive step; `t_max / 2000` when absent.
    pub max_step: Option<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            integrator: Integrator::default(),
            t_max: 200.0,
            stop_radius: 1.0,
            grad_tol: 1e-8,
            renormalize_sphere: true,
            center: None,
            max_steps: 5_000_000,
            max_step: None,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_int = match self.integrator {
            Integrator::Rk4 { h } => h > 0.0 && h.is_finite(),
            Integrator::DormandPrince { rel_tol, abs_tol } => rel_tol > 0.0 && abs_tol > 0.0,
        };
        if !ok_int {
            return Err(Error::InvalidInput("integrator step / tolerances must be positive".into()));
        }
        if !(self.t_max > 0.0) || !(self.stop_radius > 0.0) || !(self.grad_tol >= 0.0) {
            return Err(Error::InvalidInput("t_max and stop_radius must be positive, grad_tol non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Escaped,
    Converged,
    TimeBudget,
    NumericalError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub state: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
}

/// For blown-up trajectories the state is `(r, u_1, ..., u_d)` and
/// `grad_norm` is the norm of the blown-up field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub arc_length: f64,
    pub termination: Termination,
    pub blown_up: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trajectory {
    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory has at least one sample")
    }

    /// Ambient point of a sample: the state itself, or `r u` relative to the
    /// blow-up center.
    pub fn chart_point(&self, s: &Sample) -> DVector<f64> {
        if self.blown_up {
            DVector::from_column_slice(&s.state[1..]) * s.state[0]
        } else {
            DVector::from_column_slice(&s.state)
        }
    }

    /// CSV with columns `t, state..., f, grad_norm`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.samples.first().map_or(0, |s| s.state.len());
        let mut header = vec!["t".to_string()];
        if self.blown_up {
            header.push("r".into());
            header.extend((1..n).map(|i| format!("u{i}")));
        } else {
            header.extend((1..=n).map(|i| format!("w{i}")));
        }
        header.push("f".into());
        header.push("grad_norm".into());
        writeln!(out, "{}", header.join(","))?;
        for s in &self.samples {
            let mut row = vec![fmt17(s.t)];
            row.extend(s.state.iter().map(|&x| fmt17(x)));
            row.push(fmt17(s.value));
            row.push(fmt17(s.grad_norm));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// The right-hand side, per-step projection, and stopping tests of a flow.
struct FlowSystem<'a> {
    rhs: Box<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + 'a>,
    project: Box<dyn Fn(&mut DVector<f64>) + 'a>,
    /// Positive once the state has escaped.
    excess: Box<dyn Fn(&DVector<f64>) -> f64 + 'a>,
    /// `(value, grad_norm)` at a state.
    observe: Box<dyn Fn(&DVector<f64>) -> Result<(f64, f64)> + 'a>,
    /// Ambient point used for arc length.
    chart: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + 'a>,
}

fn rk4_step(sys: &FlowSystem, y: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let k1 = (sys.rhs)(y)?;
    let k2 = (sys.rhs)(&(y + &k1 * (h / 2.0)))?;
    let k3 = (sys.rhs)(&(y + &k2 * (h / 2.0)))?;
    let k4 = (sys.rhs)(&(y + &k3 * h))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

const DP_A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// fifth-order weights minus fourth-order weights
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// One Dormand–Prince step; returns the fifth-order solution, the error
/// estimate, and the derivative at the new point.
fn dp_step(
    sys: &FlowSystem,
    y: &DVector<f64>,
    k1: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let mut ks: Vec<DVector<f64>> = vec![k1.clone()];
    for row in DP_A.iter() {
        let mut yi = y.clone();
        for (a, k) in row.iter().zip(&ks) {
            if *a != 0.0 {
                yi += k * (h * a);
            }
        }
        ks.push((sys.rhs)(&yi)?);
    }
    // the last stage is evaluated at the fifth-order solution
    let mut y5 = y.clone();
    for (a, k) in DP_A[5].iter().zip(&ks) {
        y5 += k * (h * a);
    }
    let mut err = DVector::zeros(y.len());
    for (e, k) in DP_E.iter().zip(&ks) {
        err += k * (h * e);
    }
    let k7 = ks.pop().unwrap();
    Ok((y5, err, k7))
}

enum Status {
    Running,
    Escaped,
    Converged,
}

fn run(sys: &FlowSystem, y0: DVector<f64>, config: &FlowConfig, record: bool, blown_up: bool) -> Trajectory {
    let mut samples = Vec::new();
    let mut arc = 0.0;
    let push = |samples: &mut Vec<Sample>, t: f64, y: &DVector<f64>, obs: (f64, f64), force: bool| {
        if record || force {
            if !record {
                samples.clear();
            }
            samples.push(Sample {
                t,
                state: y.as_slice().to_vec(),
                value: obs.0,
                grad_norm: obs.1,
            });
        }
    };
    let fail = |samples: Vec<Sample>, arc: f64, msg: String| Trajectory {
        samples,
        arc_length: arc,
        termination: Termination::NumericalError,
        blown_up,
        error: Some(msg),
    };
    let status = |y: &DVector<f64>, obs: (f64, f64)| {
        if (sys.excess)(y) > 0.0 {
            Status::Escaped
        } else if obs.1 <= config.grad_tol {
            Status::Converged
        } else {
            Status::Running
        }
    };

    let mut y = y0;
    (sys.project)(&mut y);
    let mut obs = match (sys.observe)(&y) {
        Ok(o) => o,
        Err(e) => return fail(samples, arc, e.to_string()),
    };
    push(&mut samples, 0.0, &y, obs, true);
    match status(&y, obs) {
        Status::Escaped => return finish(samples, arc, Termination::Escaped, blown_up),
        Status::Converged => return finish(samples, arc, Termination::Converged, blown_up),
        Status::Running => {}
    }

    let mut t = 0.0;
    let mut k1 = match (sys.rhs)(&y) {
        Ok(k) => k,
        Err(e) => return fail(samples, arc, e.to_string()),
    };
    let mut h = match config.integrator {
        Integrator::Rk4 { h } => h,
        Integrator::DormandPrince { .. } => {
            let scale = k1.amax();
            let guess = if scale > 0.0 { 1e-2 * (1.0 + y.amax()) / scale } else { 1e-2 };
            guess.clamp(1e-8, 0.1 * config.t_max)
        }
    };
    let h_max = config.max_step.unwrap_or(config.t_max / 2000.0);
    for _ in 0..config.max_steps {
        let h_try = h.min(h_max).min(config.t_max - t);
        let step = match config.integrator {
            Integrator::Rk4 { .. } => rk4_step(sys, &y, h_try).map(|yn| Some((yn, None))),
            Integrator::DormandPrince { rel_tol, abs_tol } => dp_step(sys, &y, &k1, h_try).map(|(yn, err, k7)| {
                let ratio = err
                    .iter()
                    .zip(y.iter().zip(yn.iter()))
                    .map(|(e, (a, b))| e.abs() / (abs_tol + rel_tol * a.abs().max(b.abs())))
                    .fold(0.0, f64::max);
                let factor = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0) };
                if ratio <= 1.0 {
                    h = h_try * factor;
                    Some((yn, Some(k7)))
                } else {
                    h = h_try * factor.min(1.0);
                    None
                }
            }),
        };
        let (mut y_new, k_new) = match step {
            Ok(Some(s)) => s,
            Ok(None) => {
                if h < 1e-14 * (1.0 + t) {
                    return fail(samples, arc, format!("step size underflow at t = {t}"));
                }
                continue;
            }
            Err(e) => return fail(samples, arc, e.to_string()),
        };
        if y_new.iter().any(|x| !x.is_finite()) {
            return fail(samples, arc, format!("non-finite state at t = {}", t + h_try));
        }
        (sys.project)(&mut y_new);
        let mut t_new = t + h_try;
        if (sys.excess)(&y_new) > 0.0 {
            // locate the crossing by bisection on the step length
            let (mut lo, mut hi) = (0.0, h_try);
            let mut best = y_new.clone();
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let trial = match config.integrator {
                    Integrator::Rk4 { .. } => rk4_step(sys, &y, mid),
                    Integrator::DormandPrince { .. } => dp_step(sys, &y, &k1, mid).map(|s| s.0),
                };
                let Ok(mut trial) = trial else { break };
                (sys.project)(&mut trial);
                if (sys.excess)(&trial) > 0.0 {
                    hi = mid;
                    best = trial;
                } else {
                    lo = mid;
                }
            }
            y_new = best;
            t_new = t + hi;
        }
        obs = match (sys.observe)(&y_new) {
            Ok(o) => o,
            Err(e) => return fail(samples, arc, e.to_string()),
        };
        arc += ((sys.chart)(&y_new) - (sys.chart)(&y)).norm();
        y = y_new;
        t = t_new;
        let st = status(&y, obs);
        let done = !matches!(st, Status::Running) || t >= config.t_max;
        push(&mut samples, t, &y, obs, done);
        match st {
            Status::Escaped => return finish(samples, arc, Termination::Escaped, blown_up),
            Status::Converged => return finish(samples, arc, Termination::Converged, blown_up),
            Status::Running => {}
        }
        if t >= config.t_max {
            return finish(samples, arc, Termination::TimeBudget, blown_up);
        }
        k1 = match k_new {
            Some(k) => k,
            None => match (sys.rhs)(&y) {
                Ok(k) => k,
                Err(e) => return fail(samples, arc, e.to_string()),
            },
        };
        if config.renormalize_sphere && blown_up {
            // projection changes the state, so the FSAL derivative is stale
            k1 = match (sys.rhs)(&y) {
                Ok(k) => k,
                Err(e) => return fail(samples, arc, e.to_string()),
            };
        }
    }
    if let Some(last) = samples.last().cloned() {
        if last.t != t {
            push(&mut samples, t, &y, obs, true);
        }
    }
    finish(samples, arc, Termination::TimeBudget, blown_up)
}

fn finish(samples: Vec<Sample>, arc: f64, termination: Termination, blown_up: bool) -> Trajectory {
    Trajectory {
        samples,
        arc_length: arc,
        termination,
        blown_up,
        error: None,
    }
}

fn gradient_system<'a>(obj: &'a ObjectiveSpec, config: &'a FlowConfig) -> Result<FlowSystem<'a>> {
    let d = obj.dim();
    if let Some(c) = &config.center {
        if c.len() != d {
            return Err(Error::ShapeMismatch(format!("center has length {}, expected {d}", c.len())));
        }
    }
    Ok(FlowSystem {
        rhs: Box::new(move |w| Ok(-obj.gradient(w.as_slice())?)),
        project: Box::new(|_| {}),
        excess: Box::new(move |w| match &config.center {
            Some(c) => (w - DVector::from_column_slice(c)).norm() - config.stop_radius,
            None => f64::NEG_INFINITY,
        }),
        observe: Box::new(move |w| Ok((obj.eval(w.as_slice())?, obj.gradient(w.as_slice())?.norm()))),
        chart: Box::new(|w| w.clone()),
    })
}

/// Integrates `ẇ = -∇f(w)` from `w0`.
pub fn integrate_gradient_flow(obj: &ObjectiveSpec, w0: &[f64], config: &FlowConfig) -> Result<Trajectory> {
    config.validate()?;
    if w0.len() != obj.dim() {
        return Err(Error::ShapeMismatch(format!("w0 has length {}, expected {}", w0.len(), obj.dim())));
    }
    if w0.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("w0 must be finite".into()));
    }
    let sys = gradient_system(obj, config)?;
    Ok(run(&sys, DVector::from_column_slice(w0), config, true, false))
}

/// Integrates `(ṙ, u̇) = -X(r, u)`; escape is `r > stop_radius`.
pub fn integrate_blowup_flow(field: &BlowupField, pt0: &CylinderPoint, config: &FlowConfig) -> Result<Trajectory> {
    config.validate()?;
    let d = field.dim();
    if pt0.u.len() != d || (pt0.u.norm() - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput("initial sphere point must be a unit vector of the right length".into()));
    }
    if !(pt0.r > 0.0 && pt0.r < field.r_max()) {
        return Err(Error::Domain(format!("initial r = {} outside (0, {})", pt0.r, field.r_max())));
    }
    if config.stop_radius >= field.r_max() {
        return Err(Error::InvalidInput(format!(
            "stop_radius {} must be below r_max {}",
            config.stop_radius,
            field.r_max()
        )));
    }
    let split = |s: &DVector<f64>| (s[0], s.rows(1, d).normalize());
    let sys = FlowSystem {
        rhs: Box::new(move |s| {
            let (r, u) = split(s);
            let (x1, x2) = field_unchecked(field, r, &u)?;
            let mut out = DVector::zeros(d + 1);
            out[0] = -x1;
            out.rows_mut(1, d).copy_from(&(-x2));
            Ok(out)
        }),
        project: Box::new(move |s| {
            if config.renormalize_sphere {
                let u = s.rows(1, d).normalize();
                s.rows_mut(1, d).copy_from(&u);
            }
        }),
        excess: Box::new(move |s| s[0] - config.stop_radius),
        observe: Box::new(move |s| {
            let (r, u) = split(s);
            if r < 0.0 {
                return Err(Error::Numerical(format!("blown-up flow crossed r = 0 (r = {r})")));
            }
            let (x1, x2) = field_unchecked(field, r, &u)?;
            let w = field.center() + &u * r;
            Ok((field.objective().eval(w.as_slice())?, (x1 * x1 + x2.norm_squared()).sqrt()))
        }),
        chart: Box::new(move |s| s.rows(1, d) * s[0]),
    };
    let mut y0 = DVector::zeros(d + 1);
    y0[0] = pt0.r;
    y0.rows_mut(1, d).copy_from(&pt0.u);
    Ok(run(&sys, y0, config, true, true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvoidanceReport {
    pub n_total: usize,
    pub n_escaped: usize,
    pub n_converged_to_saddle: usize,
    /// Converged, but not to the configured critical point.
    pub n_converged_elsewhere: usize,
    pub n_undecided: usize,
    pub seed: u64,
    pub radius: f64,
}

/// Uniform point in the ball of the given radius around `center`.
pub fn sample_ball(rng: &mut impl Rng, center: &[f64], radius: f64) -> Vec<f64> {
    let d = center.len();
    loop {
        let g: DVector<f64> = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let n = g.norm();
        if n == 0.0 {
            continue;
        }
        let u: f64 = rng.random();
        let rad = radius * u.powf(1.0 / d as f64);
        if rad < radius * 1e-6 {
            continue;
        }
        return center.iter().zip(g.iter()).map(|(c, x)| c + x / n * rad).collect();
    }
}

/// RNG stream for trajectory `index` of an experiment seeded by `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Integrates `n` gradient-flow trajectories from uniform starts in the
/// `radius`-ball around `w_star` and tallies their fates.
pub fn monte_carlo_avoidance(
    obj: &ObjectiveSpec,
    w_star: &[f64],
    radius: f64,
    n: usize,
    config: &FlowConfig,
    seed: u64,
) -> Result<AvoidanceReport> {
    config.validate()?;
    if w_star.len() != obj.dim() {
        return Err(Error::ShapeMismatch("w_star has the wrong length".into()));
    }
    if !(radius > 0.0 && radius < config.stop_radius) {
        return Err(Error::InvalidInput("need 0 < radius < stop_radius".into()));
    }
    let mut config = config.clone();
    config.center = Some(w_star.to_vec());
    let sys_config = &config;
    let center = DVector::from_column_slice(w_star);
    let saddle_ball = 10.0 * config.grad_tol.sqrt();
    let outcomes: Vec<u8> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, i as u64);
            let w0 = sample_ball(&mut rng, w_star, radius);
            let sys = match gradient_system(obj, sys_config) {
                Ok(s) => s,
                Err(_) => return 3,
            };
            let traj = run(&sys, DVector::from_vec(w0), sys_config, false, false);
            match traj.termination {
                Termination::Escaped => 0,
                Termination::Converged => {
                    let end = DVector::from_column_slice(&traj.last().state);
                    if (end - &center).norm() <= saddle_ball {
                        1
                    } else {
                        2
                    }
                }
                _ => 3,
            }
        })
        .collect();
    let count = |c: u8| outcomes.iter().filter(|&&o| o == c).count();
    Ok(AvoidanceReport {
        n_total: n,
        n_escaped: count(0),
        n_converged_to_saddle: count(1),
        n_converged_elsewhere: count(2),
        n_undecided: count(3),
        seed,
        radius,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaDiagnostics {
    pub tail_points: Vec<Vec<f64>>,
    pub tail_diameter: f64,
    pub omega2_directions: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_tail_oscillation: Option<f64>,
    /// Largest radius `‖w - w*‖` (or `r`) over the whole trajectory.
    pub r_sup: f64,
}

/// What the directions of a trajectory are measured against.
#[derive(Debug, Clone, Copy)]
pub enum OmegaReference<'a> {
    Center {
        w_star: &'a [f64],
        leading: Option<&'a HomogeneousPoly>,
    },
    Blowup(&'a BlowupField),
}

pub const MIN_TAIL_SAMPLES: usize = 50;
const CLUSTER_RADIUS: f64 = 1e-3;

fn greedy_clusters(points: &[DVector<f64>], radius: f64) -> Vec<Vec<f64>> {
    let mut centers: Vec<(DVector<f64>, usize)> = Vec::new();
    for p in points {
        match centers.iter_mut().find(|(c, _)| (&*c - p).norm() <= radius) {
            Some((c, n)) => {
                *c = (&*c * *n as f64 + p) / (*n as f64 + 1.0);
                *n += 1;
            }
            None => centers.push((p.clone(), 1)),
        }
    }
    centers.into_iter().map(|(c, _)| c.as_slice().to_vec()).collect()
}

fn diameter(points: &[DVector<f64>]) -> f64 {
    let stride = (points.len() / 2000).max(1);
    let pts: Vec<_> = points.iter().step_by(stride).chain(points.last()).collect();
    let mut best: f64 = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            best = best.max((pts[i] - pts[j]).norm());
        }
    }
    best
}

fn tail_of(traj: &Trajectory) -> Result<&[Sample]> {
    let n = traj.samples.len();
    let start = n - n / 5;
    let tail = &traj.samples[start..];
    if tail.len() < MIN_TAIL_SAMPLES {
        return Err(Error::InsufficientTail {
            got: tail.len(),
            need: MIN_TAIL_SAMPLES,
        });
    }
    Ok(tail)
}

/// Tail clustering over the last 20% of samples.
pub fn omega_diagnostics(traj: &Trajectory, reference: OmegaReference) -> Result<OmegaDiagnostics> {
    let tail = tail_of(traj)?;
    let states: Vec<DVector<f64>> = tail.iter().map(|s| DVector::from_column_slice(&s.state)).collect();
    let (dirs, poly, r_sup): (Vec<DVector<f64>>, Option<&HomogeneousPoly>, f64) = match reference {
        OmegaReference::Blowup(field) => {
            if !traj.blown_up {
                return Err(Error::InvalidInput("blow-up reference needs a blown-up trajectory".into()));
            }
            let d = field.dim();
            let dirs = states.iter().map(|s| s.rows(1, d).normalize()).collect();
            let r_sup = traj.samples.iter().map(|s| s.state[0].abs()).fold(0.0, f64::max);
            (dirs, Some(field.leading_poly()), r_sup)
        }
        OmegaReference::Center { w_star, leading } => {
            let c = DVector::from_column_slice(w_star);
            let pts: Vec<DVector<f64>> = traj.samples.iter().map(|s| traj.chart_point(s)).collect();
            let r_sup = pts.iter().map(|p| (p - &c).norm()).fold(0.0, f64::max);
            let dirs = tail
                .iter()
                .map(|s| traj.chart_point(s) - &c)
                .filter(|v| v.norm() > 0.0)
                .map(|v| v.normalize())
                .collect();
            (dirs, leading, r_sup)
        }
    };
    let p_tail_oscillation = poly.filter(|_| !dirs.is_empty()).map(|p| {
        let vals: Vec<f64> = dirs.iter().map(|u| p.eval(u.as_slice())).collect();
        vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min)
    });
    Ok(OmegaDiagnostics {
        tail_points: greedy_clusters(&states, CLUSTER_RADIUS),
        tail_diameter: diameter(&states),
        omega2_directions: greedy_clusters(&dirs, CLUSTER_RADIUS),
        p_tail_oscillation,
        r_sup,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    pub arc_length: f64,
    /// Least-squares slope of `log h` against `log t` on the tail.
    pub decay_exponent: f64,
}

/// Power-law fit of `h(t) = f(w(t)) - c` on the last 20% of samples.
pub fn value_decay_profile(traj: &Trajectory, c: f64) -> Result<DecayProfile> {
    let tail = tail_of(traj)?;
    let mut xs = Vec::with_capacity(tail.len());
    let mut ys = Vec::with_capacity(tail.len());
    for s in tail {
        let h = s.value - c;
        if !(h > 0.0) {
            return Err(Error::NonpositiveValues);
        }
        if s.t > 0.0 {
            xs.push(s.t.ln());
            ys.push(h.ln());
        }
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientTail { got: xs.len(), need: 2 });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let decay_exponent = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(DecayProfile {
        arc_length: traj.arc_length,
        decay_exponent,
    })
}

/// `∫ ‖∇f‖² dt` by the trapezoid rule over stored samples.
pub fn gradient_energy(traj: &Trajectory) -> f64 {
    traj.samples
        .windows(2)
        .map(|w| 0.5 * (w[1].t - w[0].t) * (w[0].grad_norm.powi(2) + w[1].grad_norm.powi(2)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::Polynomial;
    use crate::sphere::{find_crit_points, SearchOptions};

    fn poly(d: usize, terms: Vec<(Vec<u32>, f64)>) -> ObjectiveSpec {
        ObjectiveSpec::polynomial(Polynomial::from_terms(d, terms).unwrap())
    }

    fn norm2() -> ObjectiveSpec {
        poly(2, vec![(vec![2, 0], 1.0), (vec![0, 2], 1.0)])
    }

    fn saddle2() -> ObjectiveSpec {
        poly(2, vec![(vec![2, 0], 0.5), (vec![0, 2], -0.5)])
    }

    fn xyz() -> ObjectiveSpec {
        poly(3, vec![(vec![0, 0, 0], 0.5), (vec![1, 1, 1], -1.0), (vec![2, 2, 2], 0.5)])
    }

    #[test]
    fn exponential_decay() {
        let cfg = FlowConfig {
            t_max: 1.0,
            ..Default::default()
        };
        let tr = integrate_gradient_flow(&norm2(), &[1.0, 0.0], &cfg).unwrap();
        assert_eq!(tr.termination, Termination::TimeBudget);
        let s = tr.last();
        assert_eq!(s.t, 1.0);
        assert!((s.state[0] - (-2f64).exp()).abs() < 1e-6 && s.state[1].abs() < 1e-12);

        let rk = FlowConfig {
            integrator: Integrator::Rk4 { h: 1e-3 },
            ..cfg
        };
        let tr = integrate_gradient_flow(&norm2(), &[1.0, 0.0], &rk).unwrap();
        assert!((tr.last().state[0] - (-2f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn saddle_stable_axis_and_escape() {
        let cfg = FlowConfig {
            t_max: 5.0,
            ..Default::default()
        };
        let tr = integrate_gradient_flow(&saddle2(), &[1.0, 0.0], &cfg).unwrap();
        for s in &tr.samples {
            assert!((s.state[0] - (-s.t).exp()).abs() < 1e-7);
        }

        let cfg = FlowConfig {
            t_max: 20.0,
            center: Some(vec![0.0, 0.0]),
            stop_radius: 1.0,
            ..Default::default()
        };
        let tr = integrate_gradient_flow(&saddle2(), &[0.0, 1e-3], &cfg).unwrap();
        assert_eq!(tr.termination, Termination::Escaped);
        assert!((tr.last().t - 1000f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn flow_is_monotone_with_energy_bound() {
        let cfg = FlowConfig {
            t_max: 30.0,
            center: Some(vec![0.0; 3]),
            stop_radius: 1.0,
            ..Default::default()
        };
        let tr = integrate_gradient_flow(&xyz(), &[0.05, 0.06, 0.07], &cfg).unwrap();
        for w in tr.samples.windows(2) {
            assert!(w[1].value <= w[0].value + 1e-9 * w[0].value.abs());
            assert!(w[1].t > w[0].t);
        }
        let span = tr.last().t - tr.samples[0].t;
        assert!(tr.arc_length.powi(2) <= span * gradient_energy(&tr) * 1.01);
    }

    #[test]
    fn convergence_to_minimum() {
        let tr = integrate_gradient_flow(&norm2(), &[0.1, 0.05], &FlowConfig::default()).unwrap();
        assert_eq!(tr.termination, Termination::Converged);
        assert!(tr.last().grad_norm <= 1e-8);
    }

    #[test]
    fn radial_blowup_flow() {
        let field = BlowupField::new(norm2(), &[0.0, 0.0], 2.0).unwrap();
        let u = DVector::from_vec(vec![0.6, 0.8]);
        let cfg = FlowConfig {
            t_max: 1.0,
            ..Default::default()
        };
        let tr = integrate_blowup_flow(&field, &CylinderPoint::new(0.5, u.clone()), &cfg).unwrap();
        for s in &tr.samples {
            assert!((s.state[0] - 0.5 * (-2.0 * s.t).exp()).abs() < 1e-8);
            assert!((DVector::from_column_slice(&s.state[1..]) - &u).norm() < 1e-12);
        }
    }

    #[test]
    fn blowup_radius_shrinks_where_p_positive() {
        let field = BlowupField::new(xyz(), &[0.0; 3], 1.0).unwrap();
        let u = DVector::from_vec(vec![-1.0, 1.0, 1.0]).normalize();
        let cfg = FlowConfig {
            t_max: 0.5,
            stop_radius: 0.5,
            ..Default::default()
        };
        let tr = integrate_blowup_flow(&field, &CylinderPoint::new(1e-2, u), &cfg).unwrap();
        assert!(tr.samples[1].state[0] < tr.samples[0].state[0]);
        for s in &tr.samples {
            assert!((DVector::from_column_slice(&s.state[1..]).norm() - 1.0).abs() <= 1e-10);
        }
    }

    fn polyline_distance(p: &DVector<f64>, line: &[DVector<f64>]) -> f64 {
        line.windows(2)
            .map(|w| {
                let d = &w[1] - &w[0];
                let l2 = d.norm_squared();
                let t = if l2 > 0.0 { ((p - &w[0]).dot(&d) / l2).clamp(0.0, 1.0) } else { 0.0 };
                (p - (&w[0] + d * t)).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn blowup_path_matches_gradient_path() {
        let f = poly(2, vec![(vec![2, 0], 0.5), (vec![0, 2], -0.5), (vec![3, 0], 0.2), (vec![1, 2], 0.3)]);
        let field = BlowupField::new(f.clone(), &[0.0, 0.0], 2.0).unwrap();
        let w0 = DVector::from_vec(vec![0.3, 0.01]);
        let cfg = FlowConfig {
            t_max: 10.0,
            stop_radius: 1.0,
            center: Some(vec![0.0, 0.0]),
            ..Default::default()
        };
        let g = integrate_gradient_flow(&f, w0.as_slice(), &cfg).unwrap();
        let b = integrate_blowup_flow(&field, &CylinderPoint::new(w0.norm(), w0.normalize()), &cfg).unwrap();
        let gp: Vec<_> = g.samples.iter().map(|s| g.chart_point(s)).collect();
        let bp: Vec<_> = b.samples.iter().map(|s| b.chart_point(s)).collect();
        let h1 = bp.iter().map(|p| polyline_distance(p, &gp)).fold(0.0, f64::max);
        let h2 = gp.iter().map(|p| polyline_distance(p, &bp)).fold(0.0, f64::max);
        assert!(h1.max(h2) < 1e-4, "{h1} {h2}");
    }

    #[test]
    fn monte_carlo_small() {
        let cfg = FlowConfig::default();
        let rep = monte_carlo_avoidance(&saddle2(), &[0.0, 0.0], 0.1, 100, &cfg, 7).unwrap();
        assert_eq!(rep.n_converged_to_saddle, 0);
        assert_eq!(rep.n_escaped, 100);
        let rep = monte_carlo_avoidance(&norm2(), &[0.0, 0.0], 0.1, 50, &cfg, 7).unwrap();
        assert_eq!(rep.n_converged_to_saddle, 50);
        let again = monte_carlo_avoidance(&norm2(), &[0.0, 0.0], 0.1, 50, &cfg, 7).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn ball_samples_are_inside() {
        let mut rng = trajectory_rng(1, 2);
        for _ in 0..500 {
            let p = sample_ball(&mut rng, &[1.0, -1.0, 0.0], 0.1);
            let r = ((p[0] - 1.0).powi(2) + (p[1] + 1.0).powi(2) + p[2].powi(2)).sqrt();
            assert!(r <= 0.1 && r >= 1e-7);
        }
    }

    #[test]
    fn omega_of_convergent_trajectory() {
        let cfg = FlowConfig {
            t_max: 20.0,
            grad_tol: 0.0,
            ..Default::default()
        };
        let tr = integrate_gradient_flow(&norm2(), &[0.3, 0.1], &cfg).unwrap();
        let om = omega_diagnostics(&tr, OmegaReference::Center { w_star: &[0.0, 0.0], leading: None }).unwrap();
        assert!(om.tail_diameter <= 1e-6);
        assert_eq!(om.tail_points.len(), 1);
        let short = Trajectory {
            samples: tr.samples[..10].to_vec(),
            ..tr.clone()
        };
        assert!(matches!(
            omega_diagnostics(&short, OmegaReference::Center { w_star: &[0.0, 0.0], leading: None }),
            Err(Error::InsufficientTail { .. })
        ));
    }

    #[test]
    fn secondary_limit_near_diagonal() {
        let field = BlowupField::new(xyz(), &[0.0; 3], 1.0).unwrap();
        let u0 = DVector::from_vec(vec![1.05, 1.0, 0.95]).normalize();
        let cfg = FlowConfig {
            t_max: 20.0,
            stop_radius: 0.5,
            ..Default::default()
        };
        let tr = integrate_blowup_flow(&field, &CylinderPoint::new(1e-3, u0), &cfg).unwrap();
        assert_eq!(tr.termination, Termination::Escaped);
        let om = omega_diagnostics(&tr, OmegaReference::Blowup(&field)).unwrap();
        let crit = find_crit_points(field.leading_poly(), &SearchOptions::default()).unwrap();
        assert_eq!(om.omega2_directions.len(), 1);
        let dir = DVector::from_column_slice(&om.omega2_directions[0]);
        let nearest = crit
            .iter()
            .map(|c| (DVector::from_column_slice(&c.u) - &dir).norm())
            .fold(f64::INFINITY, f64::min);
        assert!(nearest < 1e-2);
    }

    #[test]
    fn oscillation_shrinks_with_radius() {
        let field = BlowupField::new(xyz(), &[0.0; 3], 2.0).unwrap();
        let u0 = DVector::from_vec(vec![1.0, 0.2, -0.9]).normalize();
        let cfg = FlowConfig {
            t_max: 5.0,
            grad_tol: 0.0,
            ..Default::default()
        };
        let osc = |r0: f64| {
            let tr = integrate_blowup_flow(&field, &CylinderPoint::new(r0, u0.clone()), &cfg).unwrap();
            let om = omega_diagnostics(&tr, OmegaReference::Blowup(&field)).unwrap();
            (om.r_sup, om.p_tail_oscillation.unwrap())
        };
        let (r_small, o_small) = osc(1e-3);
        let (r_big, o_big) = osc(1e-2);
        assert!((r_big / r_small - 10.0).abs() < 0.5, "{r_small} {r_big}");
        assert!(o_small <= o_big + 1e-12, "{o_small} {o_big}");
    }

    #[test]
    fn decay_profiles() {
        let cfg = FlowConfig {
            t_max: 5.0,
            grad_tol: 0.0,
            ..Default::default()
        };
        let tr = integrate_gradient_flow(&norm2(), &[1.0, 0.0], &cfg).unwrap();
        let prof = value_decay_profile(&tr, 0.0).unwrap();
        assert!(prof.decay_exponent <= -5.0);
        assert!((prof.arc_length - (1.0 - (-10f64).exp())).abs() < 1e-9);

        let tr = integrate_gradient_flow(&saddle2(), &[1.0, 0.0], &FlowConfig { t_max: 30.0, ..cfg.clone() }).unwrap();
        assert!((tr.arc_length - 1.0).abs() < 1e-6);

        let still = Trajectory {
            samples: (0..300)
                .map(|i| Sample {
                    t: i as f64,
                    state: vec![0.0, 0.0],
                    value: 0.0,
                    grad_norm: 0.0,
                })
                .collect(),
            arc_length: 0.0,
            termination: Termination::TimeBudget,
            blown_up: false,
            error: None,
        };
        assert_eq!(value_decay_profile(&still, -1.0).unwrap().arc_length, 0.0);
        assert!(matches!(value_decay_profile(&still, 0.0), Err(Error::NonpositiveValues)));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok: FlowConfig = serde_json::from_str(r#"{"integrator": {"kind": "rk4", "h": 0.01}, "t_max": 3}"#).unwrap();
        assert_eq!(ok.integrator, Integrator::Rk4 { h: 0.01 });
        assert!(serde_json::from_str::<FlowConfig>(r#"{"tmax": 3}"#).is_err());
        assert!(serde_json::from_str::<FlowConfig>(r#"{"integrator": {"kind": "rk4", "h": 1, "x": 2}}"#).is_err());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let tr = integrate_gradient_flow(&norm2(), &[1.0, 0.0], &FlowConfig { t_max: 0.1, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,w1,w2,f,grad_norm");
        assert!(lines.all(|l| l.split(',').count() == 5));
    }
}
