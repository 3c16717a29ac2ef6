//! Command-line front end: JSON configs in, JSON / CSV reports out.
//!
//! Every subcommand reads `--config PATH` (unknown keys are rejected) and
//! writes its report to stdout, or to files under `--out DIR`. Exit codes:
//! 0 success, 1 I/O or config, 2 domain error, 3 numerical failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blowup::{linearization_spectrum, multiset_distance, predicted_spectrum, BlowupField, CylinderPoint};
use crate::centerstable::{
    bump_localize, eta_budget, graph_point, measure_lip_dev, membership_test, solve_center_stable, split_spectrum,
    GraphProblem, GraphTolerances, GridSpec, MapFn, MembershipReport, SolveLog, SplitOptions,
};
use crate::error::{Error, Result};
use crate::flow::{
    fmt17, gradient_energy, integrate_blowup_flow, integrate_gradient_flow, monte_carlo_avoidance, omega_diagnostics,
    AvoidanceReport, FlowConfig, OmegaDiagnostics, OmegaReference, Termination,
};
use crate::lnn::{
    certify_weakly_strict, kappa, leading_poly, loss, loss_gradient, trace_hessian_check, zeta, default_zero_tol,
    LNNProblem, LNNProblemJson, WeightVector,
};
use crate::objective::{leading_term_with, ObjectiveSpec, PolynomialJson};
use crate::sphere::{classify_saddle, find_crit_points, SaddleReport, SearchOptions};

#[derive(Debug, Parser)]
#[command(name = "saddle-blowup", version, about = "Degenerate saddle analysis by blow-up")]
pub struct Cli {
    /// JSON config for the subcommand
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Write reports into this directory instead of stdout
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Leading term and weakly-strict / tamed verdict at a critical point
    Classify,
    /// One gradient-flow or blown-up-flow trajectory
    Flow,
    /// Monte Carlo saddle-avoidance tally
    Mc,
    /// Linearization spectra of the blown-up field at the sphere critical points
    BlowupSpectrum,
    /// Linear network critical point: ζ, κ, leading polynomial, certification
    Lnn,
    /// Center-stable graph by the graph transform
    Cstable,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Classify => "classify",
            Command::Flow => "flow",
            Command::Mc => "mc",
            Command::BlowupSpectrum => "blowup-spectrum",
            Command::Lnn => "lnn",
            Command::Cstable => "cstable",
        }
    }
}

/// JSON formatter writing every float with 17 significant digits.
struct Digits17;

impl serde_json::ser::Formatter for Digits17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt17(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// Compact JSON with 17 significant digits per float, newline-terminated.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Digits17);
    value.serialize(&mut ser)?;
    let out = String::from_utf8(buf).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(out + "\n")
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::ShapeMismatch(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn complex_pairs(v: &[nalgebra::Complex<f64>]) -> Vec<(f64, f64)> {
    v.iter().map(|c| (c.re, c.im)).collect()
}

// ---- configs ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub objective: PolynomialJson,
    pub point: Vec<f64>,
    #[serde(default)]
    pub search: SearchOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlowupStart {
    pub r0: f64,
    pub u0: Vec<f64>,
    /// Radius bound for the metric search; defaults to `2 * stop_radius`.
    #[serde(default)]
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowRunConfig {
    pub objective: PolynomialJson,
    /// Critical point used as reference (and blow-up center).
    pub center: Vec<f64>,
    /// Chart start for the plain gradient flow.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    /// Cylinder start; selects the blown-up flow.
    #[serde(default)]
    pub blowup: Option<BlowupStart>,
    #[serde(default)]
    pub flow: FlowConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub objective: PolynomialJson,
    pub center: Vec<f64>,
    pub radius: f64,
    pub n: usize,
    #[serde(default)]
    pub flow: FlowConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    pub objective: PolynomialJson,
    pub center: Vec<f64>,
    #[serde(default)]
    pub search: SearchOptions,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_rho() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LnnConfig {
    pub problem: LNNProblemJson,
    /// Weight blocks as row lists, `W_1` first; omitted means `W = 0`.
    #[serde(default)]
    pub weights: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub search: SearchOptions,
    #[serde(default = "default_trace_samples")]
    pub trace_samples: usize,
}

fn default_trace_samples() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    /// `f = T`.
    None,
    /// `f(z) = T z + φ(z/s) ε z_source² e_target`.
    Quadratic {
        epsilon: f64,
        s: f64,
        source: usize,
        target: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MembershipConfig {
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_bound")]
    pub bound: f64,
    /// Offset added along the first `E₂` basis vector for off-graph probes.
    #[serde(default = "default_offset")]
    pub offset: f64,
    /// Probe nodes with `‖x‖∞` at least this large.
    #[serde(default = "default_min_node")]
    pub min_node: f64,
}

fn default_n_max() -> usize {
    50
}
fn default_bound() -> f64 {
    10.0
}
fn default_offset() -> f64 {
    0.1
}
fn default_min_node() -> f64 {
    1e-2
}

impl Default for MembershipConfig {
    fn default() -> Self {
        Self {
            n_max: default_n_max(),
            bound: default_bound(),
            offset: default_offset(),
            min_node: default_min_node(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CstableConfig {
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
    #[serde(default = "default_perturbation")]
    pub perturbation: Perturbation,
    #[serde(default)]
    pub split: SplitOptions,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub tolerances: GraphTolerances,
    #[serde(default)]
    pub membership: MembershipConfig,
    #[serde(default = "default_lip_samples")]
    pub lip_samples: usize,
}

fn default_perturbation() -> Perturbation {
    Perturbation::None
}
fn default_lip_samples() -> usize {
    2000
}

// ---- reports ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowReport {
    pub termination: Termination,
    pub blown_up: bool,
    pub n_samples: usize,
    pub arc_length: f64,
    pub gradient_energy: f64,
    pub final_state: Vec<f64>,
    pub final_value: f64,
    pub final_grad_norm: f64,
    pub omega: Option<OmegaDiagnostics>,
    pub omega_error: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub u: Vec<f64>,
    pub value: f64,
    pub morse_index: usize,
    pub computed: Vec<(f64, f64)>,
    pub predicted: Vec<(f64, f64)>,
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub k: usize,
    pub entries: Vec<SpectrumEntry>,
    pub max_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LnnReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub zeta: usize,
    pub kappa: usize,
    pub k: usize,
    pub leading_poly: PolynomialJson,
    pub trace_check: f64,
    pub certification: Option<SaddleReport>,
    pub certification_error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MembershipRow {
    pub node: Vec<f64>,
    pub offset: f64,
    pub report: MembershipReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CstableReport {
    pub dim_e1: usize,
    pub dim_e2: usize,
    pub theta: f64,
    pub rho: f64,
    pub mu: f64,
    pub eta_max: f64,
    pub lip_dev: f64,
    pub solve: SolveLog,
    pub max_ratio: Option<f64>,
    pub lipschitz: f64,
    pub g_at_zero: f64,
    pub membership: Vec<MembershipRow>,
}

/// Output of one subcommand: the JSON report plus optional CSV tables.
pub struct Outcome {
    pub json: String,
    pub csv: Vec<(String, String)>,
}

fn csv_string(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Numerical(e.to_string()))
}

fn read_config<T: for<'de> Deserialize<'de>>(path: Option<&Path>) -> Result<T> {
    let path = path.ok_or_else(|| Error::Config("--config is required".into()))?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn run_classify(cfg: &ClassifyConfig) -> Result<Outcome> {
    let obj = ObjectiveSpec::from_json(&cfg.objective)?;
    let report = classify_saddle(&obj, &cfg.point, &cfg.search)?;
    let table = csv_string(|b| {
        writeln!(b, "{}", crit_header(obj.dim()))?;
        for c in &report.crit_points {
            let mut row: Vec<String> = c.u.iter().map(|&v| fmt17(v)).collect();
            row.push(fmt17(c.value));
            row.push(c.morse_index.to_string());
            row.push(c.nullity.to_string());
            writeln!(b, "{}", row.join(","))?;
        }
        Ok(())
    })?;
    Ok(Outcome {
        json: to_json_string(&report)?,
        csv: vec![("crit_points.csv".into(), table)],
    })
}

fn crit_header(d: usize) -> String {
    let mut h: Vec<String> = (1..=d).map(|i| format!("u{i}")).collect();
    h.extend(["value".into(), "morse_index".into(), "nullity".into()]);
    h.join(",")
}

pub fn run_flow(cfg: &FlowRunConfig) -> Result<Outcome> {
    let obj = ObjectiveSpec::from_json(&cfg.objective)?;
    let (traj, field) = match (&cfg.blowup, &cfg.start) {
        (Some(b), None) => {
            let rho = b.rho.unwrap_or(2.0 * cfg.flow.stop_radius);
            let field = BlowupField::new(obj.clone(), &cfg.center, rho)?;
            let u = DVector::from_vec(b.u0.clone());
            let traj = integrate_blowup_flow(&field, &CylinderPoint::new(b.r0, u), &cfg.flow)?;
            (traj, Some(field))
        }
        (None, Some(w0)) => {
            let mut flow = cfg.flow.clone();
            flow.center.get_or_insert_with(|| cfg.center.clone());
            (integrate_gradient_flow(&obj, w0, &flow)?, None)
        }
        _ => return Err(Error::Config("give exactly one of `start` or `blowup`".into())),
    };
    let omega = match &field {
        Some(f) => omega_diagnostics(&traj, OmegaReference::Blowup(f)),
        None => {
            let leading = leading_term_with(&obj, &cfg.center, 12, 1e-9).ok();
            omega_diagnostics(
                &traj,
                OmegaReference::Center {
                    w_star: &cfg.center,
                    leading: leading.as_ref().map(|(_, p)| p),
                },
            )
        }
    };
    let last = traj.last();
    let report = FlowReport {
        termination: traj.termination,
        blown_up: traj.blown_up,
        n_samples: traj.samples.len(),
        arc_length: traj.arc_length,
        gradient_energy: gradient_energy(&traj),
        final_state: last.state.clone(),
        final_value: last.value,
        final_grad_norm: last.grad_norm,
        omega_error: omega.as_ref().err().map(|e| e.to_string()),
        omega: omega.ok(),
        error: traj.error.clone(),
    };
    let table = csv_string(|b| traj.write_csv(b))?;
    Ok(Outcome {
        json: to_json_string(&report)?,
        csv: vec![("trajectory.csv".into(), table)],
    })
}

pub fn run_mc(cfg: &McConfig, seed: u64) -> Result<Outcome> {
    let obj = ObjectiveSpec::from_json(&cfg.objective)?;
    let report: AvoidanceReport = monte_carlo_avoidance(&obj, &cfg.center, cfg.radius, cfg.n, &cfg.flow, seed)?;
    let table = format!(
        "n_total,n_escaped,n_converged_to_saddle,n_converged_elsewhere,n_undecided,seed,radius\n{},{},{},{},{},{},{}\n",
        report.n_total,
        report.n_escaped,
        report.n_converged_to_saddle,
        report.n_converged_elsewhere,
        report.n_undecided,
        report.seed,
        fmt17(report.radius)
    );
    Ok(Outcome {
        json: to_json_string(&report)?,
        csv: vec![("mc.csv".into(), table)],
    })
}

pub fn run_spectrum(cfg: &SpectrumConfig) -> Result<Outcome> {
    let obj = ObjectiveSpec::from_json(&cfg.objective)?;
    let field = BlowupField::new(obj, &cfg.center, cfg.rho)?;
    let crit_tol = cfg.search.crit_tol_for(field.leading_poly());
    let crits = find_crit_points(field.leading_poly(), &cfg.search)?;
    let mut entries = Vec::with_capacity(crits.len());
    for c in &crits {
        let computed = linearization_spectrum(&field, c, crit_tol)?;
        let predicted = predicted_spectrum(field.k(), c);
        entries.push(SpectrumEntry {
            u: c.u.clone(),
            value: c.value,
            morse_index: c.morse_index,
            distance: multiset_distance(&computed, &predicted),
            computed: complex_pairs(&computed),
            predicted: complex_pairs(&predicted),
        });
    }
    let max_distance = entries.iter().map(|e| e.distance).fold(0.0, f64::max);
    let report = SpectrumReport {
        k: field.k(),
        entries,
        max_distance,
    };
    let table = csv_string(|b| {
        writeln!(b, "point,index,computed_re,computed_im,predicted_re,predicted_im")?;
        for (i, e) in report.entries.iter().enumerate() {
            for (j, (c, p)) in e.computed.iter().zip(&e.predicted).enumerate() {
                writeln!(b, "{i},{j},{},{},{},{}", fmt17(c.0), fmt17(c.1), fmt17(p.0), fmt17(p.1))?;
            }
        }
        Ok(())
    })?;
    Ok(Outcome {
        json: to_json_string(&report)?,
        csv: vec![("spectra.csv".into(), table)],
    })
}

pub fn run_lnn(cfg: &LnnConfig, seed: u64) -> Result<Outcome> {
    let prob = LNNProblem::from_json(&cfg.problem)?;
    let w = match &cfg.weights {
        None => prob.zero_weights(),
        Some(blocks) => WeightVector::new(
            blocks
                .iter()
                .enumerate()
                .map(|(i, b)| rows_to_matrix(b, &format!("weight block {}", i + 1)))
                .collect::<Result<_>>()?,
        ),
    };
    prob.check(&w)?;
    let (k, p) = leading_poly(&prob, &w)?;
    let cert = certify_weakly_strict(&prob, &w, &cfg.search);
    let report = LnnReport {
        loss: loss(&prob, &w)?,
        grad_norm: loss_gradient(&prob, &w)?.norm(),
        zeta: zeta(&w, default_zero_tol(&w)),
        kappa: kappa(&prob, &w, cfg.search.k_max.max(2 * prob.depth()))?,
        k,
        leading_poly: p.as_polynomial().to_json(),
        trace_check: trace_hessian_check(&p, cfg.trace_samples, seed),
        certification_error: cert.as_ref().err().map(|e| e.to_string()),
        certification: cert.ok(),
    };
    Ok(Outcome {
        json: to_json_string(&report)?,
        csv: Vec::new(),
    })
}

pub fn run_cstable(cfg: &CstableConfig, seed: u64) -> Result<Outcome> {
    let t = rows_to_matrix(&cfg.t, "T")?;
    let split = split_spectrum(&t, &cfg.split)?;
    let m = split.dim();
    let (map, lip_dev): (MapFn, f64) = match cfg.perturbation {
        Perturbation::None => {
            let t = t.clone();
            (Arc::new(move |z: &DVector<f64>| &t * z), 0.0)
        }
        Perturbation::Quadratic {
            epsilon,
            s,
            source,
            target,
        } => {
            if source >= m || target >= m {
                return Err(Error::InvalidInput("perturbation axes out of range".into()));
            }
            let h: MapFn = Arc::new(move |z: &DVector<f64>| {
                let mut out = DVector::zeros(z.len());
                out[target] = epsilon * z[source] * z[source];
                out
            });
            let (map, _) = bump_localize(h, &t, s, cfg.lip_samples, seed)?;
            let lip = measure_lip_dev(&split, &map, 2.0 * s, cfg.lip_samples, seed);
            (map, lip)
        }
    };
    let eta = eta_budget(&split);
    let problem = GraphProblem::new(split, map, lip_dev, cfg.grid, cfg.tolerances)?;
    let (g, log) = solve_center_stable(&problem)?;
    let s = problem.splitting();
    let mut membership = Vec::new();
    if s.dim_e2() > 0 {
        let shift = s.e2_basis().column(0) * cfg.membership.offset;
        for i in 0..g.num_nodes() {
            let x = g.node(i);
            if x.amax() < cfg.membership.min_node {
                continue;
            }
            let z = graph_point(&problem, &g, i);
            for (offset, probe) in [(0.0, z.clone()), (cfg.membership.offset, &z + &shift)] {
                membership.push(MembershipRow {
                    node: x.as_slice().to_vec(),
                    offset,
                    report: membership_test(&problem, &g, &probe, cfg.membership.n_max, cfg.membership.bound),
                });
            }
        }
    }
    let report = CstableReport {
        dim_e1: s.dim_e1(),
        dim_e2: s.dim_e2(),
        theta: s.theta(),
        rho: s.rho(),
        mu: s.mu(),
        eta_max: eta.eta_max,
        lip_dev,
        max_ratio: log.ratios.iter().cloned().reduce(f64::max),
        lipschitz: g.lipschitz(s),
        g_at_zero: g.value(g.zero_index()).amax(),
        solve: log,
        membership,
    };
    let graph = csv_string(|b| g.write_csv(b))?;
    let contraction = {
        let mut out = String::from("iteration,distance,ratio\n");
        for (i, d) in report.solve.distances.iter().enumerate() {
            let ratio = if i > 0 && report.solve.distances[i - 1] > 1e-12 {
                fmt17(d / report.solve.distances[i - 1])
            } else {
                String::new()
            };
            out.push_str(&format!("{},{},{}\n", i + 1, fmt17(*d), ratio));
        }
        out
    };
    let table = {
        let mut out = String::new();
        let n1 = s.dim_e1();
        let mut h: Vec<String> = (1..=n1).map(|i| format!("x{i}")).collect();
        h.extend(
            ["offset", "growth_max", "stays_in_s1", "exit_step", "graph_distance", "on_graph_prediction"]
                .map(String::from),
        );
        out.push_str(&h.join(","));
        out.push('\n');
        for row in &report.membership {
            let mut cells: Vec<String> = row.node.iter().map(|&v| fmt17(v)).collect();
            cells.push(fmt17(row.offset));
            cells.push(fmt17(row.report.growth_max));
            cells.push(row.report.stays_in_s1.to_string());
            cells.push(row.report.exit_step.map_or(String::new(), |n| n.to_string()));
            cells.push(fmt17(row.report.graph_distance));
            cells.push(row.report.on_graph_prediction.to_string());
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    };
    Ok(Outcome {
        json: to_json_string(&report)?,
        csv: vec![
            ("graph.csv".into(), graph),
            ("contraction.csv".into(), contraction),
            ("membership.csv".into(), table),
        ],
    })
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::Classify => run_classify(&read_config(cfg)?),
        Command::Flow => run_flow(&read_config(cfg)?),
        Command::Mc => run_mc(&read_config(cfg)?, cli.seed),
        Command::BlowupSpectrum => run_spectrum(&read_config(cfg)?),
        Command::Lnn => run_lnn(&read_config(cfg)?, cli.seed),
        Command::Cstable => run_cstable(&read_config(cfg)?, cli.seed),
    }
}

fn emit(cli: &Cli, outcome: &Outcome) -> Result<()> {
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(format!("{}.json", cli.command.name())), &outcome.json)?;
            for (name, body) in &outcome.csv {
                fs::write(dir.join(name), body)?;
            }
        }
        None => {
            let mut stdout = io::stdout().lock();
            match (cli.format, outcome.csv.first()) {
                (Format::Csv, Some((_, body))) => stdout.write_all(body.as_bytes())?,
                (Format::Csv, None) => {
                    return Err(Error::Config(format!("{} has no CSV output", cli.command.name())))
                }
                (Format::Json, _) => stdout.write_all(outcome.json.as_bytes())?,
            }
        }
    }
    Ok(())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let pool = match cli.threads {
        Some(0) => {
            eprintln!("error: --threads must be positive");
            return 1;
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli)).and_then(|o| emit(cli, &o)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Entry point for the binary.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
