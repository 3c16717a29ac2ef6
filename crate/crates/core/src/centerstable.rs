//! Center-stable graphs by the graph transform.
//!
//! `T` is split as `E₁ ⊕ E₂` (spectrum inside / outside the unit disk) by a
//! reordered real Schur form. Everything downstream works in coordinates
//! `z = C (x, y)` with `C = [Q₁ | V]` the two orthonormal bases, so `T`
//! becomes `diag(T₁, T₂)`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Schur};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type MapFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitOptions {
    pub theta_frac: f64,
    pub rho_frac: f64,
    pub n_trunc: usize,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            theta_frac: 1.0 / 3.0,
            rho_frac: 2.0 / 3.0,
            n_trunc: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearSplitting {
    t: DMatrix<f64>,
    e1: DMatrix<f64>,
    e2: DMatrix<f64>,
    coords: DMatrix<f64>,
    coords_inv: DMatrix<f64>,
    t1: DMatrix<f64>,
    t2: DMatrix<f64>,
    t1_inv: DMatrix<f64>,
    t2_inv: DMatrix<f64>,
    theta: f64,
    rho: f64,
    mu: f64,
    n_trunc: usize,
    /// `T₁ⁿ` for `n = 0..=n_trunc + 1`.
    t1_pows: Vec<DMatrix<f64>>,
    /// `T₂⁻ⁿ` for `n = 0..=n_trunc + 1`.
    t2_inv_pows: Vec<DMatrix<f64>>,
    eigenvalues: Vec<(f64, f64)>,
}

/// Diagonal blocks of a quasi-triangular matrix as `(start, size)`.
fn schur_blocks(s: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = s.nrows();
    let tol = 1e-13 * (1.0 + s.amax());
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && s[(i + 1, i)].abs() > tol {
            out.push((i, 2));
            i += 2;
        } else {
            out.push((i, 1));
            i += 1;
        }
    }
    out
}

/// Eigenvalues of a 1×1 or 2×2 block.
fn block_eigs(s: &DMatrix<f64>, start: usize, size: usize) -> Vec<(f64, f64)> {
    if size == 1 {
        return vec![(s[(start, start)], 0.0)];
    }
    let (a, b, c, d) = (
        s[(start, start)],
        s[(start, start + 1)],
        s[(start + 1, start)],
        s[(start + 1, start + 1)],
    );
    let tr = a + d;
    let det = a * d - b * c;
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        vec![(tr / 2.0 - r, 0.0), (tr / 2.0 + r, 0.0)]
    } else {
        let im = (-disc).sqrt();
        vec![(tr / 2.0, -im), (tr / 2.0, im)]
    }
}

fn modulus((re, im): (f64, f64)) -> f64 {
    re.hypot(im)
}

/// Solves `A X − X B = C` through the Kronecker form.
fn sylvester(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (p, q) = (a.nrows(), b.nrows());
    let ia = DMatrix::<f64>::identity(p, p);
    let ib = DMatrix::<f64>::identity(q, q);
    let k = ib.kronecker(a) - b.transpose().kronecker(&ia);
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Sylvester equation is singular (shared eigenvalues)".into()))?;
    Ok(DMatrix::from_column_slice(p, q, sol.as_slice()))
}

/// Swaps the adjacent diagonal blocks `[i, i+p)` and `[i+p, i+p+q)` of the
/// quasi-triangular `s`, updating `q_acc` so that `T = Q S Qᵀ` still holds.
fn swap_blocks(s: &mut DMatrix<f64>, q_acc: &mut DMatrix<f64>, i: usize, p: usize, q: usize) -> Result<()> {
    let a11 = s.view((i, i), (p, p)).clone_owned();
    let a12 = s.view((i, i + p), (p, q)).clone_owned();
    let a22 = s.view((i + p, i + p), (q, q)).clone_owned();
    let x = sylvester(&a11, &a22, &a12)?;
    // columns [-X; I] span the invariant subspace carrying A22's spectrum
    let mut m = DMatrix::zeros(p + q, p + q);
    m.view_mut((0, 0), (p, q)).copy_from(&(-x));
    m.view_mut((p, 0), (q, q)).fill_with_identity();
    m.view_mut((0, q), (p, p)).fill_with_identity();
    let qf = m.qr().q();
    let n = s.nrows();
    let cols = s.columns(i, p + q) * &qf;
    s.columns_mut(i, p + q).copy_from(&cols);
    let rows = qf.transpose() * s.rows(i, p + q);
    s.rows_mut(i, p + q).copy_from(&rows);
    let qc = q_acc.columns(i, p + q) * &qf;
    q_acc.columns_mut(i, p + q).copy_from(&qc);
    // the lower-left block is zero up to rounding
    for r in i + q..i + p + q {
        for c in i..i + q {
            s[(r, c)] = 0.0;
        }
    }
    for r in 0..n {
        for c in 0..r.saturating_sub(1) {
            s[(r, c)] = 0.0;
        }
    }
    Ok(())
}

/// Sign convention: the largest-magnitude entry of each column is positive.
fn fix_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let (mut best, mut val) = (0.0, 0.0);
        for &v in col.iter() {
            if v.abs() > best + 1e-12 {
                best = v.abs();
                val = v;
            }
        }
        if val < 0.0 {
            col.neg_mut();
        }
    }
}

fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return m.clone();
    }
    let mut q = m.clone().qr().q();
    fix_signs(&mut q);
    q
}

fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.singular_values().max()
    }
}

/// Splits `T` into center-stable and unstable parts.
pub fn split_spectrum(t: &DMatrix<f64>, opts: &SplitOptions) -> Result<LinearSplitting> {
    let m = t.nrows();
    if m == 0 || t.ncols() != m {
        return Err(Error::ShapeMismatch("T must be square and non-empty".into()));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("T must be finite".into()));
    }
    if !(0.0 < opts.theta_frac && opts.theta_frac < opts.rho_frac && opts.rho_frac < 1.0) {
        return Err(Error::InvalidInput("need 0 < theta_frac < rho_frac < 1".into()));
    }
    let lu = t.clone().lu();
    if lu.determinant().abs() <= 1e-300 || t.clone().try_inverse().is_none() {
        return Err(Error::InvalidInput("T must be invertible".into()));
    }
    let (mut q_acc, mut s) = Schur::new(t.clone()).unpack();

    let stable = |s: &DMatrix<f64>, (start, size): (usize, usize)| -> Result<bool> {
        let eigs = block_eigs(s, start, size);
        let inside: Vec<bool> = eigs.iter().map(|&e| modulus(e) <= 1.0).collect();
        if inside.iter().any(|&b| b != inside[0]) {
            return Err(Error::Numerical("a 2x2 Schur block straddles the unit circle".into()));
        }
        Ok(inside[0])
    };
    // bubble the stable blocks to the top
    loop {
        let blocks = schur_blocks(&s);
        let mut swapped = false;
        for w in blocks.windows(2) {
            if !stable(&s, w[0])? && stable(&s, w[1])? {
                swap_blocks(&mut s, &mut q_acc, w[0].0, w[0].1, w[1].1)?;
                swapped = true;
                break;
            }
        }
        if !swapped {
            break;
        }
    }
    let blocks = schur_blocks(&s);
    let mut eigenvalues = Vec::new();
    let mut n1 = 0;
    for &b in &blocks {
        let e = block_eigs(&s, b.0, b.1);
        if stable(&s, b)? {
            n1 += b.1;
        }
        eigenvalues.extend(e);
    }
    let n2 = m - n1;
    if n2 == 0 {
        return Err(Error::NoUnstableDirection);
    }
    let min_unstable = eigenvalues
        .iter()
        .map(|&e| modulus(e))
        .filter(|&r| r > 1.0)
        .fold(f64::INFINITY, f64::min);
    let mu = min_unstable.sqrt();
    let theta = mu.powf(opts.theta_frac);
    let rho = mu.powf(opts.rho_frac);

    let q1 = q_acc.columns(0, n1).clone_owned();
    let q2 = q_acc.columns(n1, n2).clone_owned();
    let v = if n1 == 0 {
        q2
    } else {
        let s11 = s.view((0, 0), (n1, n1)).clone_owned();
        let s12 = s.view((0, n1), (n1, n2)).clone_owned();
        let s22 = s.view((n1, n1), (n2, n2)).clone_owned();
        let y = sylvester(&s11, &s22, &(-s12))?;
        &q1 * y + q2
    };
    let mut e1 = q1;
    fix_signs(&mut e1);
    let e2 = orthonormal_columns(&v);
    if n1 > 0 {
        let cos = op_norm(&(e1.transpose() * &e2)).min(1.0);
        let angle = cos.acos();
        if angle < 1e-8 {
            return Err(Error::IllConditioned { angle });
        }
    }
    let mut coords = DMatrix::zeros(m, m);
    coords.columns_mut(0, n1).copy_from(&e1);
    coords.columns_mut(n1, n2).copy_from(&e2);
    let coords_inv = coords
        .clone()
        .try_inverse()
        .ok_or(Error::IllConditioned { angle: 0.0 })?;
    let t1 = e1.transpose() * t * &e1;
    let t2 = e2.transpose() * t * &e2;
    let t1_inv = if n1 == 0 { t1.clone() } else { t1.clone().try_inverse().ok_or_else(|| Error::Numerical("T1 singular".into()))? };
    let t2_inv = t2.clone().try_inverse().ok_or_else(|| Error::Numerical("T2 singular".into()))?;
    let n_trunc = opts.n_trunc.max(1);
    let mut t1_pows = vec![DMatrix::identity(n1, n1)];
    let mut t2_inv_pows = vec![DMatrix::identity(n2, n2)];
    for n in 0..=n_trunc {
        t1_pows.push(&t1 * &t1_pows[n]);
        t2_inv_pows.push(&t2_inv * &t2_inv_pows[n]);
    }
    Ok(LinearSplitting {
        t: t.clone(),
        e1,
        e2,
        coords,
        coords_inv,
        t1,
        t2,
        t1_inv,
        t2_inv,
        theta,
        rho,
        mu,
        n_trunc,
        t1_pows,
        t2_inv_pows,
        eigenvalues,
    })
}

impl LinearSplitting {
    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    /// Orthonormal basis of `E₁` as columns.
    pub fn e1_basis(&self) -> &DMatrix<f64> {
        &self.e1
    }

    pub fn e2_basis(&self) -> &DMatrix<f64> {
        &self.e2
    }

    /// `C = [E₁ basis | E₂ basis]`, mapping `(x, y)` to ambient vectors.
    pub fn coordinate_matrix(&self) -> &DMatrix<f64> {
        &self.coords
    }

    pub fn dim_e1(&self) -> usize {
        self.e1.ncols()
    }

    pub fn dim_e2(&self) -> usize {
        self.e2.ncols()
    }

    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn n_trunc(&self) -> usize {
        self.n_trunc
    }

    pub fn t1(&self) -> &DMatrix<f64> {
        &self.t1
    }

    pub fn t2(&self) -> &DMatrix<f64> {
        &self.t2
    }

    /// Eigenvalues of `T` as `(re, im)`, in reordered Schur order.
    pub fn eigenvalues(&self) -> &[(f64, f64)] {
        &self.eigenvalues
    }

    /// `(x, y)` coordinates of an ambient vector.
    pub fn to_coords(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let c = &self.coords_inv * z;
        let n1 = self.dim_e1();
        (c.rows(0, n1).clone_owned(), c.rows(n1, self.dim_e2()).clone_owned())
    }

    pub fn from_coords(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.e1 * x + &self.e2 * y
    }

    fn norm1_depth(&self, x: &DVector<f64>, depth: usize) -> f64 {
        if x.is_empty() {
            return 0.0;
        }
        (0..=depth)
            .map(|n| self.theta.powi(-(n as i32)) * (&self.t1_pows[n] * x).norm())
            .fold(0.0, f64::max)
    }

    fn norm2_depth(&self, y: &DVector<f64>, depth: usize) -> f64 {
        (0..=depth)
            .map(|n| self.mu.powi(n as i32) * (&self.t2_inv_pows[n] * y).norm())
            .fold(0.0, f64::max)
    }

    /// `‖x‖₁ = max_{n ≤ N} θ⁻ⁿ ‖T₁ⁿ x‖`.
    pub fn norm1(&self, x: &DVector<f64>) -> f64 {
        self.norm1_depth(x, self.n_trunc)
    }

    /// `‖y‖₂ = max_{n ≤ N} μⁿ ‖T₂⁻ⁿ y‖`.
    pub fn norm2(&self, y: &DVector<f64>) -> f64 {
        self.norm2_depth(y, self.n_trunc)
    }

    pub fn norm(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.norm1(x).max(self.norm2(y))
    }

    /// Adapted norm of an ambient vector.
    pub fn ambient_norm(&self, z: &DVector<f64>) -> f64 {
        let (x, y) = self.to_coords(z);
        self.norm(&x, &y)
    }

    /// Relative change of both adapted norms when the truncation depth is
    /// halved; small values mean the truncation has converged.
    pub fn truncation_gap(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let half = self.n_trunc / 2;
        let g1 = if x.is_empty() { 0.0 } else { (self.norm1(x) - self.norm1_depth(x, half)) / self.norm1(x).max(f64::MIN_POSITIVE) };
        let g2 = (self.norm2(y) - self.norm2_depth(y, half)) / self.norm2(y).max(f64::MIN_POSITIVE);
        g1.max(g2)
    }

    /// Euclidean-to-adapted constants `(c₁, c₂)` with `‖x‖₁ ≤ c₁‖x‖`, `‖y‖₂ ≤ c₂‖y‖`.
    fn equivalence_constants(&self) -> (f64, f64) {
        let c1 = (0..=self.n_trunc)
            .map(|n| self.theta.powi(-(n as i32)) * op_norm(&self.t1_pows[n]))
            .fold(0.0, f64::max);
        let c2 = (0..=self.n_trunc)
            .map(|n| self.mu.powi(n as i32) * op_norm(&self.t2_inv_pows[n]))
            .fold(0.0, f64::max);
        (c1, c2)
    }

    /// Upper bounds on `(‖T₁‖₁, ‖T₁⁻¹‖₁, ‖T₂‖₂, ‖T₂⁻¹‖₂)`.
    pub fn block_norm_bounds(&self) -> (f64, f64, f64, f64) {
        let n = self.n_trunc;
        let (th, mu) = (self.theta, self.mu);
        let (t1, t1i) = if self.dim_e1() == 0 {
            (0.0, 0.0)
        } else {
            (
                th * 1f64.max(th.powi(-(n as i32 + 1)) * op_norm(&self.t1_pows[n + 1])),
                op_norm(&self.t1_inv).max(1.0 / th),
            )
        };
        let t2 = op_norm(&self.t2).max(mu);
        let t2i = 1f64.max(mu.powi(n as i32 + 1) * op_norm(&self.t2_inv_pows[n + 1])) / mu;
        (t1, t1i, t2, t2i)
    }

    /// Bounds on `‖T‖` and `‖T⁻¹‖` in the adapted product norm.
    pub fn operator_norm_bounds(&self) -> (f64, f64) {
        let (t1, t1i, t2, t2i) = self.block_norm_bounds();
        (t1.max(t2), t1i.max(t2i))
    }

    fn t_coords(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.t1 * x, &self.t2 * y)
    }

    fn t_inv_coords(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.t1_inv * x, &self.t2_inv * y)
    }

    /// Operator norm bound of a linear map given in `(x, y)` coordinates,
    /// measured in the adapted product norm.
    pub fn adapted_operator_bound(&self, d: &DMatrix<f64>) -> f64 {
        let n1 = self.dim_e1();
        let n2 = self.dim_e2();
        let (c1, c2) = self.equivalence_constants();
        let blk = |r0: usize, rn: usize, c0: usize, cn: usize| {
            if rn == 0 || cn == 0 {
                0.0
            } else {
                op_norm(&d.view((r0, c0), (rn, cn)).clone_owned())
            }
        };
        let row1 = c1 * (blk(0, n1, 0, n1) + blk(0, n1, n1, n2));
        let row2 = c2 * (blk(n1, n2, 0, n1) + blk(n1, n2, n1, n2));
        row1.max(row2)
    }
}

/// The six linear bounds on η and the resulting budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaBudget {
    pub eta_max: f64,
    pub bounds: [f64; 6],
    pub norm_t: f64,
    pub norm_t_inv: f64,
}

/// Largest `η` (times 0.9) meeting all conditions of the graph-transform
/// argument, with `η̂ = 2‖T⁻¹‖²η`.
pub fn eta_budget(s: &LinearSplitting) -> EtaBudget {
    let (nt, nti) = s.operator_norm_bounds();
    let (th, rho, mu) = (s.theta, s.rho, s.mu);
    let hat = 2.0 * nti * nti;
    let bounds = [
        1.0 / (2.0 * nti),
        1.0 / (hat * nt),
        (1.0 / th - 1.0 / mu) / 3.0 / hat,
        (1.0 / th - 1.0 / rho) / hat,
        rho - th,
        mu - rho,
    ];
    let eta_max = 0.9 * bounds.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0);
    EtaBudget {
        eta_max,
        bounds,
        norm_t: nt,
        norm_t_inv: nti,
    }
}

/// Step-1 contraction factor `(μ⁻¹ + 2η̂) / (θ⁻¹ − η̂)` for a given `Lip(f − T)`.
pub fn contraction_bound(s: &LinearSplitting, lip_dev: f64) -> f64 {
    let (_, nti) = s.operator_norm_bounds();
    let hat = 2.0 * nti * nti * lip_dev;
    (1.0 / s.mu + 2.0 * hat) / (1.0 / s.theta - hat)
}

/// Per-axis grid over `E₁` coordinates. Nodes are `0` and `±L·2^{-j/r}`
/// for `j = 0..=r·octaves`, so halving maps nodes onto nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub half_width: f64,
    pub levels_per_octave: usize,
    pub octaves: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            half_width: 1.0,
            levels_per_octave: 4,
            octaves: 10,
        }
    }
}

impl GridSpec {
    pub fn refined(&self) -> Self {
        Self {
            levels_per_octave: 2 * self.levels_per_octave,
            ..*self
        }
    }

    pub fn axis_nodes(&self) -> Vec<f64> {
        let r = self.levels_per_octave.max(1);
        let total = r * self.octaves;
        let mut pos = vec![0.0; total + 1];
        for j in 0..=total {
            pos[j] = if j < r {
                self.half_width * 2f64.powf(-(j as f64) / r as f64)
            } else {
                pos[j - r] / 2.0
            };
        }
        let mut nodes: Vec<f64> = pos.iter().map(|p| -p).collect();
        nodes.push(0.0);
        nodes.extend(pos.iter().rev());
        nodes.sort_by(f64::total_cmp);
        nodes
    }
}

/// A function `g : E₁ → E₂` on a rectangular grid, multilinear between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFunction {
    axes: Vec<Vec<f64>>,
    values: Vec<DVector<f64>>,
    dim_e2: usize,
}

impl GraphFunction {
    pub fn zero(axes: Vec<Vec<f64>>, dim_e2: usize) -> Result<Self> {
        if axes.len() > 2 {
            return Err(Error::InvalidInput("grids support dim E1 <= 2".into()));
        }
        for a in &axes {
            if a.len() < 2 || a.windows(2).any(|w| w[0] >= w[1]) || !a.contains(&0.0) {
                return Err(Error::InvalidInput("axis nodes must be increasing and contain 0".into()));
            }
        }
        let n: usize = axes.iter().map(Vec::len).product();
        Ok(Self {
            axes,
            values: vec![DVector::zeros(dim_e2); n],
            dim_e2,
        })
    }

    pub fn from_fn<F: Fn(&DVector<f64>) -> DVector<f64>>(axes: Vec<Vec<f64>>, dim_e2: usize, g: F) -> Result<Self> {
        let mut out = Self::zero(axes, dim_e2)?;
        for i in 0..out.num_nodes() {
            let x = out.node(i);
            out.values[i] = g(&x);
        }
        Ok(out)
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    pub fn dim_e1(&self) -> usize {
        self.axes.len()
    }

    pub fn dim_e2(&self) -> usize {
        self.dim_e2
    }

    fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes.len()];
        for a in (0..self.axes.len()).rev() {
            idx[a] = i % self.axes[a].len();
            i /= self.axes[a].len();
        }
        idx
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |acc, (&i, a)| acc * a.len() + i)
    }

    pub fn node(&self, i: usize) -> DVector<f64> {
        let idx = self.multi_index(i);
        DVector::from_iterator(self.axes.len(), idx.iter().zip(&self.axes).map(|(&j, a)| a[j]))
    }

    pub fn value(&self, i: usize) -> &DVector<f64> {
        &self.values[i]
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    /// Largest box half-width per axis.
    pub fn box_half_width(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[0].abs().max(a[a.len() - 1].abs())).collect()
    }

    /// Multilinear interpolation; coordinates outside the grid are clamped.
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.axes.is_empty() {
            return self.values[0].clone();
        }
        let mut cells = Vec::with_capacity(self.axes.len());
        for (a, axis) in self.axes.iter().enumerate() {
            let v = x[a].clamp(axis[0], axis[axis.len() - 1]);
            let hi = axis.partition_point(|&n| n < v).clamp(1, axis.len() - 1);
            let lo = hi - 1;
            let t = (v - axis[lo]) / (axis[hi] - axis[lo]);
            cells.push((lo, t));
        }
        let mut out = DVector::zeros(self.dim_e2);
        for corner in 0..(1usize << self.axes.len()) {
            let mut w = 1.0;
            let mut idx = Vec::with_capacity(self.axes.len());
            for (a, &(lo, t)) in cells.iter().enumerate() {
                if corner & (1 << a) != 0 {
                    w *= t;
                    idx.push(lo + 1);
                } else {
                    w *= 1.0 - t;
                    idx.push(lo);
                }
            }
            if w != 0.0 {
                out += &self.values[self.flat_index(&idx)] * w;
            }
        }
        out
    }

    /// Largest `‖g(a) − g(b)‖₂ / ‖a − b‖₁` over grid-adjacent node pairs.
    pub fn lipschitz(&self, s: &LinearSplitting) -> f64 {
        let mut best: f64 = 0.0;
        for i in 0..self.num_nodes() {
            let idx = self.multi_index(i);
            for a in 0..self.axes.len() {
                if idx[a] + 1 < self.axes[a].len() {
                    let mut jdx = idx.clone();
                    jdx[a] += 1;
                    let j = self.flat_index(&jdx);
                    let dx = self.node(j) - self.node(i);
                    let dy = &self.values[j] - &self.values[i];
                    best = best.max(s.norm2(&dy) / s.norm1(&dx));
                }
            }
        }
        best
    }

    /// `max over nonzero nodes of ‖g₂(x) − g₁(x)‖₂ / ‖x‖₁`.
    pub fn distance(&self, other: &Self, s: &LinearSplitting) -> f64 {
        (0..self.num_nodes())
            .filter_map(|i| {
                let x = self.node(i);
                let nx = s.norm1(&x);
                (nx > 0.0).then(|| s.norm2(&(&self.values[i] - &other.values[i])) / nx)
            })
            .fold(0.0, f64::max)
    }

    /// Largest Euclidean difference at the nodes of `self`, evaluating
    /// `other` by interpolation.
    pub fn sup_difference(&self, other: &Self) -> f64 {
        (0..self.num_nodes())
            .map(|i| (&self.values[i] - other.eval(&self.node(i))).norm())
            .fold(0.0, f64::max)
    }

    pub fn zero_index(&self) -> usize {
        let idx: Vec<usize> = self.axes.iter().map(|a| a.iter().position(|&v| v == 0.0).unwrap()).collect();
        self.flat_index(&idx)
    }

    /// CSV with columns `x1.., y1..` in `E₁` / `E₂` coordinates.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header: Vec<String> = (1..=self.dim_e1()).map(|i| format!("x{i}")).collect();
        header.extend((1..=self.dim_e2).map(|i| format!("y{i}")));
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.num_nodes() {
            let row: Vec<String> = self
                .node(i)
                .iter()
                .chain(self.values[i].iter())
                .map(|&v| crate::flow::fmt17(v))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphTolerances {
    /// Stop once the weighted distance between iterates falls below this.
    pub solve_tol: f64,
    pub max_iter: usize,
    pub invert_tol: f64,
    pub root_tol: f64,
    pub inner_max_iter: usize,
}

impl Default for GraphTolerances {
    fn default() -> Self {
        Self {
            solve_tol: 1e-13,
            max_iter: 200,
            invert_tol: 1e-15,
            root_tol: 1e-14,
            inner_max_iter: 200,
        }
    }
}

/// A map `f` with `f(0) = 0` close to `T`, and the grid to solve on.
#[derive(Clone)]
pub struct GraphProblem {
    splitting: LinearSplitting,
    map: MapFn,
    lip_dev: f64,
    grid: GridSpec,
    tol: GraphTolerances,
}

impl std::fmt::Debug for GraphProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GraphProblem")
            .field("splitting", &self.splitting)
            .field("lip_dev", &self.lip_dev)
            .field("grid", &self.grid)
            .field("tol", &self.tol)
            .finish_non_exhaustive()
    }
}

impl GraphProblem {
    /// `lip_dev` is the declared `Lip(f − T)` in the adapted norm; it must
    /// lie below the η budget.
    pub fn new(splitting: LinearSplitting, map: MapFn, lip_dev: f64, grid: GridSpec, tol: GraphTolerances) -> Result<Self> {
        let budget = eta_budget(&splitting).eta_max;
        if !(lip_dev >= 0.0) || lip_dev >= budget {
            return Err(Error::HypothesisViolated(format!(
                "Lip(f - T) = {lip_dev:e} is not below the budget {budget:e}"
            )));
        }
        if splitting.dim_e1() > 2 {
            return Err(Error::InvalidInput("grids support dim E1 <= 2".into()));
        }
        if !(grid.half_width > 0.0) || grid.levels_per_octave == 0 {
            return Err(Error::InvalidInput("grid half_width and levels_per_octave must be positive".into()));
        }
        let zero = DVector::zeros(splitting.dim());
        if map(&zero).amax() > 1e-14 {
            return Err(Error::InvalidInput("the map must fix the origin".into()));
        }
        Ok(Self {
            splitting,
            map,
            lip_dev,
            grid,
            tol,
        })
    }

    /// Linear problem `f = T`.
    pub fn linear(splitting: LinearSplitting, grid: GridSpec) -> Result<Self> {
        let t = splitting.t.clone();
        Self::new(splitting, Arc::new(move |z| &t * z), 0.0, grid, GraphTolerances::default())
    }

    pub fn splitting(&self) -> &LinearSplitting {
        &self.splitting
    }

    pub fn lip_dev(&self) -> f64 {
        self.lip_dev
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn tolerances(&self) -> &GraphTolerances {
        &self.tol
    }

    pub fn with_grid(&self, grid: GridSpec) -> Self {
        Self { grid, ..self.clone() }
    }

    pub fn map(&self, z: &DVector<f64>) -> DVector<f64> {
        (self.map)(z)
    }

    /// `f` in `(x, y)` coordinates.
    pub fn map_coords(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let s = &self.splitting;
        s.to_coords(&(self.map)(&s.from_coords(x, y)))
    }

    pub fn initial_graph(&self) -> Result<GraphFunction> {
        let axes = vec![self.grid.axis_nodes(); self.splitting.dim_e1()];
        GraphFunction::zero(axes, self.splitting.dim_e2())
    }

    pub fn contraction_bound(&self) -> f64 {
        contraction_bound(&self.splitting, self.lip_dev)
    }
}

/// Sampled adapted-norm bound on `Lip(f − T)` over the box `[-r, r]^m` in
/// `(x, y)` coordinates, from finite-difference Jacobians.
pub fn measure_lip_dev(s: &LinearSplitting, map: &MapFn, radius: f64, n_samples: usize, seed: u64) -> f64 {
    let m = s.dim();
    let n1 = s.dim_e1();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6 * radius.max(1e-3);
    let dev = |c: &DVector<f64>| -> DVector<f64> {
        let x = c.rows(0, n1).clone_owned();
        let y = c.rows(n1, m - n1).clone_owned();
        let z = s.from_coords(&x, &y);
        let fz = s.coords_inv.clone() * map(&z);
        let (tx, ty) = s.t_coords(&x, &y);
        let mut t = DVector::zeros(m);
        t.rows_mut(0, n1).copy_from(&tx);
        t.rows_mut(n1, m - n1).copy_from(&ty);
        fz - t
    };
    let mut best: f64 = 0.0;
    for _ in 0..n_samples {
        let c = DVector::from_fn(m, |_, _| rng.random_range(-radius..radius));
        let mut jac = DMatrix::zeros(m, m);
        for j in 0..m {
            let mut cp = c.clone();
            cp[j] += h;
            let mut cm = c.clone();
            cm[j] -= h;
            jac.set_column(j, &((dev(&cp) - dev(&cm)) / (2.0 * h)));
        }
        best = best.max(s.adapted_operator_bound(&jac));
    }
    best
}

/// Smooth radial cutoff: 1 on the unit ball, 0 outside the 2-ball.
pub fn bump(v: &DVector<f64>) -> f64 {
    let t = v.norm();
    if t <= 1.0 {
        return 1.0;
    }
    if t >= 2.0 {
        return 0.0;
    }
    // flat profile exp(-1/(1 - s²)) evaluated at s = 1 - x
    let e = |x: f64| if x <= 0.0 { 0.0 } else { (-1.0 / (x * (2.0 - x))).exp() };
    let a = e(2.0 - t);
    let b = e(t - 1.0);
    a / (a + b)
}

/// `f_s(z) = T z + φ(z / s) h(z)`, with a sampled estimate of the Euclidean
/// `Lip(f_s − T)` over the `2s`-ball.
pub fn bump_localize(h: MapFn, t: &DMatrix<f64>, s: f64, n_samples: usize, seed: u64) -> Result<(MapFn, f64)> {
    if !(s > 0.0) {
        return Err(Error::InvalidInput("bump scale s must be positive".into()));
    }
    let m = t.nrows();
    let t = t.clone();
    let dev: MapFn = {
        let h = h.clone();
        Arc::new(move |z: &DVector<f64>| {
            let phi = bump(&(z / s));
            if phi == 0.0 {
                DVector::zeros(z.len())
            } else {
                h(z) * phi
            }
        })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-6 * s;
    let mut lip: f64 = 0.0;
    for _ in 0..n_samples {
        let z = loop {
            let c = DVector::from_fn(m, |_, _| rng.random_range(-2.0 * s..2.0 * s));
            if c.norm() <= 2.0 * s {
                break c;
            }
        };
        let mut jac = DMatrix::zeros(m, m);
        for j in 0..m {
            let mut zp = z.clone();
            zp[j] += step;
            let mut zm = z.clone();
            zm[j] -= step;
            jac.set_column(j, &((dev(&zp) - dev(&zm)) / (2.0 * step)));
        }
        lip = lip.max(op_norm(&jac));
    }
    let map: MapFn = Arc::new(move |z: &DVector<f64>| &t * z + dev(z));
    Ok((map, lip))
}

fn join(x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(x.len() + y.len());
    out.rows_mut(0, x.len()).copy_from(x);
    out.rows_mut(x.len(), y.len()).copy_from(y);
    out
}

fn invert_coords(p: &GraphProblem, x0: &DVector<f64>, y0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    let s = &p.splitting;
    let (mut x, mut y) = s.t_inv_coords(x0, y0);
    let scale = 1.0 + s.norm(x0, y0);
    let mut last_step = f64::INFINITY;
    for _ in 0..max_iter {
        let (fx, fy) = p.map_coords(&x, &y);
        // Φ(z) = z − T⁻¹ f(z) + T⁻¹ z₀
        let (dx, dy) = s.t_inv_coords(&(fx - x0), &(fy - y0));
        let step = s.norm(&dx, &dy);
        if !step.is_finite() {
            return Err(Error::ContractionFailure { iterations: max_iter });
        }
        x -= dx;
        y -= dy;
        if step <= tol * scale || (step <= 1e-12 * scale && step >= last_step) {
            return Ok((x, y));
        }
        if step > 1e6 * scale {
            return Err(Error::ContractionFailure { iterations: max_iter });
        }
        last_step = step;
    }
    Err(Error::ContractionFailure { iterations: max_iter })
}

/// Solves `f(z) = z₀` by the contraction `Φ(z) = z − T⁻¹ f(z) + T⁻¹ z₀`.
pub fn invert_map(problem: &GraphProblem, z0: &DVector<f64>) -> Result<DVector<f64>> {
    let s = &problem.splitting;
    let (x0, y0) = s.to_coords(z0);
    let (x, y) = invert_coords(problem, &x0, &y0, 1e-12, problem.tol.inner_max_iter)?;
    Ok(s.from_coords(&x, &y))
}

/// One application of `Γ(g) = (α₂ ∘ id×g) ∘ (α₁ ∘ id×g)⁻¹` with `α = f⁻¹`.
pub fn graph_transform(problem: &GraphProblem, g: &GraphFunction) -> Result<GraphFunction> {
    let s = &problem.splitting;
    let tol = problem.tol;
    let limits: Vec<f64> = g.box_half_width().iter().map(|w| 1.5 * w).collect();
    let alpha = |x: &DVector<f64>| invert_coords(problem, x, &g.eval(x), tol.invert_tol, tol.inner_max_iter);
    let values: Vec<Result<DVector<f64>>> = (0..g.num_nodes())
        .into_par_iter()
        .map(|node| {
            let target = g.node(node);
            // x ← x − T₁ (α₁(x, g(x)) − x'), seeded at T₁ x'
            let mut x = &s.t1 * &target;
            let scale = 1.0 + target.amax();
            let mut residual = f64::INFINITY;
            for _ in 0..tol.inner_max_iter {
                if x.iter().zip(&limits).any(|(v, l)| v.abs() > *l) {
                    return Err(Error::BoxEscape { node });
                }
                let (ax, ay) = alpha(&x)?;
                let r = ax - &target;
                let rn = r.amax();
                if rn <= tol.root_tol * scale || (rn <= 1e-12 * scale && rn >= residual) {
                    return Ok(ay);
                }
                residual = rn;
                x -= &s.t1 * r;
            }
            Err(Error::RootFindFailure { node, residual })
        })
        .collect();
    let mut out = g.clone();
    for (i, v) in values.into_iter().enumerate() {
        out.values[i] = v?;
    }
    let z = out.zero_index();
    out.values[z].fill(0.0);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveLog {
    pub iterations: usize,
    pub distances: Vec<f64>,
    /// Ratios of successive distances, skipping those at rounding level.
    pub ratios: Vec<f64>,
    pub contraction_bound: f64,
}

/// Iterates `g ← Γ(g)` from `g ≡ 0` until the weighted distance between
/// iterates drops below the tolerance.
pub fn solve_center_stable(problem: &GraphProblem) -> Result<(GraphFunction, SolveLog)> {
    let s = &problem.splitting;
    let mut g = problem.initial_graph()?;
    let mut distances = Vec::new();
    let mut ratios = Vec::new();
    for it in 1..=problem.tol.max_iter {
        let next = graph_transform(problem, &g)?;
        let d = next.distance(&g, s);
        if let Some(&prev) = distances.last() {
            if prev > 1e-12 {
                ratios.push(d / prev);
            }
        }
        distances.push(d);
        g = next;
        if d < problem.tol.solve_tol {
            return Ok((
                g,
                SolveLog {
                    iterations: it,
                    distances,
                    ratios,
                    contraction_bound: problem.contraction_bound(),
                },
            ));
        }
    }
    Err(Error::MaxIterations {
        iterations: problem.tol.max_iter,
        last_ratio: ratios.last().copied().unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    /// `max_{n ≤ n_max} ρ⁻ⁿ ‖fⁿ(z)‖` in the adapted norm.
    pub growth_max: f64,
    /// The same maximum over `n ≤ n_max / 2`.
    pub growth_half: f64,
    pub stays_in_s1: bool,
    /// First `n` with `fⁿ(z) ∉ S₁ = {‖x‖₁ ≥ ‖y‖₂}`.
    pub exit_step: Option<usize>,
    /// `‖y − g(x)‖₂` for `z = (x, y)`.
    pub graph_distance: f64,
    /// `x` lies outside the grid box, so `g(x)` was extrapolated.
    pub low_confidence: bool,
    pub overflow_step: Option<usize>,
    pub on_graph_prediction: bool,
}

/// Forward-orbit growth test for membership in the center-stable set;
/// bounded growth (`growth_max <= bound`) predicts membership.
pub fn membership_test(problem: &GraphProblem, g: &GraphFunction, z: &DVector<f64>, n_max: usize, bound: f64) -> MembershipReport {
    let s = &problem.splitting;
    let (mut x, mut y) = s.to_coords(z);
    let graph_distance = s.norm2(&(&y - g.eval(&x)));
    let low_confidence = x.iter().zip(g.box_half_width()).any(|(v, w)| v.abs() > w);
    let mut growth_max: f64 = 0.0;
    let mut growth_half: f64 = 0.0;
    let mut exit_step = None;
    let mut overflow_step = None;
    for n in 0..=n_max {
        let nx = s.norm1(&x);
        let ny = s.norm2(&y);
        if !(nx.is_finite() && ny.is_finite()) || nx.max(ny) > 1e300 {
            overflow_step = Some(n);
            break;
        }
        if exit_step.is_none() && ny > nx {
            exit_step = Some(n);
        }
        let gr = s.rho.powi(-(n as i32)) * nx.max(ny);
        growth_max = growth_max.max(gr);
        if n <= n_max / 2 {
            growth_half = growth_half.max(gr);
        }
        if n < n_max {
            let (fx, fy) = problem.map_coords(&x, &y);
            x = fx;
            y = fy;
        }
    }
    if overflow_step.is_some() {
        growth_max = f64::INFINITY;
    }
    MembershipReport {
        growth_max,
        growth_half,
        stays_in_s1: exit_step.is_none() && overflow_step.is_none(),
        exit_step,
        graph_distance,
        low_confidence,
        overflow_step,
        on_graph_prediction: overflow_step.is_none() && growth_max <= bound,
    }
}

/// Graph point `C (x, g(x))` for a grid node.
pub fn graph_point(problem: &GraphProblem, g: &GraphFunction, node: usize) -> DVector<f64> {
    problem.splitting.from_coords(&g.node(node), g.value(node))
}

/// Joined `(x, y)` vector; handy for callers working in coordinates.
pub fn coords_vector(x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    join(x, y)
}
