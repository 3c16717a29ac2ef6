//! Linear neural networks `f(W) = ½‖W_N ⋯ W_1 X − Y‖²`: loss, gradient,
//! zero-block count ζ, vanishing order κ, and the leading polynomial at
//! critical points with ζ = κ.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{vanishing_order, HomogeneousPoly, ObjectiveSpec, Polynomial, DEFAULT_ORDER_TOL};
use crate::sphere::{classify_polynomial, SaddleReport, SearchOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct LNNProblem {
    dims: Vec<usize>,
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

/// `{"dims": [d_1, ..., d_{N+1}], "X": rows, "Y": rows}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LNNProblemJson {
    pub dims: Vec<usize>,
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    #[serde(rename = "Y")]
    pub y: Vec<Vec<f64>>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::ShapeMismatch(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl LNNProblem {
    pub fn new(dims: Vec<usize>, x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::ShapeMismatch("need N >= 1 and positive dims".into()));
        }
        if x.nrows() != dims[0] || y.nrows() != *dims.last().unwrap() || x.ncols() != y.ncols() || x.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "X is {}x{}, Y is {}x{}, dims {:?}",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols(),
                dims
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("X and Y must be finite".into()));
        }
        Ok(Self { dims, x, y })
    }

    pub fn from_json(json: &LNNProblemJson) -> Result<Self> {
        Self::new(json.dims.clone(), matrix_from_rows(&json.x, "X")?, matrix_from_rows(&json.y, "Y")?)
    }

    pub fn to_json(&self) -> LNNProblemJson {
        LNNProblemJson {
            dims: self.dims.clone(),
            x: rows_of(&self.x),
            y: rows_of(&self.y),
        }
    }

    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Shape `(rows, cols)` of block `i` (0-based).
    pub fn block_shape(&self, i: usize) -> (usize, usize) {
        (self.dims[i + 1], self.dims[i])
    }

    /// Dimension of the stacked weight space.
    pub fn num_weights(&self) -> usize {
        (0..self.depth()).map(|i| self.dims[i] * self.dims[i + 1]).sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut out = vec![0];
        for i in 0..self.depth() {
            out.push(out[i] + self.dims[i] * self.dims[i + 1]);
        }
        out
    }

    pub fn zero_weights(&self) -> WeightVector {
        WeightVector {
            blocks: (0..self.depth())
                .map(|i| {
                    let (r, c) = self.block_shape(i);
                    DMatrix::zeros(r, c)
                })
                .collect(),
        }
    }

    pub fn check(&self, w: &WeightVector) -> Result<()> {
        if w.blocks.len() != self.depth() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight blocks for depth {}",
                w.blocks.len(),
                self.depth()
            )));
        }
        for (i, b) in w.blocks.iter().enumerate() {
            if b.shape() != self.block_shape(i) {
                return Err(Error::ShapeMismatch(format!(
                    "block {} is {:?}, expected {:?}",
                    i + 1,
                    b.shape(),
                    self.block_shape(i)
                )));
            }
        }
        Ok(())
    }

    /// Unflattens a stacked vector (block order, each block row-major).
    pub fn unflatten(&self, v: &[f64]) -> Result<WeightVector> {
        if v.len() != self.num_weights() {
            return Err(Error::ShapeMismatch(format!(
                "stacked vector has length {}, expected {}",
                v.len(),
                self.num_weights()
            )));
        }
        let off = self.offsets();
        let blocks = (0..self.depth())
            .map(|i| {
                let (r, c) = self.block_shape(i);
                DMatrix::from_row_slice(r, c, &v[off[i]..off[i + 1]])
            })
            .collect();
        Ok(WeightVector { blocks })
    }

    /// The loss as an objective on the stacked weight space.
    pub fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec::polynomial(self.loss_polynomial())
    }

    /// Exact polynomial of the loss in the stacked coordinates.
    pub fn loss_polynomial(&self) -> Polynomial {
        let zero = self.zero_weights();
        let parts = residual_parts(self, &zero);
        let mut out = Polynomial::zero(self.num_weights());
        for k in 0..=2 * self.depth() {
            out = out.add(&loss_part(&parts, k));
        }
        out
    }
}

/// Weight blocks `W_1, ..., W_N` with `W_i` of shape `d_{i+1} × d_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub blocks: Vec<DMatrix<f64>>,
}

impl WeightVector {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Self {
        Self { blocks }
    }

    /// Stacked vector in block order, each block row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| (0..b.nrows()).flat_map(move |i| (0..b.ncols()).map(move |j| b[(i, j)])))
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
    }
}

/// `W_{hi-1} ⋯ W_{lo}` (0-based, half-open); identity of size `d_lo` when empty.
fn chain(w: &WeightVector, dims: &[usize], lo: usize, hi: usize) -> DMatrix<f64> {
    let mut m = DMatrix::identity(dims[lo], dims[lo]);
    for b in &w.blocks[lo..hi] {
        m = b * m;
    }
    m
}

fn residual(prob: &LNNProblem, w: &WeightVector) -> DMatrix<f64> {
    chain(w, &prob.dims, 0, prob.depth()) * &prob.x - &prob.y
}

pub fn loss(prob: &LNNProblem, w: &WeightVector) -> Result<f64> {
    prob.check(w)?;
    Ok(0.5 * residual(prob, w).norm_squared())
}

/// `∂f/∂W_i = (W_N ⋯ W_{i+1})ᵀ R (W_{i-1} ⋯ W_1 X)ᵀ` with `R` the residual.
pub fn loss_gradient(prob: &LNNProblem, w: &WeightVector) -> Result<WeightVector> {
    prob.check(w)?;
    let n = prob.depth();
    let r = residual(prob, w);
    let blocks = (0..n)
        .map(|i| {
            let left = chain(w, &prob.dims, i + 1, n);
            let right = chain(w, &prob.dims, 0, i) * &prob.x;
            left.transpose() * &r * right.transpose()
        })
        .collect();
    Ok(WeightVector { blocks })
}

/// Default threshold for ζ: `1e-12 (1 + ‖W‖)`.
pub fn default_zero_tol(w: &WeightVector) -> f64 {
    1e-12 * (1.0 + w.norm())
}

/// Number of blocks with `‖W_i‖ <= zero_tol`.
pub fn zeta(w: &WeightVector, zero_tol: f64) -> usize {
    w.blocks.iter().filter(|b| b.norm() <= zero_tol).count()
}

fn zero_blocks(w: &WeightVector, zero_tol: f64) -> Vec<usize> {
    (0..w.blocks.len()).filter(|&i| w.blocks[i].norm() <= zero_tol).collect()
}

type PolyMatrix = Vec<Vec<Polynomial>>;

fn const_poly_matrix(m: &DMatrix<f64>, dim: usize) -> PolyMatrix {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| Polynomial::constant(dim, m[(i, j)])).collect())
        .collect()
}

fn poly_matmul(a: &PolyMatrix, b: &PolyMatrix, dim: usize) -> PolyMatrix {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let mut acc = Polynomial::zero(dim);
                    for l in 0..k {
                        if !a[i][l].is_zero() && !b[l][j].is_zero() {
                            acc = acc.add(&a[i][l].mul(&b[l][j]));
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// `R_j(H)` for `j = 0..=N`: the degree-`j` part of the residual at `W + H`.
fn residual_parts(prob: &LNNProblem, w: &WeightVector) -> Vec<PolyMatrix> {
    let dim = prob.num_weights();
    let off = prob.offsets();
    let n = prob.depth();
    // by_degree[j] = degree-j part of (W_i + H_i) ⋯ (W_1 + H_1) X
    let mut by_degree: Vec<PolyMatrix> = vec![const_poly_matrix(&prob.x, dim)];
    for i in 0..n {
        let (r, c) = prob.block_shape(i);
        let wi = const_poly_matrix(&w.blocks[i], dim);
        let hi: PolyMatrix = (0..r)
            .map(|a| (0..c).map(|b| Polynomial::variable(dim, off[i] + a * c + b)).collect())
            .collect();
        let mut next = Vec::with_capacity(by_degree.len() + 1);
        for j in 0..=by_degree.len() {
            let mut term: Option<PolyMatrix> = None;
            if j < by_degree.len() {
                term = Some(poly_matmul(&wi, &by_degree[j], dim));
            }
            if j > 0 {
                let h = poly_matmul(&hi, &by_degree[j - 1], dim);
                term = Some(match term {
                    None => h,
                    Some(t) => t
                        .iter()
                        .zip(&h)
                        .map(|(ra, rb)| ra.iter().zip(rb).map(|(pa, pb)| pa.add(pb)).collect())
                        .collect(),
                });
            }
            next.push(term.unwrap());
        }
        by_degree = next;
    }
    let y = &prob.y;
    for (a, row) in by_degree[0].iter_mut().enumerate() {
        for (b, p) in row.iter_mut().enumerate() {
            *p = p.sub(&Polynomial::constant(dim, y[(a, b)]));
        }
    }
    by_degree
}

/// Degree-`k` part of the loss: `½ Σ_{i+j=k} <R_i, R_j>`.
fn loss_part(parts: &[PolyMatrix], k: usize) -> Polynomial {
    let dim = parts[0][0][0].dim();
    let mut out = Polynomial::zero(dim);
    for i in 0..parts.len() {
        if i > k || k - i >= parts.len() || k - i < i {
            continue;
        }
        let j = k - i;
        let factor = if i == j { 0.5 } else { 1.0 };
        for (ra, rb) in parts[i].iter().zip(&parts[j]) {
            for (pa, pb) in ra.iter().zip(rb) {
                if !pa.is_zero() && !pb.is_zero() {
                    out = out.add(&pa.mul(pb).scale(factor));
                }
            }
        }
    }
    out
}

/// Exact expansion `h ↦ f(W + h)` up to total degree `max_degree`.
pub fn loss_expansion(prob: &LNNProblem, w: &WeightVector, max_degree: usize) -> Result<Polynomial> {
    prob.check(w)?;
    let parts = residual_parts(prob, w);
    let mut out = Polynomial::zero(prob.num_weights());
    for k in 0..=max_degree.min(2 * prob.depth()) {
        out = out.add(&loss_part(&parts, k));
    }
    Ok(out)
}

/// Vanishing order of the loss at `W`, read off the exact expansion.
pub fn kappa(prob: &LNNProblem, w: &WeightVector, k_max: usize) -> Result<usize> {
    prob.check(w)?;
    let parts = residual_parts(prob, w);
    let origin = vec![0.0; prob.num_weights()];
    let mut partial = loss_part(&parts, 0);
    for k in 1..=k_max.min(2 * prob.depth()) {
        partial = partial.add(&loss_part(&parts, k));
        let obj = ObjectiveSpec::polynomial(partial.clone());
        match vanishing_order(&obj, &origin, k_max.max(2), DEFAULT_ORDER_TOL) {
            Ok(order) => return Ok(order),
            Err(Error::OrderExceedsCap { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::OrderExceedsCap { k_max })
}

/// Leading Taylor term at a point with `ζ(W) = κ(W) = k`, from the trace
/// form `P(H) = -tr(M_k H_{i_k} M_{k-1} ⋯ M_1 H_{i_1} M_0 X Yᵀ)` where the
/// `M_j` are the products of the nonzero blocks between consecutive zero
/// blocks.
pub fn leading_poly(prob: &LNNProblem, w: &WeightVector) -> Result<(usize, HomogeneousPoly)> {
    prob.check(w)?;
    let z = zeta(w, default_zero_tol(w));
    let k_max = (2 * prob.depth()).max(2);
    let kap = kappa(prob, w, k_max)?;
    if z != kap {
        return Err(Error::HypothesisViolated(format!("zeta = {z} but kappa = {kap}")));
    }
    let idx = zero_blocks(w, default_zero_tol(w));
    let n = prob.depth();
    let dims = &prob.dims;
    let k = idx.len();
    // M_j sits between zero blocks j and j+1
    let mut ms = Vec::with_capacity(k + 1);
    ms.push(chain(w, dims, 0, idx[0]));
    for j in 0..k - 1 {
        ms.push(chain(w, dims, idx[j] + 1, idx[j + 1]));
    }
    ms.push(chain(w, dims, idx[k - 1] + 1, n));
    let g = &ms[0] * &prob.x * prob.y.transpose() * &ms[k];

    let dim = prob.num_weights();
    let off = prob.offsets();
    let mut poly = Polynomial::zero(dim);
    // walk (a_1, b_1, ..., a_k, b_k) over entries of the H blocks
    let shapes: Vec<(usize, usize)> = idx.iter().map(|&i| prob.block_shape(i)).collect();
    let mut ab = vec![(0usize, 0usize); k];
    fn walk(
        j: usize,
        weight: f64,
        ab: &mut Vec<(usize, usize)>,
        shapes: &[(usize, usize)],
        ms: &[DMatrix<f64>],
        g: &DMatrix<f64>,
        emit: &mut dyn FnMut(&[(usize, usize)], f64),
    ) {
        let k = shapes.len();
        if j == k {
            let (a_k, _) = ab[k - 1];
            let (_, b_1) = ab[0];
            let c = weight * g[(b_1, a_k)];
            if c != 0.0 {
                emit(ab, c);
            }
            return;
        }
        let (rows, cols) = shapes[j];
        for a in 0..rows {
            for b in 0..cols {
                // link (M_j)_{b_{j+1} a_j} between H_j and H_{j+1}
                let link = if j == 0 { 1.0 } else { ms[j][(b, ab[j - 1].0)] };
                if link == 0.0 {
                    continue;
                }
                ab[j] = (a, b);
                walk(j + 1, weight * link, ab, shapes, ms, g, emit);
            }
        }
    }
    let mut emit = |ab: &[(usize, usize)], c: f64| {
        let mut e = vec![0u32; dim];
        for (t, &(a, b)) in ab.iter().enumerate() {
            e[off[idx[t]] + a * shapes[t].1 + b] += 1;
        }
        poly.add_term(e, -c);
    };
    walk(0, 1.0, &mut ab, &shapes, &ms, &g, &mut emit);
    Ok((k, HomogeneousPoly::new(poly)?))
}

/// Largest `|tr ∂²P(v)|` over `n_samples` random unit vectors.
pub fn trace_hessian_check(p: &HomogeneousPoly, n_samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = p.dim();
    (0..n_samples)
        .map(|_| {
            let v = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng)).normalize();
            p.hessian(v.as_slice()).trace().abs()
        })
        .fold(0.0, f64::max)
}

/// Classification of a critical point with `ζ = κ`; such points are weakly
/// strict, so `weakly_strict = false` signals a numerical failure.
pub fn certify_weakly_strict(prob: &LNNProblem, w: &WeightVector, opts: &SearchOptions) -> Result<SaddleReport> {
    prob.check(w)?;
    let grad = loss_gradient(prob, w)?;
    let residual = grad.norm();
    let tol = opts.point_tol * (1.0 + prob.y.norm_squared() + prob.x.norm_squared());
    if residual > tol {
        return Err(Error::NotCritical { residual, tol });
    }
    let (k, p) = leading_poly(prob, w)?;
    classify_polynomial(k, &p, opts)
}
