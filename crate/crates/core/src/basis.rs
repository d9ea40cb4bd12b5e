//! Teugel martingales: monic Gram-Schmidt of compensated power-jump processes.
//!
//! For a multi-index `q` the compensated power-jump process is
//! `Y^q(t) = Σ_{s <= t} ΔX(s)^q - m_q t`, and for unit indices `e_i` the
//! Gaussian part of `X_i` is added. Their predictable covariation is
//! `<Y^p, Y^q>(t) = (m_{p+q} + Σ_ij [p = e_i, q = e_j]) t`, which is the Gram
//! matrix used here. Orthogonalizing in graded lexicographic order with
//! leading coefficient one gives `H^p`.

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::levy::{LevyModel, MomentTable};
use crate::multiindex::{enumerate_multiindices, MultiIndex};
use crate::stats::{estimate, Estimate};

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Dense symmetric matrix indexed by a list of multi-indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub indices: Vec<MultiIndex>,
    /// Row-major.
    pub values: Vec<f64>,
}

impl GramMatrix {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    /// Max-abs entry, used as the matrix scale.
    pub fn norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    fn bilinear(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = self.size();
        let mut s = 0.0;
        for i in 0..n {
            if a[i] == 0.0 {
                continue;
            }
            let row = &self.values[i * n..(i + 1) * n];
            s += a[i] * row.iter().zip(b).map(|(g, bj)| g * bj).sum::<f64>();
        }
        s
    }
}

/// `G[p][q] = m_{p+q} + Σ_ij [p = e_i and q = e_j]`.
pub fn gram_matrix(moments: &MomentTable, model: &LevyModel, indices: &[MultiIndex]) -> Result<GramMatrix> {
    let n = indices.len();
    let mut values = vec![0.0; n * n];
    for (i, p) in indices.iter().enumerate() {
        for (j, q) in indices.iter().enumerate().skip(i) {
            let mut g = moments.get(&p.add(q))?;
            if let (Some(a), Some(b)) = (p.unit_axis(), q.unit_axis()) {
                g += model.covariance(a, b);
            }
            values[i * n + j] = g;
            values[j * n + i] = g;
        }
    }
    Ok(GramMatrix {
        indices: indices.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Leading coefficient 1; `κ_p` carries the scale.
    Monic,
}

/// Coefficient table of the orthogonalized family.
#[derive(Debug, Clone)]
pub struct TeugelBasis {
    degree: u32,
    indices: Vec<MultiIndex>,
    /// For element `p` (by position), the pairs `(q, c_q)` with `q` strictly before `p`.
    coeffs: Vec<Vec<(usize, f64)>>,
    norms: Vec<f64>,
    degenerate: Vec<bool>,
    rank_tol: f64,
    normalization: Normalization,
}

/// Monic Gram-Schmidt in index order with degeneracy detection.
///
/// An element is degenerate when its residual `κ_p <= rank_tol · max_q κ_q`;
/// it is then excluded from all later projections.
pub fn orthogonalize(gram: &GramMatrix, rank_tol: f64) -> Result<TeugelBasis> {
    let n = gram.size();
    let gnorm = gram.norm();
    let mut scale = (0..n).map(|i| gram.get(i, i)).fold(0.0f64, f64::max);
    let mut result = gram_schmidt(gram, rank_tol, scale, gnorm)?;
    // Reclassify against the realized max κ until the flags stop changing.
    for _ in 0..4 {
        let max_kappa = result.1.iter().fold(0.0f64, |a, &b| a.max(b));
        if max_kappa == scale {
            break;
        }
        scale = max_kappa;
        let next = gram_schmidt(gram, rank_tol, scale, gnorm)?;
        let stable = next.2 == result.2;
        result = next;
        if stable {
            break;
        }
    }
    let (dense, norms, degenerate) = result;
    let coeffs = dense
        .iter()
        .enumerate()
        .map(|(p, c)| (0..p).filter(|&q| c[q] != 0.0).map(|q| (q, c[q])).collect())
        .collect();
    let degree = gram.indices.iter().map(MultiIndex::degree).max().unwrap_or(0);
    Ok(TeugelBasis {
        degree,
        indices: gram.indices.clone(),
        coeffs,
        norms,
        degenerate,
        rank_tol,
        normalization: Normalization::Monic,
    })
}

type Sweep = (Vec<Vec<f64>>, Vec<f64>, Vec<bool>);

fn gram_schmidt(gram: &GramMatrix, rank_tol: f64, scale: f64, gnorm: f64) -> Result<Sweep> {
    let n = gram.size();
    let mut dense: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    let threshold = rank_tol * scale;
    let negative_tol = rank_tol.max(1e-12) * scale.max(gnorm);
    for p in 0..n {
        let mut a = vec![0.0; n];
        a[p] = 1.0;
        project_out(gram, &mut a, &dense, &norms, &degenerate);
        let needs_second_pass = (0..p)
            .filter(|&q| !degenerate[q])
            .any(|q| gram.bilinear(&a, &dense[q]).abs() > 1e-12 * gnorm);
        if needs_second_pass {
            project_out(gram, &mut a, &dense, &norms, &degenerate);
        }
        let kappa = gram.bilinear(&a, &a);
        if kappa < -negative_tol {
            return Err(Error::NegativeResidual {
                index: gram.indices[p].clone(),
                kappa,
            });
        }
        let is_degenerate = kappa <= threshold;
        norms.push(kappa.max(0.0));
        degenerate.push(is_degenerate);
        dense.push(a);
    }
    Ok((dense, norms, degenerate))
}

fn project_out(gram: &GramMatrix, a: &mut [f64], dense: &[Vec<f64>], norms: &[f64], degenerate: &[bool]) {
    // Classical Gram-Schmidt: all projections use the unmodified vector.
    let original = a.to_vec();
    for q in 0..dense.len() {
        if degenerate[q] {
            continue;
        }
        let c = gram.bilinear(&original, &dense[q]) / norms[q];
        if c != 0.0 {
            for (ai, di) in a.iter_mut().zip(&dense[q]) {
                *ai -= c * di;
            }
        }
    }
}

impl TeugelBasis {
    /// Builds the basis of all indices with `1 <= |p| <= degree` for `model`.
    pub fn build(model: &LevyModel, moments: &MomentTable, degree: u32, rank_tol: f64) -> Result<Self> {
        let indices = enumerate_multiindices(model.dim(), degree);
        let gram = gram_matrix(moments, model, &indices)?;
        orthogonalize(&gram, rank_tol)
    }

    /// The non-orthogonalized family `H^p = Y^p`, used to check the Gram matrix itself.
    pub fn monomial(gram: &GramMatrix) -> Self {
        let n = gram.size();
        let scale = (0..n).map(|i| gram.get(i, i)).fold(0.0f64, f64::max);
        let norms: Vec<f64> = (0..n).map(|i| gram.get(i, i)).collect();
        TeugelBasis {
            degree: gram.indices.iter().map(MultiIndex::degree).max().unwrap_or(0),
            indices: gram.indices.clone(),
            coeffs: vec![Vec::new(); n],
            degenerate: norms.iter().map(|&k| k <= DEFAULT_RANK_TOL * scale).collect(),
            norms,
            rank_tol: DEFAULT_RANK_TOL,
            normalization: Normalization::Monic,
        }
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.indices.first().map(MultiIndex::dim).unwrap_or(0)
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn position(&self, p: &MultiIndex) -> Result<usize> {
        self.indices
            .binary_search(p)
            .map_err(|_| Error::UnknownIndex(p.clone()))
    }

    /// `(q, c_q)` for element `pos`, leading coefficient excluded.
    pub fn coefficients(&self, pos: usize) -> &[(usize, f64)] {
        &self.coeffs[pos]
    }

    pub fn kappa(&self, pos: usize) -> f64 {
        self.norms[pos]
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn is_degenerate(&self, pos: usize) -> bool {
        self.degenerate[pos]
    }

    /// Positions of the non-degenerate elements, in order.
    pub fn active(&self) -> Vec<usize> {
        (0..self.indices.len()).filter(|&i| !self.degenerate[i]).collect()
    }

    /// Dense coefficient vector of element `pos` over all `Y^q`, including the leading 1.
    pub fn dense_coefficients(&self, pos: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.indices.len()];
        c[pos] = 1.0;
        for &(q, v) in &self.coeffs[pos] {
            c[q] = v;
        }
        c
    }
}

/// One sampled Lévy path on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpPath {
    dim: usize,
    horizon: f64,
    n_cells: usize,
    times: Vec<f64>,
    /// Flattened, `dim` entries per jump.
    sizes: Vec<f64>,
    /// Grid cell `(t_i, t_{i+1}]` holding each jump.
    cells: Vec<u32>,
    /// Increments of the Gaussian part `Σ^{1/2} B` per cell, `dim` per cell.
    gaussian: Option<Vec<f64>>,
}

impl JumpPath {
    /// Builds a path from jumps. Times must lie in `(0, T]`; they are sorted here.
    pub fn new(dim: usize, horizon: f64, n_cells: usize, times: Vec<f64>, sizes: Vec<f64>) -> Result<Self> {
        Self::with_gaussian(dim, horizon, n_cells, times, sizes, None)
    }

    pub fn with_gaussian(
        dim: usize,
        horizon: f64,
        n_cells: usize,
        times: Vec<f64>,
        sizes: Vec<f64>,
        gaussian: Option<Vec<f64>>,
    ) -> Result<Self> {
        if !(horizon > 0.0) || n_cells == 0 {
            return Err(Error::InvalidArgument("horizon and cell count must be positive".into()));
        }
        if sizes.len() != times.len() * dim {
            return Err(Error::InvalidArgument("jump sizes do not match jump times".into()));
        }
        if times.iter().any(|&t| !(t > 0.0 && t <= horizon)) {
            return Err(Error::InvalidArgument("jump times must lie in (0, T]".into()));
        }
        if let Some(g) = &gaussian {
            if g.len() != n_cells * dim {
                return Err(Error::InvalidArgument("gaussian increments have wrong length".into()));
            }
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let times: Vec<f64> = order.iter().map(|&j| times[j]).collect();
        let sizes: Vec<f64> = order.iter().flat_map(|&j| sizes[j * dim..(j + 1) * dim].to_vec()).collect();
        let dt = horizon / n_cells as f64;
        let cells = times
            .iter()
            .map(|&t| (((t / dt).ceil() as i64 - 1).clamp(0, n_cells as i64 - 1)) as u32)
            .collect();
        Ok(JumpPath {
            dim,
            horizon,
            n_cells,
            times,
            sizes,
            cells,
            gaussian,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_cells as f64
    }

    pub fn grid_time(&self, i: usize) -> f64 {
        if i == self.n_cells {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn jump_count(&self) -> usize {
        self.times.len()
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.times
    }

    pub fn jump_size(&self, j: usize) -> &[f64] {
        &self.sizes[j * self.dim..(j + 1) * self.dim]
    }

    /// Jumps falling in cell `(t_i, t_{i+1}]`.
    pub fn jumps_in_cell(&self, cell: usize) -> Range<usize> {
        let c = cell as u32;
        let lo = self.cells.partition_point(|&x| x < c);
        let hi = self.cells.partition_point(|&x| x <= c);
        lo..hi
    }

    /// Number of jumps with time `<= t`.
    pub fn jumps_up_to(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t)
    }

    pub fn gaussian_increment(&self, cell: usize) -> Option<&[f64]> {
        self.gaussian.as_ref().map(|g| &g[cell * self.dim..(cell + 1) * self.dim])
    }

    /// Gaussian part at time `t`, linearly interpolated inside a cell.
    pub fn gaussian_at(&self, t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let Some(g) = &self.gaussian else { return };
        let dt = self.dt();
        let full = ((t / dt).floor() as usize).min(self.n_cells);
        for c in 0..full {
            for a in 0..self.dim {
                out[a] += g[c * self.dim + a];
            }
        }
        if full < self.n_cells {
            let frac = (t - full as f64 * dt) / dt;
            for a in 0..self.dim {
                out[a] += frac * g[full * self.dim + a];
            }
        }
    }
}

/// `X(t)^p = Σ_{s <= t} Π ΔX_i(s)^{p_i}`.
pub fn evaluate_power_jump(path: &JumpPath, p: &MultiIndex, t: f64) -> f64 {
    (0..path.jumps_up_to(t)).map(|j| p.monomial(path.jump_size(j))).sum()
}

/// Precomputed evaluation data for a basis on a concrete model: the jump
/// polynomial `π_p(x) = Σ_q c_q x^q` and the compensator rate `Σ_q c_q m_q`
/// of every element.
#[derive(Debug, Clone)]
pub struct BasisEvaluator {
    basis: TeugelBasis,
    /// Per element: `(q, c_q)` including the leading `(p, 1)`.
    terms: Vec<Vec<(MultiIndex, f64)>>,
    compensator: Vec<f64>,
    /// Per element: coefficients on the Gaussian components (`c_{e_i}`).
    gaussian: Vec<Vec<f64>>,
    active: Vec<usize>,
}

impl BasisEvaluator {
    pub fn new(basis: &TeugelBasis, moments: &MomentTable) -> Result<Self> {
        let dim = basis.dim();
        let mut terms = Vec::with_capacity(basis.indices.len());
        let mut compensator = Vec::with_capacity(basis.indices.len());
        let mut gaussian = Vec::with_capacity(basis.indices.len());
        for pos in 0..basis.indices.len() {
            let dense = basis.dense_coefficients(pos);
            let mut t = Vec::new();
            let mut comp = 0.0;
            let mut gauss = vec![0.0; dim];
            for (q, &c) in dense.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let idx = &basis.indices[q];
                comp += c * moments.get(idx)?;
                if let Some(a) = idx.unit_axis() {
                    gauss[a] += c;
                }
                t.push((idx.clone(), c));
            }
            terms.push(t);
            compensator.push(comp);
            gaussian.push(gauss);
        }
        Ok(BasisEvaluator {
            active: basis.active(),
            basis: basis.clone(),
            terms,
            compensator,
            gaussian,
        })
    }

    pub fn basis(&self) -> &TeugelBasis {
        &self.basis
    }

    /// Positions of the non-degenerate elements; downstream arrays are indexed by
    /// the rank in this list.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// `κ` of the `k`-th active element.
    pub fn active_kappa(&self, k: usize) -> f64 {
        self.basis.kappa(self.active[k])
    }

    pub fn active_index(&self, k: usize) -> &MultiIndex {
        &self.basis.indices[self.active[k]]
    }

    fn jump_poly(&self, pos: usize, size: &[f64]) -> f64 {
        self.terms[pos].iter().map(|(q, c)| c * q.monomial(size)).sum()
    }

    /// Element at position `pos` at time `t`, degenerate or not.
    pub fn evaluate_raw(&self, path: &JumpPath, pos: usize, t: f64) -> f64 {
        let jumps: f64 = (0..path.jumps_up_to(t)).map(|j| self.jump_poly(pos, path.jump_size(j))).sum();
        let mut g = vec![0.0; path.dim()];
        path.gaussian_at(t, &mut g);
        let gauss: f64 = self.gaussian[pos].iter().zip(&g).map(|(c, b)| c * b).sum();
        jumps + gauss - self.compensator[pos] * t
    }

    /// `H^p(t)`; degenerate elements are rejected.
    pub fn evaluate(&self, path: &JumpPath, p: &MultiIndex, t: f64) -> Result<f64> {
        let pos = self.basis.position(p)?;
        if self.basis.is_degenerate(pos) {
            return Err(Error::DegenerateIndex(p.clone()));
        }
        Ok(self.evaluate_raw(path, pos, t))
    }

    /// Increments `ΔH^k` over cell `(t_i, t_{i+1}]` for every active element.
    pub fn cell_increments(&self, path: &JumpPath, cell: usize, out: &mut [f64]) {
        let dt = path.dt();
        for (k, &pos) in self.active.iter().enumerate() {
            out[k] = -self.compensator[pos] * dt;
        }
        for j in path.jumps_in_cell(cell) {
            let size = path.jump_size(j);
            for (k, &pos) in self.active.iter().enumerate() {
                out[k] += self.jump_poly(pos, size);
            }
        }
        if let Some(g) = path.gaussian_increment(cell) {
            for (k, &pos) in self.active.iter().enumerate() {
                out[k] += self.gaussian[pos].iter().zip(g).map(|(c, b)| c * b).sum::<f64>();
            }
        }
    }

    /// All active increments of a path, cell-major (`n_cells x n_active`).
    pub fn path_increments(&self, path: &JumpPath) -> Vec<f64> {
        let k = self.n_active();
        let mut out = vec![0.0; path.n_cells() * k];
        for c in 0..path.n_cells() {
            self.cell_increments(path, c, &mut out[c * k..(c + 1) * k]);
        }
        out
    }
}

/// Free-function form of [`BasisEvaluator::evaluate`].
pub fn evaluate_teugel(
    path: &JumpPath,
    basis: &TeugelBasis,
    moments: &MomentTable,
    p: &MultiIndex,
    t: f64,
) -> Result<f64> {
    BasisEvaluator::new(basis, moments)?.evaluate(path, p, t)
}

pub const MIN_COVARIATION_PATHS: usize = 1000;

/// Monte Carlo estimate of `E[H^p(T) H^q(T)]`, whose expectation is
/// `δ_{p,q} κ_p T`. Degenerate elements are evaluated as well.
pub fn realized_covariation(
    paths: &[JumpPath],
    eval: &BasisEvaluator,
    p: &MultiIndex,
    q: &MultiIndex,
) -> Result<Estimate> {
    if paths.len() < MIN_COVARIATION_PATHS {
        return Err(Error::InvalidArgument(format!(
            "realized covariation needs at least {MIN_COVARIATION_PATHS} paths"
        )));
    }
    let ip = eval.basis().position(p)?;
    let iq = eval.basis().position(q)?;
    Ok(estimate(paths.iter().map(|path| {
        let t = path.horizon();
        eval.evaluate_raw(path, ip, t) * eval.evaluate_raw(path, iq, t)
    })))
}
