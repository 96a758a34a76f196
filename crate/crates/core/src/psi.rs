//! The linear map behind the scale-inhomogeneous field: ψ = A·φ where
//! `A = Σ_i σ_i (H_{λ_i} − H_{λ_{i−1}})` collects harmonic-measure rows of
//! each vertex's own nested scale boxes. Telescoping against the step
//! weights leaves, per vertex v,
//! `A_v = σ_M e_v + Σ_{i<M} (σ_i − σ_{i+1}) h_{v,[v]_{λ_i}}`;
//! the λ₀ = 0 term is the exit distribution on ∂V_N and annihilates every
//! Dirichlet field, so it is dropped.

use crate::green::RectPoisson;
use crate::lattice::{scale_box, GridSize, Rect, Vertex};
use crate::profile::StepProfile;
use crate::{Error, Result};
use nalgebra::DMatrix;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Row-sparse square matrix over interior indices.
pub struct SparseRows {
    pub dim: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl SparseRows {
    /// y = A x.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, w)| w * x[c as usize]).sum())
            .collect()
    }

    /// A · M for symmetric-structure dense M (column access only).
    pub fn mul_dense(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.dim;
        let mut out = DMatrix::zeros(k, m.ncols());
        let mut acc = vec![0.0f64; m.ncols()];
        for (r, row) in self.rows.iter().enumerate() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(c, w) in row {
                let col = m.row(c as usize);
                for j in 0..m.ncols() {
                    acc[j] += w * col[j];
                }
            }
            for j in 0..m.ncols() {
                out[(r, j)] = acc[j];
            }
        }
        out
    }

    /// M · Aᵀ, i.e. combines columns of M by the rows of A.
    pub fn mul_dense_right_t(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), self.dim);
        for (c, row) in self.rows.iter().enumerate() {
            let mut outc = out.column_mut(c);
            for &(mc, w) in row {
                outc.axpy(w, &m.column(mc as usize), 1.0);
            }
        }
        out
    }
}

/// The assembled ψ map for one grid and profile.
pub struct PsiMap {
    pub gs: GridSize,
    pub inner: Rect,
    pub a: SparseRows,
}

/// Cache key: grid exponent and the exact profile bits.
pub(crate) fn profile_key(p: &StepProfile) -> u64 {
    let mut parts: Vec<u64> = Vec::with_capacity(2 * p.pieces());
    for &s in p.sigmas() {
        parts.push(s.to_bits());
    }
    for &l in p.lambdas() {
        parts.push(l.to_bits());
    }
    crate::rng::mix(&parts)
}

type CenterRowKey = (i64, i64, i64, i64);
type CenterRow = Arc<Vec<(i64, i64, f64)>>;

/// Exit-probability row of a box evaluated at one interior source, as
/// (offset-from-box-lo, weight) triples; cached by (shape, relative source).
pub(crate) fn center_row(boxr: Rect, v: Vertex) -> CenterRow {
    static CACHE: OnceLock<Mutex<HashMap<CenterRowKey, CenterRow>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (boxr.width(), boxr.height(), v.x - boxr.lo.x, v.y - boxr.lo.y);
    if let Some(r) = cache.lock().unwrap().get(&key) {
        return r.clone();
    }
    let int = boxr.interior().expect("center_row needs a box with interior");
    let (iw, ih) = (int.width() as usize, int.height() as usize);
    let vi = int.index_of(v).expect("source must be interior");
    let grid = RectPoisson::new(iw, ih).solve_point(vi / iw, vi % iw);
    let mut row = Vec::new();
    for z in boxr.boundary_vertices() {
        let mut w = 0.0;
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            if let Some(ui) = int.index_of(z.shift(dx, dy)) {
                w += 0.25 * grid[(ui / iw, ui % iw)];
            }
        }
        if w != 0.0 {
            row.push((z.x - boxr.lo.x, z.y - boxr.lo.y, w));
        }
    }
    let row = Arc::new(row);
    cache.lock().unwrap().insert(key, row.clone());
    row
}

fn build_psi_map(p: &StepProfile, gs: GridSize) -> Result<PsiMap> {
    let inner = gs
        .rect()
        .interior()
        .ok_or_else(|| Error::domain("grid too small for an interior field"))?;
    let k = inner.vertex_count();
    let m = p.pieces();
    let sig = p.sigmas();
    let mut rows = Vec::with_capacity(k);
    for v in inner.vertices() {
        let mut entries: HashMap<u32, f64> = HashMap::new();
        *entries.entry(inner.index_of(v).unwrap() as u32).or_insert(0.0) += sig[m - 1];
        for i in 0..m - 1 {
            let coeff = sig[i] - sig[i + 1];
            if coeff.abs() < 1e-15 {
                continue;
            }
            let sb = scale_box(gs, v, p.lambdas()[i])?;
            if !sb.rect.interior_contains(v) {
                // degenerate box: the conditional expectation is the identity
                *entries.entry(inner.index_of(v).unwrap() as u32).or_insert(0.0) += coeff;
                continue;
            }
            for &(bx, by, w) in center_row(sb.rect, v).iter() {
                let z = Vertex::new(sb.rect.lo.x + bx, sb.rect.lo.y + by);
                // boundary-of-V_N entries act on zero field values
                if let Some(zi) = inner.index_of(z) {
                    *entries.entry(zi as u32).or_insert(0.0) += coeff * w;
                }
            }
        }
        let mut row: Vec<(u32, f64)> = entries.into_iter().collect();
        row.sort_unstable_by_key(|e| e.0);
        rows.push(row);
    }
    Ok(PsiMap { gs, inner, a: SparseRows { dim: k, rows } })
}

/// Cached ψ map for `(p, gs)`.
pub fn psi_map(p: &StepProfile, gs: GridSize) -> Result<Arc<PsiMap>> {
    static CACHE: OnceLock<Mutex<HashMap<(u32, u64), Arc<PsiMap>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (gs.n, profile_key(p));
    if let Some(m) = cache.lock().unwrap().get(&key) {
        return Ok(m.clone());
    }
    let m = Arc::new(build_psi_map(p, gs)?);
    cache.lock().unwrap().insert(key, m.clone());
    Ok(m)
}
