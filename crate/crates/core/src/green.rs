//! Dirichlet Green functions and harmonic-measure (exit-distribution)
//! operators on rectangles.
//!
//! All solves use the exact sine eigenbasis of the Dirichlet Laplacian on a
//! rectangle: `I - P = (1/4)(L_p ⊕ L_q)` with `L` the 1-d path Laplacian, so
//! a solve against one right-hand side costs four small dense gemms instead
//! of a factorization of the full `pq × pq` system. A plain LU route exists
//! in the tests as an independent oracle.

use crate::lattice::{Rect, ScaleBox, Vertex};
use crate::{Error, Result};
use nalgebra::DMatrix;
use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{Read as _, Write as _};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

/// Largest rectangle side for which the full dense Green matrix may be
/// materialised (memory grows as side⁴; 70 ≈ 170 MB).
pub const MAX_DENSE_SIDE: i64 = 70;
/// Largest rectangle side for column-wise solves (windowed covariances on
/// enlarged grids).
pub const MAX_SOLVE_SIDE: i64 = 300;

fn sine_basis(p: usize) -> Arc<DMatrix<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<DMatrix<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(m) = cache.lock().unwrap().get(&p) {
        return m.clone();
    }
    let h = p as f64 + 1.0;
    let norm = (2.0 / h).sqrt();
    let m = Arc::new(DMatrix::from_fn(p, p, |i, j| {
        norm * (PI * ((i + 1) * (j + 1)) as f64 / h).sin()
    }));
    cache.lock().unwrap().insert(p, m.clone());
    m
}

/// Solver for `(I - P) x = b` on the interior grid of a rectangle, where `P`
/// is the simple-random-walk transition kernel absorbed at the boundary.
/// Grids are `ih × iw` matrices (rows = y).
pub(crate) struct RectPoisson {
    iw: usize,
    ih: usize,
    sx: Arc<DMatrix<f64>>,
    sy: Arc<DMatrix<f64>>,
    inv_eig: DMatrix<f64>,
}

impl RectPoisson {
    pub fn new(iw: usize, ih: usize) -> Self {
        let inv_eig = DMatrix::from_fn(ih, iw, |r, c| {
            let ey = (PI * (r + 1) as f64 / (ih as f64 + 1.0)).cos();
            let ex = (PI * (c + 1) as f64 / (iw as f64 + 1.0)).cos();
            1.0 / (1.0 - 0.5 * (ex + ey))
        });
        RectPoisson { iw, ih, sx: sine_basis(iw), sy: sine_basis(ih), inv_eig }
    }

    /// Solution grid for a unit point source at row `r`, column `c`.
    pub fn solve_point(&self, r: usize, c: usize) -> DMatrix<f64> {
        // spectral coefficients of a point source factorise into an outer
        // product, skipping the forward transform
        let mut m = DMatrix::from_fn(self.ih, self.iw, |a, b| {
            self.sy[(a, r)] * self.sx[(c, b)] * self.inv_eig[(a, b)]
        });
        m = &*self.sy * m;
        m * &*self.sx
    }

    /// Solution grid for an arbitrary source grid `b` (`ih × iw`).
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut m = &*self.sy * b * &*self.sx;
        m.component_mul_assign(&self.inv_eig);
        m = &*self.sy * m;
        m * &*self.sx
    }
}

/// Green function of simple random walk on a rectangle, killed at the
/// boundary ring, normalised by π/2. Entries involving boundary (or outside)
/// vertices are zero.
#[derive(Clone)]
pub struct GreenMatrix {
    domain: Rect,
    inner: Rect,
    mat: Arc<DMatrix<f64>>,
}

impl GreenMatrix {
    pub fn domain(&self) -> Rect {
        self.domain
    }

    /// Interior rectangle indexing the matrix (row-major).
    pub fn inner(&self) -> Rect {
        self.inner
    }

    pub fn dim(&self) -> usize {
        self.inner.vertex_count()
    }

    pub fn index(&self, v: Vertex) -> Option<usize> {
        self.inner.index_of(v)
    }

    pub fn vertex(&self, idx: usize) -> Vertex {
        self.inner.vertex_at(idx)
    }

    /// `G(u, v)`; zero whenever either vertex is not interior.
    pub fn value(&self, u: Vertex, v: Vertex) -> f64 {
        match (self.index(u), self.index(v)) {
            (Some(i), Some(j)) => self.mat[(i, j)],
            _ => 0.0,
        }
    }

    /// Interior-indexed matrix (symmetric, positive definite).
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }
}

fn green_shape_key(iw: usize, ih: usize) -> (usize, usize) {
    // G on a p×q rectangle is the transpose-permutation of G on q×p; cache
    // only the canonical orientation.
    (iw.max(ih), iw.min(ih))
}

fn disk_cache_path(iw: usize, ih: usize) -> Option<PathBuf> {
    std::env::var_os("SIDGFF_CACHE_DIR")
        .map(|d| PathBuf::from(d).join(format!("green-{iw}x{ih}.bin")))
}

const DISK_MAGIC: u64 = 0x5349_4447_4646_4731; // "SIDGFFG1"

fn load_green_disk(path: &PathBuf, iw: usize, ih: usize) -> Option<DMatrix<f64>> {
    let mut f = std::fs::File::open(path).ok()?;
    let mut head = [0u8; 24];
    f.read_exact(&mut head).ok()?;
    let magic = u64::from_le_bytes(head[0..8].try_into().unwrap());
    let w = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let h = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
    if magic != DISK_MAGIC || w != iw || h != ih {
        return None;
    }
    let k = iw * ih;
    let mut bytes = vec![0u8; k * k * 8];
    f.read_exact(&mut bytes).ok()?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Some(DMatrix::from_vec(k, k, data))
}

fn store_green_disk(path: &PathBuf, iw: usize, ih: usize, m: &DMatrix<f64>) {
    let write = || -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&DISK_MAGIC.to_le_bytes())?;
        f.write_all(&(iw as u64).to_le_bytes())?;
        f.write_all(&(ih as u64).to_le_bytes())?;
        for v in m.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    let _ = write(); // cache is best-effort
}

fn build_green_shape(iw: usize, ih: usize) -> DMatrix<f64> {
    let pois = RectPoisson::new(iw, ih);
    let k = iw * ih;
    let mut g = DMatrix::zeros(k, k);
    for r in 0..ih {
        for c in 0..iw {
            let col = pois.solve_point(r, c);
            let j = r * iw + c;
            for rr in 0..ih {
                for cc in 0..iw {
                    g[(rr * iw + cc, j)] = FRAC_PI_2 * col[(rr, cc)];
                }
            }
        }
    }
    // remove O(1e-14) asymmetry from the floating-point transforms
    for i in 0..k {
        for j in 0..i {
            let avg = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = avg;
            g[(j, i)] = avg;
        }
    }
    g
}

static GREEN_CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<DMatrix<f64>>>>> = OnceLock::new();

/// Exact Green matrix of `domain`, from the in-process (and optional
/// `SIDGFF_CACHE_DIR` on-disk) shape cache.
pub fn green_matrix(domain: Rect) -> Result<GreenMatrix> {
    let inner = domain
        .interior()
        .ok_or_else(|| Error::domain(format!("domain {domain:?} has no interior vertex")))?;
    let side = domain.width().max(domain.height());
    if side > MAX_DENSE_SIDE {
        return Err(Error::SizeLimit { n: side as u32, max: MAX_DENSE_SIDE as u32 });
    }
    let (iw, ih) = (inner.width() as usize, inner.height() as usize);
    let key = green_shape_key(iw, ih);
    let cache = GREEN_CACHE.get_or_init(Default::default);
    if let Some(mat) = cache.lock().unwrap().get(&key) {
        return Ok(GreenMatrix { domain, inner, mat: reorient(mat.clone(), iw, ih) });
    }
    let (cw, ch) = key;
    let mat = disk_cache_path(cw, ch)
        .and_then(|p| load_green_disk(&p, cw, ch))
        .unwrap_or_else(|| {
            let m = build_green_shape(cw, ch);
            if let Some(p) = disk_cache_path(cw, ch) {
                store_green_disk(&p, cw, ch, &m);
            }
            m
        });
    let mat = Arc::new(mat);
    cache.lock().unwrap().insert(key, mat.clone());
    Ok(GreenMatrix { domain, inner, mat: reorient(mat, iw, ih) })
}

/// Map the canonical-orientation shape matrix to the requested orientation
/// (transposing the grid permutes interior indices).
fn reorient(mat: Arc<DMatrix<f64>>, iw: usize, ih: usize) -> Arc<DMatrix<f64>> {
    let (cw, _ch) = green_shape_key(iw, ih);
    if cw == iw || iw == ih {
        return mat;
    }
    let k = iw * ih;
    let perm: Vec<usize> = (0..k)
        .map(|idx| {
            let (r, c) = (idx / iw, idx % iw);
            c * ih + r // index of the transposed cell in the canonical grid
        })
        .collect();
    let mut out = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            out[(i, j)] = mat[(perm[i], perm[j])];
        }
    }
    Arc::new(out)
}

/// Green values `G(u_i, u_j)` for a chosen vertex set, solved column-by-
/// column so the full interior matrix is never materialised. Non-interior
/// vertices get zero rows/columns.
pub fn green_submatrix(domain: Rect, verts: &[Vertex]) -> Result<DMatrix<f64>> {
    let inner = domain
        .interior()
        .ok_or_else(|| Error::domain(format!("domain {domain:?} has no interior vertex")))?;
    let side = domain.width().max(domain.height());
    if side > MAX_SOLVE_SIDE {
        return Err(Error::SizeLimit { n: side as u32, max: MAX_SOLVE_SIDE as u32 });
    }
    let (iw, ih) = (inner.width() as usize, inner.height() as usize);
    let pois = RectPoisson::new(iw, ih);
    let s = verts.len();
    let mut out = DMatrix::zeros(s, s);
    // one solve per distinct source column
    let mut solved: HashMap<Vertex, Vec<f64>> = HashMap::new();
    for (j, &v) in verts.iter().enumerate() {
        let Some(vi) = inner.index_of(v) else { continue };
        let col = solved.entry(v).or_insert_with(|| {
            let grid = pois.solve_point(vi / iw, vi % iw);
            verts
                .iter()
                .map(|&u| match inner.index_of(u) {
                    Some(ui) => FRAC_PI_2 * grid[(ui / iw, ui % iw)],
                    None => 0.0,
                })
                .collect()
        });
        for (i, val) in col.iter().enumerate() {
            out[(i, j)] = *val;
        }
    }
    // symmetrise (each pair is computed from two independent solves)
    for i in 0..s {
        for j in 0..i {
            let avg = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = avg;
            out[(j, i)] = avg;
        }
    }
    Ok(out)
}

/// Exit-distribution (harmonic-measure) operator of a box inside a domain:
/// for `v` in the box interior, a probability row over the box boundary;
/// the identity elsewhere. Applied to a field it realises the conditional
/// expectation given the field outside the box interior.
pub struct HarmonicOperator {
    boxr: Rect,
    domain: Rect,
    inner: Option<Rect>,
    boundary: Vec<Vertex>,
    /// `interior-count × boundary-count` exit probabilities.
    rows: DMatrix<f64>,
}

/// Build the operator for a scale box (clipped boxes use their clipped
/// geometry directly).
pub fn harmonic_operator(sb: &ScaleBox, domain: Rect) -> Result<HarmonicOperator> {
    harmonic_operator_rect(sb.rect, domain)
}

pub fn harmonic_operator_rect(boxr: Rect, domain: Rect) -> Result<HarmonicOperator> {
    if !(domain.contains(boxr.lo) && domain.contains(boxr.hi)) {
        return Err(Error::domain(format!("box {boxr:?} not contained in domain {domain:?}")));
    }
    let side = boxr.width().max(boxr.height());
    if side > MAX_SOLVE_SIDE {
        return Err(Error::SizeLimit { n: side as u32, max: MAX_SOLVE_SIDE as u32 });
    }
    let inner = boxr.interior();
    let boundary = boxr.boundary_vertices();
    let rows = match inner {
        None => DMatrix::zeros(0, boundary.len()),
        Some(int) => {
            let (iw, ih) = (int.width() as usize, int.height() as usize);
            let pois = RectPoisson::new(iw, ih);
            let k = iw * ih;
            let mut rows = DMatrix::zeros(k, boundary.len());
            for (bj, &z) in boundary.iter().enumerate() {
                // exit probability at z = harmonic function with boundary
                // data e_z; its interior values solve (I-P)h = (1/4)·1_{u ~ z}
                let mut rhs = DMatrix::zeros(ih, iw);
                let mut any = false;
                for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    let u = z.shift(dx, dy);
                    if let Some(ui) = int.index_of(u) {
                        rhs[(ui / iw, ui % iw)] = 0.25;
                        any = true;
                    }
                }
                if !any {
                    continue; // corner: unreachable in one step, row stays 0
                }
                let sol = pois.solve(&rhs);
                for vi in 0..k {
                    rows[(vi, bj)] = sol[(vi / iw, vi % iw)];
                }
            }
            rows
        }
    };
    Ok(HarmonicOperator { boxr, domain, inner, boundary, rows })
}

impl HarmonicOperator {
    pub fn box_rect(&self) -> Rect {
        self.boxr
    }

    pub fn domain(&self) -> Rect {
        self.domain
    }

    pub fn boundary(&self) -> &[Vertex] {
        &self.boundary
    }

    /// Exit-probability row for `v`, or `None` when the operator acts as the
    /// identity at `v` (v outside the box interior).
    pub fn row(&self, v: Vertex) -> Option<impl Iterator<Item = (Vertex, f64)> + '_> {
        let int = self.inner?;
        let vi = int.index_of(v)?;
        Some(self.boundary.iter().enumerate().map(move |(bj, &z)| (z, self.rows[(vi, bj)])))
    }

    /// Evaluate `(H f)(v)`: the harmonic extension of `f`'s boundary values
    /// inside the box, `f` itself elsewhere.
    pub fn apply<F: Fn(Vertex) -> f64>(&self, f: F, v: Vertex) -> f64 {
        match self.row(v) {
            None => f(v),
            Some(row) => row.map(|(z, w)| w * f(z)).sum(),
        }
    }
}

#[cfg(test)]
pub(crate) fn visit_matrix(domain: Rect) -> Option<(Rect, DMatrix<f64>)> {
    // plain dense-LU oracle for (I-P)^{-1}, independent of the sine solver
    let inner = domain.interior()?;
    let k = inner.vertex_count();
    let mut a = DMatrix::identity(k, k);
    for (i, v) in inner.vertices().enumerate() {
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            if let Some(j) = inner.index_of(v.shift(dx, dy)) {
                a[(i, j)] -= 0.25;
            }
        }
    }
    Some((inner, a.lu().try_inverse()?))
}

/// Monte-Carlo estimate of `G(u, v)` by counting visits of simple random
/// walks from `u` to `v` before they hit the boundary ring. Returns the
/// estimate and its standard error (π/2-normalised).
pub fn mc_green_estimate(domain: Rect, u: Vertex, v: Vertex, walks: u64, seed: u64) -> (f64, f64) {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sumsq) = (0.0f64, 0.0f64);
    for _ in 0..walks {
        let mut pos = u;
        let mut visits = 0u64;
        while domain.interior_contains(pos) {
            if pos == v {
                visits += 1;
            }
            match rng.next_u32() >> 30 {
                0 => pos.x += 1,
                1 => pos.x -= 1,
                2 => pos.y += 1,
                _ => pos.y -= 1,
            }
        }
        let x = visits as f64;
        sum += x;
        sumsq += x * x;
    }
    let n = walks as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0) / (n - 1.0);
    (FRAC_PI_2 * mean, FRAC_PI_2 * var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::GridSize;
    use approx::assert_relative_eq;

    fn vn(n: u32) -> Rect {
        GridSize::new(n).rect()
    }

    #[test]
    fn single_interior_site() {
        // 3×3 box: the walk sits at the centre exactly once
        let g = green_matrix(Rect::new(Vertex::new(0, 0), Vertex::new(2, 2))).unwrap();
        assert_eq!(g.dim(), 1);
        assert_relative_eq!(g.value(Vertex::new(1, 1), Vertex::new(1, 1)), FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn four_cycle_diagonal() {
        // V_4 interior is a 4-cycle; return probability 1/7, visits 7/6
        let g = green_matrix(vn(2)).unwrap();
        assert_eq!(g.dim(), 4);
        for v in vn(2).interior().unwrap().vertices() {
            assert_relative_eq!(g.value(v, v), 7.0 * PI / 12.0, epsilon = 1e-9);
        }
        // boundary rows are zero
        assert_eq!(g.value(Vertex::new(0, 0), Vertex::new(1, 1)), 0.0);
    }

    #[test]
    fn sine_route_matches_lu_oracle() {
        for rect in [vn(3), vn(4), Rect::new(Vertex::new(2, 5), Vertex::new(14, 12))] {
            let g = green_matrix(rect).unwrap();
            let (inner, vis) = visit_matrix(rect).unwrap();
            for (i, u) in inner.vertices().enumerate() {
                for (j, v) in inner.vertices().enumerate() {
                    assert_relative_eq!(
                        g.value(u, v),
                        FRAC_PI_2 * vis[(i, j)],
                        epsilon = 1e-9,
                        max_relative = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn symmetry_and_positive_definiteness() {
        let g = green_matrix(vn(5)).unwrap();
        let m = g.matrix();
        assert_eq!(m.nrows(), 900);
        for i in 0..m.nrows() {
            for j in 0..i {
                assert_eq!(m[(i, j)], m[(j, i)]);
            }
        }
        let eig = m.clone().symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|&e| e > -1e-9), "min eigenvalue {}", eig.min());
    }

    #[test]
    fn domain_monotonicity_of_visits() {
        // killing earlier can only reduce visits: G_U(u,u) ≤ G_V(u,u)
        let big = green_matrix(vn(4)).unwrap();
        let small = green_matrix(Rect::new(Vertex::new(4, 4), Vertex::new(11, 11))).unwrap();
        for v in small.inner().vertices() {
            assert!(small.value(v, v) <= big.value(v, v) + 1e-12);
        }
    }

    #[test]
    fn submatrix_agrees_with_dense() {
        let rect = vn(4);
        let g = green_matrix(rect).unwrap();
        let verts: Vec<Vertex> = vec![
            Vertex::new(1, 1),
            Vertex::new(8, 3),
            Vertex::new(0, 5), // boundary: zero row
            Vertex::new(14, 14),
            Vertex::new(7, 9),
        ];
        let sub = green_submatrix(rect, &verts).unwrap();
        for (i, &u) in verts.iter().enumerate() {
            for (j, &v) in verts.iter().enumerate() {
                assert_relative_eq!(sub[(i, j)], g.value(u, v), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn mc_walks_agree_with_solver() {
        let rect = vn(3);
        let g = green_matrix(rect).unwrap();
        let u = Vertex::new(3, 4);
        for (v, seed) in [(u, 1u64), (Vertex::new(4, 4), 2), (Vertex::new(6, 2), 3)] {
            let (est, se) = mc_green_estimate(rect, u, v, 200_000, seed);
            let exact = g.value(u, v);
            assert!(
                (est - exact).abs() <= 3.0 * se,
                "MC {est} ± {se} vs exact {exact} at {v:?}"
            );
        }
    }

    #[test]
    fn harmonic_rows_are_exit_distributions() {
        let domain = vn(4);
        let b = Rect::new(Vertex::new(3, 2), Vertex::new(9, 8));
        let h = harmonic_operator_rect(b, domain).unwrap();
        let (inner, vis) = visit_matrix(b).unwrap();
        for (vi, v) in inner.vertices().enumerate() {
            let mut total = 0.0;
            for (z, w) in h.row(v).unwrap() {
                assert!(w >= -1e-15);
                // oracle: (1/4) Σ_{u ~ z interior} visits(v, u)
                let mut exact = 0.0;
                for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    if let Some(ui) = inner.index_of(z.shift(dx, dy)) {
                        exact += 0.25 * vis[(vi, ui)];
                    }
                }
                assert_relative_eq!(w, exact, epsilon = 1e-10);
                total += w;
            }
            assert_relative_eq!(total, 1.0, epsilon = 1e-9);
        }
        // identity outside the box interior
        let f = |v: Vertex| (v.x * 31 + v.y) as f64;
        assert_eq!(h.apply(f, Vertex::new(0, 0)), f(Vertex::new(0, 0)));
        assert_eq!(h.apply(f, Vertex::new(3, 5)), f(Vertex::new(3, 5)));
    }

    #[test]
    fn harmonic_extension_of_constants() {
        // rows sum to 1 <=> H preserves constants, for assorted boxes
        let domain = vn(4);
        for b in [
            Rect::new(Vertex::new(0, 0), Vertex::new(15, 15)),
            Rect::new(Vertex::new(0, 3), Vertex::new(4, 12)),
            Rect::new(Vertex::new(10, 10), Vertex::new(15, 15)),
            Rect::new(Vertex::new(5, 5), Vertex::new(7, 7)),
        ] {
            let h = harmonic_operator_rect(b, domain).unwrap();
            for v in b.vertices() {
                assert_relative_eq!(h.apply(|_| 1.0, v), 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn singleton_box_is_identity() {
        let domain = vn(3);
        let sb = crate::lattice::scale_box(GridSize::new(3), Vertex::new(3, 3), 1.0).unwrap();
        let h = harmonic_operator(&sb, domain).unwrap();
        assert!(h.row(Vertex::new(3, 3)).is_none());
        assert_eq!(h.apply(|v| v.x as f64, Vertex::new(3, 3)), 3.0);
    }

    #[test]
    fn conditional_expectation_orthogonality() {
        // Cov(Hφ, φ − Hφ) = H G (I − H)ᵀ = 0 for the DGFF covariance G
        let domain = vn(4);
        let g = green_matrix(domain).unwrap();
        let k = g.dim();
        let b = Rect::new(Vertex::new(4, 3), Vertex::new(11, 12));
        let h = harmonic_operator_rect(b, domain).unwrap();
        let mut hm = DMatrix::zeros(k, k);
        for i in 0..k {
            let v = g.vertex(i);
            match h.row(v) {
                None => hm[(i, i)] = 1.0,
                Some(row) => {
                    for (z, w) in row {
                        // boundary vertices on ∂V_N carry field value 0
                        if let Some(j) = g.index(z) {
                            hm[(i, j)] = w;
                        }
                    }
                }
            }
        }
        let cross = &hm * g.matrix() * (DMatrix::identity(k, k) - &hm).transpose();
        assert!(cross.iter().all(|&x| x.abs() < 1e-9), "max {}", cross.amax());
    }
}
