//! Lattice geometry: dyadic grids, torus distances, scale boxes and the
//! box-counting combinatorics used by the covariance oracles.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Side-length descriptor of the dyadic grid `V_N`, `N = 2^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSize {
    pub n: u32,
}

impl GridSize {
    pub fn new(n: u32) -> Self {
        GridSize { n }
    }

    /// Side length `N = 2^n`.
    pub fn side(&self) -> i64 {
        1i64 << self.n
    }

    /// Number of vertices `N^2`.
    pub fn vertex_count(&self) -> usize {
        let s = self.side() as usize;
        s * s
    }

    pub fn contains(&self, v: Vertex) -> bool {
        let s = self.side();
        0 <= v.x && v.x < s && 0 <= v.y && v.y < s
    }

    /// Row-major index of `v` in `V_N` (x fastest).
    pub fn index_of(&self, v: Vertex) -> usize {
        debug_assert!(self.contains(v));
        (v.y * self.side() + v.x) as usize
    }

    pub fn vertex_at(&self, idx: usize) -> Vertex {
        let s = self.side();
        Vertex::new(idx as i64 % s, idx as i64 / s)
    }

    /// All vertices of `V_N`, row-major.
    pub fn vertices(&self) -> impl Iterator<Item = Vertex> + '_ {
        let s = self.side();
        (0..s * s).map(move |i| Vertex::new(i % s, i / s))
    }

    /// `V_N^delta`: vertices whose distance to the boundary ring is at least
    /// `delta * N` (distance measured as the minimum coordinate margin).
    pub fn inner_vertices(&self, delta: f64) -> Vec<Vertex> {
        let s = self.side();
        let margin = (delta * s as f64).ceil() as i64;
        self.vertices()
            .filter(|v| {
                let d = v.x.min(v.y).min(s - 1 - v.x).min(s - 1 - v.y);
                d >= margin
            })
            .collect()
    }

    pub fn rect(&self) -> Rect {
        Rect::new(Vertex::new(0, 0), Vertex::new(self.side() - 1, self.side() - 1))
    }
}

/// Lattice vertex. Coordinates are signed so that embeddings into larger
/// grids (`2^kappa * v`, window shifts) stay in one type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Vertex {
    pub x: i64,
    pub y: i64,
}

impl Vertex {
    pub fn new(x: i64, y: i64) -> Self {
        Vertex { x, y }
    }

    pub fn shift(&self, dx: i64, dy: i64) -> Self {
        Vertex::new(self.x + dx, self.y + dy)
    }

    pub fn scale(&self, f: i64) -> Self {
        Vertex::new(self.x * f, self.y * f)
    }

    /// Euclidean norm of the difference `self - w`.
    pub fn dist_l2(&self, w: Vertex) -> f64 {
        let dx = (self.x - w.x) as f64;
        let dy = (self.y - w.y) as f64;
        dx.hypot(dy)
    }

    pub fn dist_linf(&self, w: Vertex) -> i64 {
        (self.x - w.x).abs().max((self.y - w.y).abs())
    }
}

/// Axis-aligned rectangle of lattice vertices, inclusive corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub lo: Vertex,
    pub hi: Vertex,
}

impl Rect {
    pub fn new(lo: Vertex, hi: Vertex) -> Self {
        debug_assert!(lo.x <= hi.x && lo.y <= hi.y);
        Rect { lo, hi }
    }

    pub fn width(&self) -> i64 {
        self.hi.x - self.lo.x + 1
    }

    pub fn height(&self) -> i64 {
        self.hi.y - self.lo.y + 1
    }

    pub fn vertex_count(&self) -> usize {
        (self.width() * self.height()) as usize
    }

    pub fn contains(&self, v: Vertex) -> bool {
        self.lo.x <= v.x && v.x <= self.hi.x && self.lo.y <= v.y && v.y <= self.hi.y
    }

    /// Interior: the rectangle minus its outer ring (empty if width or
    /// height is at most 2).
    pub fn interior(&self) -> Option<Rect> {
        if self.width() <= 2 || self.height() <= 2 {
            None
        } else {
            Some(Rect::new(
                Vertex::new(self.lo.x + 1, self.lo.y + 1),
                Vertex::new(self.hi.x - 1, self.hi.y - 1),
            ))
        }
    }

    pub fn interior_contains(&self, v: Vertex) -> bool {
        self.interior().map_or(false, |r| r.contains(v))
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.lo.x <= other.hi.x
            && other.lo.x <= self.hi.x
            && self.lo.y <= other.hi.y
            && other.lo.y <= self.hi.y
    }

    pub fn vertices(&self) -> impl Iterator<Item = Vertex> + '_ {
        let (lo, hi) = (self.lo, self.hi);
        (lo.y..=hi.y).flat_map(move |y| (lo.x..=hi.x).map(move |x| Vertex::new(x, y)))
    }

    /// Row-major index of `v` within the rectangle.
    pub fn index_of(&self, v: Vertex) -> Option<usize> {
        if self.contains(v) {
            Some(((v.y - self.lo.y) * self.width() + (v.x - self.lo.x)) as usize)
        } else {
            None
        }
    }

    /// Inverse of [`Rect::index_of`].
    pub fn vertex_at(&self, idx: usize) -> Vertex {
        debug_assert!(idx < self.vertex_count());
        let w = self.width();
        Vertex::new(self.lo.x + (idx as i64 % w), self.lo.y + (idx as i64 / w))
    }

    /// Vertices of the boundary ring (the rectangle minus its interior).
    pub fn boundary_vertices(&self) -> Vec<Vertex> {
        match self.interior() {
            None => self.vertices().collect(),
            Some(int) => self.vertices().filter(|v| !int.contains(*v)).collect(),
        }
    }
}

/// Coordinate-wise torus distances `(r1, r2)` on `(Z/NZ)^2`.
pub fn torus_coord_dists(gs: GridSize, v: Vertex, w: Vertex) -> (i64, i64) {
    let nn = gs.side();
    let r = |a: i64, b: i64| {
        let d = (a - b).rem_euclid(nn);
        d.min(nn - d)
    };
    (r(v.x, w.x), r(v.y, w.y))
}

/// Euclidean torus distance `d^N(v, w) = min over translates by (N Z)^2`.
pub fn torus_dist_l2(gs: GridSize, v: Vertex, w: Vertex) -> f64 {
    let (r1, r2) = torus_coord_dists(gs, v, w);
    ((r1 * r1 + r2 * r2) as f64).sqrt()
}

/// Sup-norm torus distance `d_inf^N(v, w)`.
pub fn torus_dist_linf(gs: GridSize, v: Vertex, w: Vertex) -> i64 {
    let (r1, r2) = torus_coord_dists(gs, v, w);
    r1.max(r2)
}

/// `log2^+(x) = max(0, log2 x)` for `x > 0`.
pub fn log2_plus(x: f64) -> f64 {
    if x <= 1.0 {
        0.0
    } else {
        x.log2()
    }
}

fn ceil_log2(m: i64) -> u32 {
    debug_assert!(m >= 1);
    64 - ((m - 1).max(0) as u64).leading_zeros()
}

/// Number of dyadic levels `k` at which `v` and `w` share boxes,
/// `r(v, w) = n - ceil(log2(d_inf^N(v, w) + 1))`; equals `n` for `v = w`.
pub fn shared_scale_count(gs: GridSize, v: Vertex, w: Vertex) -> i64 {
    let d = torus_dist_linf(gs, v, w);
    gs.n as i64 - ceil_log2(d + 1) as i64
}

/// Count of torus-distinct level-`k` boxes containing both `v` and `w`
/// in the first-order (clipped) convention:
/// `max(0, 2^k - r1) * max(0, 2^k - r2)`.
pub fn common_box_count(gs: GridSize, k: u32, v: Vertex, w: Vertex) -> Result<i64> {
    if k > gs.n {
        return Err(Error::range(format!("level k={k} exceeds n={}", gs.n)));
    }
    let (r1, r2) = torus_coord_dists(gs, v, w);
    let l = 1i64 << k;
    Ok((l - r1).max(0) * (l - r2).max(0))
}

/// Exact number of level-`k` box *values* shared by `v` and `w` once boxes
/// are identified modulo `(N Z)^2`. Differs from [`common_box_count`] only
/// at the coarsest levels, where windows wrap around the torus.
pub fn exact_shared_box_count(gs: GridSize, k: u32, v: Vertex, w: Vertex) -> Result<i64> {
    if k > gs.n {
        return Err(Error::range(format!("level k={k} exceeds n={}", gs.n)));
    }
    let nn = gs.side();
    let l = 1i64 << k;
    let overlap = |r: i64| {
        if r == 0 {
            l
        } else {
            (l - r).max(0) + (l - (nn - r)).max(0)
        }
    };
    let (r1, r2) = torus_coord_dists(gs, v, w);
    Ok(overlap(r1) * overlap(r2))
}

/// Dyadic cell coordinates of `z` in the disjoint level-`k` partition
/// (`BD_k`): the unique box `[i 2^k, (i+1) 2^k) x [j 2^k, (j+1) 2^k)`.
pub fn dyadic_cell(k: u32, z: Vertex) -> (i64, i64) {
    (z.x >> k, z.y >> k)
}

/// The box of the nested-scale decomposition: `[v]_lambda`, a square of side
/// `max(1, round(N^(1-lambda)))` centred at `v` and clipped to `V_N`;
/// `[v]_0` is all of `V_N` and `[v]_1 = {v}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleBox {
    pub center: Vertex,
    pub lambda: f64,
    /// Nominal (unclipped) side length.
    pub side: i64,
    /// Extent after clipping to `V_N`.
    pub rect: Rect,
}

pub fn scale_box(gs: GridSize, v: Vertex, lambda: f64) -> Result<ScaleBox> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::range(format!("lambda={lambda} outside [0,1]")));
    }
    if !gs.contains(v) {
        return Err(Error::domain(format!("vertex ({},{}) outside V_N", v.x, v.y)));
    }
    let nn = gs.side();
    if lambda == 0.0 {
        return Ok(ScaleBox { center: v, lambda, side: nn, rect: gs.rect() });
    }
    let raw = (nn as f64).powf(1.0 - lambda);
    let side = raw.round().max(1.0) as i64;
    let half = side / 2;
    let rect = Rect::new(
        Vertex::new((v.x - half).max(0), (v.y - half).max(0)),
        Vertex::new((v.x + half).min(nn - 1), (v.y + half).min(nn - 1)),
    );
    Ok(ScaleBox { center: v, lambda, side, rect })
}

/// Branching scale `b_N(v, w)`: the largest `lambda` on the grid
/// `{i/m : 0 <= i <= m}` (default `m = n`) at which the scale boxes of `v`
/// and `w` still intersect.
pub fn branching_scale(gs: GridSize, v: Vertex, w: Vertex, grid: Option<u32>) -> Result<f64> {
    let m = grid.unwrap_or(gs.n.max(1));
    if m == 0 {
        return Err(Error::range("branching-scale grid must have m >= 1"));
    }
    for i in (0..=m).rev() {
        let lambda = i as f64 / m as f64;
        let bv = scale_box(gs, v, lambda)?;
        let bw = scale_box(gs, w, lambda)?;
        if bv.rect.intersects(&bw.rect) {
            return Ok(lambda);
        }
    }
    Ok(0.0)
}
