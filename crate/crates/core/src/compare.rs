//! Gaussian-comparison toolkit: Slepian / Sudakov–Fernique hypothesis
//! checkers, the explicit couplings between the scale-mixed field and the
//! two branching walks, and Monte-Carlo runners for their consequences.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cov::{cov_ibrw, cov_mibrw, cov_psi};
use crate::error::Error;
use crate::green::green_matrix;
use crate::lattice::{GridSize, Vertex};
use crate::profile::{build_comparison_profile, expected_max, StepProfile};
use crate::rng::{self, tag};
use crate::sampler::{ibrw_at, mibrw_values, sample_psi, MAX_BRW_EXPONENT};
use crate::Result;

pub(crate) const LN_2: f64 = core::f64::consts::LN_2;
pub const SQRT_LN2: f64 = 0.832_554_611_157_697_7;

/// Diagonal agreement required before a max-probability comparison.
pub const DIAG_TOL: f64 = 1e-9;
/// Slop allowed on the (exact) covariance / increment orderings.
pub const ORDER_TOL: f64 = 1e-12;
/// Monte-Carlo inequalities must hold within this many standard errors.
pub const MC_Z: f64 = 3.0;

// ---------------------------------------------------------------------------
// hypothesis checkers

#[derive(Debug, Clone, Serialize)]
pub struct PairGap {
    pub v: Vertex,
    pub w: Vertex,
    pub gap: f64,
}

/// Outcome of a pairwise comparison scan. `passed` means no diagonal gap
/// above [`DIAG_TOL`] and no ordering margin below `−`[`ORDER_TOL`].
/// Violations are report content, never errors.
#[derive(Debug, Clone, Serialize)]
pub struct SlepianReport {
    pub vertices: usize,
    pub pairs: usize,
    pub max_diag_gap: f64,
    pub min_order_margin: f64,
    pub diag_violations: usize,
    pub order_violations: usize,
    pub worst_diag: Option<PairGap>,
    pub worst_order: Option<PairGap>,
    pub passed: bool,
}

struct ScanAcc {
    pairs: usize,
    max_diag: f64,
    n_diag: usize,
    worst_diag: Option<PairGap>,
    min_margin: f64,
    n_order: usize,
    worst_order: Option<PairGap>,
}

impl ScanAcc {
    fn new() -> Self {
        ScanAcc {
            pairs: 0,
            max_diag: 0.0,
            n_diag: 0,
            worst_diag: None,
            min_margin: f64::INFINITY,
            n_order: 0,
            worst_order: None,
        }
    }

    fn diag(&mut self, v: Vertex, gap: f64) {
        if gap > self.max_diag {
            self.max_diag = gap;
            self.worst_diag = Some(PairGap { v, w: v, gap });
        }
        if gap > DIAG_TOL {
            self.n_diag += 1;
        }
    }

    fn order(&mut self, v: Vertex, w: Vertex, margin: f64) {
        self.pairs += 1;
        if margin < self.min_margin {
            self.min_margin = margin;
            self.worst_order = Some(PairGap { v, w, gap: margin });
        }
        if margin < -ORDER_TOL {
            self.n_order += 1;
        }
    }

    fn merge(mut self, other: ScanAcc) -> ScanAcc {
        self.pairs += other.pairs;
        self.n_diag += other.n_diag;
        self.n_order += other.n_order;
        if other.max_diag > self.max_diag {
            self.max_diag = other.max_diag;
            self.worst_diag = other.worst_diag;
        }
        if other.min_margin < self.min_margin {
            self.min_margin = other.min_margin;
            self.worst_order = other.worst_order;
        }
        self
    }

    fn report(self, vertices: usize) -> SlepianReport {
        let min_order_margin = if self.min_margin.is_finite() { self.min_margin } else { 0.0 };
        SlepianReport {
            vertices,
            pairs: self.pairs,
            max_diag_gap: self.max_diag,
            min_order_margin,
            diag_violations: self.n_diag,
            order_violations: self.n_order,
            worst_diag: self.worst_diag,
            worst_order: self.worst_order,
            passed: self.n_diag == 0 && self.n_order == 0,
        }
    }
}

/// Check the max-probability comparison hypotheses for `X` against `Y`:
/// equal diagonals (within [`DIAG_TOL`]) and `E[X_iX_j] ≥ E[Y_iY_j]` on
/// every off-diagonal pair. When the report passes,
/// `P(max X ≥ λ) ≤ P(max Y ≥ λ)` for every λ.
pub fn check_slepian_hypotheses<FX, FY>(cov_x: FX, cov_y: FY, verts: &[Vertex]) -> SlepianReport
where
    FX: Fn(usize, usize) -> f64 + Sync,
    FY: Fn(usize, usize) -> f64 + Sync,
{
    let m = verts.len();
    let acc = (0..m)
        .into_par_iter()
        .fold(ScanAcc::new, |mut acc, i| {
            acc.diag(verts[i], (cov_x(i, i) - cov_y(i, i)).abs());
            for j in (i + 1)..m {
                acc.order(verts[i], verts[j], cov_x(i, j) - cov_y(i, j));
            }
            acc
        })
        .reduce(ScanAcc::new, ScanAcc::merge);
    acc.report(m)
}

/// Check the expected-max comparison hypothesis: increments of `lo`
/// dominated by increments of `hi`, `E[(lo_i−lo_j)²] ≤ E[(hi_i−hi_j)²]`
/// for every pair. When the report passes, `E[max lo] ≤ E[max hi]`.
/// Diagonals are unconstrained (both increments vanish).
pub fn check_increment_domination<FL, FH>(cov_lo: FL, cov_hi: FH, verts: &[Vertex]) -> SlepianReport
where
    FL: Fn(usize, usize) -> f64 + Sync,
    FH: Fn(usize, usize) -> f64 + Sync,
{
    let m = verts.len();
    let d = |c: &dyn Fn(usize, usize) -> f64, i: usize, j: usize| c(i, i) + c(j, j) - 2.0 * c(i, j);
    let acc = (0..m)
        .into_par_iter()
        .fold(ScanAcc::new, |mut acc, i| {
            for j in (i + 1)..m {
                acc.order(verts[i], verts[j], d(&cov_hi, i, j) - d(&cov_lo, i, j));
            }
            acc
        })
        .reduce(ScanAcc::new, ScanAcc::merge);
    acc.report(m)
}

/// Gap bound for expected maxima: with
/// `γ = max_{i,j} |E[(X_i−X_j)²] − E[(Y_i−Y_j)²]|`, the expected maxima of
/// the two fields differ by at most `√(γ·log m)`. Also reports whether the
/// one-sided hypothesis (X-increments ≤ Y-increments everywhere) holds.
#[derive(Debug, Clone, Serialize)]
pub struct SudakovGap {
    pub gamma: f64,
    pub bound: f64,
    pub increments_dominated: bool,
    pub worst: Option<PairGap>,
}

pub fn sudakov_fernique_gap<FX, FY>(cov_x: FX, cov_y: FY, verts: &[Vertex]) -> SudakovGap
where
    FX: Fn(usize, usize) -> f64 + Sync,
    FY: Fn(usize, usize) -> f64 + Sync,
{
    let m = verts.len();
    let mut gamma = 0.0f64;
    let mut worst = None;
    let mut dominated = true;
    for i in 0..m {
        for j in (i + 1)..m {
            let dx = cov_x(i, i) + cov_x(j, j) - 2.0 * cov_x(i, j);
            let dy = cov_y(i, i) + cov_y(j, j) - 2.0 * cov_y(i, j);
            if (dx - dy).abs() > gamma {
                gamma = (dx - dy).abs();
                worst = Some(PairGap { v: verts[i], w: verts[j], gap: dx - dy });
            }
            if dx > dy + ORDER_TOL {
                dominated = false;
            }
        }
    }
    let bound = if m > 1 { (gamma * (m as f64).ln()).sqrt() } else { 0.0 };
    SudakovGap { gamma, bound, increments_dominated: dominated, worst }
}

/// Gaussian concentration envelope for the maximum:
/// `P(|max − E[max]| > x) ≤ 2·exp(−x²/(2·varmax))`.
pub fn borell_tail(varmax: f64, x: f64) -> Result<f64> {
    if !varmax.is_finite() || varmax <= 0.0 {
        return Err(Error::domain(format!("variance bound must be positive, got {varmax}")));
    }
    if !x.is_finite() || x < 0.0 {
        return Err(Error::domain(format!("deviation must be nonnegative, got {x}")));
    }
    Ok(2.0 * (-x * x / (2.0 * varmax)).exp())
}

// ---------------------------------------------------------------------------
// grid-wide ψ covariance lookups (zero on the boundary)

pub(crate) struct PsiGridCov {
    gs: GridSize,
    c: DMatrix<f64>,
    /// grid index (row-major) → interior matrix index
    idx: Vec<Option<usize>>,
}

pub(crate) fn psi_grid_cov(p: &StepProfile, gs: GridSize) -> Result<PsiGridCov> {
    let c = cov_psi(p, gs)?;
    let gm = green_matrix(gs.rect())?;
    let idx = (0..gs.vertex_count()).map(|i| gm.index(gs.vertex_at(i))).collect();
    Ok(PsiGridCov { gs, c, idx })
}

impl PsiGridCov {
    pub(crate) fn cov(&self, v: Vertex, w: Vertex) -> f64 {
        match (self.idx[self.gs.index_of(v)], self.idx[self.gs.index_of(w)]) {
            (Some(i), Some(j)) => self.c[(i, j)],
            _ => 0.0,
        }
    }

    pub(crate) fn var(&self, v: Vertex) -> f64 {
        match self.idx[self.gs.index_of(v)] {
            Some(i) => self.c[(i, i)],
            None => 0.0,
        }
    }

    pub(crate) fn increment(&self, v: Vertex, w: Vertex) -> f64 {
        self.var(v) + self.var(w) - 2.0 * self.cov(v, w)
    }
}

// ---------------------------------------------------------------------------
// coupling constructions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// field + shared noise dominated by the dyadic walk on the enlarged
    /// grid: `P(max ψ ≥ λ) ≤ 2·P(max R ≥ λ)`
    Upper,
    /// averaged walk + shared noise dominated by the field on an embedded
    /// window: `½·P(√log2·max S ≥ λ) ≤ P(max ψ ≥ λ)`
    Lower,
    /// expected-max chain `E[ψ*] ≤ E[max window ψ] ≤ √log2·E[max(S + C₁g)]`
    MeanUpper,
    /// expected-max chain `√log2·E[max truncated S] ≤ E[max window ψ] ≤ E[ψ*]`
    MeanLower,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Direction::Upper => "upper",
            Direction::Lower => "lower",
            Direction::MeanUpper => "mean-upper",
            Direction::MeanLower => "mean-lower",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upper" => Ok(Direction::Upper),
            "lower" => Ok(Direction::Lower),
            "mean-upper" => Ok(Direction::MeanUpper),
            "mean-lower" => Ok(Direction::MeanLower),
            other => Err(Error::domain(format!("unknown comparison direction '{other}'"))),
        }
    }
}

/// Affine vertex map `v ↦ (dx, dy) + scale·v`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Embedding {
    pub scale: i64,
    pub dx: i64,
    pub dy: i64,
}

impl Embedding {
    pub fn map(&self, v: Vertex) -> Vertex {
        Vertex::new(self.dx + self.scale * v.x, self.dy + self.scale * v.y)
    }
}

/// A concrete comparison instance: the enlargement/truncation level, the
/// per-vertex shared-noise amplitudes, the vertex embedding into the target
/// grid, and the hypothesis-check report that gates any Monte-Carlo use.
#[derive(Debug, Clone, Serialize)]
pub struct CouplingSpec {
    pub direction: Direction,
    /// Enlargement exponent for the probability couplings, the truncation
    /// level for the mean-lower chain, the window exponent for mean-upper.
    pub kappa: u32,
    pub base: GridSize,
    pub target: GridSize,
    pub embedding: Embedding,
    /// Shared-noise amplitudes indexed like the base grid (row-major).
    pub a: Vec<f64>,
    pub a_spread: f64,
    /// Comparison-walk profile (upper direction only).
    pub tilde: Option<StepProfile>,
    pub gate: SlepianReport,
}

fn spread(a: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in a {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if a.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

fn kappa_too_small(spec: &CouplingSpec, what: &str) -> Error {
    let (pair, kind) = match (&spec.gate.worst_diag, &spec.gate.worst_order) {
        (Some(d), _) if spec.gate.diag_violations > 0 => (d.clone(), "variance deficit"),
        (_, Some(o)) => (o.clone(), "ordering margin"),
        (Some(d), None) => (d.clone(), "variance deficit"),
        (None, None) => {
            return Error::KappaTooSmall {
                x: -1,
                y: -1,
                detail: format!("{what}: hypothesis check failed with no recorded pair"),
            }
        }
    };
    Error::KappaTooSmall {
        x: pair.v.x,
        y: pair.v.y,
        detail: format!(
            "{what}: {kind} {:.6e} at ({}, {})–({}, {})",
            pair.gap, pair.v.x, pair.v.y, pair.w.x, pair.w.y
        ),
    }
}

/// Assemble the upward coupling for a given enlargement exponent without
/// insisting that it works: amplitudes are clamped at zero and the gate
/// report records any variance deficits or ordering failures.
pub fn upper_coupling_candidate(p: &StepProfile, n: u32, kappa: u32) -> Result<CouplingSpec> {
    if n < 1 {
        return Err(Error::range("need n >= 1"));
    }
    if n + kappa > MAX_BRW_EXPONENT {
        return Err(Error::SizeLimit { n: n + kappa, max: MAX_BRW_EXPONENT });
    }
    let gs = GridSize::new(n);
    let gt = GridSize::new(n + kappa);
    let comp = build_comparison_profile(p, n, kappa)?;
    let rc = cov_ibrw(&comp.step, gt, gt.n)?;
    let var_r = rc.var();
    let pg = psi_grid_cov(p, gs)?;

    let verts: Vec<Vertex> = gs.vertices().collect();
    let a: Vec<f64> =
        verts.iter().map(|&v| (var_r - pg.var(v)).max(0.0).sqrt()).collect();
    let embedding = Embedding { scale: 1 << kappa, dx: 0, dy: 0 };
    let emb: Vec<Vertex> = verts.iter().map(|&v| embedding.map(v)).collect();

    let cov_x = |i: usize, j: usize| pg.cov(verts[i], verts[j]) + a[i] * a[j];
    let cov_y = |i: usize, j: usize| rc.cov(emb[i], emb[j]);
    let gate = check_slepian_hypotheses(cov_x, cov_y, &verts);

    let a_spread = spread(&a);
    Ok(CouplingSpec {
        direction: Direction::Upper,
        kappa,
        base: gs,
        target: gt,
        embedding,
        a,
        a_spread,
        tilde: Some(comp.step),
        gate,
    })
}

/// Couple the field upward against the dyadic walk on the `2^κ`-enlarged
/// grid. With `kappa = None` the smallest exponent whose hypothesis checks
/// all pass is selected.
pub fn build_upper_coupling(p: &StepProfile, n: u32, kappa: Option<u32>) -> Result<CouplingSpec> {
    match kappa {
        Some(k) => {
            let spec = upper_coupling_candidate(p, n, k)?;
            if spec.gate.passed {
                Ok(spec)
            } else {
                Err(kappa_too_small(&spec, &format!("enlargement kappa={k}")))
            }
        }
        None => {
            let mut last_err = None;
            for k in 0..=(MAX_BRW_EXPONENT.saturating_sub(n)) {
                match upper_coupling_candidate(p, n, k) {
                    Ok(spec) if spec.gate.passed => return Ok(spec),
                    Ok(spec) => last_err = Some(kappa_too_small(&spec, &format!("kappa={k}"))),
                    // some enlargements admit no comparison profile; skip them
                    Err(Error::ConstructionInvalid { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(last_err.unwrap_or_else(|| Error::KappaTooSmall {
                x: -1,
                y: -1,
                detail: format!("no enlargement up to {} works", MAX_BRW_EXPONENT - n),
            }))
        }
    }
}

/// Assemble the downward coupling (field on an embedded window vs averaged
/// walk plus shared noise) for a given `kappa`, clamping amplitudes and
/// recording violations in the gate report.
pub fn lower_coupling_candidate(p: &StepProfile, n: u32, kappa: u32) -> Result<CouplingSpec> {
    if !(3..=n.saturating_sub(1)).contains(&kappa) {
        return Err(Error::range(format!("enlargement kappa={kappa} outside 3..={}", n.max(1) - 1)));
    }
    let gs = GridSize::new(n);
    let gsb = GridSize::new(n - kappa);
    let nn = gs.side();
    let embedding = Embedding { scale: 1 << (kappa - 3), dx: nn / 4, dy: nn / 4 };

    let sc = cov_mibrw(p, gsb, 0)?;
    let var_s = sc.var();
    let pg = psi_grid_cov(p, gs)?;

    let verts: Vec<Vertex> = gsb.vertices().collect();
    let emb: Vec<Vertex> = verts.iter().map(|&v| embedding.map(v)).collect();
    let a: Vec<f64> =
        emb.iter().map(|&e| (pg.var(e) / LN_2 - var_s).max(0.0).sqrt()).collect();

    let cov_x = |i: usize, j: usize| LN_2 * (sc.cov(verts[i], verts[j]) + a[i] * a[j]);
    let cov_y = |i: usize, j: usize| pg.cov(emb[i], emb[j]);
    let gate = check_slepian_hypotheses(cov_x, cov_y, &verts);

    let a_spread = spread(&a);
    Ok(CouplingSpec {
        direction: Direction::Lower,
        kappa,
        base: gsb,
        target: gs,
        embedding,
        a,
        a_spread,
        tilde: None,
        gate,
    })
}

/// Couple the averaged walk upward into the field on the centred window
/// `(N/4, N/4) + 2^{κ−3}·V_{2^{−κ}N}`. With `kappa = None` the smallest
/// passing exponent in `3..=n−1` is selected.
pub fn build_lower_coupling(p: &StepProfile, n: u32, kappa: Option<u32>) -> Result<CouplingSpec> {
    match kappa {
        Some(k) => {
            let spec = lower_coupling_candidate(p, n, k)?;
            if spec.gate.passed {
                Ok(spec)
            } else {
                Err(kappa_too_small(&spec, &format!("enlargement kappa={k}")))
            }
        }
        None => {
            let mut last_err = None;
            for k in 3..n.max(1) {
                match lower_coupling_candidate(p, n, k) {
                    Ok(spec) if spec.gate.passed => return Ok(spec),
                    Ok(spec) => last_err = Some(kappa_too_small(&spec, &format!("kappa={k}"))),
                    Err(e) => return Err(e),
                }
            }
            Err(last_err.unwrap_or_else(|| Error::KappaTooSmall {
                x: -1,
                y: -1,
                detail: format!("no enlargement in 3..{n} works"),
            }))
        }
    }
}

/// Expected-max chain upward: the field on the centred `V_N + (2N, 2N)`
/// window of the 4N grid has increments dominated by the averaged walk once
/// an iid noise of amplitude `C₁` is added. `C₁` is calibrated as the exact
/// maximal deficit over pairs, so the gate passes by construction.
pub fn build_mean_upper_coupling(p: &StepProfile, n: u32) -> Result<CouplingSpec> {
    if n < 1 {
        return Err(Error::range("need n >= 1"));
    }
    let gs = GridSize::new(n);
    let gt = GridSize::new(n + 2);
    let nn = gs.side();
    let embedding = Embedding { scale: 1, dx: 2 * nn, dy: 2 * nn };

    let pg = psi_grid_cov(p, gt)?;
    let sc = cov_mibrw(p, gs, 0)?;

    let verts: Vec<Vertex> = gs.vertices().collect();
    let emb: Vec<Vertex> = verts.iter().map(|&v| embedding.map(v)).collect();

    let m = verts.len();
    let deficit = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut worst = f64::NEG_INFINITY;
            for j in (i + 1)..m {
                let d = pg.increment(emb[i], emb[j]) - LN_2 * sc.rho(verts[i], verts[j]);
                worst = worst.max(d);
            }
            worst
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    let c1 = (deficit.max(0.0) / (2.0 * LN_2)).sqrt();

    let cov_lo = |i: usize, j: usize| pg.cov(emb[i], emb[j]);
    let cov_hi =
        |i: usize, j: usize| LN_2 * (sc.cov(verts[i], verts[j]) + if i == j { c1 * c1 } else { 0.0 });
    let gate = check_increment_domination(cov_lo, cov_hi, &verts);

    Ok(CouplingSpec {
        direction: Direction::MeanUpper,
        kappa: 2,
        base: gs,
        target: gt,
        embedding,
        a: vec![c1; m],
        a_spread: 0.0,
        tilde: None,
        gate,
    })
}

fn mean_lower_candidate(p: &StepProfile, n: u32, k0: u32) -> Result<CouplingSpec> {
    let gs = GridSize::new(n);
    let gsb = GridSize::new(n - 2);
    let nn = gs.side();
    let embedding = Embedding { scale: 1, dx: nn / 2, dy: nn / 2 };

    let pg = psi_grid_cov(p, gs)?;
    let sc = cov_mibrw(p, gsb, k0)?;

    let verts: Vec<Vertex> = gsb.vertices().collect();
    let emb: Vec<Vertex> = verts.iter().map(|&v| embedding.map(v)).collect();

    let cov_lo = |i: usize, j: usize| LN_2 * sc.cov(verts[i], verts[j]);
    let cov_hi = |i: usize, j: usize| pg.cov(emb[i], emb[j]);
    let gate = check_increment_domination(cov_lo, cov_hi, &verts);

    Ok(CouplingSpec {
        direction: Direction::MeanLower,
        kappa: k0,
        base: gsb,
        target: gs,
        embedding,
        a: vec![0.0; verts.len()],
        a_spread: 0.0,
        tilde: None,
        gate,
    })
}

/// Expected-max chain downward: truncating the first `k0` levels of the
/// averaged walk on `V_{N/4}` brings its increments below those of the
/// field on the window `V_{N/4} + (N/2, N/2)`. With `k0 = None` the
/// smallest passing truncation is selected.
pub fn build_mean_lower_coupling(p: &StepProfile, n: u32, k0: Option<u32>) -> Result<CouplingSpec> {
    if n < 3 {
        return Err(Error::range("need n >= 3 for the quarter-grid window"));
    }
    match k0 {
        Some(k) => {
            let spec = mean_lower_candidate(p, n, k)?;
            if spec.gate.passed {
                Ok(spec)
            } else {
                Err(kappa_too_small(&spec, &format!("truncation k0={k}")))
            }
        }
        None => {
            let mut last_err = None;
            for k in 0..=(n - 2) {
                let spec = mean_lower_candidate(p, n, k)?;
                if spec.gate.passed {
                    return Ok(spec);
                }
                last_err = Some(kappa_too_small(&spec, &format!("k0={k}")));
            }
            Err(last_err.expect("at least one candidate"))
        }
    }
}

// ---------------------------------------------------------------------------
// Monte-Carlo consequences

#[derive(Debug, Clone, Serialize)]
pub struct InequalityPoint {
    pub lambda: f64,
    /// smaller side of the claimed inequality (already scaled, e.g. ×2, ×½)
    pub p_lo: f64,
    pub p_hi: f64,
    pub se_lo: f64,
    pub se_hi: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanStage {
    pub label: String,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRun {
    pub direction: Direction,
    pub kappa: u32,
    pub base_n: u32,
    pub target_n: u32,
    pub reps: u32,
    pub seed: u64,
    pub z: f64,
    /// tail points for the probability couplings
    pub points: Vec<InequalityPoint>,
    /// ordered means for the expected-max chains
    pub stages: Vec<MeanStage>,
    pub satisfied: bool,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, (var / xs.len() as f64).sqrt())
}

fn binom_se(p: f64, reps: u32) -> f64 {
    ((p * (1.0 - p)).max(1e-12) / reps as f64).sqrt()
}

fn tail_points(
    lambdas: &[f64],
    lo: &[f64],
    hi: &[f64],
    scale_lo: f64,
    scale_hi: f64,
    reps: u32,
) -> Vec<InequalityPoint> {
    lambdas
        .iter()
        .map(|&lambda| {
            let f_lo = lo.iter().filter(|&&x| x >= lambda).count() as f64 / reps as f64;
            let f_hi = hi.iter().filter(|&&x| x >= lambda).count() as f64 / reps as f64;
            let p_lo = scale_lo * f_lo;
            let p_hi = scale_hi * f_hi;
            let se_lo = scale_lo * binom_se(f_lo, reps);
            let se_hi = scale_hi * binom_se(f_hi, reps);
            let slack = MC_Z * (se_lo * se_lo + se_hi * se_hi).sqrt();
            InequalityPoint {
                lambda,
                p_lo,
                p_hi,
                se_lo,
                se_hi,
                satisfied: p_lo <= p_hi + slack + 1e-15,
            }
        })
        .collect()
}

fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Run the Monte-Carlo consequence of a coupling. Refuses to run when the
/// hypothesis gate did not pass. Replicate seeds are shared between the two
/// sides (the fields draw from independent streams).
pub fn empirical_comparison(
    p: &StepProfile,
    spec: &CouplingSpec,
    reps: u32,
    seed: u64,
    lambdas: Option<&[f64]>,
) -> Result<ComparisonRun> {
    if !spec.gate.passed {
        return Err(Error::HypothesisViolation(format!(
            "{} coupling gate failed ({} diagonal, {} ordering violations); refusing Monte Carlo",
            spec.direction, spec.gate.diag_violations, spec.gate.order_violations
        )));
    }
    if reps == 0 {
        return Err(Error::domain("need at least one replicate"));
    }
    let mut run = ComparisonRun {
        direction: spec.direction,
        kappa: spec.kappa,
        base_n: spec.base.n,
        target_n: spec.target.n,
        reps,
        seed,
        z: MC_Z,
        points: Vec::new(),
        stages: Vec::new(),
        satisfied: true,
    };
    match spec.direction {
        Direction::Upper => {
            let tilde = spec
                .tilde
                .as_ref()
                .ok_or_else(|| Error::Internal("upward coupling lost its walk profile".into()))?;
            let emb_pts: Vec<Vertex> =
                spec.base.vertices().map(|v| spec.embedding.map(v)).collect();
            let t = spec.target.n;
            let pairs: Vec<(f64, f64)> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let s = rng::replicate_seed(seed, r as u64);
                    let psi = sample_psi(p, spec.base, s).expect("validated sizes");
                    let walk = ibrw_at(tilde, spec.target, t, s, &emb_pts)
                        .expect("validated sizes");
                    let wmax = walk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    (psi.max_value(), wmax)
                })
                .collect();
            let lo: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let hi: Vec<f64> = pairs.iter().map(|x| x.1).collect();
            let grid = match lambdas {
                Some(l) => l.to_vec(),
                None => {
                    let m = expected_max(p, spec.base.n.max(2) as f64)?;
                    linspace(m - 1.0, m + 2.0, 7)
                }
            };
            run.points = tail_points(&grid, &lo, &hi, 1.0, 2.0, reps);
        }
        Direction::Lower => {
            let pairs: Vec<(f64, f64)> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let s = rng::replicate_seed(seed, r as u64);
                    let walk = mibrw_values(p, spec.base, 0, s).expect("validated sizes");
                    let wmax = walk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let psi = sample_psi(p, spec.target, s).expect("validated sizes");
                    (SQRT_LN2 * wmax, psi.max_value())
                })
                .collect();
            let lo: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let hi: Vec<f64> = pairs.iter().map(|x| x.1).collect();
            let grid = match lambdas {
                Some(l) => l.to_vec(),
                None => {
                    let m_hi = expected_max(p, spec.target.n as f64)?;
                    linspace(0.0, m_hi + 1.5, 8)
                }
            };
            run.points = tail_points(&grid, &lo, &hi, 0.5, 1.0, reps);
        }
        Direction::MeanUpper => {
            let c1 = spec.a.first().copied().unwrap_or(0.0);
            let emb_idx: Vec<usize> = spec
                .base
                .vertices()
                .map(|v| spec.target.index_of(spec.embedding.map(v)))
                .collect();
            let dim = spec.base.vertex_count();
            let triples: Vec<[f64; 3]> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let s = rng::replicate_seed(seed, r as u64);
                    let own = sample_psi(p, spec.base, s).expect("validated sizes").max_value();
                    let big = sample_psi(p, spec.target, s).expect("validated sizes");
                    let win = emb_idx
                        .iter()
                        .map(|&i| big.values[i])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let walk = mibrw_values(p, spec.base, 0, s).expect("validated sizes");
                    let mut g = rng::stream(s, &[tag::COUPLING, spec.base.n as u64]);
                    let mut padded = f64::NEG_INFINITY;
                    for i in 0..dim {
                        let gv: f64 = rand_distr::Distribution::sample(
                            &rand_distr::StandardNormal,
                            &mut g,
                        );
                        padded = padded.max(SQRT_LN2 * (walk[i] + c1 * gv));
                    }
                    [own, win, padded]
                })
                .collect();
            let labels =
                ["max on own grid", "max on embedded window", "scaled noisy walk max"];
            run.stages = chain_stages(&labels, &triples);
            run.satisfied = stages_ordered(&run.stages);
        }
        Direction::MeanLower => {
            let emb_idx: Vec<usize> = spec
                .base
                .vertices()
                .map(|v| spec.target.index_of(spec.embedding.map(v)))
                .collect();
            let triples: Vec<[f64; 3]> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let s = rng::replicate_seed(seed, r as u64);
                    let walk =
                        mibrw_values(p, spec.base, spec.kappa, s).expect("validated sizes");
                    let wmax = walk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let psi = sample_psi(p, spec.target, s).expect("validated sizes");
                    let win = emb_idx
                        .iter()
                        .map(|&i| psi.values[i])
                        .fold(f64::NEG_INFINITY, f64::max);
                    [SQRT_LN2 * wmax, win, psi.max_value()]
                })
                .collect();
            let labels =
                ["scaled truncated walk max", "max on embedded window", "max on own grid"];
            run.stages = chain_stages(&labels, &triples);
            run.satisfied = stages_ordered(&run.stages);
        }
    }
    if !run.points.is_empty() {
        run.satisfied = run.points.iter().all(|pt| pt.satisfied);
    }
    Ok(run)
}

fn chain_stages(labels: &[&str; 3], triples: &[[f64; 3]]) -> Vec<MeanStage> {
    (0..3)
        .map(|k| {
            let xs: Vec<f64> = triples.iter().map(|t| t[k]).collect();
            let (mean, se) = mean_se(&xs);
            MeanStage { label: labels[k].to_string(), mean, se }
        })
        .collect()
}

fn stages_ordered(stages: &[MeanStage]) -> bool {
    stages.windows(2).all(|w| {
        let slack = MC_Z * (w[0].se * w[0].se + w[1].se * w[1].se).sqrt();
        w[0].mean <= w[1].mean + slack
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::green::green_matrix;
    use crate::sampler::{sample_dgff, sample_mibrw};

    #[test]
    fn identical_fields_pass_the_max_probability_check() {
        let p = StepProfile::uniform();
        let gs = GridSize::new(3);
        let pg = psi_grid_cov(&p, gs).unwrap();
        let verts: Vec<Vertex> = gs.vertices().collect();
        let c = |i: usize, j: usize| pg.cov(verts[i], verts[j]);
        let rep = check_slepian_hypotheses(c, c, &verts);
        assert!(rep.passed);
        assert_eq!(rep.diag_violations, 0);
        assert_eq!(rep.order_violations, 0);
        assert_eq!(rep.max_diag_gap, 0.0);
        assert_eq!(rep.min_order_margin, 0.0);
        assert_eq!(rep.pairs, verts.len() * (verts.len() - 1) / 2);

        let gap = sudakov_fernique_gap(c, c, &verts);
        assert_eq!(gap.gamma, 0.0);
        assert_eq!(gap.bound, 0.0);
        assert!(gap.increments_dominated);
    }

    #[test]
    fn upper_coupling_with_generous_enlargement() {
        let p = StepProfile::uniform();
        let n = 4;
        let kappa = 8;
        let spec = build_upper_coupling(&p, n, Some(kappa)).unwrap();
        assert!(spec.gate.passed);
        assert_eq!(spec.embedding.scale, 1 << kappa);

        // flat profile: the comparison walk keeps unit variance per level,
        // so the walk variance is log2·(n+κ+1) exactly and the recorded
        // amplitudes fill the gap to the field variance; in particular they
        // dominate the continuum value log2·(n+κ) − Var[ψ_v] ≥ 0.
        let gs = GridSize::new(n);
        let pg = psi_grid_cov(&p, gs).unwrap();
        let var_r = LN_2 * (n + kappa + 1) as f64;
        for (i, v) in gs.vertices().enumerate() {
            let av2 = spec.a[i] * spec.a[i];
            assert!((av2 + pg.var(v) - var_r).abs() < 1e-9);
            assert!(av2 >= LN_2 * (n + kappa) as f64 - pg.var(v) - 1e-9);
        }
    }

    #[test]
    fn upper_coupling_rejects_zero_enlargement_and_auto_search_recovers() {
        let p = StepProfile::uniform();
        let err = build_upper_coupling(&p, 4, Some(0)).unwrap_err();
        match err {
            Error::KappaTooSmall { detail, .. } => {
                assert!(detail.contains("kappa=0"), "{detail}");
            }
            other => panic!("expected kappa error, got {other:?}"),
        }

        // the same construction surfaces its violations as report content
        let cand = upper_coupling_candidate(&p, 4, 0).unwrap();
        assert!(!cand.gate.passed);
        assert!(cand.gate.order_violations > 0 || cand.gate.diag_violations > 0);

        let auto = build_upper_coupling(&p, 4, None).unwrap();
        assert!(auto.gate.passed);
        assert!(auto.kappa >= 1);
        let below = upper_coupling_candidate(&p, 4, auto.kappa - 1).unwrap();
        assert!(!below.gate.passed, "search must return the smallest passing exponent");
    }

    #[test]
    fn upper_coupling_two_piece_profile() {
        let p = StepProfile::new(vec![1.2, 0.8], vec![0.5, 1.0]).unwrap();
        let spec = build_upper_coupling(&p, 4, None).unwrap();
        assert!(spec.gate.passed);
        assert!(spec.tilde.is_some());
        // exact variance matching on every vertex, boundary included
        let gs = GridSize::new(4);
        let pg = psi_grid_cov(&p, gs).unwrap();
        let rc = cov_ibrw(spec.tilde.as_ref().unwrap(), spec.target, spec.target.n).unwrap();
        for (i, v) in gs.vertices().enumerate() {
            let total = spec.a[i] * spec.a[i] + pg.var(v);
            assert!((total - rc.var()).abs() < 1e-9);
        }
    }

    #[test]
    fn lower_coupling_variance_matching_and_ordering() {
        let p = StepProfile::uniform();
        let spec = build_lower_coupling(&p, 4, None).unwrap();
        assert_eq!(spec.kappa, 3);
        assert!(spec.gate.passed);

        let gs = GridSize::new(4);
        let pg = psi_grid_cov(&p, gs).unwrap();
        let sc = cov_mibrw(&p, spec.base, 0).unwrap();
        for (i, v) in spec.base.vertices().enumerate() {
            let matched = LN_2 * (sc.var() + spec.a[i] * spec.a[i]);
            assert!((matched - pg.var(spec.embedding.map(v))).abs() < 1e-9);
        }
        // the quarter-offset window is off-centre, so the matched amplitudes
        // vary a little across it but stay within a uniform band
        assert!(spec.a_spread < 0.5, "spread {}", spec.a_spread);

        let explicit = build_lower_coupling(&p, 5, Some(4)).unwrap();
        assert!(explicit.gate.passed);
        assert!(explicit.a_spread.is_finite());
    }

    #[test]
    fn lower_coupling_rejects_undersized_enlargement() {
        let p = StepProfile::uniform();
        // kappa below the window construction's reach is a domain error
        assert!(build_lower_coupling(&p, 5, Some(2)).is_err());

        // a steeply decreasing profile piles variance onto the coarse
        // scales; the smallest window exponent then leaves the walk too
        // correlated and the search must move past it
        let steep = StepProfile::new(vec![1.5, 0.5], vec![0.5, 1.0]).unwrap();
        let cand = lower_coupling_candidate(&steep, 6, 3).unwrap();
        assert!(!cand.gate.passed);
        assert!(cand.gate.order_violations > 0);
        match build_lower_coupling(&steep, 6, Some(3)) {
            Err(Error::KappaTooSmall { detail, .. }) => assert!(detail.contains("kappa=3")),
            other => panic!("expected kappa error, got {other:?}"),
        }
        let auto = build_lower_coupling(&steep, 6, None).unwrap();
        assert_eq!(auto.kappa, 4);
        assert!(auto.gate.passed);
    }

    #[test]
    fn mean_upper_chain_noise_level_is_exactly_calibrated() {
        let p = StepProfile::uniform();
        let spec = build_mean_upper_coupling(&p, 3).unwrap();
        assert!(spec.gate.passed);
        let c1 = spec.a[0];
        assert!(c1 > 0.0 && c1.is_finite());
        // the calibration is tight: the worst pair sits on the boundary
        assert!(spec.gate.min_order_margin.abs() < 1e-9);

        // without the noise the one-sided hypothesis fails, with it it holds
        let gs = spec.base;
        let pg = psi_grid_cov(&p, spec.target).unwrap();
        let sc = cov_mibrw(&p, gs, 0).unwrap();
        let verts: Vec<Vertex> = gs.vertices().collect();
        let emb: Vec<Vertex> = verts.iter().map(|&v| spec.embedding.map(v)).collect();
        let cov_win = |i: usize, j: usize| pg.cov(emb[i], emb[j]);
        let bare = |i: usize, j: usize| LN_2 * sc.cov(verts[i], verts[j]);
        let gap = sudakov_fernique_gap(&cov_win, &bare, &verts);
        assert!(gap.bound.is_finite() && gap.bound > 0.0);
        assert!(!gap.increments_dominated);
        let padded = |i: usize, j: usize| {
            LN_2 * (sc.cov(verts[i], verts[j]) + if i == j { c1 * c1 } else { 0.0 })
        };
        let gap2 = sudakov_fernique_gap(&cov_win, &padded, &verts);
        assert!(gap2.increments_dominated);
    }

    #[test]
    fn mean_lower_chain_truncation_depth_tracks_the_profile() {
        // flat profile: the field's window increments already dominate the
        // untruncated walk at this size
        let p = StepProfile::uniform();
        let spec = build_mean_lower_coupling(&p, 5, None).unwrap();
        assert!(spec.gate.passed);
        assert_eq!(spec.kappa, 0);

        // steep decreasing profile: the coarse walk levels are too strong
        // and three of them must be cut before the field dominates
        let steep = StepProfile::new(vec![1.5, 0.5], vec![0.5, 1.0]).unwrap();
        let untruncated = mean_lower_candidate(&steep, 5, 0).unwrap();
        assert!(!untruncated.gate.passed);
        assert!(untruncated.gate.order_violations > 0);
        match build_mean_lower_coupling(&steep, 5, Some(0)) {
            Err(Error::KappaTooSmall { detail, .. }) => assert!(detail.contains("k0=0")),
            other => panic!("expected truncation error, got {other:?}"),
        }
        let auto = build_mean_lower_coupling(&steep, 5, None).unwrap();
        assert_eq!(auto.kappa, 3);
        assert!(auto.gate.passed);
    }

    #[test]
    fn empirical_upper_tail_inequality_small_grid() {
        let p = StepProfile::uniform();
        let spec = build_upper_coupling(&p, 3, None).unwrap();
        let run = empirical_comparison(&p, &spec, 4000, 07_2201, None).unwrap();
        assert!(run.satisfied, "{:?}", run.points);
        assert_eq!(run.points.len(), 7);
        // at least one grid point should be informative on both sides
        assert!(run.points.iter().any(|pt| pt.p_lo > 0.01 && pt.p_hi > 0.01));
    }

    #[test]
    fn empirical_lower_tail_inequality_small_grid() {
        let p = StepProfile::uniform();
        let spec = build_lower_coupling(&p, 4, None).unwrap();
        let run = empirical_comparison(&p, &spec, 4000, 0xbeef, None).unwrap();
        assert!(run.satisfied, "{:?}", run.points);
    }

    #[test]
    fn empirical_mean_chains_hold() {
        let p = StepProfile::uniform();
        let up = build_mean_upper_coupling(&p, 3).unwrap();
        let run = empirical_comparison(&p, &up, 1200, 11, None).unwrap();
        assert_eq!(run.stages.len(), 3);
        assert!(run.satisfied, "{:?}", run.stages);

        let down = build_mean_lower_coupling(&p, 5, None).unwrap();
        let run = empirical_comparison(&p, &down, 1500, 12, None).unwrap();
        assert!(run.satisfied, "{:?}", run.stages);
        // the window max never exceeds the full-grid max of the same sample
        assert!(run.stages[1].mean <= run.stages[2].mean + 1e-12);
    }

    #[test]
    fn gate_failure_blocks_monte_carlo() {
        let p = StepProfile::uniform();
        let cand = upper_coupling_candidate(&p, 3, 0).unwrap();
        assert!(!cand.gate.passed);
        match empirical_comparison(&p, &cand, 100, 1, None) {
            Err(Error::HypothesisViolation(msg)) => assert!(msg.contains("refusing")),
            other => panic!("expected the gate to block, got {other:?}"),
        }
    }

    #[test]
    fn comparison_runs_are_reproducible() {
        let p = StepProfile::uniform();
        let spec = build_upper_coupling(&p, 3, None).unwrap();
        let a = empirical_comparison(&p, &spec, 300, 99, None).unwrap();
        let b = empirical_comparison(&p, &spec, 300, 99, None).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = empirical_comparison(&p, &spec, 300, 100, None).unwrap();
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn borell_envelope_values_and_domain() {
        assert!((borell_tail(2.0, 0.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(borell_tail(0.0, 1.0).is_err());
        assert!(borell_tail(-1.0, 1.0).is_err());
        assert!(borell_tail(1.0, -0.5).is_err());

        // envelope dominates the empirical concentration of the max
        let gs = GridSize::new(4);
        let g = green_matrix(gs.rect()).unwrap();
        let varmax = (0..g.dim()).map(|i| g.matrix()[(i, i)]).fold(0.0f64, f64::max);
        let reps = 4000u32;
        let maxima: Vec<f64> = (0..reps)
            .into_par_iter()
            .map(|r| sample_dgff(gs, rng::replicate_seed(7, r as u64)).unwrap().max_value())
            .collect();
        let mean = maxima.iter().sum::<f64>() / reps as f64;
        for x in [1.0f64, 2.0, 3.0] {
            let emp = maxima.iter().filter(|&&m| (m - mean).abs() > x).count() as f64
                / reps as f64;
            let bound = borell_tail(varmax, x).unwrap();
            let se = binom_se(emp, reps);
            assert!(emp <= bound + MC_Z * se, "x={x}: {emp} vs {bound}");
        }
        // coarse variance bounds only weaken the envelope
        let coarse = varmax + 1.0;
        let far = 2.0 * (16.0f64.ln()).sqrt();
        let emp = maxima.iter().filter(|&&m| (m - mean).abs() > far).count() as f64 / reps as f64;
        assert!(emp <= borell_tail(coarse, far).unwrap());
    }

    #[test]
    fn centred_deviation_never_beats_an_independent_copy() {
        // E|A − EA| ≤ E|A − A'| computed exactly on discrete distributions
        let dists: Vec<Vec<(f64, f64)>> = vec![
            vec![(0.0, 0.25), (1.0, 0.25), (3.0, 0.25), (7.0, 0.25)],
            vec![(-2.0, 0.5), (5.0, 0.3), (11.0, 0.2)],
            vec![(0.0, 0.9), (100.0, 0.1)],
        ];
        for d in dists {
            let mean: f64 = d.iter().map(|(x, p)| x * p).sum();
            let centred: f64 = d.iter().map(|(x, p)| p * (x - mean).abs()).sum();
            let paired: f64 = d
                .iter()
                .flat_map(|&(x, px)| d.iter().map(move |&(y, py)| px * py * (x - y).abs()))
                .sum();
            assert!(centred <= paired + 1e-12, "{centred} > {paired}");
        }
    }

    #[test]
    fn independent_noise_never_lowers_the_expected_max() {
        let p = StepProfile::uniform();
        let gs = GridSize::new(3);
        let reps = 2000u32;
        let deltas: Vec<f64> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let s = rng::replicate_seed(31, r as u64);
                let psi = sample_psi(&p, gs, s).unwrap();
                let mut g = rng::stream(s, &[tag::COUPLING, 3]);
                let noisy = psi
                    .values
                    .iter()
                    .map(|&v| {
                        let gv: f64 = rand_distr::Distribution::sample(
                            &rand_distr::StandardNormal,
                            &mut g,
                        );
                        v + 0.7 * gv
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                noisy - psi.max_value()
            })
            .collect();
        let (mean, se) = mean_se(&deltas);
        assert!(mean >= -MC_Z * se, "mean delta {mean} with se {se}");
    }

    #[test]
    fn independent_copies_bracket_the_doubling_gap() {
        // E|ψ* − ψ̃*| ≤ 2·(E[max on the 4× grid] − E[max]) within MC error
        let p = StepProfile::uniform();
        let gs = GridSize::new(3);
        let big = GridSize::new(5);
        let reps = 1200u32;
        let rows: Vec<[f64; 2]> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let s1 = rng::replicate_seed(401, 2 * r as u64);
                let s2 = rng::replicate_seed(401, 2 * r as u64 + 1);
                let a = sample_psi(&p, gs, s1).unwrap().max_value();
                let b = sample_psi(&p, gs, s2).unwrap().max_value();
                let c = sample_psi(&p, big, s1).unwrap().max_value();
                [(a - b).abs(), c - a]
            })
            .collect();
        let gaps: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let growth: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let (g_mean, g_se) = mean_se(&gaps);
        let (d_mean, d_se) = mean_se(&growth);
        let slack = MC_Z * (g_se * g_se + 4.0 * d_se * d_se).sqrt();
        assert!(
            g_mean <= 2.0 * d_mean + slack,
            "copy gap {g_mean} vs doubling bound {}",
            2.0 * d_mean
        );
    }

    #[test]
    fn truncated_walk_keeps_direction_strings_stable() {
        assert_eq!(Direction::Upper.to_string(), "upper");
        assert_eq!(Direction::MeanLower.to_string(), "mean-lower");
        assert_eq!("mean-upper".parse::<Direction>().unwrap(), Direction::MeanUpper);
        assert!("sideways".parse::<Direction>().is_err());
        let spec = build_lower_coupling(&StepProfile::uniform(), 4, None).unwrap();
        let js = serde_json::to_string(&spec).unwrap();
        assert!(js.contains("\"direction\":\"lower\""));
    }

    #[test]
    fn truncation_shrinks_walk_increments() {
        // sanity that the mean-lower gate really is about truncation depth:
        // deeper cuts only help
        let p = StepProfile::uniform();
        let gsb = GridSize::new(3);
        let c0 = cov_mibrw(&p, gsb, 0).unwrap();
        let c2 = cov_mibrw(&p, gsb, 2).unwrap();
        let v = Vertex::new(1, 1);
        let w = Vertex::new(5, 2);
        assert!(c2.rho(v, w) <= c0.rho(v, w) + 1e-12);
        let s = sample_mibrw(&p, gsb, 2, 9).unwrap();
        assert_eq!(s.k0, 2);
    }
}
