//! Exact covariances for every field kind plus the numerical verification
//! of the covariance-comparison lemmas (the four-part estimate linking the
//! branching walks to the DGFF/ψ, and the scale-increment orthogonality).

use crate::green::{green_matrix, green_submatrix, MAX_DENSE_SIDE, MAX_SOLVE_SIDE};
use crate::lattice::{
    log2_plus, scale_box, torus_dist_l2, GridSize, Vertex,
};
use crate::profile::StepProfile;
use crate::psi::psi_map;
use crate::rng::{self, tag};
use crate::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::LN_2;

/// Default relative slope threshold for boundedness verdicts.
pub const SLOPE_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Bounded,
    Growing,
}

/// One deviation sweep: sup deviation per grid exponent and the
/// least-squares growth verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviationSeries {
    pub item: String,
    pub deviations: BTreeMap<u32, f64>,
    pub slope: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub lemma: String,
    pub items: Vec<DeviationSeries>,
}

impl CovarianceReport {
    pub fn all_bounded(&self) -> bool {
        self.items.iter().all(|s| s.verdict == Verdict::Bounded)
    }

    pub fn item(&self, name: &str) -> Option<&DeviationSeries> {
        self.items.iter().find(|s| s.item == name)
    }
}

/// Least-squares slope of deviation against n; "bounded" means the slope
/// stays below `rel` times the deviation scale (a finite sweep can only
/// test non-growth, not existence of the constant).
pub fn bounded_verdict(deviations: &BTreeMap<u32, f64>, rel: f64) -> DeviationSeries {
    let m = deviations.len() as f64;
    let scale = deviations.values().cloned().fold(0.0f64, f64::max).max(1e-12);
    let threshold = rel * scale;
    let (slope, verdict) = if deviations.len() < 2 {
        (0.0, Verdict::Bounded)
    } else {
        let mx = deviations.keys().map(|&n| n as f64).sum::<f64>() / m;
        let my = deviations.values().sum::<f64>() / m;
        let sxy: f64 =
            deviations.iter().map(|(&n, &d)| (n as f64 - mx) * (d - my)).sum();
        let sxx: f64 = deviations.keys().map(|&n| (n as f64 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        (slope, if slope < threshold { Verdict::Bounded } else { Verdict::Growing })
    };
    DeviationSeries { item: String::new(), deviations: deviations.clone(), slope, threshold, verdict }
}

fn series(item: &str, deviations: BTreeMap<u32, f64>) -> DeviationSeries {
    DeviationSeries { item: item.to_string(), ..bounded_verdict(&deviations, SLOPE_THRESHOLD) }
}

/// Merge single-n reports of the same shape into one sweep per item.
pub fn merge_reports(lemma: &str, reports: &[CovarianceReport]) -> CovarianceReport {
    let mut by_item: BTreeMap<String, BTreeMap<u32, f64>> = BTreeMap::new();
    for r in reports {
        for s in &r.items {
            by_item.entry(s.item.clone()).or_default().extend(&s.deviations);
        }
    }
    CovarianceReport {
        lemma: lemma.to_string(),
        items: by_item.into_iter().map(|(item, d)| series(&item, d)).collect(),
    }
}

/// Unordered vertex-index pairs (with diagonal), seeded-subsampled above
/// `cap` so sweeps stay reproducible and affordable.
pub(crate) fn sample_pairs(
    universe: usize,
    cap: usize,
    seed: u64,
    salt: u64,
) -> Vec<(usize, usize)> {
    let total = universe * (universe + 1) / 2;
    if total <= cap {
        let mut pairs = Vec::with_capacity(total);
        for i in 0..universe {
            for j in i..universe {
                pairs.push((i, j));
            }
        }
        return pairs;
    }
    let mut rng = rng::stream(seed, &[tag::PAIR_SUBSAMPLE, salt]);
    (0..cap)
        .map(|_| {
            let i = rng.gen_range(0..universe);
            let j = rng.gen_range(0..universe);
            (i.min(j), i.max(j))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// closed-form branching-walk covariances

/// Covariance evaluator for the dyadic-partition walk at time `t`:
/// `E[R_v R_w] = log2 · Σ σ̃²((n−k)/n)` over shared-cell levels `k ≥ n−t`.
pub struct IbrwCov {
    gs: GridSize,
    t: u32,
    /// `σ̃²((n−k)/n)` for k = 0..=n.
    sq: Vec<f64>,
}

pub fn cov_ibrw(tilde: &StepProfile, gs: GridSize, t: u32) -> Result<IbrwCov> {
    let n = gs.n;
    if t > n {
        return Err(Error::range(format!("time t={t} outside 0..={n}")));
    }
    let sq = (0..=n).map(|k| tilde.sq_at((n - k) as f64 / n as f64)).collect();
    Ok(IbrwCov { gs, t, sq })
}

impl IbrwCov {
    pub fn cov(&self, v: Vertex, w: Vertex) -> f64 {
        let n = self.gs.n;
        let mut acc = 0.0;
        for k in (n - self.t)..=n {
            if (v.x >> k, v.y >> k) == (w.x >> k, w.y >> k) {
                acc += self.sq[k as usize];
            }
        }
        LN_2 * acc
    }

    pub fn var(&self) -> f64 {
        let n = self.gs.n;
        LN_2 * ((n - self.t)..=n).map(|k| self.sq[k as usize]).sum::<f64>()
    }
}

/// Covariance evaluator for the torus-averaged walk `S^{N,k0}`. Levels below
/// the truncation (or without a window covering both vertices) drop out:
/// `E[S_v S_w] = Σ_{k ≥ k0} 2^{−2k} σ²((n−k)/n) · #{windows covering v and w}`.
pub struct MibrwCov {
    gs: GridSize,
    k0: u32,
    sq: Vec<f64>,
}

pub fn cov_mibrw(p: &StepProfile, gs: GridSize, k0: u32) -> Result<MibrwCov> {
    let n = gs.n;
    if k0 > n {
        return Err(Error::range(format!("truncation k0={k0} outside 0..={n}")));
    }
    let sq = (0..=n).map(|k| p.sq_at((n - k) as f64 / n as f64)).collect();
    Ok(MibrwCov { gs, k0, sq })
}

impl MibrwCov {
    /// Exact sampler covariance (window counts identified modulo the torus).
    pub fn cov(&self, v: Vertex, w: Vertex) -> f64 {
        (self.k0..=self.gs.n)
            .map(|k| {
                let count =
                    crate::lattice::exact_shared_box_count(self.gs, k, v, w).expect("k <= n");
                self.sq[k as usize] * count as f64 / (1u64 << (2 * k)) as f64
            })
            .sum()
    }

    /// The first-order covariance formula `Σ 2^{−2k}σ²·(2^k−r₁)₊(2^k−r₂)₊`;
    /// differs from [`Self::cov`] only at levels whose windows wrap.
    pub fn first_order_cov(&self, v: Vertex, w: Vertex) -> f64 {
        (self.k0..=self.gs.n)
            .map(|k| {
                let count = crate::lattice::common_box_count(self.gs, k, v, w).expect("k <= n");
                self.sq[k as usize] * count as f64 / (1u64 << (2 * k)) as f64
            })
            .sum()
    }

    /// Var is vertex-independent: one σ² summand per retained level.
    pub fn var(&self) -> f64 {
        (self.k0..=self.gs.n).map(|k| self.sq[k as usize]).sum()
    }

    /// `ρ_{N,k0}(v,w) = E[(S_v − S_w)²]`, assembled per level.
    pub fn rho(&self, v: Vertex, w: Vertex) -> f64 {
        (self.k0..=self.gs.n)
            .map(|k| {
                let shared =
                    crate::lattice::exact_shared_box_count(self.gs, k, v, w).expect("k <= n");
                let all = 1i64 << (2 * k);
                2.0 * self.sq[k as usize] * (all - shared) as f64 / all as f64
            })
            .sum()
    }
}

// ---------------------------------------------------------------------------
// exact ψ covariance

/// Exact covariance matrix of ψ over the interior of `V_N`: the scale-mixing
/// map applied to the Green matrix on both sides, `A G Aᵀ` (symmetrised).
pub fn cov_psi(p: &StepProfile, gs: GridSize) -> Result<DMatrix<f64>> {
    let g = green_matrix(gs.rect())?;
    let map = psi_map(p, gs)?;
    let ag = map.a.mul_dense(g.matrix());
    let mut c = map.a.mul_dense_right_t(&ag);
    let ct = c.transpose();
    c += &ct;
    c.scale_mut(0.5);
    Ok(c)
}

// ---------------------------------------------------------------------------
// the four-part covariance comparison

const PAIR_CAP: usize = 10_000;
/// Source cap for windowed Green solves on grids past the dense limit.
const SOLVE_POOL: usize = 160;

fn window_vertices(n: u32) -> Vec<Vertex> {
    let nn = 1i64 << n;
    let mut verts = Vec::with_capacity((nn * nn) as usize);
    for y in 0..nn {
        for x in 0..nn {
            verts.push(Vertex::new(2 * nn + x, 2 * nn + y));
        }
    }
    verts
}

fn seeded_pool(verts: &[Vertex], cap: usize, seed: u64, salt: u64) -> Vec<Vertex> {
    if verts.len() <= cap {
        return verts.to_vec();
    }
    let mut rng = rng::stream(seed, &[tag::PAIR_SUBSAMPLE, salt, 0x706f_6f6c]);
    let mut idx: Vec<usize> = (0..verts.len()).collect();
    for i in 0..cap {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..cap].iter().map(|&i| verts[i]).collect()
}

/// Sup deviations for the four covariance-comparison estimates, per grid
/// exponent in `ns`:
///  i. homogeneous walk vs `n − log₂₊ d^N`;
///  ii. profile walk vs `n·I((n − log₂₊ d^N)/n)`;
///  iii. DGFF on the centred `V_N + (2N,2N)` window of `V_{4N}` vs
///       `log2·(n − log₂₊‖v−w‖₂)`;
///  iv. ψ on that window vs `log2·E[S^N_v S^N_w]` (grids within the dense
///      limit for the 4N-sized ψ matrix only).
pub fn verify_cov_comp(p: &StepProfile, ns: &[u32], seed: u64) -> Result<CovarianceReport> {
    let mut dev_i = BTreeMap::new();
    let mut dev_ii = BTreeMap::new();
    let mut dev_iii = BTreeMap::new();
    let mut dev_iv = BTreeMap::new();
    let uniform = StepProfile::uniform();

    for &n in ns {
        let gs = GridSize::new(n);
        let nf = n as f64;
        let homog = cov_mibrw(&uniform, gs, 0)?;
        let inhom = cov_mibrw(p, gs, 0)?;
        let verts: Vec<Vertex> = gs.vertices().collect();
        let mut sup_i = 0.0f64;
        let mut sup_ii = 0.0f64;
        for (a, b) in sample_pairs(verts.len(), PAIR_CAP, seed, n as u64) {
            let (v, w) = (verts[a], verts[b]);
            let d = torus_dist_l2(gs, v, w);
            let t1 = nf - log2_plus(d);
            sup_i = sup_i.max((homog.cov(v, w) - t1).abs());
            let t2 = nf * p.integrated_to((t1 / nf).clamp(0.0, 1.0))?;
            sup_ii = sup_ii.max((inhom.cov(v, w) - t2).abs());
        }
        dev_i.insert(n, sup_i);
        dev_ii.insert(n, sup_ii);

        // items iii/iv live on the embedded window of the 4N grid
        let big = GridSize::new(n + 2);
        let window = window_vertices(n);
        if big.side() <= MAX_DENSE_SIDE {
            let g = green_matrix(big.rect())?;
            let mut sup = 0.0f64;
            for (a, b) in sample_pairs(window.len(), PAIR_CAP, seed, 0x1000 + n as u64) {
                let (v, w) = (window[a], window[b]);
                let target = LN_2 * (nf - log2_plus(v.dist_l2(w)));
                sup = sup.max((g.value(v, w) - target).abs());
            }
            dev_iii.insert(n, sup);

            let cps = cov_psi(p, big)?;
            let inner = big.rect().interior().expect("4N grid has interior");
            let s_cov = cov_mibrw(p, gs, 0)?;
            let shift = 2 * gs.side();
            let mut sup = 0.0f64;
            for (a, b) in sample_pairs(window.len(), PAIR_CAP, seed, 0x2000 + n as u64) {
                let (x, y) = (window[a], window[b]);
                let (v, w) = (x.shift(-shift, -shift), y.shift(-shift, -shift));
                let lhs = cps[(
                    inner.index_of(x).expect("window is interior"),
                    inner.index_of(y).expect("window is interior"),
                )];
                sup = sup.max((lhs - LN_2 * s_cov.cov(v, w)).abs());
            }
            dev_iv.insert(n, sup);
        } else if big.side() <= MAX_SOLVE_SIDE {
            let pool = seeded_pool(&window, SOLVE_POOL, seed, n as u64);
            let g = green_submatrix(big.rect(), &pool)?;
            let mut sup = 0.0f64;
            for (a, b) in sample_pairs(pool.len(), PAIR_CAP, seed, 0x1000 + n as u64) {
                let (v, w) = (pool[a], pool[b]);
                let target = LN_2 * (nf - log2_plus(v.dist_l2(w)));
                sup = sup.max((g[(a, b)] - target).abs());
            }
            dev_iii.insert(n, sup);
        }
    }

    let mut items = vec![
        series("i: homogeneous walk vs n - log2+ d", dev_i),
        series("ii: walk vs n I((n - log2+ d)/n)", dev_ii),
        series("iii: DGFF window vs log2 (n - log2+ |v-w|)", dev_iii),
    ];
    if !dev_iv.is_empty() {
        items.push(series("iv: psi window vs log2 walk cov", dev_iv));
    }
    Ok(CovarianceReport { lemma: "covariance comparison".into(), items })
}

// ---------------------------------------------------------------------------
// scale-increment covariances (exact linear algebra)

/// Harmonic-measure functional of `[v]_λ` at `v`, restricted to the interior
/// of `V_N` (the boundary carries the zero field). `λ = 0` conditions on
/// `∂V_N` only and is the zero functional; a side-1 box is `v` itself.
fn scale_row(gs: GridSize, v: Vertex, lambda: f64) -> Result<Vec<(Vertex, f64)>> {
    if lambda == 0.0 {
        return Ok(Vec::new());
    }
    let sb = scale_box(gs, v, lambda)?;
    if sb.rect.interior().is_none() {
        return Ok(vec![(v, 1.0)]);
    }
    let inner = gs.rect().interior().expect("grid has interior");
    let row = crate::psi::center_row(sb.rect, v);
    Ok(row
        .iter()
        .map(|&(dx, dy, w)| (Vertex::new(sb.rect.lo.x + dx, sb.rect.lo.y + dy), w))
        .filter(|&(z, _)| inner.contains(z))
        .collect())
}

/// The increment functional `Δφ_v(λ_i) = φ_v(λ_i) − φ_v(λ_{i−1})` as a
/// sparse row over interior vertices.
fn increment_row(
    gs: GridSize,
    v: Vertex,
    lambda_hi: f64,
    lambda_lo: f64,
) -> Result<Vec<(Vertex, f64)>> {
    let mut acc: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    for (z, w) in scale_row(gs, v, lambda_hi)? {
        *acc.entry((z.x, z.y)).or_insert(0.0) += w;
    }
    for (z, w) in scale_row(gs, v, lambda_lo)? {
        *acc.entry((z.x, z.y)).or_insert(0.0) -= w;
    }
    Ok(acc
        .into_iter()
        .filter(|&(_, w)| w != 0.0)
        .map(|((x, y), w)| (Vertex::new(x, y), w))
        .collect())
}

fn functional_cov(
    g: &crate::green::GreenMatrix,
    ra: &[(Vertex, f64)],
    rb: &[(Vertex, f64)],
) -> f64 {
    let mut acc = 0.0;
    for &(z, a) in ra {
        for &(z2, b) in rb {
            acc += a * b * g.value(z, z2);
        }
    }
    acc
}

/// Largest scale index whose boxes for `v` and `w` still intersect
/// (0 = only the full grid).
pub fn branching_index(p: &StepProfile, gs: GridSize, v: Vertex, w: Vertex) -> Result<usize> {
    let mut b = 0;
    for (i, &l) in p.lambdas().iter().enumerate() {
        let bv = scale_box(gs, v, l)?;
        let bw = scale_box(gs, w, l)?;
        if bv.rect.intersects(&bw.rect) {
            b = i + 1;
        } else {
            break;
        }
    }
    Ok(b)
}

/// Exact scale-increment covariances `E[Δφ_v(λ_i) Δφ_w(λ_j)]` for pairs in
/// the δ-bulk whose branching index allows the scales. Reports, for one N:
/// the sup deviation from `Δλ_i log N` on the diagonal `i = j`, the sup
/// magnitude for adjacent scales `|i−j| = 1`, and the sup magnitude for
/// separated scales `|i−j| ≥ 2` (exactly zero whenever the outer box of one
/// increment avoids the support of the other).
pub fn verify_increment_lemma(
    p: &StepProfile,
    gs: GridSize,
    delta: f64,
    seed: u64,
) -> Result<CovarianceReport> {
    if !(0.0 < delta && delta < 0.5) {
        return Err(Error::HypothesisViolation(format!(
            "delta = {delta} outside (0, 1/2)"
        )));
    }
    let n = gs.n;
    let nn = gs.side() as f64;
    let mut failures = Vec::new();
    let min_gap = p
        .lambdas()
        .iter()
        .scan(0.0, |prev, &l| {
            let d = l - *prev;
            *prev = l;
            Some(d)
        })
        .fold(f64::INFINITY, f64::min);
    if nn < 2f64.powf(2.0 / min_gap) {
        failures.push(format!(
            "smallest scale increment {min_gap} needs N >= 2^{:.2}",
            2.0 / min_gap
        ));
    }
    if nn.powf(p.lambdas()[0]) <= 1.0 / delta {
        failures.push(format!(
            "N^lambda_1 = {:.3} does not exceed 1/delta = {:.3}",
            nn.powf(p.lambdas()[0]),
            1.0 / delta
        ));
    }
    if gs.side() > MAX_DENSE_SIDE {
        failures.push(format!(
            "grid side {} exceeds the dense Green limit {MAX_DENSE_SIDE}",
            gs.side()
        ));
    }
    if !failures.is_empty() {
        return Err(Error::HypothesisViolation(failures.join("; ")));
    }

    let g = green_matrix(gs.rect())?;
    let bulk = gs.inner_vertices(delta);
    if bulk.is_empty() {
        return Err(Error::HypothesisViolation(format!(
            "delta-bulk of V_{} at delta = {delta} is empty",
            gs.side()
        )));
    }
    let pairs = sample_pairs(bulk.len(), 300, seed, n as u64);
    let lambdas = p.lambdas();
    let log_n = nn.ln();

    let mut sup_diag = 0.0f64;
    let mut sup_adjacent = 0.0f64;
    let mut sup_far = 0.0f64;
    let mut sup_exact_zero = 0.0f64;
    for (a, b) in pairs {
        let (v, w) = (bulk[a], bulk[b]);
        let bidx = branching_index(p, gs, v, w)?;
        if bidx == 0 {
            continue;
        }
        let rows_v: Vec<_> = (1..=bidx)
            .map(|i| increment_row(gs, v, lambdas[i - 1], if i >= 2 { lambdas[i - 2] } else { 0.0 }))
            .collect::<Result<_>>()?;
        let rows_w: Vec<_> = (1..=bidx)
            .map(|j| increment_row(gs, w, lambdas[j - 1], if j >= 2 { lambdas[j - 2] } else { 0.0 }))
            .collect::<Result<_>>()?;
        for i in 1..=bidx {
            for j in 1..=bidx {
                let c = functional_cov(&g, &rows_v[i - 1], &rows_w[j - 1]);
                if i == j {
                    let gap = lambdas[i - 1] - if i >= 2 { lambdas[i - 2] } else { 0.0 };
                    sup_diag = sup_diag.max((c - gap * log_n).abs());
                } else if i.abs_diff(j) == 1 {
                    sup_adjacent = sup_adjacent.max(c.abs());
                } else {
                    sup_far = sup_far.max(c.abs());
                    // orthogonality is exact when the support of one
                    // functional avoids the open outer box of the other
                    let (outer_v, rows) = if i > j {
                        (scale_box(gs, v, lambdas[i - 2])?, &rows_w[j - 1])
                    } else {
                        (scale_box(gs, w, lambdas[j - 2])?, &rows_v[i - 1])
                    };
                    if let Some(int) = outer_v.rect.interior() {
                        if rows.iter().all(|&(z, _)| !int.contains(z)) {
                            sup_exact_zero = sup_exact_zero.max(c.abs());
                        }
                    }
                }
            }
        }
    }

    let one = |v: f64| BTreeMap::from([(n, v)]);
    Ok(CovarianceReport {
        lemma: "scale-increment covariance".into(),
        items: vec![
            series("diag: |cov - dlambda log N|", one(sup_diag)),
            series("adjacent scales: |cov|", one(sup_adjacent)),
            series("separated scales: |cov|", one(sup_far)),
            series("separated, disjoint boxes: |cov|", one(sup_exact_zero)),
        ],
    })
}
