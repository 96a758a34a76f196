//! Path events for near-maximal walk trajectories: per-piece increment
//! windows around the centring, a concave tube confining the interior path,
//! the counter `h` of window vertices realising the event, its first and
//! second moments, and the Paley–Zygmund lower bound they imply.

use crate::compare::MC_Z;
use crate::error::Error;
use crate::lattice::{self, GridSize, Rect, Vertex};
use crate::profile::{self, StepProfile};
use crate::rng::{self, tag};
use crate::sampler::{self, FieldSample};
use crate::stats::mean_se;
use crate::Result;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentMethod {
    MonteCarlo,
    SemiAnalytic,
    BruteForce,
}

impl std::fmt::Display for MomentMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MomentMethod::MonteCarlo => "monte-carlo",
            MomentMethod::SemiAnalytic => "semi-analytic",
            MomentMethod::BruteForce => "brute-force",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MomentMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monte-carlo" => Ok(MomentMethod::MonteCarlo),
            "semi-analytic" => Ok(MomentMethod::SemiAnalytic),
            "brute-force" => Ok(MomentMethod::BruteForce),
            other => Err(Error::domain(format!("unknown moment method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentEstimate {
    pub value: f64,
    pub se: f64,
    pub method: MomentMethod,
}

/// Event geometry for one `(profile, n, y, cf)` choice. The derived fields
/// are plain data and may be edited before use (tests build nested interval
/// families this way); `path_event` takes them at face value.
#[derive(Debug, Clone, Serialize)]
pub struct PathEventSpec {
    pub profile: StepProfile,
    pub n: u32,
    pub y: f64,
    pub cf: f64,
    /// Integer scale points `t^1 < ... < t^m = n` of the effective pieces.
    pub t_points: Vec<u32>,
    /// Per-piece windows for the increments `S(t^i) - S(t^{i-1})`; only the
    /// first carries the `y` shift.
    pub intervals: Vec<(f64, f64)>,
    /// Centred inner window of `(N/2)^2` vertices the counter ranges over.
    pub window: Rect,
    /// Tube half-widths by absolute level `0..=n`.
    pub half_widths: Vec<f64>,
    /// Per-level walk variances `sigma^2(j/n)` by absolute level `0..=n`.
    pub level_vars: Vec<f64>,
}

pub fn path_event_spec(p: &StepProfile, n: u32, y: f64, cf: f64) -> Result<PathEventSpec> {
    if !(y >= 0.0) {
        return Err(Error::range(format!("shift y={y} must be nonnegative")));
    }
    if n < 2 {
        return Err(Error::domain("inner window needs n >= 2"));
    }
    let eff = profile::effective_profile(p)?;
    let nf = n as f64;
    let t_points: Vec<u32> =
        (1..=eff.m()).map(|j| (eff.bar_lambdas[j] * nf).round() as u32).collect();
    if t_points[0] == 0 || t_points.windows(2).any(|w| w[0] >= w[1]) || *t_points.last().unwrap() != n
    {
        return Err(Error::ConstructionInvalid {
            guarantee: format!(
                "integer scale points {t_points:?} must increase strictly from >= 1 to n={n}"
            ),
        });
    }
    let mut intervals = Vec::with_capacity(t_points.len());
    let mut prev = 0.0;
    for (i, &t) in t_points.iter().enumerate() {
        let here = eff.centring(nf, t as f64)?;
        let top = here - prev + if i == 0 { y } else { 0.0 };
        intervals.push((top - 1.0, top));
        prev = here;
    }
    let q = 1i64 << (n - 2);
    let window = Rect::new(Vertex::new(q, q), Vertex::new(3 * q - 1, 3 * q - 1));
    let half_widths = (0..=n)
        .map(|j| profile::barrier(p, nf, j as f64, cf))
        .collect::<Result<Vec<_>>>()?;
    let level_vars = (0..=n).map(|j| p.sq_at(j as f64 / nf)).collect();
    Ok(PathEventSpec {
        profile: p.clone(),
        n,
        y,
        cf,
        t_points,
        intervals,
        window,
        half_widths,
        level_vars,
    })
}

/// `cum[j] =` variance of the walk at time j (levels `0..=j` summed).
fn cum_vars(spec: &PathEventSpec) -> Vec<f64> {
    let mut acc = 0.0;
    spec.level_vars
        .iter()
        .map(|&v| {
            acc += v;
            acc
        })
        .collect()
}

fn walk_levels<'a>(sample: &'a FieldSample, spec: &PathEventSpec) -> Result<&'a [Vec<f64>]> {
    if sample.gs.n != spec.n {
        return Err(Error::domain(format!(
            "sample grid n={} does not match spec n={}",
            sample.gs.n, spec.n
        )));
    }
    if sample.k0 != 0 {
        return Err(Error::domain("path events need an untruncated walk (k0 = 0)"));
    }
    sample
        .levels
        .as_deref()
        .ok_or_else(|| Error::domain("sample does not retain per-level fields"))
}

/// All constraints of the event at one vertex, restricted to levels `<= r`
/// (piece endpoints and tube levels alike; the endpoint level is included).
/// Tube centres use the exact per-level variance ratios, which makes the
/// within-piece bridge independent of the realised increments.
fn event_at(
    levels: &[Vec<f64>],
    idx: usize,
    spec: &PathEventSpec,
    cum: &[f64],
    r: u32,
    path: &mut Vec<f64>,
) -> bool {
    let n = spec.n as usize;
    path.clear();
    let mut acc = 0.0;
    for j in 0..=n {
        acc += levels[n - j][idx];
        path.push(acc);
    }
    let mut prev = 0usize;
    for (i, &tp) in spec.t_points.iter().enumerate() {
        let t = tp as usize;
        let (anchor, vlo) = if prev == 0 { (0.0, 0.0) } else { (path[prev], cum[prev]) };
        let delta = path[t] - anchor;
        if tp <= r {
            let (lo, hi) = spec.intervals[i];
            if !(lo <= delta && delta <= hi) {
                return false;
            }
        }
        let span = cum[t] - vlo;
        for j in (prev + 1)..t {
            if j as u32 > r {
                break;
            }
            let rho = (cum[j] - vlo) / span;
            if (path[j] - anchor - rho * delta).abs() > spec.half_widths[j] {
                return false;
            }
        }
        prev = t;
    }
    true
}

/// Does the sampled path at `v` satisfy every constraint up to level `r`?
pub fn path_event(sample: &FieldSample, v: Vertex, spec: &PathEventSpec, r: u32) -> Result<bool> {
    let levels = walk_levels(sample, spec)?;
    if !sample.gs.contains(v) {
        return Err(Error::domain(format!("vertex {v:?} outside the grid")));
    }
    let cum = cum_vars(spec);
    let mut path = Vec::new();
    Ok(event_at(levels, sample.gs.index_of(v), spec, &cum, r, &mut path))
}

/// Number of window vertices whose event up to `r` holds on this sample.
pub fn count_path_events(sample: &FieldSample, spec: &PathEventSpec, r: u32) -> Result<u64> {
    let levels = walk_levels(sample, spec)?;
    let cum = cum_vars(spec);
    let mut path = Vec::new();
    let mut hits = 0;
    for v in spec.window.vertices() {
        if event_at(levels, sample.gs.index_of(v), spec, &cum, r, &mut path) {
            hits += 1;
        }
    }
    Ok(hits)
}

fn hit_list(levels: &[Vec<f64>], gs: GridSize, spec: &PathEventSpec, cum: &[f64]) -> Vec<Vertex> {
    let mut path = Vec::new();
    spec.window
        .vertices()
        .filter(|&v| event_at(levels, gs.index_of(v), spec, cum, spec.n, &mut path))
        .collect()
}

/// Per-replicate hit lists over a fresh walk pool.
fn mc_pool(spec: &PathEventSpec, replicates: usize, seed: u64) -> Result<Vec<Vec<Vertex>>> {
    if replicates == 0 {
        return Err(Error::domain("need at least one replicate"));
    }
    let gs = GridSize::new(spec.n);
    let cum = cum_vars(spec);
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let s = sampler::sample_mibrw(&spec.profile, gs, 0, rng::replicate_seed(seed, r as u64))?;
            let levels = s.levels.as_deref().expect("untruncated walks retain levels");
            Ok(hit_list(levels, gs, spec, &cum))
        })
        .collect()
}

fn single_piece(spec: &PathEventSpec) -> Result<()> {
    if spec.t_points.len() != 1 {
        return Err(Error::MethodUnsupported(
            "closed-form endpoint factor covers single-piece effective profiles only".into(),
        ));
    }
    Ok(())
}

/// Simulate the conditioned within-piece bridge and return the fraction
/// staying inside the tube, with its binomial error. By construction the
/// bridge law does not depend on the endpoint value, so no endpoint is drawn.
fn piece_bridge_mc(
    spec: &PathEventSpec,
    cum: &[f64],
    piece: usize,
    replicates: usize,
    seed: u64,
) -> (f64, f64) {
    let lo_t = if piece == 0 { 0 } else { spec.t_points[piece - 1] as usize };
    let hi_t = spec.t_points[piece] as usize;
    if hi_t - lo_t < 2 {
        return (1.0, 0.0);
    }
    let vhi = cum[hi_t];
    let mut rng = rng::stream(seed, &[tag::WALK, piece as u64]);
    let mut ok = 0u64;
    for _ in 0..replicates {
        let mut b = 0.0;
        let mut vprev = if piece == 0 { 0.0 } else { cum[lo_t] };
        let mut inside = true;
        for j in (lo_t + 1)..hi_t {
            // piece 0 anchors at the deterministic origin, so its first step
            // carries the level-0 variance too: inject cum[j] - vprev, not
            // level_vars[j] (they agree from the second step on).
            let s2 = cum[j] - vprev;
            let w = s2 / (vhi - vprev);
            let q = s2 * (vhi - cum[j]) / (vhi - vprev);
            b = (1.0 - w) * b + q.sqrt() * rng.sample::<f64, _>(StandardNormal);
            vprev = cum[j];
            if b.abs() > spec.half_widths[j] {
                inside = false;
                break;
            }
        }
        if inside {
            ok += 1;
        }
    }
    let p = ok as f64 / replicates as f64;
    (p, (p * (1.0 - p) / replicates as f64).sqrt())
}

/// Probability that the conditioned walk keeps to the tube on every piece.
/// Pieces are independent, so their probabilities multiply.
pub fn tube_probability(
    spec: &PathEventSpec,
    replicates: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    if replicates == 0 {
        return Err(Error::domain("need at least one replicate"));
    }
    let cum = cum_vars(spec);
    let mut value = 1.0;
    let mut rel2 = 0.0;
    for piece in 0..spec.t_points.len() {
        let (p, se) = piece_bridge_mc(spec, &cum, piece, replicates, seed);
        if p == 0.0 {
            return Ok(MomentEstimate { value: 0.0, se: 0.0, method: MomentMethod::MonteCarlo });
        }
        value *= p;
        rel2 += (se / p).powi(2);
    }
    Ok(MomentEstimate { value, se: value * rel2.sqrt(), method: MomentMethod::MonteCarlo })
}

/// Smallest amplitude in {1, 2, 4, 8} whose tube keeps at least half of the
/// conditioned paths at this `n`.
pub fn calibrate_cf(p: &StepProfile, n: u32, replicates: usize, seed: u64) -> Result<f64> {
    for cf in [1.0, 2.0, 4.0, 8.0] {
        let spec = path_event_spec(p, n, 0.0, cf)?;
        if tube_probability(&spec, replicates, seed)?.value >= 0.5 {
            return Ok(cf);
        }
    }
    Err(Error::ConstructionInvalid {
        guarantee: "no amplitude in {1, 2, 4, 8} keeps half the paths inside the tube".into(),
    })
}

/// Deterministic tube probability for a single piece spanning the whole
/// walk: propagate the bridge density level by level on a fixed grid,
/// zeroing mass outside the tube. Every level in the recursion is
/// constrained, so the grid only needs to span the widest tube section.
fn bridge_probability_grid(spec: &PathEventSpec, cum: &[f64]) -> f64 {
    let n = spec.n as usize;
    if n < 2 {
        return 1.0;
    }
    let vn = cum[n];
    let fmax = spec.half_widths[1..n].iter().copied().fold(0.0f64, f64::max);
    if fmax <= 0.0 {
        return 0.0;
    }
    const G: usize = 601;
    let du = 2.0 * fmax / (G - 1) as f64;
    let grid: Vec<f64> = (0..G).map(|i| -fmax + i as f64 * du).collect();
    let var1 = cum[1] * (vn - cum[1]) / vn;
    let mut dens: Vec<f64> = grid
        .iter()
        .map(|&b| {
            if b.abs() > spec.half_widths[1] {
                0.0
            } else {
                (-b * b / (2.0 * var1)).exp() / (2.0 * std::f64::consts::PI * var1).sqrt()
            }
        })
        .collect();
    let mut vprev = cum[1];
    for j in 2..n {
        let s2 = spec.level_vars[j];
        let w = 1.0 - s2 / (vn - vprev);
        let q = s2 * (vn - cum[j]) / (vn - vprev);
        let inv = du / (2.0 * std::f64::consts::PI * q).sqrt();
        let next: Vec<f64> = grid
            .iter()
            .map(|&b| {
                if b.abs() > spec.half_widths[j] {
                    return 0.0;
                }
                let mut acc = 0.0;
                for (ai, &a) in grid.iter().enumerate() {
                    let d = dens[ai];
                    if d > 0.0 {
                        let z = b - w * a;
                        acc += d * (-z * z / (2.0 * q)).exp();
                    }
                }
                acc * inv
            })
            .collect();
        dens = next;
        vprev = cum[j];
    }
    dens.iter().sum::<f64>() * du
}

/// Exact Gaussian weight of the first-piece increment window.
fn endpoint_probability(spec: &PathEventSpec, cum: &[f64]) -> f64 {
    let sd = cum[spec.t_points[0] as usize].sqrt();
    let (lo, hi) = spec.intervals[0];
    rng::normal_cdf(hi / sd) - rng::normal_cdf(lo / sd)
}

/// `E[h]`: the expected number of window vertices realising the event.
///
/// Monte Carlo averages the counter over fresh walk pools. The other two
/// methods use the factorisation `|window| * P(endpoint) * P(tube)` — exact
/// for a single effective piece because the per-vertex walk has independent
/// level increments — and differ only in how the tube factor is computed
/// (bridge simulation vs. deterministic density recursion).
pub fn first_moment(
    spec: &PathEventSpec,
    method: MomentMethod,
    replicates: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    match method {
        MomentMethod::MonteCarlo => {
            let pool = mc_pool(spec, replicates, seed)?;
            let hs: Vec<f64> = pool.iter().map(|l| l.len() as f64).collect();
            let (value, se) = mean_se(&hs);
            Ok(MomentEstimate { value, se, method })
        }
        MomentMethod::SemiAnalytic => {
            single_piece(spec)?;
            if replicates == 0 {
                return Err(Error::domain("need at least one replicate"));
            }
            let cum = cum_vars(spec);
            let scale = spec.window.vertex_count() as f64 * endpoint_probability(spec, &cum);
            let (p_tube, se_tube) = piece_bridge_mc(spec, &cum, 0, replicates, seed);
            Ok(MomentEstimate { value: scale * p_tube, se: scale * se_tube, method })
        }
        MomentMethod::BruteForce => {
            single_piece(spec)?;
            let cum = cum_vars(spec);
            let scale = spec.window.vertex_count() as f64 * endpoint_probability(spec, &cum);
            Ok(MomentEstimate { value: scale * bridge_probability_grid(spec, &cum), se: 0.0, method })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StratumRow {
    /// Shared-scale count of a vertex pair (`n` on the diagonal).
    pub r: u32,
    /// Mean ordered hit pairs per replicate at this count.
    pub pairs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SecondMomentReport {
    pub first: MomentEstimate,
    pub second: MomentEstimate,
    /// Excess-pair coefficient `c` in `E[h^2] = E[h]^2 + (1 + c) E[h]`;
    /// absent when no event was hit.
    pub c_tilde: Option<f64>,
    /// Decomposition of `E[h^2]` over shared-scale counts; sums to the
    /// second-moment estimate.
    pub strata: Vec<StratumRow>,
}

/// `E[h^2]` with its decomposition over the shared-scale count of hit
/// pairs. Monte Carlo only: pair correlations have no closed form here.
pub fn second_moment(
    spec: &PathEventSpec,
    method: MomentMethod,
    replicates: usize,
    seed: u64,
) -> Result<SecondMomentReport> {
    if method != MomentMethod::MonteCarlo {
        return Err(Error::MethodUnsupported(
            "second moment is estimated by Monte Carlo only".into(),
        ));
    }
    let pool = mc_pool(spec, replicates, seed)?;
    let gs = GridSize::new(spec.n);
    let mut strata = vec![0.0f64; spec.n as usize + 1];
    for hits in &pool {
        for &v in hits {
            for &w in hits {
                strata[lattice::shared_scale_count(gs, v, w) as usize] += 1.0;
            }
        }
    }
    let hs: Vec<f64> = pool.iter().map(|l| l.len() as f64).collect();
    let sq: Vec<f64> = hs.iter().map(|h| h * h).collect();
    let (m1, se1) = mean_se(&hs);
    let (m2, se2) = mean_se(&sq);
    Ok(SecondMomentReport {
        first: MomentEstimate { value: m1, se: se1, method },
        second: MomentEstimate { value: m2, se: se2, method },
        c_tilde: (m1 > 0.0).then(|| (m2 - m1 * m1 - m1) / m1),
        strata: strata
            .iter()
            .enumerate()
            .map(|(r, &p)| StratumRow { r: r as u32, pairs: p / replicates as f64 })
            .collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PzReport {
    /// `E[h]^2 / E[h^2]`, a lower bound for `P(h >= 1)`.
    pub bound: f64,
    pub bound_se: f64,
    /// Direct tail frequency `P(max > M*(n) + y)` from the same pool.
    pub direct: f64,
    pub direct_se: f64,
    pub first: f64,
    pub second: f64,
    /// Bound below the direct estimate within combined Monte Carlo error.
    pub satisfied: bool,
}

/// Paley–Zygmund bound from one pool: the squared first moment over the
/// second, checked against the direct tail of the pooled walk maxima.
pub fn paley_zygmund_bound(
    spec: &PathEventSpec,
    replicates: usize,
    seed: u64,
) -> Result<PzReport> {
    if replicates == 0 {
        return Err(Error::domain("need at least one replicate"));
    }
    let gs = GridSize::new(spec.n);
    let cum = cum_vars(spec);
    let threshold =
        profile::mibrw_centring(&spec.profile, spec.n as f64, spec.n as f64)? + spec.y;
    let per_rep: Vec<(f64, bool)> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<(f64, bool)> {
            let s =
                sampler::sample_mibrw(&spec.profile, gs, 0, rng::replicate_seed(seed, r as u64))?;
            let levels = s.levels.as_deref().expect("untruncated walks retain levels");
            let h = hit_list(levels, gs, spec, &cum).len() as f64;
            Ok((h, s.max_value() > threshold))
        })
        .collect::<Result<Vec<_>>>()?;
    let hs: Vec<f64> = per_rep.iter().map(|&(h, _)| h).collect();
    let sq: Vec<f64> = hs.iter().map(|h| h * h).collect();
    let (m1, _) = mean_se(&hs);
    if m1 == 0.0 {
        return Err(Error::ZeroFirstMoment);
    }
    let (m2, _) = mean_se(&sq);
    let rf = replicates as f64;
    let mut var1 = 0.0;
    let mut var2 = 0.0;
    let mut cov = 0.0;
    for (&h, &q) in hs.iter().zip(&sq) {
        var1 += (h - m1) * (h - m1);
        var2 += (q - m2) * (q - m2);
        cov += (h - m1) * (q - m2);
    }
    let denom = rf * (rf - 1.0).max(1.0);
    (var1, var2, cov) = (var1 / denom, var2 / denom, cov / denom);
    let g1 = 2.0 * m1 / m2;
    let g2 = -m1 * m1 / (m2 * m2);
    let bound_se = (g1 * g1 * var1 + g2 * g2 * var2 + 2.0 * g1 * g2 * cov).max(0.0).sqrt();
    let tail = per_rep.iter().filter(|&&(_, t)| t).count() as f64;
    let direct = tail / rf;
    let direct_se = (direct * (1.0 - direct) / rf).sqrt();
    let bound = m1 * m1 / m2;
    Ok(PzReport {
        bound,
        bound_se,
        direct,
        direct_se,
        first: m1,
        second: m2,
        satisfied: bound <= direct + MC_Z * (bound_se + direct_se),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_scale() -> StepProfile {
        StepProfile::new(vec![1.2, 0.8], vec![0.5, 1.0]).unwrap()
    }

    fn convex() -> StepProfile {
        StepProfile::new(vec![0.8, 1.2], vec![0.5, 1.0]).unwrap()
    }

    #[test]
    fn spec_geometry_is_consistent() {
        let p = two_scale();
        let y = 0.7;
        let spec = path_event_spec(&p, 8, y, 2.0).unwrap();
        assert_eq!(spec.t_points, vec![4, 8]);
        for &(lo, hi) in &spec.intervals {
            assert_relative_eq!(hi - lo, 1.0, epsilon = 1e-12);
        }
        let eff = profile::effective_profile(&p).unwrap();
        let tops: f64 = spec.intervals.iter().map(|&(_, hi)| hi).sum();
        assert_relative_eq!(tops, eff.centring(8.0, 8.0).unwrap() + y, epsilon = 1e-12);
        assert_eq!(spec.window, Rect::new(Vertex::new(64, 64), Vertex::new(191, 191)));
        assert_eq!(spec.window.vertex_count(), 128 * 128);
        // tent rises over each effective piece and resets just past the
        // breakpoint; the stored widths at the breakpoints themselves are
        // never consulted (the endpoint interval applies there)
        assert!(spec.half_widths[0].abs() < 1e-12);
        let i1 = p.integrated(0.0, 0.5).unwrap();
        assert_relative_eq!(
            spec.half_widths[4],
            2.0 * (8.0 * i1).powf(2.0 / 3.0),
            epsilon = 1e-12
        );
        assert!(spec.half_widths[5] < spec.half_widths[4]);
        for w in spec.half_widths[..4].windows(2) {
            assert!(w[0] < w[1]);
        }
        for w in spec.half_widths[5..].windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(path_event_spec(&p, 8, -0.1, 2.0).is_err());
        assert!(path_event_spec(&p, 1, 0.0, 2.0).is_err());
        assert!(path_event_spec(&p, 8, 0.0, 0.0).is_err());
        // a piece too thin to survive integer rounding
        let thin = StepProfile::new(vec![1.4, 0.9], vec![0.06, 1.0]).unwrap();
        assert!(matches!(
            path_event_spec(&thin, 4, 0.0, 2.0),
            Err(Error::ConstructionInvalid { .. })
        ));
    }

    #[test]
    fn rejects_malformed_samples() {
        let p = StepProfile::uniform();
        let spec = path_event_spec(&p, 4, 0.0, 2.0).unwrap();
        let v = Vertex::new(5, 5);
        let psi = sampler::sample_psi(&p, GridSize::new(4), 1).unwrap();
        assert!(path_event(&psi, v, &spec, 4).is_err());
        let wrong_n = sampler::sample_mibrw(&p, GridSize::new(3), 0, 1).unwrap();
        assert!(path_event(&wrong_n, v, &spec, 4).is_err());
        let truncated = sampler::sample_mibrw(&p, GridSize::new(4), 1, 1).unwrap();
        assert!(path_event(&truncated, v, &spec, 4).is_err());
    }

    #[test]
    fn huge_shift_empties_the_event() {
        let p = StepProfile::uniform();
        let n = 5;
        let spec = path_event_spec(&p, n, 10.0 * (n as f64).sqrt(), 2.0).unwrap();
        let gs = GridSize::new(n);
        let mut total = 0;
        for r in 0..10_000u64 {
            let s = sampler::sample_mibrw(&p, gs, 0, rng::replicate_seed(77, r)).unwrap();
            total += count_path_events(&s, &spec, n).unwrap();
        }
        assert_eq!(total, 0);
    }

    #[test]
    fn wide_tube_reduces_to_endpoint_constraints() {
        let p = two_scale();
        let n = 4;
        let spec = path_event_spec(&p, n, 0.0, 1e6).unwrap();
        let gs = GridSize::new(n);
        for r in 0..10u64 {
            let s = sampler::sample_mibrw(&p, gs, 0, rng::replicate_seed(5, r)).unwrap();
            let fast = count_path_events(&s, &spec, n).unwrap();
            let mut manual = 0;
            for v in spec.window.vertices() {
                let mut ok = true;
                let mut prev = 0.0;
                for (i, &t) in spec.t_points.iter().enumerate() {
                    let here = s.path_value(v, t).unwrap();
                    let d = here - prev;
                    let (lo, hi) = spec.intervals[i];
                    ok &= lo <= d && d <= hi;
                    prev = here;
                }
                manual += u64::from(ok);
            }
            assert_eq!(fast, manual);
        }
    }

    #[test]
    fn constraints_accumulate_with_the_level_filter() {
        let p = two_scale();
        let n = 4;
        let spec = path_event_spec(&p, n, 0.0, 1.0).unwrap();
        let gs = GridSize::new(n);
        for rep in 0..5u64 {
            let s = sampler::sample_mibrw(&p, gs, 0, rng::replicate_seed(31, rep)).unwrap();
            for v in spec.window.vertices() {
                let evs: Vec<bool> =
                    (0..=n).map(|r| path_event(&s, v, &spec, r).unwrap()).collect();
                for w in evs.windows(2) {
                    assert!(w[0] || !w[1], "event regained a lost constraint");
                }
                assert!(evs[0]);
            }
        }
    }

    #[test]
    fn bridge_is_orthogonal_to_the_endpoint() {
        let p = StepProfile::uniform();
        let n = 5;
        let gs = GridSize::new(n);
        let spec = path_event_spec(&p, n, 0.0, 2.0).unwrap();
        let cum = cum_vars(&spec);
        let (k, reps) = (2usize, 5000u64);
        let v = Vertex::new(12, 20);
        let rho = cum[k] / cum[n as usize];
        let mut prods = Vec::new();
        let mut bsq = Vec::new();
        for r in 0..reps {
            let s = sampler::sample_mibrw(&p, gs, 0, rng::replicate_seed(3, r)).unwrap();
            let end = s.path_value(v, n).unwrap();
            let bridge = s.path_value(v, k as u32).unwrap() - rho * end;
            prods.push(end * bridge);
            bsq.push(bridge * bridge);
        }
        let (cov, cov_se) = mean_se(&prods);
        assert!(cov.abs() <= 3.0 * cov_se, "cov {cov} vs se {cov_se}");
        let (var, var_se) = mean_se(&bsq);
        let exact = cum[k] * (1.0 - cum[k] / cum[n as usize]);
        assert!((var - exact).abs() <= 3.0 * var_se, "var {var} vs exact {exact}");
        // the continuum formula carries an O(1/n) discretisation offset
        let kn = k as f64 / n as f64;
        let i_k = p.integrated_to(kn).unwrap();
        let continuum = n as f64 * i_k * (1.0 - i_k);
        assert!((continuum - exact).abs() / exact < 0.3);
        assert!((continuum - exact).abs() > 1e-3);
    }

    #[test]
    fn first_moment_methods_agree() {
        for p in [StepProfile::uniform(), convex()] {
            let spec = path_event_spec(&p, 5, 0.5, 2.0).unwrap();
            let mc = first_moment(&spec, MomentMethod::MonteCarlo, 3000, 11).unwrap();
            let sa = first_moment(&spec, MomentMethod::SemiAnalytic, 40_000, 11).unwrap();
            let bf = first_moment(&spec, MomentMethod::BruteForce, 0, 0).unwrap();
            assert!(mc.value > 0.0 && sa.value > 0.0 && bf.value > 0.0);
            assert!(
                (mc.value - sa.value).abs() <= 3.0 * (mc.se + sa.se),
                "mc {} ({}) vs semi-analytic {} ({})",
                mc.value,
                mc.se,
                sa.value,
                sa.se
            );
            assert!(
                (sa.value - bf.value).abs() <= 3.0 * sa.se + 0.02 * bf.value,
                "semi-analytic {} ({}) vs brute force {}",
                sa.value,
                sa.se,
                bf.value
            );
            assert_eq!(bf.se, 0.0);
        }
    }

    #[test]
    fn multi_piece_profiles_only_support_monte_carlo() {
        let spec = path_event_spec(&two_scale(), 6, 0.0, 2.0).unwrap();
        assert!(matches!(
            first_moment(&spec, MomentMethod::SemiAnalytic, 10, 1),
            Err(Error::MethodUnsupported(_))
        ));
        assert!(matches!(
            first_moment(&spec, MomentMethod::BruteForce, 0, 0),
            Err(Error::MethodUnsupported(_))
        ));
        assert!(matches!(
            second_moment(&spec, MomentMethod::SemiAnalytic, 10, 1),
            Err(Error::MethodUnsupported(_))
        ));
    }

    #[test]
    fn nested_interval_families_shrink_pathwise() {
        let p = StepProfile::uniform();
        let n = 4;
        let gs = GridSize::new(n);
        let base = path_event_spec(&p, n, 0.0, 2.0).unwrap();
        let mut specs = Vec::new();
        for shift in [0.0, 0.5, 1.0] {
            let mut s = base.clone();
            s.intervals[0].0 += shift;
            s.intervals[0].1 = f64::INFINITY;
            specs.push(s);
        }
        let mut saw_positive = false;
        for r in 0..300u64 {
            let s = sampler::sample_mibrw(&p, gs, 0, rng::replicate_seed(13, r)).unwrap();
            let counts: Vec<u64> = specs
                .iter()
                .map(|sp| count_path_events(&s, sp, n).unwrap())
                .collect();
            assert!(counts[0] >= counts[1] && counts[1] >= counts[2], "{counts:?}");
            saw_positive |= counts[0] > 0;
        }
        assert!(saw_positive);
    }

    #[test]
    fn second_moment_strata_sum_to_the_estimate() {
        let p = StepProfile::uniform();
        let spec = path_event_spec(&p, 5, 0.0, 2.0).unwrap();
        let rep = second_moment(&spec, MomentMethod::MonteCarlo, 3000, 19).unwrap();
        let total: f64 = rep.strata.iter().map(|s| s.pairs).sum();
        assert_relative_eq!(total, rep.second.value, epsilon = 1e-9);
        // the diagonal stratum is exactly the first moment
        assert_relative_eq!(rep.strata[5].pairs, rep.first.value, epsilon = 1e-12);
        assert!(rep.second.value >= rep.first.value - 1e-12);
        assert!(rep.c_tilde.is_some());
        assert_eq!(rep.strata.len(), 6);
    }

    #[test]
    fn pz_bound_sits_below_the_direct_tail() {
        let p = StepProfile::uniform();
        let spec = path_event_spec(&p, 5, 0.0, 2.0).unwrap();
        let rep = paley_zygmund_bound(&spec, 4000, 23).unwrap();
        assert!(rep.bound > 0.0);
        assert!(rep.satisfied, "bound {} direct {}", rep.bound, rep.direct);
        assert_relative_eq!(rep.bound, rep.first * rep.first / rep.second, epsilon = 1e-12);
        // far shift: no hits at all
        let empty = path_event_spec(&p, 5, 22.0, 2.0).unwrap();
        assert!(matches!(
            paley_zygmund_bound(&empty, 50, 1),
            Err(Error::ZeroFirstMoment)
        ));
    }

    #[test]
    fn single_vertex_window_makes_the_bound_degenerate() {
        let p = StepProfile::uniform();
        let mut spec = path_event_spec(&p, 4, 0.0, 2.0).unwrap();
        let v = Vertex::new(6, 9);
        spec.window = Rect::new(v, v);
        let rep = paley_zygmund_bound(&spec, 3000, 41).unwrap();
        // h is an indicator, so E[h^2] = E[h] and the bound collapses to it
        assert_relative_eq!(rep.second, rep.first, epsilon = 1e-12);
        assert_relative_eq!(rep.bound, rep.first, epsilon = 1e-12);
    }

    #[test]
    fn default_tube_keeps_half_the_paths() {
        let p = StepProfile::uniform();
        let cf = calibrate_cf(&p, 6, 4000, 7).unwrap();
        assert!([1.0, 2.0, 4.0, 8.0].contains(&cf));
        for n in [5, 6, 7] {
            let spec = path_event_spec(&p, n, 0.0, cf).unwrap();
            let tube = tube_probability(&spec, 4000, 7).unwrap();
            assert!(tube.value >= 0.5, "n={n}: tube probability {}", tube.value);
        }
    }

    #[test]
    fn endpoint_rate_approaches_the_walk_exponent() {
        // slope of log E[h] in y, via the closed-form factorisation (the
        // tube factor is y-free, so only the endpoint window moves)
        let p = StepProfile::uniform();
        let slope = |n: u32| {
            let lo = path_event_spec(&p, n, 0.0, 2.0).unwrap();
            let hi = path_event_spec(&p, n, 2.0, 2.0).unwrap();
            let cl = cum_vars(&lo);
            (endpoint_probability(&hi, &cl).ln() - endpoint_probability(&lo, &cl).ln()) / 2.0
        };
        let target = -2.0 * std::f64::consts::LN_2.sqrt();
        let (s6, s24) = (slope(6), slope(24));
        assert!(s6 < 0.0 && s24 < 0.0);
        assert!(
            (s24 - target).abs() < (s6 - target).abs(),
            "no approach: {s6} -> {s24} vs {target}"
        );
        assert!((s24 - target).abs() < 0.35, "slope {s24} vs {target}");
    }
}
