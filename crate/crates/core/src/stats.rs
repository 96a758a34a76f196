//! Monte Carlo pools of field maxima and the diagnostics built on them:
//! exceedance grids, weighted log-frequency rate fits with batch-replicate
//! errors, the first-order ratio table, and the max-doubling gap check.

use crate::compare::MC_Z;
use crate::error::Error;
use crate::Result;
use crate::lattice::GridSize;
use crate::profile::{self, StepProfile};
use crate::rng::{self, tag};
use crate::sampler::{self, FieldKind};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::LN_2;

/// Replicates multiplied per matrix product on the dense-field path.
const GEMM_BATCH: usize = 64;
/// Grid points with fewer tail hits than this are dropped from rate fits.
const FIT_MIN_COUNT: u64 = 50;
/// A rate fit needs at least this many usable grid points.
const FIT_MIN_POINTS: usize = 4;
/// Contiguous replicate batches for the slope dispersion estimate.
const FIT_BATCHES: usize = 40;
/// Two-sided 95% normal quantile used for fit intervals.
pub const FIT_Z: f64 = 1.96;
const GRID_STEP: f64 = 0.25;

// ---------------------------------------------------------------------------
// maximum pools

/// Pool of field maxima, one entry per replicate, in replicate order.
#[derive(Debug, Clone, Serialize)]
pub struct MaxSample {
    pub kind: FieldKind,
    pub n: u32,
    pub k0: u32,
    pub replicates: usize,
    pub seed: u64,
    pub maxima: Vec<f64>,
}

impl MaxSample {
    pub fn mean(&self) -> f64 {
        self.maxima.iter().sum::<f64>() / self.maxima.len() as f64
    }

    /// Unbiased sample variance (zero for singleton pools).
    pub fn variance(&self) -> f64 {
        if self.maxima.len() < 2 {
            return 0.0;
        }
        let m = self.mean();
        self.maxima.iter().map(|x| (x - m).powi(2)).sum::<f64>()
            / (self.maxima.len() - 1) as f64
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn standard_error(&self) -> f64 {
        self.sd() / (self.maxima.len() as f64).sqrt()
    }

    /// Linear-interpolation quantile of the pool, `q` clamped to `[0, 1]`.
    pub fn quantile(&self, q: f64) -> f64 {
        let mut sorted = self.maxima.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }

    pub fn iqr(&self) -> f64 {
        self.quantile(0.75) - self.quantile(0.25)
    }

    pub fn count_above(&self, t: f64) -> u64 {
        self.maxima.iter().filter(|&&m| m > t).count() as u64
    }

    pub fn count_at_most(&self, t: f64) -> u64 {
        self.maxima.iter().filter(|&&m| m <= t).count() as u64
    }
}

/// Interior maxima of `replicates` dense-field draws, `max`-ed with the zero
/// boundary. Column j of each noise batch replays the exact normal stream of
/// the per-replicate sampler, so pools agree with one-at-a-time draws.
fn dense_maxima(m: &DMatrix<f64>, gs: GridSize, replicates: usize, seed: u64) -> Vec<f64> {
    let dim = m.ncols();
    let mut out = Vec::with_capacity(replicates);
    let mut start = 0;
    while start < replicates {
        let bsz = GEMM_BATCH.min(replicates - start);
        let mut b = DMatrix::zeros(dim, bsz);
        for j in 0..bsz {
            let rep = rng::replicate_seed(seed, (start + j) as u64);
            let mut srng = rng::stream(rep, &[tag::DGFF, gs.n as u64]);
            for i in 0..dim {
                b[(i, j)] = srng.sample(StandardNormal);
            }
        }
        let y = m * &b;
        for j in 0..bsz {
            out.push(y.column(j).iter().cloned().fold(0.0f64, f64::max));
        }
        start += bsz;
    }
    out
}

/// Pool the maximum of `replicates` independent draws of the given field
/// kind. `k0` must be zero except for the truncated walk, where levels
/// `k < k0` are dropped and `k0 >= 1` is required.
pub fn mc_max(
    kind: FieldKind,
    p: &StepProfile,
    n: u32,
    k0: u32,
    replicates: usize,
    seed: u64,
) -> Result<MaxSample> {
    if replicates == 0 {
        return Err(Error::domain("need at least one replicate"));
    }
    match kind {
        FieldKind::Tmibrw if k0 == 0 => {
            return Err(Error::domain(
                "truncated walk needs k0 >= 1; use the plain walk kind for k0 = 0",
            ));
        }
        FieldKind::Coupled => {
            return Err(Error::domain(
                "coupled fields are drawn against a base sample, not pooled here",
            ));
        }
        FieldKind::Tmibrw => {}
        _ if k0 != 0 => {
            return Err(Error::domain(format!(
                "k0={k0} only applies to the truncated walk kind"
            )));
        }
        _ => {}
    }
    let gs = GridSize::new(n);
    let maxima = match kind {
        FieldKind::Dgff => dense_maxima(&*sampler::dgff_transform(gs)?, gs, replicates, seed),
        FieldKind::Psi => dense_maxima(&*sampler::psi_transform(p, gs)?, gs, replicates, seed),
        FieldKind::Ibrw => (0..replicates)
            .map(|r| {
                Ok(sampler::sample_ibrw(p, gs, n, rng::replicate_seed(seed, r as u64))?
                    .max_value())
            })
            .collect::<Result<Vec<_>>>()?,
        FieldKind::Mibrw | FieldKind::Tmibrw => (0..replicates)
            .into_par_iter()
            .map_init(
                || sampler::WalkScratch::new(gs),
                |s, r| sampler::mibrw_max(p, gs, k0, rng::replicate_seed(seed, r as u64), s),
            )
            .collect::<Result<Vec<_>>>()?,
        FieldKind::Coupled => unreachable!(),
    };
    Ok(MaxSample { kind, n, k0, replicates, seed, maxima })
}

// ---------------------------------------------------------------------------
// tail grids

/// One grid point of an empirical tail: hit count, frequency, 95% interval.
#[derive(Debug, Clone, Serialize)]
pub struct TailPoint {
    pub x: f64,
    pub count: u64,
    pub phat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

fn wilson_interval(count: u64, total: usize) -> (f64, f64) {
    let nf = total as f64;
    let p = count as f64 / nf;
    let z2 = FIT_Z * FIT_Z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = FIT_Z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

fn tail_point(x: f64, count: u64, total: usize) -> TailPoint {
    let (ci_lo, ci_hi) = wilson_interval(count, total);
    TailPoint { x, count, phat: count as f64 / total as f64, ci_lo, ci_hi }
}

/// Exceedance frequencies `P(max > centring + x)` over the grid.
pub fn right_tail_points(sample: &MaxSample, centring: f64, grid: &[f64]) -> Vec<TailPoint> {
    grid.iter()
        .map(|&x| tail_point(x, sample.count_above(centring + x), sample.maxima.len()))
        .collect()
}

/// Depth frequencies `P(max <= centring - lambda)` over the grid.
pub fn left_tail_points(sample: &MaxSample, centring: f64, grid: &[f64]) -> Vec<TailPoint> {
    grid.iter()
        .map(|&l| tail_point(l, sample.count_at_most(centring - l), sample.maxima.len()))
        .collect()
}

/// Right-tail fits use recentred exceedances up to `sqrt(n log 2)`.
pub fn right_tail_window(n: u32) -> f64 {
    (n as f64 * LN_2).sqrt()
}

/// Left-tail depths live in `[0, (log(n log 2))^(2/3)]`.
pub fn left_tail_window(n: u32) -> f64 {
    (n as f64 * LN_2).ln().powf(2.0 / 3.0)
}

pub fn default_x_grid(n: u32) -> Vec<f64> {
    grid_to(right_tail_window(n))
}

pub fn default_lambda_grid(n: u32) -> Vec<f64> {
    grid_to(left_tail_window(n))
}

fn grid_to(top: f64) -> Vec<f64> {
    let mut g = Vec::new();
    let mut i = 0u32;
    loop {
        let x = f64::from(i) * GRID_STEP;
        if x > top + 1e-9 {
            return g;
        }
        g.push(x);
        i += 1;
    }
}

// ---------------------------------------------------------------------------
// rate fits

/// Weighted least-squares decay rate of a log tail frequency.
#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    /// Slope of `log phat` (minus `log(1+x)` when `prefactor` is set).
    pub rate: f64,
    /// Larger of the binomial model error and the batch-slope dispersion.
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub prefactor: bool,
    /// Grid points that carried enough hits to enter the fit.
    pub points: usize,
}

fn count_side(maxima: &[f64], thr: f64, upper: bool) -> u64 {
    if upper {
        maxima.iter().filter(|&&m| m > thr).count() as u64
    } else {
        maxima.iter().filter(|&&m| m <= thr).count() as u64
    }
}

/// `(x, log-frequency, weight)` triples for the points with usable counts.
/// Points at frequency 0 or 1 carry no rate information and are dropped.
fn decay_points(
    maxima: &[f64],
    xs: &[f64],
    thresholds: &[f64],
    upper: bool,
    prefactor: bool,
    min_count: u64,
) -> Vec<(f64, f64, f64)> {
    let total = maxima.len();
    let mut pts = Vec::new();
    for (&x, &thr) in xs.iter().zip(thresholds) {
        let c = count_side(maxima, thr, upper);
        if c < min_count.max(1) || c as usize >= total {
            continue;
        }
        let p = c as f64 / total as f64;
        let mut y = p.ln();
        if prefactor {
            y -= x.ln_1p();
        }
        pts.push((x, y, c as f64 / (1.0 - p)));
    }
    pts
}

/// Returns `(slope, model se)`; the se is inflated by lack of fit when the
/// residual chi-square per dof exceeds the binomial expectation.
fn wls_slope(pts: &[(f64, f64, f64)]) -> Option<(f64, f64)> {
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let xbar = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let ybar = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - xbar).powi(2)).sum();
    if !(sxx > 1e-12) {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - xbar) * (p.1 - ybar)).sum();
    let slope = sxy / sxx;
    let s2 = if pts.len() > 2 {
        let resid: f64 = pts
            .iter()
            .map(|p| p.2 * (p.1 - ybar - slope * (p.0 - xbar)).powi(2))
            .sum();
        (resid / (pts.len() - 2) as f64).max(1.0)
    } else {
        1.0
    };
    Some((slope, (s2 / sxx).sqrt()))
}

fn fit_decay(
    maxima: &[f64],
    xs: &[f64],
    thresholds: &[f64],
    upper: bool,
    prefactor: bool,
) -> Result<RateFit> {
    let pts = decay_points(maxima, xs, thresholds, upper, prefactor, FIT_MIN_COUNT);
    if pts.len() < FIT_MIN_POINTS {
        return Err(Error::InsufficientData(format!(
            "{} of {} grid points kept >= {FIT_MIN_COUNT} tail hits, need {FIT_MIN_POINTS}",
            pts.len(),
            xs.len()
        )));
    }
    let (slope, wls_se) =
        wls_slope(&pts).ok_or_else(|| Error::domain("degenerate abscissa grid"))?;
    // grid points share one replicate pool, so their errors correlate; the
    // dispersion of per-batch slopes keeps the interval honest
    let mut batch_se = 0.0;
    let total = maxima.len();
    if total >= 10 * FIT_BATCHES {
        let mut slopes = Vec::with_capacity(FIT_BATCHES);
        for b in 0..FIT_BATCHES {
            let lo = b * total / FIT_BATCHES;
            let hi = (b + 1) * total / FIT_BATCHES;
            let bp = decay_points(&maxima[lo..hi], xs, thresholds, upper, prefactor, 3);
            if bp.len() >= 2 {
                if let Some((s, _)) = wls_slope(&bp) {
                    slopes.push(s);
                }
            }
        }
        if slopes.len() >= 8 {
            let k = slopes.len() as f64;
            let m = slopes.iter().sum::<f64>() / k;
            let v = slopes.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (k - 1.0);
            batch_se = (v / k).sqrt();
        }
    }
    let se = wls_se.max(batch_se);
    Ok(RateFit {
        rate: slope,
        se,
        ci_lo: slope - FIT_Z * se,
        ci_hi: slope + FIT_Z * se,
        prefactor,
        points: pts.len(),
    })
}

/// Fit the exponential rate of `P(max > centring + x)` over the admissible
/// part of the grid. With `prefactor` the polynomial factor `1 + x` is
/// divided out before fitting.
pub fn right_tail_rate(
    sample: &MaxSample,
    centring: f64,
    grid: &[f64],
    prefactor: bool,
) -> Result<RateFit> {
    let w = right_tail_window(sample.n) + 1e-9;
    let xs: Vec<f64> = grid.iter().copied().filter(|&x| (0.0..=w).contains(&x)).collect();
    let thresholds: Vec<f64> = xs.iter().map(|x| centring + x).collect();
    fit_decay(&sample.maxima, &xs, &thresholds, true, prefactor)
}

/// Verdict on exponential decay of the left tail: the fitted
/// `P(max <= centring - lambda) ~ exp(-c lambda)` passes when the lower
/// confidence limit of `c` is positive.
#[derive(Debug, Clone, Serialize)]
pub struct DecayVerdict {
    pub c: f64,
    pub c_lo: f64,
    pub c_hi: f64,
    pub passed: bool,
    pub fit: RateFit,
}

pub fn left_tail_check(sample: &MaxSample, centring: f64, grid: &[f64]) -> Result<DecayVerdict> {
    let w = left_tail_window(sample.n);
    if let Some(&bad) = grid.iter().find(|&&l| !(0.0..=w + 1e-9).contains(&l)) {
        return Err(Error::range(format!(
            "depth {bad} outside the admissible window [0, {w:.4}]"
        )));
    }
    let thresholds: Vec<f64> = grid.iter().map(|l| centring - l).collect();
    let fit = fit_decay(&sample.maxima, grid, &thresholds, false, false)?;
    let (c, c_lo, c_hi) = (-fit.rate, -fit.ci_hi, -fit.ci_lo);
    Ok(DecayVerdict { c, c_lo, c_hi, passed: c_lo > 0.0, fit })
}

// ---------------------------------------------------------------------------
// tail report

/// Full tail diagnostic for one field kind: centring, both empirical tails,
/// and the rate fits against the predicted exponents.
#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub kind: FieldKind,
    pub n: u32,
    pub k0: u32,
    pub replicates: usize,
    pub seed: u64,
    /// Threshold the tails are measured from (theory value, or the pool mean
    /// when `recentred`).
    pub centring: f64,
    pub recentred: bool,
    /// Theory rate for this kind and profile: `-2/bar_sigma_1` for dense
    /// fields, scaled by `sqrt(log 2)` for walks.
    pub predicted_rate: f64,
    pub prefactor: bool,
    pub mean: f64,
    pub sd: f64,
    pub iqr: f64,
    pub right: Vec<TailPoint>,
    pub left: Vec<TailPoint>,
    pub right_fit: Option<RateFit>,
    pub left_tail: Option<DecayVerdict>,
}

#[allow(clippy::too_many_arguments)]
pub fn tail_report(
    p: &StepProfile,
    kind: FieldKind,
    n: u32,
    k0: u32,
    replicates: usize,
    seed: u64,
    recentre: bool,
    x_grid: Option<&[f64]>,
    lambda_grid: Option<&[f64]>,
) -> Result<TailReport> {
    let sample = mc_max(kind, p, n, k0, replicates, seed)?;
    let eff = profile::effective_profile(p)?;
    let bar1 = eff.bar_sigmas[0];
    let theory_centring = match kind {
        FieldKind::Dgff => profile::expected_max(&StepProfile::uniform(), n as f64)?,
        FieldKind::Psi => profile::expected_max(p, n as f64)?,
        _ => eff.centring(n as f64, n as f64)?,
    };
    let (predicted_rate, prefactor) = match kind {
        FieldKind::Dgff => (-2.0, true),
        FieldKind::Psi => (-2.0 / bar1, (p.sigma_at(0.0) - bar1).abs() < 1e-12),
        _ => (-2.0 * LN_2.sqrt() / bar1, (p.sigma_at(0.0) - bar1).abs() < 1e-12),
    };
    let centring = if recentre { sample.mean() } else { theory_centring };
    let xg: Vec<f64> = x_grid.map_or_else(|| default_x_grid(n), <[f64]>::to_vec);
    let lg: Vec<f64> = lambda_grid.map_or_else(|| default_lambda_grid(n), <[f64]>::to_vec);
    let right = right_tail_points(&sample, centring, &xg);
    let left = left_tail_points(&sample, centring, &lg);
    let right_fit = match right_tail_rate(&sample, centring, &xg, prefactor) {
        Ok(f) => Some(f),
        Err(Error::InsufficientData(_)) => None,
        Err(e) => return Err(e),
    };
    let left_tail = match left_tail_check(&sample, centring, &lg) {
        Ok(v) => Some(v),
        Err(Error::InsufficientData(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(TailReport {
        kind,
        n,
        k0,
        replicates,
        seed,
        centring,
        recentred: recentre,
        predicted_rate,
        prefactor,
        mean: sample.mean(),
        sd: sample.sd(),
        iqr: sample.iqr(),
        right,
        left,
        right_fit,
        left_tail,
    })
}

// ---------------------------------------------------------------------------
// first-order ratio and doubling gap

#[derive(Debug, Clone, Serialize)]
pub struct FirstOrderRow {
    pub n: u32,
    pub mean: f64,
    pub se: f64,
    /// `mean / (2 log N)`; approaches `target` as `n` grows.
    pub ratio: f64,
    /// `mean` minus the predicted centring.
    pub centred: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FirstOrderTable {
    /// Limit of the ratio column: the integrated effective amplitude.
    pub target: f64,
    pub rows: Vec<FirstOrderRow>,
}

/// Dense-field maxima over an ascending list of grid exponents, reduced to
/// the first-order ratio `max / (2 log N)` and its distance from the limit.
pub fn first_order_check(
    p: &StepProfile,
    n_list: &[u32],
    replicates: usize,
    seed: u64,
) -> Result<FirstOrderTable> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain("grid exponents must be strictly ascending"));
    }
    let eff = profile::effective_profile(p)?;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let s = mc_max(FieldKind::Psi, p, n, 0, replicates, seed)?;
        let mean = s.mean();
        rows.push(FirstOrderRow {
            n,
            mean,
            se: s.standard_error(),
            ratio: mean / (2.0 * n as f64 * LN_2),
            centred: mean - profile::expected_max(p, n as f64)?,
            iqr: s.iqr(),
        });
    }
    Ok(FirstOrderTable { target: eff.i_bar_sigma(), rows })
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub n: u32,
    pub replicates: usize,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub satisfied: bool,
}

pub(crate) fn mean_se(xs: &[f64]) -> (f64, f64) {
    let nf = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / nf;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nf - 1.0);
    (m, (v / nf).sqrt())
}

/// Max-doubling inequality for the dense field: `E|M - M'| <= 2 (E M_{4N} -
/// E M_N)` with `M, M'` independent maxima on the `N`-grid. Verified within
/// Monte Carlo error; the `4N` grid must respect the dense-size cap.
pub fn dekking_host_gap(
    p: &StepProfile,
    n: u32,
    replicates: usize,
    seed: u64,
) -> Result<GapReport> {
    if replicates == 0 {
        return Err(Error::domain("need at least one replicate"));
    }
    let small = mc_max(FieldKind::Psi, p, n, 0, 2 * replicates, seed)?;
    let big = mc_max(FieldKind::Psi, p, n + 2, 0, replicates, seed)?;
    let diffs: Vec<f64> = (0..replicates)
        .map(|r| (small.maxima[2 * r] - small.maxima[2 * r + 1]).abs())
        .collect();
    let gains: Vec<f64> =
        (0..replicates).map(|r| 2.0 * (big.maxima[r] - small.maxima[2 * r])).collect();
    let (lhs, lhs_se) = mean_se(&diffs);
    let (rhs, rhs_se) = mean_se(&gains);
    Ok(GapReport {
        n,
        replicates,
        lhs,
        lhs_se,
        rhs,
        rhs_se,
        satisfied: lhs <= rhs + MC_Z * (lhs_se + rhs_se),
    })
}
