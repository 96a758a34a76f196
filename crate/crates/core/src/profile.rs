//! Step variance profiles, their integrated variance, the effective
//! (concave-hull) profile, centring sequences and the optimal-path /
//! barrier functions used by the moment machinery.

use crate::{Error, Result};
use rand::Rng;
use serde::Serialize;

const LN2: f64 = std::f64::consts::LN_2;

/// Right-continuous step variance profile
/// `sigma(s) = sigma_i` on `[lambda_{i-1}, lambda_i)`, with `lambda_0 = 0`,
/// `lambda_M = 1` and `sigma(1) = sigma_M`.
///
/// Constructors normalise so that the integrated squared profile satisfies
/// `I(1) = 1` (total variance is fixed by the degrees of freedom, so a
/// non-unit integral is a parametrisation artefact).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepProfile {
    sigmas: Vec<f64>,
    lambdas: Vec<f64>,
}

impl StepProfile {
    /// Build a profile, rescaling `sigmas` so that `I(1) = 1`.
    pub fn new(sigmas: Vec<f64>, lambdas: Vec<f64>) -> Result<Self> {
        let mut p = Self::validated(sigmas, lambdas)?;
        let total = p.integrated(0.0, 1.0)?;
        if total <= 0.0 {
            return Err(Error::domain("profile has zero total variance"));
        }
        if (total - 1.0).abs() > 1e-15 {
            let f = total.sqrt();
            for s in &mut p.sigmas {
                *s /= f;
            }
        }
        Ok(p)
    }

    /// Build a profile, rejecting inputs with `|I(1) - 1| > 1e-9`.
    pub fn new_strict(sigmas: Vec<f64>, lambdas: Vec<f64>) -> Result<Self> {
        let p = Self::validated(sigmas, lambdas)?;
        let total = p.integrated(0.0, 1.0)?;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "integrated variance I(1) = {total}, expected 1 (strict mode)"
            )));
        }
        Ok(p)
    }

    fn validated(sigmas: Vec<f64>, lambdas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() || sigmas.len() != lambdas.len() {
            return Err(Error::domain(format!(
                "need equally many sigmas and lambdas, got {} and {}",
                sigmas.len(),
                lambdas.len()
            )));
        }
        if sigmas.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::domain("sigma values must be finite and positive"));
        }
        let mut lambdas = lambdas;
        let mut prev = 0.0;
        for l in &lambdas {
            if !(*l > prev) || *l > 1.0 + 1e-12 {
                return Err(Error::domain("scale points must be strictly increasing in (0, 1]"));
            }
            prev = *l;
        }
        let last = *lambdas.last().unwrap();
        if (last - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("last scale point is {last}, expected 1")));
        }
        *lambdas.last_mut().unwrap() = 1.0;
        Ok(StepProfile { sigmas, lambdas })
    }

    /// Homogeneous profile `sigma = 1`.
    pub fn uniform() -> Self {
        StepProfile { sigmas: vec![1.0], lambdas: vec![1.0] }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Breakpoints `lambda_1 < ... < lambda_M = 1` (`lambda_0 = 0` implicit).
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn pieces(&self) -> usize {
        self.sigmas.len()
    }

    /// Left endpoint of piece `i` (0-based).
    fn lambda_lo(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.lambdas[i - 1]
        }
    }

    /// `sigma(s)` for `s` in `[0, 1]`.
    pub fn sigma_at(&self, s: f64) -> f64 {
        debug_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
        for (i, &l) in self.lambdas.iter().enumerate() {
            if s < l {
                return self.sigmas[i];
            }
        }
        *self.sigmas.last().unwrap()
    }

    /// `sigma(s)^2`.
    pub fn sq_at(&self, s: f64) -> f64 {
        let v = self.sigma_at(s);
        v * v
    }

    /// Integrated squared profile `I(a, b) = int_a^b sigma^2`.
    pub fn integrated(&self, a: f64, b: f64) -> Result<f64> {
        if !(0.0 - 1e-12..=1.0 + 1e-12).contains(&a)
            || !(0.0 - 1e-12..=1.0 + 1e-12).contains(&b)
            || a > b + 1e-15
        {
            return Err(Error::range(format!("bad integration range [{a}, {b}]")));
        }
        let mut total = 0.0;
        for i in 0..self.pieces() {
            let lo = self.lambda_lo(i).max(a);
            let hi = self.lambdas[i].min(b);
            if hi > lo {
                total += self.sigmas[i] * self.sigmas[i] * (hi - lo);
            }
        }
        Ok(total)
    }

    /// `I(lambda) = I(0, lambda)`.
    pub fn integrated_to(&self, lambda: f64) -> Result<f64> {
        self.integrated(0.0, lambda)
    }

    /// Integral of the (non-squared) profile, `int_a^b sigma`.
    pub fn integrated_sigma(&self, a: f64, b: f64) -> Result<f64> {
        if a > b {
            return Err(Error::range(format!("bad integration range [{a}, {b}]")));
        }
        let mut total = 0.0;
        for i in 0..self.pieces() {
            let lo = self.lambda_lo(i).max(a);
            let hi = self.lambdas[i].min(b);
            if hi > lo {
                total += self.sigmas[i] * (hi - lo);
            }
        }
        Ok(total)
    }
}

/// Effective profile: the non-increasing step function `bar_sigma` whose
/// integrated square is the concave hull of `I_{sigma^2}`, together with the
/// hull breakpoints, the log-correction weights and the indices of the hull
/// breakpoints among the original scale points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveProfile {
    /// `bar_sigma_1 > bar_sigma_2 > ... > bar_sigma_m` (values, not squares).
    pub bar_sigmas: Vec<f64>,
    /// Hull breakpoints `0 = lambda^0 < lambda^1 < ... < lambda^m = 1`.
    pub bar_lambdas: Vec<f64>,
    /// Hull values `hat I(lambda^j)`, same length as `bar_lambdas`.
    pub bar_values: Vec<f64>,
    /// `w_j = 3` where the hull coincides with `I` on the whole piece,
    /// `w_j = 1` where `I` is strictly below in the interior.
    pub weights: Vec<u8>,
    /// `pi_j`: 0-based index into the original `lambdas` with
    /// `lambda_{pi_j} = lambda^j`, for `j = 1..m`.
    pub pis: Vec<usize>,
}

impl EffectiveProfile {
    /// Number of effective scales `m`.
    pub fn m(&self) -> usize {
        self.bar_sigmas.len()
    }

    /// Concave hull `hat I(s)` (piecewise-linear interpolation).
    pub fn i_bar(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, 1.0);
        for j in 1..self.bar_lambdas.len() {
            if s <= self.bar_lambdas[j] {
                let (a, b) = (self.bar_lambdas[j - 1], self.bar_lambdas[j]);
                let (fa, fb) = (self.bar_values[j - 1], self.bar_values[j]);
                return fa + (fb - fa) * (s - a) / (b - a);
            }
        }
        1.0
    }

    /// `int_0^1 bar_sigma = sum_j bar_sigma_j (lambda^j - lambda^{j-1})`,
    /// the first-order constant of the maximum over `2 log N`.
    pub fn i_bar_sigma(&self) -> f64 {
        (0..self.m())
            .map(|j| self.bar_sigmas[j] * (self.bar_lambdas[j + 1] - self.bar_lambdas[j]))
            .sum()
    }

    fn delta_ts(&self, n: f64) -> Result<Vec<f64>> {
        if n < 2.0 {
            return Err(Error::range(format!("need n >= 2, got {n}")));
        }
        let dts: Vec<f64> = (0..self.m())
            .map(|j| (self.bar_lambdas[j + 1] - self.bar_lambdas[j]) * n)
            .collect();
        if let Some(bad) = dts.iter().find(|&&dt| dt <= 1.0) {
            return Err(Error::range(format!(
                "effective piece spans {bad} <= 1 dyadic levels; log-correction undefined"
            )));
        }
        Ok(dts)
    }

    /// The centring sequence
    /// `m_N = sum_j [ 2 log2 * bar_sigma_j * dt^j - w_j bar_sigma_j log(dt^j) / 4 ]`
    /// with `dt^j = (lambda^j - lambda^{j-1}) n` and natural logarithms.
    pub fn expected_max(&self, n: f64) -> Result<f64> {
        let dts = self.delta_ts(n)?;
        Ok((0..self.m())
            .map(|j| {
                let s = self.bar_sigmas[j];
                2.0 * LN2 * s * dts[j] - (self.weights[j] as f64) * s * dts[j].ln() / 4.0
            })
            .sum())
    }

    /// Time-indexed centring for the scale-inhomogeneous branching walk,
    /// `M_N^*(t)`; `M_N^*(n) = m_N / sqrt(log 2)`.
    pub fn centring(&self, n: f64, t: f64) -> Result<f64> {
        if !(0.0..=n + 1e-12).contains(&t) {
            return Err(Error::range(format!("t={t} outside [0, n={n}]")));
        }
        let dts = self.delta_ts(n)?;
        let sqrt_ln2 = LN2.sqrt();
        let mut total = 0.0;
        let mut t_lo = 0.0;
        for j in 0..self.m() {
            let t_hi = t_lo + dts[j];
            let frac = ((t.min(t_hi) - t_lo) / dts[j]).clamp(0.0, 1.0);
            let s = self.bar_sigmas[j];
            let full = 2.0 * sqrt_ln2 * s * dts[j]
                - (self.weights[j] as f64) * s * dts[j].ln() / (4.0 * sqrt_ln2);
            total += frac * full;
            t_lo = t_hi;
        }
        Ok(total)
    }
}

/// Compute the effective profile of `p`: upper concave hull of the
/// breakpoints of `I_{sigma^2}`, slopes `bar_sigma_j^2`, weights and hull
/// indices. Pieces where the hull coincides with `I` on a proper
/// sub-interval only ("mixed" pieces) are rejected.
pub fn effective_profile(p: &StepProfile) -> Result<EffectiveProfile> {
    let mut pts = Vec::with_capacity(p.pieces() + 1);
    pts.push((0.0, 0.0));
    let mut acc = 0.0;
    for i in 0..p.pieces() {
        acc += p.sigmas[i] * p.sigmas[i] * (p.lambdas[i] - p.lambda_lo(i));
        pts.push((p.lambdas[i], acc));
    }

    // Monotone-chain upper hull; collinear middle points are dropped so each
    // hull piece is a maximal segment.
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &q in &pts {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // pop b unless slope(a,b) > slope(b,q)
            if (b.1 - a.1) * (q.0 - b.0) <= (q.1 - b.1) * (b.0 - a.0) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(q);
    }

    let m = hull.len() - 1;
    let mut bar_sigmas = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    let mut pis = Vec::with_capacity(m);
    for j in 1..=m {
        let (a, b) = (hull[j - 1], hull[j]);
        let slope = (b.1 - a.1) / (b.0 - a.0);
        bar_sigmas.push(slope.sqrt());
        let idx = p
            .lambdas
            .iter()
            .position(|&l| l == b.0)
            .ok_or_else(|| Error::Internal("hull vertex is not a breakpoint".into()))?;
        pis.push(idx);

        // Classify the original breakpoints strictly inside the piece.
        let mut on = 0usize;
        let mut below = 0usize;
        for &(x, y) in &pts {
            if x > a.0 + 1e-15 && x < b.0 - 1e-15 {
                let hv = a.1 + slope * (x - a.0);
                if (hv - y).abs() <= 1e-9 {
                    on += 1;
                } else {
                    below += 1;
                }
            }
        }
        if on > 0 && below > 0 {
            return Err(Error::ConstructionInvalid {
                guarantee: format!(
                    "hull piece {j} coincides with I on a proper sub-interval only"
                ),
            });
        }
        weights.push(if below == 0 { 3 } else { 1 });
    }

    Ok(EffectiveProfile {
        bar_sigmas,
        bar_lambdas: hull.iter().map(|q| q.0).collect(),
        bar_values: hull.iter().map(|q| q.1).collect(),
        weights,
        pis,
    })
}

/// `m_N` for grid exponent `n` (see [`EffectiveProfile::expected_max`]).
pub fn expected_max(p: &StepProfile, n: f64) -> Result<f64> {
    effective_profile(p)?.expected_max(n)
}

/// `M_N^*(t)` for grid exponent `n` (see [`EffectiveProfile::centring`]).
pub fn mibrw_centring(p: &StepProfile, n: f64, t: f64) -> Result<f64> {
    effective_profile(p)?.centring(n, t)
}

/// Optimal-path interpolation: the conditional-mean profile a walk that
/// reaches `x` over an effective piece follows at intermediate level `k`.
/// First piece: `x * I(k/n) / I(lambda^1)` for `k/n <= lambda^1`; piece
/// `j >= 2`: `x * I(lambda^{j-1}, k/n) / I(lambda^{j-1}, lambda^j)`.
pub fn optimal_path(p: &StepProfile, n: f64, k: f64, x: f64) -> Result<f64> {
    if !(0.0..=n).contains(&k) {
        return Err(Error::range(format!("level k={k} outside [0, n={n}]")));
    }
    let eff = effective_profile(p)?;
    let kn = k / n;
    let l1 = eff.bar_lambdas[1];
    if kn <= l1 {
        return Ok(x * p.integrated(0.0, kn)? / p.integrated(0.0, l1)?);
    }
    for j in 2..=eff.m() {
        let (lo, hi) = (eff.bar_lambdas[j - 1], eff.bar_lambdas[j]);
        if kn <= hi {
            return Ok(x * p.integrated(lo, kn)? / p.integrated(lo, hi)?);
        }
    }
    Ok(x)
}

/// Entropic-repulsion barrier width at level `k` with amplitude `cf`:
/// a two-thirds-power tent on each effective piece, anchored at the original
/// scale points.
pub fn barrier(p: &StepProfile, n: f64, k: f64, cf: f64) -> Result<f64> {
    if cf <= 0.0 {
        return Err(Error::range(format!("barrier amplitude cf={cf} must be positive")));
    }
    if !(0.0..=n).contains(&k) {
        return Err(Error::range(format!("level k={k} outside [0, n={n}]")));
    }
    let eff = effective_profile(p)?;
    let kn = k / n;
    let pow = |v: f64| cf * (v * n).max(0.0).powf(2.0 / 3.0);

    let t1 = p.lambdas[0]; // first original scale point
    let l1 = eff.bar_lambdas[1];
    if kn <= t1 {
        return Ok(pow(p.integrated(0.0, kn)?));
    }
    if kn <= l1 {
        return Ok(pow(p.integrated(kn, l1)?));
    }
    for j in 1..eff.m() {
        let hi = eff.bar_lambdas[j + 1];
        if kn <= hi {
            let lo = eff.bar_lambdas[j];
            // first original scale point after lambda^j
            let next = p.lambdas[eff.pis[j - 1] + 1];
            return if kn <= next {
                Ok(pow(p.integrated(lo, kn)?))
            } else {
                Ok(pow(p.integrated(kn, hi)?))
            };
        }
    }
    Ok(0.0)
}

/// How the comparison profile was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ComparisonKind {
    /// Single effective scale: lower convex envelope of `I_{sigma^2}`.
    ConvexEnvelope,
    /// Several effective scales: two-value rearrangement matching the first
    /// effective variance at `tilde lambda^1 = lambda^1 n / (n + kappa)`.
    TwoScaleRearrangement,
}

/// Comparison profile `tilde sigma` used to dominate the field on an
/// enlarged grid `2^kappa N`.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonProfile {
    pub step: StepProfile,
    pub kappa: u32,
    pub kind: ComparisonKind,
    /// `tilde lambda^1` (only for the rearrangement construction).
    pub tilde_lambda_star: Option<f64>,
}

/// Build the comparison profile for base exponent `n` and enlargement
/// `kappa`, and verify its defining guarantees:
/// the first effective variances coincide,
/// `(n+kappa) I_{tilde sigma^2}((n-x)/(n+kappa)) <= n I_{sigma^2}((n-x)/n)`
/// for all `x` in `[0, n]`, and `I_{tilde sigma^2}(1) = 1`.
pub fn build_comparison_profile(p: &StepProfile, n: u32, kappa: u32) -> Result<ComparisonProfile> {
    if n < 1 {
        return Err(Error::range("need n >= 1"));
    }
    let eff = effective_profile(p)?;
    let (step, kind, tls) = if eff.m() == 1 {
        (lower_envelope_profile(p)?, ComparisonKind::ConvexEnvelope, None)
    } else {
        let nf = n as f64;
        let kf = kappa as f64;
        let sig_min = p.sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
        let sig_max = p.sigmas.iter().cloned().fold(0.0f64, f64::max);
        let (vmin, vmax) = (sig_min * sig_min, sig_max * sig_max);
        if vmax - vmin <= 1e-12 {
            return Err(Error::Internal("multi-scale hull with constant profile".into()));
        }
        let bar1 = eff.bar_sigmas[0];
        let v1 = bar1 * bar1;
        let tl_star = eff.bar_lambdas[1] * nf / (nf + kf);
        let tl3 = (tl_star * (v1 - vmin) + (vmax - 1.0)) / (vmax - vmin);
        if !(tl_star - 1e-12..=1.0 + 1e-12).contains(&tl3) {
            return Err(Error::ConstructionInvalid {
                guarantee: format!("rearrangement point {tl3} outside [{tl_star}, 1]"),
            });
        }
        let mut pieces: Vec<(f64, f64)> = Vec::new(); // (sigma, right endpoint)
        if (p.sigmas[0] - bar1).abs() <= 1e-12 {
            pieces.push((bar1, tl_star));
        } else {
            let tl1 = tl_star * (vmax - v1) / (vmax - vmin);
            pieces.push((sig_min, tl1));
            pieces.push((sig_max, tl_star));
        }
        pieces.push((sig_min, tl3.min(1.0)));
        pieces.push((sig_max, 1.0));

        // Drop empty pieces, merge equal neighbours.
        let mut sigmas = Vec::new();
        let mut lambdas: Vec<f64> = Vec::new();
        let mut prev = 0.0;
        for (s, r) in pieces {
            if r - prev <= 1e-14 {
                continue;
            }
            if sigmas.last().is_some_and(|&ls: &f64| (ls - s).abs() <= 1e-14) {
                *lambdas.last_mut().unwrap() = r;
            } else {
                sigmas.push(s);
                lambdas.push(r);
            }
            prev = r;
        }
        let step = StepProfile::new_strict(sigmas, lambdas).map_err(|e| {
            Error::ConstructionInvalid { guarantee: format!("unit total variance: {e}") }
        })?;
        (step, ComparisonKind::TwoScaleRearrangement, Some(tl_star))
    };

    // Guarantee: first effective variances coincide.
    let eff_t = effective_profile(&step)?;
    if (eff_t.bar_sigmas[0] - eff.bar_sigmas[0]).abs() > 1e-9 {
        return Err(Error::ConstructionInvalid {
            guarantee: format!(
                "first effective variance {} != {}",
                eff_t.bar_sigmas[0], eff.bar_sigmas[0]
            ),
        });
    }

    // Guarantee: level-count domination. Both sides are piecewise linear in
    // x, so checking all kinks (plus endpoints) is exact.
    let nf = n as f64;
    let total = nf + kappa as f64;
    let mut xs: Vec<f64> = vec![0.0, nf];
    for &l in step.lambdas() {
        let x = nf - total * l;
        if (0.0..=nf).contains(&x) {
            xs.push(x);
        }
    }
    for &l in p.lambdas() {
        xs.push(nf - nf * l);
    }
    for &x in &xs {
        let x = x.clamp(0.0, nf);
        let lhs = total * step.integrated_to((nf - x) / total)?;
        let rhs = nf * p.integrated_to((nf - x) / nf)?;
        if lhs > rhs + 1e-9 {
            return Err(Error::ConstructionInvalid {
                guarantee: format!("level-count domination fails at x={x}: {lhs} > {rhs}"),
            });
        }
    }

    Ok(ComparisonProfile { step, kappa, kind, tilde_lambda_star: tls })
}

/// Lower convex envelope of the breakpoints of `I_{sigma^2}`, returned as a
/// step profile (slopes are non-decreasing).
fn lower_envelope_profile(p: &StepProfile) -> Result<StepProfile> {
    let mut pts = Vec::with_capacity(p.pieces() + 1);
    pts.push((0.0, 0.0));
    let mut acc = 0.0;
    for i in 0..p.pieces() {
        acc += p.sigmas[i] * p.sigmas[i] * (p.lambdas[i] - p.lambda_lo(i));
        pts.push((p.lambdas[i], acc));
    }
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &q in &pts {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            if (b.1 - a.1) * (q.0 - b.0) >= (q.1 - b.1) * (b.0 - a.0) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(q);
    }
    let sigmas: Vec<f64> = hull
        .windows(2)
        .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).sqrt())
        .collect();
    let lambdas: Vec<f64> = hull[1..].iter().map(|q| q.0).collect();
    StepProfile::new_strict(sigmas, lambdas)
}

/// Draw a random admissible profile with at most `max_pieces` pieces
/// (diagnostic helper for randomised verification sweeps).
pub fn random_profile<R: Rng>(rng: &mut R, max_pieces: usize) -> StepProfile {
    let m = rng.gen_range(1..=max_pieces.max(1));
    loop {
        let mut lambdas: Vec<f64> = (0..m - 1).map(|_| rng.gen_range(0.02..0.98)).collect();
        lambdas.push(1.0);
        lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if lambdas.windows(2).any(|w| w[1] - w[0] < 0.02) || lambdas[0] < 0.02 {
            continue;
        }
        let sigmas: Vec<f64> = (0..m).map(|_| rng.gen_range(0.3..1.8)).collect();
        if let Ok(p) = StepProfile::new(sigmas, lambdas) {
            return p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn convex2() -> StepProfile {
        StepProfile::new(vec![0.5f64.sqrt(), 1.5f64.sqrt()], vec![0.5, 1.0]).unwrap()
    }

    fn concave2() -> StepProfile {
        StepProfile::new(vec![1.5f64.sqrt(), 0.5f64.sqrt()], vec![0.5, 1.0]).unwrap()
    }

    #[test]
    fn integrated_variance_basics() {
        let p = convex2();
        assert_relative_eq!(p.integrated_to(0.0).unwrap(), 0.0);
        assert_relative_eq!(p.integrated_to(1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.integrated_to(0.5).unwrap(), 0.25, epsilon = 1e-12);
        assert_relative_eq!(p.integrated(0.5, 1.0).unwrap(), 0.75, epsilon = 1e-12);
        assert_relative_eq!(p.integrated(0.25, 0.75).unwrap(), 0.5 * 0.25 + 1.5 * 0.25, epsilon = 1e-12);
        assert!(p.integrated(0.7, 0.2).is_err());
        assert!(p.integrated(-0.1, 0.5).is_err());
    }

    #[test]
    fn normalisation_modes() {
        // I(1) = 2 gets rescaled to 1.
        let p = StepProfile::new(vec![2.0f64.sqrt()], vec![1.0]).unwrap();
        assert_relative_eq!(p.integrated_to(1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.sigmas()[0], 1.0, epsilon = 1e-12);
        assert!(StepProfile::new_strict(vec![2.0f64.sqrt()], vec![1.0]).is_err());
        assert!(StepProfile::new(vec![1.0, 1.0], vec![0.5, 0.9]).is_err());
        assert!(StepProfile::new(vec![1.0, -1.0], vec![0.5, 1.0]).is_err());
        assert!(StepProfile::new(vec![1.0, 1.0], vec![0.9, 0.5]).is_err());
    }

    #[test]
    fn sigma_at_right_continuity_and_endpoint() {
        let p = convex2();
        assert_relative_eq!(p.sigma_at(0.0), 0.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(p.sigma_at(0.5), 1.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(p.sigma_at(1.0), 1.5f64.sqrt(), epsilon = 1e-12);
    }

    /// Brute-force concave-majorant oracle: the hull value at `s` is the
    /// maximum over all chords between breakpoints that straddle `s`.
    fn hull_oracle(p: &StepProfile, s: f64) -> f64 {
        let mut pts = vec![(0.0, 0.0)];
        let mut acc = 0.0;
        for i in 0..p.pieces() {
            acc += p.sigmas()[i] * p.sigmas()[i] * (p.lambdas()[i] - p.lambda_lo(i));
            pts.push((p.lambdas()[i], acc));
        }
        let mut best = f64::NEG_INFINITY;
        for a in &pts {
            for b in &pts {
                if a.0 <= s && s <= b.0 {
                    let v = if b.0 > a.0 {
                        a.1 + (b.1 - a.1) * (s - a.0) / (b.0 - a.0)
                    } else {
                        a.1
                    };
                    best = best.max(v);
                }
            }
        }
        best
    }

    #[test]
    fn effective_profile_uniform() {
        let eff = effective_profile(&StepProfile::uniform()).unwrap();
        assert_eq!(eff.m(), 1);
        assert_relative_eq!(eff.bar_sigmas[0], 1.0);
        assert_eq!(eff.weights, vec![3]);
        assert_eq!(eff.pis, vec![0]);
    }

    #[test]
    fn effective_profile_convex_and_concave() {
        // Strictly convex I: hull is the single chord, weight 1.
        let eff = effective_profile(&convex2()).unwrap();
        assert_eq!(eff.m(), 1);
        assert_relative_eq!(eff.bar_sigmas[0], 1.0, epsilon = 1e-12);
        assert_eq!(eff.weights, vec![1]);

        // Decreasing profile: I already concave, hull keeps both pieces.
        let eff = effective_profile(&concave2()).unwrap();
        assert_eq!(eff.m(), 2);
        assert_relative_eq!(eff.bar_sigmas[0], 1.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(eff.bar_sigmas[1], 0.5f64.sqrt(), epsilon = 1e-12);
        assert_eq!(eff.weights, vec![3, 3]);
        assert_eq!(eff.pis, vec![0, 1]);
    }

    #[test]
    fn effective_profile_matches_bruteforce_hull() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..250 {
            let p = random_profile(&mut rng, 6);
            let eff = match effective_profile(&p) {
                Ok(e) => e,
                // mixed pieces are rejected by design; the generator can
                // occasionally produce degenerate collinear data
                Err(Error::ConstructionInvalid { .. }) => continue,
                Err(e) => panic!("unexpected error {e}"),
            };
            for i in 0..=100 {
                let s = i as f64 / 100.0;
                assert!(
                    (eff.i_bar(s) - hull_oracle(&p, s)).abs() <= 1e-12,
                    "hull mismatch at s={s} for {p:?}"
                );
            }
            // bar_sigma non-increasing, hull dominates I, endpoints match.
            for w in eff.bar_sigmas.windows(2) {
                assert!(w[0] > w[1]);
            }
            assert_relative_eq!(eff.i_bar(1.0), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn effective_profile_idempotent() {
        let eff = effective_profile(&concave2()).unwrap();
        let step = StepProfile::new_strict(eff.bar_sigmas.clone(), eff.bar_lambdas[1..].to_vec())
            .unwrap();
        let eff2 = effective_profile(&step).unwrap();
        assert_eq!(eff2.m(), eff.m());
        assert!(eff2.weights.iter().all(|&w| w == 3));
        for j in 0..eff.m() {
            assert_relative_eq!(eff2.bar_sigmas[j], eff.bar_sigmas[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn expected_max_frozen_values() {
        // sigma = 1, n = 10: 20 log 2 - (3/4) log 10.
        let m10 = expected_max(&StepProfile::uniform(), 10.0).unwrap();
        assert_relative_eq!(m10, 20.0 * LN2 - 0.75 * 10f64.ln(), epsilon = 1e-9);
        assert_relative_eq!(m10, 12.136004791453372, epsilon = 1e-9);

        // convex two-scale: m = 1, bar_sigma = 1, w = 1.
        let mc = expected_max(&convex2(), 10.0).unwrap();
        assert_relative_eq!(mc, 2.0 * LN2 * 10.0 - 0.25 * 10f64.ln(), epsilon = 1e-9);
        assert_relative_eq!(mc, 13.287297337950394, epsilon = 1e-9);

        assert!(expected_max(&StepProfile::uniform(), 1.0).is_err());
        // concave2 at n = 2: each piece spans exactly one level -> error.
        assert!(expected_max(&concave2(), 2.0).is_err());
    }

    #[test]
    fn centring_endpoints_and_linearity() {
        let p = StepProfile::uniform();
        let eff = effective_profile(&p).unwrap();
        assert_relative_eq!(eff.centring(10.0, 0.0).unwrap(), 0.0);
        let full = eff.centring(10.0, 10.0).unwrap();
        assert_relative_eq!(full, eff.expected_max(10.0).unwrap() / LN2.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(full, (20.0 * LN2 - 0.75 * 10f64.ln()) / LN2.sqrt(), epsilon = 1e-9);
        // piecewise linear in t: half way on a single piece.
        let half = eff.centring(10.0, 5.0).unwrap();
        assert_relative_eq!(half, full / 2.0, epsilon = 1e-12);
        assert!(eff.centring(10.0, -0.5).is_err());
        assert!(eff.centring(10.0, 11.0).is_err());
    }

    #[test]
    fn centring_monotone_for_concave_profile() {
        let eff = effective_profile(&concave2()).unwrap();
        let n = 12.0;
        let mut prev = 0.0;
        for i in 0..=24 {
            let t = n * i as f64 / 24.0;
            let v = eff.centring(n, t).unwrap();
            assert!(v >= prev - 1e-12, "centring not monotone at t={t}");
            prev = v;
        }
    }

    #[test]
    fn optimal_path_examples() {
        let p = convex2();
        // ratio I(0.5)/I(1) = 0.25
        assert_relative_eq!(optimal_path(&p, 10.0, 5.0, 10.0).unwrap(), 2.5, epsilon = 1e-12);
        // at k/n = lambda^1 the ratio is 1
        assert_relative_eq!(optimal_path(&p, 10.0, 10.0, 3.3).unwrap(), 3.3, epsilon = 1e-12);
        assert_relative_eq!(optimal_path(&p, 10.0, 0.0, 3.3).unwrap(), 0.0);
        // two effective scales: second piece interpolates the increment.
        let q = concave2();
        let v = optimal_path(&q, 10.0, 7.5, 4.0).unwrap();
        assert_relative_eq!(v, 4.0 * 0.5, epsilon = 1e-12);
        assert!(optimal_path(&p, 10.0, 10.5, 1.0).is_err());
    }

    #[test]
    fn barrier_shapes() {
        let u = StepProfile::uniform();
        // homogeneous: single branch, cf * k^(2/3)
        for k in [0.0, 1.0, 4.0, 10.0] {
            assert_relative_eq!(barrier(&u, 10.0, k, 2.0).unwrap(), 2.0 * k.powf(2.0 / 3.0));
        }
        // strictly convex: rises to the scale point, then falls to 0 at t^1.
        let p = convex2();
        assert_relative_eq!(barrier(&p, 10.0, 10.0, 1.0).unwrap(), 0.0, epsilon = 1e-12);
        let at5 = barrier(&p, 10.0, 5.0, 1.0).unwrap();
        assert_relative_eq!(at5, (0.25f64 * 10.0).powf(2.0 / 3.0), epsilon = 1e-12);
        let at7 = barrier(&p, 10.0, 7.0, 1.0).unwrap();
        assert_relative_eq!(at7, (p.integrated(0.7, 1.0).unwrap() * 10.0).powf(2.0 / 3.0), epsilon = 1e-12);
        // fully concave profile: the fall branches are void (t_1 = t^1,
        // t_{pi_i+1} = t^{i+1}), so the width resets and rises on each piece.
        let q = concave2();
        assert_relative_eq!(
            barrier(&q, 10.0, 5.0, 1.0).unwrap(),
            7.5f64.powf(2.0 / 3.0),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            barrier(&q, 10.0, 10.0, 1.0).unwrap(),
            2.5f64.powf(2.0 / 3.0),
            epsilon = 1e-12
        );
        assert!(barrier(&q, 10.0, 2.5, 1.0).unwrap() > 0.0);
        // just past an effective breakpoint the width restarts near zero.
        assert!(barrier(&q, 10.0, 5.1, 1.0).unwrap() < barrier(&q, 10.0, 5.0, 1.0).unwrap());
        assert!(barrier(&u, 10.0, 5.0, 0.0).is_err());
    }

    #[test]
    fn comparison_profile_single_scale() {
        // sigma = 1: envelope is the identity, tilde sigma = 1.
        let c = build_comparison_profile(&StepProfile::uniform(), 10, 4).unwrap();
        assert_eq!(c.kind, ComparisonKind::ConvexEnvelope);
        assert_eq!(c.step.pieces(), 1);
        assert_relative_eq!(c.step.sigmas()[0], 1.0, epsilon = 1e-12);

        // strictly convex I: already convex, envelope returns it unchanged.
        let c = build_comparison_profile(&convex2(), 10, 4).unwrap();
        assert_eq!(c.step.pieces(), 2);
        assert_relative_eq!(c.step.sigmas()[0], 0.5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn comparison_profile_rearrangement() {
        // decreasing two-scale profile, n = 32, kappa = 8
        let p = concave2();
        let c = build_comparison_profile(&p, 32, 8).unwrap();
        assert_eq!(c.kind, ComparisonKind::TwoScaleRearrangement);
        let tls = c.tilde_lambda_star.unwrap();
        assert_relative_eq!(tls, 0.5 * 32.0 / 40.0, epsilon = 1e-12);
        // sigma_1 = bar_sigma_1 here, so the first piece is constant bar_sigma_1
        assert_relative_eq!(c.step.sigma_at(0.0), 1.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(c.step.integrated_to(1.0).unwrap(), 1.0, epsilon = 1e-12);
        // first effective variance preserved
        let eff_t = effective_profile(&c.step).unwrap();
        assert_relative_eq!(eff_t.bar_sigmas[0], 1.5f64.sqrt(), epsilon = 1e-9);
        assert_relative_eq!(eff_t.bar_lambdas[1], tls, epsilon = 1e-9);
    }

    #[test]
    fn comparison_profile_rearrangement_split_start() {
        // profile whose first piece is NOT on the hull start: sigma_1 < bar_sigma_1
        let p = StepProfile::new(vec![0.8, 1.6, 0.6], vec![0.3, 0.6, 1.0]).unwrap();
        let eff = effective_profile(&p).unwrap();
        assert!(eff.m() >= 2);
        assert!((p.sigmas()[0] - eff.bar_sigmas[0]).abs() > 1e-9);
        let c = build_comparison_profile(&p, 16, 6).unwrap();
        // starts at sigma_min, matches first effective variance
        let eff_t = effective_profile(&c.step).unwrap();
        assert_relative_eq!(eff_t.bar_sigmas[0], eff.bar_sigmas[0], epsilon = 1e-9);
        assert_relative_eq!(c.step.integrated_to(1.0).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn random_profiles_round_trip_envelope_domination() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut built = 0;
        for _ in 0..120 {
            let p = random_profile(&mut rng, 4);
            match build_comparison_profile(&p, 12, 5) {
                Ok(c) => {
                    built += 1;
                    assert_relative_eq!(c.step.integrated_to(1.0).unwrap(), 1.0, epsilon = 1e-9);
                }
                Err(Error::ConstructionInvalid { .. }) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(built > 60, "construction failed too often ({built}/120)");
    }
}
