//! Seeded, exact samplers for every field kind: DGFF (Cholesky), the
//! scale-inhomogeneous field ψ (linear map applied to a DGFF draw), the
//! inhomogeneous branching random walk on disjoint dyadic cells, its
//! modified torus-averaged variant (per-level 2-d prefix sums), the
//! truncated variant, and couplings `field + a_v·X`.

use crate::lattice::{dyadic_cell, GridSize, Vertex};
use crate::profile::StepProfile;
use crate::psi::psi_map;
use crate::rng::{self, tag};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Read as _;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

/// Dense-factorization limit for DGFF/ψ (side of the grid).
pub const MAX_FIELD_SIDE: i64 = 64;
/// Branching-walk grids cap (memory of the per-level fields).
pub const MAX_BRW_EXPONENT: u32 = 12;

const SQRT_LN2: f64 = 0.832_554_611_157_697_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Dgff,
    Psi,
    Ibrw,
    Mibrw,
    Tmibrw,
    Coupled,
}

impl std::fmt::Display for FieldKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FieldKind::Dgff => "dgff",
            FieldKind::Psi => "psi",
            FieldKind::Ibrw => "ibrw",
            FieldKind::Mibrw => "mibrw",
            FieldKind::Tmibrw => "tmibrw",
            FieldKind::Coupled => "coupled",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dgff" => Ok(FieldKind::Dgff),
            "psi" => Ok(FieldKind::Psi),
            "ibrw" => Ok(FieldKind::Ibrw),
            "mibrw" => Ok(FieldKind::Mibrw),
            "tmibrw" => Ok(FieldKind::Tmibrw),
            "coupled" => Ok(FieldKind::Coupled),
            other => Err(Error::domain(format!("unknown field kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CouplingExtra {
    /// Per-vertex coupling amplitudes (grid order).
    pub a: Vec<f64>,
    /// The shared standard-normal draw.
    pub x: f64,
}

/// One sampled field on the full `N × N` grid (row-major).
pub struct FieldSample {
    pub kind: FieldKind,
    pub gs: GridSize,
    pub seed: u64,
    pub values: Vec<f64>,
    /// Truncation level for (T)MIBRW; 0 = untruncated.
    pub k0: u32,
    /// Evaluation time for the branching walk (`None` = full, t = n).
    pub t: Option<u32>,
    /// Profile used, when the kind has one.
    pub profile: Option<StepProfile>,
    /// Per-level contribution fields `k0..=n` for (T)MIBRW; the running
    /// suffix sums give the path `S_v(t)` needed by the moment machinery.
    pub levels: Option<Vec<Vec<f64>>>,
    pub coupling: Option<CouplingExtra>,
}

impl FieldSample {
    pub fn value(&self, v: Vertex) -> f64 {
        self.values[self.gs.index_of(v)]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Path value `S_v(t)` = sum of the `t+1` finest retained levels... for
    /// branching-walk samples with retained levels.
    pub fn path_value(&self, v: Vertex, t: u32) -> Option<f64> {
        let levels = self.levels.as_ref()?;
        let n = self.gs.n;
        let idx = self.gs.index_of(v);
        // levels are stored for k = k0..=n; S(t) sums k = n-t..=n
        let lo_k = n.saturating_sub(t).max(self.k0);
        let skip = (lo_k - self.k0) as usize;
        Some(levels[skip..].iter().map(|l| l[idx]).sum())
    }
}

fn check_dense_side(gs: GridSize) -> Result<()> {
    if gs.side() > MAX_FIELD_SIDE {
        return Err(Error::SizeLimit { n: gs.side() as u32, max: MAX_FIELD_SIDE as u32 });
    }
    Ok(())
}

/// Lower Cholesky factor of the Green matrix (cached per grid).
pub(crate) fn dgff_transform(gs: GridSize) -> Result<Arc<DMatrix<f64>>> {
    static CACHE: OnceLock<Mutex<HashMap<u32, Arc<DMatrix<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(m) = cache.lock().unwrap().get(&gs.n) {
        return Ok(m.clone());
    }
    let g = crate::green::green_matrix(gs.rect())?;
    let chol = g
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Internal("Green matrix not positive definite".into()))?;
    let l = Arc::new(chol.l());
    cache.lock().unwrap().insert(gs.n, l.clone());
    Ok(l)
}

/// ψ sampling matrix `A · L` (cached per grid and profile).
pub(crate) fn psi_transform(p: &StepProfile, gs: GridSize) -> Result<Arc<DMatrix<f64>>> {
    static CACHE: OnceLock<Mutex<HashMap<(u32, u64), Arc<DMatrix<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (gs.n, crate::psi::profile_key(p));
    if let Some(m) = cache.lock().unwrap().get(&key) {
        return Ok(m.clone());
    }
    let l = dgff_transform(gs)?;
    let map = psi_map(p, gs)?;
    let m = Arc::new(map.a.mul_dense(&l));
    cache.lock().unwrap().insert(key, m.clone());
    Ok(m)
}

/// Standard-normal vector for the base field of `seed` (interior order).
fn base_noise(gs: GridSize, seed: u64, dim: usize) -> DVector<f64> {
    let mut rng = rng::stream(seed, &[tag::DGFF, gs.n as u64]);
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

fn grid_from_interior(gs: GridSize, y: &DVector<f64>) -> Vec<f64> {
    let inner = gs.rect().interior().expect("grid has interior");
    let mut values = vec![0.0; gs.vertex_count()];
    for (i, v) in inner.vertices().enumerate() {
        values[gs.index_of(v)] = y[i];
    }
    values
}

/// Exact DGFF draw: `L z` with `L L† = G`.
pub fn sample_dgff(gs: GridSize, seed: u64) -> Result<FieldSample> {
    check_dense_side(gs)?;
    let l = dgff_transform(gs)?;
    let y = &*l * base_noise(gs, seed, l.nrows());
    Ok(FieldSample {
        kind: FieldKind::Dgff,
        gs,
        seed,
        values: grid_from_interior(gs, &y),
        k0: 0,
        t: None,
        profile: None,
        levels: None,
        coupling: None,
    })
}

/// Exact ψ draw: the scale mixing map applied to a DGFF draw. Shares the
/// base-field noise stream, so σ ≡ 1 reproduces `sample_dgff` bit for bit.
pub fn sample_psi(p: &StepProfile, gs: GridSize, seed: u64) -> Result<FieldSample> {
    check_dense_side(gs)?;
    let m = psi_transform(p, gs)?;
    let y = &*m * base_noise(gs, seed, m.ncols());
    Ok(FieldSample {
        kind: FieldKind::Psi,
        gs,
        seed,
        values: grid_from_interior(gs, &y),
        k0: 0,
        t: None,
        profile: Some(p.clone()),
        levels: None,
        coupling: None,
    })
}

fn check_brw_size(gs: GridSize) -> Result<()> {
    if gs.n > MAX_BRW_EXPONENT {
        return Err(Error::SizeLimit { n: gs.n, max: MAX_BRW_EXPONENT });
    }
    Ok(())
}

/// Per-cell noise of the dyadic-partition walk at one level.
#[inline]
fn ibrw_cell_noise(seed: u64, k: u32, cell: (i64, i64)) -> f64 {
    rng::normal_from_key(rng::mix(&[seed, tag::IBRW, k as u64, cell.0 as u64, cell.1 as u64]))
}

/// Full-grid inhomogeneous branching random walk at time `t`:
/// `R_z(t) = √log2 · Σ_{k=n−t}^{n} σ̃((n−k)/n) · a_{k, BD_k(z)}`.
pub fn sample_ibrw(tilde: &StepProfile, gs: GridSize, t: u32, seed: u64) -> Result<FieldSample> {
    check_brw_size(gs)?;
    let n = gs.n;
    if t > n {
        return Err(Error::range(format!("time t={t} outside 0..={n}")));
    }
    let nn = gs.side() as usize;
    let mut values = vec![0.0; nn * nn];
    for k in (n - t)..=n {
        let coef = SQRT_LN2 * tilde.sigma_at((n - k) as f64 / n as f64);
        let cells = 1usize << (n - k);
        let mut noise = vec![0.0; cells * cells];
        for cy in 0..cells {
            for cx in 0..cells {
                noise[cy * cells + cx] = ibrw_cell_noise(seed, k, (cx as i64, cy as i64));
            }
        }
        for y in 0..nn {
            let cy = y >> k;
            for x in 0..nn {
                let cx = x >> k;
                values[y * nn + x] += coef * noise[cy * cells + cx];
            }
        }
    }
    Ok(FieldSample {
        kind: FieldKind::Ibrw,
        gs,
        seed,
        values,
        k0: 0,
        t: Some(t),
        profile: Some(tilde.clone()),
        levels: None,
        coupling: None,
    })
}

/// Lazy point evaluation of the same field (bit-identical to
/// [`sample_ibrw`] at the requested points).
pub fn ibrw_at(
    tilde: &StepProfile,
    gs: GridSize,
    t: u32,
    seed: u64,
    pts: &[Vertex],
) -> Result<Vec<f64>> {
    let n = gs.n;
    if t > n {
        return Err(Error::range(format!("time t={t} outside 0..={n}")));
    }
    let mut out = vec![0.0; pts.len()];
    let mut memo: HashMap<(u32, i64, i64), f64> = HashMap::new();
    for (i, &z) in pts.iter().enumerate() {
        if !gs.contains(z) {
            return Err(Error::domain(format!("point {z:?} outside the grid")));
        }
        for k in (n - t)..=n {
            let coef = SQRT_LN2 * tilde.sigma_at((n - k) as f64 / n as f64);
            let cell = dyadic_cell(k, z);
            let a = *memo
                .entry((k, cell.0, cell.1))
                .or_insert_with(|| ibrw_cell_noise(seed, k, cell));
            out[i] += coef * a;
        }
    }
    Ok(out)
}

/// Per-level contribution fields of the modified (torus-averaged) walk,
/// `k = k0..=n`. Level k of `S_z` is `2^{−k} σ((n−k)/n) ×` (window sum of
/// the canonical noise grid over the 2^k × 2^k anchor window ending at z),
/// evaluated for all z at once with a wrapped prefix-sum table.
pub(crate) fn mibrw_level_fields(
    p: &StepProfile,
    gs: GridSize,
    k0: u32,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    check_brw_size(gs)?;
    let n = gs.n;
    if k0 > n {
        return Err(Error::range(format!("truncation k0={k0} outside 0..={n}")));
    }
    let nn = gs.side() as usize;
    let mut levels = Vec::with_capacity((n - k0 + 1) as usize);
    for k in k0..=n {
        let side = 1usize << k;
        let coef = p.sigma_at((n - k) as f64 / n as f64) / side as f64;
        // canonical noise grid: one draw per torus anchor class, row-major
        let mut srng = rng::stream(seed, &[tag::MIBRW, n as u64, k as u64]);
        let b: Vec<f64> = (0..nn * nn).map(|_| srng.sample(StandardNormal)).collect();
        // wrapped prefix table over anchors u ∈ [−(side−1), N−1] per axis
        let ew = nn + side - 1;
        let mut pref = vec![0.0f64; (ew + 1) * (ew + 1)];
        for i in 0..ew {
            let sy = (i + nn + 1 - side) % nn;
            for j in 0..ew {
                let sx = (j + nn + 1 - side) % nn;
                pref[(i + 1) * (ew + 1) + (j + 1)] = b[sy * nn + sx]
                    + pref[i * (ew + 1) + (j + 1)]
                    + pref[(i + 1) * (ew + 1) + j]
                    - pref[i * (ew + 1) + j];
            }
        }
        let mut field = vec![0.0; nn * nn];
        for y in 0..nn {
            let r0 = y * (ew + 1);
            let r1 = (y + side) * (ew + 1);
            for x in 0..nn {
                let s = pref[r1 + x + side] - pref[r0 + x + side] - pref[r1 + x] + pref[r0 + x];
                field[y * nn + x] = coef * s;
            }
        }
        levels.push(field);
    }
    Ok(levels)
}

/// Modified inhomogeneous branching random walk `S^{N,k0}`; `k0 = 0` is the
/// full field, `k0 > 0` drops the coarsest levels (truncated variant).
pub fn sample_mibrw(p: &StepProfile, gs: GridSize, k0: u32, seed: u64) -> Result<FieldSample> {
    let levels = mibrw_level_fields(p, gs, k0, seed)?;
    let nn = gs.vertex_count();
    let mut values = vec![0.0; nn];
    for level in &levels {
        for (v, l) in values.iter_mut().zip(level) {
            *v += l;
        }
    }
    Ok(FieldSample {
        kind: if k0 == 0 { FieldKind::Mibrw } else { FieldKind::Tmibrw },
        gs,
        seed,
        values,
        k0,
        t: None,
        profile: Some(p.clone()),
        levels: Some(levels),
        coupling: None,
    })
}

/// Fast path that only materialises the summed field.
pub(crate) fn mibrw_values(p: &StepProfile, gs: GridSize, k0: u32, seed: u64) -> Result<Vec<f64>> {
    // identical arithmetic to sample_mibrw, level buffers dropped eagerly
    let n = gs.n;
    if k0 > n {
        return Err(Error::range(format!("truncation k0={k0} outside 0..={n}")));
    }
    check_brw_size(gs)?;
    let nn = gs.vertex_count();
    let mut values = vec![0.0; nn];
    for k in k0..=n {
        let level = mibrw_single_level(p, gs, k, seed);
        for (v, l) in values.iter_mut().zip(&level) {
            *v += l;
        }
    }
    Ok(values)
}

fn mibrw_single_level(p: &StepProfile, gs: GridSize, k: u32, seed: u64) -> Vec<f64> {
    mibrw_level_fields(p, gs, k, seed)
        .map(|mut ls| ls.swap_remove(0))
        .expect("validated size")
}

/// Reusable buffers for [`mibrw_max`] replicate loops.
pub(crate) struct WalkScratch {
    b: Vec<f64>,
    rw: Vec<f64>,
    acc: Vec<f64>,
    colsum: Vec<f64>,
}

impl WalkScratch {
    pub(crate) fn new(gs: GridSize) -> Self {
        let nn = gs.vertex_count();
        WalkScratch {
            b: vec![0.0; nn],
            rw: vec![0.0; nn],
            acc: vec![0.0; nn],
            colsum: vec![0.0; gs.side() as usize],
        }
    }
}

/// Maximum of the summed walk. Same noise streams and window arithmetic as
/// [`sample_mibrw`], but with sliding window sums and reused buffers instead
/// of per-level prefix tables — the replicate-heavy tail experiments live on
/// this path. Agrees with the field sampler up to summation-order rounding.
pub(crate) fn mibrw_max(
    p: &StepProfile,
    gs: GridSize,
    k0: u32,
    seed: u64,
    s: &mut WalkScratch,
) -> Result<f64> {
    check_brw_size(gs)?;
    let n = gs.n;
    if k0 > n {
        return Err(Error::range(format!("truncation k0={k0} outside 0..={n}")));
    }
    let nn = gs.side() as usize;
    s.acc.fill(0.0);
    for k in k0..=n {
        let side = 1usize << k;
        let coef = p.sigma_at((n - k) as f64 / n as f64) / side as f64;
        let mut srng = rng::stream(seed, &[tag::MIBRW, n as u64, k as u64]);
        for x in s.b.iter_mut() {
            *x = srng.sample(StandardNormal);
        }
        if side == 1 {
            for (a, &bv) in s.acc.iter_mut().zip(&s.b) {
                *a += coef * bv;
            }
            continue;
        }
        // row pass: rw[y][x] = sum of b[y][x-side+1 ..= x], wrapped
        for y in 0..nn {
            let row = &s.b[y * nn..(y + 1) * nn];
            let out = &mut s.rw[y * nn..(y + 1) * nn];
            let mut run = row[0];
            for j in 1..side {
                run += row[nn - j];
            }
            out[0] = run;
            for x in 1..nn {
                run += row[x] - row[(x + nn - side) % nn];
                out[x] = run;
            }
        }
        // column pass over whole rows of the row sums
        let (rw, acc, cs) = (&s.rw, &mut s.acc, &mut s.colsum);
        cs.copy_from_slice(&rw[0..nn]);
        for i in 1..side {
            let r = (nn - i) * nn;
            for (c, &v) in cs.iter_mut().zip(&rw[r..r + nn]) {
                *c += v;
            }
        }
        for x in 0..nn {
            acc[x] += coef * cs[x];
        }
        for y in 1..nn {
            let add = y * nn;
            let sub = ((y + nn - side) % nn) * nn;
            for x in 0..nn {
                cs[x] += rw[add + x] - rw[sub + x];
                acc[add + x] += coef * cs[x];
            }
        }
    }
    Ok(s.acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// `base + a_v · X` with one shared standard normal `X`.
pub fn sample_coupled(base: &FieldSample, a: &[f64], seed: u64) -> Result<FieldSample> {
    if a.len() != base.values.len() {
        return Err(Error::domain(format!(
            "coupling amplitudes have length {}, field has {}",
            a.len(),
            base.values.len()
        )));
    }
    if let Some(i) = a.iter().position(|&x| x < 0.0) {
        let v = base.gs.vertex_at(i);
        return Err(Error::KappaTooSmall {
            x: v.x,
            y: v.y,
            detail: format!("coupling amplitude a = {}", a[i]),
        });
    }
    let x = rng::normal_from_key(rng::mix(&[base.seed, seed, tag::COUPLING]));
    let values: Vec<f64> = base.values.iter().zip(a).map(|(v, ai)| v + ai * x).collect();
    Ok(FieldSample {
        kind: FieldKind::Coupled,
        gs: base.gs,
        seed,
        values,
        k0: base.k0,
        t: base.t,
        profile: base.profile.clone(),
        levels: None,
        coupling: Some(CouplingExtra { a: a.to_vec(), x }),
    })
}

// ---------------------------------------------------------------------------
// field dumps

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    kind: FieldKind,
    n: u32,
    seed: u64,
    k0: u32,
    t: Option<u32>,
    profile: Option<(Vec<f64>, Vec<f64>)>,
}

impl DumpHeader {
    fn of(s: &FieldSample) -> Self {
        DumpHeader {
            kind: s.kind,
            n: s.gs.n,
            seed: s.seed,
            k0: s.k0,
            t: s.t,
            profile: s.profile.as_ref().map(|p| (p.sigmas().to_vec(), p.lambdas().to_vec())),
        }
    }
}

const DUMP_MAGIC: &[u8; 8] = b"SIDGFF01";

/// Write a field dump; the format is chosen by extension: `.csv` (JSON
/// header line prefixed with `#`, then an N×N grid) or anything else binary
/// (magic, JSON header, little-endian f64 grid).
pub fn write_field(sample: &FieldSample, path: &Path) -> Result<()> {
    let header = serde_json::to_string(&DumpHeader::of(sample))
        .map_err(|e| Error::Internal(format!("header encode: {e}")))?;
    let io = |e: std::io::Error| Error::Internal(format!("write {}: {e}", path.display()));
    let nn = sample.gs.side() as usize;
    if path.extension().is_some_and(|e| e == "csv") {
        let mut out = String::with_capacity(nn * nn * 8);
        out.push_str("# ");
        out.push_str(&header);
        out.push('\n');
        for y in 0..nn {
            for x in 0..nn {
                if x > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{:.17e}", sample.values[y * nn + x]));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(io)
    } else {
        let mut bytes = Vec::with_capacity(16 + header.len() + sample.values.len() * 8);
        bytes.extend_from_slice(DUMP_MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        for v in &sample.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(io)
    }
}

/// Read a dump produced by [`write_field`] (levels are not retained).
pub fn read_field(path: &Path) -> Result<FieldSample> {
    let io = |e: std::io::Error| Error::Internal(format!("read {}: {e}", path.display()));
    let parse_header = |s: &str| -> Result<DumpHeader> {
        serde_json::from_str(s).map_err(|e| Error::domain(format!("bad dump header: {e}")))
    };
    let (header, values): (DumpHeader, Vec<f64>) =
        if path.extension().is_some_and(|e| e == "csv") {
            let text = std::fs::read_to_string(path).map_err(io)?;
            let mut lines = text.lines();
            let first = lines.next().ok_or_else(|| Error::domain("empty dump"))?;
            let header = parse_header(first.trim_start_matches(['#', ' ']))?;
            let mut values = Vec::new();
            for line in lines {
                for tok in line.split(',') {
                    values.push(
                        tok.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::domain(format!("bad value {tok:?}: {e}")))?,
                    );
                }
            }
            (header, values)
        } else {
            let mut f = std::fs::File::open(path).map_err(io)?;
            let mut magic = [0u8; 8];
            f.read_exact(&mut magic).map_err(io)?;
            if &magic != DUMP_MAGIC {
                return Err(Error::domain("not a field dump"));
            }
            let mut len4 = [0u8; 4];
            f.read_exact(&mut len4).map_err(io)?;
            let mut hbytes = vec![0u8; u32::from_le_bytes(len4) as usize];
            f.read_exact(&mut hbytes).map_err(io)?;
            let header = parse_header(std::str::from_utf8(&hbytes).map_err(|_| {
                Error::domain("dump header is not UTF-8")
            })?)?;
            let mut rest = Vec::new();
            f.read_to_end(&mut rest).map_err(io)?;
            let values = rest
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            (header, values)
        };
    let gs = GridSize::new(header.n);
    if values.len() != gs.vertex_count() {
        return Err(Error::domain(format!(
            "dump holds {} values, expected {}",
            values.len(),
            gs.vertex_count()
        )));
    }
    let profile = match header.profile {
        Some((s, l)) => Some(StepProfile::new_strict(s, l)?),
        None => None,
    };
    Ok(FieldSample {
        kind: header.kind,
        gs,
        seed: header.seed,
        values,
        k0: header.k0,
        t: header.t,
        profile,
        levels: None,
        coupling: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::GridSize;
    use approx::assert_relative_eq;

    fn two_scale() -> StepProfile {
        StepProfile::new(vec![1.5f64.sqrt(), 0.5f64.sqrt()], vec![0.5, 1.0]).unwrap()
    }

    #[test]
    fn dgff_deterministic_and_boundary_zero() {
        let gs = GridSize::new(3);
        let a = sample_dgff(gs, 11).unwrap();
        let b = sample_dgff(gs, 11).unwrap();
        let c = sample_dgff(gs, 12).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        for v in gs.rect().boundary_vertices() {
            assert_eq!(a.value(v), 0.0);
        }
        assert!(a.values.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn dgff_variance_matches_green() {
        let gs = GridSize::new(3);
        let g = crate::green::green_matrix(gs.rect()).unwrap();
        let c = Vertex::new(4, 4);
        let reps = 20_000;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for rep in 0..reps {
            let x = sample_dgff(gs, rng::replicate_seed(5, rep)).unwrap().value(c);
            s1 += x;
            s2 += x * x;
        }
        let nf = reps as f64;
        let var = s2 / nf - (s1 / nf) * (s1 / nf);
        // Var of the sample variance of a Gaussian ≈ 2σ⁴/n
        let se = (2.0 / nf).sqrt() * g.value(c, c);
        assert!(
            (var - g.value(c, c)).abs() < 3.0 * se,
            "empirical {var} vs exact {} (se {se})",
            g.value(c, c)
        );
    }

    #[test]
    fn psi_reduces_to_dgff_for_uniform_profile() {
        let gs = GridSize::new(4);
        let phi = sample_dgff(gs, 99).unwrap();
        let psi = sample_psi(&StepProfile::uniform(), gs, 99).unwrap();
        assert_eq!(phi.values, psi.values);
    }

    #[test]
    fn psi_boundary_zero_and_deterministic() {
        let gs = GridSize::new(4);
        let p = two_scale();
        let a = sample_psi(&p, gs, 3).unwrap();
        let b = sample_psi(&p, gs, 3).unwrap();
        assert_eq!(a.values, b.values);
        for v in gs.rect().boundary_vertices() {
            assert_eq!(a.value(v), 0.0);
        }
    }

    #[test]
    fn ibrw_time_zero_is_constant_and_full_time_varies() {
        let gs = GridSize::new(3);
        let s = sample_ibrw(&StepProfile::uniform(), gs, 0, 7).unwrap();
        let first = s.values[0];
        assert!(s.values.iter().all(|&v| v == first));
        let full = sample_ibrw(&StepProfile::uniform(), gs, 3, 7).unwrap();
        assert!(full.values.iter().any(|&v| v != full.values[0]));
    }

    #[test]
    fn ibrw_lazy_matches_full_grid() {
        let gs = GridSize::new(3);
        let p = two_scale();
        for t in [0, 1, 3] {
            let full = sample_ibrw(&p, gs, t, 21).unwrap();
            let pts: Vec<Vertex> = gs.vertices().collect();
            let lazy = ibrw_at(&p, gs, t, 21, &pts).unwrap();
            for (i, v) in pts.iter().enumerate() {
                assert_eq!(lazy[i], full.value(*v));
            }
        }
    }

    #[test]
    fn ibrw_shares_coarse_levels_across_cells() {
        // two vertices in different BD_0 cells of one BD_1 box share levels ≥ 1
        let gs = GridSize::new(2);
        let p = StepProfile::uniform();
        let s = sample_ibrw(&p, gs, 2, 13).unwrap();
        let (v, w) = (Vertex::new(0, 0), Vertex::new(1, 0));
        let shared: f64 = (1..=2)
            .map(|k| SQRT_LN2 * ibrw_cell_noise(13, k, dyadic_cell(k, v)))
            .sum();
        assert_relative_eq!(s.value(v) - s.value(w), (s.value(v) - shared) - (s.value(w) - shared));
        assert_eq!(dyadic_cell(1, v), dyadic_cell(1, w));
        assert_ne!(dyadic_cell(0, v), dyadic_cell(0, w));
    }

    /// Direct O(N²·4^k) oracle: sum the noise of every covering torus box.
    fn mibrw_naive(p: &StepProfile, gs: GridSize, k0: u32, seed: u64) -> Vec<f64> {
        let n = gs.n;
        let nn = gs.side() as usize;
        let mut values = vec![0.0; nn * nn];
        for k in k0..=n {
            let side = 1i64 << k;
            let coef = p.sigma_at((n - k) as f64 / n as f64) / side as f64;
            let mut srng = rng::stream(seed, &[tag::MIBRW, n as u64, k as u64]);
            let b: Vec<f64> = (0..nn * nn).map(|_| srng.sample(StandardNormal)).collect();
            for z in gs.vertices() {
                let mut sum = 0.0;
                for ay in 0..nn as i64 {
                    for ax in 0..nn as i64 {
                        let dx = (z.x - ax).rem_euclid(nn as i64);
                        let dy = (z.y - ay).rem_euclid(nn as i64);
                        if dx < side && dy < side {
                            sum += b[ay as usize * nn + ax as usize];
                        }
                    }
                }
                values[gs.index_of(z)] += coef * sum;
            }
        }
        values
    }

    #[test]
    fn mibrw_prefix_sums_match_naive_summation() {
        for n in 1..=3u32 {
            let gs = GridSize::new(n);
            for k0 in [0, 1, n] {
                let p = two_scale();
                let fast = sample_mibrw(&p, gs, k0, 17).unwrap();
                let naive = mibrw_naive(&p, gs, k0, 17);
                for i in 0..naive.len() {
                    assert_relative_eq!(fast.values[i], naive[i], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn sliding_window_maximum_matches_field_sampler() {
        for n in [2u32, 4, 5] {
            let gs = GridSize::new(n);
            let mut scratch = WalkScratch::new(gs);
            for k0 in [0, 1, n] {
                for seed in [3u64, 91, 2024] {
                    let p = two_scale();
                    let fast = mibrw_max(&p, gs, k0, seed, &mut scratch).unwrap();
                    let slow = sample_mibrw(&p, gs, k0, seed).unwrap().max_value();
                    assert_relative_eq!(fast, slow, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn mibrw_top_level_only_for_full_truncation() {
        let gs = GridSize::new(3);
        let s = sample_mibrw(&StepProfile::uniform(), gs, 3, 2).unwrap();
        assert_eq!(s.kind, FieldKind::Tmibrw);
        assert_eq!(s.levels.as_ref().unwrap().len(), 1);
        // the k = n window covers the whole torus: every vertex identical
        let first = s.values[0];
        for &v in &s.values {
            assert_relative_eq!(v, first, epsilon = 1e-12);
        }
    }

    #[test]
    fn mibrw_paths_sum_levels() {
        let gs = GridSize::new(3);
        let p = two_scale();
        let s = sample_mibrw(&p, gs, 0, 23).unwrap();
        let v = Vertex::new(3, 5);
        assert_relative_eq!(s.path_value(v, 3).unwrap(), {
            let levels = s.levels.as_ref().unwrap();
            let idx = gs.index_of(v);
            levels[0][idx] + levels[1][idx] + levels[2][idx] + levels[3][idx]
        });
        assert_relative_eq!(s.path_value(v, gs.n).unwrap(), s.value(v), epsilon = 1e-12);
        let fast = mibrw_values(&p, gs, 0, 23).unwrap();
        assert_eq!(fast, s.values);
    }

    #[test]
    fn coupled_field_behaviour() {
        let gs = GridSize::new(3);
        let base = sample_dgff(gs, 31).unwrap();
        let zeros = vec![0.0; base.values.len()];
        let same = sample_coupled(&base, &zeros, 1).unwrap();
        assert_eq!(same.values, base.values);
        let a = vec![0.5; base.values.len()];
        let c = sample_coupled(&base, &a, 1).unwrap();
        let x = c.coupling.as_ref().unwrap().x;
        for i in 0..a.len() {
            assert_relative_eq!(c.values[i], base.values[i] + 0.5 * x);
        }
        let mut bad = a.clone();
        bad[5] = -0.1;
        assert!(matches!(
            sample_coupled(&base, &bad, 1),
            Err(Error::KappaTooSmall { .. })
        ));
    }

    #[test]
    fn dump_round_trips() {
        let gs = GridSize::new(3);
        let s = sample_mibrw(&two_scale(), gs, 1, 41).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["f.bin", "f.csv"] {
            let path = dir.path().join(name);
            write_field(&s, &path).unwrap();
            let r = read_field(&path).unwrap();
            assert_eq!(r.kind, FieldKind::Tmibrw);
            assert_eq!(r.gs.n, 3);
            assert_eq!(r.seed, 41);
            assert_eq!(r.k0, 1);
            for (a, b) in r.values.iter().zip(&s.values) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
            assert_eq!(r.profile.as_ref().unwrap().pieces(), 2);
        }
    }
}
