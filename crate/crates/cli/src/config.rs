//! Config plumbing: optional experiment file, flag merging, and the resolved
//! config every artifact embeds. Precedence is flags > file > defaults.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sidgff::moments::MomentMethod;
use sidgff::{Direction, Error, FieldKind, Result, StepProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

/// A profile in a config file: either a preset name / file path, or inline
/// `{ sigmas, lambdas }`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ProfileField {
    Name(String),
    Inline { sigmas: Vec<f64>, lambdas: Vec<f64> },
}

/// On-disk experiment config (JSON or TOML). Every field is optional; the
/// subcommand decides which ones it reads.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub format: Option<Format>,
    pub output: Option<PathBuf>,
    pub threads: Option<usize>,
    pub profile: Option<ProfileField>,
    pub n: Option<u32>,
    /// `cov-check` sweep, e.g. "3..6" or "3,4,5".
    pub n_sweep: Option<String>,
    /// exponents for the `profile` centring table
    pub n_list: Option<Vec<u32>>,
    pub kind: Option<String>,
    pub k0: Option<u32>,
    pub replicates: Option<usize>,
    pub lemma: Option<String>,
    pub delta: Option<f64>,
    pub direction: Option<String>,
    pub kappa: Option<u32>,
    pub cf: Option<f64>,
    pub method: Option<String>,
    pub y_grid: Option<Vec<f64>>,
    pub x_grid: Option<Vec<f64>>,
    pub lambda_grid: Option<Vec<f64>>,
    pub recentre: Option<bool>,
    pub side: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::domain(format!("cannot read config {}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)
                .map_err(|e| Error::domain(format!("bad TOML config {}: {e}", path.display()))),
            _ => serde_json::from_str(&text)
                .map_err(|e| Error::domain(format!("bad JSON config {}: {e}", path.display()))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedProfile {
    /// preset name or file path, absent for inline profiles
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// amplitudes after normalisation to unit integrated variance
    pub sigmas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

/// The fully merged config echoed on stderr and embedded in every artifact.
/// Only the knobs the subcommand consumes are set.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub command: &'static str,
    pub seed: u64,
    pub format: Format,
    // delivery/execution knobs, not experiment identity: results are
    // independent of both, so neither belongs in the embedded config
    #[serde(skip)]
    pub output: Option<String>,
    #[serde(skip)]
    pub threads: Option<usize>,
    pub profile: ResolvedProfile,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_sweep: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<FieldKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k0: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lemma: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<MomentMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recentre: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub side: Option<String>,
}

impl Resolved {
    pub fn new(command: &'static str, format: Format, profile: ResolvedProfile) -> Self {
        Resolved {
            command,
            seed: 0,
            format,
            output: None,
            threads: None,
            profile,
            n: None,
            n_sweep: None,
            n_list: None,
            kind: None,
            k0: None,
            replicates: None,
            lemma: None,
            delta: None,
            direction: None,
            kappa: None,
            cf: None,
            method: None,
            y_grid: None,
            x_grid: None,
            lambda_grid: None,
            recentre: None,
            side: None,
        }
    }
}

fn preset(name: &str) -> Option<StepProfile> {
    let (sigmas, lambdas) = match name {
        "uniform" => (vec![1.0], vec![1.0]),
        "convex2" => (vec![0.5f64.sqrt(), 1.5f64.sqrt()], vec![0.5, 1.0]),
        "concave2" => (vec![1.5f64.sqrt(), 0.5f64.sqrt()], vec![0.5, 1.0]),
        _ => return None,
    };
    Some(StepProfile::new(sigmas, lambdas).expect("presets are valid"))
}

fn profile_from_file(path: &str) -> Result<StepProfile> {
    #[derive(Deserialize)]
    struct Raw {
        sigmas: Vec<f64>,
        lambdas: Vec<f64>,
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::domain(format!("cannot read profile {path}: {e}")))?;
    let raw: Raw = if path.ends_with(".toml") {
        toml::from_str(&text).map_err(|e| Error::domain(format!("bad profile {path}: {e}")))?
    } else {
        serde_json::from_str(&text)
            .map_err(|e| Error::domain(format!("bad profile {path}: {e}")))?
    };
    StepProfile::new(raw.sigmas, raw.lambdas)
}

fn named_profile(name: &str) -> Result<StepProfile> {
    match preset(name) {
        Some(p) => Ok(p),
        None if Path::new(name).exists() => profile_from_file(name),
        None => Err(Error::domain(format!(
            "profile '{name}' is neither a preset (uniform | convex2 | concave2) nor a file"
        ))),
    }
}

/// Resolve the variance profile: inline flags > `--profile` > config file >
/// uniform.
pub fn resolve_profile(
    sigmas: Option<&[f64]>,
    lambdas: Option<&[f64]>,
    name: Option<&str>,
    file: Option<&ProfileField>,
) -> Result<(Option<String>, StepProfile)> {
    if let (Some(s), Some(l)) = (sigmas, lambdas) {
        return Ok((None, StepProfile::new(s.to_vec(), l.to_vec())?));
    }
    if let Some(n) = name {
        return Ok((Some(n.to_string()), named_profile(n)?));
    }
    match file {
        Some(ProfileField::Name(n)) => Ok((Some(n.clone()), named_profile(n)?)),
        Some(ProfileField::Inline { sigmas, lambdas }) => {
            Ok((None, StepProfile::new(sigmas.clone(), lambdas.clone())?))
        }
        None => Ok((Some("uniform".into()), StepProfile::uniform())),
    }
}

/// Parse a sweep spec: "3..6" (inclusive), "3,4,5" or "4".
pub fn parse_sweep(s: &str) -> Result<Vec<u32>> {
    let bad = || Error::domain(format!("bad n sweep '{s}' (want 'a..b' or 'a,b,c')"));
    let ns: Vec<u32> = if let Some((a, b)) = s.split_once("..") {
        let lo: u32 = a.trim().parse().map_err(|_| bad())?;
        let hi: u32 = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse().map_err(|_| bad()))
            .collect::<std::result::Result<_, _>>()?
    };
    if ns.is_empty() || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad());
    }
    Ok(ns)
}
