//! Batch front-end for the verification library. One experiment per
//! invocation; config precedence is flags > config file > defaults; the
//! resolved config is echoed on stderr and embedded in every artifact.
//! Exit codes: 0 success, 1 validation error, 2 failed verdict.

mod config;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sidgff::moments::MomentMethod;
use sidgff::{Direction, Error, FieldKind, Result};

use config::{resolve_profile, FileConfig, Format, Resolved, ResolvedProfile};
use runs::{Outcome, VERSION};

#[derive(Parser)]
#[command(name = "sidgff", version = VERSION)]
/// Simulation experiments for the scale-inhomogeneous free field
struct Cli {
    /// experiment config file (JSON, or TOML with a .toml extension)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// RNG seed (never taken from the clock; default 0)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// write the artifact here instead of stdout
    #[arg(long, global = true, value_name = "PATH")]
    output: Option<PathBuf>,
    /// artifact format; tabular commands default to csv, the rest to json
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// cap the worker-thread count
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ProfileOpt {
    /// preset (uniform | convex2 | concave2) or a JSON/TOML file with
    /// sigmas and lambdas
    #[arg(long, conflicts_with_all = ["sigmas", "lambdas"])]
    profile: Option<String>,
    /// inline piece amplitudes
    #[arg(long, num_args = 1.., value_delimiter = ',', requires = "lambdas")]
    sigmas: Option<Vec<f64>>,
    /// inline right piece endpoints, increasing to 1
    #[arg(long, num_args = 1.., value_delimiter = ',', requires = "sigmas")]
    lambdas: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Effective profile: hull pieces, log-correction weights, centring table
    Profile {
        #[command(flatten)]
        profile: ProfileOpt,
        /// grid exponents for the centring table
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        n_list: Option<Vec<u32>>,
    },
    /// Sample field maxima and summarise the pool
    Sample {
        #[command(flatten)]
        profile: ProfileOpt,
        /// field kind: dgff | psi | ibrw | mibrw | tmibrw
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        n: Option<u32>,
        /// truncation level for tmibrw
        #[arg(long)]
        k0: Option<u32>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Covariance-lemma deviation sweep with growth verdicts
    CovCheck {
        #[command(flatten)]
        profile: ProfileOpt,
        /// sweep of grid exponents: "3..6" (inclusive) or "3,4,5"
        #[arg(long)]
        n: Option<String>,
        /// cov-comp | increments
        #[arg(long)]
        lemma: Option<String>,
        /// bulk margin for the increments lemma
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Build a comparison coupling and test its tail inequality
    Compare {
        #[command(flatten)]
        profile: ProfileOpt,
        /// upper | lower | mean-upper | mean-lower
        #[arg(long)]
        direction: Option<String>,
        #[arg(long)]
        n: Option<u32>,
        /// enlargement exponent (upper/lower); smallest working value when absent
        #[arg(long)]
        kappa: Option<u32>,
        /// truncation level (mean-lower); smallest working value when absent
        #[arg(long)]
        k0: Option<u32>,
        #[arg(long)]
        replicates: Option<usize>,
        /// thresholds for the tail inequality
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
    },
    /// Empirical tail points and rate fits for a field maximum
    Tails {
        #[command(flatten)]
        profile: ProfileOpt,
        #[arg(long)]
        n: Option<u32>,
        /// field kind: dgff | psi | ibrw | mibrw | tmibrw
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        k0: Option<u32>,
        #[arg(long)]
        replicates: Option<usize>,
        /// measure tails from the pool mean instead of the theory centring
        #[arg(long)]
        recentre: bool,
        /// right-tail offsets (default: quarter steps over the fit window)
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        x_grid: Option<Vec<f64>>,
        /// left-tail depths (default: quarter steps over the fit window)
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
        /// which tail the csv rows carry: right | left
        #[arg(long)]
        side: Option<String>,
    },
    /// Path-event moments: E[h], E[h^2], Paley-Zygmund bound vs direct tail
    SecondMoment {
        #[command(flatten)]
        profile: ProfileOpt,
        #[arg(long)]
        n: Option<u32>,
        /// centring shifts y >= 0
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        y_grid: Option<Vec<f64>>,
        /// tube amplitude
        #[arg(long)]
        cf: Option<f64>,
        /// first-moment method: monte-carlo | semi-analytic | brute-force
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        replicates: Option<usize>,
    },
}

fn need<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::domain(format!("missing {what}: pass the flag or set it in the config file")))
}

fn merged_profile(opt: &ProfileOpt, file: &FileConfig) -> Result<(ResolvedProfile, sidgff::StepProfile)> {
    let (source, p) = resolve_profile(
        opt.sigmas.as_deref(),
        opt.lambdas.as_deref(),
        opt.profile.as_deref(),
        file.profile.as_ref(),
    )?;
    let resolved =
        ResolvedProfile { source, sigmas: p.sigmas().to_vec(), lambdas: p.lambdas().to_vec() };
    Ok((resolved, p))
}

fn base_resolved(
    command: &'static str,
    default_format: Format,
    cli: &Cli,
    file: &FileConfig,
    profile: ResolvedProfile,
) -> Resolved {
    let mut r = Resolved::new(command, cli.format.or(file.format).unwrap_or(default_format), profile);
    r.seed = cli.seed.or(file.seed).unwrap_or(0);
    r.output = cli
        .output
        .clone()
        .or_else(|| file.output.clone())
        .map(|p| p.display().to_string());
    r.threads = cli.threads.or(file.threads);
    r
}

fn parse_with<T: std::str::FromStr<Err = Error>>(
    flag: Option<&str>,
    file: Option<&str>,
    default: T,
) -> Result<T> {
    match flag.or(file) {
        Some(s) => s.parse(),
        None => Ok(default),
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(t) = cli.threads.or(file.threads) {
        if t == 0 {
            return Err(Error::domain("--threads must be positive"));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }

    type Runner = fn(&Resolved, &sidgff::StepProfile) -> Result<Outcome>;
    let (resolved, p, runner): (Resolved, _, Runner) = match &cli.cmd {
            Cmd::Profile { profile, n_list } => {
                let (rp, p) = merged_profile(profile, &file)?;
                let mut r = base_resolved("profile", Format::Json, cli, &file, rp);
                r.n_list = Some(
                    n_list.clone().or_else(|| file.n_list.clone()).unwrap_or_else(|| (4..=10).collect()),
                );
                (r, p, runs::profile_run)
            }
            Cmd::Sample { profile, kind, n, k0, replicates } => {
                let (rp, p) = merged_profile(profile, &file)?;
                let mut r = base_resolved("sample", Format::Csv, cli, &file, rp);
                r.kind = Some(need(kind.as_deref().or(file.kind.as_deref()), "--kind")?.parse()?);
                r.n = Some(need(n.or(file.n), "--n")?);
                r.k0 = Some(k0.or(file.k0).unwrap_or(0));
                r.replicates = Some(replicates.or(file.replicates).unwrap_or(1000));
                (r, p, runs::sample_run)
            }
            Cmd::CovCheck { profile, n, lemma, delta } => {
                let (rp, p) = merged_profile(profile, &file)?;
                let mut r = base_resolved("cov-check", Format::Json, cli, &file, rp);
                let sweep = need(n.as_deref().or(file.n_sweep.as_deref()), "--n sweep")?;
                r.n_sweep = Some(config::parse_sweep(sweep)?);
                let lemma = lemma
                    .as_deref()
                    .or(file.lemma.as_deref())
                    .unwrap_or("cov-comp")
                    .replace('_', "-");
                if lemma != "cov-comp" && lemma != "increments" {
                    return Err(Error::domain(format!(
                        "unknown lemma '{lemma}' (want cov-comp | increments)"
                    )));
                }
                r.lemma = Some(lemma);
                r.delta = Some(delta.or(file.delta).unwrap_or(0.25));
                (r, p, runs::cov_check_run)
            }
            Cmd::Compare { profile, direction, n, kappa, k0, replicates, lambda_grid } => {
                let (rp, p) = merged_profile(profile, &file)?;
                let mut r = base_resolved("compare", Format::Json, cli, &file, rp);
                let dir: Direction =
                    need(direction.as_deref().or(file.direction.as_deref()), "--direction")?.parse()?;
                r.direction = Some(dir);
                r.n = Some(need(n.or(file.n), "--n")?);
                r.kappa = kappa.or(file.kappa);
                r.k0 = k0.or(file.k0);
                r.replicates = Some(replicates.or(file.replicates).unwrap_or(400));
                r.lambda_grid = lambda_grid.clone().or_else(|| file.lambda_grid.clone());
                (r, p, runs::compare_run)
            }
            Cmd::Tails { profile, n, kind, k0, replicates, recentre, x_grid, lambda_grid, side } => {
                let (rp, p) = merged_profile(profile, &file)?;
                let mut r = base_resolved("tails", Format::Csv, cli, &file, rp);
                r.n = Some(need(n.or(file.n), "--n")?);
                r.kind = Some(parse_with(
                    kind.as_deref(),
                    file.kind.as_deref(),
                    FieldKind::Mibrw,
                )?);
                r.k0 = Some(k0.or(file.k0).unwrap_or(0));
                r.replicates = Some(replicates.or(file.replicates).unwrap_or(20_000));
                r.recentre = Some(*recentre || file.recentre.unwrap_or(false));
                r.x_grid = x_grid.clone().or_else(|| file.x_grid.clone());
                r.lambda_grid = lambda_grid.clone().or_else(|| file.lambda_grid.clone());
                let side = side.as_deref().or(file.side.as_deref()).unwrap_or("right").to_string();
                if side != "right" && side != "left" {
                    return Err(Error::domain(format!("unknown side '{side}' (want right | left)")));
                }
                r.side = Some(side);
                (r, p, runs::tails_run)
            }
            Cmd::SecondMoment { profile, n, y_grid, cf, method, replicates } => {
                let (rp, p) = merged_profile(profile, &file)?;
                let mut r = base_resolved("second-moment", Format::Csv, cli, &file, rp);
                r.n = Some(need(n.or(file.n), "--n")?);
                r.y_grid =
                    Some(y_grid.clone().or_else(|| file.y_grid.clone()).unwrap_or_else(|| vec![0.0, 1.0, 2.0]));
                r.cf = Some(cf.or(file.cf).unwrap_or(2.0));
                r.method = Some(parse_with(
                    method.as_deref(),
                    file.method.as_deref(),
                    MomentMethod::MonteCarlo,
                )?);
                r.replicates = Some(replicates.or(file.replicates).unwrap_or(10_000));
                (r, p, runs::second_moment_run)
            }
        };

    eprintln!(
        "config {}",
        serde_json::to_string(&resolved).map_err(|e| Error::Internal(e.to_string()))?
    );
    let outcome = runner(&resolved, &p)?;
    match &resolved.output {
        Some(path) => std::fs::write(path, &outcome.body)
            .map_err(|e| Error::domain(format!("cannot write {path}: {e}")))?,
        None => print!("{}", outcome.body),
    }
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(outcome) => ExitCode::from(outcome.code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::HypothesisViolation(_) | Error::KappaTooSmall { .. } => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
