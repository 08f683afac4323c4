use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use contiv::effects::VarianceRoute;
use contiv::{Error, Method, Quantity, Result, Target};

use crate::config::{Bandwidth, Command, Format, NuisanceKind, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "contiv", version, about = "Doubly robust dose-response and local IV estimation with a continuous instrument")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Sub {
    /// Dose-response curve or derivative of one target on a grid.
    EstimateCurve,
    /// Local IV curve: outcome derivative over treatment derivative.
    EstimateLiv,
    /// Maximal complier proportion and its LATE (instrument on [0, 1]).
    EstimateLate,
    /// Risk-based bandwidth selection; writes the risk table.
    SelectBandwidth,
    /// Monte Carlo study on a shipped process.
    Simulate,
    /// Writes a sample from a shipped process as CSV.
    Generate,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::EstimateCurve => Command::EstimateCurve,
            Sub::EstimateLiv => Command::EstimateLiv,
            Sub::EstimateLate => Command::EstimateLate,
            Sub::SelectBandwidth => Command::SelectBandwidth,
            Sub::Simulate => Command::Simulate,
            Sub::Generate => Command::Generate,
        }
    }
}

/// Flags override the configuration file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,

    /// Input CSV with columns z, a, y, x1..xd.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Shipped data-generating process (data source or nuisance truth).
    #[arg(long, global = true)]
    pub dgp: Option<String>,
    /// Sample size when generating data.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Accept non-binary treatment values.
    #[arg(long, global = true)]
    pub continuous_treatment: bool,
    /// Map the instrument onto [0, 1] before estimation.
    #[arg(long, global = true)]
    pub rescale_instrument: bool,

    /// local-poly or smooth.
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// outcome or treatment.
    #[arg(long, global = true)]
    pub target: Option<String>,
    /// value or derivative.
    #[arg(long, global = true)]
    pub quantity: Option<String>,
    /// epanechnikov, gaussian, gaussian4 or gaussian6.
    #[arg(long, global = true)]
    pub kernel: Option<String>,
    /// Local polynomial degree.
    #[arg(long, global = true)]
    pub p: Option<usize>,
    /// `auto` or a positive number.
    #[arg(long, global = true)]
    pub bandwidth: Option<String>,
    /// Treatment bandwidth for the LIV denominator.
    #[arg(long, global = true)]
    pub bandwidth_treatment: Option<f64>,
    /// Comma-separated bandwidth candidates.
    #[arg(long, global = true, value_delimiter = ',')]
    pub candidates: Option<Vec<f64>>,
    /// Risk table from `select-bandwidth` used by `--bandwidth auto`.
    #[arg(long, global = true)]
    pub risk_table: Option<PathBuf>,

    /// Number of evaluation points.
    #[arg(long, global = true)]
    pub grid_points: Option<usize>,
    /// Grid start (default: 5% instrument quantile).
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub grid_lo: Option<f64>,
    /// Grid end (default: 95% instrument quantile).
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub grid_hi: Option<f64>,
    /// Use the single fold assignment instead of all three rotations.
    #[arg(long, global = true)]
    pub no_rotate: bool,
    /// Seed for data generation, fold assignment and synthetic nuisances.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// learned, true or synthetic.
    #[arg(long, global = true)]
    pub nuisance: Option<String>,
    /// Synthetic nuisance error rate.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Learner for μ(x, z): linear, linear-cubic, local-linear or kernel-ridge.
    #[arg(long, global = true)]
    pub outcome_learner: Option<String>,
    /// Learner for λ(x, z); same choices as the outcome learner.
    #[arg(long, global = true)]
    pub treatment_learner: Option<String>,

    /// rate-aware or influence.
    #[arg(long, global = true)]
    pub variance_route: Option<String>,
    /// |θ̂_A| below which LIV points are flagged as weak.
    #[arg(long, global = true)]
    pub relevance_floor: Option<f64>,

    /// Result path; the manifest is written next to it.
    #[arg(long, short = 'o', global = true)]
    pub output: Option<PathBuf>,
    /// csv or json.
    #[arg(long, global = true)]
    pub format: Option<String>,
    /// Worker threads (default: CONTIV_JOBS, then all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Simulation estimand: liv, theta-y, theta-a, tau or lambda-bar.
    #[arg(long, global = true)]
    pub estimand: Option<String>,
    /// Comma-separated estimators.
    #[arg(long, global = true, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    /// Comma-separated sample sizes.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
    /// Comma-separated nuisance rates; `inf` for exact nuisances.
    #[arg(long, global = true, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Monte Carlo replications per cell.
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    /// Local polynomial bandwidth at the reference sample size.
    #[arg(long, global = true)]
    pub sim_h: Option<f64>,
    /// Smooth-method bandwidth at the reference sample size.
    #[arg(long, global = true)]
    pub sim_h_smooth: Option<f64>,
    /// Sample size at which the simulation bandwidths apply.
    #[arg(long, global = true)]
    pub n_ref: Option<usize>,
    /// Bandwidths scale as n^(-1/(2s+1)); `none` keeps them fixed.
    #[arg(long, global = true)]
    pub smoothness: Option<String>,
    /// Truncated evaluation grid size in simulations.
    #[arg(long, global = true)]
    pub sim_grid_points: Option<usize>,
    /// Per-replication curves CSV.
    #[arg(long, global = true)]
    pub replications_output: Option<PathBuf>,
    /// Record wall-clock seconds in the results.
    #[arg(long, global = true)]
    pub timing: bool,
}

fn parse_kind(s: &str) -> Result<NuisanceKind> {
    match s.trim().to_ascii_lowercase().as_str() {
        "learned" => Ok(NuisanceKind::Learned),
        "true" => Ok(NuisanceKind::True),
        "synthetic" => Ok(NuisanceKind::Synthetic),
        other => Err(Error::InvalidInput(format!("unknown nuisance kind `{other}` (learned, true, synthetic)"))),
    }
}

fn parse_target(s: &str) -> Result<Target> {
    match s.trim().to_ascii_lowercase().as_str() {
        "outcome" | "y" => Ok(Target::Outcome),
        "treatment" | "a" => Ok(Target::Treatment),
        other => Err(Error::InvalidInput(format!("unknown target `{other}` (outcome, treatment)"))),
    }
}

fn parse_quantity(s: &str) -> Result<Quantity> {
    match s.trim().to_ascii_lowercase().as_str() {
        "value" => Ok(Quantity::Value),
        "derivative" => Ok(Quantity::Derivative),
        other => Err(Error::InvalidInput(format!("unknown quantity `{other}` (value, derivative)"))),
    }
}

fn parse_format(s: &str) -> Result<Format> {
    match s.trim().to_ascii_lowercase().as_str() {
        "csv" => Ok(Format::Csv),
        "json" => Ok(Format::Json),
        other => Err(Error::InvalidInput(format!("unknown format `{other}` (csv, json)"))),
    }
}

impl Overrides {
    /// Applies every given flag on top of `cfg`.
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        if self.input.is_some() {
            cfg.input = self.input.clone();
        }
        if self.dgp.is_some() {
            cfg.dgp = self.dgp.clone();
        }
        set!(cfg.n, self.n);
        cfg.continuous_treatment |= self.continuous_treatment;
        cfg.rescale_instrument |= self.rescale_instrument;
        set!(cfg.method, self.method.as_deref().map(Method::parse).transpose()?);
        set!(cfg.target, self.target.as_deref().map(parse_target).transpose()?);
        set!(cfg.quantity, self.quantity.as_deref().map(parse_quantity).transpose()?);
        if self.kernel.is_some() {
            cfg.kernel = self.kernel.clone();
        }
        set!(cfg.p, self.p);
        set!(cfg.bandwidth, self.bandwidth.as_deref().map(Bandwidth::parse).transpose()?);
        if self.bandwidth_treatment.is_some() {
            cfg.bandwidth_treatment = self.bandwidth_treatment;
        }
        if self.candidates.is_some() {
            cfg.candidates = self.candidates.clone();
        }
        if self.risk_table.is_some() {
            cfg.risk_table = self.risk_table.clone();
        }
        set!(cfg.grid.points, self.grid_points);
        if self.grid_lo.is_some() {
            cfg.grid.lo = self.grid_lo;
        }
        if self.grid_hi.is_some() {
            cfg.grid.hi = self.grid_hi;
        }
        if self.no_rotate {
            cfg.rotate = false;
        }
        set!(cfg.seed, self.seed);
        set!(cfg.nuisance.kind, self.nuisance.as_deref().map(parse_kind).transpose()?);
        if self.alpha.is_some() {
            cfg.nuisance.alpha = self.alpha;
        }
        set!(cfg.nuisance.outcome_learner, self.outcome_learner.clone());
        set!(cfg.nuisance.treatment_learner, self.treatment_learner.clone());
        set!(cfg.variance_route, self.variance_route.as_deref().map(VarianceRoute::parse).transpose()?);
        set!(cfg.relevance_floor, self.relevance_floor);
        set!(cfg.output, self.output.clone());
        set!(cfg.format, self.format.as_deref().map(parse_format).transpose()?);
        if self.jobs.is_some() {
            cfg.jobs = self.jobs;
        }

        let s = &mut cfg.simulation;
        if self.estimand.is_some() {
            s.estimand = self.estimand.clone();
        }
        set!(s.estimators, self.estimators.clone());
        set!(s.ns, self.ns.clone());
        set!(s.alphas, self.alphas.clone());
        set!(s.reps, self.reps);
        set!(s.h, self.sim_h);
        set!(s.h_smooth, self.sim_h_smooth);
        set!(s.n_ref, self.n_ref);
        if let Some(v) = &self.smoothness {
            s.smoothness = match v.trim() {
                "none" => None,
                t => Some(
                    t.parse::<f64>()
                        .ok()
                        .filter(|g| g.is_finite() && *g > 0.0)
                        .ok_or_else(|| Error::InvalidInput(format!("smoothness must be positive or `none`, got `{t}`")))?,
                ),
            };
        }
        set!(s.grid_points, self.sim_grid_points);
        if self.replications_output.is_some() {
            s.replications_output = self.replications_output.clone();
        }
        s.timing |= self.timing;
        Ok(())
    }
}

impl Cli {
    /// Configuration file (if any) with the flags and the subcommand applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.overrides.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.command = self.command.into();
        self.overrides.apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(args: &[&str]) -> Result<RunConfig> {
        let mut argv = vec!["contiv"];
        argv.extend_from_slice(args);
        Cli::try_parse_from(argv).expect("arguments parse").resolve()
    }

    #[test]
    fn flags_override_defaults() {
        let c = resolve(&[
            "estimate-liv",
            "--dgp",
            "liv-main",
            "--bandwidth",
            "0.4",
            "--method",
            "smooth",
            "--grid-lo",
            "-1.5",
            "--alphas",
            "0.1,inf",
            "--no-rotate",
        ])
        .unwrap();
        assert_eq!(c.command, Command::EstimateLiv);
        assert_eq!(c.bandwidth, Bandwidth::Value(0.4));
        assert_eq!(c.method, Method::Smooth);
        assert_eq!(c.grid.lo, Some(-1.5));
        assert_eq!(c.simulation.alphas, vec![0.1, f64::INFINITY]);
        assert!(!c.rotate);
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "bandwidth = 0.7\nseed = 9\n[grid]\npoints = 11\n").unwrap();
        let p = path.to_str().unwrap();
        let c = resolve(&["estimate-curve", "--config", p, "--seed", "3"]).unwrap();
        assert_eq!((c.bandwidth, c.seed, c.grid.points), (Bandwidth::Value(0.7), 3, 11));
    }

    #[test]
    fn bad_values_map_to_codes() {
        assert_eq!(resolve(&["estimate-curve", "--method", "spline"]).unwrap_err().code(), "cli.invalid_input");
        assert_eq!(resolve(&["estimate-curve", "--kernel", "x"]).map(|c| c.kernel).unwrap(), Some("x".into()));
        assert_eq!(resolve(&["estimate-curve", "--bandwidth", "0"]).unwrap_err().code(), "cli.invalid_input");
    }
}
