use std::fmt;
use std::path::{Path, PathBuf};

use contiv::effects::VarianceRoute;
use contiv::{Error, Method, Quantity, Result, Target};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    #[default]
    EstimateCurve,
    EstimateLiv,
    EstimateLate,
    SelectBandwidth,
    Simulate,
    Generate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::EstimateCurve => "estimate-curve",
            Command::EstimateLiv => "estimate-liv",
            Command::EstimateLate => "estimate-late",
            Command::SelectBandwidth => "select-bandwidth",
            Command::Simulate => "simulate",
            Command::Generate => "generate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Fixed bandwidth or data-driven selection.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Bandwidth {
    #[default]
    Auto,
    Value(f64),
}

impl Bandwidth {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Bandwidth::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|h| h.is_finite() && *h > 0.0)
            .map(Bandwidth::Value)
            .ok_or_else(|| Error::InvalidInput(format!("bandwidth must be `auto` or a positive number, got `{s}`")))
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::Auto => f.write_str("auto"),
            Bandwidth::Value(h) => write!(f, "{h}"),
        }
    }
}

impl Serialize for Bandwidth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Auto => s.serialize_str("auto"),
            Bandwidth::Value(h) => s.serialize_f64(*h),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(h) => Bandwidth::parse(&h.to_string()),
            Raw::Text(s) => Bandwidth::parse(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NuisanceKind {
    /// Regressions and residual-KDE propensity learned on training folds.
    #[default]
    Learned,
    /// Exact surfaces of the generating process.
    True,
    /// Exact surfaces perturbed at rate `n^-alpha`.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceSpec {
    pub kind: NuisanceKind,
    pub alpha: Option<f64>,
    pub outcome_learner: String,
    pub treatment_learner: String,
    pub clip_lower: f64,
    pub clip_upper: f64,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        Self {
            kind: NuisanceKind::Learned,
            alpha: None,
            outcome_learner: "local-linear".into(),
            treatment_learner: "local-linear".into(),
            clip_lower: 0.01,
            clip_upper: 100.0,
        }
    }
}

/// Evaluation grid: `points` equispaced values between `lo` and `hi`
/// (default: the 5% and 95% instrument quantiles).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub points: usize,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { points: 50, lo: None, hi: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    /// `liv`, `theta-y`, `theta-a`, `tau` or `lambda-bar`; defaults per process.
    pub estimand: Option<String>,
    pub estimators: Vec<String>,
    pub ns: Vec<usize>,
    /// Nuisance rates; `inf` means exact nuisances.
    pub alphas: Vec<f64>,
    pub reps: usize,
    /// Local polynomial bandwidth at `n_ref`.
    pub h: f64,
    /// Smooth-approximation bandwidth at `n_ref`.
    pub h_smooth: f64,
    pub n_ref: usize,
    /// When set, bandwidths scale as `n^{-1/(2 smoothness + 1)}`.
    pub smoothness: Option<f64>,
    pub grid_points: usize,
    pub replications_output: Option<PathBuf>,
    pub timing: bool,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            estimand: None,
            estimators: vec!["local-poly".into(), "smooth".into(), "plug-in".into(), "projection-linear".into()],
            ns: vec![2000],
            alphas: vec![0.1, 0.45],
            reps: 100,
            h: 1.6,
            h_smooth: 1.6,
            n_ref: 20000,
            smoothness: None,
            grid_points: 25,
            replications_output: None,
            timing: false,
        }
    }
}

/// Complete description of one run. Every field has a default; a TOML file
/// supplies any subset and command-line flags override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    /// Generate the data from this process when no input file is given.
    pub dgp: Option<String>,
    pub n: usize,
    pub continuous_treatment: bool,
    /// Map the instrument affinely onto `[0, 1]` (complier analysis).
    pub rescale_instrument: bool,
    pub method: Method,
    pub target: Target,
    pub quantity: Quantity,
    pub kernel: Option<String>,
    pub p: usize,
    pub bandwidth: Bandwidth,
    /// Separate treatment bandwidth for LIV curves.
    pub bandwidth_treatment: Option<f64>,
    pub candidates: Option<Vec<f64>>,
    /// Risk table written by `select-bandwidth`, read when `bandwidth = "auto"`.
    pub risk_table: Option<PathBuf>,
    pub grid: GridSpec,
    pub rotate: bool,
    #[serde(with = "seed_repr")]
    pub seed: u64,
    pub nuisance: NuisanceSpec,
    pub variance_route: VarianceRoute,
    pub relevance_floor: f64,
    pub output: PathBuf,
    pub format: Format,
    pub jobs: Option<usize>,
    pub simulation: SimSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::EstimateCurve,
            input: None,
            dgp: None,
            n: 2000,
            continuous_treatment: false,
            rescale_instrument: false,
            method: Method::LocalPoly,
            target: Target::Outcome,
            quantity: Quantity::Value,
            kernel: None,
            p: 2,
            bandwidth: Bandwidth::Auto,
            bandwidth_treatment: None,
            candidates: None,
            risk_table: None,
            grid: GridSpec::default(),
            rotate: true,
            seed: 0,
            nuisance: NuisanceSpec::default(),
            variance_route: VarianceRoute::InfluenceExpansion,
            relevance_floor: contiv::effects::DEFAULT_RELEVANCE_FLOOR,
            output: PathBuf::from("contiv-output.csv"),
            format: Format::Csv,
            jobs: None,
            simulation: SimSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidInput(format!("configuration: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks referenced files and value ranges before any work starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        for path in [&self.input, &self.risk_table].into_iter().flatten() {
            if !path.is_file() {
                return Err(Error::Io(format!("{}: file not found", path.display())));
            }
        }
        let parent = |p: &Path| p.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf);
        let outputs = std::iter::once(&self.output).chain(self.simulation.replications_output.as_ref());
        for out in outputs {
            if let Some(dir) = parent(out) {
                if !dir.is_dir() {
                    return Err(Error::Io(format!("{}: output directory does not exist", dir.display())));
                }
            }
        }
        let needs_data = !matches!(self.command, Command::Simulate);
        if needs_data && self.input.is_none() && self.dgp.is_none() {
            return bad("give an input file or a data-generating process".into());
        }
        if self.command == Command::Generate && self.dgp.is_none() {
            return bad("`generate` needs a data-generating process".into());
        }
        if self.p == 0 {
            return bad("polynomial degree p must be at least 1".into());
        }
        if self.grid.points == 0 {
            return bad("grid needs at least one point".into());
        }
        if let Some(h) = self.bandwidth_treatment {
            if !(h.is_finite() && h > 0.0) {
                return bad(format!("treatment bandwidth must be positive, got {h}"));
            }
        }
        if self.jobs == Some(0) {
            return bad("jobs must be at least 1".into());
        }
        Ok(())
    }
}

/// TOML integers are signed; seeds above `i64::MAX` are written as strings.
mod seed_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*v) {
            Ok(i) => s.serialize_i64(i),
            Err(_) => s.serialize_str(&v.to_string()),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(v),
            Raw::Text(t) => t.trim().parse().map_err(serde::de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn populated_config_round_trips() {
        let c = RunConfig {
            command: Command::EstimateLiv,
            dgp: Some("liv-main".into()),
            bandwidth: Bandwidth::Value(0.1 + 0.2),
            bandwidth_treatment: Some(1.0 / 3.0),
            candidates: Some(vec![0.2, 0.4]),
            method: Method::Smooth,
            target: Target::Treatment,
            quantity: Quantity::Derivative,
            seed: u64::MAX,
            grid: GridSpec { points: 7, lo: Some(-1.25), hi: Some(3.0) },
            nuisance: NuisanceSpec { kind: NuisanceKind::Synthetic, alpha: Some(0.3), ..NuisanceSpec::default() },
            simulation: SimSpec { alphas: vec![0.1, f64::INFINITY], smoothness: Some(3.0), ..SimSpec::default() },
            format: Format::Json,
            jobs: Some(3),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn bandwidth_accepts_auto_and_numbers() {
        assert_eq!(Bandwidth::parse("AUTO").unwrap(), Bandwidth::Auto);
        assert_eq!(Bandwidth::parse("0.4").unwrap(), Bandwidth::Value(0.4));
        assert!(Bandwidth::parse("-1").is_err());
        let c = RunConfig::from_toml("bandwidth = 0.5\n").unwrap();
        assert_eq!(c.bandwidth, Bandwidth::Value(0.5));
        let c = RunConfig::from_toml("bandwidth = \"auto\"\n").unwrap();
        assert_eq!(c.bandwidth, Bandwidth::Auto);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("bandwith = 0.5\n").unwrap_err();
        assert_eq!(e.code(), "cli.invalid_input");
    }

    #[test]
    fn validation_checks_files() {
        let c = RunConfig { input: Some("/nonexistent/data.csv".into()), ..RunConfig::default() };
        assert_eq!(c.validate().unwrap_err().code(), "cli.io");
        let c = RunConfig::default();
        assert_eq!(c.validate().unwrap_err().code(), "cli.invalid_input");
    }
}
