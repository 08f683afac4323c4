use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use contiv::bandwidth::{self, SelectConfig};
use contiv::dgp::{rescale_unit, DgpName};
use contiv::effects::{self, ComplierConfig, LivConfig};
use contiv::io::{ingest_csv, TreatmentKind};
use contiv::nuisance::{ClipBounds, FixedNuisance, LearnedNuisance, Learner, NuisanceProvider};
use contiv::pseudo::{crossfit_curve, fmt_num, linspace, CurveConfig, Z_975};
use contiv::sim::{self, BandwidthRule, Estimand, Estimator, SimConfig};
use contiv::smooth::{smooth_curve, SmoothConfig};
use contiv::{Dataset, Error, Kernel, Method, Quantity, Result, Target};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Bandwidth, Command, Format, NuisanceKind, RunConfig};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const JOBS_ENV: &str = "CONTIV_JOBS";

/// What a run wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub chosen_h: Option<f64>,
}

/// `<output>.<suffix>`, e.g. `liv.csv` → `liv.csv.manifest.json`.
pub fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Thread count: explicit setting, then `CONTIV_JOBS`, then all cores.
pub fn resolve_jobs(explicit: Option<usize>) -> Result<usize> {
    if let Some(j) = explicit {
        return Ok(j);
    }
    match std::env::var(JOBS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&j| j > 0)
            .ok_or_else(|| Error::InvalidInput(format!("{JOBS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

#[derive(Default)]
struct Report {
    outputs: Vec<PathBuf>,
    chosen_h: Option<f64>,
    bandwidths: Value,
    data: Value,
    nuisance: Value,
    warnings: Vec<String>,
}

/// Validates the configuration, executes the command on a pool of
/// `jobs` threads and writes the outputs plus a manifest.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let jobs = resolve_jobs(cfg.jobs)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let timer = Instant::now();
    let report = pool.install(|| dispatch(cfg))?;
    let manifest = json!({
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "tool": "contiv",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": contiv::VERSION,
        "command": cfg.command.name(),
        "seed": cfg.seed,
        "jobs": jobs,
        "config": serde_json::to_value(cfg).map_err(|e| Error::Io(e.to_string()))?,
        "data": report.data,
        "nuisance": report.nuisance,
        "bandwidth": report.bandwidths,
        "chosen_h": report.chosen_h,
        "outputs": report.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "warnings": report.warnings,
        "timing": { "started_unix": started, "elapsed_seconds": timer.elapsed().as_secs_f64() },
    });
    let path = sibling(&cfg.output, "manifest.json");
    write_text(&path, &(serde_json::to_string_pretty(&manifest).expect("json") + "\n"))?;
    Ok(RunOutcome { outputs: report.outputs, manifest: path, chosen_h: report.chosen_h })
}

fn dispatch(cfg: &RunConfig) -> Result<Report> {
    match cfg.command {
        Command::Simulate => simulate(cfg),
        Command::Generate => generate(cfg),
        _ => {
            let (data, source) = load_data(cfg)?;
            let provider = provider(cfg, &data)?;
            let mut report = Report {
                data: json!({ "n": data.n(), "d": data.d(), "source": source }),
                nuisance: json!({ "kind": cfg.nuisance.kind, "alpha": cfg.nuisance.alpha }),
                ..Report::default()
            };
            match cfg.command {
                Command::EstimateCurve => estimate_curve(cfg, &data, provider.as_ref(), &mut report)?,
                Command::EstimateLiv => estimate_liv(cfg, &data, provider.as_ref(), &mut report)?,
                Command::EstimateLate => estimate_late(cfg, &data, provider.as_ref(), &mut report)?,
                Command::SelectBandwidth => select_bandwidth(cfg, &data, provider.as_ref(), &mut report)?,
                Command::Simulate | Command::Generate => unreachable!(),
            }
            Ok(report)
        }
    }
}

fn dgp_name(cfg: &RunConfig) -> Result<Option<DgpName>> {
    cfg.dgp.as_deref().map(DgpName::parse).transpose()
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, String)> {
    let (data, source) = match (&cfg.input, dgp_name(cfg)?) {
        (Some(path), _) => {
            let kind = if cfg.continuous_treatment { TreatmentKind::Continuous } else { TreatmentKind::Binary };
            (ingest_csv(path, kind)?, path.display().to_string())
        }
        (None, Some(g)) => (g.build().generate(cfg.n, cfg.seed), format!("dgp:{}", g.as_str())),
        (None, None) => return Err(Error::InvalidInput("give an input file or a data-generating process".into())),
    };
    Ok(if cfg.rescale_instrument { (rescale_unit(&data), source) } else { (data, source) })
}

fn provider(cfg: &RunConfig, data: &Dataset) -> Result<Box<dyn NuisanceProvider>> {
    let spec = &cfg.nuisance;
    let need_dgp = || {
        dgp_name(cfg)?.ok_or_else(|| Error::InvalidInput(format!("{:?} nuisances need a data-generating process", spec.kind)))
    };
    Ok(match spec.kind {
        NuisanceKind::Learned => Box::new(LearnedNuisance {
            outcome: Learner::from_name(&spec.outcome_learner)?,
            treatment: Learner::from_name(&spec.treatment_learner)?,
            clip: ClipBounds { lower: spec.clip_lower, upper: spec.clip_upper },
        }),
        NuisanceKind::True => Box::new(FixedNuisance(need_dgp()?.true_nuisance())),
        NuisanceKind::Synthetic => {
            let g = need_dgp()?;
            let gaussian = g
                .gaussian()
                .ok_or_else(|| Error::InvalidInput(format!("`{}` has no synthetic nuisances", g.as_str())))?;
            let alpha = spec.alpha.ok_or_else(|| Error::InvalidInput("synthetic nuisances need `alpha`".into()))?;
            let seed = sim::data_seed(cfg.seed, data.n(), usize::MAX);
            Box::new(FixedNuisance(sim::nuisance_at(&gaussian, alpha, data.n(), seed)?))
        }
    })
}

fn kernel_for(cfg: &RunConfig, method: Method) -> Result<Kernel> {
    match (&cfg.kernel, method) {
        (Some(name), _) => Kernel::from_name(name),
        (None, Method::LocalPoly) => Ok(Kernel::epanechnikov()),
        (None, Method::Smooth) => Kernel::make_high_order(4),
    }
}

fn grid(cfg: &RunConfig, data: &Dataset) -> Vec<f64> {
    let lo = cfg.grid.lo.unwrap_or_else(|| data.z_quantile(0.05));
    let hi = cfg.grid.hi.unwrap_or_else(|| data.z_quantile(0.95));
    linspace(lo, hi, cfg.grid.points)
}

fn select_config(cfg: &RunConfig, target: Target) -> Result<SelectConfig> {
    let mut sc = SelectConfig::new(cfg.method, target);
    sc.p = cfg.p;
    match cfg.method {
        Method::LocalPoly => sc.lp_kernel = kernel_for(cfg, Method::LocalPoly)?,
        Method::Smooth => sc.smooth_kernel = kernel_for(cfg, Method::Smooth)?,
    }
    sc.rotate = cfg.rotate;
    sc.seed = cfg.seed;
    Ok(sc)
}

/// Runs the risk-based selection for `target` and records the table.
fn run_selection(
    cfg: &RunConfig,
    data: &Dataset,
    provider: &dyn NuisanceProvider,
    target: Target,
    path: &Path,
    report: &mut Report,
) -> Result<bandwidth::RiskTable> {
    let candidates = cfg.candidates.clone().unwrap_or_else(|| bandwidth::default_candidates(data));
    let table = bandwidth::select(data, &candidates, provider, &select_config(cfg, target)?)?;
    write_text(path, &table.to_csv_string())?;
    report.outputs.push(path.to_path_buf());
    Ok(table)
}

/// Bandwidth for `target`: the configured value, the `chosen` row of the
/// given risk table, or a fresh selection written to `<output>.<suffix>`.
fn resolve_bandwidth(
    cfg: &RunConfig,
    data: &Dataset,
    provider: &dyn NuisanceProvider,
    target: Target,
    suffix: &str,
    report: &mut Report,
) -> Result<(f64, &'static str)> {
    match (cfg.bandwidth, &cfg.risk_table) {
        (Bandwidth::Value(h), _) => Ok((h, "fixed")),
        (Bandwidth::Auto, Some(path)) => {
            let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            Ok((bandwidth::read_chosen_bandwidth(file)?, "risk-table"))
        }
        (Bandwidth::Auto, None) => {
            let path = sibling(&cfg.output, suffix);
            Ok((run_selection(cfg, data, provider, target, &path, report)?.chosen_h(), "selected"))
        }
    }
}

fn estimate_curve(cfg: &RunConfig, data: &Dataset, provider: &dyn NuisanceProvider, report: &mut Report) -> Result<()> {
    if cfg.method == Method::Smooth && cfg.quantity == Quantity::Value {
        return Err(Error::InvalidInput("the smooth method estimates derivatives only".into()));
    }
    let (h, how) = resolve_bandwidth(cfg, data, provider, cfg.target, "risk.csv", report)?;
    report.chosen_h = Some(h);
    report.bandwidths = json!({ "h": h, "source": how });
    let grid = grid(cfg, data);
    let kernel = kernel_for(cfg, cfg.method)?;
    let curve = match cfg.method {
        Method::LocalPoly => {
            let cc = CurveConfig { p: cfg.p, h, kernel, rotate: cfg.rotate, seed: cfg.seed };
            crossfit_curve(data, cfg.target, provider, &grid, &cc)?
        }
        Method::Smooth => {
            let sc = SmoothConfig { h, kernel, rotate: cfg.rotate, seed: cfg.seed };
            smooth_curve(data, cfg.target, provider, &grid, &sc)?
        }
    };
    note_flags(report, curve.points.iter().map(|p| p.flag.as_str()));
    let body = match cfg.format {
        Format::Csv => curve.to_csv_string(cfg.quantity),
        Format::Json => to_json(&curve)?,
    };
    write_output(cfg, &body, report)
}

fn estimate_liv(cfg: &RunConfig, data: &Dataset, provider: &dyn NuisanceProvider, report: &mut Report) -> Result<()> {
    let (h_num, how) = resolve_bandwidth(cfg, data, provider, Target::Outcome, "risk.csv", report)?;
    let h_den = match (cfg.bandwidth_treatment, cfg.bandwidth, &cfg.risk_table) {
        (Some(h), _, _) => h,
        (None, Bandwidth::Auto, None) => {
            let path = sibling(&cfg.output, "risk-treatment.csv");
            run_selection(cfg, data, provider, Target::Treatment, &path, report)?.chosen_h()
        }
        _ => h_num,
    };
    report.chosen_h = Some(h_num);
    report.bandwidths = json!({ "h_num": h_num, "h_den": h_den, "source": how });
    let mut lc = LivConfig::new(cfg.method, h_num);
    lc.h_den = h_den;
    lc.p = cfg.p;
    match cfg.method {
        Method::LocalPoly => lc.lp_kernel = kernel_for(cfg, Method::LocalPoly)?,
        Method::Smooth => lc.smooth_kernel = kernel_for(cfg, Method::Smooth)?,
    }
    lc.rotate = cfg.rotate;
    lc.seed = cfg.seed;
    lc.route = cfg.variance_route;
    lc.relevance_floor = cfg.relevance_floor;
    let curve = effects::liv_curve(data, provider, &grid(cfg, data), &lc)?;
    note_flags(report, curve.points.iter().map(|p| p.flag.as_str()));
    let body = match cfg.format {
        Format::Csv => curve.to_csv_string(),
        Format::Json => to_json(&curve)?,
    };
    write_output(cfg, &body, report)
}

fn estimate_late(cfg: &RunConfig, data: &Dataset, provider: &dyn NuisanceProvider, report: &mut Report) -> Result<()> {
    let (h, how) = resolve_bandwidth(cfg, data, provider, Target::Treatment, "risk.csv", report)?;
    report.chosen_h = Some(h);
    report.bandwidths = json!({ "h": h, "source": how });
    let mut cc = ComplierConfig::new(h);
    cc.curve.kernel = kernel_for(cfg, Method::LocalPoly)?;
    cc.curve.rotate = cfg.rotate;
    cc.curve.seed = cfg.seed;
    cc.relevance_floor = cfg.relevance_floor;
    let res = effects::maximal_complier(data, provider, &cc)?;
    report.warnings.extend(res.warning.clone());
    let body = match cfg.format {
        Format::Csv => complier_csv(&res),
        Format::Json => to_json(&res)?,
    };
    write_output(cfg, &body, report)
}

/// Rows `proportion`, `late` and the four boundary components with
/// columns `quantity, estimate, stderr, ci_lo, ci_hi`.
pub fn complier_csv(res: &effects::ComplierResult) -> String {
    let mut s = String::from("quantity,estimate,stderr,ci_lo,ci_hi\n");
    let mut row = |name: &str, est: f64, se: f64, ci: Option<(f64, f64)>| {
        let (lo, hi) = ci.unwrap_or((est - Z_975 * se, est + Z_975 * se));
        s.push_str(&format!("{name},{},{},{},{}\n", fmt_num(est), fmt_num(se), fmt_num(lo), fmt_num(hi)));
    };
    row("proportion", res.proportion, res.proportion_se, Some(res.proportion_ci));
    row("late", res.late.unwrap_or(f64::NAN), res.late_se.unwrap_or(f64::NAN), res.late_ci);
    let c = &res.components;
    for (name, e) in [("lambda_1", c.lambda_1), ("lambda_0", c.lambda_0), ("tau_1", c.tau_1), ("tau_0", c.tau_0)] {
        row(name, e.estimate, e.stderr, None);
    }
    s
}

fn select_bandwidth(cfg: &RunConfig, data: &Dataset, provider: &dyn NuisanceProvider, report: &mut Report) -> Result<()> {
    let candidates = cfg.candidates.clone().unwrap_or_else(|| bandwidth::default_candidates(data));
    let table = bandwidth::select(data, &candidates, provider, &select_config(cfg, cfg.target)?)?;
    report.chosen_h = Some(table.chosen_h());
    report.bandwidths = json!({ "h": table.chosen_h(), "source": "selected", "fold_scheme": table.fold_scheme });
    note_flags(report, table.flags.iter().map(String::as_str));
    let body = match cfg.format {
        Format::Csv => table.to_csv_string(),
        Format::Json => to_json(&table)?,
    };
    write_output(cfg, &body, report)
}

fn generate(cfg: &RunConfig) -> Result<Report> {
    let g = dgp_name(cfg)?.ok_or_else(|| Error::InvalidInput("`generate` needs a data-generating process".into()))?;
    let data = g.build().generate(cfg.n, cfg.seed);
    let mut buf = Vec::new();
    contiv::io::write_csv(&data, &mut buf)?;
    write_text(&cfg.output, &String::from_utf8(buf).expect("utf-8 csv"))?;
    Ok(Report {
        outputs: vec![cfg.output.clone()],
        data: json!({ "n": data.n(), "d": data.d(), "source": format!("dgp:{}", g.as_str()) }),
        ..Report::default()
    })
}

/// Simulation settings derived from the run configuration.
pub fn sim_config(cfg: &RunConfig) -> Result<SimConfig> {
    let s = &cfg.simulation;
    let dgp = dgp_name(cfg)?.unwrap_or(DgpName::LivMain);
    let mut sc = SimConfig::new(dgp);
    if let Some(e) = &s.estimand {
        sc.estimand = Estimand::parse(e)?;
    }
    sc.estimators = s.estimators.iter().map(|e| Estimator::parse(e)).collect::<Result<_>>()?;
    if sc.estimators.is_empty() {
        return Err(Error::InvalidInput("no estimators to simulate".into()));
    }
    sc.ns = s.ns.clone();
    sc.alphas = s.alphas.clone();
    sc.reps = s.reps;
    sc.p = cfg.p;
    let rule = |h: f64| match s.smoothness {
        Some(g) => BandwidthRule::smoothness(g, h, s.n_ref),
        None => BandwidthRule::Fixed { h },
    };
    sc.lp_bandwidth = rule(s.h);
    sc.smooth_bandwidth = rule(s.h_smooth);
    if let Some(name) = &cfg.kernel {
        sc.lp_kernel = Kernel::from_name(name)?;
    }
    sc.grid_points = s.grid_points;
    sc.seed = cfg.seed;
    sc.timing = s.timing;
    Ok(sc)
}

fn simulate(cfg: &RunConfig) -> Result<Report> {
    let sc = sim_config(cfg)?;
    let results = sim::run_grid(&sc)?;
    let mut report = Report {
        data: json!({ "source": format!("dgp:{}", sc.dgp.as_str()), "estimand": sc.estimand.name() }),
        ..Report::default()
    };
    for r in &results {
        if !r.failures.is_empty() {
            report.warnings.push(format!(
                "{} n={} alpha={}: {} failed replications",
                r.estimator.name(),
                r.n,
                r.alpha,
                r.failures.len()
            ));
        }
    }
    let body = match cfg.format {
        Format::Csv => sim::results_csv_string(&results),
        Format::Json => to_json(&results)?,
    };
    write_output(cfg, &body, &mut report)?;
    if let Some(path) = &cfg.simulation.replications_output {
        let mut buf = Vec::new();
        sim::write_replications_csv(&results, &mut buf)?;
        write_text(path, &String::from_utf8(buf).expect("utf-8 csv"))?;
        report.outputs.push(path.clone());
    }
    Ok(report)
}

fn note_flags<'a>(report: &mut Report, flags: impl Iterator<Item = &'a str>) {
    let mut bad: Vec<&str> = flags.filter(|f| *f != contiv::pseudo::FLAG_OK).collect();
    bad.sort_unstable();
    bad.dedup();
    report.warnings.extend(bad.into_iter().map(|f| format!("flagged rows: {f}")));
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Io(e.to_string()))
}

fn write_output(cfg: &RunConfig, body: &str, report: &mut Report) -> Result<()> {
    write_text(&cfg.output, body)?;
    report.outputs.push(cfg.output.clone());
    Ok(())
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    w.write_all(body.as_bytes())?;
    w.flush()?;
    Ok(())
}
