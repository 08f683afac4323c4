//! Monte Carlo harness: replications on the Gaussian-instrument processes
//! with nuisances perturbed at a controlled rate, weighted RMSE and
//! pointwise coverage, comparison baselines and rate-slope fits.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::kde_density;
use crate::data::{Dataset, Target};
use crate::dgp::{Dgp, DgpName, GaussianIv};
use crate::error::{Error, Result};
use crate::effects::{liv_curve, LivConfig};
use crate::kernels::Kernel;
use crate::nuisance::{synthetic_nuisance, FixedNuisance, NuisanceFit};
use crate::pseudo::{crossfit_curve, fmt_num, linspace, CurveConfig, Method, Quantity, Z_975};
use crate::quad::trapezoid_weights;
use crate::smooth::{smooth_curve, SmoothConfig};

/// Quantiles of the true instrument distribution bounding the evaluation grid.
pub const TRUNCATION: (f64, f64) = (0.05, 0.95);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    LocalPoly,
    Smooth,
    PlugIn,
    ProjectionLinear,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::LocalPoly, Estimator::Smooth, Estimator::PlugIn, Estimator::ProjectionLinear];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::LocalPoly => "local-poly",
            Estimator::Smooth => "smooth",
            Estimator::PlugIn => "plug-in",
            Estimator::ProjectionLinear => "projection-linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s || e.name().replace('-', "") == s.replace(['-', '_'], ""))
            .ok_or_else(|| Error::InvalidInput(format!("unknown estimator `{s}`")))
    }

    fn has_stderr(self) -> bool {
        matches!(self, Estimator::LocalPoly | Estimator::Smooth)
    }
}

/// Curve the replications estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimand {
    Liv,
    Derivative(Target),
    Value(Target),
}

impl Estimand {
    pub fn name(self) -> &'static str {
        match self {
            Estimand::Liv => "liv",
            Estimand::Derivative(Target::Outcome) => "theta-y",
            Estimand::Derivative(Target::Treatment) => "theta-a",
            Estimand::Value(Target::Outcome) => "tau",
            Estimand::Value(Target::Treatment) => "lambda-bar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let all = [
            Estimand::Liv,
            Estimand::Derivative(Target::Outcome),
            Estimand::Derivative(Target::Treatment),
            Estimand::Value(Target::Outcome),
            Estimand::Value(Target::Treatment),
        ];
        let s = s.trim().to_ascii_lowercase();
        all.into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown estimand `{s}` (liv, theta-y, theta-a, tau, lambda-bar)")))
    }

    /// Default estimand of each process: the LIV curve for the main design,
    /// the outcome derivative otherwise.
    pub fn default_for(dgp: DgpName) -> Self {
        match dgp {
            DgpName::LivMain => Estimand::Liv,
            _ => Estimand::Derivative(Target::Outcome),
        }
    }

    pub fn truth(self, dgp: &dyn Dgp, z: f64) -> f64 {
        match self {
            Estimand::Liv => dgp.gamma(z),
            Estimand::Derivative(t) => dgp.derivative(t, z),
            Estimand::Value(t) => dgp.curve(t, z),
        }
    }
}

/// Bandwidth as a function of the sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum BandwidthRule {
    Fixed { h: f64 },
    /// `h = c n^-exponent`.
    PowerLaw { c: f64, exponent: f64 },
}

impl BandwidthRule {
    pub fn at(&self, n: usize) -> f64 {
        match *self {
            BandwidthRule::Fixed { h } => h,
            BandwidthRule::PowerLaw { c, exponent } => c * (n as f64).powf(-exponent),
        }
    }

    /// `h ∝ n^{-1/(2γ+1)}` anchored at `h0` for `n0`.
    pub fn smoothness(gamma: f64, h0: f64, n0: usize) -> Self {
        let exponent = 1.0 / (2.0 * gamma + 1.0);
        BandwidthRule::PowerLaw { c: h0 * (n0 as f64).powf(exponent), exponent }
    }
}

/// Nuisance quality: perturbed at rate `n^-alpha`, or exact when `alpha` is
/// infinite.
pub fn nuisance_at(dgp: &GaussianIv, alpha: f64, n: usize, seed: u64) -> Result<NuisanceFit> {
    if alpha == f64::INFINITY {
        Ok(dgp.true_nuisance())
    } else {
        synthetic_nuisance(dgp, alpha, n, seed)
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub dgp: DgpName,
    pub estimand: Estimand,
    pub estimators: Vec<Estimator>,
    pub ns: Vec<usize>,
    pub alphas: Vec<f64>,
    pub reps: usize,
    pub p: usize,
    pub lp_bandwidth: BandwidthRule,
    pub smooth_bandwidth: BandwidthRule,
    pub lp_kernel: Kernel,
    pub smooth_kernel: Kernel,
    pub grid_points: usize,
    pub seed: u64,
    /// Fill the `seconds` column; off by default so outputs are reproducible.
    pub timing: bool,
}

impl SimConfig {
    pub fn new(dgp: DgpName) -> Self {
        Self {
            dgp,
            estimand: Estimand::default_for(dgp),
            estimators: Estimator::ALL.to_vec(),
            ns: vec![2000],
            alphas: vec![0.1],
            reps: 100,
            p: 2,
            lp_bandwidth: BandwidthRule::Fixed { h: 0.5 },
            smooth_bandwidth: BandwidthRule::Fixed { h: 0.5 },
            lp_kernel: Kernel::epanechnikov(),
            smooth_kernel: Kernel::make_high_order(4).expect("order 4 kernel"),
            grid_points: 25,
            seed: 0,
            timing: false,
        }
    }

    fn gaussian(&self) -> Result<GaussianIv> {
        self.dgp
            .gaussian()
            .ok_or_else(|| Error::InvalidInput(format!("`{}` has no controllable nuisances", self.dgp.as_str())))
    }

    fn bandwidth(&self, estimator: Estimator, n: usize) -> f64 {
        match estimator {
            Estimator::Smooth => self.smooth_bandwidth.at(n),
            _ => self.lp_bandwidth.at(n),
        }
    }
}

/// Grid on the truncated instrument distribution with normalized weights
/// proportional to the true marginal density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGrid {
    pub z: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TruncatedGrid {
    pub fn new(dgp: &dyn Dgp, m: usize) -> Self {
        let z = linspace(dgp.z_quantile(TRUNCATION.0), dgp.z_quantile(TRUNCATION.1), m);
        let raw: Vec<f64> = trapezoid_weights(&z).iter().zip(&z).map(|(t, &v)| t * dgp.marginal_density(v)).collect();
        let total: f64 = raw.iter().sum();
        Self { weights: raw.iter().map(|w| w / total).collect(), z }
    }
}

/// `Σ_k w_k sqrt(mean_s (θ̂_s(z_k) - θ(z_k))²)`.
pub fn weighted_rmse(curves: &[Vec<f64>], truth: &[f64], weights: &[f64]) -> f64 {
    if curves.is_empty() {
        return f64::NAN;
    }
    let s = curves.len() as f64;
    (0..truth.len())
        .map(|k| {
            let mse = curves.iter().map(|c| (c[k] - truth[k]).powi(2)).sum::<f64>() / s;
            weights[k] * mse.sqrt()
        })
        .sum()
}

/// Fraction of (replication, grid point) pairs whose 95% interval covers the truth.
pub fn coverage(curves: &[Vec<f64>], stderrs: &[Vec<f64>], truth: &[f64]) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (c, s) in curves.iter().zip(stderrs) {
        for k in 0..truth.len() {
            if s[k].is_finite() {
                total += 1;
                hit += ((c[k] - truth[k]).abs() <= Z_975 * s[k]) as usize;
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// One replication's curve and pointwise standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepCurve {
    pub rep: usize,
    pub estimate: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub dgp: DgpName,
    pub estimand: Estimand,
    pub estimator: Estimator,
    pub n: usize,
    pub alpha: f64,
    pub h: f64,
    pub reps: usize,
    pub rmse: f64,
    pub coverage: Option<f64>,
    pub seconds: f64,
    pub grid: TruncatedGrid,
    pub truth: Vec<f64>,
    /// Successful replications only.
    pub curves: Vec<RepCurve>,
    /// `(replication, error code)` for failed replications.
    pub failures: Vec<(usize, String)>,
}

impl SimResult {
    /// RMSE recomputed from the stored curves.
    pub fn recompute_rmse(&self) -> f64 {
        let c: Vec<Vec<f64>> = self.curves.iter().map(|r| r.estimate.clone()).collect();
        weighted_rmse(&c, &self.truth, &self.grid.weights)
    }
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Seed of the data in replication `rep`; shared by all estimators and rates.
pub fn data_seed(seed: u64, n: usize, rep: usize) -> u64 {
    mix(&[seed, n as u64, rep as u64])
}

fn nuisance_seed(seed: u64, n: usize, alpha: f64, rep: usize) -> u64 {
    mix(&[seed, n as u64, alpha.to_bits(), rep as u64, 1])
}

/// Single replication of one estimator on one dataset.
#[allow(clippy::too_many_arguments)]
pub fn estimate_once(
    data: &Dataset,
    nuisance: &NuisanceFit,
    estimator: Estimator,
    estimand: Estimand,
    grid: &[f64],
    h: f64,
    cfg: &SimConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let provider = FixedNuisance(nuisance.clone());
    let lp = CurveConfig { p: cfg.p, h, kernel: cfg.lp_kernel.clone(), rotate: true, seed };
    let sm = SmoothConfig { h, kernel: cfg.smooth_kernel.clone(), rotate: true, seed };
    let (est, se) = match (estimator, estimand) {
        (Estimator::LocalPoly | Estimator::Smooth, Estimand::Liv) => {
            let method = if estimator == Estimator::LocalPoly { Method::LocalPoly } else { Method::Smooth };
            let lc = LivConfig {
                p: cfg.p,
                lp_kernel: cfg.lp_kernel.clone(),
                smooth_kernel: cfg.smooth_kernel.clone(),
                seed,
                ..LivConfig::new(method, h)
            };
            // No relevance floor: every replication contributes its raw ratio.
            let c = liv_curve(data, &provider, grid, &LivConfig { relevance_floor: 0.0, ..lc })?;
            first_error(&c.numerator)?;
            first_error(&c.denominator)?;
            let ty = c.numerator.estimates(Quantity::Derivative);
            let ta = c.denominator.estimates(Quantity::Derivative);
            let est = ty.iter().zip(&ta).map(|(y, a)| y / a).collect();
            (est, c.points.iter().map(|p| p.stderr).collect())
        }
        (Estimator::LocalPoly, Estimand::Derivative(t) | Estimand::Value(t)) => {
            let q = quantity(estimand);
            let c = crossfit_curve(data, t, &provider, grid, &lp)?;
            first_error(&c)?;
            (c.estimates(q), c.stderrs(q))
        }
        (Estimator::Smooth, Estimand::Derivative(t)) => {
            let c = smooth_curve(data, t, &provider, grid, &sm)?;
            first_error(&c)?;
            (c.estimates(Quantity::Derivative), c.stderrs(Quantity::Derivative))
        }
        (Estimator::PlugIn, _) => (plug_in(data, nuisance, estimand, grid), vec![f64::NAN; grid.len()]),
        (Estimator::ProjectionLinear, Estimand::Liv) => {
            let c = liv_curve(data, &provider, grid, &LivConfig { p: cfg.p, seed, ..LivConfig::new(Method::LocalPoly, h) })?;
            let ty = c.numerator.estimates(Quantity::Derivative);
            let ta = c.denominator.estimates(Quantity::Derivative);
            let psi = projection_slope(data, grid, &ty, Some(&ta));
            (grid.iter().map(|z| psi * z).collect(), vec![f64::NAN; grid.len()])
        }
        (Estimator::ProjectionLinear, Estimand::Derivative(t)) => {
            let c = crossfit_curve(data, t, &provider, grid, &lp)?;
            first_error(&c)?;
            let psi = projection_slope(data, grid, &c.estimates(Quantity::Derivative), None);
            (grid.iter().map(|z| psi * z).collect(), vec![f64::NAN; grid.len()])
        }
        (e, m) => {
            return Err(Error::InvalidInput(format!("{} does not estimate {}", e.name(), m.name())));
        }
    };
    if let Some(k) = est.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResult(k));
    }
    Ok((est, se))
}

fn quantity(estimand: Estimand) -> Quantity {
    match estimand {
        Estimand::Value(_) => Quantity::Value,
        _ => Quantity::Derivative,
    }
}

fn first_error(c: &crate::pseudo::CurveEstimate) -> Result<()> {
    match c.points.iter().find_map(|p| p.error.clone()) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Sample average of the fitted regressions (or their `z`-derivatives by
/// central differences) at each grid point.
pub fn plug_in(data: &Dataset, nuisance: &NuisanceFit, estimand: Estimand, grid: &[f64]) -> Vec<f64> {
    let n = data.n() as f64;
    let avg = |target: Target, z: f64, deriv: bool| -> f64 {
        let e = 1e-4 * z.abs().max(1.0);
        (0..data.n())
            .map(|i| {
                let x = data.x_row(i);
                if deriv {
                    (nuisance.regression(target, x, z + e) - nuisance.regression(target, x, z - e)) / (2.0 * e)
                } else {
                    nuisance.regression(target, x, z)
                }
            })
            .sum::<f64>()
            / n
    };
    grid.iter()
        .map(|&z| match estimand {
            Estimand::Liv => avg(Target::Outcome, z, true) / avg(Target::Treatment, z, true),
            Estimand::Derivative(t) => avg(t, z, true),
            Estimand::Value(t) => avg(t, z, false),
        })
        .collect()
}

/// Slope `ψ` of the working model `ψ z`: weighted least squares of the
/// derivative curve on `z`, with the treatment derivative as an extra
/// weight for ratio curves. Weights are a kernel density estimate of `Z`.
pub fn projection_slope(data: &Dataset, grid: &[f64], theta: &[f64], theta_a: Option<&[f64]>) -> f64 {
    let f = kde_density(&data.z, grid);
    let trap = trapezoid_weights(grid);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..grid.len() {
        let w = f[k] * trap[k];
        let a = theta_a.map_or(1.0, |t| t[k]);
        num += w * grid[k] * theta[k];
        den += w * grid[k] * grid[k] * a;
    }
    num / den
}

/// Runs every (n, alpha, estimator) cell.
pub fn run_grid(cfg: &SimConfig) -> Result<Vec<SimResult>> {
    if cfg.reps < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 replications, got {}", cfg.reps)));
    }
    let g = cfg.gaussian()?;
    let grid = TruncatedGrid::new(&g, cfg.grid_points);
    let truth: Vec<f64> = grid.z.iter().map(|&z| cfg.estimand.truth(&g, z)).collect();
    let mut out = Vec::new();
    for &n in &cfg.ns {
        for &alpha in &cfg.alphas {
            let cells = run_cell(&g, n, alpha, cfg, &grid, &truth)?;
            out.extend(cells);
        }
    }
    Ok(out)
}

fn run_cell(
    g: &GaussianIv,
    n: usize,
    alpha: f64,
    cfg: &SimConfig,
    grid: &TruncatedGrid,
    truth: &[f64],
) -> Result<Vec<SimResult>> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidRate(alpha));
    }
    let timer = Instant::now();
    // results[rep][estimator]
    let results: Vec<Vec<Result<(Vec<f64>, Vec<f64>)>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let data = g.generate(n, data_seed(cfg.seed, n, rep));
            let nuisance = nuisance_at(g, alpha, n, nuisance_seed(cfg.seed, n, alpha, rep));
            cfg.estimators
                .iter()
                .map(|&e| {
                    let nf = nuisance.as_ref().map_err(Clone::clone)?;
                    estimate_once(&data, nf, e, cfg.estimand, &grid.z, cfg.bandwidth(e, n), cfg, data_seed(cfg.seed, n, rep))
                })
                .collect()
        })
        .collect();
    let seconds = timer.elapsed().as_secs_f64();
    Ok(cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(j, &estimator)| {
            let mut curves = Vec::new();
            let mut failures = Vec::new();
            for (rep, r) in results.iter().enumerate() {
                match &r[j] {
                    Ok((est, se)) => curves.push(RepCurve { rep, estimate: est.clone(), stderr: se.clone() }),
                    Err(e) => failures.push((rep, e.code().to_string())),
                }
            }
            let est: Vec<Vec<f64>> = curves.iter().map(|c| c.estimate.clone()).collect();
            let ses: Vec<Vec<f64>> = curves.iter().map(|c| c.stderr.clone()).collect();
            SimResult {
                dgp: cfg.dgp,
                estimand: cfg.estimand,
                estimator,
                n,
                alpha,
                h: cfg.bandwidth(estimator, n),
                reps: cfg.reps,
                rmse: weighted_rmse(&est, truth, &grid.weights),
                coverage: if estimator.has_stderr() { coverage(&est, &ses, truth) } else { None },
                seconds: if cfg.timing { seconds } else { f64::NAN },
                grid: grid.clone(),
                truth: truth.to_vec(),
                curves,
                failures,
            }
        })
        .collect())
}

fn fmt_alpha(a: f64) -> String {
    if a == f64::INFINITY {
        "inf".into()
    } else {
        a.to_string()
    }
}

/// Summary CSV: `dgp, estimator, n, alpha, h, S, rmse, coverage, seconds`.
pub fn write_results_csv<W: std::io::Write>(results: &[SimResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["dgp", "estimator", "n", "alpha", "h", "S", "rmse", "coverage", "seconds"])?;
    for r in results {
        out.write_record([
            r.dgp.as_str().to_string(),
            r.estimator.name().to_string(),
            r.n.to_string(),
            fmt_alpha(r.alpha),
            fmt_num(r.h),
            r.reps.to_string(),
            fmt_num(r.rmse),
            r.coverage.map_or(String::new(), fmt_num),
            fmt_num(r.seconds),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Per-replication dump: `dgp, estimator, n, alpha, rep, z0, estimate, stderr, truth, weight`.
pub fn write_replications_csv<W: std::io::Write>(results: &[SimResult], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["dgp", "estimator", "n", "alpha", "rep", "z0", "estimate", "stderr", "truth", "weight"])?;
    for r in results {
        for c in &r.curves {
            for k in 0..r.grid.z.len() {
                out.write_record([
                    r.dgp.as_str().to_string(),
                    r.estimator.name().to_string(),
                    r.n.to_string(),
                    fmt_alpha(r.alpha),
                    c.rep.to_string(),
                    fmt_num(r.grid.z[k]),
                    fmt_num(c.estimate[k]),
                    fmt_num(c.stderr[k]),
                    fmt_num(r.truth[k]),
                    fmt_num(r.grid.weights[k]),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn results_csv_string(results: &[SimResult]) -> String {
    let mut buf = Vec::new();
    write_results_csv(results, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("utf-8 csv")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateFit {
    pub ns: Vec<usize>,
    pub rmse: Vec<f64>,
    pub slope: f64,
}

/// Least-squares slope of `log y` on `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// RMSE decay across `ns` with exact nuisances and the bandwidth rule of `cfg`.
pub fn rate_slope(cfg: &SimConfig, estimator: Estimator) -> Result<RateFit> {
    if cfg.ns.len() < 4 {
        return Err(Error::InvalidInput(format!("rate fit needs at least 4 sample sizes, got {}", cfg.ns.len())));
    }
    let c = SimConfig { estimators: vec![estimator], alphas: vec![f64::INFINITY], ..cfg.clone() };
    let res = run_grid(&c)?;
    let rmse: Vec<f64> = res.iter().map(|r| r.rmse).collect();
    let x: Vec<f64> = c.ns.iter().map(|&n| n as f64).collect();
    Ok(RateFit { ns: c.ns.clone(), slope: log_log_slope(&x, &rmse), rmse })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_formula_matches_hand_computation() {
        let curves = vec![vec![1.0, 2.0], vec![3.0, 2.0]];
        let truth = [2.0, 1.0];
        let w = [0.25, 0.75];
        assert!((weighted_rmse(&curves, &truth, &w) - (0.25 * 1.0 + 0.75 * 1.0)).abs() < 1e-15);
        assert!(weighted_rmse(&[], &truth, &w).is_nan());
    }

    #[test]
    fn coverage_counts_finite_intervals() {
        let c = vec![vec![0.0, 10.0]];
        let s = vec![vec![1.0, f64::NAN]];
        assert_eq!(coverage(&c, &s, &[1.0, 0.0]), Some(1.0));
        assert_eq!(coverage(&c, &[vec![f64::NAN; 2]], &[1.0, 0.0]), None);
    }

    #[test]
    fn truncated_grid_weights_sum_to_one() {
        let g = GaussianIv::liv_main();
        let t = TruncatedGrid::new(&g, 25);
        assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((t.z[0] - g.z_quantile(0.05)).abs() < 1e-12);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1000.0, 2000.0, 4000.0, 8000.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.3)).collect();
        assert!((log_log_slope(&x, &y) + 0.3).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_rules() {
        assert_eq!(BandwidthRule::Fixed { h: 0.3 }.at(100), 0.3);
        let r = BandwidthRule::smoothness(3.0, 0.8, 1000);
        assert!((r.at(1000) - 0.8).abs() < 1e-12);
        assert!((r.at(128_000) - 0.8 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn plug_in_with_true_nuisance_is_exact_up_to_covariate_noise() {
        let g = GaussianIv::zero_outcome();
        let data = g.generate(500, 1);
        let est = plug_in(&data, &g.true_nuisance(), Estimand::Liv, &[1.0, 2.0]);
        // linear regressions without interactions: derivatives are constant
        assert!(est.iter().all(|v| v.abs() < 1e-6));
        let th = plug_in(&data, &g.true_nuisance(), Estimand::Derivative(Target::Treatment), &[1.0]);
        assert!((th[0] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn projection_recovers_linear_curves() {
        let data = GaussianIv::liv_main().generate(500, 2);
        let grid = linspace(1.0, 3.0, 21);
        let theta: Vec<f64> = grid.iter().map(|z| 0.7 * z).collect();
        assert!((projection_slope(&data, &grid, &theta, None) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn small_grid_is_deterministic_and_complete() {
        let mut cfg = SimConfig::new(DgpName::LivMain);
        cfg.ns = vec![600];
        cfg.reps = 2;
        cfg.grid_points = 5;
        cfg.lp_bandwidth = BandwidthRule::Fixed { h: 1.0 };
        cfg.smooth_bandwidth = BandwidthRule::Fixed { h: 0.8 };
        let a = run_grid(&cfg).unwrap();
        let b = run_grid(&cfg).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(results_csv_string(&a), results_csv_string(&b));
        for r in &a {
            assert_eq!(r.recompute_rmse(), r.rmse);
        }
        let csv = results_csv_string(&a);
        assert!(csv.starts_with("dgp,estimator,n,alpha,h,S,rmse,coverage,seconds\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn unsupported_pairs_are_reported_per_cell() {
        let mut cfg = SimConfig::new(DgpName::LivMain);
        cfg.estimand = Estimand::Value(Target::Outcome);
        cfg.estimators = vec![Estimator::Smooth, Estimator::PlugIn];
        cfg.ns = vec![300];
        cfg.reps = 2;
        cfg.grid_points = 3;
        let r = run_grid(&cfg).unwrap();
        assert_eq!(r[0].failures.len(), 2);
        assert!(r[0].rmse.is_nan());
        assert!(r[1].failures.is_empty());
    }

    #[test]
    fn non_gaussian_process_is_rejected() {
        let cfg = SimConfig { reps: 2, ..SimConfig::new(DgpName::BoundedComplier) };
        assert!(matches!(run_grid(&cfg), Err(Error::InvalidInput(_))));
    }
}
