//! Bandwidth selection for derivative curves by minimizing a doubly robust
//! estimate of the weighted risk `∫(θ̄² - 2θ̄θ) w dz`, estimated with two
//! swapped folds.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Target};
use crate::error::{Error, Result};
use crate::kernels::{check_bandwidth, normal_pdf, Kernel};
use crate::nuisance::{sample_sd, NuisanceFit, NuisanceProvider};
use crate::pseudo::{crossfit, fmt_num, linspace, CurveConfig, CurveEstimate, Method, Observation, Quantity};
use crate::quad::trapezoid_weights;
use crate::smooth::{evaluation_folds, smooth_curve_on, SmoothConfig};

/// Fraction of the weight support tapered to zero at each end.
pub const TAPER_FRACTION: f64 = 0.1;

/// Number of default candidates.
pub const DEFAULT_CANDIDATES: usize = 8;

/// Weight function `w` of the risk.
#[derive(Clone)]
pub enum WeightSpec {
    /// Kernel estimate of the instrument's marginal density on the training
    /// half, tapered to zero at the ends of the trimmed support.
    MarginalDensity,
    /// User weight; must vanish at both ends of the risk grid.
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for WeightSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightSpec::MarginalDensity => f.write_str("MarginalDensity"),
            WeightSpec::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Raised-cosine taper on `[lo, hi]`, flat in the middle.
pub fn taper(z: f64, lo: f64, hi: f64) -> f64 {
    if z <= lo || z >= hi {
        return 0.0;
    }
    let width = TAPER_FRACTION * (hi - lo);
    let t = (z - lo).min(hi - z) / width;
    if t >= 1.0 {
        1.0
    } else {
        0.5 * (1.0 - (std::f64::consts::PI * t).cos())
    }
}

/// Gaussian kernel density of `z` with Silverman's bandwidth.
pub fn kde_density(z: &[f64], at: &[f64]) -> Vec<f64> {
    let bw = silverman(z);
    let n = z.len() as f64;
    at.iter()
        .map(|&t| z.iter().map(|&v| normal_pdf((t - v) / bw)).sum::<f64>() / (n * bw))
        .collect()
}

fn silverman(z: &[f64]) -> f64 {
    let sd = sample_sd(z);
    let iqr = crate::data::quantile(z, 0.75) - crate::data::quantile(z, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    1.06 * spread * (z.len() as f64).powf(-0.2)
}

/// Geometric grid of [`DEFAULT_CANDIDATES`] bandwidths spanning `[0.5, 2]`
/// times a Silverman-type pilot.
pub fn default_candidates(data: &Dataset) -> Vec<f64> {
    let pilot = silverman(&data.z);
    let m = DEFAULT_CANDIDATES;
    (0..m)
        .map(|k| pilot * 0.5 * 4f64.powf(k as f64 / (m - 1) as f64))
        .collect()
}

/// Grid between the 5% and 95% instrument quantiles with step at most
/// `h_min / 8`.
pub fn risk_grid(data: &Dataset, h_min: f64) -> Vec<f64> {
    let (lo, hi) = (data.z_quantile(0.05), data.z_quantile(0.95));
    let m = (((hi - lo) / (h_min / 8.0)).ceil() as usize + 1).max(41);
    linspace(lo, hi, m)
}

/// Precomputed pieces of the risk influence function for a fixed curve
/// `θ̄` and weight `w` tabulated on a grid.
#[derive(Debug, Clone)]
pub struct RiskIntegrand {
    pub grid: Vec<f64>,
    pub theta_bar: Vec<f64>,
    pub w: Vec<f64>,
    /// Central finite differences of `w θ̄`.
    pub d_wtheta: Vec<f64>,
    trap: Vec<f64>,
    /// `∫ θ̄² w dz`.
    pub square_term: f64,
}

impl RiskIntegrand {
    pub fn new(grid: Vec<f64>, theta_bar: Vec<f64>, w: Vec<f64>, h_min: f64) -> Result<Self> {
        let m = grid.len();
        if m < 3 || theta_bar.len() != m || w.len() != m {
            return Err(Error::InvalidInput(format!(
                "risk grid needs >= 3 points and matching curve and weight lengths ({m}, {}, {})",
                theta_bar.len(),
                w.len()
            )));
        }
        let step = grid.windows(2).map(|p| p[1] - p[0]).fold(0.0, f64::max);
        if step > h_min / 4.0 {
            return Err(Error::GridTooCoarse { step, limit: h_min / 4.0 });
        }
        let wt: Vec<f64> = w.iter().zip(&theta_bar).map(|(a, b)| a * b).collect();
        let d_wtheta = (0..m)
            .map(|k| {
                let (i, j) = (k.saturating_sub(1), (k + 1).min(m - 1));
                (wt[j] - wt[i]) / (grid[j] - grid[i])
            })
            .collect();
        let trap = trapezoid_weights(&grid);
        let square_term = (0..m).map(|k| trap[k] * theta_bar[k] * theta_bar[k] * w[k]).sum();
        Ok(Self { grid, theta_bar, w, d_wtheta, trap, square_term })
    }

    /// `d/dz (w θ̄)` by linear interpolation; zero off the grid.
    pub fn d_wtheta_at(&self, z: f64) -> f64 {
        let g = &self.grid;
        if z < g[0] || z > g[g.len() - 1] {
            return 0.0;
        }
        let k = g.partition_point(|&t| t <= z).clamp(1, g.len() - 1);
        let s = (z - g[k - 1]) / (g[k] - g[k - 1]);
        self.d_wtheta[k - 1] * (1.0 - s) + self.d_wtheta[k] * s
    }
}

/// Uncentered influence value `L_w(O)` of the risk at one observation:
/// `∫θ̄²w + 2(∫(wθ̄)' m(X,z) dz + (wθ̄)'(Z) (W - m(X,Z)) / π(Z|X))`.
pub fn pseudo_risk_loss(o: &Observation<'_>, integrand: &RiskIntegrand, nuisance: &NuisanceFit, target: Target) -> f64 {
    let it = integrand;
    let cross: f64 = (0..it.grid.len())
        .filter(|&k| it.d_wtheta[k] != 0.0)
        .map(|k| it.trap[k] * it.d_wtheta[k] * nuisance.regression(target, o.x, it.grid[k]))
        .sum();
    let d = it.d_wtheta_at(o.z);
    let resid = if d == 0.0 {
        0.0
    } else {
        d * (o.response(target) - nuisance.regression(target, o.x, o.z)) / nuisance.pi(o.x, o.z)
    };
    it.square_term + 2.0 * (cross + resid)
}

/// Mean of `L_w` over `data`, summed in a fixed order.
pub fn mean_risk(data: &Dataset, integrand: &RiskIntegrand, nuisance: &NuisanceFit, target: Target) -> f64 {
    let losses: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map(|i| pseudo_risk_loss(&data.obs(i), integrand, nuisance, target))
        .collect();
    losses.iter().sum::<f64>() / data.n() as f64
}

/// `∫ (θ̂ - θ)² w dz` by the trapezoid rule.
pub fn weighted_sq_error(grid: &[f64], estimate: &[f64], truth: &[f64], w: &[f64]) -> f64 {
    let trap = trapezoid_weights(grid);
    (0..grid.len()).map(|k| trap[k] * (estimate[k] - truth[k]).powi(2) * w[k]).sum()
}

/// Weight evaluated on `grid` from the training half.
pub fn weight_on_grid(spec: &WeightSpec, grid: &[f64], train: &Dataset) -> Vec<f64> {
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    match spec {
        WeightSpec::MarginalDensity => kde_density(&train.z, grid)
            .into_iter()
            .zip(grid)
            .map(|(f, &z)| f * taper(z, lo, hi))
            .collect(),
        WeightSpec::Custom(w) => grid.iter().map(|&z| w(z)).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct SelectConfig {
    pub method: Method,
    pub target: Target,
    pub p: usize,
    pub lp_kernel: Kernel,
    pub smooth_kernel: Kernel,
    pub rotate: bool,
    pub seed: u64,
    pub weight: WeightSpec,
}

impl SelectConfig {
    pub fn new(method: Method, target: Target) -> Self {
        Self {
            method,
            target,
            p: 2,
            lp_kernel: Kernel::epanechnikov(),
            smooth_kernel: Kernel::make_high_order(4).expect("order 4 kernel"),
            rotate: true,
            seed: 0,
            weight: WeightSpec::MarginalDensity,
        }
    }

    /// Derivative curves for every candidate, fitted on `train`.
    pub fn fit_curves(
        &self,
        train: &Dataset,
        provider: &dyn NuisanceProvider,
        candidates: &[f64],
        grid: &[f64],
    ) -> Result<Vec<CurveEstimate>> {
        match self.method {
            Method::LocalPoly => {
                let cf = crossfit(train, &[self.target], provider, self.rotate, self.seed)?;
                Ok(candidates
                    .par_iter()
                    .map(|&h| {
                        let cfg = CurveConfig { p: self.p, h, kernel: self.lp_kernel.clone(), rotate: self.rotate, seed: self.seed };
                        cf.curve(self.target, grid, &cfg)
                    })
                    .collect())
            }
            Method::Smooth => {
                let folds = evaluation_folds(train, provider, self.rotate, self.seed)?;
                Ok(candidates
                    .par_iter()
                    .map(|&h| {
                        let cfg = SmoothConfig { h, kernel: self.smooth_kernel.clone(), rotate: self.rotate, seed: self.seed };
                        smooth_curve_on(&folds, self.target, grid, &cfg)
                    })
                    .collect())
            }
        }
    }
}

/// Record of the two-fold split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoFoldScheme {
    pub seed: u64,
    pub sizes: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskTable {
    pub method: Method,
    pub target: Target,
    pub candidates: Vec<f64>,
    pub risk_hat: Vec<f64>,
    /// Risk with the curve fitted on the first half and evaluated on the second.
    pub risk_1: Vec<f64>,
    /// Risk with the roles swapped.
    pub risk_2: Vec<f64>,
    pub chosen: usize,
    pub flags: Vec<String>,
    pub fold_scheme: TwoFoldScheme,
}

impl RiskTable {
    pub fn chosen_h(&self) -> f64 {
        self.candidates[self.chosen]
    }

    /// CSV with columns `h, risk_hat, risk_1, risk_2, chosen, flag`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["h", "risk_hat", "risk_1", "risk_2", "chosen", "flag"])?;
        for k in 0..self.candidates.len() {
            out.write_record([
                fmt_num(self.candidates[k]),
                fmt_num(self.risk_hat[k]),
                fmt_num(self.risk_1[k]),
                fmt_num(self.risk_2[k]),
                (k == self.chosen).to_string(),
                self.flags[k].clone(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 csv")
    }
}

/// Bandwidth marked `chosen` in a risk table written by [`RiskTable::write_csv`].
pub fn read_chosen_bandwidth<R: std::io::Read>(r: R) -> Result<f64> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (ih, ic) = (col("h")?, col("chosen")?);
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.get(ic).map(str::trim) == Some("true") {
            let raw = rec.get(ih).unwrap_or("");
            return raw
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|h| h.is_finite() && *h > 0.0)
                .ok_or_else(|| Error::NonNumericCell { row: r + 1, column: "h".into(), value: raw.to_string() });
        }
    }
    Err(Error::InvalidInput("risk table has no chosen bandwidth".into()))
}

/// Index of the smallest finite risk; ties go to the larger bandwidth.
pub fn argmin_risk(candidates: &[f64], risk: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for k in 0..candidates.len() {
        if !risk[k].is_finite() {
            continue;
        }
        best = match best {
            None => Some(k),
            Some(b) if risk[k] < risk[b] || (risk[k] == risk[b] && candidates[k] > candidates[b]) => Some(k),
            keep => keep,
        };
    }
    best
}

/// Risk of each candidate with curves fitted on `train` and the risk
/// evaluated on `eval` using nuisances trained on `train`.
fn half_risks(
    train: &Dataset,
    eval: &Dataset,
    provider: &dyn NuisanceProvider,
    candidates: &[f64],
    grid: &[f64],
    cfg: &SelectConfig,
) -> Vec<Result<f64>> {
    let prepared = cfg
        .fit_curves(train, provider, candidates, grid)
        .and_then(|curves| Ok((curves, provider.fit(train)?)));
    let (curves, nuisance) = match prepared {
        Ok(v) => v,
        Err(e) => return candidates.iter().map(|_| Err(e.clone())).collect(),
    };
    let w = weight_on_grid(&cfg.weight, grid, train);
    let h_min = candidates.iter().cloned().fold(f64::INFINITY, f64::min);
    curves
        .iter()
        .map(|curve| {
            if let Some(e) = curve.points.iter().find_map(|p| p.error.clone()) {
                return Err(e);
            }
            let integrand = RiskIntegrand::new(grid.to_vec(), curve.estimates(Quantity::Derivative), w.clone(), h_min)?;
            Ok(mean_risk(eval, &integrand, &nuisance, cfg.target))
        })
        .collect()
}

/// Picks the candidate minimizing the swapped two-fold risk estimate.
pub fn select(data: &Dataset, candidates: &[f64], provider: &dyn NuisanceProvider, cfg: &SelectConfig) -> Result<RiskTable> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no bandwidth candidates".into()));
    }
    for &h in candidates {
        check_bandwidth(h)?;
    }
    let halves = data.split(2, cfg.seed);
    let h_min = candidates.iter().cloned().fold(f64::INFINITY, f64::min);
    let grid = risk_grid(data, h_min);
    select_on_halves(&halves[0], &halves[1], &grid, candidates, provider, cfg)
}

/// Selection on a given split and risk grid; `select` draws both from the data.
pub fn select_on_halves(
    first: &Dataset,
    second: &Dataset,
    grid: &[f64],
    candidates: &[f64],
    provider: &dyn NuisanceProvider,
    cfg: &SelectConfig,
) -> Result<RiskTable> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no bandwidth candidates".into()));
    }
    let r1 = half_risks(first, second, provider, candidates, grid, cfg);
    let r2 = half_risks(second, first, provider, candidates, grid, cfg);
    let value = |r: &Result<f64>| *r.as_ref().unwrap_or(&f64::NAN);
    let risk_1: Vec<f64> = r1.iter().map(value).collect();
    let risk_2: Vec<f64> = r2.iter().map(value).collect();
    let risk_hat: Vec<f64> = risk_1.iter().zip(&risk_2).map(|(a, b)| 0.5 * (a + b)).collect();
    let flags = r1
        .iter()
        .zip(&r2)
        .map(|(a, b)| match (a, b) {
            (Err(e), _) | (_, Err(e)) => e.code().to_string(),
            _ => crate::pseudo::FLAG_OK.to_string(),
        })
        .collect();
    let chosen = argmin_risk(candidates, &risk_hat).ok_or(Error::AllCandidatesFailed)?;
    Ok(RiskTable {
        method: cfg.method,
        target: cfg.target,
        candidates: candidates.to_vec(),
        risk_hat,
        risk_1,
        risk_2,
        chosen,
        flags,
        fold_scheme: TwoFoldScheme { seed: cfg.seed, sizes: [first.n(), second.n()] },
    })
}
