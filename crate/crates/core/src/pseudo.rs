//! Doubly robust pseudo-outcomes and three-fold cross-fitted local
//! polynomial estimation of dose-response curves and their derivatives.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FoldId, Target};
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::localpoly::{self, LocalFit};
use crate::nuisance::{marginals_from, MarginalFit, NuisanceFit, NuisanceProvider};

/// Nodes used to tabulate fold-averaged marginals.
pub const MARGINAL_TABLE_NODES: usize = 512;

/// One observation `(X, Z, A, Y)` and the fold it belongs to.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub x: &'a [f64],
    pub z: f64,
    pub a: f64,
    pub y: f64,
    pub fold: &'a FoldId,
}

impl<'a> Observation<'a> {
    pub fn response(&self, target: Target) -> f64 {
        match target {
            Target::Outcome => self.y,
            Target::Treatment => self.a,
        }
    }
}

impl Dataset {
    pub fn obs(&self, i: usize) -> Observation<'_> {
        Observation { x: self.x_row(i), z: self.z[i], a: self.a[i], y: self.y[i], fold: &self.fold }
    }
}

/// `(W - m̂(X,Z)) f̂(Z) / π̂(Z|X) + m̂0(Z)` where `(W, m̂, m̂0)` is
/// `(Y, μ̂, τ̂0)` for the outcome and `(A, λ̂, λ̂0)` for the treatment.
pub fn pseudo_outcome(
    o: &Observation<'_>,
    nuisance: &NuisanceFit,
    marginals: &MarginalFit,
    target: Target,
) -> Result<f64> {
    o.fold.ensure_disjoint(&nuisance.training_fold)?;
    o.fold.ensure_disjoint(marginals.source_fold())?;
    let m = nuisance.regression(target, o.x, o.z);
    let v = (o.response(target) - m) * marginals.f_hat(o.z) / nuisance.pi(o.x, o.z)
        + marginals.regression0(target, o.z);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteResult(0))
    }
}

/// Which folds trained each ingredient of a pseudo-sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldScheme {
    pub rotation: usize,
    pub nuisance: FoldId,
    pub marginals: FoldId,
    pub regression: FoldId,
}

#[derive(Debug, Clone)]
pub struct PseudoSample {
    pub z: Vec<f64>,
    pub xi: Vec<f64>,
    pub target: Target,
    pub fold_scheme: FoldScheme,
}

/// Pseudo-outcomes for every observation of `fold`.
pub fn pseudo_sample(
    fold: &Dataset,
    nuisance: &NuisanceFit,
    marginals: &MarginalFit,
    target: Target,
    fold_scheme: FoldScheme,
) -> Result<PseudoSample> {
    let xi = (0..fold.n())
        .into_par_iter()
        .map(|i| {
            pseudo_outcome(&fold.obs(i), nuisance, marginals, target).map_err(|e| match e {
                Error::NonFiniteResult(_) => Error::NonFiniteResult(i),
                other => other,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PseudoSample { z: fold.z.clone(), xi, target, fold_scheme })
}

/// One assignment of the three folds to nuisance training, marginal
/// averaging and final regression.
#[derive(Debug, Clone)]
pub struct Rotation {
    pub index: usize,
    pub nuisance: NuisanceFit,
    pub marginals: MarginalFit,
    /// Fold the marginals were averaged over.
    pub marginal_data: Dataset,
    pub regression: Dataset,
    pub scheme: FoldScheme,
}

/// Seeded three-way split and the one or three rotations built on it.
/// Rotation `r` trains nuisances on fold `r`, averages marginals over fold
/// `r+1` and regresses on fold `r+2` (mod 3). The split leaves any
/// remainder rows in fold 2, the regression fold of rotation 0.
pub fn rotations(
    data: &Dataset,
    provider: &dyn NuisanceProvider,
    rotate: bool,
    seed: u64,
) -> Result<Vec<Rotation>> {
    if data.n() < 9 {
        return Err(Error::FoldTooSmall { found: data.n(), needed: 9 });
    }
    let folds = data.split(3, seed);
    let (lo, hi) = data.z_range();
    let pad = 0.01 * (hi - lo).max(1e-8);
    let count = if rotate { 3 } else { 1 };
    (0..count)
        .map(|r| {
            let (a, b, c) = (&folds[r], &folds[(r + 1) % 3], &folds[(r + 2) % 3]);
            let nuisance = provider.fit(a)?;
            let marginals = marginals_from(&nuisance, b)?.tabulated(lo - pad, hi + pad, MARGINAL_TABLE_NODES);
            Ok(Rotation {
                index: r,
                scheme: FoldScheme {
                    rotation: r,
                    nuisance: if provider.uses_training_data() { a.fold.clone() } else { FoldId::external() },
                    marginals: b.fold.clone(),
                    regression: c.fold.clone(),
                },
                nuisance,
                marginals,
                marginal_data: b.clone(),
                regression: c.clone(),
            })
        })
        .collect()
}

/// Cross-fitted pseudo-samples for several targets on shared folds.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub rotations: Vec<Rotation>,
    pub targets: Vec<Target>,
    /// `samples[r][t]` for rotation `r` and target index `t`.
    pub samples: Vec<Vec<PseudoSample>>,
}

pub fn crossfit(
    data: &Dataset,
    targets: &[Target],
    provider: &dyn NuisanceProvider,
    rotate: bool,
    seed: u64,
) -> Result<CrossFit> {
    let rotations = rotations(data, provider, rotate, seed)?;
    let samples = rotations
        .iter()
        .map(|rot| {
            targets
                .iter()
                .map(|&t| pseudo_sample(&rot.regression, &rot.nuisance, &rot.marginals, t, rot.scheme.clone()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossFit { rotations, targets: targets.to_vec(), samples })
}

impl CrossFit {
    pub fn target_index(&self, target: Target) -> Option<usize> {
        self.targets.iter().position(|&t| t == target)
    }

    /// Local fits `[rotation][grid point]` for one target.
    pub fn local_fits(&self, target: Target, grid: &[f64], cfg: &CurveConfig) -> Vec<Vec<Result<LocalFit>>> {
        let t = self.target_index(target).expect("target was cross-fitted");
        self.samples
            .iter()
            .map(|s| localpoly::fit_grid(&s[t].z, &s[t].xi, grid, cfg.h, cfg.p, &cfg.kernel))
            .collect()
    }

    /// Rotation-averaged curve for one target.
    pub fn curve(&self, target: Target, grid: &[f64], cfg: &CurveConfig) -> CurveEstimate {
        let fits = self.local_fits(target, grid, cfg);
        let points = combine_local_fits(&fits, &self.rotations, grid);
        CurveEstimate {
            target,
            method: Method::LocalPoly,
            h: cfg.h,
            p: Some(cfg.p),
            kernel: cfg.kernel.name(),
            points,
        }
    }
}

/// Local polynomial settings.
#[derive(Debug, Clone)]
pub struct CurveConfig {
    pub p: usize,
    pub h: f64,
    pub kernel: Kernel,
    pub rotate: bool,
    pub seed: u64,
}

impl CurveConfig {
    pub fn new(p: usize, h: f64) -> Self {
        Self { p, h, kernel: Kernel::epanechnikov(), rotate: true, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LocalPoly,
    Smooth,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::LocalPoly => "local-poly",
            Method::Smooth => "smooth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "local-poly" | "localpoly" | "lp" => Ok(Method::LocalPoly),
            "smooth" => Ok(Method::Smooth),
            other => Err(Error::InvalidInput(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Value,
    Derivative,
}

pub const FLAG_OK: &str = "ok";
pub const Z_975: f64 = 1.959_963_984_540_054;

/// Estimates at one grid point; missing quantities are `NaN`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub z0: f64,
    pub value: f64,
    pub value_se: f64,
    pub derivative: f64,
    pub derivative_se: f64,
    pub n_local: usize,
    pub flag: String,
    #[serde(skip)]
    pub error: Option<Error>,
}

impl CurvePoint {
    pub fn missing(z0: f64, err: Error) -> Self {
        Self {
            z0,
            value: f64::NAN,
            value_se: f64::NAN,
            derivative: f64::NAN,
            derivative_se: f64::NAN,
            n_local: 0,
            flag: err.code().to_string(),
            error: Some(err),
        }
    }

    pub fn is_missing(&self) -> bool {
        self.error.is_some()
    }

    pub fn get(&self, q: Quantity) -> (f64, f64) {
        match q {
            Quantity::Value => (self.value, self.value_se),
            Quantity::Derivative => (self.derivative, self.derivative_se),
        }
    }
}

/// Estimates on a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveEstimate {
    pub target: Target,
    pub method: Method,
    pub h: f64,
    pub p: Option<usize>,
    pub kernel: String,
    pub points: Vec<CurvePoint>,
}

impl CurveEstimate {
    pub fn grid(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.z0).collect()
    }

    pub fn estimates(&self, q: Quantity) -> Vec<f64> {
        self.points.iter().map(|p| p.get(q).0).collect()
    }

    pub fn stderrs(&self, q: Quantity) -> Vec<f64> {
        self.points.iter().map(|p| p.get(q).1).collect()
    }

    /// CSV with columns `z0, estimate, stderr, ci_lo, ci_hi, n_local, flag`.
    pub fn write_csv<W: std::io::Write>(&self, w: W, q: Quantity) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["z0", "estimate", "stderr", "ci_lo", "ci_hi", "n_local", "flag"])?;
        for p in &self.points {
            let (est, se) = p.get(q);
            out.write_record([
                fmt_num(p.z0),
                fmt_num(est),
                fmt_num(se),
                fmt_num(est - Z_975 * se),
                fmt_num(est + Z_975 * se),
                p.n_local.to_string(),
                p.flag.clone(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self, q: Quantity) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, q).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 csv")
    }
}

/// Shortest round-trip representation; empty for non-finite values.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

/// Averages per-rotation local fits. A grid point is missing when any
/// rotation failed there. Standard errors combine as `sqrt(Σ se_r²)/R`.
pub fn combine_local_fits(fits: &[Vec<Result<LocalFit>>], rotations: &[Rotation], grid: &[f64]) -> Vec<CurvePoint> {
    let r = fits.len() as f64;
    grid.iter()
        .enumerate()
        .map(|(k, &z0)| {
            let mut acc = [0.0; 4];
            let mut n_local = 0;
            for (rot, per_rot) in rotations.iter().zip(fits) {
                let fit = match &per_rot[k] {
                    Ok(f) => f,
                    Err(e) => return CurvePoint::missing(z0, e.clone()),
                };
                let n = rot.regression.n();
                let f_hat = rot.marginals.f_hat(z0);
                let (vse, dse) = match (fit.value_stderr(f_hat, n), fit.derivative_stderr(f_hat, n)) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(e), _) | (_, Err(e)) => return CurvePoint::missing(z0, e),
                };
                acc[0] += fit.value();
                acc[1] += vse * vse;
                acc[2] += fit.derivative();
                acc[3] += dse * dse;
                n_local += fit.n_local;
            }
            CurvePoint {
                z0,
                value: acc[0] / r,
                value_se: acc[1].sqrt() / r,
                derivative: acc[2] / r,
                derivative_se: acc[3].sqrt() / r,
                n_local,
                flag: FLAG_OK.to_string(),
                error: None,
            }
        })
        .collect()
}

/// Cross-fitted local polynomial dose-response curve and derivative.
pub fn crossfit_curve(
    data: &Dataset,
    target: Target,
    provider: &dyn NuisanceProvider,
    grid: &[f64],
    cfg: &CurveConfig,
) -> Result<CurveEstimate> {
    if data.n() < 3 * (cfg.p + 2) {
        return Err(Error::FoldTooSmall { found: data.n(), needed: 3 * (cfg.p + 2) });
    }
    let cf = crossfit(data, &[target], provider, cfg.rotate, cfg.seed)?;
    Ok(cf.curve(target, grid, cfg))
}

/// Estimate at a single point at or near the edge of the instrument's
/// support; the local fit only sees data on one side.
pub fn boundary_curve(
    data: &Dataset,
    target: Target,
    z0: f64,
    provider: &dyn NuisanceProvider,
    cfg: &CurveConfig,
) -> Result<CurvePoint> {
    let curve = crossfit_curve(data, target, provider, &[z0], cfg)?;
    let point = curve.points.into_iter().next().expect("one grid point");
    match &point.error {
        Some(e) => Err(e.clone()),
        None => Ok(point),
    }
}

/// `m` equispaced points between the 5% and 95% quantiles of `Z`.
pub fn default_grid(data: &Dataset, m: usize) -> Vec<f64> {
    let (lo, hi) = (data.z_quantile(0.05), data.z_quantile(0.95));
    linspace(lo, hi, m)
}

pub fn linspace(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    match m {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect(),
    }
}
