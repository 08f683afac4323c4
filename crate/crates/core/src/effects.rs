//! Instrumental-variable estimands built from dose-response curves: the LIV
//! curve `γ = θ^Y / θ^A`, the latent-threshold density `θ^A`, the maximal
//! complier proportion `λ̄(1) - λ̄(0)` and the effect among those compliers.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Target};
use crate::error::{Error, Result};
use crate::kernels::Kernel;
use crate::localpoly::LocalFit;
use crate::nuisance::NuisanceProvider;
use crate::pseudo::{crossfit, fmt_num, CrossFit, CurveConfig, CurveEstimate, Method, Rotation, FLAG_OK, Z_975};
use crate::quad::GaussLegendre;
use crate::smooth::{evaluation_folds, influence_values, smooth_curve, smooth_curve_on, SmoothConfig};

pub const DEFAULT_RELEVANCE_FLOOR: f64 = 1e-3;
pub const FLAG_NEGATIVE_DENSITY: &str = "effects.negative_density";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceRoute {
    RateAware,
    InfluenceExpansion,
}

impl VarianceRoute {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rate-aware" => Ok(VarianceRoute::RateAware),
            "influence" | "influence-expansion" => Ok(VarianceRoute::InfluenceExpansion),
            other => Err(Error::InvalidInput(format!("unknown variance route `{other}`"))),
        }
    }
}

/// An estimate with its standard error and convergence rate `a_n`
/// (for example `sqrt(n h³)` for derivative estimates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioTerm {
    pub estimate: f64,
    pub stderr: f64,
    pub rate: f64,
}

/// Standard error of `num / den` when the two terms converge at possibly
/// different rates: only the slower term contributes unless the rates match,
/// in which case the full delta method with covariance `cov` applies.
pub fn ratio_variance_rate_aware(num: RatioTerm, den: RatioTerm, cov: f64) -> Result<f64> {
    if den.estimate == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let d = den.estimate;
    let tol = 1e-9 * num.rate.abs().max(den.rate.abs());
    Ok(if num.rate > den.rate + tol {
        num.estimate.abs() * den.stderr / (d * d)
    } else if den.rate > num.rate + tol {
        num.stderr / d.abs()
    } else {
        delta_ratio_se(num.estimate, den.estimate, num.stderr.powi(2), den.stderr.powi(2), cov)
    })
}

fn delta_ratio_se(num: f64, den: f64, var_num: f64, var_den: f64, cov: f64) -> f64 {
    let v = var_num / (den * den) + num * num * var_den / den.powi(4) - 2.0 * num * cov / den.powi(3);
    v.max(0.0).sqrt()
}

/// `sqrt(Var(φ_num/den - num/den² · φ_den) / n)`.
pub fn ratio_variance_influence(phi_num: &[f64], phi_den: &[f64], num: f64, den: f64) -> Result<f64> {
    if phi_num.len() != phi_den.len() {
        return Err(Error::MisalignedFolds(phi_num.len(), phi_den.len()));
    }
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let m = InfluenceMoments::from_arrays(phi_num, phi_den);
    Ok(delta_ratio_se(num, den, m.var_num, m.var_den, m.cov))
}

/// Variances and covariance of two estimators, as implied by their
/// influence values.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InfluenceMoments {
    pub var_num: f64,
    pub var_den: f64,
    pub cov: f64,
}

impl InfluenceMoments {
    pub fn from_arrays(a: &[f64], b: &[f64]) -> Self {
        let n = a.len() as f64;
        if a.is_empty() {
            return Self::default();
        }
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let denom = (n - 1.0).max(1.0) * n;
        let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let (dx, dy) = (x - ma, y - mb);
            vaa += dx * dx;
            vbb += dy * dy;
            vab += dx * dy;
        }
        Self { var_num: vaa / denom, var_den: vbb / denom, cov: vab / denom }
    }

    fn add(self, o: Self) -> Self {
        Self { var_num: self.var_num + o.var_num, var_den: self.var_den + o.var_den, cov: self.cov + o.cov }
    }

    fn scale(self, c: f64) -> Self {
        Self { var_num: self.var_num * c, var_den: self.var_den * c, cov: self.cov * c }
    }
}

/// Influence values of a local polynomial coefficient `β[row] / h^row`:
/// the regression part on the regression fold and the marginal-averaging
/// part on the marginal fold.
pub fn local_poly_influence(fit: &LocalFit, rot: &Rotation, xi: &[f64], target: Target, row: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = fit.h.powi(row as i32);
    let c = &rot.regression;
    let first: Vec<f64> = (0..c.n())
        .map(|i| {
            let w = fit.equivalent_weight(c.z[i], row);
            if w == 0.0 {
                0.0
            } else {
                w * (xi[i] - fit.predict(c.z[i])) / scale
            }
        })
        .collect();

    let r = fit.kernel().radius().min(6.0) * fit.h;
    let (nodes, weights) = GaussLegendre::new(48).mapped(fit.z0 - r, fit.z0 + r);
    let dinv = fit.dhat_inverse();
    let coef: Vec<f64> = nodes
        .iter()
        .zip(&weights)
        .map(|(&t, &w)| {
            let g = fit.basis(t);
            let e: f64 = (0..g.len()).map(|k| dinv[(row, k)] * g[k]).sum();
            let k = fit.kernel().eval((t - fit.z0) / fit.h) / fit.h;
            e * k * rot.marginals.f_hat(t) * w / scale
        })
        .collect();
    let b = &rot.marginal_data;
    let second: Vec<f64> = (0..b.n())
        .map(|j| {
            let x = b.x_row(j);
            nodes
                .iter()
                .zip(&coef)
                .filter(|(_, c)| **c != 0.0)
                .map(|(&t, &c)| c * rot.nuisance.regression(target, x, t))
                .sum()
        })
        .collect();
    (first, second)
}

/// Influence-implied moments of two local polynomial coefficients computed
/// on the same rotation.
fn local_poly_moments(fy: &LocalFit, fa: &LocalFit, rot: &Rotation, xi_y: &[f64], xi_a: &[f64], row: usize) -> InfluenceMoments {
    let (y1, y2) = local_poly_influence(fy, rot, xi_y, Target::Outcome, row);
    let (a1, a2) = local_poly_influence(fa, rot, xi_a, Target::Treatment, row);
    InfluenceMoments::from_arrays(&y1, &a1).add(InfluenceMoments::from_arrays(&y2, &a2))
}

#[derive(Debug, Clone)]
pub struct LivConfig {
    pub method: Method,
    pub h_num: f64,
    pub h_den: f64,
    pub p: usize,
    pub lp_kernel: Kernel,
    pub smooth_kernel: Kernel,
    pub rotate: bool,
    pub seed: u64,
    pub route: VarianceRoute,
    pub relevance_floor: f64,
}

impl LivConfig {
    pub fn new(method: Method, h: f64) -> Self {
        Self {
            method,
            h_num: h,
            h_den: h,
            p: 2,
            lp_kernel: Kernel::epanechnikov(),
            smooth_kernel: Kernel::make_high_order(4).expect("order 4 kernel"),
            rotate: true,
            seed: 0,
            route: VarianceRoute::InfluenceExpansion,
            relevance_floor: DEFAULT_RELEVANCE_FLOOR,
        }
    }

    fn curve_config(&self, h: f64) -> CurveConfig {
        CurveConfig { p: self.p, h, kernel: self.lp_kernel.clone(), rotate: self.rotate, seed: self.seed }
    }

    fn smooth_config(&self, h: f64) -> SmoothConfig {
        SmoothConfig { h, kernel: self.smooth_kernel.clone(), rotate: self.rotate, seed: self.seed }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LivPoint {
    pub z0: f64,
    pub gamma: f64,
    pub stderr: f64,
    pub theta_y: f64,
    pub theta_y_se: f64,
    pub theta_a: f64,
    pub theta_a_se: f64,
    pub flag: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LivCurve {
    pub method: Method,
    pub route: VarianceRoute,
    pub points: Vec<LivPoint>,
    pub numerator: CurveEstimate,
    pub denominator: CurveEstimate,
}

impl LivCurve {
    pub fn grid(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.z0).collect()
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.gamma).collect()
    }

    /// CSV with columns `z0, gamma, stderr, ci_lo, ci_hi, theta_y, theta_a, flag`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["z0", "gamma", "stderr", "ci_lo", "ci_hi", "theta_y", "theta_a", "flag"])?;
        for p in &self.points {
            out.write_record([
                fmt_num(p.z0),
                fmt_num(p.gamma),
                fmt_num(p.stderr),
                fmt_num(p.gamma - Z_975 * p.stderr),
                fmt_num(p.gamma + Z_975 * p.stderr),
                fmt_num(p.theta_y),
                fmt_num(p.theta_a),
                p.flag.clone(),
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

/// Derivative-rate exponent `sqrt(n h³)`.
fn derivative_rate(n: usize, h: f64) -> f64 {
    (n as f64 * h.powi(3)).sqrt()
}

/// LIV curve on `grid` from separately estimated outcome and treatment
/// derivatives on shared folds.
pub fn liv_curve(data: &Dataset, provider: &dyn NuisanceProvider, grid: &[f64], cfg: &LivConfig) -> Result<LivCurve> {
    let (numerator, denominator, moments) = match cfg.method {
        Method::LocalPoly => {
            let cf = crossfit(data, &[Target::Outcome, Target::Treatment], provider, cfg.rotate, cfg.seed)?;
            lp_components(&cf, grid, cfg)
        }
        Method::Smooth => smooth_components(data, provider, grid, cfg)?,
    };
    let n = data.n();
    let points = grid
        .iter()
        .enumerate()
        .map(|(k, &z0)| {
            let (py, pa) = (&numerator.points[k], &denominator.points[k]);
            let mut point = LivPoint {
                z0,
                gamma: f64::NAN,
                stderr: f64::NAN,
                theta_y: py.derivative,
                theta_y_se: py.derivative_se,
                theta_a: pa.derivative,
                theta_a_se: pa.derivative_se,
                flag: FLAG_OK.to_string(),
            };
            if let Some(e) = py.error.as_ref().or(pa.error.as_ref()) {
                point.flag = e.code().to_string();
                return point;
            }
            if pa.derivative.abs() <= cfg.relevance_floor {
                point.flag = Error::WeakInstrumentRegion { z0, theta_a: pa.derivative }.code().to_string();
                return point;
            }
            point.gamma = py.derivative / pa.derivative;
            let m = moments[k].unwrap_or_default();
            point.stderr = match cfg.route {
                VarianceRoute::InfluenceExpansion => {
                    delta_ratio_se(py.derivative, pa.derivative, m.var_num, m.var_den, m.cov)
                }
                VarianceRoute::RateAware => {
                    // Moment-based standard errors; the covariance is rescaled
                    // from the influence-implied correlation.
                    let corr = if m.var_num > 0.0 && m.var_den > 0.0 {
                        m.cov / (m.var_num * m.var_den).sqrt()
                    } else {
                        0.0
                    };
                    let num = RatioTerm { estimate: py.derivative, stderr: py.derivative_se, rate: derivative_rate(n, cfg.h_num) };
                    let den = RatioTerm { estimate: pa.derivative, stderr: pa.derivative_se, rate: derivative_rate(n, cfg.h_den) };
                    ratio_variance_rate_aware(num, den, corr * py.derivative_se * pa.derivative_se)
                        .unwrap_or(f64::NAN)
                }
            };
            point
        })
        .collect();
    Ok(LivCurve { method: cfg.method, route: cfg.route, points, numerator, denominator })
}

type Components = (CurveEstimate, CurveEstimate, Vec<Option<InfluenceMoments>>);

fn lp_components(cf: &CrossFit, grid: &[f64], cfg: &LivConfig) -> Components {
    let (cy, ca) = (cfg.curve_config(cfg.h_num), cfg.curve_config(cfg.h_den));
    let numerator = cf.curve(Target::Outcome, grid, &cy);
    let denominator = cf.curve(Target::Treatment, grid, &ca);
    let fy = cf.local_fits(Target::Outcome, grid, &cy);
    let fa = cf.local_fits(Target::Treatment, grid, &ca);
    let r = cf.rotations.len() as f64;
    let moments = (0..grid.len())
        .map(|k| {
            let mut total = InfluenceMoments::default();
            for (ri, rot) in cf.rotations.iter().enumerate() {
                let (a, b) = (fy[ri][k].as_ref().ok()?, fa[ri][k].as_ref().ok()?);
                let s = &cf.samples[ri];
                total = total.add(local_poly_moments(a, b, rot, &s[0].xi, &s[1].xi, 1));
            }
            Some(total.scale(1.0 / (r * r)))
        })
        .collect();
    (numerator, denominator, moments)
}

fn smooth_components(data: &Dataset, provider: &dyn NuisanceProvider, grid: &[f64], cfg: &LivConfig) -> Result<Components> {
    let folds = evaluation_folds(data, provider, cfg.rotate, cfg.seed)?;
    let numerator = smooth_curve_on(&folds, Target::Outcome, grid, &cfg.smooth_config(cfg.h_num));
    let denominator = smooth_curve_on(&folds, Target::Treatment, grid, &cfg.smooth_config(cfg.h_den));
    let r = folds.len() as f64;
    let moments = grid
        .iter()
        .map(|&z0| {
            let mut total = InfluenceMoments::default();
            for (fold, nf) in &folds {
                let py = influence_values(fold, nf, z0, cfg.h_num, &cfg.smooth_kernel, Target::Outcome).ok()?;
                let pa = influence_values(fold, nf, z0, cfg.h_den, &cfg.smooth_kernel, Target::Treatment).ok()?;
                total = total.add(InfluenceMoments::from_arrays(&py, &pa));
            }
            Some(total.scale(1.0 / (r * r)))
        })
        .collect();
    Ok((numerator, denominator, moments))
}

/// Density of the latent threshold: the treatment dose-response derivative.
/// Negative estimates are flagged, not truncated.
pub fn threshold_density(
    data: &Dataset,
    provider: &dyn NuisanceProvider,
    grid: &[f64],
    method: Method,
    lp: &CurveConfig,
    smooth: &SmoothConfig,
) -> Result<CurveEstimate> {
    let mut curve = match method {
        Method::LocalPoly => crate::pseudo::crossfit_curve(data, Target::Treatment, provider, grid, lp)?,
        Method::Smooth => smooth_curve(data, Target::Treatment, provider, grid, smooth)?,
    };
    for p in &mut curve.points {
        if p.error.is_none() && p.derivative < 0.0 {
            p.flag = FLAG_NEGATIVE_DENSITY.to_string();
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplierComponents {
    pub lambda_1: Estimate,
    pub lambda_0: Estimate,
    pub tau_1: Estimate,
    pub tau_0: Estimate,
    /// Covariance of the outcome and treatment boundary estimates at `z = 0`, `z = 1`.
    pub cov_0: f64,
    pub cov_1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplierResult {
    pub proportion: f64,
    pub proportion_se: f64,
    pub proportion_ci: (f64, f64),
    pub late: Option<f64>,
    pub late_se: Option<f64>,
    pub late_ci: Option<(f64, f64)>,
    pub components: ComplierComponents,
    pub h: f64,
    pub p: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ComplierConfig {
    pub curve: CurveConfig,
    pub relevance_floor: f64,
}

impl ComplierConfig {
    pub fn new(h: f64) -> Self {
        Self { curve: CurveConfig::new(1, h), relevance_floor: DEFAULT_RELEVANCE_FLOOR }
    }
}

/// Maximal complier proportion and the effect among maximal compliers from
/// boundary estimates of both dose-response curves at `z = 0` and `z = 1`.
/// The two boundaries are treated as independent; the outcome/treatment
/// covariance within each boundary is estimated from the local fits.
pub fn maximal_complier(data: &Dataset, provider: &dyn NuisanceProvider, cfg: &ComplierConfig) -> Result<ComplierResult> {
    let (lo, hi) = data.z_range();
    if lo < 0.0 || hi > 1.0 {
        return Err(Error::InvalidInput(format!(
            "instrument must lie in [0, 1] (observed [{lo}, {hi}]); rescale it first"
        )));
    }
    let cc = &cfg.curve;
    let cf = crossfit(data, &[Target::Outcome, Target::Treatment], provider, cc.rotate, cc.seed)?;
    let grid = [0.0, 1.0];
    let ty = cf.curve(Target::Outcome, &grid, cc);
    let ta = cf.curve(Target::Treatment, &grid, cc);
    for p in ty.points.iter().chain(&ta.points) {
        if let Some(e) = &p.error {
            return Err(e.clone());
        }
    }
    let fy = cf.local_fits(Target::Outcome, &grid, cc);
    let fa = cf.local_fits(Target::Treatment, &grid, cc);
    let r = cf.rotations.len() as f64;
    let mut cov = [0.0; 2];
    for (k, c) in cov.iter_mut().enumerate() {
        for (ri, rot) in cf.rotations.iter().enumerate() {
            let (a, b) = (fy[ri][k].as_ref().map_err(Clone::clone)?, fa[ri][k].as_ref().map_err(Clone::clone)?);
            let corr = boundary_correlation(a, b, rot, &cf.samples[ri][0].xi, &cf.samples[ri][1].xi);
            let n = rot.regression.n();
            let (fy_hat, fa_hat) = (rot.marginals.f_hat(grid[k]), rot.marginals.f_hat(grid[k]));
            let sy = a.value_stderr(fy_hat, n)?;
            let sa = b.value_stderr(fa_hat, n)?;
            *c += corr * sy * sa;
        }
        *c /= r * r;
    }
    let est = |c: &CurveEstimate, k: usize| Estimate { estimate: c.points[k].value, stderr: c.points[k].value_se };
    let components = ComplierComponents {
        lambda_1: est(&ta, 1),
        lambda_0: est(&ta, 0),
        tau_1: est(&ty, 1),
        tau_0: est(&ty, 0),
        cov_0: cov[0],
        cov_1: cov[1],
    };
    let d = components.lambda_1.estimate - components.lambda_0.estimate;
    let var_d = components.lambda_1.stderr.powi(2) + components.lambda_0.stderr.powi(2);
    let d_se = var_d.sqrt();
    let proportion_ci = ((d - Z_975 * d_se).clamp(0.0, 1.0), (d + Z_975 * d_se).clamp(0.0, 1.0));
    let mut result = ComplierResult {
        proportion: d.clamp(0.0, 1.0),
        proportion_se: d_se,
        proportion_ci,
        late: None,
        late_se: None,
        late_ci: None,
        components: components.clone(),
        h: cc.h,
        p: cc.p,
        warning: None,
    };
    if d <= cfg.relevance_floor {
        result.warning = Some(Error::WeakInstrument(d).code().to_string());
        return Ok(result);
    }
    let num = components.tau_1.estimate - components.tau_0.estimate;
    let var_num = components.tau_1.stderr.powi(2) + components.tau_0.stderr.powi(2);
    let late = num / d;
    let late_se = delta_ratio_se(num, d, var_num, var_d, cov[0] + cov[1]);
    result.late = Some(late);
    result.late_se = Some(late_se);
    result.late_ci = Some((late - Z_975 * late_se, late + Z_975 * late_se));
    Ok(result)
}

/// Correlation of two local intercepts from their equivalent-kernel
/// weighted residual cross-products.
fn boundary_correlation(a: &LocalFit, b: &LocalFit, rot: &Rotation, xi_y: &[f64], xi_a: &[f64]) -> f64 {
    let c = &rot.regression;
    let (mut syy, mut saa, mut sya) = (0.0, 0.0, 0.0);
    for i in 0..c.n() {
        let (wy, wa) = (a.equivalent_weight(c.z[i], 0), b.equivalent_weight(c.z[i], 0));
        if wy == 0.0 && wa == 0.0 {
            continue;
        }
        let ry = wy * (xi_y[i] - a.predict(c.z[i]));
        let ra = wa * (xi_a[i] - b.predict(c.z[i]));
        syy += ry * ry;
        saa += ra * ra;
        sya += ry * ra;
    }
    if syy > 0.0 && saa > 0.0 {
        sya / (syy * saa).sqrt()
    } else {
        0.0
    }
}
