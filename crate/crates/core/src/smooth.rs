//! Doubly robust estimation of the kernel-smoothed dose-response derivative
//! `θ_h(z0) = E[∫ ∂μ/∂z(X, z) K_h(z - z0) dz]` through its influence function
//!
//! `φ_h(O) = -K_h'(Z - z0)(W - m(X,Z))/π(Z|X) - ∫ m(X, z) K_h'(z - z0) dz`.

use rayon::prelude::*;

use crate::data::{Dataset, Target};
use crate::error::{Error, Result};
use crate::kernels::{check_bandwidth, Kernel, Support};
use crate::nuisance::{NuisanceFit, NuisanceProvider};
use crate::pseudo::{rotations, CurveEstimate, CurvePoint, Method, Observation, FLAG_OK};
use crate::quad::{adaptive_simpson, GaussLegendre};

pub const MIN_NODES: usize = 64;
pub const MAX_NODES: usize = 1024;
const REFINE_TOL: f64 = 1e-4;
/// Half-width, in bandwidths, of the integration window for unbounded kernels.
const UNBOUNDED_RADIUS: f64 = 9.0;
const PROBES: usize = 16;

fn window_radius(kernel: &Kernel) -> f64 {
    match kernel.support() {
        Support::Compact => 1.0,
        Support::Unbounded => UNBOUNDED_RADIUS,
    }
}

/// Gauss-Legendre nodes over the kernel window with weights premultiplied by
/// `K_h'(t - z0)`.
#[derive(Debug, Clone)]
pub struct QuadGrid {
    pub z0: f64,
    pub h: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadGrid {
    pub fn new(kernel: &Kernel, z0: f64, h: f64, m: usize) -> Result<Self> {
        check_bandwidth(h)?;
        let r = window_radius(kernel) * h;
        let (nodes, w) = GaussLegendre::new(m.max(1)).mapped(z0 - r, z0 + r);
        let weights = nodes
            .iter()
            .zip(&w)
            .map(|(&t, &wk)| wk * kernel.derivative((t - z0) / h) / (h * h))
            .collect();
        Ok(Self { z0, h, nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `∫ f(t) K_h'(t - z0) dt` and the same integral of `|f K_h'|`.
    #[inline]
    pub fn integral<F: Fn(f64) -> f64>(&self, f: F) -> (f64, f64) {
        let mut s = 0.0;
        let mut a = 0.0;
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            let v = w * f(t);
            s += v;
            a += v.abs();
        }
        (s, a)
    }
}

#[inline]
fn influence_with(o: &Observation<'_>, nuisance: &NuisanceFit, kernel: &Kernel, q: &QuadGrid, target: Target) -> f64 {
    let kp = kernel.derivative((o.z - q.z0) / q.h) / (q.h * q.h);
    let first = if kp == 0.0 {
        0.0
    } else {
        -kp * (o.response(target) - nuisance.regression(target, o.x, o.z)) / nuisance.pi(o.x, o.z)
    };
    let (integral, _) = q.integral(|t| nuisance.regression(target, o.x, t));
    first - integral
}

fn integral_change(o: &Observation<'_>, nuisance: &NuisanceFit, coarse: &QuadGrid, fine: &QuadGrid, target: Target) -> (f64, f64) {
    let (a, _) = coarse.integral(|t| nuisance.regression(target, o.x, t));
    let (b, scale) = fine.integral(|t| nuisance.regression(target, o.x, t));
    ((a - b).abs(), b.abs().max(scale))
}

/// `φ_h(O; z0)` with the integral term checked against a grid with twice
/// as many nodes.
pub fn influence_value(
    o: &Observation<'_>,
    nuisance: &NuisanceFit,
    z0: f64,
    h: f64,
    kernel: &Kernel,
    quad: &QuadGrid,
    target: Target,
) -> Result<f64> {
    if quad.len() < MIN_NODES || quad.z0 != z0 || quad.h != h {
        return Err(Error::InvalidInput("quadrature grid does not match the evaluation point".into()));
    }
    let fine = QuadGrid::new(kernel, z0, h, 2 * quad.len())?;
    let (change, scale) = integral_change(o, nuisance, quad, &fine, target);
    if change > REFINE_TOL * scale {
        return Err(Error::QuadratureUnderResolved { z0, change: change / scale });
    }
    Ok(influence_with(o, nuisance, kernel, quad, target))
}

/// Smallest node count from 64 upward (doubling, at most 1024) whose integral
/// term agrees with the next refinement on a spread of probe observations.
pub fn resolve_grid(fold: &Dataset, nuisance: &NuisanceFit, z0: f64, h: f64, kernel: &Kernel, target: Target) -> Result<QuadGrid> {
    let n = fold.n();
    let probes: Vec<usize> = (0..PROBES.min(n)).map(|k| k * n / PROBES.min(n)).collect();
    let mut m = MIN_NODES;
    let mut coarse = QuadGrid::new(kernel, z0, h, m)?;
    loop {
        let fine = QuadGrid::new(kernel, z0, h, 2 * m)?;
        let worst = probes
            .iter()
            .map(|&i| {
                let (c, s) = integral_change(&fold.obs(i), nuisance, &coarse, &fine, target);
                if s > 0.0 {
                    c / s
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max);
        if worst <= REFINE_TOL {
            return Ok(coarse);
        }
        if 2 * m >= MAX_NODES {
            return Err(Error::QuadratureUnderResolved { z0, change: worst });
        }
        m *= 2;
        coarse = fine;
    }
}

/// `φ_h(O_i; z0)` for every observation of `fold`.
pub fn influence_values(
    fold: &Dataset,
    nuisance: &NuisanceFit,
    z0: f64,
    h: f64,
    kernel: &Kernel,
    target: Target,
) -> Result<Vec<f64>> {
    fold.fold.ensure_disjoint(&nuisance.training_fold)?;
    if fold.is_empty() {
        return Err(Error::EmptyFold);
    }
    let q = resolve_grid(fold, nuisance, z0, h, kernel, target)?;
    let phi: Vec<f64> = (0..fold.n())
        .into_par_iter()
        .map(|i| influence_with(&fold.obs(i), nuisance, kernel, &q, target))
        .collect();
    if let Some(i) = phi.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResult(i));
    }
    Ok(phi)
}

#[derive(Debug, Clone)]
pub struct SmoothDerivEstimate {
    pub z0: f64,
    pub h: f64,
    pub theta_hat: f64,
    pub stderr: f64,
    pub kernel: Kernel,
    pub n_used: usize,
}

pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// `θ̂_h(z0)`: the sample mean of `φ̂_h` over `fold`, with standard error
/// `sd(φ̂_h)/√n`.
pub fn estimate(
    fold: &Dataset,
    nuisance: &NuisanceFit,
    z0: f64,
    h: f64,
    kernel: &Kernel,
    target: Target,
) -> Result<SmoothDerivEstimate> {
    let phi = influence_values(fold, nuisance, z0, h, kernel, target)?;
    let (theta_hat, stderr) = mean_and_se(&phi);
    Ok(SmoothDerivEstimate { z0, h, theta_hat, stderr, kernel: kernel.clone(), n_used: phi.len() })
}

#[derive(Debug, Clone)]
pub struct SmoothConfig {
    pub h: f64,
    pub kernel: Kernel,
    pub rotate: bool,
    pub seed: u64,
}

impl SmoothConfig {
    pub fn new(h: f64) -> Self {
        Self { h, kernel: Kernel::make_high_order(4).expect("order 4 kernel"), rotate: true, seed: 0 }
    }
}

/// Evaluation samples paired with the nuisances to use on them: the whole
/// sample when the nuisances were never trained on it, otherwise the
/// regression folds of the cross-fitting rotations.
pub fn evaluation_folds(
    data: &Dataset,
    provider: &dyn NuisanceProvider,
    rotate: bool,
    seed: u64,
) -> Result<Vec<(Dataset, NuisanceFit)>> {
    if provider.uses_training_data() {
        Ok(rotations(data, provider, rotate, seed)?
            .into_iter()
            .map(|r| (r.regression, r.nuisance))
            .collect())
    } else {
        Ok(vec![(data.clone(), provider.fit(data)?)])
    }
}

/// Combines per-fold estimates: mean of estimates, `sqrt(Σ se²)/R`.
pub fn combine_estimates(z0: f64, parts: &[Result<SmoothDerivEstimate>]) -> CurvePoint {
    let r = parts.len() as f64;
    let (mut est, mut var, mut n) = (0.0, 0.0, 0);
    for p in parts {
        match p {
            Ok(e) => {
                est += e.theta_hat;
                var += e.stderr * e.stderr;
                n += e.n_used;
            }
            Err(e) => return CurvePoint::missing(z0, e.clone()),
        }
    }
    CurvePoint {
        z0,
        value: f64::NAN,
        value_se: f64::NAN,
        derivative: est / r,
        derivative_se: var.sqrt() / r,
        n_local: n,
        flag: FLAG_OK.to_string(),
        error: None,
    }
}

/// Smooth-approximation derivative curve on `grid`.
pub fn smooth_curve(
    data: &Dataset,
    target: Target,
    provider: &dyn NuisanceProvider,
    grid: &[f64],
    cfg: &SmoothConfig,
) -> Result<CurveEstimate> {
    check_bandwidth(cfg.h)?;
    let folds = evaluation_folds(data, provider, cfg.rotate, cfg.seed)?;
    Ok(smooth_curve_on(&folds, target, grid, cfg))
}

/// Smooth-approximation derivative curve on precomputed evaluation folds.
pub fn smooth_curve_on(folds: &[(Dataset, NuisanceFit)], target: Target, grid: &[f64], cfg: &SmoothConfig) -> CurveEstimate {
    let points = grid
        .iter()
        .map(|&z0| {
            let parts: Vec<_> = folds
                .iter()
                .map(|(fold, nf)| estimate(fold, nf, z0, cfg.h, &cfg.kernel, target))
                .collect();
            combine_estimates(z0, &parts)
        })
        .collect();
    CurveEstimate { target, method: Method::Smooth, h: cfg.h, p: None, kernel: cfg.kernel.name(), points }
}

/// `θ_h(z0) - θ(z0)` for a known regression surface: the smoothed target is
/// `-E_X ∫ μ(X, z) K_h'(z - z0) dz`, averaged over `x_draws` (or evaluated
/// once with empty covariates when `x_draws` is empty).
pub fn smoothing_bias_oracle(
    mu: &(dyn Fn(&[f64], f64) -> f64 + Sync),
    theta_z0: f64,
    x_draws: &[Vec<f64>],
    z0: f64,
    h: f64,
    kernel: &Kernel,
) -> Result<f64> {
    check_bandwidth(h)?;
    let r = window_radius(kernel) * h;
    let smoothed = |x: &[f64], tol: f64| -> f64 {
        let f = |t: f64| mu(x, t) * kernel.derivative((t - z0) / h) / (h * h);
        -(adaptive_simpson(f, z0 - r, z0, tol) + adaptive_simpson(f, z0, z0 + r, tol))
    };
    let one = |x: &[f64]| -> Result<f64> {
        let coarse = smoothed(x, 1e-10);
        let fine = smoothed(x, 1e-13);
        let change = (coarse - fine).abs();
        if change > 1e-6 * fine.abs().max(1.0) {
            return Err(Error::QuadratureUnderResolved { z0, change });
        }
        Ok(fine)
    };
    let theta_h = if x_draws.is_empty() {
        one(&[])?
    } else {
        let vals = x_draws.par_iter().map(|x| one(x)).collect::<Result<Vec<f64>>>()?;
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    Ok(theta_h - theta_z0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FoldId;
    use crate::dgp::{Dgp, GaussianIv};
    use crate::nuisance::{ClipBounds, FixedNuisance};
    use std::sync::Arc;

    fn surface_nf(mu: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static) -> NuisanceFit {
        NuisanceFit::new(
            Arc::new(|_: &[f64], _: f64| 0.4),
            Arc::new(mu),
            Arc::new(|_: &[f64], _: f64| 0.0),
            FoldId::external(),
            ClipBounds::default(),
        )
    }

    fn obs<'a>(x: &'a [f64], z: f64, y: f64, fold: &'a FoldId) -> Observation<'a> {
        Observation { x, z, a: 0.0, y, fold }
    }

    #[test]
    fn observation_at_the_evaluation_point_has_no_residual_term() {
        let k = Kernel::gaussian();
        let nf = surface_nf(|_, z| z * z);
        let fid = FoldId::external();
        let q = QuadGrid::new(&k, 1.0, 0.3, 64).unwrap();
        let o = obs(&[], 1.0, 50.0, &fid);
        let v = influence_value(&o, &nf, 1.0, 0.3, &k, &q, Target::Outcome).unwrap();
        // -∫ z² K_h'(z - 1) dz = ∫ 2z K_h(z - 1) dz = 2
        assert!((v - 2.0).abs() < 1e-8);
    }

    #[test]
    fn constant_regression_leaves_only_the_residual_term() {
        let k = Kernel::gaussian();
        let nf = surface_nf(|_, _| 3.0);
        let fid = FoldId::external();
        let q = QuadGrid::new(&k, 0.0, 0.5, 64).unwrap();
        let o = obs(&[], 0.5, 4.0, &fid);
        let v = influence_value(&o, &nf, 0.0, 0.5, &k, &q, Target::Outcome).unwrap();
        let expect = -k.eval_localized_derivative(0.5, 0.0, 0.5).unwrap() * (4.0 - 3.0) / 0.4;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn identity_regression_integrates_to_one() {
        for k in [Kernel::gaussian(), Kernel::make_high_order(4).unwrap(), Kernel::make_high_order(6).unwrap()] {
            let q = QuadGrid::new(&k, 0.7, 0.4, 64).unwrap();
            let (v, _) = q.integral(|t| t);
            assert!((-v - 1.0).abs() < 1e-6, "{}", k.name());
        }
    }

    #[test]
    fn integration_by_parts_holds() {
        let k = Kernel::make_high_order(4).unwrap();
        let (z0, h) = (1.3, 0.35);
        let mu = |z: f64| (0.7 * z).sin() + 0.1 * z * z * z;
        let dmu = |z: f64| 0.7 * (0.7 * z).cos() + 0.3 * z * z;
        let r = 9.0 * h;
        let lhs = adaptive_simpson(|z| dmu(z) * k.eval_localized(z, z0, h).unwrap(), z0 - r, z0 + r, 1e-12);
        let rhs = -adaptive_simpson(|z| mu(z) * k.eval_localized_derivative(z, z0, h).unwrap(), z0 - r, z0 + r, 1e-12);
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let k = Kernel::gaussian();
        let nf = surface_nf(|_, z| z);
        let fid = FoldId::external();
        let q = QuadGrid::new(&k, 0.0, 0.5, 32).unwrap();
        let o = obs(&[], 0.1, 0.0, &fid);
        assert!(influence_value(&o, &nf, 0.0, 0.5, &k, &q, Target::Outcome).is_err());
    }

    #[test]
    fn rough_regression_is_under_resolved() {
        let k = Kernel::gaussian();
        let nf = surface_nf(|_, z| (5000.0 * z).sin());
        let data = GaussianIv::liv_main().generate(20, 1);
        let err = resolve_grid(&data, &nf, 2.0, 1.0, &k, Target::Outcome).unwrap_err();
        assert!(matches!(err, Error::QuadratureUnderResolved { .. }));
    }

    #[test]
    fn linear_truth_is_recovered() {
        let g = GaussianIv {
            y_xz: [0.0; 4],
            y_z3: 0.0,
            y_z: 0.6,
            ..GaussianIv::liv_main()
        };
        let data = g.generate(5000, 2);
        let k = Kernel::make_high_order(4).unwrap();
        let e = estimate(&data, &g.true_nuisance(), 2.0, 0.5, &k, Target::Outcome).unwrap();
        assert!((e.theta_hat - 0.6).abs() < 3.0 * e.stderr, "{e:?}");
        assert_eq!(e.n_used, 5000);
    }

    #[test]
    fn curve_with_fixed_nuisance_uses_every_row() {
        let g = GaussianIv::liv_main();
        let data = g.generate(900, 3);
        let c = smooth_curve(&data, Target::Treatment, &FixedNuisance(g.true_nuisance()), &[1.5, 2.5], &SmoothConfig::new(0.6)).unwrap();
        assert!(c.points.iter().all(|p| p.n_local == 900 && p.flag == "ok"));
        assert!(c.points[0].value.is_nan());
    }

    #[test]
    fn bias_oracle_linear_is_zero() {
        let b = smoothing_bias_oracle(&|_, z| 2.0 + 0.5 * z, 0.5, &[], 1.0, 0.3, &Kernel::gaussian()).unwrap();
        assert!(b.abs() < 1e-9);
    }

    #[test]
    fn bias_oracle_cubic_second_order_closed_form() {
        // θ_h(z0) = ∫ 3(z0 + hu)² K(u) du = 3z0² + 3h² μ2.
        for &h in &[0.1, 0.3, 0.7] {
            let b = smoothing_bias_oracle(&|_, z| z * z * z, 3.0, &[], 1.0, h, &Kernel::gaussian()).unwrap();
            assert!((b - 3.0 * h * h).abs() < 1e-6);
        }
    }

    #[test]
    fn bias_oracle_averages_over_covariates() {
        let draws = vec![vec![1.0], vec![3.0]];
        let b = smoothing_bias_oracle(&|x, z| x[0] * z, 0.0, &draws, 0.0, 0.5, &Kernel::gaussian()).unwrap();
        assert!((b - 2.0).abs() < 1e-8);
    }
}
