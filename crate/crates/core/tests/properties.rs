use std::sync::Arc;

use contiv::bandwidth::{self, SelectConfig};
use contiv::data::FoldId;
use contiv::dgp::{Dgp, GaussianIv};
use contiv::effects::{liv_curve, LivConfig};
use contiv::localpoly;
use contiv::nuisance::{synthetic_nuisance, ClipBounds, FixedNuisance, LearnedNuisance, Learner, NuisanceFit};
use contiv::pseudo::{crossfit_curve, linspace, CurveConfig};
use contiv::quad::adaptive_simpson;
use contiv::sim::{self, Estimand, Estimator, SimConfig};
use contiv::{Dataset, Kernel, Method, Target};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn kernels() -> Vec<Kernel> {
    ["epanechnikov", "gaussian", "gaussian4", "gaussian6"].iter().map(|k| Kernel::from_name(k).unwrap()).collect()
}

fn kernel() -> impl Strategy<Value = Kernel> {
    (0usize..4).prop_map(|i| kernels()[i].clone())
}

fn poly(coef: &[f64], z: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * z + c)
}

fn dpoly(coef: &[f64], z: f64) -> f64 {
    coef.iter().enumerate().skip(1).rev().fold(0.0, |acc, (k, c)| acc * z + k as f64 * c)
}

/// Points on `[0, 1]` jittered so no two coincide.
fn design(n: usize, jitter: &[f64]) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5 + 0.4 * jitter[i % jitter.len()]) / n as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernels_are_symmetric(k in kernel(), u in -6.0..6.0f64) {
        prop_assert_eq!(k.eval(u), k.eval(-u));
    }

    #[test]
    fn localized_kernel_integrates_to_one(k in kernel(), z0 in -3.0..3.0f64, hi in 0usize..3) {
        let h = [0.1, 0.5, 2.0][hi];
        let r = k.radius() * h;
        let total = adaptive_simpson(|z| k.eval_localized(z, z0, h).unwrap(), z0 - r, z0 + r, 1e-10);
        prop_assert!((total - 1.0).abs() < 1e-6, "{} integrates to {total}", k.name());
    }

    #[test]
    fn localized_derivative_is_a_finite_difference(ki in 1usize..4, z in -2.0..2.0f64, h in 0.1..2.0f64) {
        let k = &kernels()[ki];
        let e = 1e-6 * h;
        let fd = (k.eval_localized(z + e, 0.0, h).unwrap() - k.eval_localized(z - e, 0.0, h).unwrap()) / (2.0 * e);
        let d = k.eval_localized_derivative(z, 0.0, h).unwrap();
        prop_assert!((d - fd).abs() <= 1e-4 * d.abs().max(1e-3), "{d} vs {fd}");
    }

    #[test]
    fn local_polynomial_reproduces_polynomials(
        p in 1usize..4,
        coef in proptest::collection::vec(-3.0..3.0f64, 4),
        jitter in proptest::collection::vec(-1.0..1.0f64, 7),
        z0 in prop_oneof![Just(0.0), Just(1.0), 0.0..1.0f64],
        h in 0.2..0.6f64,
        ki in 0usize..2,
    ) {
        let k = &kernels()[ki];
        let coef = &coef[..=p];
        let z = design(200, &jitter);
        let y: Vec<f64> = z.iter().map(|&v| poly(coef, v)).collect();
        let f = localpoly::fit(&z, &y, z0, h, p, k).unwrap();
        prop_assert!((f.value() - poly(coef, z0)).abs() < 1e-8);
        prop_assert!((f.derivative() - dpoly(coef, z0)).abs() < 1e-8);
    }

    #[test]
    fn local_polynomial_is_linear_and_matches_normal_equations(
        y1 in proptest::collection::vec(-5.0..5.0f64, 80),
        y2 in proptest::collection::vec(-5.0..5.0f64, 80),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
        z0 in 0.1..0.9f64,
        p in 1usize..4,
    ) {
        let z = design(80, &[0.3, -0.7, 0.1]);
        let (h, k) = (0.35, Kernel::epanechnikov());
        let f1 = localpoly::fit(&z, &y1, z0, h, p, &k).unwrap();
        let f2 = localpoly::fit(&z, &y2, z0, h, p, &k).unwrap();
        let mix: Vec<f64> = y1.iter().zip(&y2).map(|(u, v)| a * u + b * v).collect();
        let fm = localpoly::fit(&z, &mix, z0, h, p, &k).unwrap();
        for j in 0..=p {
            prop_assert!((fm.beta[j] - (a * f1.beta[j] + b * f2.beta[j])).abs() < 1e-10 * (1.0 + fm.beta[j].abs()));
        }
        // brute-force weighted normal equations on the rescaled basis
        let mut xtwx = DMatrix::<f64>::zeros(p + 1, p + 1);
        let mut xtwy = DVector::<f64>::zeros(p + 1);
        for (&zi, &yi) in z.iter().zip(&y1) {
            let u = (zi - z0) / h;
            let w = k.eval(u);
            let g: Vec<f64> = (0..=p).map(|j| u.powi(j as i32)).collect();
            for r in 0..=p {
                xtwy[r] += w * g[r] * yi;
                for c in 0..=p {
                    xtwx[(r, c)] += w * g[r] * g[c];
                }
            }
        }
        let beta = xtwx.lu().solve(&xtwy).unwrap();
        for j in 0..=p {
            prop_assert!((beta[j] - f1.beta[j]).abs() < 1e-9 * (1.0 + beta[j].abs()));
        }
    }

    #[test]
    fn derivative_tracks_finite_differences_of_the_value(shift in -1.0..1.0f64, freq in 0.5..2.0f64) {
        let z = linspace(0.0, 1.0, 400);
        let y: Vec<f64> = z.iter().map(|&v| (freq * v + shift).sin()).collect();
        let (h, k) = (0.15, Kernel::epanechnikov());
        let grid = linspace(0.2, 0.8, 13);
        let fits: Vec<_> = localpoly::fit_grid(&z, &y, &grid, h, 2, &k).into_iter().map(Result::unwrap).collect();
        for i in 1..grid.len() - 1 {
            let fd = (fits[i + 1].value() - fits[i - 1].value()) / (grid[i + 1] - grid[i - 1]);
            let d = fits[i].derivative();
            prop_assert!((d - fd).abs() <= 5e-2 * fd.abs().max(0.05), "{d} vs {fd}");
        }
    }

    #[test]
    fn propensity_stays_inside_clip_bounds(scale in 1e-6..1e6f64, z in -5.0..5.0f64) {
        let fit = NuisanceFit::new(
            Arc::new(move |_: &[f64], z: f64| scale * (-z * z).exp()),
            Arc::new(|_: &[f64], _: f64| 0.0),
            Arc::new(|_: &[f64], _: f64| 0.0),
            FoldId::external(),
            ClipBounds::default(),
        );
        let v = fit.pi(&[], z);
        prop_assert!((0.01..=100.0).contains(&v));
    }

    #[test]
    fn synthetic_nuisance_collapses_to_truth(seed in any::<u64>(), z in -1.0..5.0f64, x in proptest::collection::vec(-2.0..2.0f64, 4)) {
        let g = GaussianIv::liv_main();
        let s = synthetic_nuisance(&g, 10.0, 20000, seed).unwrap();
        prop_assert!((s.mu(&x, z) - g.mu(&x, z)).abs() < 1e-12 * (1.0 + g.mu(&x, z).abs()) + 1e-30);
        prop_assert!((s.lambda(&x, z) - g.lambda(&x, z)).abs() < 1e-12);
        prop_assert!((s.pi_raw(&x, z) - g.pi(&x, z)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn risk_is_symmetric_in_the_folds(seed in 0u64..1000) {
        let g = GaussianIv::deriv_only();
        let data = g.generate(800, seed);
        let halves = data.split(2, seed);
        let provider = FixedNuisance(g.true_nuisance());
        let cfg = SelectConfig::new(Method::LocalPoly, Target::Outcome);
        let cands = [0.8, 1.2];
        let grid = bandwidth::risk_grid(&data, 0.8);
        let a = bandwidth::select_on_halves(&halves[0], &halves[1], &grid, &cands, &provider, &cfg).unwrap();
        let b = bandwidth::select_on_halves(&halves[1], &halves[0], &grid, &cands, &provider, &cfg).unwrap();
        prop_assert_eq!(&a.risk_hat, &b.risk_hat);
        prop_assert_eq!(&a.risk_1, &b.risk_2);
        prop_assert_eq!(a.chosen, b.chosen);
    }

    #[test]
    fn duplicate_candidate_never_changes_the_choice(seed in 0u64..1000, dup in 0usize..3) {
        let g = GaussianIv::deriv_only();
        let data = g.generate(800, seed);
        let provider = FixedNuisance(g.true_nuisance());
        let cfg = SelectConfig::new(Method::LocalPoly, Target::Outcome);
        let cands = vec![0.7, 1.0, 1.4];
        let base = bandwidth::select(&data, &cands, &provider, &cfg).unwrap();
        let mut more = cands.clone();
        more.push(cands[dup]);
        let with_dup = bandwidth::select(&data, &more, &provider, &cfg).unwrap();
        prop_assert_eq!(base.chosen_h(), with_dup.chosen_h());
    }

    #[test]
    fn liv_scales_with_the_outcome(seed in 0u64..1000, c in prop_oneof![-5.0..-0.1f64, 0.1..5.0f64]) {
        let data = GaussianIv::liv_main().generate(1500, seed);
        let provider = LearnedNuisance {
            outcome: Learner::from_name("linear-cubic").unwrap(),
            treatment: Learner::from_name("linear").unwrap(),
            clip: ClipBounds::default(),
        };
        let grid = [1.0, 2.0, 3.0];
        let mut cfg = LivConfig::new(Method::LocalPoly, 0.9);
        cfg.relevance_floor = 0.0;
        let base = liv_curve(&data, &provider, &grid, &cfg).unwrap();
        let scaled = liv_curve(&data.scale_outcome(c), &provider, &grid, &cfg).unwrap();
        for (p, q) in base.points.iter().zip(&scaled.points) {
            prop_assert!((q.theta_y - c * p.theta_y).abs() <= 1e-8 * (c * p.theta_y).abs().max(1e-8));
            prop_assert!((q.gamma - c * p.gamma).abs() <= 1e-8 * (c * p.gamma).abs().max(1e-8));
            prop_assert_eq!(q.theta_a, p.theta_a);
            prop_assert!((p.gamma - p.theta_y / p.theta_a).abs() <= 1e-12 * p.gamma.abs().max(1.0));
        }
    }

    #[test]
    fn crossfit_curve_is_seed_deterministic(seed in any::<u64>()) {
        let g = GaussianIv::liv_main();
        let data = g.generate(600, 3);
        let provider = FixedNuisance(g.true_nuisance());
        let mut cfg = CurveConfig::new(2, 1.0);
        cfg.seed = seed;
        let a = crossfit_curve(&data, Target::Outcome, &provider, &[1.5, 2.5], &cfg).unwrap();
        let b = crossfit_curve(&data, Target::Outcome, &provider, &[1.5, 2.5], &cfg).unwrap();
        prop_assert_eq!(a.to_csv_string(contiv::Quantity::Value), b.to_csv_string(contiv::Quantity::Value));
    }

    #[test]
    fn sim_rmse_matches_the_dumped_replications(seed in 0u64..1000) {
        let mut cfg = SimConfig::new(contiv::dgp::DgpName::DerivOnly);
        cfg.estimand = Estimand::Derivative(Target::Outcome);
        cfg.estimators = vec![Estimator::LocalPoly, Estimator::PlugIn];
        cfg.ns = vec![400];
        cfg.reps = 3;
        cfg.seed = seed;
        cfg.grid_points = 7;
        cfg.lp_bandwidth = sim::BandwidthRule::Fixed { h: 1.5 };
        let a = sim::run_grid(&cfg).unwrap();
        let b = sim::run_grid(&cfg).unwrap();
        prop_assert_eq!(sim::results_csv_string(&a), sim::results_csv_string(&b));
        let mut dump = Vec::new();
        sim::write_replications_csv(&a, &mut dump).unwrap();
        let dump = String::from_utf8(dump).unwrap();
        for r in &a {
            // recompute from the CSV dump alone
            let rows: Vec<Vec<f64>> = dump
                .lines()
                .skip(1)
                .filter(|l| l.split(',').nth(1) == Some(r.estimator.name()))
                .map(|l| l.split(',').skip(4).map(|v| v.parse().unwrap_or(f64::NAN)).collect())
                .collect();
            let m = cfg.grid_points;
            let mut total = 0.0;
            for k in 0..m {
                let pts: Vec<&Vec<f64>> = rows.iter().filter(|row| row[1] == rows[k][1]).collect();
                let mse = pts.iter().map(|row| (row[2] - row[4]).powi(2)).sum::<f64>() / pts.len() as f64;
                total += rows[k][5] * mse.sqrt();
            }
            prop_assert_eq!(total, r.rmse);
            prop_assert_eq!(r.recompute_rmse(), r.rmse);
        }
    }
}

#[test]
fn zero_curve_has_zero_risk() {
    let g = GaussianIv::deriv_only();
    let data = g.generate(300, 1);
    let grid = bandwidth::risk_grid(&data, 0.5);
    let w = bandwidth::weight_on_grid(&bandwidth::WeightSpec::MarginalDensity, &grid, &data);
    let integrand = bandwidth::RiskIntegrand::new(grid.clone(), vec![0.0; grid.len()], w, 0.5).unwrap();
    assert_eq!(bandwidth::mean_risk(&data, &integrand, &g.true_nuisance(), Target::Outcome), 0.0);
}

#[test]
fn error_codes_are_distinct() {
    use contiv::Error;
    let all = [
        Error::InvalidBandwidth(0.0),
        Error::InvalidKernelOrder(3),
        Error::UnknownKernel(String::new()),
        Error::KernelMomentCheck(String::new()),
        Error::NotEnoughLocalData { z0: 0.0, found: 0, needed: 1 },
        Error::SingularDesign { z0: 0.0, cond: 0.0 },
        Error::InvalidDensity(0.0),
        Error::EmptyFold,
        Error::RankDeficientDesign,
        Error::FoldTooSmall { found: 0, needed: 1 },
        Error::InvalidRate(-1.0),
        Error::FoldOverlap,
        Error::NonFiniteResult(0),
        Error::QuadratureUnderResolved { z0: 0.0, change: 0.0 },
        Error::ZeroDenominator,
        Error::MisalignedFolds(0, 1),
        Error::WeakInstrument(0.0),
        Error::WeakInstrumentRegion { z0: 0.0, theta_a: 0.0 },
        Error::GridTooCoarse { step: 1.0, limit: 0.1 },
        Error::AllCandidatesFailed,
        Error::MissingColumn(String::new()),
        Error::NonBinaryTreatment { row: 1, value: 2.0 },
        Error::NonNumericCell { row: 1, column: String::new(), value: String::new() },
        Error::EmptyFile,
        Error::InvalidInput(String::new()),
        Error::Io(String::new()),
    ];
    let mut codes: Vec<&str> = all.iter().map(|e| e.code()).collect();
    assert!(codes.iter().all(|c| c.split_once('.').is_some_and(|(m, rest)| !m.is_empty() && !rest.is_empty())));
    codes.sort_unstable();
    let n = codes.len();
    codes.dedup();
    assert_eq!(codes.len(), n);
}

#[test]
fn rate_must_be_non_negative() {
    assert_eq!(synthetic_nuisance(&GaussianIv::liv_main(), -0.1, 100, 0).unwrap_err().code(), "nuisance.invalid_rate");
}

#[test]
fn dataset_rejects_ragged_rows() {
    assert!(Dataset::from_rows(&[vec![1.0], vec![1.0, 2.0]], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]).is_err());
}

#[test]
fn true_marginal_density_is_normalized() {
    let g = GaussianIv::liv_main();
    let total = adaptive_simpson(|z| g.marginal_density(z), -6.0, 10.0, 1e-10);
    assert!((total - 1.0).abs() < 1e-6);
}
