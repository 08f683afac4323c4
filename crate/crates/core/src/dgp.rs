//! Data-generating processes with analytic nuisance surfaces and truths.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, FoldId, Target};
use crate::error::{Error, Result};
use crate::kernels::normal_pdf;
use crate::nuisance::{ClipBounds, NuisanceFit};

/// A data-generating process with known nuisances and estimands.
pub trait Dgp: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn d(&self) -> usize;
    fn generate(&self, n: usize, seed: u64) -> Dataset;
    /// Conditional density of `Z` given `X`.
    fn pi(&self, x: &[f64], z: f64) -> f64;
    /// `E[Y | X, Z]`.
    fn mu(&self, x: &[f64], z: f64) -> f64;
    /// `E[A | X, Z]`.
    fn lambda(&self, x: &[f64], z: f64) -> f64;
    /// `E[μ(X, z)]`.
    fn tau(&self, z: f64) -> f64;
    /// `E[λ(X, z)]`.
    fn lambda_bar(&self, z: f64) -> f64;
    fn theta_y(&self, z: f64) -> f64;
    fn theta_a(&self, z: f64) -> f64;
    fn marginal_density(&self, z: f64) -> f64;
    fn z_quantile(&self, q: f64) -> f64;

    fn gamma(&self, z: f64) -> f64 {
        self.theta_y(z) / self.theta_a(z)
    }

    fn curve(&self, target: Target, z: f64) -> f64 {
        match target {
            Target::Outcome => self.tau(z),
            Target::Treatment => self.lambda_bar(z),
        }
    }

    fn derivative(&self, target: Target, z: f64) -> f64 {
        match target {
            Target::Outcome => self.theta_y(z),
            Target::Treatment => self.theta_a(z),
        }
    }
}

/// Selector for the shipped processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpName {
    /// Gaussian instrument, continuous treatment, cubic outcome.
    LivMain,
    /// Shifted instrument with an extra linear outcome term and noisier outcome.
    DerivOnly,
    /// Outcome does not depend on the instrument.
    ZeroOutcome,
    /// Treatment does not depend on the instrument.
    FlatTreatment,
    /// Treatment decreasing in the instrument.
    DecreasingTreatment,
    /// Dose-response curves are constant.
    ConstantTruth,
    /// `Y = 2 + 3Z` without noise.
    NoiselessLinear,
    /// Instrument on `[0, 1]`, binary treatment, linear dose-response.
    BoundedComplier,
}

impl DgpName {
    pub const ALL: [DgpName; 8] = [
        DgpName::LivMain,
        DgpName::DerivOnly,
        DgpName::ZeroOutcome,
        DgpName::FlatTreatment,
        DgpName::DecreasingTreatment,
        DgpName::ConstantTruth,
        DgpName::NoiselessLinear,
        DgpName::BoundedComplier,
    ];

    pub fn build(self) -> Arc<dyn Dgp> {
        match self {
            DgpName::BoundedComplier => Arc::new(BoundedComplier::default()),
            other => Arc::new(other.gaussian().expect("gaussian family")),
        }
    }

    pub fn gaussian(self) -> Option<GaussianIv> {
        Some(match self {
            DgpName::LivMain => GaussianIv::liv_main(),
            DgpName::DerivOnly => GaussianIv::deriv_only(),
            DgpName::ZeroOutcome => GaussianIv::zero_outcome(),
            DgpName::FlatTreatment => GaussianIv::flat_treatment(),
            DgpName::DecreasingTreatment => GaussianIv::decreasing_treatment(),
            DgpName::ConstantTruth => GaussianIv::constant_truth(),
            DgpName::NoiselessLinear => GaussianIv::noiseless_linear(),
            DgpName::BoundedComplier => return None,
        })
    }

    /// Exact nuisances of the process.
    pub fn true_nuisance(self) -> NuisanceFit {
        match self.gaussian() {
            Some(g) => g.true_nuisance(),
            None => BoundedComplier::default().true_nuisance(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DgpName::LivMain => "liv-main",
            DgpName::DerivOnly => "deriv-only",
            DgpName::ZeroOutcome => "zero-outcome",
            DgpName::FlatTreatment => "flat-treatment",
            DgpName::DecreasingTreatment => "decreasing-treatment",
            DgpName::ConstantTruth => "constant-truth",
            DgpName::NoiselessLinear => "noiseless-linear",
            DgpName::BoundedComplier => "bounded-complier",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidInput(format!("unknown data-generating process `{s}`")))
    }
}

/// Four standard-normal covariates, `Z | X ~ N(η(X), 1)`, linear treatment
/// regression and an outcome regression cubic in `Z`:
///
/// `η = η0 + ηᵀX`, `λ = a0 + aᵀX + a_z Z`,
/// `μ = y0 + yᵀX + Z·(y_xzᵀX) + y_z Z + y_z3 Z³`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianIv {
    pub name: &'static str,
    pub eta0: f64,
    pub eta: [f64; 4],
    pub a0: f64,
    pub a: [f64; 4],
    pub a_z: f64,
    pub a_sd: f64,
    pub y0: f64,
    pub y: [f64; 4],
    pub y_xz: [f64; 4],
    pub y_z: f64,
    pub y_z3: f64,
    pub y_sd: f64,
}

#[inline]
fn dot4(c: &[f64; 4], x: &[f64]) -> f64 {
    c[0] * x[0] + c[1] * x[1] + c[2] * x[2] + c[3] * x[3]
}

impl GaussianIv {
    pub fn liv_main() -> Self {
        Self {
            name: "liv-main",
            eta0: 2.0,
            eta: [0.1, 0.1, -0.1, 0.2],
            a0: 1.0,
            a: [0.1, -0.2, 0.3, 0.1],
            a_z: 0.1,
            a_sd: 1.0,
            y0: 1.0,
            y: [0.2, 0.2, 0.3, -0.1],
            y_xz: [-0.1, 0.0, 0.1, 0.0],
            y_z: 0.0,
            y_z3: -0.13 * 0.13,
            y_sd: 1.0,
        }
    }

    pub fn deriv_only() -> Self {
        Self { name: "deriv-only", eta0: -0.8, y_z: 0.1, y_sd: 2.0, ..Self::liv_main() }
    }

    pub fn zero_outcome() -> Self {
        Self { name: "zero-outcome", y_xz: [0.0; 4], y_z3: 0.0, ..Self::liv_main() }
    }

    pub fn flat_treatment() -> Self {
        Self { name: "flat-treatment", a_z: 0.0, ..Self::liv_main() }
    }

    pub fn decreasing_treatment() -> Self {
        Self { name: "decreasing-treatment", a_z: -0.1, ..Self::liv_main() }
    }

    pub fn constant_truth() -> Self {
        Self { name: "constant-truth", y_xz: [0.0; 4], y_z3: 0.0, a_z: 0.0, ..Self::liv_main() }
    }

    pub fn noiseless_linear() -> Self {
        Self {
            name: "noiseless-linear",
            y0: 2.0,
            y: [0.0; 4],
            y_xz: [0.0; 4],
            y_z: 3.0,
            y_z3: 0.0,
            y_sd: 0.0,
            ..Self::liv_main()
        }
    }

    /// Every coefficient, intercepts included, multiplied by two.
    pub fn doubled(&self) -> Self {
        let d = |v: [f64; 4]| v.map(|c| 2.0 * c);
        Self {
            eta0: 2.0 * self.eta0,
            eta: d(self.eta),
            a0: 2.0 * self.a0,
            a: d(self.a),
            a_z: 2.0 * self.a_z,
            y0: 2.0 * self.y0,
            y: d(self.y),
            y_xz: d(self.y_xz),
            y_z: 2.0 * self.y_z,
            y_z3: 2.0 * self.y_z3,
            ..*self
        }
    }

    #[inline]
    pub fn eta_of(&self, x: &[f64]) -> f64 {
        self.eta0 + dot4(&self.eta, x)
    }

    pub fn z_sd(&self) -> f64 {
        (1.0 + self.eta.iter().map(|c| c * c).sum::<f64>()).sqrt()
    }

    /// True nuisances, marked as trained on no sample.
    pub fn true_nuisance(&self) -> NuisanceFit {
        let (p, m, l) = (*self, *self, *self);
        NuisanceFit::new(
            Arc::new(move |x: &[f64], z: f64| p.pi(x, z)),
            Arc::new(move |x: &[f64], z: f64| m.mu(x, z)),
            Arc::new(move |x: &[f64], z: f64| l.lambda(x, z)),
            FoldId::external(),
            ClipBounds::default(),
        )
    }

    /// Correct regressions with the propensity taken from [`Self::doubled`].
    pub fn wrong_pi_nuisance(&self) -> NuisanceFit {
        let (w, m, l) = (self.doubled(), *self, *self);
        NuisanceFit::new(
            Arc::new(move |x: &[f64], z: f64| w.pi(x, z)),
            Arc::new(move |x: &[f64], z: f64| m.mu(x, z)),
            Arc::new(move |x: &[f64], z: f64| l.lambda(x, z)),
            FoldId::external(),
            ClipBounds::default(),
        )
    }

    /// Correct propensity with both regressions taken from [`Self::doubled`].
    pub fn wrong_mu_nuisance(&self) -> NuisanceFit {
        let (p, w) = (*self, self.doubled());
        NuisanceFit::new(
            Arc::new(move |x: &[f64], z: f64| p.pi(x, z)),
            Arc::new(move |x: &[f64], z: f64| w.mu(x, z)),
            Arc::new(move |x: &[f64], z: f64| w.lambda(x, z)),
            FoldId::external(),
            ClipBounds::default(),
        )
    }
}

impl Dgp for GaussianIv {
    fn name(&self) -> &'static str {
        self.name
    }

    fn d(&self) -> usize {
        4
    }

    fn generate(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(4 * n);
        let (mut z, mut a, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let xi: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let zi = self.eta_of(&xi) + rng.sample::<f64, _>(StandardNormal);
            let ai = self.lambda(&xi, zi) + self.a_sd * rng.sample::<f64, _>(StandardNormal);
            let yi = self.mu(&xi, zi) + self.y_sd * rng.sample::<f64, _>(StandardNormal);
            x.extend_from_slice(&xi);
            z.push(zi);
            a.push(ai);
            y.push(yi);
        }
        Dataset::new(x, 4, z, a, y).expect("consistent columns")
    }

    #[inline]
    fn pi(&self, x: &[f64], z: f64) -> f64 {
        normal_pdf(z - self.eta_of(x))
    }

    #[inline]
    fn mu(&self, x: &[f64], z: f64) -> f64 {
        self.y0 + dot4(&self.y, x) + z * dot4(&self.y_xz, x) + self.y_z * z + self.y_z3 * z * z * z
    }

    #[inline]
    fn lambda(&self, x: &[f64], z: f64) -> f64 {
        self.a0 + dot4(&self.a, x) + self.a_z * z
    }

    fn tau(&self, z: f64) -> f64 {
        self.y0 + self.y_z * z + self.y_z3 * z * z * z
    }

    fn lambda_bar(&self, z: f64) -> f64 {
        self.a0 + self.a_z * z
    }

    fn theta_y(&self, z: f64) -> f64 {
        self.y_z + 3.0 * self.y_z3 * z * z
    }

    fn theta_a(&self, _z: f64) -> f64 {
        self.a_z
    }

    fn marginal_density(&self, z: f64) -> f64 {
        let s = self.z_sd();
        normal_pdf((z - self.eta0) / s) / s
    }

    fn z_quantile(&self, q: f64) -> f64 {
        Normal::new(self.eta0, self.z_sd()).expect("valid normal").inverse_cdf(q)
    }
}

/// Instrument on `[0, 1]` with `π(z | x) = 1 + κ(x)(2z - 1)`,
/// `κ(x) = 0.5 tanh(x1 + 0.5 x2)`, binary treatment with
/// `P(A = 1 | X, Z) = 0.2 + 0.5 Z` and `Y = 0.6 + 2A + N(0, 1)`.
///
/// Then `μ = 1 + z`, `λ = 0.2 + 0.5 z`, the marginal of `Z` is uniform, the
/// complier proportion is `0.5` and the effect among compliers is `2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundedComplier {
    pub effect: f64,
    pub base: f64,
    pub slope: f64,
    pub y0: f64,
    pub y_sd: f64,
}

impl Default for BoundedComplier {
    fn default() -> Self {
        Self { effect: 2.0, base: 0.2, slope: 0.5, y0: 0.6, y_sd: 1.0 }
    }
}

impl BoundedComplier {
    fn kappa(x: &[f64]) -> f64 {
        0.5 * (x[0] + 0.5 * x[1]).tanh()
    }

    pub fn proportion(&self) -> f64 {
        self.slope
    }

    pub fn late(&self) -> f64 {
        self.effect
    }

    pub fn true_nuisance(&self) -> NuisanceFit {
        let (p, m, l) = (*self, *self, *self);
        NuisanceFit::new(
            Arc::new(move |x: &[f64], z: f64| p.pi(x, z)),
            Arc::new(move |x: &[f64], z: f64| m.mu(x, z)),
            Arc::new(move |x: &[f64], z: f64| l.lambda(x, z)),
            FoldId::external(),
            ClipBounds::default(),
        )
    }
}

impl Dgp for BoundedComplier {
    fn name(&self) -> &'static str {
        "bounded-complier"
    }

    fn d(&self) -> usize {
        2
    }

    fn generate(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(2 * n);
        let (mut z, mut a, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let xi: [f64; 2] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let k = Self::kappa(&xi);
            // Invert F(z) = z + κ(z² - z).
            let u: f64 = rng.gen();
            let zi = if k.abs() < 1e-12 {
                u
            } else {
                let b = 1.0 - k;
                (-b + (b * b + 4.0 * k * u).sqrt()) / (2.0 * k)
            };
            let ai = if rng.gen::<f64>() < self.lambda(&xi, zi) { 1.0 } else { 0.0 };
            let yi = self.y0 + self.effect * ai + self.y_sd * rng.sample::<f64, _>(StandardNormal);
            x.extend_from_slice(&xi);
            z.push(zi);
            a.push(ai);
            y.push(yi);
        }
        Dataset::new(x, 2, z, a, y).expect("consistent columns")
    }

    fn pi(&self, x: &[f64], z: f64) -> f64 {
        if (0.0..=1.0).contains(&z) {
            1.0 + Self::kappa(x) * (2.0 * z - 1.0)
        } else {
            0.0
        }
    }

    fn mu(&self, x: &[f64], z: f64) -> f64 {
        self.y0 + self.effect * self.lambda(x, z)
    }

    fn lambda(&self, _x: &[f64], z: f64) -> f64 {
        self.base + self.slope * z
    }

    fn tau(&self, z: f64) -> f64 {
        self.y0 + self.effect * self.lambda_bar(z)
    }

    fn lambda_bar(&self, z: f64) -> f64 {
        self.base + self.slope * z
    }

    fn theta_y(&self, _z: f64) -> f64 {
        self.effect * self.slope
    }

    fn theta_a(&self, _z: f64) -> f64 {
        self.slope
    }

    fn marginal_density(&self, z: f64) -> f64 {
        if (0.0..=1.0).contains(&z) {
            1.0
        } else {
            0.0
        }
    }

    fn z_quantile(&self, q: f64) -> f64 {
        q.clamp(0.0, 1.0)
    }
}

/// Linearly rescales `Z` onto `[0, 1]` using its observed range.
pub fn rescale_unit(data: &Dataset) -> Dataset {
    let (lo, hi) = data.z_range();
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut out = data.clone();
    out.z.iter_mut().for_each(|z| *z = (*z - lo) / span);
    out.fold = FoldId::fresh();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_reproducible() {
        let g = GaussianIv::liv_main();
        let (a, b) = (g.generate(50, 7), g.generate(50, 7));
        assert_eq!(a.z, b.z);
        assert_eq!(a.y, b.y);
        assert_eq!(a.x_flat(), b.x_flat());
        assert_ne!(g.generate(50, 8).z, a.z);
    }

    #[test]
    fn main_truths() {
        let g = GaussianIv::liv_main();
        assert!((g.theta_y(2.0) + 0.2028).abs() < 1e-12);
        assert!((g.gamma(2.0) + 2.028).abs() < 1e-12);
        assert_eq!(g.theta_a(0.3), 0.1);
        assert!((g.z_sd().powi(2) - 1.07).abs() < 1e-12);
        assert!((g.z_quantile(0.5) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn deriv_only_truth() {
        let g = GaussianIv::deriv_only();
        assert!((g.theta_y(1.0) - (0.1 - 0.0507)).abs() < 1e-12);
    }

    #[test]
    fn doubled_shifts_everything() {
        let g = GaussianIv::liv_main().doubled();
        assert_eq!(g.eta0, 4.0);
        assert!((g.y_z3 + 2.0 * 0.0169).abs() < 1e-15);
        assert_eq!(g.a_sd, 1.0);
    }

    #[test]
    fn bounded_sampler_stays_in_unit_interval_and_is_uniform() {
        let b = BoundedComplier::default();
        let d = b.generate(20000, 3);
        assert!(d.z.iter().all(|&z| (0.0..=1.0).contains(&z)));
        let mean = d.z.iter().sum::<f64>() / d.n() as f64;
        assert!((mean - 0.5).abs() < 0.01);
        assert!(d.a.iter().all(|&a| a == 0.0 || a == 1.0));
    }

    #[test]
    fn bounded_density_integrates_to_one() {
        let b = BoundedComplier::default();
        let x = [0.7, -1.2];
        let total = crate::quad::adaptive_simpson(|z| b.pi(&x, z), 0.0, 1.0, 1e-12);
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn names_parse() {
        for d in DgpName::ALL {
            assert_eq!(DgpName::parse(d.as_str()).unwrap(), d);
            assert_eq!(d.build().name(), d.as_str());
        }
        assert!(DgpName::parse("nope").is_err());
    }

    #[test]
    fn rescale_maps_range_to_unit() {
        let d = rescale_unit(&GaussianIv::liv_main().generate(100, 1));
        let (lo, hi) = d.z_range();
        assert_eq!(lo, 0.0);
        assert!((hi - 1.0).abs() < 1e-15);
    }
}
