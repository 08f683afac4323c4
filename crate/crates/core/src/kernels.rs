//! Kernel functions, their derivatives and localized forms, plus
//! Gaussian-polynomial high-order kernels with quadrature-verified moments.
//!
//! Conventions: `K_h(z) = K(z/h)/h`, `μ_j = ∫ u^j K(u) du`,
//! `ν_j = ∫ u^j K(u)^2 du`. A kernel of order `ℓ` integrates to one and has
//! vanishing moments `μ_j` for `1 <= j <= ℓ-1`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::adaptive_simpson;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Tails of every Gaussian-based kernel are below 1e-20 beyond this radius.
const GAUSSIAN_RADIUS: f64 = 10.0;

/// Moment tables are filled up to this power at construction.
const TABLE_MAX_J: usize = 12;

const MOMENT_QUAD_TOL: f64 = 1e-12;
const MOMENT_CHECK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    Epanechnikov,
    Gaussian,
    /// Standard normal density times an even polynomial.
    GaussianHighOrder { order: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Support {
    /// Supported on `[-1, 1]`.
    Compact,
    Unbounded,
}

/// An immutable kernel specification with its moment table.
#[derive(Debug, Clone)]
pub struct Kernel {
    family: KernelFamily,
    order: usize,
    /// Coefficients `c_k` of `Σ c_k u^{2k}` multiplying `φ(u)` (Gaussian families).
    poly: Arc<[f64]>,
    /// `(μ_j, ν_j)` for `j = 0..=TABLE_MAX_J`.
    table: Arc<[(f64, f64)]>,
}

impl PartialEq for Kernel {
    fn eq(&self, other: &Self) -> bool {
        self.family == other.family
    }
}

impl Kernel {
    pub fn epanechnikov() -> Self {
        Self::build(KernelFamily::Epanechnikov, 2, vec![])
    }

    pub fn gaussian() -> Self {
        Self::build(KernelFamily::Gaussian, 2, vec![1.0])
    }

    /// Gaussian-polynomial kernel whose moments vanish up to `order - 1`.
    ///
    /// The polynomial `Σ_{k<order/2} c_k u^{2k}` solves the linear system
    /// `Σ_k c_k E[U^{2(j+k)}] = 1{j = 0}` for `j < order/2`, `U ~ N(0,1)`;
    /// odd moments vanish by symmetry. The result is checked by quadrature.
    pub fn make_high_order(order: usize) -> Result<Self> {
        if order < 4 || order % 2 != 0 {
            return Err(Error::InvalidKernelOrder(order));
        }
        let m = order / 2;
        let gauss_moment = |k: usize| -> f64 { (1..=k).map(|i| (2 * i - 1) as f64).product() };
        let a = DMatrix::from_fn(m, m, |j, k| gauss_moment(j + k));
        let mut rhs = DVector::zeros(m);
        rhs[0] = 1.0;
        let coef = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::KernelMomentCheck(format!("order {order} system is singular")))?;
        let kernel = Self::build(
            KernelFamily::GaussianHighOrder { order },
            order,
            coef.iter().copied().collect(),
        );
        kernel.verify()?;
        Ok(kernel)
    }

    /// Kernel by configuration name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "epanechnikov" | "epa" => Ok(Self::epanechnikov()),
            "gaussian" | "gaussian2" | "normal" => Ok(Self::gaussian()),
            "gaussian4" => Self::make_high_order(4),
            "gaussian6" => Self::make_high_order(6),
            other => Err(Error::UnknownKernel(other.to_string())),
        }
    }

    pub fn name(&self) -> String {
        match self.family {
            KernelFamily::Epanechnikov => "epanechnikov".into(),
            KernelFamily::Gaussian => "gaussian".into(),
            KernelFamily::GaussianHighOrder { order } => format!("gaussian{order}"),
        }
    }

    fn build(family: KernelFamily, order: usize, poly: Vec<f64>) -> Self {
        let mut kernel = Self {
            family,
            order,
            poly: poly.into(),
            table: Arc::from(Vec::new()),
        };
        let table: Vec<(f64, f64)> = (0..=TABLE_MAX_J)
            .map(|j| {
                if j % 2 == 1 {
                    // Symmetric kernels have vanishing odd moments.
                    (0.0, 0.0)
                } else {
                    (kernel.integrate_moment(j, false), kernel.integrate_moment(j, true))
                }
            })
            .collect();
        kernel.table = table.into();
        kernel
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn support(&self) -> Support {
        match self.family {
            KernelFamily::Epanechnikov => Support::Compact,
            _ => Support::Unbounded,
        }
    }

    /// Radius beyond which the kernel is zero (compact) or numerically negligible.
    pub fn radius(&self) -> f64 {
        match self.support() {
            Support::Compact => 1.0,
            Support::Unbounded => GAUSSIAN_RADIUS,
        }
    }

    /// Whether `K'` exists everywhere.
    pub fn is_smooth(&self) -> bool {
        self.support() == Support::Unbounded
    }

    #[inline]
    fn poly_parts(&self, u: f64) -> (f64, f64) {
        let u2 = u * u;
        let mut p = 0.0;
        let mut dp = 0.0;
        let mut pow = 1.0;
        for (k, c) in self.poly.iter().enumerate() {
            p += c * pow;
            if k > 0 {
                // d/du u^{2k} = 2k u^{2k-1}
                dp += c * 2.0 * k as f64 * pow / u2 * u;
            }
            pow *= u2;
        }
        (p, dp)
    }

    /// `K(u)`; zero outside `[-1, 1]` for compact kernels.
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match self.family {
            KernelFamily::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            KernelFamily::Gaussian => INV_SQRT_2PI * (-0.5 * u * u).exp(),
            KernelFamily::GaussianHighOrder { .. } => {
                let (p, _) = self.poly_parts(u);
                INV_SQRT_2PI * (-0.5 * u * u).exp() * p
            }
        }
    }

    /// `K'(u)`.
    ///
    /// The Epanechnikov derivative jumps at `|u| = 1`; there the midpoint of
    /// the one-sided limits (`-0.75 u`) is returned.
    #[inline]
    pub fn derivative(&self, u: f64) -> f64 {
        match self.family {
            KernelFamily::Epanechnikov => {
                let a = u.abs();
                if a < 1.0 {
                    -1.5 * u
                } else if a == 1.0 {
                    -0.75 * u
                } else {
                    0.0
                }
            }
            KernelFamily::Gaussian => -u * INV_SQRT_2PI * (-0.5 * u * u).exp(),
            KernelFamily::GaussianHighOrder { .. } => {
                if u == 0.0 {
                    return 0.0;
                }
                let (p, dp) = self.poly_parts(u);
                INV_SQRT_2PI * (-0.5 * u * u).exp() * (dp - u * p)
            }
        }
    }

    /// `K((z - z0)/h)/h`.
    pub fn eval_localized(&self, z: f64, z0: f64, h: f64) -> Result<f64> {
        check_bandwidth(h)?;
        Ok(self.eval((z - z0) / h) / h)
    }

    /// `d/dz K_h(z - z0) = K'((z - z0)/h)/h²`.
    pub fn eval_localized_derivative(&self, z: f64, z0: f64, h: f64) -> Result<f64> {
        check_bandwidth(h)?;
        Ok(self.derivative((z - z0) / h) / (h * h))
    }

    /// `(μ_j, ν_j)` for `j = 0..=max_j`, from the construction-time table
    /// when available and by fresh quadrature otherwise.
    pub fn moments(&self, max_j: usize) -> Vec<(f64, f64)> {
        (0..=max_j)
            .map(|j| match self.table.get(j) {
                Some(&m) => m,
                None => (self.integrate_moment(j, false), self.integrate_moment(j, true)),
            })
            .collect()
    }

    pub fn mu(&self, j: usize) -> f64 {
        self.moments(j)[j].0
    }

    pub fn nu(&self, j: usize) -> f64 {
        self.moments(j)[j].1
    }

    fn integrate_moment(&self, j: usize, squared: bool) -> f64 {
        let r = self.radius();
        self.truncated_moment(j, -r, r, squared)
    }

    /// `∫_lo^hi u^j K(u) du` (or with `K²` when `squared`), with the interval
    /// intersected with the kernel's effective support.
    pub fn truncated_moment(&self, j: usize, lo: f64, hi: f64, squared: bool) -> f64 {
        let r = self.radius();
        let (a, b) = (lo.max(-r), hi.min(r));
        if a >= b {
            return 0.0;
        }
        let f = |u: f64| {
            let k = self.eval(u);
            u.powi(j as i32) * if squared { k * k } else { k }
        };
        // Split at zero so both halves are smooth for the Simpson recursion.
        if a < 0.0 && b > 0.0 {
            adaptive_simpson(f, a, 0.0, MOMENT_QUAD_TOL) + adaptive_simpson(f, 0.0, b, MOMENT_QUAD_TOL)
        } else {
            adaptive_simpson(f, a, b, MOMENT_QUAD_TOL)
        }
    }

    /// Checks normalization and the vanishing-moment property by quadrature.
    pub fn verify(&self) -> Result<()> {
        let r = self.radius();
        let total = self.truncated_moment(0, -r, r, false);
        if (total - 1.0).abs() > MOMENT_CHECK_TOL {
            return Err(Error::KernelMomentCheck(format!(
                "{}: integral is {total}",
                self.name()
            )));
        }
        for j in 1..self.order {
            let m = self.truncated_moment(j, -r, r, false);
            if m.abs() > MOMENT_CHECK_TOL {
                return Err(Error::KernelMomentCheck(format!(
                    "{}: moment {j} is {m}",
                    self.name()
                )));
            }
        }
        let lead = self.truncated_moment(self.order, -r, r, false);
        if !lead.is_finite() || lead == 0.0 {
            return Err(Error::KernelMomentCheck(format!(
                "{}: leading moment {lead} should be finite and nonzero",
                self.name()
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_bandwidth(h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidBandwidth(h))
    }
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all() -> Vec<Kernel> {
        vec![
            Kernel::epanechnikov(),
            Kernel::gaussian(),
            Kernel::make_high_order(4).unwrap(),
            Kernel::make_high_order(6).unwrap(),
        ]
    }

    #[test]
    fn point_values() {
        let e = Kernel::epanechnikov();
        assert_eq!(e.eval(0.0), 0.75);
        assert_eq!(e.eval(1.5), 0.0);
        let g = Kernel::gaussian();
        assert!((g.eval(0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn localized_values() {
        let e = Kernel::epanechnikov();
        assert!((e.eval_localized(0.3, 0.3, 0.5).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(e.eval_localized(1.0, 0.3, 0.5).unwrap(), 0.0);
        let g = Kernel::gaussian();
        assert!((g.eval_localized(1.0, 0.0, 1.0).unwrap() - 0.241_970_724_519_143_37).abs() < 1e-12);
        assert!(matches!(e.eval_localized(0.0, 0.0, 0.0), Err(Error::InvalidBandwidth(_))));
        assert!(matches!(g.eval_localized(0.0, 0.0, -1.0), Err(Error::InvalidBandwidth(_))));
    }

    #[test]
    fn localized_derivative_values() {
        let g = Kernel::gaussian();
        assert_eq!(g.eval_localized_derivative(2.0, 2.0, 0.7).unwrap(), 0.0);
        let v = g.eval_localized_derivative(1.0, 0.0, 1.0).unwrap();
        assert!((v + 0.241_970_724_519_143_37).abs() < 1e-12);
        let e = Kernel::epanechnikov();
        let h = 0.4;
        let v = e.eval_localized_derivative(0.5 * h, 0.0, h).unwrap();
        assert!((v + 0.75 / (h * h)).abs() < 1e-12);
        assert!(e.eval_localized_derivative(0.0, 0.0, f64::NAN).is_err());
    }

    #[test]
    fn high_order_rejects_bad_orders() {
        assert_eq!(Kernel::make_high_order(2).unwrap_err(), Error::InvalidKernelOrder(2));
        assert_eq!(Kernel::make_high_order(5).unwrap_err(), Error::InvalidKernelOrder(5));
    }

    #[test]
    fn fourth_order_kernel_is_the_textbook_one() {
        let k = Kernel::make_high_order(4).unwrap();
        for &u in &[0.0, 0.3, 1.0, 2.2] {
            let expect = 0.5 * (3.0 - u * u) * normal_pdf(u);
            assert!((k.eval(u) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn epanechnikov_moments() {
        let m = Kernel::epanechnikov().moments(2);
        assert!((m[0].0 - 1.0).abs() < 1e-12);
        assert!((m[2].0 - 0.2).abs() < 1e-12);
        assert!((m[0].1 - 0.6).abs() < 1e-12);
    }

    #[test]
    fn every_kernel_verifies() {
        for k in all() {
            k.verify().unwrap();
        }
    }

    #[test]
    fn names_round_trip() {
        for k in all() {
            assert_eq!(Kernel::from_name(&k.name()).unwrap(), k);
        }
        assert!(matches!(Kernel::from_name("box"), Err(Error::UnknownKernel(_))));
    }

    #[test]
    fn symmetric() {
        for k in all() {
            for i in 0..200 {
                let u = -4.0 + 0.041 * i as f64;
                assert!((k.eval(u) - k.eval(-u)).abs() < 1e-15);
                assert!((k.derivative(u) + k.derivative(-u)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn localized_kernel_integrates_to_one() {
        for k in all() {
            for &h in &[0.1, 0.5, 2.0] {
                let r = k.radius() * h;
                let total = adaptive_simpson(|z| k.eval_localized(z, 0.7, h).unwrap(), 0.7 - r, 0.7 + r, 1e-10);
                assert!((total - 1.0).abs() < 1e-6, "{} h={h}: {total}", k.name());
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences_on_smooth_families() {
        for k in all().into_iter().filter(Kernel::is_smooth) {
            for &h in &[0.3, 1.0, 2.5] {
                let step = 1e-6 * h;
                for i in 0..40 {
                    let z = -3.0 * h + 0.15 * h * i as f64 + 0.01;
                    let fd = (k.eval_localized(z + step, 0.0, h).unwrap()
                        - k.eval_localized(z - step, 0.0, h).unwrap())
                        / (2.0 * step);
                    let an = k.eval_localized_derivative(z, 0.0, h).unwrap();
                    let scale = an.abs().max(1e-3 / (h * h));
                    assert!((fd - an).abs() / scale < 1e-4, "{} z={z} fd={fd} an={an}", k.name());
                }
            }
        }
    }
}
