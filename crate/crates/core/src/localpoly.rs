//! Kernel-weighted local polynomial regression on a scalar regressor.
//!
//! With `u = (z - z0)/h` and `g(u) = (1, u, ..., u^p)`, the fit solves
//! `D β = (1/n) Σ K_h(z_i - z0) g(u_i) y_i` where
//! `D = (1/n) Σ K_h(z_i - z0) g(u_i) g(u_i)^T`. The value estimate is `β_0`
//! and the derivative estimate is `β_1 / h`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{check_bandwidth, Kernel};

const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct LocalFit {
    pub z0: f64,
    pub h: f64,
    pub p: usize,
    /// Coefficients on the rescaled basis `g(u)`.
    pub beta: Vec<f64>,
    pub dhat: DMatrix<f64>,
    /// Observations with nonzero kernel weight.
    pub n_local: usize,
    /// Kernel-weighted mean squared residual.
    pub residual_variance: f64,
    /// Sample size the design matrix was averaged over.
    pub n: usize,
    /// Data support seen from `z0`, in bandwidth units.
    pub window: (f64, f64),
    kernel: Kernel,
    dinv: DMatrix<f64>,
}

#[inline]
pub(crate) fn powers(u: f64, p: usize, out: &mut [f64]) {
    let mut v = 1.0;
    for o in out.iter_mut().take(p + 1) {
        *o = v;
        v *= u;
    }
}

/// Local polynomial fit of `y` on `z` at `z0`.
pub fn fit(z: &[f64], y: &[f64], z0: f64, h: f64, p: usize, kernel: &Kernel) -> Result<LocalFit> {
    check_bandwidth(h)?;
    if z.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "regressor has {} values, response has {}",
            z.len(),
            y.len()
        )));
    }
    if p == 0 {
        return Err(Error::InvalidInput("polynomial degree must be at least 1".into()));
    }
    let n = z.len();
    let m = p + 1;
    let mut d = DMatrix::<f64>::zeros(m, m);
    let mut b = DVector::<f64>::zeros(m);
    let mut g = vec![0.0; m];
    let mut n_local = 0usize;
    let (mut zmin, mut zmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&zi, &yi) in z.iter().zip(y) {
        zmin = zmin.min(zi);
        zmax = zmax.max(zi);
        let u = (zi - z0) / h;
        let k = kernel.eval(u) / h;
        if k == 0.0 {
            continue;
        }
        n_local += 1;
        powers(u, p, &mut g);
        for r in 0..m {
            let gr = g[r] * k;
            b[r] += gr * yi;
            for c in r..m {
                d[(r, c)] += gr * g[c];
            }
        }
    }
    if n_local < p + 2 {
        return Err(Error::NotEnoughLocalData { z0, found: n_local, needed: p + 2 });
    }
    let nf = n as f64;
    for r in 0..m {
        b[r] /= nf;
        for c in r..m {
            d[(r, c)] /= nf;
            d[(c, r)] = d[(r, c)];
        }
    }
    let eig = d.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::SingularDesign { z0, cond });
    }
    let chol = d
        .clone()
        .cholesky()
        .ok_or(Error::SingularDesign { z0, cond })?;
    let beta = chol.solve(&b);
    let dinv = chol.inverse();

    let (mut wsum, mut rss) = (0.0, 0.0);
    for (&zi, &yi) in z.iter().zip(y) {
        let u = (zi - z0) / h;
        let k = kernel.eval(u);
        if k == 0.0 {
            continue;
        }
        powers(u, p, &mut g);
        let fitted: f64 = g.iter().zip(beta.iter()).map(|(a, c)| a * c).sum();
        wsum += k;
        rss += k * (yi - fitted).powi(2);
    }

    Ok(LocalFit {
        z0,
        h,
        p,
        beta: beta.iter().copied().collect(),
        dhat: d,
        n_local,
        residual_variance: rss / wsum,
        n,
        window: ((zmin - z0) / h, (zmax - z0) / h),
        kernel: kernel.clone(),
        dinv,
    })
}

/// Fits at every grid point; failures are kept per point.
pub fn fit_grid(
    z: &[f64],
    y: &[f64],
    grid: &[f64],
    h: f64,
    p: usize,
    kernel: &Kernel,
) -> Vec<Result<LocalFit>> {
    grid.par_iter().map(|&z0| fit(z, y, z0, h, p, kernel)).collect()
}

impl LocalFit {
    pub fn value(&self) -> f64 {
        self.beta[0]
    }

    pub fn derivative(&self) -> f64 {
        self.beta[1] / self.h
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn dhat_inverse(&self) -> &DMatrix<f64> {
        &self.dinv
    }

    /// Fitted local polynomial evaluated at `z`.
    pub fn predict(&self, z: f64) -> f64 {
        let u = (z - self.z0) / self.h;
        self.beta.iter().rev().fold(0.0, |acc, c| acc * u + c)
    }

    /// `g((z - z0)/h)`.
    pub fn basis(&self, z: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.p + 1];
        powers((z - self.z0) / self.h, self.p, &mut g);
        g
    }

    /// Equivalent-kernel weight `e_row^T D^{-1} g(u) K_h(z - z0)`, so that
    /// `beta[row] = mean_i(weight_i * y_i)`.
    pub fn equivalent_weight(&self, z: f64, row: usize) -> f64 {
        let u = (z - self.z0) / self.h;
        let k = self.kernel.eval(u) / self.h;
        if k == 0.0 {
            return 0.0;
        }
        let mut g = vec![0.0; self.p + 1];
        powers(u, self.p, &mut g);
        let dot: f64 = (0..=self.p).map(|c| self.dinv[(row, c)] * g[c]).sum();
        dot * k
    }

    /// `V = S^{-1} S~ S^{-1}` with `S_jk = ∫ u^{j+k} K` and
    /// `S~_jk = ∫ u^{j+k} K^2` over the part of the kernel window that
    /// overlaps the data support.
    pub fn sandwich_v(&self) -> DMatrix<f64> {
        sandwich_v(&self.kernel, self.p, self.window)
    }

    pub fn derivative_stderr(&self, f_hat_z0: f64, n: usize) -> Result<f64> {
        self.stderr_component(1, f_hat_z0, n, 3)
    }

    pub fn value_stderr(&self, f_hat_z0: f64, n: usize) -> Result<f64> {
        self.stderr_component(0, f_hat_z0, n, 1)
    }

    fn stderr_component(&self, row: usize, f: f64, n: usize, hpow: i32) -> Result<f64> {
        if !(f.is_finite() && f > 0.0) {
            return Err(Error::InvalidDensity(f));
        }
        if self.residual_variance == 0.0 {
            return Ok(0.0);
        }
        let v = self.sandwich_v()[(row, row)];
        Ok((self.residual_variance * v / (f * n as f64 * self.h.powi(hpow))).sqrt())
    }
}

/// Sandwich matrix for a local fit whose data support spans `window`
/// (in bandwidth units around the evaluation point).
pub fn sandwich_v(kernel: &Kernel, p: usize, window: (f64, f64)) -> DMatrix<f64> {
    let r = kernel.radius();
    let (lo, hi) = (window.0.max(-r), window.1.min(r));
    let m = p + 1;
    let moments: Vec<(f64, f64)> = if lo <= -r && hi >= r {
        kernel.moments(2 * p)
    } else {
        (0..=2 * p)
            .map(|j| {
                (
                    kernel.truncated_moment(j, lo, hi, false),
                    kernel.truncated_moment(j, lo, hi, true),
                )
            })
            .collect()
    };
    let s = DMatrix::from_fn(m, m, |j, k| moments[j + k].0);
    let st = DMatrix::from_fn(m, m, |j, k| moments[j + k].1);
    let sinv = s.try_inverse().unwrap_or_else(|| DMatrix::from_element(m, m, f64::NAN));
    &sinv * st * &sinv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_design(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64).collect()
    }

    #[test]
    fn affine_reproduction() {
        let z = uniform_design(200, 0.0, 4.0);
        let y: Vec<f64> = z.iter().map(|v| 2.0 + 3.0 * v).collect();
        let k = Kernel::epanechnikov();
        for &z0 in &[0.5, 1.7, 3.2] {
            for &h in &[0.2, 0.6, 1.5] {
                let f = fit(&z, &y, z0, h, 1, &k).unwrap();
                assert!((f.value() - (2.0 + 3.0 * z0)).abs() < 1e-10);
                assert!((f.derivative() - 3.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_reproduction() {
        let z = uniform_design(100, -1.0, 1.0);
        let y = vec![4.5; 100];
        let f = fit(&z, &y, 0.1, 0.3, 1, &Kernel::gaussian()).unwrap();
        assert!((f.value() - 4.5).abs() < 1e-10);
        assert!(f.derivative().abs() < 1e-10);
        assert!(f.residual_variance < 1e-24);
        let mut g = f.clone();
        g.residual_variance = 0.0;
        assert_eq!(g.derivative_stderr(1.0, 100).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_derivative() {
        let z = uniform_design(300, 0.0, 2.0);
        let y: Vec<f64> = z.iter().map(|v| v * v).collect();
        let f = fit(&z, &y, 1.3, 0.25, 2, &Kernel::epanechnikov()).unwrap();
        assert!((f.derivative() - 2.6).abs() < 1e-8);
    }

    #[test]
    fn brute_force_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..400).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = z.iter().map(|v| v.sin() + rng.gen::<f64>()).collect();
        let k = Kernel::epanechnikov();
        let (z0, h, p) = (0.5, 0.4, 2);
        let f = fit(&z, &y, z0, h, p, &k).unwrap();

        let rows: Vec<usize> = (0..z.len()).filter(|&i| ((z[i] - z0) / h).abs() <= 1.0).collect();
        let xm = DMatrix::from_fn(rows.len(), 3, |r, c| ((z[rows[r]] - z0) / h).powi(c as i32));
        let w = DMatrix::from_diagonal(&DVector::from_iterator(
            rows.len(),
            rows.iter().map(|&i| 0.75 * (1.0 - ((z[i] - z0) / h).powi(2))),
        ));
        let yv = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
        let lhs = xm.transpose() * &w * &xm;
        let rhs = xm.transpose() * &w * yv;
        let oracle = lhs.lu().solve(&rhs).unwrap();
        for j in 0..3 {
            assert!((f.beta[j] - oracle[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_thin_windows() {
        let z = vec![0.0, 0.05, 3.0, 4.0];
        let y = vec![1.0; 4];
        let err = fit(&z, &y, 0.0, 0.1, 1, &Kernel::epanechnikov()).unwrap_err();
        assert!(matches!(err, Error::NotEnoughLocalData { found: 2, needed: 3, .. }));
    }

    #[test]
    fn rejects_degenerate_design() {
        let z = vec![1.0; 10];
        let y = vec![1.0; 10];
        let err = fit(&z, &y, 1.0, 0.5, 1, &Kernel::epanechnikov()).unwrap_err();
        assert!(matches!(err, Error::SingularDesign { .. }));
    }

    #[test]
    fn boundary_reproduction() {
        let z = uniform_design(500, 0.0, 1.0);
        let y: Vec<f64> = z.iter().map(|v| 1.0 - v + 2.0 * v * v).collect();
        let f = fit(&z, &y, 0.0, 0.2, 2, &Kernel::epanechnikov()).unwrap();
        assert!((f.value() - 1.0).abs() < 1e-8);
        assert!((f.derivative() + 1.0).abs() < 1e-8);
        assert!(f.window.0 >= 0.0 && f.window.0 < 0.01);
    }

    #[test]
    fn interior_stderr_matches_moment_oracle() {
        // Epanechnikov moments: mu2 = 1/5, nu2 = 3/35; p = 1 gives V22 = nu2 / mu2^2.
        let z = uniform_design(1000, -5.0, 5.0);
        let y: Vec<f64> = z.iter().map(|v| v.cos()).collect();
        let mut f = fit(&z, &y, 0.0, 0.3, 1, &Kernel::epanechnikov()).unwrap();
        f.residual_variance = 1.0;
        let v22: f64 = (3.0 / 35.0) / (0.2 * 0.2);
        let expect = (v22 / (10000.0 * 0.027)).sqrt();
        assert!((f.derivative_stderr(1.0, 10000).unwrap() - expect).abs() < 1e-9);
        let ratio = f.derivative_stderr(1.0, 10000).unwrap() / f.derivative_stderr(1.0, 40000).unwrap();
        assert!((ratio - 2.0).abs() < 1e-12);
        assert!(matches!(f.derivative_stderr(0.0, 10), Err(Error::InvalidDensity(_))));
    }

    #[test]
    fn boundary_sandwich_is_larger() {
        let k = Kernel::epanechnikov();
        let inner = sandwich_v(&k, 1, (-5.0, 5.0));
        let edge = sandwich_v(&k, 1, (0.0, 5.0));
        assert!(edge[(0, 0)] > inner[(0, 0)]);
        assert!(edge[(1, 1)] > inner[(1, 1)]);
    }

    #[test]
    fn equivalent_weights_reconstruct_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..300).map(|_| rng.gen::<f64>() * 2.0).collect();
        let y: Vec<f64> = z.iter().map(|v| v.exp() + rng.gen::<f64>()).collect();
        let f = fit(&z, &y, 1.0, 0.5, 2, &Kernel::epanechnikov()).unwrap();
        for row in 0..3 {
            let b: f64 = z.iter().zip(&y).map(|(&zi, &yi)| f.equivalent_weight(zi, row) * yi).sum::<f64>()
                / z.len() as f64;
            assert!((b - f.beta[row]).abs() < 1e-10);
        }
    }

    #[test]
    fn predict_matches_basis() {
        let z = uniform_design(100, 0.0, 1.0);
        let y: Vec<f64> = z.iter().map(|v| v.powi(3)).collect();
        let f = fit(&z, &y, 0.5, 0.3, 3, &Kernel::gaussian()).unwrap();
        let t = 0.6;
        let via_basis: f64 = f.basis(t).iter().zip(&f.beta).map(|(a, b)| a * b).sum();
        assert!((f.predict(t) - via_basis).abs() < 1e-12);
        assert!((f.predict(t) - 0.216).abs() < 1e-8);
    }
}
