//! Nuisance surfaces: instrument propensity `π(z|x)`, outcome regression
//! `μ(x,z)`, treatment regression `λ(x,z)`, and the fold-averaged marginals
//! `f(z)`, `τ0(z)`, `λ0(z)` built from them.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{quantile, Dataset, FoldId, Target};
use crate::dgp::{Dgp, GaussianIv};
use crate::error::{Error, Result};
use crate::kernels::normal_pdf;

/// A function of covariates and instrument value.
pub trait Surface: Send + Sync {
    fn eval(&self, x: &[f64], z: f64) -> f64;
}

impl<F> Surface for F
where
    F: Fn(&[f64], f64) -> f64 + Send + Sync,
{
    #[inline]
    fn eval(&self, x: &[f64], z: f64) -> f64 {
        self(x, z)
    }
}

pub type SharedSurface = Arc<dyn Surface>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub lower: f64,
    pub upper: f64,
}

impl Default for ClipBounds {
    fn default() -> Self {
        Self { lower: 0.01, upper: 100.0 }
    }
}

/// Fitted nuisance surfaces with the fold they were trained on.
#[derive(Clone)]
pub struct NuisanceFit {
    pi: SharedSurface,
    mu: SharedSurface,
    lambda: SharedSurface,
    pub training_fold: FoldId,
    pub clip: ClipBounds,
    clip_events: Arc<AtomicU64>,
    /// Learner description and fitted coefficients.
    pub summary: serde_json::Value,
}

impl std::fmt::Debug for NuisanceFit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NuisanceFit")
            .field("training_fold", &self.training_fold)
            .field("clip", &self.clip)
            .field("clip_events", &self.clip_events())
            .field("summary", &self.summary)
            .finish()
    }
}

impl NuisanceFit {
    pub fn new(
        pi: SharedSurface,
        mu: SharedSurface,
        lambda: SharedSurface,
        training_fold: FoldId,
        clip: ClipBounds,
    ) -> Self {
        Self {
            pi,
            mu,
            lambda,
            training_fold,
            clip,
            clip_events: Arc::new(AtomicU64::new(0)),
            summary: serde_json::Value::Null,
        }
    }

    pub fn with_summary(mut self, summary: serde_json::Value) -> Self {
        self.summary = summary;
        self
    }

    pub fn with_pi(mut self, pi: SharedSurface) -> Self {
        self.pi = pi;
        self
    }

    pub fn with_mu(mut self, mu: SharedSurface) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_lambda(mut self, lambda: SharedSurface) -> Self {
        self.lambda = lambda;
        self
    }

    /// `π̂(z|x)` clipped into the configured bounds.
    #[inline]
    pub fn pi(&self, x: &[f64], z: f64) -> f64 {
        let v = self.pi.eval(x, z);
        if v < self.clip.lower {
            self.clip_events.fetch_add(1, Ordering::Relaxed);
            self.clip.lower
        } else if v > self.clip.upper {
            self.clip_events.fetch_add(1, Ordering::Relaxed);
            self.clip.upper
        } else {
            v
        }
    }

    /// `π̂(z|x)` before clipping.
    #[inline]
    pub fn pi_raw(&self, x: &[f64], z: f64) -> f64 {
        self.pi.eval(x, z)
    }

    #[inline]
    pub fn mu(&self, x: &[f64], z: f64) -> f64 {
        self.mu.eval(x, z)
    }

    #[inline]
    pub fn lambda(&self, x: &[f64], z: f64) -> f64 {
        self.lambda.eval(x, z)
    }

    #[inline]
    pub fn regression(&self, target: Target, x: &[f64], z: f64) -> f64 {
        match target {
            Target::Outcome => self.mu(x, z),
            Target::Treatment => self.lambda(x, z),
        }
    }

    pub fn clip_events(&self) -> u64 {
        self.clip_events.load(Ordering::Relaxed)
    }
}

// ---------------------------------------------------------------------------
// Marginals

const MARGINAL_COMPONENTS: usize = 3;

#[derive(Debug)]
struct MarginalTable {
    lo: f64,
    hi: f64,
    step: f64,
    /// Node values, two padding nodes on each side.
    values: [Vec<f64>; MARGINAL_COMPONENTS],
    slopes: [Vec<f64>; MARGINAL_COMPONENTS],
}

struct MarginalInner {
    nuisance: NuisanceFit,
    x: Vec<f64>,
    d: usize,
    table: Option<MarginalTable>,
    source_fold: FoldId,
}

/// `f̂(z)`, `τ̂0(z)` and `λ̂0(z)` as averages of the nuisance surfaces over
/// the covariates of one fold; optionally tabulated with cubic Hermite
/// interpolation over a range of `z`.
#[derive(Clone)]
pub struct MarginalFit {
    inner: Arc<MarginalInner>,
}

impl std::fmt::Debug for MarginalFit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MarginalFit")
            .field("source_fold", &self.inner.source_fold)
            .field("n", &(self.inner.x.len() / self.inner.d.max(1)))
            .field("tabulated", &self.inner.table.is_some())
            .finish()
    }
}

/// Marginals of `nuisance` over the covariates of `fold`.
pub fn marginals_from(nuisance: &NuisanceFit, fold: &Dataset) -> Result<MarginalFit> {
    fold.fold.ensure_disjoint(&nuisance.training_fold)?;
    if fold.is_empty() {
        return Err(Error::EmptyFold);
    }
    Ok(MarginalFit {
        inner: Arc::new(MarginalInner {
            nuisance: nuisance.clone(),
            x: fold.x_flat().to_vec(),
            d: fold.d(),
            table: None,
            source_fold: fold.fold.clone(),
        }),
    })
}

impl MarginalFit {
    pub fn source_fold(&self) -> &FoldId {
        &self.inner.source_fold
    }

    fn exact(&self, z: f64) -> [f64; MARGINAL_COMPONENTS] {
        let inner = &self.inner;
        let d = inner.d;
        let n = inner.x.len() / d.max(1);
        let mut acc = [0.0; MARGINAL_COMPONENTS];
        for i in 0..n {
            let x = &inner.x[i * d..(i + 1) * d];
            acc[0] += inner.nuisance.pi_raw(x, z);
            acc[1] += inner.nuisance.mu(x, z);
            acc[2] += inner.nuisance.lambda(x, z);
        }
        acc.map(|v| v / n as f64)
    }

    /// Copy that interpolates on `nodes` equispaced points over `[lo, hi]`;
    /// evaluations outside the range fall back to exact averaging.
    pub fn tabulated(&self, lo: f64, hi: f64, nodes: usize) -> MarginalFit {
        let nodes = nodes.max(4);
        let step = (hi - lo) / (nodes - 1) as f64;
        let raw: Vec<[f64; MARGINAL_COMPONENTS]> = (0..nodes + 4)
            .into_par_iter()
            .map(|k| self.exact(lo + (k as f64 - 2.0) * step))
            .collect();
        let values: [Vec<f64>; MARGINAL_COMPONENTS] =
            std::array::from_fn(|c| raw.iter().map(|v| v[c]).collect());
        let slopes: [Vec<f64>; MARGINAL_COMPONENTS] = std::array::from_fn(|c| {
            let v = &values[c];
            (0..nodes)
                .map(|k| {
                    let j = k + 2;
                    (-v[j + 2] + 8.0 * v[j + 1] - 8.0 * v[j - 1] + v[j - 2]) / (12.0 * step)
                })
                .collect()
        });
        MarginalFit {
            inner: Arc::new(MarginalInner {
                nuisance: self.inner.nuisance.clone(),
                x: self.inner.x.clone(),
                d: self.inner.d,
                table: Some(MarginalTable { lo, hi, step, values, slopes }),
                source_fold: self.inner.source_fold.clone(),
            }),
        }
    }

    #[inline]
    fn component(&self, c: usize, z: f64) -> f64 {
        match &self.inner.table {
            Some(t) if z >= t.lo && z <= t.hi => {
                let pos = (z - t.lo) / t.step;
                let k = (pos.floor() as usize).min(t.slopes[c].len() - 2);
                let s = pos - k as f64;
                let (y0, y1) = (t.values[c][k + 2], t.values[c][k + 3]);
                let (m0, m1) = (t.slopes[c][k] * t.step, t.slopes[c][k + 1] * t.step);
                let s2 = s * s;
                let s3 = s2 * s;
                (2.0 * s3 - 3.0 * s2 + 1.0) * y0
                    + (s3 - 2.0 * s2 + s) * m0
                    + (-2.0 * s3 + 3.0 * s2) * y1
                    + (s3 - s2) * m1
            }
            _ => self.exact(z)[c],
        }
    }

    /// `f̂(z)`, the fold average of the unclipped `π̂(z|X_i)`, floored at zero.
    pub fn f_hat(&self, z: f64) -> f64 {
        self.component(0, z).max(0.0)
    }

    pub fn tau0_hat(&self, z: f64) -> f64 {
        self.component(1, z)
    }

    pub fn lambda0_hat(&self, z: f64) -> f64 {
        self.component(2, z)
    }

    pub fn regression0(&self, target: Target, z: f64) -> f64 {
        match target {
            Target::Outcome => self.tau0_hat(z),
            Target::Treatment => self.lambda0_hat(z),
        }
    }
}

// ---------------------------------------------------------------------------
// Learners

/// Columns of a linear working model: intercept, covariates, powers of `z`
/// up to `z_degree`, and optionally every `x_j · z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub z_degree: usize,
    pub xz_interactions: bool,
}

impl FeatureSet {
    pub const COVARIATES: FeatureSet = FeatureSet { z_degree: 0, xz_interactions: false };
    pub const ADDITIVE: FeatureSet = FeatureSet { z_degree: 1, xz_interactions: false };
    pub const CUBIC_INTERACTED: FeatureSet = FeatureSet { z_degree: 3, xz_interactions: true };

    pub fn len(&self, d: usize) -> usize {
        1 + d + self.z_degree + if self.xz_interactions { d } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    fn fill(&self, x: &[f64], z: f64, out: &mut [f64]) {
        out[0] = 1.0;
        out[1..=x.len()].copy_from_slice(x);
        let mut k = 1 + x.len();
        let mut zp = 1.0;
        for _ in 0..self.z_degree {
            zp *= z;
            out[k] = zp;
            k += 1;
        }
        if self.xz_interactions {
            for &xj in x {
                out[k] = xj * z;
                k += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Learner {
    Linear { features: FeatureSet },
    /// Local linear in `z`, globally linear in `x`, smoothly varying in `z`.
    LocalLinearInZ,
    /// Gaussian-kernel ridge regression on standardized `(x, z)`.
    KernelRidge,
}

impl Learner {
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name.trim().to_ascii_lowercase().as_str() {
            "linear" => Learner::Linear { features: FeatureSet::ADDITIVE },
            "linear-cubic" => Learner::Linear { features: FeatureSet::CUBIC_INTERACTED },
            "local-linear" | "local-linear-in-z" => Learner::LocalLinearInZ,
            "kernel-ridge" | "krr" => Learner::KernelRidge,
            other => return Err(Error::InvalidInput(format!("unknown learner `{other}`"))),
        })
    }

    pub fn name(&self) -> String {
        match self {
            Learner::Linear { features } if *features == FeatureSet::ADDITIVE => "linear".into(),
            Learner::Linear { features } if *features == FeatureSet::CUBIC_INTERACTED => "linear-cubic".into(),
            Learner::Linear { features } => format!("linear(z^{}, xz={})", features.z_degree, features.xz_interactions),
            Learner::LocalLinearInZ => "local-linear".into(),
            Learner::KernelRidge => "kernel-ridge".into(),
        }
    }
}

/// Least-squares linear working model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearSurface {
    pub coef: Vec<f64>,
    pub features: FeatureSet,
    pub d: usize,
}

impl LinearSurface {
    pub fn fit(data: &Dataset, response: &[f64], features: FeatureSet) -> Result<Self> {
        let n = data.n();
        if n == 0 {
            return Err(Error::EmptyFold);
        }
        let d = data.d();
        let p = features.len(d);
        if n < p {
            return Err(Error::RankDeficientDesign);
        }
        let mut m = DMatrix::<f64>::zeros(n, p);
        let mut row = vec![0.0; p];
        for i in 0..n {
            features.fill(data.x_row(i), data.z[i], &mut row);
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        let scale: Vec<f64> = (0..p).map(|j| m.column(j).norm()).collect();
        if scale.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(Error::RankDeficientDesign);
        }
        for (j, s) in scale.iter().enumerate() {
            m.column_mut(j).unscale_mut(*s);
        }
        let qr = m.qr();
        let r = qr.r();
        let diag_max = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
        if (0..p).any(|j| r[(j, j)].abs() <= 1e-10 * diag_max) {
            return Err(Error::RankDeficientDesign);
        }
        let qtb = qr.q().transpose() * DVector::from_column_slice(response);
        let sol = r.solve_upper_triangular(&qtb).ok_or(Error::RankDeficientDesign)?;
        let coef = sol.iter().zip(&scale).map(|(c, s)| c / s).collect();
        Ok(Self { coef, features, d })
    }

    #[inline]
    pub fn predict(&self, x: &[f64], z: f64) -> f64 {
        let mut row = [0.0; 64];
        let p = self.coef.len();
        if p <= row.len() {
            self.features.fill(x, z, &mut row[..p]);
            row[..p].iter().zip(&self.coef).map(|(a, b)| a * b).sum()
        } else {
            let mut row = vec![0.0; p];
            self.features.fill(x, z, &mut row);
            row.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
        }
    }
}

/// `E[W | X, Z = z] ≈ c(z) + b(z)ᵀx`, estimated by kernel-weighted least
/// squares on `(1, Z - z, X)` at equispaced nodes and linearly interpolated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalLinearSurface {
    pub nodes: Vec<f64>,
    pub intercept: Vec<f64>,
    pub slopes: Vec<Vec<f64>>,
    pub bandwidth: f64,
}

const LOCAL_LINEAR_NODES: usize = 201;

impl LocalLinearSurface {
    pub fn fit(data: &Dataset, response: &[f64]) -> Result<Self> {
        let n = data.n();
        if n == 0 {
            return Err(Error::EmptyFold);
        }
        let d = data.d();
        let p = d + 2;
        if n < 2 * p {
            return Err(Error::FoldTooSmall { found: n, needed: 2 * p });
        }
        let (lo, hi) = data.z_range();
        let sd = sample_sd(&data.z);
        let bandwidth = 1.06 * sd * (n as f64).powf(-0.2);
        let nodes: Vec<f64> = (0..LOCAL_LINEAR_NODES)
            .map(|k| lo + (hi - lo) * k as f64 / (LOCAL_LINEAR_NODES - 1) as f64)
            .collect();
        let fits: Vec<Result<Vec<f64>>> = nodes
            .par_iter()
            .map(|&z0| {
                let mut xtx = DMatrix::<f64>::zeros(p, p);
                let mut xty = DVector::<f64>::zeros(p);
                let mut row = vec![0.0; p];
                for i in 0..n {
                    let u = (data.z[i] - z0) / bandwidth;
                    let w = (-0.5 * u * u).exp();
                    if w < 1e-300 {
                        continue;
                    }
                    row[0] = 1.0;
                    row[1] = data.z[i] - z0;
                    row[2..].copy_from_slice(data.x_row(i));
                    for r in 0..p {
                        xty[r] += w * row[r] * response[i];
                        for c in r..p {
                            xtx[(r, c)] += w * row[r] * row[c];
                        }
                    }
                }
                for r in 0..p {
                    for c in 0..r {
                        xtx[(r, c)] = xtx[(c, r)];
                    }
                }
                let chol = xtx.cholesky().ok_or(Error::RankDeficientDesign)?;
                Ok(chol.solve(&xty).iter().copied().collect())
            })
            .collect();
        let mut intercept = Vec::with_capacity(nodes.len());
        let mut slopes = Vec::with_capacity(nodes.len());
        for f in fits {
            let beta = f?;
            intercept.push(beta[0]);
            slopes.push(beta[2..].to_vec());
        }
        Ok(Self { nodes, intercept, slopes, bandwidth })
    }

    pub fn predict(&self, x: &[f64], z: f64) -> f64 {
        let m = self.nodes.len();
        let (lo, hi) = (self.nodes[0], self.nodes[m - 1]);
        let pos = ((z.clamp(lo, hi) - lo) / (hi - lo) * (m - 1) as f64).max(0.0);
        let k = (pos.floor() as usize).min(m - 2);
        let s = pos - k as f64;
        let at = |j: usize| -> f64 {
            self.intercept[j] + self.slopes[j].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
        };
        (1.0 - s) * at(k) + s * at(k + 1)
    }
}

/// Gaussian-kernel ridge regression with median-heuristic scale and ridge
/// penalty chosen by closed-form leave-one-out error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelRidgeSurface {
    centers: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    offset: f64,
    feature_mean: Vec<f64>,
    feature_sd: Vec<f64>,
    pub gamma: f64,
    pub penalty: f64,
}

const KRR_MAX_TRAIN: usize = 600;

impl KernelRidgeSurface {
    fn features(&self, x: &[f64], z: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend(x.iter().chain(std::iter::once(&z)));
        for (j, v) in out.iter_mut().enumerate() {
            *v = (*v - self.feature_mean[j]) / self.feature_sd[j];
        }
    }

    pub fn fit(data: &Dataset, response: &[f64]) -> Result<Self> {
        let n = data.n();
        if n == 0 {
            return Err(Error::EmptyFold);
        }
        if n < 10 {
            return Err(Error::FoldTooSmall { found: n, needed: 10 });
        }
        let m = n.min(KRR_MAX_TRAIN);
        let idx: Vec<usize> = (0..m).map(|k| k * n / m).collect();
        let d = data.d() + 1;
        let raw: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| data.x_row(i).iter().copied().chain(std::iter::once(data.z[i])).collect())
            .collect();
        let feature_mean: Vec<f64> = (0..d).map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / m as f64).collect();
        let feature_sd: Vec<f64> = (0..d)
            .map(|j| {
                let v = raw.iter().map(|r| (r[j] - feature_mean[j]).powi(2)).sum::<f64>() / m as f64;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let centers: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| (v - feature_mean[j]) / feature_sd[j]).collect())
            .collect();
        let yv: Vec<f64> = idx.iter().map(|&i| response[i]).collect();
        let offset = yv.iter().sum::<f64>() / m as f64;
        let yc = DVector::from_iterator(m, yv.iter().map(|v| v - offset));

        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        let mut dists: Vec<f64> = Vec::new();
        let sub = m.min(300);
        for i in 0..sub {
            for j in (i + 1)..sub {
                dists.push(sq(&centers[i], &centers[j]).sqrt());
            }
        }
        let med = quantile(&dists, 0.5).max(1e-8);
        let gamma = 1.0 / (2.0 * med * med);
        let gram = DMatrix::from_fn(m, m, |i, j| (-gamma * sq(&centers[i], &centers[j])).exp());
        let eig = gram.symmetric_eigen();
        let q = eig.eigenvectors;
        let lam = eig.eigenvalues.map(|v| v.max(0.0));
        let qty = q.transpose() * &yc;

        let mut best = (f64::INFINITY, 1.0);
        for k in 0..40 {
            let penalty = 10f64.powf(-6.0 + 8.0 * k as f64 / 39.0) * m as f64;
            let shrink: Vec<f64> = lam.iter().map(|l| l / (l + penalty)).collect();
            let fitted = &q * DVector::from_iterator(m, qty.iter().zip(&shrink).map(|(a, s)| a * s));
            let mut loo = 0.0;
            for i in 0..m {
                let hii: f64 = (0..m).map(|j| q[(i, j)] * q[(i, j)] * shrink[j]).sum();
                loo += ((yc[i] - fitted[i]) / (1.0 - hii).max(1e-8)).powi(2);
            }
            if loo < best.0 {
                best = (loo, penalty);
            }
        }
        let penalty = best.1;
        let alpha = &q * DVector::from_iterator(m, qty.iter().zip(lam.iter()).map(|(a, l)| a / (l + penalty)));
        Ok(Self {
            centers,
            alpha: alpha.iter().copied().collect(),
            offset,
            feature_mean,
            feature_sd,
            gamma,
            penalty,
        })
    }

    pub fn predict(&self, x: &[f64], z: f64) -> f64 {
        let mut f = Vec::with_capacity(x.len() + 1);
        self.features(x, z, &mut f);
        let s: f64 = self
            .centers
            .iter()
            .zip(&self.alpha)
            .map(|(c, a)| a * (-self.gamma * c.iter().zip(&f).map(|(u, v)| (u - v).powi(2)).sum::<f64>()).exp())
            .sum();
        self.offset + s
    }
}

/// Fits `μ̂` (target outcome) or `λ̂` (target treatment) on `data`.
pub fn fit_regression(data: &Dataset, target: Target, learner: &Learner) -> Result<(SharedSurface, serde_json::Value)> {
    if data.is_empty() {
        return Err(Error::EmptyFold);
    }
    let response = data.response(target);
    Ok(match learner {
        Learner::Linear { features } => {
            let s = LinearSurface::fit(data, response, *features)?;
            let summary = json!({"learner": learner.name(), "coef": s.coef});
            (Arc::new(move |x: &[f64], z: f64| s.predict(x, z)) as SharedSurface, summary)
        }
        Learner::LocalLinearInZ => {
            let s = LocalLinearSurface::fit(data, response)?;
            let summary = json!({"learner": learner.name(), "bandwidth": s.bandwidth, "nodes": s.nodes.len()});
            (Arc::new(move |x: &[f64], z: f64| s.predict(x, z)) as SharedSurface, summary)
        }
        Learner::KernelRidge => {
            let s = KernelRidgeSurface::fit(data, response)?;
            let summary = json!({"learner": learner.name(), "gamma": s.gamma, "penalty": s.penalty});
            (Arc::new(move |x: &[f64], z: f64| s.predict(x, z)) as SharedSurface, summary)
        }
    })
}

// ---------------------------------------------------------------------------
// Residual KDE propensity

const KDE_GRID: usize = 2048;
const VARIANCE_FLOOR: f64 = 1e-6;
pub const MIN_KDE_FOLD: usize = 50;

/// `π̂(z|x) = ĝ((z - m̂(x))/ŝ(x)) / ŝ(x)` with `m̂`, `ŝ²` linear in `x` and
/// `ĝ` a Gaussian KDE of the standardized residuals.
#[derive(Debug, Clone)]
pub struct ResidualKde {
    pub mean: LinearSurface,
    pub variance: LinearSurface,
    pub bandwidth: f64,
    grid_lo: f64,
    grid_step: f64,
    density: Vec<f64>,
    floor_events: Arc<AtomicU64>,
}

impl ResidualKde {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let n = data.n();
        if n < MIN_KDE_FOLD {
            return Err(Error::FoldTooSmall { found: n, needed: MIN_KDE_FOLD });
        }
        let mean = LinearSurface::fit(data, &data.z, FeatureSet::COVARIATES)?;
        let resid: Vec<f64> = (0..n).map(|i| data.z[i] - mean.predict(data.x_row(i), 0.0)).collect();
        let sq: Vec<f64> = resid.iter().map(|r| r * r).collect();
        let variance = LinearSurface::fit(data, &sq, FeatureSet::COVARIATES)?;
        let floor_events = Arc::new(AtomicU64::new(0));
        let std_resid: Vec<f64> = (0..n)
            .map(|i| {
                let v = variance.predict(data.x_row(i), 0.0);
                let v = if v <= VARIANCE_FLOOR {
                    floor_events.fetch_add(1, Ordering::Relaxed);
                    VARIANCE_FLOOR
                } else {
                    v
                };
                resid[i] / v.sqrt()
            })
            .collect();
        let sd = sample_sd(&std_resid);
        let iqr = quantile(&std_resid, 0.75) - quantile(&std_resid, 0.25);
        let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
        let bandwidth = 0.9 * spread.max(1e-8) * (n as f64).powf(-0.2);
        let (lo, hi) = std_resid
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let grid_lo = lo - 6.0 * bandwidth;
        let grid_step = (hi - lo + 12.0 * bandwidth) / (KDE_GRID - 1) as f64;
        let density: Vec<f64> = (0..KDE_GRID)
            .into_par_iter()
            .map(|k| {
                let t = grid_lo + grid_step * k as f64;
                std_resid.iter().map(|e| normal_pdf((t - e) / bandwidth)).sum::<f64>() / (n as f64 * bandwidth)
            })
            .collect();
        Ok(Self { mean, variance, bandwidth, grid_lo, grid_step, density, floor_events })
    }

    /// Density of the standardized residual, zero off the tabulated grid.
    pub fn residual_density(&self, e: f64) -> f64 {
        let pos = (e - self.grid_lo) / self.grid_step;
        if !(pos >= 0.0) || pos > (KDE_GRID - 1) as f64 {
            return 0.0;
        }
        let k = (pos.floor() as usize).min(KDE_GRID - 2);
        let s = pos - k as f64;
        (1.0 - s) * self.density[k] + s * self.density[k + 1]
    }

    pub fn density(&self, x: &[f64], z: f64) -> f64 {
        let mut v = self.variance.predict(x, 0.0);
        if v <= VARIANCE_FLOOR {
            self.floor_events.fetch_add(1, Ordering::Relaxed);
            v = VARIANCE_FLOOR;
        }
        let s = v.sqrt();
        self.residual_density((z - self.mean.predict(x, 0.0)) / s) / s
    }

    /// Evaluations whose variance estimate hit the floor.
    pub fn floor_events(&self) -> u64 {
        self.floor_events.load(Ordering::Relaxed)
    }
}

// ---------------------------------------------------------------------------
// Providers

/// Produces nuisance fits from a training fold.
pub trait NuisanceProvider: Send + Sync {
    fn fit(&self, train: &Dataset) -> Result<NuisanceFit>;

    /// False when the nuisances ignore the training fold.
    fn uses_training_data(&self) -> bool {
        true
    }
}

/// Nuisances fixed in advance (true, synthetic or deliberately wrong).
#[derive(Debug, Clone)]
pub struct FixedNuisance(pub NuisanceFit);

impl NuisanceProvider for FixedNuisance {
    fn fit(&self, _train: &Dataset) -> Result<NuisanceFit> {
        Ok(self.0.clone())
    }

    fn uses_training_data(&self) -> bool {
        false
    }
}

/// Nuisances learned from data: regressions with the given learners and a
/// residual-KDE propensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedNuisance {
    pub outcome: Learner,
    pub treatment: Learner,
    pub clip: ClipBounds,
}

impl Default for LearnedNuisance {
    fn default() -> Self {
        Self {
            outcome: Learner::LocalLinearInZ,
            treatment: Learner::LocalLinearInZ,
            clip: ClipBounds::default(),
        }
    }
}

impl NuisanceProvider for LearnedNuisance {
    fn fit(&self, train: &Dataset) -> Result<NuisanceFit> {
        let (mu, mu_summary) = fit_regression(train, Target::Outcome, &self.outcome)?;
        let (lambda, lambda_summary) = fit_regression(train, Target::Treatment, &self.treatment)?;
        let kde = ResidualKde::fit(train)?;
        let summary = json!({
            "outcome": mu_summary,
            "treatment": lambda_summary,
            "propensity": {
                "learner": "residual-kde",
                "mean_coef": kde.mean.coef,
                "variance_coef": kde.variance.coef,
                "bandwidth": kde.bandwidth,
            },
            "training_rows": train.n(),
        });
        let pi = Arc::new(move |x: &[f64], z: f64| kde.density(x, z));
        Ok(NuisanceFit::new(pi, mu, lambda, train.fold.clone(), self.clip).with_summary(summary))
    }
}

/// True nuisances of `dgp` perturbed at rate `n^-alpha`: `η̂ = η + δ1`,
/// `λ̂ = λ + δ2`, the cubic outcome coefficient scaled by `1 + δ3`, and
/// `π̂` the unit-variance normal density around `η̂`. Each `δ` is one draw
/// from `N(n^-alpha, n^-2alpha)`.
pub fn synthetic_nuisance(dgp: &GaussianIv, alpha: f64, n: usize, seed: u64) -> Result<NuisanceFit> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidRate(alpha));
    }
    let scale = (n as f64).powf(-alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || scale + scale * rng.sample::<f64, _>(StandardNormal);
    let (d1, d2, d3) = (draw(), draw(), draw());
    let (g1, g2, g3) = (*dgp, *dgp, *dgp);
    let pi = Arc::new(move |x: &[f64], z: f64| normal_pdf(z - g1.eta_of(x) - d1));
    let mu = Arc::new(move |x: &[f64], z: f64| g2.mu(x, z) + g2.y_z3 * d3 * z * z * z);
    let lambda = Arc::new(move |x: &[f64], z: f64| g3.lambda(x, z) + d2);
    Ok(NuisanceFit::new(pi, mu, lambda, FoldId::external(), ClipBounds::default()).with_summary(json!({
        "learner": "synthetic",
        "alpha": alpha,
        "n": n,
        "seed": seed,
        "delta": [d1, d2, d3],
    })))
}

pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}
