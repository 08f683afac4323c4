//! Observational data, fold identities and seeded splits.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_ROOT: AtomicU64 = AtomicU64::new(1);

/// Provenance of a sample: a root dataset and the path of splits taken from it.
///
/// Two folds overlap when they share a root and one path is a prefix of the
/// other. Root `0` marks nuisances that were never trained on any sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FoldId {
    pub root: u64,
    pub path: Vec<u8>,
}

impl FoldId {
    pub fn fresh() -> Self {
        Self {
            root: NEXT_ROOT.fetch_add(1, Ordering::Relaxed),
            path: Vec::new(),
        }
    }

    pub fn external() -> Self {
        Self { root: 0, path: Vec::new() }
    }

    pub fn is_external(&self) -> bool {
        self.root == 0
    }

    pub fn child(&self, k: u8) -> Self {
        let mut path = self.path.clone();
        path.push(k);
        Self { root: self.root, path }
    }

    pub fn overlaps(&self, other: &FoldId) -> bool {
        if self.is_external() || other.is_external() || self.root != other.root {
            return false;
        }
        let n = self.path.len().min(other.path.len());
        self.path[..n] == other.path[..n]
    }

    pub fn ensure_disjoint(&self, other: &FoldId) -> Result<()> {
        if self.overlaps(other) {
            Err(Error::FoldOverlap)
        } else {
            Ok(())
        }
    }
}

impl std::fmt::Display for FoldId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.root)?;
        for p in &self.path {
            write!(f, ".{p}")?;
        }
        Ok(())
    }
}

/// Which observed response a dose-response curve is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// The outcome `Y`.
    Outcome,
    /// The treatment `A`.
    Treatment,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Outcome => "outcome",
            Target::Treatment => "treatment",
        }
    }
}

/// Observations `(X, Z, A, Y)` with covariates stored row-major.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: Vec<f64>,
    d: usize,
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub fold: FoldId,
}

impl Dataset {
    pub fn new(x: Vec<f64>, d: usize, z: Vec<f64>, a: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = z.len();
        if a.len() != n || y.len() != n || x.len() != n * d {
            return Err(Error::InvalidInput(format!(
                "column lengths disagree: z={n}, a={}, y={}, x={} (d={d})",
                a.len(),
                y.len(),
                x.len()
            )));
        }
        Ok(Self { x, d, z, a, y, fold: FoldId::fresh() })
    }

    pub fn from_rows(rows: &[Vec<f64>], z: Vec<f64>, a: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("ragged covariate rows".into()));
        }
        Self::new(rows.concat(), d, z, a, y)
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    #[inline]
    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn x_flat(&self) -> &[f64] {
        &self.x
    }

    pub fn response(&self, target: Target) -> &[f64] {
        match target {
            Target::Outcome => &self.y,
            Target::Treatment => &self.a,
        }
    }

    /// Rows `idx` as a new dataset labelled `fold`.
    pub fn subset(&self, idx: &[usize], fold: FoldId) -> Self {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            x.extend_from_slice(self.x_row(i));
        }
        Self {
            x,
            d: self.d,
            z: idx.iter().map(|&i| self.z[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            fold,
        }
    }

    /// Seeded shuffle followed by `k` contiguous pieces. The first `k-1`
    /// pieces have `n / k` rows; the remainder goes to the last piece.
    pub fn split(&self, k: usize, seed: u64) -> Vec<Dataset> {
        let mut idx: Vec<usize> = (0..self.n()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let base = self.n() / k;
        (0..k)
            .map(|j| {
                let lo = j * base;
                let hi = if j + 1 == k { self.n() } else { lo + base };
                self.subset(&idx[lo..hi], self.fold.child(j as u8))
            })
            .collect()
    }

    /// Quantile by linear interpolation between order statistics.
    pub fn z_quantile(&self, q: f64) -> f64 {
        quantile(&self.z, q)
    }

    pub fn z_range(&self) -> (f64, f64) {
        self.z
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Copy with `Y` multiplied by `c`.
    pub fn scale_outcome(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.y.iter_mut().for_each(|v| *v *= c);
        out.fold = FoldId::fresh();
        out
    }
}

pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    if s.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let z: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x: Vec<f64> = (0..2 * n).map(|i| i as f64).collect();
        Dataset::new(x, 2, z.clone(), z.clone(), z).unwrap()
    }

    #[test]
    fn split_sizes_put_remainder_last() {
        let parts = toy(11).split(3, 4);
        let sizes: Vec<usize> = parts.iter().map(Dataset::n).collect();
        assert_eq!(sizes, vec![3, 3, 5]);
        let mut all: Vec<f64> = parts.iter().flat_map(|p| p.z.clone()).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..11).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn rows_follow_their_instrument() {
        for part in toy(20).split(3, 9) {
            for i in 0..part.n() {
                let k = part.z[i];
                assert_eq!(part.x_row(i), &[2.0 * k, 2.0 * k + 1.0]);
            }
        }
    }

    #[test]
    fn fold_overlap_rules() {
        let data = toy(9);
        let parts = data.split(3, 1);
        assert!(parts[0].fold.overlaps(&data.fold));
        assert!(!parts[0].fold.overlaps(&parts[1].fold));
        assert!(parts[2].fold.child(0).overlaps(&parts[2].fold));
        assert!(!FoldId::external().overlaps(&parts[0].fold));
        assert!(!toy(3).fold.overlaps(&data.fold));
        assert_eq!(parts[0].fold.ensure_disjoint(&data.fold), Err(Error::FoldOverlap));
    }

    #[test]
    fn split_is_deterministic() {
        let d = toy(30);
        assert_eq!(d.split(3, 5)[1].z, d.split(3, 5)[1].z);
        assert_ne!(d.split(3, 5)[1].z, d.split(3, 6)[1].z);
    }

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[1.0, 2.0], 0.0), 1.0);
    }

    #[test]
    fn mismatched_columns_rejected() {
        assert!(Dataset::new(vec![0.0; 3], 1, vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]).is_err());
    }
}
