//! Numerical integration helpers: adaptive Simpson, Gauss–Legendre rules
//! and the trapezoid rule on a tabulated grid.

/// Adaptive Simpson integration of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    // Seed with a fixed partition so narrow features are not skipped by the
    // first coarse estimate.
    const PIECES: usize = 16;
    let step = (b - a) / PIECES as f64;
    (0..PIECES)
        .map(|k| {
            let lo = a + step * k as f64;
            let hi = if k + 1 == PIECES { b } else { lo + step };
            let (flo, fhi, fmid) = (f(lo), f(hi), f(0.5 * (lo + hi)));
            let whole = simpson(lo, hi, flo, fmid, fhi);
            recurse(&f, lo, hi, flo, fmid, fhi, whole, tol / PIECES as f64, 40)
        })
        .sum()
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0
        || delta.abs() <= 15.0 * tol
        || delta.abs() <= 64.0 * f64::EPSILON * (left.abs() + right.abs())
    {
        return left + right + delta / 15.0;
    }
    recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes and weights by Newton iteration on the Legendre polynomial.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Nodes and weights mapped onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let nodes = self.nodes.iter().map(|t| mid + half * t).collect();
        let weights = self.weights.iter().map(|w| w * half).collect();
        (nodes, weights)
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| w * f(mid + half * t))
            .sum::<f64>()
            * half
    }
}

/// Legendre polynomial P_n(x) and its derivative.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Trapezoid weights for an arbitrary increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let m = grid.len();
    let mut w = vec![0.0; m];
    for k in 1..m {
        let half = 0.5 * (grid[k] - grid[k - 1]);
        w[k - 1] += half;
        w[k] += half;
    }
    w
}

/// Equispaced grid of `m` points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    match m {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..m)
            .map(|k| {
                if k + 1 == m {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (m - 1) as f64
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_polynomials_and_gaussians() {
        let v = adaptive_simpson(|x| x * x, 0.0, 3.0, 1e-12);
        assert!((v - 9.0).abs() < 1e-10);
        let g = adaptive_simpson(
            |x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            -10.0,
            10.0,
            1e-12,
        );
        assert!((g - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gauss_legendre_is_exact_for_low_degree() {
        let rule = GaussLegendre::new(8);
        // degree 15 is exact for 8 nodes
        let v = rule.integrate(|x| x.powi(14) + x.powi(3), -1.0, 1.0);
        assert!((v - 2.0 / 15.0).abs() < 1e-13);
        let w: f64 = rule.weights.iter().sum();
        assert!((w - 2.0).abs() < 1e-13);
        let big = GaussLegendre::new(128);
        assert!((big.weights.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_weights_sum_to_length() {
        let g = linspace(-1.0, 2.0, 31);
        let w = trapezoid_weights(&g);
        assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-12);
    }
}
