//! Monte Carlo summaries and reporting for the acceptance suite.

use std::time::Instant;

/// Mean, sample standard deviation and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { f64::NAN };
        Self { mean, sd: var.sqrt(), se: (var / n as f64).sqrt(), n }
    }

    pub fn variance(&self) -> f64 {
        self.sd * self.sd
    }

    /// `|mean - truth|` in units of the standard error.
    pub fn z_score(&self, truth: f64) -> f64 {
        (self.mean - truth).abs() / self.se
    }
}

/// Share of intervals `(lo, hi)` containing `truth`.
pub fn coverage(intervals: &[(f64, f64)], truth: f64) -> f64 {
    let hit = intervals.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count();
    hit as f64 / intervals.len() as f64
}

/// Outcome of one criterion.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<28} {} ({:.1}s) {}",
            self.id,
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.seconds,
            self.detail
        )
    }
}

/// Runs `check`, timing it; an `Err` is a failure carrying the message.
pub fn judge<F>(id: usize, name: &'static str, check: F) -> Verdict
where
    F: FnOnce() -> Result<(bool, String), String>,
{
    let t = Instant::now();
    let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
    Verdict { id, name, pass, detail, seconds: t.elapsed().as_secs_f64() }
}

/// Criteria selected by a comma list such as `3,4,11`; all when `None` or empty.
pub fn selected(filter: Option<&str>, id: usize) -> bool {
    match filter.map(str::trim) {
        None | Some("") => true,
        Some(f) => f.split(',').any(|s| s.trim().parse() == Ok(id)),
    }
}
