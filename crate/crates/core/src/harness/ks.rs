use crate::error::{Error, Result};

/// Asymptotic Kolmogorov–Smirnov coefficient `c(α)` at `α = 0.01`.
pub const KS_COEFF_1PCT: f64 = 1.628;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsTest {
    /// `sup_x |F_a(x) − F_b(x)|`.
    pub statistic: f64,
    /// `c(α) √((n + m) / (n m))`.
    pub critical: f64,
    pub passed: bool,
}

/// Two-sample Kolmogorov–Smirnov test at the 1% level.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("KS sample"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Config("KS samples must be finite".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let critical = KS_COEFF_1PCT * ((n + m) / (n * m)).sqrt();
    Ok(KsTest {
        statistic: d,
        critical,
        passed: d <= critical,
    })
}
