use crate::error::{Error, Result};

use super::gaps::GapReport;

/// Least-squares line through `(log N, log gap)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Which gap series to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapSeries {
    State,
    Control,
}

/// Fits `log y = intercept + slope · log x` by ordinary least squares.
/// Needs at least three distinct `x` and strictly positive values.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<RateFit> {
    if let Some(&(x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::Config(format!(
            "log-log fit needs positive values (got ({x}, {y}))"
        )));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(Error::Config("log-log fit needs at least three distinct N".into()));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = points.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    // A constant series is fitted exactly by a flat line.
    let r2 = if ss_tot <= f64::EPSILON * m * my.abs().max(1.0) {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(RateFit {
        points: points.to_vec(),
        slope,
        intercept,
        r2,
    })
}

pub fn rate_fit(reports: &[GapReport], which: GapSeries) -> Result<RateFit> {
    let points: Vec<(f64, f64)> = reports
        .iter()
        .map(|r| {
            let gap = match which {
                GapSeries::State => r.state_gap,
                GapSeries::Control => r.control_gap,
            };
            (r.players as f64, gap)
        })
        .collect();
    fit_power_law(&points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn law(f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
        [4.0, 8.0, 16.0, 32.0].iter().map(|&n| (n, f(n))).collect()
    }

    #[test]
    fn exact_power_laws() {
        let fit = fit_power_law(&law(|n| 3.0 / n)).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        let fit = fit_power_law(&law(|n| 0.2 / n.sqrt())).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        let fit = fit_power_law(&law(|_| 0.7)).unwrap();
        assert!(fit.slope.abs() < 1e-12);
        assert_eq!(fit.r2, 1.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(fit_power_law(&[(4.0, 1.0), (8.0, 0.0), (16.0, 1.0)]).is_err());
        assert!(fit_power_law(&[(4.0, 1.0), (8.0, 0.5)]).is_err());
        assert!(fit_power_law(&[(4.0, 1.0), (4.0, 0.9), (8.0, 0.5)]).is_err());
    }
}
