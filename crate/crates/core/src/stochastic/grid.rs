use crate::error::{Error, Result};

/// Uniform grid on `[0, T]` with `K` steps. Only `T` and `K` are stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!("grid.T must be > 0 (got {horizon})")));
        }
        if steps == 0 {
            return Err(Error::Config("grid.K must be ≥ 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of node `k` (`k = 0..=K`).
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |k| self.time(k))
    }
}

/// Convenience constructor mirroring [`TimeGrid::new`].
pub fn make_time_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_sizes() {
        assert_eq!(make_time_grid(1.0, 4).unwrap().dt(), 0.25);
        assert_eq!(make_time_grid(2.0, 1).unwrap().dt(), 2.0);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(make_time_grid(0.0, 10).is_err());
        assert!(make_time_grid(-1.0, 10).is_err());
        assert!(make_time_grid(f64::NAN, 10).is_err());
        let err = make_time_grid(1.0, 0).unwrap_err();
        assert_eq!(err, Error::Config("grid.K must be ≥ 1".into()));
    }

    #[test]
    fn last_node_is_horizon() {
        let g = TimeGrid::new(0.3, 7).unwrap();
        assert_eq!(g.time(7), 0.3);
        assert_eq!(g.nodes().count(), 8);
    }
}
