//! Regression bases and the fitted decoupling field `x ↦ (Ŷ_k, Z_k, Z⁰_k)`.

use crate::hamiltonian::ThetaLayout;
use crate::linalg::Coefficients;

/// Polynomial order of the regression basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Basis {
    /// `{1, x, m}`.
    #[default]
    Affine,
    /// `{1, x, m, x⊗x, x⊗m, m⊗m}`.
    Quadratic,
}

/// Features of a particle: its state `x` and, when `use_mean` is set, the
/// mean `m` of its world. `m` is what carries the dependence on the common
/// noise once regressions are pooled across worlds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub n: usize,
    pub basis: Basis,
    pub use_mean: bool,
}

impl FeatureMap {
    /// The world mean is only identifiable with several worlds of several
    /// particles each.
    pub fn for_population(n: usize, basis: Basis, worlds: usize, particles: usize) -> Self {
        Self {
            n,
            basis,
            use_mean: worlds > 1 && particles > 1,
        }
    }

    pub fn len(&self) -> usize {
        let n = self.n;
        let lin = 1 + n + if self.use_mean { n } else { 0 };
        match self.basis {
            Basis::Affine => lin,
            Basis::Quadratic => {
                let tri = n * (n + 1) / 2;
                lin + tri + if self.use_mean { n * n + tri } else { 0 }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eval(&self, x: &[f64], m: &[f64], out: &mut [f64]) {
        let n = self.n;
        out[0] = 1.0;
        out[1..1 + n].copy_from_slice(x);
        let mut at = 1 + n;
        if self.use_mean {
            out[at..at + n].copy_from_slice(m);
            at += n;
        }
        if self.basis == Basis::Quadratic {
            for i in 0..n {
                for j in i..n {
                    out[at] = x[i] * x[j];
                    at += 1;
                }
            }
            if self.use_mean {
                for i in 0..n {
                    for j in 0..n {
                        out[at] = x[i] * m[j];
                        at += 1;
                    }
                }
                for i in 0..n {
                    for j in i..n {
                        out[at] = m[i] * m[j];
                        at += 1;
                    }
                }
            }
        }
    }
}

/// Regression coefficients of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFit {
    /// Targets `Ŷ` (length `n`).
    pub y: Coefficients,
    /// Targets `(Z, Z⁰)` (length `2·n·d`).
    pub z: Coefficients,
}

/// Per-step regression fits; evaluating them at a state gives the adjoint
/// part of `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingField {
    pub map: FeatureMap,
    pub layout: ThetaLayout,
    pub steps: Vec<StepFit>,
}

impl DecouplingField {
    /// The field that returns zero adjoints everywhere.
    pub fn zero(map: FeatureMap, layout: ThetaLayout, steps: usize) -> Self {
        let p = map.len();
        let nd = layout.n * layout.d;
        let fit = StepFit {
            y: Coefficients::zeros(p, layout.n),
            z: Coefficients::zeros(p, 2 * nd),
        };
        Self {
            map,
            layout,
            steps: vec![fit; steps],
        }
    }

    /// Writes `(Ŷ, Z, Z⁰)` at step `k` into `adj` (length `n + 2·n·d`).
    /// `phi` is scratch of length `map.len()`.
    #[inline]
    pub fn eval(&self, k: usize, x: &[f64], m: &[f64], phi: &mut [f64], adj: &mut [f64]) {
        self.map.eval(x, m, phi);
        let n = self.layout.n;
        self.steps[k].y.predict(phi, &mut adj[..n]);
        self.steps[k].z.predict(phi, &mut adj[n..]);
    }

    /// Number of step fits that needed the ridge fallback.
    pub fn ridge_fallbacks(&self) -> usize {
        self.steps.iter().map(|s| s.y.ridge as usize + s.z.ridge as usize).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_counts() {
        let f = FeatureMap::for_population(1, Basis::Affine, 4, 4);
        assert_eq!(f.len(), 3);
        let f = FeatureMap::for_population(1, Basis::Affine, 1, 4);
        assert_eq!(f.len(), 2);
        let f = FeatureMap::for_population(2, Basis::Quadratic, 4, 4);
        assert_eq!(f.len(), 1 + 2 + 2 + 3 + 4 + 3);
        let mut out = vec![0.0; f.len()];
        f.eval(&[1.0, 2.0], &[3.0, 4.0], &mut out);
        assert_eq!(out, vec![1.0, 1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 4.0, 3.0, 4.0, 6.0, 8.0, 9.0, 12.0, 16.0]);
    }

    #[test]
    fn zero_field_is_zero() {
        let map = FeatureMap::for_population(1, Basis::Affine, 2, 2);
        let layout = ThetaLayout { n: 1, l: 1, d: 1 };
        let f = DecouplingField::zero(map, layout, 3);
        let mut phi = vec![0.0; 3];
        let mut adj = vec![9.0; 3];
        f.eval(2, &[1.5], &[0.2], &mut phi, &mut adj);
        assert_eq!(adj, vec![0.0; 3]);
    }
}
