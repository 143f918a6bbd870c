//! Uniform-weight empirical measures. They stand in both for the conditional
//! law of one world's particles and for the empirical law of the N players.

use crate::error::{Error, Result};
use crate::hamiltonian::ThetaLayout;
use crate::mkv::ThetaPath;

/// `M` atoms in `R^k`, each carrying weight `1/M`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    mean: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Builds a measure from `M x dim` row-major atoms.
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("measure dimension must be ≥ 1".into()));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Empty("empirical measure needs at least one complete atom"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("empirical measure atoms must be finite".into()));
        }
        let m = points.len() / dim;
        let mut mean = vec![0.0; dim];
        for atom in points.chunks_exact(dim) {
            for (s, v) in mean.iter_mut().zip(atom) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|s| *s /= m as f64);
        Ok(Self { dim, points, mean })
    }

    /// Point mass at `x`.
    pub fn dirac(x: &[f64]) -> Result<Self> {
        Self::new(x.len(), x.to_vec())
    }

    /// One-dimensional measure from scalar atoms.
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::new(1, xs.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// `∫ u dμ(u)`, cached at construction.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `(1/M) Σ |x_i|²`, i.e. the square of `M₂(μ)`.
    pub fn second_moment(&self) -> f64 {
        self.points.iter().map(|v| v * v).sum::<f64>() / self.len() as f64
    }

    /// Atom-wise projection onto `coords`.
    pub fn marginal(&self, coords: &[usize]) -> Result<EmpiricalMeasure> {
        if coords.is_empty() {
            return Err(Error::Config("marginal needs at least one coordinate".into()));
        }
        if let Some(&bad) = coords.iter().find(|&&c| c >= self.dim) {
            return Err(Error::Index {
                what: "marginal coordinate",
                index: bad,
                limit: self.dim,
            });
        }
        let mut pts = Vec::with_capacity(self.len() * coords.len());
        for atom in self.atoms() {
            pts.extend(coords.iter().map(|&c| atom[c]));
        }
        EmpiricalMeasure::new(coords.len(), pts)
    }

    /// Contiguous coordinate range `start..start+len` as a marginal.
    pub fn block(&self, start: usize, len: usize) -> Result<EmpiricalMeasure> {
        let coords: Vec<usize> = (start..start + len).collect();
        self.marginal(&coords)
    }

    /// Atom multiset in sorted order (1-D only), used for order-free comparison.
    pub fn sorted_scalars(&self) -> Result<Vec<f64>> {
        if self.dim != 1 {
            return Err(Error::Unsupported("sorted_scalars needs a 1-D measure".into()));
        }
        let mut v = self.points.clone();
        v.sort_by(f64::total_cmp);
        Ok(v)
    }
}

/// Second moment of `mu`.
pub fn second_moment(mu: &EmpiricalMeasure) -> f64 {
    mu.second_moment()
}

/// Exact `W₂` between two 1-D measures with the same atom count, via the
/// monotone (sorted) coupling.
pub fn wasserstein2_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() != 1 || nu.dim() != 1 {
        return Err(Error::Unsupported(format!(
            "exact W2 is only available in 1-D (got {} and {})",
            mu.dim(),
            nu.dim()
        )));
    }
    if mu.len() != nu.len() {
        return Err(Error::Unsupported(format!(
            "exact W2 needs equal atom counts (got {} and {})",
            mu.len(),
            nu.len()
        )));
    }
    let a = mu.sorted_scalars()?;
    let b = nu.sorted_scalars()?;
    let ms: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(ms.sqrt())
}

/// Mean-square gap `(1/M) Σ |x_i − y_i|²` under the identity coupling; an
/// upper bound for `W₂²` in any dimension.
pub fn identity_coupling_gap(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() != nu.dim() || mu.len() != nu.len() {
        return Err(Error::Unsupported("identity coupling needs matching shapes".into()));
    }
    let s: f64 = mu
        .points()
        .iter()
        .zip(nu.points())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / mu.len() as f64)
}

/// Maps each θ-atom `(x, y, z, z⁰)` of `xi` to `(x, Λ(θ, μ, 0))`, where `μ`
/// is the state marginal of `xi`. `lambda` evaluates the minimiser.
pub fn pushforward_phi<F>(xi: &EmpiricalMeasure, layout: ThetaLayout, mut lambda: F) -> Result<EmpiricalMeasure>
where
    F: FnMut(&[f64], &EmpiricalMeasure, &mut [f64]) -> Result<()>,
{
    if xi.dim() != layout.theta_len() {
        return Err(Error::Config(format!(
            "θ-measure has dimension {} but the layout expects {}",
            xi.dim(),
            layout.theta_len()
        )));
    }
    let n = layout.n;
    let l = layout.l;
    let mu = xi.block(0, n)?;
    let mut pts = Vec::with_capacity(xi.len() * (n + l));
    let mut a = vec![0.0; l];
    for atom in xi.atoms() {
        lambda(atom, &mu, &mut a)?;
        pts.extend_from_slice(&atom[..n]);
        pts.extend_from_slice(&a);
    }
    EmpiricalMeasure::new(n + l, pts)
}

/// Empirical law of the θ-tuples of one world at node `k`.
pub fn conditional_law(theta: &ThetaPath, world: usize, k: usize) -> Result<EmpiricalMeasure> {
    if world >= theta.worlds() {
        return Err(Error::Index {
            what: "conditional_law world",
            index: world,
            limit: theta.worlds(),
        });
    }
    if theta.particles() == 0 {
        return Err(Error::Empty("world has no particles"));
    }
    if k >= theta.grid().steps() + 1 {
        return Err(Error::Index {
            what: "conditional_law step",
            index: k,
            limit: theta.grid().steps() + 1,
        });
    }
    let layout = theta.layout();
    let mut pts = Vec::with_capacity(theta.particles() * layout.theta_len());
    let mut buf = vec![0.0; layout.theta_len()];
    for p in 0..theta.particles() {
        theta.theta_into(world, p, k, &mut buf);
        pts.extend_from_slice(&buf);
    }
    EmpiricalMeasure::new(layout.theta_len(), pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_moments() {
        assert_eq!(EmpiricalMeasure::from_scalars(&[0.0]).unwrap().second_moment(), 0.0);
        assert_eq!(EmpiricalMeasure::from_scalars(&[-1.0, 1.0]).unwrap().second_moment(), 1.0);
        assert_eq!(EmpiricalMeasure::new(2, vec![3.0, 4.0]).unwrap().second_moment(), 25.0);
    }

    #[test]
    fn w2_examples() {
        let d0 = EmpiricalMeasure::from_scalars(&[0.0]).unwrap();
        let d2 = EmpiricalMeasure::from_scalars(&[2.0]).unwrap();
        assert_eq!(wasserstein2_1d(&d0, &d2).unwrap(), 2.0);
        let mu = EmpiricalMeasure::from_scalars(&[0.3, -1.0, 4.0]).unwrap();
        assert_eq!(wasserstein2_1d(&mu, &mu).unwrap(), 0.0);
    }

    #[test]
    fn w2_two_atoms_matches_best_coupling() {
        // Brute force over the two bijections of two atoms.
        let a = [0.0f64, 1.0];
        let b = [1.0f64, 2.0];
        let perms = [[0usize, 1], [1, 0]];
        let best = perms
            .iter()
            .map(|p| ((a[0] - b[p[0]]).powi(2) + (a[1] - b[p[1]]).powi(2)) / 2.0)
            .fold(f64::INFINITY, f64::min)
            .sqrt();
        assert_eq!(best, 1.0);
        let mu = EmpiricalMeasure::from_scalars(&a).unwrap();
        let nu = EmpiricalMeasure::from_scalars(&b).unwrap();
        assert_eq!(wasserstein2_1d(&mu, &nu).unwrap(), best);
    }

    #[test]
    fn w2_rejects_bad_shapes() {
        let a = EmpiricalMeasure::new(2, vec![0.0, 1.0]).unwrap();
        let b = EmpiricalMeasure::from_scalars(&[0.0, 1.0]).unwrap();
        let c = EmpiricalMeasure::from_scalars(&[0.0]).unwrap();
        assert!(matches!(wasserstein2_1d(&a, &a), Err(Error::Unsupported(_))));
        assert!(matches!(wasserstein2_1d(&b, &c), Err(Error::Unsupported(_))));
    }

    #[test]
    fn marginals() {
        let xi = EmpiricalMeasure::new(2, vec![1.0, 9.0, 2.0, 8.0]).unwrap();
        assert_eq!(xi.marginal(&[0]).unwrap().points(), &[1.0, 2.0]);
        assert_eq!(xi.marginal(&[0, 1]).unwrap(), xi);
        assert!(xi.marginal(&[0]).unwrap().second_moment() <= xi.second_moment());
        assert!(matches!(xi.marginal(&[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn mean_is_cached() {
        let m = EmpiricalMeasure::new(2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(m.mean(), &[2.0, 4.0]);
    }

    #[test]
    fn empty_and_nonfinite_rejected() {
        assert!(EmpiricalMeasure::new(1, vec![]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![f64::NAN]).is_err());
    }
}
