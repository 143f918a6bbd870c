use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::LqCoefficients;
use crate::stochastic::TimeGrid;

/// Backward Riccati sweep of the Euler-discretised deterministic LQ problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    /// `K_k`, `k = 0..=K`.
    pub k: Vec<DMatrix<f64>>,
    /// Feedback gains, `α_k = −gain_k x_k`, `k = 0..K`.
    pub gain: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    /// `½ x₀ᵀ K₀ x₀`.
    pub fn value(&self, x0: &[f64]) -> f64 {
        let x = nalgebra::DVector::from_column_slice(x0);
        0.5 * (x.transpose() * &self.k[0] * &x)[(0, 0)]
    }

    /// `K_k x`, the adjoint of the state at node `k`.
    pub fn adjoint(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let v = &self.k[k] * nalgebra::DVector::from_column_slice(x);
        v.iter().copied().collect()
    }

    /// `−gain_k x`.
    pub fn control(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let v = -(&self.gain[k] * nalgebra::DVector::from_column_slice(x));
        v.iter().copied().collect()
    }
}

/// Requires `C = D = C⁰ = D⁰ = 0`, `Q̄ = S = P̄ = 0` and `c₂ = 0`. With
/// `K' = K_{k+1}`,
///
/// ```text
/// K_k = Q dt + K' + (AᵀK' + K'A) dt − K'B c₁ (P + dt c₁² BᵀK'B)⁻¹ c₁ BᵀK' dt
/// gain_k = (P + dt c₁² BᵀK'B)⁻¹ c₁ BᵀK' (I + A dt)
/// ```
///
/// and `K_K = Q_T`. The gain is the exact minimiser of the discrete
/// problem's one-step cost-to-go.
pub fn riccati_oracle(lq: &LqCoefficients, grid: &TimeGrid) -> Result<RiccatiSolution> {
    if !lq.is_deterministic_single_agent() {
        return Err(Error::Unsupported(
            "the Riccati oracle needs C = D = C⁰ = D⁰ = 0, Q̄ = S = P̄ = 0 and c₂ = 0".into(),
        ));
    }
    let steps = grid.steps();
    let dt = grid.dt();
    let c1 = lq.c1;
    let n = lq.dims.n;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut ks = vec![lq.q_terminal.clone(); steps + 1];
    let mut gains = Vec::with_capacity(steps);
    for k in (0..steps).rev() {
        let kp = &ks[k + 1];
        let (a, b, q, p) = (lq.a.at(k), lq.b.at(k), lq.q.at(k), lq.p.at(k));
        let m = p + b.transpose() * kp * b * (dt * c1 * c1);
        let m_inv = m
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Unsupported("P + dt c₁² BᵀKB is singular".into()))?;
        let kb = kp * b * c1;
        let next = q * dt + kp + (a.transpose() * kp + kp * a) * dt - &kb * &m_inv * kb.transpose() * dt;
        gains.push(&m_inv * kb.transpose() * (&eye + a * dt));
        ks[k] = next;
    }
    gains.reverse();
    Ok(RiccatiSolution { k: ks, gain: gains })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScalarLq;

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 50).unwrap()
    }

    #[test]
    fn no_dynamics_integrates_the_running_cost() {
        let lq = ScalarLq {
            q: 0.7,
            q_terminal: 1.3,
            p: 1.0,
            c1: 1.0,
            ..Default::default()
        };
        let g = grid();
        let sol = riccati_oracle(&lq.into(), &g).unwrap();
        for k in 0..=g.steps() {
            let expect = 1.3 + 0.7 * (g.horizon() - g.time(k));
            assert!((sol.k[k][(0, 0)] - expect).abs() < 1e-12);
        }
        assert!(sol.gain.iter().all(|m| m[(0, 0)] == 0.0));
    }

    #[test]
    fn terminal_cost_only() {
        let lq = ScalarLq {
            q: 0.0,
            q_terminal: 2.0,
            p: 1.0,
            c1: 1.0,
            ..Default::default()
        };
        let sol = riccati_oracle(&lq.into(), &grid()).unwrap();
        assert!(sol.k.iter().all(|m| m[(0, 0)] == 2.0));
        assert_eq!(sol.value(&[3.0]), 9.0);
    }

    #[test]
    fn tracks_the_continuous_riccati_equation() {
        let lq = ScalarLq {
            b: 1.0,
            q: 1.0,
            p: 1.0,
            c1: 1.0,
            q_terminal: 1.0,
            ..Default::default()
        };
        let g = grid();
        let sol = riccati_oracle(&lq.into(), &g).unwrap();
        // −K' = Q − K², K(1) = 1, backwards by RK4 on a fine grid.
        let rhs = |k: f64| k * k - 1.0;
        let (mut k, h) = (1.0f64, 1e-5);
        for _ in 0..100_000 {
            let k1 = rhs(k);
            let k2 = rhs(k - 0.5 * h * k1);
            let k3 = rhs(k - 0.5 * h * k2);
            let k4 = rhs(k - h * k3);
            k -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((sol.k[0][(0, 0)] - k).abs() <= 2.0 * g.dt(), "{} vs {k}", sol.k[0][(0, 0)]);
        assert!(sol.k.iter().all(|m| m[(0, 0)] > 0.0));
    }

    #[test]
    fn noisy_models_are_unsupported() {
        let lq = ScalarLq {
            c: 0.1,
            p: 1.0,
            c1: 1.0,
            ..Default::default()
        };
        assert!(matches!(riccati_oracle(&lq.into(), &grid()), Err(Error::Unsupported(_))));
    }
}
