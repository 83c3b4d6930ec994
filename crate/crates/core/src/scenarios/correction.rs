//! Single-shooting correction of symmetric periodic orbits in the CR3BP.
//!
//! A state on the x–z plane with velocity along y is periodic when the next
//! y = 0 crossing is perpendicular (ẋ = ż = 0). With z₀ held fixed, Newton's
//! method adjusts (x₀, ẏ₀) to zero (ẋ, ż) at the half-period crossing.

use nalgebra::{Matrix2, Vector2};

use super::ScenarioError;
use crate::dynamics::{find_plane_crossing, DynamicsModel, State, Tolerances};

/// Refined periodic orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicOrbit {
    pub state: State,
    pub period: f64,
    /// Crossing residual `max(|ẋ|, |ż|)` after each Newton step, starting
    /// with the guess.
    pub residuals: Vec<f64>,
}

const MAX_ITERS: usize = 50;
const STALL_WINDOW: usize = 5;

fn crossing(model: &DynamicsModel, x0: &State, tol: Tolerances) -> Result<(f64, State, nalgebra::Matrix6<f64>), ScenarioError> {
    // Skip the departure from the plane before looking for the next crossing.
    find_plane_crossing(model, x0, 0.0, 0.05, 20.0, tol).map_err(|e| ScenarioError::Correction(e.to_string()))
}

pub fn differential_correct_nrho(model: &DynamicsModel, guess: &State, tol: f64) -> Result<PeriodicOrbit, ScenarioError> {
    if guess[1].abs() > 1e-12 || guess[3].abs() > 1e-12 || guess[5].abs() > 1e-12 {
        return Err(ScenarioError::Correction("guess must lie on the x–z plane with velocity along y".into()));
    }
    let ptol = Tolerances { rtol: 1e-13, atol: 1e-14, max_steps: 5_000_000 };
    let mut x = *guess;
    let mut residuals = Vec::new();
    for _ in 0..MAX_ITERS {
        let (tc, xc, phi) = crossing(model, &x, ptol)?;
        let r = Vector2::new(xc[3], xc[5]);
        let norm = r.amax();
        residuals.push(norm);
        if norm < tol {
            return Ok(PeriodicOrbit { state: x, period: 2.0 * tc, residuals });
        }
        if residuals.len() > STALL_WINDOW {
            let earlier = residuals[residuals.len() - 1 - STALL_WINDOW];
            if norm > earlier / 10.0 {
                return Err(ScenarioError::Correction(format!(
                    "Newton stalled: residual {norm:e} after {} steps",
                    residuals.len() - 1
                )));
            }
        }
        // Crossing-time variation removes the ẏ_c-weighted y sensitivity.
        let f = model.drift(&xc, tc).map_err(|e| ScenarioError::Correction(e.to_string()))?;
        let jac = Matrix2::new(
            phi[(3, 0)] - f[3] / xc[4] * phi[(1, 0)],
            phi[(3, 4)] - f[3] / xc[4] * phi[(1, 4)],
            phi[(5, 0)] - f[5] / xc[4] * phi[(1, 0)],
            phi[(5, 4)] - f[5] / xc[4] * phi[(1, 4)],
        );
        let step = jac
            .lu()
            .solve(&(-r))
            .ok_or_else(|| ScenarioError::Correction("singular crossing Jacobian".into()))?;
        x[0] += step[0];
        x[4] += step[1];
    }
    Err(ScenarioError::Correction(format!("no convergence in {MAX_ITERS} iterations")))
}
