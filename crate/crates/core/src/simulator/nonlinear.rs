//! Monte Carlo with the full equations of motion and an extended Kalman
//! filter.

use nalgebra::{DMatrix, DVector, Vector3};
use rand_chacha::ChaCha8Rng;

use super::{
    factor, normal_vector, policy_control, run_samples, McConfig, McRun, McSetup, NonlinearModel, Result,
    SampleOutcome, SimError,
};
use crate::scenarios::ExecutionErrorAt;
use crate::dynamics::{propagate, propagate_segment, Control, ControlType, DynamicsError, State};
use crate::linalg::symmetrize;
use crate::navigation::{joseph_update, kalman_gain};
use crate::uncertainty::gates_matrix;

fn to_state(x: &DVector<f64>) -> State {
    State::from_column_slice(x.as_slice())
}

fn to_dvec(x: &State) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

struct Truth<'a> {
    nl: &'a NonlinearModel,
    substeps: usize,
}

impl Truth<'_> {
    /// Flow over `[t0, t1]` under the applied control. The deterministic
    /// part is integrated to the model tolerances; the white acceleration
    /// enters as a velocity increment `σ_a √h ξ` after each of the sub-steps.
    fn step(&self, rng: &mut ChaCha8Rng, x: State, applied: &Control, t0: f64, t1: f64) -> std::result::Result<State, DynamicsError> {
        let nl = self.nl;
        let h = (t1 - t0) / self.substeps as f64;
        let zoh = nl.model.control_type() == ControlType::ZohContinuous;
        let mut x = x;
        if !zoh {
            let mut v = x.fixed_rows_mut::<3>(3);
            v += applied;
        }
        for i in 0..self.substeps {
            let (a, b) = (t0 + i as f64 * h, t0 + (i + 1) as f64 * h);
            x = if zoh {
                propagate_segment(&nl.model, &x, applied, 0.0, a, b, nl.tolerances)?.state
            } else {
                propagate(&nl.model, &x, a, b, nl.tolerances)?
            };
            let kick = normal_vector(rng, 3) * (nl.noise.sigma_accel * h.sqrt());
            let mut v = x.fixed_rows_mut::<3>(3);
            v += Vector3::from_column_slice(kick.as_slice());
            self.guard(&x, b)?;
        }
        Ok(x)
    }

    fn guard(&self, x: &State, t: f64) -> std::result::Result<(), DynamicsError> {
        if let (Some(r), Some(d)) = (self.nl.impact_radius, self.nl.model.body_distance(x)) {
            if d < r {
                return Err(DynamicsError::SingularRadius { radius: d, t });
            }
        }
        Ok(())
    }
}

/// Closed-loop samples with nonlinear truth. The filter is an EKF whose
/// Jacobians are taken along its own estimate; its innovations drive the
/// z-process through the design transitions and gains, so the feedback
/// stays the affine map of innovations the planner optimized. Execution
/// errors follow the Gates model at the reference or commanded control.
pub fn run_nonlinear_mc(setup: &McSetup, nl: &NonlinearModel, cfg: &McConfig) -> Result<McRun> {
    if nl.epochs.len() != setup.horizon() + 1 {
        return Err(SimError::Invalid("truth epochs disagree with the horizon".into()));
    }
    let p_hat0 = factor(&setup.initial.p_hat0);
    let p_tilde0 = factor(&setup.initial.p_tilde0);
    let truth = Truth { nl, substeps: cfg.substeps };
    run_samples(setup, cfg, &nl.epochs, |rng: &mut ChaCha8Rng| {
        let nx = setup.initial.mean.len();
        let n = setup.horizon();
        let mut x_hat_prior = &setup.initial.mean + &p_hat0 * normal_vector(rng, nx);
        let mut x = &x_hat_prior + &p_tilde0 * normal_vector(rng, nx);
        let mut p_prior = setup.initial.p_tilde0.clone();
        let mut z = DVector::zeros(nx);
        let mut states = Vec::with_capacity(n + 1);
        let mut controls = Vec::with_capacity(n);
        let fail = |states: Vec<DVector<f64>>, controls, e: String| SampleOutcome { states, controls, failure: Some(e) };
        if let Err(e) = truth.guard(&to_state(&x), nl.epochs[0]) {
            return fail(states, controls, e.to_string());
        }
        for k in 0..=n {
            let xs = to_state(&x);
            let xh = to_state(&x_hat_prior);
            let y = nl.observation.eval(&xs) + nl.observation.noise_factor(&xs) * normal_vector(rng, nl.observation.dim());
            let innov = y - nl.observation.eval(&xh);
            let (gain, p_post) = if setup.schedule.measured[k] {
                let c = nl.observation.jacobian(&xh);
                let d = nl.observation.noise_factor(&xh);
                let Some(gain) = kalman_gain(&p_prior, &c, &d) else {
                    return fail(states, controls, format!("singular innovation covariance at node {k}"));
                };
                let p = joseph_update(&p_prior, &gain, &c, &d);
                (gain, p)
            } else {
                (DMatrix::zeros(nx, innov.len()), p_prior.clone())
            };
            let correction = &gain * &innov;
            let x_hat = &x_hat_prior + &correction;
            // z advances on the design transition and gain; only the
            // innovation comes from the nonlinear filter.
            z = if k == 0 { &x_hat_prior - &setup.initial.mean } else { &setup.segments[k - 1].a * &z }
                + &setup.schedule.gains[k] * &innov;
            states.push(x.clone());
            if k == n {
                break;
            }

            let u = policy_control(&setup.policy, k, &z);
            let u3 = Control::from_column_slice(u.as_slice());
            let (t0, t1) = (nl.epochs[k], nl.epochs[k + 1]);
            let at = match nl.execution_error {
                ExecutionErrorAt::Reference => nl.reference_controls.get(k).copied().unwrap_or_else(Control::zeros),
                ExecutionErrorAt::Commanded => u3,
            };
            let g_exe = if setup.policy.maneuver_mask[k] { gates_matrix(&at, &nl.gates) } else { nalgebra::Matrix3::zeros() };
            let applied = u3 + g_exe * Vector3::from_column_slice(normal_vector(rng, 3).as_slice());
            match truth.step(rng, xs, &applied, t0, t1) {
                Ok(next) => x = to_dvec(&next),
                Err(e) => return fail(states, controls, format!("node {k}: {e}")),
            }

            let seg = match propagate_segment(&nl.model, &to_state(&x_hat), &u3, nl.noise.sigma_accel, t0, t1, nl.tolerances) {
                Ok(s) => s,
                Err(e) => return fail(states, controls, format!("filter propagation at node {k}: {e}")),
            };
            let phi = DMatrix::from_column_slice(6, 6, seg.stm.as_slice());
            let be = seg.input * g_exe;
            let be = DMatrix::from_column_slice(6, 3, be.as_slice());
            let q = DMatrix::from_column_slice(6, 6, seg.process_cov.as_slice());
            p_prior = symmetrize(&(&phi * &p_post * phi.transpose() + &be * be.transpose() + q));
            x_hat_prior = to_dvec(&seg.state);
            controls.push(u);
        }
        SampleOutcome { states, controls, failure: None }
    })
}
