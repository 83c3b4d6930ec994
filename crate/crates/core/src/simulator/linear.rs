//! Monte Carlo on the design model itself.

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;

use super::{factor, normal_vector, policy_control, run_samples, McConfig, McRun, McSetup, Result, SampleOutcome};

/// Closed-loop samples of the linear system the plan was designed on:
///
/// ```text
/// x_{k+1}  = A x_k + B u_k + c + G w + G_exe w_exe     truth
/// ỹ_k      = y_k − (C x̂_k⁻ + c_obs)                    innovation
/// x̂_k      = x̂_k⁻ + L_k ỹ_k,  x̂_{k+1}⁻ = A x̂_k + B u_k + c
/// z_k      = A z_{k−1} + L_k ỹ_k,  z_0 = x̂_0⁻ − x̄_0 + L_0 ỹ_0
/// u_k      = ū_k + K_k z_k
/// ```
pub fn run_linear_mc(setup: &McSetup, cfg: &McConfig) -> Result<McRun> {
    let p_hat0 = factor(&setup.initial.p_hat0);
    let p_tilde0 = factor(&setup.initial.p_tilde0);
    let epochs: Vec<f64> = std::iter::once(0.0)
        .chain(setup.segments.iter().scan(0.0, |t, s| {
            *t += s.dt;
            Some(*t)
        }))
        .collect();
    run_samples(setup, cfg, &epochs, |rng: &mut ChaCha8Rng| {
        let nx = setup.initial.mean.len();
        let n = setup.horizon();
        let mut x_hat_prior = &setup.initial.mean + &p_hat0 * normal_vector(rng, nx);
        let mut x = &x_hat_prior + &p_tilde0 * normal_vector(rng, nx);
        let mut z = DVector::zeros(nx);
        let mut states = Vec::with_capacity(n + 1);
        let mut controls = Vec::with_capacity(n);
        for k in 0..=n {
            let o = &setup.observations[k];
            let y = &o.c * &x + &o.c_obs + &o.d * normal_vector(rng, o.d.ncols());
            let innov = y - (&o.c * &x_hat_prior + &o.c_obs);
            let gain = &setup.schedule.gains[k];
            let x_hat = &x_hat_prior + gain * &innov;
            z = if k == 0 { &x_hat_prior - &setup.initial.mean } else { &setup.segments[k - 1].a * &z } + gain * &innov;
            states.push(x.clone());
            if k == n {
                break;
            }
            let s = &setup.segments[k];
            let u = policy_control(&setup.policy, k, &z);
            x = &s.a * &x + &s.b * &u + &s.c + &s.g * normal_vector(rng, s.g.ncols()) + &s.g_exe * normal_vector(rng, s.g_exe.ncols());
            x_hat_prior = &s.a * x_hat + &s.b * &u + &s.c;
            controls.push(u);
        }
        SampleOutcome { states, controls, failure: None }
    })
}
