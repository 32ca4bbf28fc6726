//! Damped driven oscillator dynamics of the two nanopillars.

use crate::device::{DeviceError, ShuttleParams, K_B};
use crate::rng::Xoshiro256;

/// Instantaneous mechanical state of both shuttles.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MechState {
    pub x: [f64; 2],
    pub v: [f64; 2],
}

impl MechState {
    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.v).all(|v| v.is_finite())
    }
}

/// One semi-implicit (velocity-first) Euler step with the force held fixed.
///
/// `v' = v + dt (-gamma v - w^2 x - k2 x^2 - k3 x^3 + F/m)`, then
/// `x' = x + dt v'`. Matches the stochastic sampler's step size and keeps the
/// oscillation amplitude from drifting over many periods.
pub fn step(
    state: MechState,
    force: [f64; 2],
    params: &ShuttleParams,
    dt: f64,
) -> Result<MechState, DeviceError> {
    if !(dt > 0.0) {
        return Err(DeviceError::NonPositive("dt"));
    }
    Ok(step_unchecked(state, force, params, dt))
}

#[inline]
pub fn step_unchecked(
    state: MechState,
    force: [f64; 2],
    params: &ShuttleParams,
    dt: f64,
) -> MechState {
    let mut out = state;
    for s in 0..2 {
        let x = state.x[s];
        let accel = -params.gamma[s] * state.v[s]
            - params.omega[s] * params.omega[s] * x
            - params.k2[s] * x * x
            - params.k3[s] * x * x * x
            + force[s] / params.mass[s];
        out.v[s] = state.v[s] + dt * accel;
        out.x[s] = state.x[s] + dt * out.v[s];
    }
    out
}

/// Step with an additive thermal velocity kick of variance
/// `2 gamma k_B T dt / m` per shuttle.
#[inline]
pub fn step_with_noise(
    state: MechState,
    force: [f64; 2],
    params: &ShuttleParams,
    dt: f64,
    rng: &mut Xoshiro256,
) -> MechState {
    let mut out = step_unchecked(state, force, params, dt);
    for s in 0..2 {
        let sigma =
            (2.0 * params.gamma[s] * K_B * params.temperature * dt / params.mass[s]).sqrt();
        out.v[s] += sigma * rng.next_normal();
    }
    out
}

/// Classic fourth-order Runge-Kutta step, for the deterministic mean
/// mechanics inside the moment and lattice solvers. `force(t)` is sampled at
/// the stage times.
pub fn rk4_step<F: FnMut(f64) -> [f64; 2]>(
    state: MechState,
    params: &ShuttleParams,
    t: f64,
    dt: f64,
    mut force: F,
) -> MechState {
    let deriv = |st: &MechState, f: [f64; 2]| -> [f64; 4] {
        let mut d = [0.0; 4];
        for s in 0..2 {
            let x = st.x[s];
            d[s] = st.v[s];
            d[2 + s] = -params.gamma[s] * st.v[s]
                - params.omega[s] * params.omega[s] * x
                - params.k2[s] * x * x
                - params.k3[s] * x * x * x
                + f[s] / params.mass[s];
        }
        d
    };
    let apply = |st: &MechState, d: &[f64; 4], h: f64| MechState {
        x: [st.x[0] + h * d[0], st.x[1] + h * d[1]],
        v: [st.v[0] + h * d[2], st.v[1] + h * d[3]],
    };
    let f0 = force(t);
    let k1 = deriv(&state, f0);
    let fm = force(t + 0.5 * dt);
    let k2 = deriv(&apply(&state, &k1, 0.5 * dt), fm);
    let k3 = deriv(&apply(&state, &k2, 0.5 * dt), fm);
    let f1 = force(t + dt);
    let k4 = deriv(&apply(&state, &k3, dt), f1);
    MechState {
        x: [
            state.x[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            state.x[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ],
        v: [
            state.v[0] + dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
            state.v[1] + dt / 6.0 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
        ],
    }
}

/// Steady-state response of one shuttle to a sinusoidal force
/// `F0 sin(w t + psi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyState {
    /// Displacement amplitude (m).
    pub amplitude: f64,
    /// Phase lag of x(t) behind the force (radians, in [0, pi)).
    pub phase_lag: f64,
    /// Damped eigenfrequency `w' = sqrt(w0^2 - gamma^2/4)`.
    pub omega_damped: f64,
    /// Transient phase constant `phi = atan(gamma / 2 w')`.
    pub phi: f64,
}

/// Closed-form steady state of the damped driven oscillator, used as the
/// integrator oracle. Rejects overdamped pillars, for which the damped
/// frequency would be imaginary.
pub fn steady_state_oracle(
    force_amplitude: f64,
    omega_drive: f64,
    params: &ShuttleParams,
    shuttle: usize,
) -> Result<SteadyState, DeviceError> {
    let w0 = params.omega[shuttle];
    let gamma = params.gamma[shuttle];
    let m = params.mass[shuttle];
    if gamma >= 2.0 * w0 {
        return Err(DeviceError::NonPositive("omega' (pillar is overdamped)"));
    }
    let omega_damped = (w0 * w0 - 0.25 * gamma * gamma).sqrt();
    let phi = (gamma / (2.0 * omega_damped)).atan();
    let denom = {
        let a = w0 * w0 - omega_drive * omega_drive;
        let b = gamma * omega_drive;
        (a * a + b * b).sqrt()
    };
    let amplitude = force_amplitude / (m * denom);
    let phase_lag = (gamma * omega_drive).atan2(w0 * w0 - omega_drive * omega_drive);
    Ok(SteadyState {
        amplitude,
        phase_lag,
        omega_damped,
        phi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn params(q: f64) -> ShuttleParams {
        let mut p = presets::params_default();
        p.gamma = [p.omega[0] / q, p.omega[1] / q];
        p
    }

    #[test]
    fn origin_is_fixed_point() {
        let p = params(50.0);
        let mut st = MechState::default();
        for _ in 0..1000 {
            st = step(st, [0.0, 0.0], &p, 1e-11).unwrap();
        }
        assert_eq!(st, MechState::default());
    }

    #[test]
    fn rejects_nonpositive_dt() {
        let p = params(50.0);
        assert!(step(MechState::default(), [0.0; 2], &p, 0.0).is_err());
        assert!(step(MechState::default(), [0.0; 2], &p, -1e-12).is_err());
    }

    #[test]
    fn free_decay_envelope_slope() {
        // ln(peak amplitude) decays linearly with slope -gamma/2.
        let p = params(40.0);
        let w0 = p.omega[0];
        let dt = 2.0 * std::f64::consts::PI / w0 / 2000.0;
        let st = MechState {
            x: [1e-10, 0.0],
            v: [0.0, 0.0],
        };
        let mut peaks: Vec<(f64, f64)> = Vec::new();
        let mut prev = st;
        let steps = (2000.0 * 30.0) as usize;
        for k in 0..steps {
            let next = step(prev, [0.0, 0.0], &p, dt).unwrap();
            // peak when velocity changes sign from + to -
            if prev.v[0] > 0.0 && next.v[0] <= 0.0 {
                peaks.push((k as f64 * dt, next.x[0].abs()));
            }
            prev = next;
        }
        assert!(peaks.len() > 20);
        let (t0, a0) = peaks[2];
        let (t1, a1) = peaks[peaks.len() - 3];
        let slope = (a1.ln() - a0.ln()) / (t1 - t0);
        let expect = -0.5 * p.gamma[0];
        assert!(
            (slope - expect).abs() < 0.02 * expect.abs(),
            "slope {slope} expected {expect}"
        );
    }

    #[test]
    fn energy_decays_monotonically_per_period() {
        let p = params(25.0);
        let w0 = p.omega[0];
        let steps_per_period = 2000;
        let dt = 2.0 * std::f64::consts::PI / w0 / steps_per_period as f64;
        let mut st = MechState {
            x: [5e-11, 0.0],
            v: [1.0e-2, 0.0],
        };
        let energy = |s: &MechState| {
            0.5 * p.mass[0] * s.v[0] * s.v[0] + 0.5 * p.mass[0] * w0 * w0 * s.x[0] * s.x[0]
        };
        let mut prev_e = energy(&st);
        for _ in 0..40 {
            for _ in 0..steps_per_period {
                st = step(st, [0.0, 0.0], &p, dt).unwrap();
            }
            let e = energy(&st);
            assert!(e < prev_e, "energy not decaying per period");
            prev_e = e;
        }
    }

    #[test]
    fn driven_amplitude_matches_closed_form() {
        // 0.1% agreement at dt = T/1000 on an off-resonant drive.
        let p = params(30.0);
        let w = 0.5 * p.omega[0];
        let f0 = 1e-15;
        let oracle = steady_state_oracle(f0, w, &p, 0).unwrap();
        let dt = 2.0 * std::f64::consts::PI / w / 1000.0;
        let mut st = MechState::default();
        let periods_burn = 60; // several 1/gamma
        let mut t = 0.0;
        for _ in 0..periods_burn * 1000 {
            st = step_unchecked(st, [f0 * (w * t).sin(), 0.0], &p, dt);
            t += dt;
        }
        let mut amp: f64 = 0.0;
        for _ in 0..2000 {
            st = step_unchecked(st, [f0 * (w * t).sin(), 0.0], &p, dt);
            t += dt;
            amp = amp.max(st.x[0].abs());
        }
        let rel = (amp - oracle.amplitude).abs() / oracle.amplitude;
        assert!(rel < 1e-3, "rel {rel}");
    }

    #[test]
    fn oracle_resonant_scaling() {
        let q = 5000.0;
        let p = params(q);
        let w0 = p.omega[0];
        let f0 = 1e-16;
        let ss = steady_state_oracle(f0, w0, &p, 0).unwrap();
        let expect = f0 * q / (p.mass[0] * w0 * w0);
        assert!((ss.amplitude - expect).abs() < 1e-6 * expect);
        assert!((ss.phase_lag - std::f64::consts::FRAC_PI_2).abs() < 1e-3);
        // F -> 0 gives zero amplitude
        let zero = steady_state_oracle(0.0, w0, &p, 0).unwrap();
        assert_eq!(zero.amplitude, 0.0);
    }

    #[test]
    fn oracle_rejects_overdamped() {
        let mut p = params(10.0);
        p.gamma = [3.0 * p.omega[0], 3.0 * p.omega[1]];
        assert!(steady_state_oracle(1e-15, 1e8, &p, 0).is_err());
    }

    #[test]
    fn oracle_consistent_with_integrator_after_burn_in() {
        // 0.5% agreement after 20 Q periods of burn-in.
        let q = 15.0;
        let p = params(q);
        let w = 0.8 * p.omega[0];
        let f0 = 2e-15;
        let oracle = steady_state_oracle(f0, w, &p, 0).unwrap();
        let steps = 1500usize;
        let dt = 2.0 * std::f64::consts::PI / w / steps as f64;
        let mut st = MechState::default();
        let mut t = 0.0;
        let burn = (20.0 * q) as usize + 1;
        for _ in 0..burn * steps {
            st = step_unchecked(st, [f0 * (w * t).sin(), 0.0], &p, dt);
            t += dt;
        }
        let mut amp: f64 = 0.0;
        for _ in 0..steps {
            st = step_unchecked(st, [f0 * (w * t).sin(), 0.0], &p, dt);
            t += dt;
            amp = amp.max(st.x[0].abs());
        }
        assert!(
            (amp - oracle.amplitude).abs() < 5e-3 * oracle.amplitude,
            "amp {amp} oracle {}",
            oracle.amplitude
        );
    }

    #[test]
    fn step_is_deterministic() {
        let p = params(12.0);
        let run = || {
            let mut st = MechState {
                x: [1e-11, -2e-11],
                v: [0.3, -0.1],
            };
            for k in 0..5000 {
                let f = [1e-15 * ((k as f64) * 0.01).sin(), 0.0];
                st = step_unchecked(st, f, &p, 7e-12);
            }
            st
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn rk4_matches_semi_implicit_in_the_limit() {
        let p = params(20.0);
        let w = 0.6 * p.omega[0];
        let f = |t: f64| [3e-15 * (w * t).sin(), 1e-15 * (w * t).cos()];
        let dt = 2.0 * std::f64::consts::PI / w / 4000.0;
        let mut a = MechState::default();
        let mut b = MechState::default();
        let mut t = 0.0;
        for _ in 0..8000 {
            a = step_unchecked(a, f(t), &p, dt);
            b = rk4_step(b, &p, t, dt, f);
            t += dt;
        }
        for s in 0..2 {
            let scale = b.x[s].abs().max(1e-18);
            assert!((a.x[s] - b.x[s]).abs() < 2e-2 * scale);
        }
    }
}
