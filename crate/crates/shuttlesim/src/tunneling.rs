//! Tunneling rates of the orthodox model.
//!
//! The kernel is `Phi(U) = U / (1 - exp(-U/kT))`; a junction rate is
//! `Phi(U) / (q^2 R0)` times the position factor `K_j(x) = exp(-x.T_j / lambda_j)`.
//! `Phi` and its first several derivatives feed the Gaussian moment closures,
//! so both are evaluated here with care around `U = 0` and for large `|U|`.

use crate::device::{DeviceConstants, Dir, ShuttleParams, Q_E, T_MAT};
use crate::drive::DriveWaveform;

#[derive(Debug, Clone, PartialEq)]
pub enum TunnelError {
    NonFiniteEnergy(f64),
    NonPositive(&'static str),
}

impl std::fmt::Display for TunnelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TunnelError::NonFiniteEnergy(u) => write!(f, "non-finite free energy {u}"),
            TunnelError::NonPositive(what) => write!(f, "`{what}` must be positive"),
        }
    }
}

impl std::error::Error for TunnelError {}

/// Switch point between the small-`|u|` series and the direct formula,
/// in units of `U/kT`. The fourth-order series keeps the relative error
/// below 1e-12 on its side of the switch.
const SERIES_SWITCH: f64 = 1e-3;

/// `Phi(U)` in joules. `theta = k_B T`.
#[inline]
pub fn phi(u: f64, theta: f64) -> f64 {
    let z = u / theta;
    if z.abs() < SERIES_SWITCH {
        let z2 = z * z;
        theta * (1.0 + 0.5 * z + z2 / 12.0 - z2 * z2 / 720.0)
    } else if z > 0.0 {
        u / (-(-z).exp_m1())
    } else {
        phi_negative(u, z)
    }
}

// For moderate z < 0 the detailed-balance rearrangement
// Phi(u) = u (1 + w) / w with w = expm1(z) needs a single transcendental;
// below z ~ -16 the 1 + w sum absorbs, so the explicit e^z form takes over.
#[inline]
fn phi_negative(u: f64, z: f64) -> f64 {
    if z > -16.0 {
        let w = z.exp_m1();
        u * (1.0 + w) / w
    } else {
        let ez = z.exp();
        if ez == 0.0 {
            0.0
        } else {
            u * ez / z.exp_m1()
        }
    }
}

/// Tunneling rate in events per second; `Err` on non-finite input energy.
#[inline]
pub fn rate(u: f64, r0: f64, temperature: f64, beta: Option<f64>) -> Result<f64, TunnelError> {
    if !u.is_finite() {
        return Err(TunnelError::NonFiniteEnergy(u));
    }
    if !(r0 > 0.0) {
        return Err(TunnelError::NonPositive("r0"));
    }
    if !(temperature > 0.0) {
        return Err(TunnelError::NonPositive("temperature"));
    }
    Ok(rate_unchecked(u, r0, K_B_T(temperature), beta))
}

#[allow(non_snake_case)]
#[inline]
fn K_B_T(temperature: f64) -> f64 {
    crate::device::K_B * temperature
}

/// Hot-path rate evaluation; inputs validated by the caller.
#[inline]
pub fn rate_unchecked(u: f64, r0: f64, theta: f64, beta: Option<f64>) -> f64 {
    let z = u / theta;
    let phi_val = if z.abs() < SERIES_SWITCH {
        let z2 = z * z;
        theta * (1.0 + 0.5 * z + z2 / 12.0 - z2 * z2 / 720.0)
    } else if z > 0.0 {
        u / (-(-z).exp_m1())
    } else {
        phi_negative(u, z)
    };
    let nl = match beta {
        Some(b) if b != 0.0 => 1.0 + b * u * u,
        _ => 1.0,
    };
    nl * phi_val / (Q_E * Q_E * r0)
}

/// `K_j(x) = exp(-x . T_j / lambda_j)`.
#[inline]
pub fn position_factor(x: [f64; 2], j: usize, lambda: &[f64; 3]) -> f64 {
    let tj = T_MAT[j];
    (-(x[0] * tj[0] + x[1] * tj[1]) / lambda[j]).exp()
}

/// Forward and backward rates for all three junctions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSet {
    pub plus: [f64; 3],
    pub minus: [f64; 3],
}

impl RateSet {
    /// Net rate `Gamma_j = Gamma_j^+ - Gamma_j^-`.
    pub fn net(&self, j: usize) -> f64 {
        self.plus[j] - self.minus[j]
    }

    /// One-way sum `Gamma_j^* = Gamma_j^+ + Gamma_j^-`.
    pub fn one_way_sum(&self, j: usize) -> f64 {
        self.plus[j] + self.minus[j]
    }

    /// Total event rate over all junctions and directions.
    pub fn total(&self) -> f64 {
        self.plus.iter().sum::<f64>() + self.minus.iter().sum::<f64>()
    }
}

/// All six rates at state `(n, x)` and time `t`.
///
/// `perturbed_u` selects whether the free energies carry the first-order
/// position correction (the stochastic samplers want it; the circuit model
/// does not).
pub fn full_rates(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    n: [f64; 2],
    x: [f64; 2],
    t: f64,
    drive: &DriveWaveform,
    perturbed_u: bool,
) -> Result<RateSet, TunnelError> {
    let v = drive.voltage(t);
    let offset = consts.gate_offset(params);
    let theta = params.thermal_energy();
    let mut plus = [0.0; 3];
    let mut minus = [0.0; 3];
    for j in 0..3 {
        let k = position_factor(x, j, &params.lambda);
        let beta = params.beta.map(|b| b[j]);
        for dir in [Dir::Forward, Dir::Backward] {
            let mut u = consts.u_unperturbed(n, offset, v, j, dir);
            if perturbed_u {
                let c = consts.u_perturb_coeff(params, n, v, j);
                let e = consts.u_perturb_even(j);
                u += dir.sign() * (c[0] * x[0] + c[1] * x[1]) + e[0] * x[0] + e[1] * x[1];
            }
            if !u.is_finite() {
                return Err(TunnelError::NonFiniteEnergy(u));
            }
            let g = k * rate_unchecked(u, params.r0[j], theta, beta);
            match dir {
                Dir::Forward => plus[j] = g,
                Dir::Backward => minus[j] = g,
            }
        }
    }
    Ok(RateSet { plus, minus })
}

/// Maximum number of kernel derivatives the moment engine may request.
pub const MAX_PHI_DERIVS: usize = 12;

/// Writes `out[l] = Y_l(U) = d^l Phi / dU^l` for `l = 0..=max_order`.
///
/// Uses the Bernoulli series near zero and truncated Taylor-series arithmetic
/// on the closed form elsewhere; the two agree to ~1e-12 at the seam.
pub fn phi_derivatives(u: f64, theta: f64, max_order: usize, out: &mut [f64]) {
    assert!(max_order < MAX_PHI_DERIVS);
    assert!(out.len() > max_order);
    let z = u / theta;
    let k = max_order;
    let mut q = [0.0f64; MAX_PHI_DERIVS + 1];
    if z.abs() < 0.5 {
        series_derivs(z, k, &mut q);
    } else {
        closed_form_derivs(z, k, &mut q);
    }
    // Y_l has units of theta^(1-l): Phi = theta * phi(U/theta).
    let mut scale = theta;
    for l in 0..=k {
        out[l] = q[l] * scale * factorial(l);
        scale /= theta;
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Bernoulli-series coefficients of `phi(z) = z/(1-e^-z)`:
/// `phi = 1 + z/2 + sum B_2k z^2k/(2k)!`.
const PHI_COEFFS: [f64; 26] = {
    // B_2k / (2k)! for 2k = 2..=24, interleaved with zeros for odd powers.
    let b: [f64; 12] = [
        1.0 / 6.0,
        -1.0 / 30.0,
        1.0 / 42.0,
        -1.0 / 30.0,
        5.0 / 66.0,
        -691.0 / 2730.0,
        7.0 / 6.0,
        -3617.0 / 510.0,
        43867.0 / 798.0,
        -174611.0 / 330.0,
        854513.0 / 138.0,
        -236364091.0 / 2730.0,
    ];
    let mut c = [0.0; 26];
    c[0] = 1.0;
    c[1] = 0.5;
    let mut k = 1usize;
    let mut fact = 1.0f64; // (2k)!
    while k <= 12 {
        fact *= ((2 * k - 1) * (2 * k)) as f64;
        c[2 * k] = b[k - 1] / fact;
        k += 1;
    }
    c
};

/// Taylor coefficients of `phi(z + eps)` from the Bernoulli series.
fn series_derivs(z: f64, max_order: usize, q: &mut [f64; MAX_PHI_DERIVS + 1]) {
    for (l, slot) in q.iter_mut().enumerate().take(max_order + 1) {
        // q[l] = phi^(l)(z)/l! = sum_m C(m, l) c_m z^(m-l)
        let mut acc = 0.0;
        let mut zp = 1.0;
        for m in l..PHI_COEFFS.len() {
            let c = PHI_COEFFS[m];
            if c != 0.0 {
                acc += c * binomial(m, l) * zp;
            }
            zp *= z;
        }
        *slot = acc;
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r *= (n - i) as f64 / (k - i) as f64;
    }
    r
}

/// Taylor coefficients of `phi(z + eps)` by power-series division on the
/// closed form, branch-split to stay overflow- and cancellation-free.
fn closed_form_derivs(z: f64, max_order: usize, q: &mut [f64; MAX_PHI_DERIVS + 1]) {
    let k = max_order;
    let mut num = [0.0f64; MAX_PHI_DERIVS + 1];
    let mut den = [0.0f64; MAX_PHI_DERIVS + 1];
    if z > 0.0 {
        // phi = (z+eps) / (1 - e^-z e^-eps)
        let w = (-z).exp();
        num[0] = z;
        if k >= 1 {
            num[1] = 1.0;
        }
        den[0] = -(-z).exp_m1();
        let mut f = 1.0;
        for (l, d) in den.iter_mut().enumerate().take(k + 1).skip(1) {
            f *= -1.0 / l as f64;
            *d = -w * f;
        }
    } else {
        // phi = (z+eps) e^(z+eps) / (e^(z+eps) - 1)
        let u0 = z.exp();
        num[0] = z * u0;
        for l in 1..=k {
            // coefficient of eps^l in (z+eps) e^(z+eps)
            num[l] = u0 * (z / factorial(l) + 1.0 / factorial(l - 1));
        }
        den[0] = z.exp_m1();
        let mut fact = 1.0;
        for (l, d) in den.iter_mut().enumerate().take(k + 1).skip(1) {
            fact *= l as f64;
            *d = u0 / fact;
        }
    }
    // q = num / den as power series.
    for l in 0..=k {
        let mut acc = num[l];
        for i in 1..=l {
            acc -= den[i] * q[l - i];
        }
        q[l] = acc / den[0];
    }
}
