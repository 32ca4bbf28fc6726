//! Deterministic moment equations under a multivariate Gaussian closure.
//!
//! Three tiers, from rough to faithful:
//!
//! * `Circuit`: means only, with the linearized rate `U_j / (q^2 R_j^0)` --
//!   the junction voltage drives the charge like an RC network.
//! * `Variance`: adds the electron-number covariance `D`; rate expectations
//!   are Taylor series in the number fluctuations with Gaussian (Isserlis)
//!   moments, truncated at a configurable total order.
//! * `Full`: additionally evolves the mechanical second moments and the
//!   number-position correlations, with first-order covariance closures for
//!   the position factor `K_j`.
//!
//! Cross-shuttle covariances are not evolved; their instantaneous growth
//! rates are available as a validity diagnostic.

use crate::device::{DeviceConstants, ShuttleParams, Q_E, T_MAT};
use crate::drive::DriveWaveform;
use crate::tunneling::{phi_derivatives, position_factor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Circuit,
    Variance,
    Full,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tier::Circuit => write!(f, "circuit"),
            Tier::Variance => write!(f, "variance"),
            Tier::Full => write!(f, "full"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    ImprovedEuler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosureConfig {
    pub tier: Tier,
    /// Moment truncation order `l1 + l2 <= order`; even, between 2 and 8.
    pub order: usize,
    pub integrator: Integrator,
    pub steps_per_period: usize,
    /// Recorded phases per period; must divide `steps_per_period`.
    pub bins: usize,
    /// Relative per-period change below which the state counts as periodic.
    pub tol: f64,
    pub max_periods: u32,
}

impl Default for ClosureConfig {
    fn default() -> Self {
        ClosureConfig {
            tier: Tier::Full,
            order: 4,
            integrator: Integrator::Rk4,
            steps_per_period: 2000,
            bins: 64,
            tol: 1e-6,
            max_periods: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MomentError {
    BadConfig(String),
    /// A Cauchy-Schwarz or positivity bound failed: the closure broke down
    /// (typically near mechanical resonance).
    ClosureBreakdown { bound: String, t: f64 },
}

impl std::fmt::Display for MomentError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MomentError::BadConfig(m) => write!(f, "invalid closure config: {m}"),
            MomentError::ClosureBreakdown { bound, t } => {
                write!(f, "closure breakdown at t = {t:.6e} s: {bound}")
            }
        }
    }
}

impl std::error::Error for MomentError {}

/// Means and second moments evolved by the deterministic models.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MomentState {
    pub n: [f64; 2],
    pub x: [f64; 2],
    pub v: [f64; 2],
    /// Electron-number covariance: `[D11, D22, D12]`.
    pub d: [f64; 3],
    /// Position variances.
    pub lam: [f64; 2],
    /// Velocity variances.
    pub w: [f64; 2],
    /// Cov[x_s, v_s].
    pub sig: [f64; 2],
    /// Cov[x_s, n_s].
    pub xn: [f64; 2],
    /// Cov[v_s, n_s].
    pub yn: [f64; 2],
}

pub const STATE_LEN: usize = 19;

impl MomentState {
    pub fn to_array(self) -> [f64; STATE_LEN] {
        [
            self.n[0], self.n[1], self.x[0], self.x[1], self.v[0], self.v[1], self.d[0],
            self.d[1], self.d[2], self.lam[0], self.lam[1], self.w[0], self.w[1], self.sig[0],
            self.sig[1], self.xn[0], self.xn[1], self.yn[0], self.yn[1],
        ]
    }

    pub fn from_array(a: [f64; STATE_LEN]) -> Self {
        MomentState {
            n: [a[0], a[1]],
            x: [a[2], a[3]],
            v: [a[4], a[5]],
            d: [a[6], a[7], a[8]],
            lam: [a[9], a[10]],
            w: [a[11], a[12]],
            sig: [a[13], a[14]],
            xn: [a[15], a[16]],
            yn: [a[17], a[18]],
        }
    }

    pub fn field_name(i: usize) -> &'static str {
        [
            "n1", "n2", "x1", "x2", "v1", "v2", "D11", "D22", "D12", "Lam1", "Lam2", "W1", "W2",
            "Sig1", "Sig2", "X1", "X2", "Y1", "Y2",
        ][i]
    }

    /// Initial condition: gate-mapped means, everything else at rest.
    pub fn initial(consts: &DeviceConstants, params: &ShuttleParams) -> Self {
        MomentState {
            n: consts.gate_offset(params),
            ..Default::default()
        }
    }
}

const MAX_ORDER: usize = 8;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

fn double_factorial(n: i64) -> f64 {
    if n <= 0 {
        1.0
    } else {
        let mut v = n;
        let mut acc = 1.0;
        while v > 0 {
            acc *= v as f64;
            v -= 2;
        }
        acc
    }
}

/// Central mixed moment `<dn1^l1 dn2^l2>` of a bivariate Gaussian with
/// covariance `(d11, d22, d12)`.
pub fn isserlis_moment(l1: usize, l2: usize, d11: f64, d22: f64, d12: f64) -> f64 {
    if (l1 + l2) % 2 == 1 {
        return 0.0;
    }
    let lm = l1.min(l2) / 2;
    let f1 = factorial(l1);
    let f2 = factorial(l2);
    let mut acc = 0.0;
    if l1 % 2 == 0 {
        // both even
        for k in 0..=lm {
            let p1 = l1 / 2 - k;
            let p2 = l2 / 2 - k;
            acc += f1 * f2 * d11.powi(p1 as i32) * d22.powi(p2 as i32)
                / (double_factorial(l1 as i64 - 2 * k as i64)
                    * double_factorial(l2 as i64 - 2 * k as i64))
                * d12.powi(2 * k as i32)
                / factorial(2 * k);
        }
    } else {
        // both odd
        for k in 0..=lm {
            let p1 = (l1 - 1) / 2 - k;
            let p2 = (l2 - 1) / 2 - k;
            acc += f1 * f2 * d11.powi(p1 as i32) * d22.powi(p2 as i32)
                / (double_factorial(l1 as i64 - 1 - 2 * k as i64)
                    * double_factorial(l2 as i64 - 1 - 2 * k as i64))
                * d12.powi(2 * k as i32 + 1)
                / factorial(2 * k + 1);
        }
    }
    acc
}

/// Expected rates and companions for one junction under the Gaussian closure.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RateMoments {
    /// `<Gamma_j^+>` and `<Gamma_j^->` over the number distribution (the
    /// position factor K is applied by the caller).
    pub plus: f64,
    pub minus: f64,
    /// `<Gamma_j> = <Gamma^+> - <Gamma^->`.
    pub net: f64,
    /// `<Gamma_j^*> = <Gamma^+> + <Gamma^->`.
    pub star: f64,
    /// `<Gamma_j (n_s - <n_s>)>` per shuttle.
    pub gdn: [f64; 2],
    /// `g_js = <d Gamma_j / d n_s>` per shuttle.
    pub g: [f64; 2],
}

/// Kernel derivatives with the optional `(1 + beta U^2)` conductance factor
/// folded in by the product rule.
fn kernel_derivs(u: f64, theta: f64, beta: f64, max_order: usize, out: &mut [f64]) {
    phi_derivatives(u, theta, max_order, out);
    if beta != 0.0 {
        let base: Vec<f64> = out[..=max_order].to_vec();
        for l in 0..=max_order {
            let mut v = (1.0 + beta * u * u) * base[l];
            if l >= 1 {
                v += 2.0 * l as f64 * beta * u * base[l - 1];
            }
            if l >= 2 {
                v += (l * (l - 1)) as f64 * beta * base[l - 2];
            }
            out[l] = v;
        }
    }
}

/// Taylor-with-Gaussian-moments expectation of the junction-`j` rates around
/// the current means. `perturbed_at_mean` selects whether the free energies
/// carry the first-order position correction evaluated at `<x>`.
#[allow(clippy::too_many_arguments)]
pub fn rate_expectation(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    state: &MomentState,
    t: f64,
    j: usize,
    order: usize,
    perturbed_at_mean: bool,
) -> RateMoments {
    let v = drive.voltage(t);
    let theta = params.thermal_energy();
    let offset = consts.gate_offset(params);
    let mut up = consts.u_unperturbed(state.n, offset, v, j, crate::device::Dir::Forward);
    let mut um = consts.u_unperturbed(state.n, offset, v, j, crate::device::Dir::Backward);
    if perturbed_at_mean {
        let c = consts.u_perturb_coeff(params, state.n, v, j);
        let e = consts.u_perturb_even(j);
        let cx = c[0] * state.x[0] + c[1] * state.x[1];
        let ex = e[0] * state.x[0] + e[1] * state.x[1];
        up += cx + ex;
        um += -cx + ex;
    }
    let beta = params.beta.map(|b| b[j]).unwrap_or(0.0);
    let mut yp = [0.0; MAX_ORDER + 2];
    let mut ym = [0.0; MAX_ORDER + 2];
    kernel_derivs(up, theta, beta, order + 1, &mut yp);
    kernel_derivs(um, theta, beta, order + 1, &mut ym);

    let e1 = consts.e_theta[j][0];
    let e2 = consts.e_theta[j][1];
    let inv_q2r = 1.0 / (Q_E * Q_E * params.r0[j]);
    let [d11, d22, d12] = state.d;

    // Moment table up to order + 1 (the dn series needs one extra).
    let mut m = [[0.0f64; MAX_ORDER + 2]; MAX_ORDER + 2];
    for (l1, row) in m.iter_mut().enumerate().take(order + 2) {
        for (l2, cell) in row.iter_mut().enumerate().take(order + 2 - l1) {
            *cell = isserlis_moment(l1, l2, d11, d22, d12);
        }
    }

    let mut plus = 0.0;
    let mut minus = 0.0;
    let mut plus_dn = [0.0; 2];
    let mut minus_dn = [0.0; 2];
    let mut dphi_p = 0.0; // <Phi'(U+)>
    let mut dphi_m = 0.0;
    for l1 in 0..=order {
        for l2 in 0..=(order - l1) {
            let l = l1 + l2;
            let sign = if l % 2 == 0 { 1.0 } else { -1.0 }; // (-1)^l for '+'
            let coeff =
                e1.powi(l1 as i32) * e2.powi(l2 as i32) / (factorial(l1) * factorial(l2));
            plus += sign * coeff * yp[l] * m[l1][l2];
            minus += coeff * ym[l] * m[l1][l2]; // (+1)^l
            plus_dn[0] += sign * coeff * yp[l] * m[l1 + 1][l2];
            plus_dn[1] += sign * coeff * yp[l] * m[l1][l2 + 1];
            minus_dn[0] += coeff * ym[l] * m[l1 + 1][l2];
            minus_dn[1] += coeff * ym[l] * m[l1][l2 + 1];
            dphi_p += sign * coeff * yp[l + 1] * m[l1][l2];
            dphi_m += coeff * ym[l + 1] * m[l1][l2];
        }
    }
    plus *= inv_q2r;
    minus *= inv_q2r;
    for s in 0..2 {
        plus_dn[s] *= inv_q2r;
        minus_dn[s] *= inv_q2r;
    }
    let es = [e1, e2];
    RateMoments {
        plus,
        minus,
        net: plus - minus,
        star: plus + minus,
        gdn: [plus_dn[0] - minus_dn[0], plus_dn[1] - minus_dn[1]],
        g: [
            -es[0] * inv_q2r * (dphi_p + dphi_m),
            -es[1] * inv_q2r * (dphi_p + dphi_m),
        ],
    }
}

/// Mean force including the exact Gaussian correction from the quadratic
/// charge terms.
fn mean_force(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    state: &MomentState,
    v: f64,
) -> [f64; 2] {
    let mut f = consts.force_at_voltage(params, state.n, v);
    let [d11, d22, d12] = state.d;
    for s in 0..2 {
        let f0 = &consts.f0[s];
        f[s] += f0[0][0] * d11 + (f0[0][1] + f0[1][0]) * d12 + f0[1][1] * d22;
    }
    f
}

/// `<F_s (n_s - <n_s>)>`, exact for the quadratic force.
fn force_number_cov(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    state: &MomentState,
    v: f64,
    s: usize,
) -> f64 {
    let f0 = &consts.f0[s];
    let mut grad = [
        2.0 * (f0[0][0] * state.n[0] + f0[0][1] * state.n[1]) + Q_E * v * consts.alpha[s][0],
        2.0 * (f0[1][0] * state.n[0] + f0[1][1] * state.n[1]) + Q_E * v * consts.alpha[s][1],
    ];
    if consts.gates > 0 && !params.n_gate.is_empty() {
        let fg_ng = consts.fg[s].mul_col_vec(&params.n_gate);
        grad[0] += fg_ng[0];
        grad[1] += fg_ng[1];
    }
    let d_col = if s == 0 {
        [state.d[0], state.d[2]]
    } else {
        [state.d[2], state.d[1]]
    };
    grad[0] * d_col[0] + grad[1] * d_col[1]
}

fn mech_mean_derivs(
    params: &ShuttleParams,
    state: &MomentState,
    force: [f64; 2],
    out: &mut MomentState,
) {
    for s in 0..2 {
        let x = state.x[s];
        out.x[s] = state.v[s];
        out.v[s] = -params.gamma[s] * state.v[s]
            - params.omega[s] * params.omega[s] * x
            - params.k2[s] * (x * x + state.lam[s])
            - params.k3[s] * (x * x * x + 3.0 * x * state.lam[s])
            + force[s] / params.mass[s];
    }
}

/// Means-only tier: linearized rates, equations of motion for the means.
pub fn circuit_rhs(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    state: &MomentState,
    t: f64,
) -> MomentState {
    let v = drive.voltage(t);
    let offset = consts.gate_offset(params);
    let mut out = MomentState::default();
    for j in 0..3 {
        let k = position_factor(state.x, j, &params.lambda);
        let m = [state.n[0] - offset[0], state.n[1] - offset[1]];
        let u_j = Q_E * consts.kappa[j] * v
            - (m[0] * consts.e_theta[j][0] + m[1] * consts.e_theta[j][1]);
        let gamma = k * u_j / (Q_E * Q_E * params.r0[j]);
        out.n[0] += T_MAT[j][0] * gamma;
        out.n[1] += T_MAT[j][1] * gamma;
    }
    let f = consts.force_at_voltage(params, state.n, v);
    mech_mean_derivs(params, state, f, &mut out);
    out
}

/// Variance tier: means plus the electron-number covariance.
pub fn variance_rhs(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    state: &MomentState,
    t: f64,
    order: usize,
) -> MomentState {
    let v = drive.voltage(t);
    let mut out = MomentState::default();
    for j in 0..3 {
        let k = position_factor(state.x, j, &params.lambda);
        let rm = rate_expectation(consts, params, drive, state, t, j, order, true);
        let t1 = T_MAT[j][0];
        let t2 = T_MAT[j][1];
        out.n[0] += t1 * k * rm.net;
        out.n[1] += t2 * k * rm.net;
        out.d[0] += 2.0 * t1 * k * rm.gdn[0] + t1 * t1 * k * rm.star;
        out.d[1] += 2.0 * t2 * k * rm.gdn[1] + t2 * t2 * k * rm.star;
        out.d[2] += t2 * k * rm.gdn[0] + t1 * k * rm.gdn[1] + t1 * t2 * k * rm.star;
    }
    let f = mean_force(consts, params, state, v);
    mech_mean_derivs(params, state, f, &mut out);
    out
}

/// Full tier: adds the mechanical second moments and the number-position
/// correlations with the first-order covariance closures.
pub fn full_rhs(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    state: &MomentState,
    t: f64,
    order: usize,
) -> MomentState {
    let v = drive.voltage(t);
    let mut out = MomentState::default();
    for j in 0..3 {
        let t1 = T_MAT[j][0];
        let t2 = T_MAT[j][1];
        let ts = [t1, t2];
        let lam_j = params.lambda[j];
        // <K_j> with the exact lognormal variance factor.
        let quad = t1 * t1 * state.lam[0] + t2 * t2 * state.lam[1];
        let k_mean =
            position_factor(state.x, j, &params.lambda) * (quad / (2.0 * lam_j * lam_j)).exp();
        let rm = rate_expectation(consts, params, drive, state, t, j, order, true);
        // G_j: the K-Gamma covariance collapses onto the X correlations.
        let g_j =
            rm.net - (rm.g[0] * t1 * state.xn[0] + rm.g[1] * t2 * state.xn[1]) / lam_j;
        out.n[0] += t1 * k_mean * g_j;
        out.n[1] += t2 * k_mean * g_j;
        // <Gamma_j (n_s - <n_s>)> with its K-covariance correction.
        let gdn_corr = [
            k_mean * (rm.gdn[0] - (t1 / lam_j) * rm.net * state.xn[0]),
            k_mean * (rm.gdn[1] - (t2 / lam_j) * rm.net * state.xn[1]),
        ];
        out.d[0] += 2.0 * t1 * gdn_corr[0] + t1 * t1 * k_mean * rm.star;
        out.d[1] += 2.0 * t2 * gdn_corr[1] + t2 * t2 * k_mean * rm.star;
        out.d[2] += t2 * gdn_corr[0] + t1 * gdn_corr[1] + t1 * t2 * k_mean * rm.star;
        for s in 0..2 {
            out.xn[s] += ts[s]
                * k_mean
                * (rm.g[s] * state.xn[s] - (ts[s] / lam_j) * g_j * state.lam[s]);
            out.yn[s] += ts[s]
                * k_mean
                * (rm.g[s] * state.yn[s] - (ts[s] / lam_j) * g_j * state.sig[s]);
        }
    }
    let f = mean_force(consts, params, state, v);
    mech_mean_derivs(params, state, f, &mut out);
    for s in 0..2 {
        let fslope = consts.force_n_derivative(params, state.n, s, v);
        out.lam[s] = 2.0 * state.sig[s];
        out.w[s] = 2.0
            * (-params.gamma[s] * state.w[s]
                - params.omega[s] * params.omega[s] * state.sig[s]
                + state.yn[s] * fslope / params.mass[s]);
        out.sig[s] = state.w[s]
            - params.gamma[s] * state.sig[s]
            - params.omega[s] * params.omega[s] * state.lam[s]
            + state.xn[s] * fslope / params.mass[s];
        out.xn[s] += state.yn[s];
        out.yn[s] += -params.gamma[s] * state.yn[s]
            - params.omega[s] * params.omega[s] * state.xn[s]
            + force_number_cov(consts, params, state, v, s) / params.mass[s];
    }
    out
}

/// Tier dispatch.
pub fn rhs(
    tier: Tier,
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    state: &MomentState,
    t: f64,
    order: usize,
) -> MomentState {
    match tier {
        Tier::Circuit => circuit_rhs(consts, params, drive, state, t),
        Tier::Variance => variance_rhs(consts, params, drive, state, t, order),
        Tier::Full => full_rhs(consts, params, drive, state, t, order),
    }
}

/// Expected net and one-way-sum junction rates as the given tier sees them.
pub fn expected_gamma(
    tier: Tier,
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    state: &MomentState,
    t: f64,
    order: usize,
) -> ([f64; 3], [f64; 3]) {
    let v = drive.voltage(t);
    let offset = consts.gate_offset(params);
    let mut net = [0.0; 3];
    let mut star = [0.0; 3];
    for j in 0..3 {
        match tier {
            Tier::Circuit => {
                let k = position_factor(state.x, j, &params.lambda);
                let m = [state.n[0] - offset[0], state.n[1] - offset[1]];
                let u_j = Q_E * consts.kappa[j] * v
                    - (m[0] * consts.e_theta[j][0] + m[1] * consts.e_theta[j][1]);
                net[j] = k * u_j / (Q_E * Q_E * params.r0[j]);
                star[j] = net[j].abs();
            }
            Tier::Variance => {
                let k = position_factor(state.x, j, &params.lambda);
                let rm = rate_expectation(consts, params, drive, state, t, j, order, true);
                net[j] = k * rm.net;
                star[j] = k * rm.star;
            }
            Tier::Full => {
                let t1 = T_MAT[j][0];
                let t2 = T_MAT[j][1];
                let lam_j = params.lambda[j];
                let quad = t1 * t1 * state.lam[0] + t2 * t2 * state.lam[1];
                let k_mean = position_factor(state.x, j, &params.lambda)
                    * (quad / (2.0 * lam_j * lam_j)).exp();
                let rm = rate_expectation(consts, params, drive, state, t, j, order, true);
                let g_j =
                    rm.net - (rm.g[0] * t1 * state.xn[0] + rm.g[1] * t2 * state.xn[1]) / lam_j;
                net[j] = k_mean * g_j;
                star[j] = k_mean * rm.star;
            }
        }
    }
    (net, star)
}

/// Instantaneous growth rates of the neglected cross-shuttle covariances,
/// evaluated as if they are currently zero. Values large against
/// `gamma x (kept covariances)` mean the single-shuttle closure is suspect.
pub fn cross_covariance_growth(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    state: &MomentState,
    t: f64,
) -> CrossCovGrowth {
    let v = drive.voltage(t);
    let grad = |s: usize| -> [f64; 2] {
        let f0 = &consts.f0[s];
        let mut g = [
            2.0 * (f0[0][0] * state.n[0] + f0[0][1] * state.n[1]) + Q_E * v * consts.alpha[s][0],
            2.0 * (f0[1][0] * state.n[0] + f0[1][1] * state.n[1]) + Q_E * v * consts.alpha[s][1],
        ];
        if consts.gates > 0 && !params.n_gate.is_empty() {
            let fg_ng = consts.fg[s].mul_col_vec(&params.n_gate);
            g[0] += fg_ng[0];
            g[1] += fg_ng[1];
        }
        g
    };
    let g1 = grad(0);
    let g2 = grad(1);
    // The only first-order sources with cross-covariances currently at zero
    // are the force gradients against the same-shuttle correlations.
    let dx1v2 = g2[0] * state.xn[0] / params.mass[1];
    let dx2v1 = g1[1] * state.xn[1] / params.mass[0];
    let dv1v2 = g1[1] * state.yn[1] / params.mass[0] + g2[0] * state.yn[0] / params.mass[1];
    CrossCovGrowth {
        d_cov_x1x2: 0.0,
        d_cov_x1v2: dx1v2,
        d_cov_x2v1: dx2v1,
        d_cov_v1v2: dv1v2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossCovGrowth {
    pub d_cov_x1x2: f64,
    pub d_cov_x1v2: f64,
    pub d_cov_x2v1: f64,
    pub d_cov_v1v2: f64,
}

/// Phase-resolved trajectory of the final period.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTrajectory {
    pub tier: Tier,
    pub bins: usize,
    pub period: f64,
    pub t_grid: Vec<f64>,
    pub states: Vec<MomentState>,
    pub gamma_net: [Vec<f64>; 3],
    pub gamma_star: [Vec<f64>; 3],
    pub current: Vec<f64>,
    pub i_dc: [f64; 3],
    pub converged: bool,
    pub periods_run: u32,
}

/// Integrate from the default initial condition to the periodic steady state.
pub fn integrate(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    cfg: &ClosureConfig,
) -> Result<MomentTrajectory, MomentError> {
    integrate_from(
        consts,
        params,
        drive,
        cfg,
        MomentState::initial(consts, params),
    )
}

fn check_bounds(state: &MomentState, t: f64) -> Result<(), MomentError> {
    if state.to_array().iter().any(|v| !v.is_finite()) {
        return Err(MomentError::ClosureBreakdown {
            bound: "non-finite state".into(),
            t,
        });
    }
    let eps = 1e-9;
    let names = ["D11", "D22", "Lam1", "Lam2", "W1", "W2"];
    let vals = [
        state.d[0], state.d[1], state.lam[0], state.lam[1], state.w[0], state.w[1],
    ];
    let scale = vals.iter().fold(1e-300f64, |a, &b| a.max(b.abs()));
    for (name, val) in names.iter().zip(vals) {
        if val < -eps * scale {
            return Err(MomentError::ClosureBreakdown {
                bound: format!("{name} = {val:.3e} < 0"),
                t,
            });
        }
    }
    let slack = 1.0 + 1e-6;
    let pairs: [(&str, f64, f64, f64); 7] = [
        ("D12^2 <= D11 D22", state.d[2], state.d[0], state.d[1]),
        ("Sig1^2 <= Lam1 W1", state.sig[0], state.lam[0], state.w[0]),
        ("Sig2^2 <= Lam2 W2", state.sig[1], state.lam[1], state.w[1]),
        ("X1^2 <= Lam1 D11", state.xn[0], state.lam[0], state.d[0]),
        ("X2^2 <= Lam2 D22", state.xn[1], state.lam[1], state.d[1]),
        ("Y1^2 <= W1 D11", state.yn[0], state.w[0], state.d[0]),
        ("Y2^2 <= W2 D22", state.yn[1], state.w[1], state.d[1]),
    ];
    for (name, c, a, b) in pairs {
        let lim = (a.max(0.0) * b.max(0.0)) * slack * slack;
        if c * c > lim + eps * (c * c + a * a + b * b) + 1e-300 {
            return Err(MomentError::ClosureBreakdown {
                bound: format!("{name} violated ({c:.3e})"),
                t,
            });
        }
    }
    Ok(())
}

/// Integrate from a caller-supplied state.
pub fn integrate_from(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    cfg: &ClosureConfig,
    initial: MomentState,
) -> Result<MomentTrajectory, MomentError> {
    if cfg.order < 2 || cfg.order > MAX_ORDER || cfg.order % 2 != 0 {
        return Err(MomentError::BadConfig(
            "order must be even and within 2..=8".into(),
        ));
    }
    if cfg.steps_per_period == 0 || cfg.bins == 0 || cfg.steps_per_period % cfg.bins != 0 {
        return Err(MomentError::BadConfig(
            "steps_per_period must be a positive multiple of bins".into(),
        ));
    }
    params
        .validate()
        .map_err(|e| MomentError::BadConfig(e.to_string()))?;
    let period = drive.period();
    let h = period / cfg.steps_per_period as f64;
    let mut state = initial;
    let mut converged = false;
    let mut consecutive = 0u32;
    let mut periods_run = 0u32;
    let mut prev = state.to_array();
    let mut scale = [0.0f64; STATE_LEN];

    let f = |y: &MomentState, t: f64| rhs(cfg.tier, consts, params, drive, y, t, cfg.order);
    let advance = |y: &MomentState, t: f64| -> MomentState {
        let ya = y.to_array();
        match cfg.integrator {
            Integrator::Euler => {
                let k1 = f(y, t).to_array();
                let mut out = ya;
                for i in 0..STATE_LEN {
                    out[i] += h * k1[i];
                }
                MomentState::from_array(out)
            }
            Integrator::ImprovedEuler => {
                let k1 = f(y, t).to_array();
                let mut mid = ya;
                for i in 0..STATE_LEN {
                    mid[i] += h * k1[i];
                }
                let k2 = f(&MomentState::from_array(mid), t + h).to_array();
                let mut out = ya;
                for i in 0..STATE_LEN {
                    out[i] += 0.5 * h * (k1[i] + k2[i]);
                }
                MomentState::from_array(out)
            }
            Integrator::Rk4 => {
                let k1 = f(y, t).to_array();
                let mut s2 = ya;
                for i in 0..STATE_LEN {
                    s2[i] += 0.5 * h * k1[i];
                }
                let k2 = f(&MomentState::from_array(s2), t + 0.5 * h).to_array();
                let mut s3 = ya;
                for i in 0..STATE_LEN {
                    s3[i] += 0.5 * h * k2[i];
                }
                let k3 = f(&MomentState::from_array(s3), t + 0.5 * h).to_array();
                let mut s4 = ya;
                for i in 0..STATE_LEN {
                    s4[i] += h * k3[i];
                }
                let k4 = f(&MomentState::from_array(s4), t + h).to_array();
                let mut out = ya;
                for i in 0..STATE_LEN {
                    out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                MomentState::from_array(out)
            }
        }
    };

    check_bounds(&state, 0.0)?;
    for period_idx in 0..cfg.max_periods {
        for s in scale.iter_mut() {
            *s = 0.0;
        }
        for step in 0..cfg.steps_per_period {
            let t = step as f64 * h;
            state = advance(&state, t);
            let arr = state.to_array();
            for i in 0..STATE_LEN {
                scale[i] = scale[i].max(arr[i].abs());
            }
            if step % 64 == 0 {
                check_bounds(&state, period_idx as f64 * period + t + h)?;
            }
        }
        check_bounds(&state, (period_idx + 1) as f64 * period)?;
        periods_run = period_idx + 1;
        let arr = state.to_array();
        let mut worst = 0.0f64;
        for i in 0..STATE_LEN {
            if scale[i] > 0.0 {
                worst = worst.max((arr[i] - prev[i]).abs() / scale[i]);
            }
        }
        prev = arr;
        if worst < cfg.tol {
            consecutive += 1;
            if consecutive >= 2 {
                converged = true;
                break;
            }
        } else {
            consecutive = 0;
        }
    }

    // Record the final period phase-resolved.
    let bins = cfg.bins;
    let steps_per_bin = cfg.steps_per_period / bins;
    let mut states = Vec::with_capacity(bins);
    let mut gamma_net: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; bins]);
    let mut gamma_star: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; bins]);
    let mut current = vec![0.0; bins];
    for step in 0..cfg.steps_per_period {
        let t = step as f64 * h;
        if step % steps_per_bin == 0 {
            let bin = step / steps_per_bin;
            states.push(state);
            let (net, star) = expected_gamma(cfg.tier, consts, params, drive, &state, t, cfg.order);
            let mut tun = 0.0;
            for j in 0..3 {
                gamma_net[j][bin] = net[j];
                gamma_star[j][bin] = star[j];
                tun += consts.kappa[j] * net[j];
            }
            current[bin] = consts.c0 * drive.dv_dt(t) + Q_E * tun;
        }
        state = advance(&state, t);
    }
    let mut i_dc = [0.0; 3];
    for j in 0..3 {
        i_dc[j] = Q_E * gamma_net[j].iter().sum::<f64>() / bins as f64;
    }
    let t_grid = (0..bins)
        .map(|b| b as f64 * period / bins as f64)
        .collect();

    Ok(MomentTrajectory {
        tier: cfg.tier,
        bins,
        period,
        t_grid,
        states,
        gamma_net,
        gamma_star,
        current,
        i_dc,
        converged,
        periods_run,
    })
}
