//! Truncated method-of-lines solver for the marginal electron-number master
//! equation, coupled to the mean mechanics.
//!
//! The distribution over `(n1, n2)` lives on a rectangular lattice; gains and
//! losses are realized by neighbor indexing and flux leaving the lattice is
//! dropped and monitored. Away from mechanical resonance this is the
//! high-accuracy reference the sampler and the moment closures are validated
//! against.

use crate::device::{DeviceConstants, ShuttleParams, Q_E, T_MAT_I};
use crate::drive::DriveWaveform;
use crate::mechanics::MechState;

#[derive(Debug, Clone, PartialEq)]
pub enum MasterError {
    /// Probability mass on the lattice edge exceeded the configured limit;
    /// the truncation window is too small.
    BoundaryMass { t: f64, mass: f64, limit: f64 },
    NonFinite { t: f64 },
    BadConfig(String),
}

impl std::fmt::Display for MasterError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MasterError::BoundaryMass { t, mass, limit } => write!(
                f,
                "boundary mass {mass:.3e} exceeded limit {limit:.1e} at t = {t:.6e} s; enlarge the lattice"
            ),
            MasterError::NonFinite { t } => write!(f, "non-finite lattice state at t = {t:.6e} s"),
            MasterError::BadConfig(m) => write!(f, "invalid master-equation config: {m}"),
        }
    }
}

impl std::error::Error for MasterError {}

/// Rectangular truncation window for the electron-number lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeBounds {
    pub n_min: [i64; 2],
    pub n_max: [i64; 2],
}

impl LatticeBounds {
    pub fn centered(center: [i64; 2], halfwidth: i64) -> Self {
        LatticeBounds {
            n_min: [center[0] - halfwidth, center[1] - halfwidth],
            n_max: [center[0] + halfwidth, center[1] + halfwidth],
        }
    }

    pub fn len(&self) -> [usize; 2] {
        [
            (self.n_max[0] - self.n_min[0] + 1) as usize,
            (self.n_max[1] - self.n_min[1] + 1) as usize,
        ]
    }

    pub fn sites(&self) -> usize {
        let l = self.len();
        l[0] * l[1]
    }

    pub fn index(&self, n: [i64; 2]) -> Option<usize> {
        if n[0] < self.n_min[0]
            || n[0] > self.n_max[0]
            || n[1] < self.n_min[1]
            || n[1] > self.n_max[1]
        {
            return None;
        }
        let l = self.len();
        Some(((n[0] - self.n_min[0]) as usize) * l[1] + (n[1] - self.n_min[1]) as usize)
    }

    pub fn site(&self, idx: usize) -> [i64; 2] {
        let l = self.len();
        [
            self.n_min[0] + (idx / l[1]) as i64,
            self.n_min[1] + (idx % l[1]) as i64,
        ]
    }

    pub fn contains(&self, n: [i64; 2]) -> bool {
        self.index(n).is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterConfig {
    /// RK4 steps per drive period.
    pub steps_per_period: usize,
    /// Recorded phases per period; must divide `steps_per_period`.
    pub bins: usize,
    pub max_periods: u32,
    /// Total-variation tolerance for declaring the periodic steady state.
    pub tol: f64,
    pub frozen_mechanics: bool,
    pub perturbed_u: bool,
    /// Largest tolerated probability mass on the lattice edge.
    pub boundary_mass_limit: f64,
    /// Renormalize the distribution at every period boundary.
    pub renormalize: bool,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            steps_per_period: 2000,
            bins: 64,
            max_periods: 500,
            tol: 1e-12,
            frozen_mechanics: false,
            perturbed_u: true,
            boundary_mass_limit: 1e-6,
            renormalize: true,
        }
    }
}

/// Phase-resolved solution of the marginal master equation.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterResult {
    pub bounds: LatticeBounds,
    pub bins: usize,
    pub period: f64,
    pub t_grid: Vec<f64>,
    /// Lattice distribution at each recorded phase of the final period.
    pub pdfs: Vec<Vec<f64>>,
    pub mean_n: [Vec<f64>; 2],
    pub var_n: [Vec<f64>; 2],
    pub cov_n12: Vec<f64>,
    pub mean_x: [Vec<f64>; 2],
    pub mean_v: [Vec<f64>; 2],
    /// Instantaneous expected net and one-way-sum rates per junction.
    pub gamma_net: [Vec<f64>; 3],
    pub gamma_star: [Vec<f64>; 3],
    pub current: Vec<f64>,
    pub i_dc: [f64; 3],
    pub converged: bool,
    pub periods_run: u32,
    /// Largest edge mass seen during the run.
    pub boundary_mass_max: f64,
    /// Largest |1 - sum P| observed at a period boundary before renormalizing.
    pub conservation_drift_max: f64,
    /// Largest |x . T_j| / lambda_j excursion: validity diagnostic for
    /// evaluating the rates at the mean position only.
    pub k_excursion: f64,
}

/// Position- and time-independent per-site tables.
struct SiteTables {
    /// `edot[site * 3 + j] = e_theta_j . (n - n_G B)`.
    edot: Vec<f64>,
    /// n-dependent part of the odd position-perturbation coefficients.
    wdot: Vec<f64>, // site * 6 + j * 2 + s
    gate_c: [[f64; 2]; 3],
    /// Force decomposition `F_s = quad[site][s] + V * lin[site][s]`.
    quad: Vec<f64>, // site * 2 + s
    lin: Vec<f64>,  // site * 2 + s
}

fn build_site_tables(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    bounds: &LatticeBounds,
) -> SiteTables {
    let sites = bounds.sites();
    let offset = consts.gate_offset(params);
    let mut edot = vec![0.0; sites * 3];
    let mut wdot = vec![0.0; sites * 6];
    let mut quad = vec![0.0; sites * 2];
    let mut lin = vec![0.0; sites * 2];
    let mut gate_c = [[0.0; 2]; 3];
    for (j, g) in gate_c.iter_mut().enumerate() {
        *g = consts.u_perturb_coeff(params, [0.0, 0.0], 0.0, j);
    }
    for idx in 0..sites {
        let n = bounds.site(idx);
        let nf = [n[0] as f64, n[1] as f64];
        let m = [nf[0] - offset[0], nf[1] - offset[1]];
        for j in 0..3 {
            edot[idx * 3 + j] = consts.e_theta[j][0] * m[0] + consts.e_theta[j][1] * m[1];
            for s in 0..2 {
                wdot[idx * 6 + j * 2 + s] =
                    nf[0] * consts.u_x_n_coef[j][s][0] + nf[1] * consts.u_x_n_coef[j][s][1];
            }
        }
        let f0 = consts.force_at_voltage(params, nf, 0.0);
        let f1 = consts.force_at_voltage(params, nf, 1.0);
        for s in 0..2 {
            quad[idx * 2 + s] = f0[s];
            lin[idx * 2 + s] = f1[s] - f0[s];
        }
    }
    SiteTables {
        edot,
        wdot,
        gate_c,
        quad,
        lin,
    }
}

/// Applies the tunneling generator at `(x, t)` to `p`, writing `dp` and
/// returning the probability flux dropped at the lattice boundary. When
/// `gamma_out` is given it receives the expected one-way rates per junction.
#[allow(clippy::too_many_arguments)]
fn apply_generator(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    bounds: &LatticeBounds,
    tables: &SiteTables,
    v: f64,
    x: [f64; 2],
    perturbed: bool,
    p: &[f64],
    dp: &mut [f64],
    gamma_out: Option<&mut [[f64; 2]; 3]>,
) -> f64 {
    let sites = bounds.sites();
    let theta = params.thermal_energy();
    for d in dp.iter_mut() {
        *d = 0.0;
    }
    let kfac = [
        (-(x[0]) / params.lambda[0]).exp(),
        (-(x[1] - x[0]) / params.lambda[1]).exp(),
        (x[1] / params.lambda[2]).exp(),
    ];
    let beta = params.beta.unwrap_or([0.0; 3]);
    let mut leaked = 0.0;
    let mut gamma_acc = [[0.0; 2]; 3];
    for idx in 0..sites {
        let pn = p[idx];
        if pn == 0.0 {
            continue;
        }
        let n = bounds.site(idx);
        for j in 0..3 {
            let base = -consts.e0[j];
            let kv = Q_E * consts.kappa[j] * v;
            let lin = tables.edot[idx * 3 + j];
            let mut up = base + kv - lin;
            let mut um = base - kv + lin;
            if perturbed {
                let c1 = v * consts.u_x_v_coef[j][0]
                    + tables.wdot[idx * 6 + j * 2]
                    + tables.gate_c[j][0];
                let c2 = v * consts.u_x_v_coef[j][1]
                    + tables.wdot[idx * 6 + j * 2 + 1]
                    + tables.gate_c[j][1];
                let cx = c1 * x[0] + c2 * x[1];
                let e = consts.u_perturb_even(j);
                let ex = e[0] * x[0] + e[1] * x[1];
                up += cx + ex;
                um += -cx + ex;
            }
            let mut gp = crate::tunneling::rate_unchecked(up, params.r0[j], theta, None);
            let mut gm = crate::tunneling::rate_unchecked(um, params.r0[j], theta, None);
            if beta[j] != 0.0 {
                gp *= 1.0 + beta[j] * up * up;
                gm *= 1.0 + beta[j] * um * um;
            }
            gp *= kfac[j];
            gm *= kfac[j];
            gamma_acc[j][0] += gp * pn;
            gamma_acc[j][1] += gm * pn;

            // Forward: n -> n + T_j.
            let flux_f = gp * pn;
            dp[idx] -= flux_f;
            match bounds.index([n[0] + T_MAT_I[j][0], n[1] + T_MAT_I[j][1]]) {
                Some(dst) => dp[dst] += flux_f,
                None => leaked += flux_f,
            }
            // Backward: n -> n - T_j.
            let flux_b = gm * pn;
            dp[idx] -= flux_b;
            match bounds.index([n[0] - T_MAT_I[j][0], n[1] - T_MAT_I[j][1]]) {
                Some(dst) => dp[dst] += flux_b,
                None => leaked += flux_b,
            }
        }
    }
    if let Some(out) = gamma_out {
        *out = gamma_acc;
    }
    leaked
}

fn edge_mass(bounds: &LatticeBounds, p: &[f64]) -> f64 {
    let len = bounds.len();
    let mut m = 0.0;
    for i in 0..len[0] {
        for j in 0..len[1] {
            if i == 0 || j == 0 || i == len[0] - 1 || j == len[1] - 1 {
                m += p[i * len[1] + j];
            }
        }
    }
    m
}

/// Total-variation distance between two distributions on the same lattice.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn lattice_moments(bounds: &LatticeBounds, p: &[f64]) -> ([f64; 2], [f64; 3]) {
    let mut m1 = [0.0; 2];
    let mut m2 = [0.0; 3]; // n1^2, n2^2, n1 n2
    for (idx, &pv) in p.iter().enumerate() {
        if pv == 0.0 {
            continue;
        }
        let n = bounds.site(idx);
        let nf = [n[0] as f64, n[1] as f64];
        m1[0] += pv * nf[0];
        m1[1] += pv * nf[1];
        m2[0] += pv * nf[0] * nf[0];
        m2[1] += pv * nf[1] * nf[1];
        m2[2] += pv * nf[0] * nf[1];
    }
    (m1, m2)
}

/// Evolve from the default point-mass initial condition at `round(n_G B)`.
pub fn evolve(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    bounds: LatticeBounds,
    cfg: &MasterConfig,
) -> Result<MasterResult, MasterError> {
    let offset = consts.gate_offset(params);
    let center = [offset[0].round() as i64, offset[1].round() as i64];
    let idx = bounds.index(center).ok_or_else(|| {
        MasterError::BadConfig("lattice does not contain the initial state".into())
    })?;
    let mut p0 = vec![0.0; bounds.sites()];
    p0[idx] = 1.0;
    evolve_from(consts, params, drive, bounds, cfg, &p0)
}

/// Evolve from a caller-supplied initial distribution.
pub fn evolve_from(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    bounds: LatticeBounds,
    cfg: &MasterConfig,
    initial: &[f64],
) -> Result<MasterResult, MasterError> {
    if cfg.steps_per_period == 0 || cfg.bins == 0 || cfg.steps_per_period % cfg.bins != 0 {
        return Err(MasterError::BadConfig(
            "steps_per_period must be a positive multiple of bins".into(),
        ));
    }
    if initial.len() != bounds.sites() {
        return Err(MasterError::BadConfig(
            "initial distribution does not match the lattice".into(),
        ));
    }
    params
        .validate()
        .map_err(|e| MasterError::BadConfig(e.to_string()))?;
    let sites = bounds.sites();
    let tables = build_site_tables(consts, params, &bounds);
    let period = drive.period();
    let h = period / cfg.steps_per_period as f64;
    let steps_per_bin = cfg.steps_per_period / cfg.bins;

    let mut p = initial.to_vec();
    let mut mech = MechState::default();

    let mut k = [
        vec![0.0; sites],
        vec![0.0; sites],
        vec![0.0; sites],
        vec![0.0; sites],
    ];
    let mut km = [[0.0f64; 4]; 4];
    let mut ptmp = vec![0.0; sites];

    let mut boundary_mass_max = 0.0f64;
    let mut conservation_drift_max = 0.0f64;
    let mut k_excursion = 0.0f64;
    let mut converged = false;
    let mut consecutive = 0u32;
    let mut periods_run = 0u32;
    let mut p_prev_period = p.clone();

    let deriv_mech = |st: &MechState, f: [f64; 2]| -> [f64; 4] {
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

    let mean_force = |pv: &[f64], v: f64| -> [f64; 2] {
        let mut f = [0.0; 2];
        for (idx, &pp) in pv.iter().enumerate() {
            if pp != 0.0 {
                f[0] += pp * (tables.quad[idx * 2] + v * tables.lin[idx * 2]);
                f[1] += pp * (tables.quad[idx * 2 + 1] + v * tables.lin[idx * 2 + 1]);
            }
        }
        f
    };

    // Recording buffers, overwritten every period; the final period stays.
    let bins = cfg.bins;
    let mut rec_pdfs: Vec<Vec<f64>> = vec![vec![0.0; sites]; bins];
    let mut rec_mean_n = [vec![0.0; bins], vec![0.0; bins]];
    let mut rec_var_n = [vec![0.0; bins], vec![0.0; bins]];
    let mut rec_cov = vec![0.0; bins];
    let mut rec_mean_x = [vec![0.0; bins], vec![0.0; bins]];
    let mut rec_mean_v = [vec![0.0; bins], vec![0.0; bins]];
    let mut rec_gamma_net: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; bins]);
    let mut rec_gamma_star: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; bins]);
    let mut rec_current = vec![0.0; bins];

    for period_idx in 0..cfg.max_periods {
        let mut leaked_period = 0.0f64;
        for step in 0..cfg.steps_per_period {
            let t = step as f64 * h;
            let perturb = cfg.perturbed_u && !cfg.frozen_mechanics;

            if step % steps_per_bin == 0 {
                let bin = step / steps_per_bin;
                let mut gammas = [[0.0; 2]; 3];
                let x_now = if cfg.frozen_mechanics { [0.0; 2] } else { mech.x };
                apply_generator(
                    consts,
                    params,
                    &bounds,
                    &tables,
                    drive.voltage(t),
                    x_now,
                    perturb,
                    &p,
                    &mut ptmp,
                    Some(&mut gammas),
                );
                rec_pdfs[bin].copy_from_slice(&p);
                let (m1, m2) = lattice_moments(&bounds, &p);
                for s in 0..2 {
                    rec_mean_n[s][bin] = m1[s];
                    rec_var_n[s][bin] = (m2[s] - m1[s] * m1[s]).max(0.0);
                    rec_mean_x[s][bin] = x_now[s];
                    rec_mean_v[s][bin] = if cfg.frozen_mechanics { 0.0 } else { mech.v[s] };
                }
                rec_cov[bin] = m2[2] - m1[0] * m1[1];
                let mut tun = 0.0;
                for j in 0..3 {
                    rec_gamma_net[j][bin] = gammas[j][0] - gammas[j][1];
                    rec_gamma_star[j][bin] = gammas[j][0] + gammas[j][1];
                    tun += consts.kappa[j] * rec_gamma_net[j][bin];
                }
                rec_current[bin] = consts.c0 * drive.dv_dt(t) + Q_E * tun;
            }

            // One RK4 step of the coupled lattice + mechanics system.
            let stage_x = |m: &MechState| -> [f64; 2] {
                if cfg.frozen_mechanics {
                    [0.0; 2]
                } else {
                    m.x
                }
            };

            let v0 = drive.voltage(t);
            let leak0 = apply_generator(
                consts, params, &bounds, &tables, v0, stage_x(&mech), perturb, &p, &mut k[0], None,
            );
            km[0] = deriv_mech(&mech, mean_force(&p, v0));

            let vh = drive.voltage(t + 0.5 * h);
            for i in 0..sites {
                ptmp[i] = p[i] + 0.5 * h * k[0][i];
            }
            let mech1 = apply_mech(&mech, &km[0], 0.5 * h);
            let mut k1buf = std::mem::take(&mut k[1]);
            let leak1 = apply_generator(
                consts, params, &bounds, &tables, vh, stage_x(&mech1), perturb, &ptmp, &mut k1buf,
                None,
            );
            k[1] = k1buf;
            km[1] = deriv_mech(&mech1, mean_force(&ptmp, vh));

            for i in 0..sites {
                ptmp[i] = p[i] + 0.5 * h * k[1][i];
            }
            let mech2 = apply_mech(&mech, &km[1], 0.5 * h);
            let mut k2buf = std::mem::take(&mut k[2]);
            let leak2 = apply_generator(
                consts, params, &bounds, &tables, vh, stage_x(&mech2), perturb, &ptmp, &mut k2buf,
                None,
            );
            k[2] = k2buf;
            km[2] = deriv_mech(&mech2, mean_force(&ptmp, vh));

            let v1 = drive.voltage(t + h);
            for i in 0..sites {
                ptmp[i] = p[i] + h * k[2][i];
            }
            let mech3 = apply_mech(&mech, &km[2], h);
            let mut k3buf = std::mem::take(&mut k[3]);
            let leak3 = apply_generator(
                consts, params, &bounds, &tables, v1, stage_x(&mech3), perturb, &ptmp, &mut k3buf,
                None,
            );
            k[3] = k3buf;
            km[3] = deriv_mech(&mech3, mean_force(&ptmp, v1));

            for i in 0..sites {
                p[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            }
            leaked_period += h / 6.0 * (leak0 + 2.0 * leak1 + 2.0 * leak2 + leak3);
            if !cfg.frozen_mechanics {
                for s in 0..2 {
                    mech.x[s] += h / 6.0 * (km[0][s] + 2.0 * km[1][s] + 2.0 * km[2][s] + km[3][s]);
                    mech.v[s] += h / 6.0
                        * (km[0][2 + s] + 2.0 * km[1][2 + s] + 2.0 * km[2][2 + s] + km[3][2 + s]);
                }
                let ex = (mech.x[0] / params.lambda[0])
                    .abs()
                    .max(((mech.x[1] - mech.x[0]) / params.lambda[1]).abs())
                    .max((mech.x[1] / params.lambda[2]).abs());
                k_excursion = k_excursion.max(ex);
            }
        }
        periods_run = period_idx + 1;

        // Both the edge occupancy and the flux actually dropped over the
        // period signal an insufficient truncation window.
        let em = edge_mass(&bounds, &p).max(leaked_period);
        boundary_mass_max = boundary_mass_max.max(em);
        if em > cfg.boundary_mass_limit {
            return Err(MasterError::BoundaryMass {
                t: periods_run as f64 * period,
                mass: em,
                limit: cfg.boundary_mass_limit,
            });
        }
        let total: f64 = p.iter().sum();
        if !total.is_finite() {
            return Err(MasterError::NonFinite {
                t: periods_run as f64 * period,
            });
        }
        conservation_drift_max = conservation_drift_max.max((total - 1.0).abs());
        if cfg.renormalize {
            let inv = 1.0 / total;
            for v in p.iter_mut() {
                *v *= inv;
            }
        }

        let delta = tv_distance(&p, &p_prev_period);
        p_prev_period.copy_from_slice(&p);
        if delta < cfg.tol {
            consecutive += 1;
            if consecutive >= 2 {
                converged = true;
                break;
            }
        } else {
            consecutive = 0;
        }
    }

    let mut i_dc = [0.0; 3];
    for j in 0..3 {
        i_dc[j] = Q_E * rec_gamma_net[j].iter().sum::<f64>() / bins as f64;
    }
    let t_grid = (0..bins)
        .map(|b| b as f64 * period / bins as f64)
        .collect();

    Ok(MasterResult {
        bounds,
        bins,
        period,
        t_grid,
        pdfs: rec_pdfs,
        mean_n: rec_mean_n,
        var_n: rec_var_n,
        cov_n12: rec_cov,
        mean_x: rec_mean_x,
        mean_v: rec_mean_v,
        gamma_net: rec_gamma_net,
        gamma_star: rec_gamma_star,
        current: rec_current,
        i_dc,
        converged,
        periods_run,
        boundary_mass_max,
        conservation_drift_max,
        k_excursion,
    })
}

fn apply_mech(m: &MechState, d: &[f64; 4], h: f64) -> MechState {
    MechState {
        x: [m.x[0] + h * d[0], m.x[1] + h * d[1]],
        v: [m.v[0] + h * d[2], m.v[1] + h * d[3]],
    }
}

/// One evaluation of the tunneling generator, exposed for conservation and
/// linearity checks.
#[allow(clippy::too_many_arguments)]
pub fn generator_once(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    bounds: &LatticeBounds,
    v: f64,
    x: [f64; 2],
    perturbed: bool,
    p: &[f64],
    dp: &mut [f64],
) -> f64 {
    let tables = build_site_tables(consts, params, bounds);
    apply_generator(
        consts, params, bounds, &tables, v, x, perturbed, p, dp, None,
    )
}
