//! Ensemble kinetic Monte-Carlo simulation of the full stochastic model.
//!
//! Each sample carries an integer electron pair `(n1, n2)` and a mechanical
//! state. Per fixed time step, every junction independently fires forward or
//! backward with probability `Gamma^{+/-} dt` (at most one event per junction
//! per step), then the mechanics advances one semi-implicit Euler step under
//! the force of the pre-event charge state.
//!
//! Statistics are phase-resolved over the drive period and organized in
//! sample groups: every estimate is formed per group and the group scatter
//! provides its standard error. Groups are fixed index ranges and each sample
//! stream is seeded by its absolute index, so results are bit-identical for a
//! given master seed regardless of worker count.

use crate::device::{DeviceConstants, ShuttleParams, Q_E};
use crate::drive::DriveWaveform;
use crate::mechanics::MechState;
use crate::rng::Xoshiro256;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq)]
pub enum McError {
    /// `sum(Gamma dt)` crossed the event budget: the step size is too large
    /// for the instantaneous rates at time `t`.
    EventBudgetExceeded { t: f64, rate_dt: f64 },
    NonFiniteState { t: f64 },
    BadConfig(String),
}

impl std::fmt::Display for McError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            McError::EventBudgetExceeded { t, rate_dt } => write!(
                f,
                "event budget exceeded at t = {t:.6e} s (sum of rate*dt = {rate_dt:.3e}); reduce dt"
            ),
            McError::NonFiniteState { t } => {
                write!(f, "non-finite state encountered at t = {t:.6e} s")
            }
            McError::BadConfig(msg) => write!(f, "invalid Monte-Carlo config: {msg}"),
        }
    }
}

impl std::error::Error for McError {}

/// Ensemble configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    /// Step size in seconds; `0.0` selects the default
    /// `min(T_drive, T_mech)/2000` followed by event-budget halving.
    pub dt: f64,
    pub periods_burnin: u32,
    pub periods_measure: u32,
    pub samples: u64,
    pub master_seed: u64,
    /// Maximum allowed `sum_j (Gamma_j^+ + Gamma_j^-) dt` per step.
    pub event_budget: f64,
    /// Phase bins per period for the recorded statistics.
    pub bins: usize,
    /// Number of sample groups used for standard errors.
    pub groups: u64,
    /// Worker threads; `0` uses the machine's available parallelism.
    pub workers: usize,
    /// Freeze the mechanics: positions pinned at zero and `K_j = 1`
    /// (the lambda -> infinity surrogate).
    pub frozen_mechanics: bool,
    /// Carry the first-order position perturbation inside the free energies.
    pub perturbed_u: bool,
    /// Add thermal velocity noise to the mechanics.
    pub thermal_noise: bool,
    /// Phase-bin indices at which (n1, n2) histograms are recorded.
    pub hist_bins: Vec<usize>,
    /// Histogram half-width around the initial electron numbers.
    pub hist_halfwidth: i64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            dt: 0.0,
            periods_burnin: 20,
            periods_measure: 8,
            samples: 10_000,
            master_seed: 1,
            event_budget: 0.05,
            bins: 64,
            groups: 100,
            workers: 0,
            frozen_mechanics: false,
            perturbed_u: true,
            thermal_noise: false,
            hist_bins: vec![0, 16, 32, 48],
            hist_halfwidth: 12,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<(), McError> {
        if self.samples < 1 {
            return Err(McError::BadConfig("samples must be >= 1".into()));
        }
        if !(self.event_budget > 0.0 && self.event_budget <= 0.2) {
            return Err(McError::BadConfig(
                "event_budget must lie in (0, 0.2]".into(),
            ));
        }
        if self.dt < 0.0 || !self.dt.is_finite() {
            return Err(McError::BadConfig("dt must be >= 0".into()));
        }
        if self.bins < 2 || self.bins % 2 != 0 {
            return Err(McError::BadConfig("bins must be even and >= 2".into()));
        }
        if self.periods_measure == 0 {
            return Err(McError::BadConfig("periods_measure must be >= 1".into()));
        }
        if self.hist_bins.iter().any(|&b| b >= self.bins) {
            return Err(McError::BadConfig("hist_bins out of range".into()));
        }
        Ok(())
    }
}

/// Default step size before the event-budget pilot: the shorter of the drive
/// and mechanical periods divided by 2000.
pub fn default_dt(params: &ShuttleParams, drive: &DriveWaveform) -> f64 {
    let t_mech = 2.0 * std::f64::consts::PI / params.omega[0].max(params.omega[1]);
    drive.period().min(t_mech) / 2000.0
}

/// Pilot-run step selection: start from `cfg.dt` (or the default) and halve
/// until one full sample stays inside the event budget.
pub fn auto_dt(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    cfg: &McConfig,
) -> Result<f64, McError> {
    let mut dt = if cfg.dt > 0.0 {
        cfg.dt
    } else {
        default_dt(params, drive)
    };
    for _ in 0..20 {
        let mut pilot = cfg.clone();
        pilot.dt = dt;
        pilot.samples = 4;
        pilot.groups = 1;
        pilot.workers = 1;
        pilot.periods_burnin = cfg.periods_burnin.min(6);
        pilot.periods_measure = cfg.periods_measure.min(4);
        pilot.hist_bins = Vec::new();
        // Leave headroom: samples outside the pilot can push the rates a
        // little past what the pilot saw.
        pilot.event_budget = 0.6 * cfg.event_budget;
        match simulate(consts, params, drive, &pilot) {
            Ok(_) => return Ok(dt),
            Err(McError::EventBudgetExceeded { .. }) => dt *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Err(McError::BadConfig(
        "could not satisfy the event budget after 20 halvings".into(),
    ))
}

/// Phase-resolved mean with its group standard error.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

/// Per-group summary: everything needed to rebuild any estimate group-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub samples: u64,
    /// `bins x NCH` per-(sample, period) means of the snapshot channels.
    pub snap_mean: Vec<f64>,
    /// Bin-averaged one-way rates: `[j][dir]` -> per-bin mean rate.
    pub rate_mean: [[Vec<f64>; 2]; 3],
    /// This group's macroscopic current series.
    pub current: Vec<f64>,
}

/// Dense (n1, n2) occupation histogram at one phase bin.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseHistogram {
    pub phase_bin: usize,
    /// Electron numbers of cell (0, 0).
    pub origin: [i64; 2],
    /// Cells per axis.
    pub size: usize,
    /// Row-major counts over (n1, n2).
    pub counts: Vec<u64>,
    pub total: u64,
    /// Observations outside the recorded window.
    pub overflow: u64,
}

impl PhaseHistogram {
    pub fn probability(&self, n1: i64, n2: i64) -> f64 {
        let i = n1 - self.origin[0];
        let j = n2 - self.origin[1];
        if i < 0 || j < 0 || i as usize >= self.size || j as usize >= self.size {
            return 0.0;
        }
        self.counts[i as usize * self.size + j as usize] as f64 / self.total as f64
    }
}

/// Snapshot channel layout.
pub(crate) mod ch {
    pub const N1: usize = 0;
    pub const N2: usize = 1;
    pub const X1: usize = 2;
    pub const X2: usize = 3;
    pub const V1: usize = 4;
    pub const V2: usize = 5;
    pub const N1SQ: usize = 6;
    pub const N2SQ: usize = 7;
    pub const N1N2: usize = 8;
    pub const X1SQ: usize = 9;
    pub const X2SQ: usize = 10;
    pub const V1SQ: usize = 11;
    pub const V2SQ: usize = 12;
    pub const X1V1: usize = 13;
    pub const X2V2: usize = 14;
    pub const X1N1: usize = 15;
    pub const X2N2: usize = 16;
    pub const V1N1: usize = 17;
    pub const V2N2: usize = 18;
    pub const NCH: usize = 19;
}

/// Phase-resolved ensemble statistics with group standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub bins: usize,
    pub period: f64,
    pub dt: f64,
    pub steps_per_period: usize,
    pub samples: u64,
    pub periods_measure: u32,
    /// Snapshot times within the period (bin starts).
    pub t_grid: Vec<f64>,
    pub mean_n: [Series; 2],
    pub mean_x: [Series; 2],
    pub mean_v: [Series; 2],
    pub var_n: [Series; 2],
    pub cov_n12: Series,
    pub var_x: [Series; 2],
    pub var_v: [Series; 2],
    pub cov_xv: [Series; 2],
    pub cov_xn: [Series; 2],
    pub cov_vn: [Series; 2],
    /// Bin-averaged net rates per junction.
    pub gamma_net: [Series; 3],
    /// Bin-averaged one-way rate sums per junction.
    pub gamma_star: [Series; 3],
    /// Macroscopic current per bin.
    pub current: Series,
    /// Period-averaged DC current estimated per junction, plus spread.
    pub i_dc: [f64; 3],
    pub i_dc_se: [f64; 3],
    pub i_dc_spread: f64,
    /// Pooled cross-time moments of the electron numbers over pairs at least
    /// half a period apart: `cross[c][b1 * bins + b2] = E[n_s(b1) n_s'(b2)]`
    /// for channels (s, s') in {(1,1), (2,2), (1,2)}.
    pub cross_moment: [Vec<f64>; 3],
    pub histograms: Vec<PhaseHistogram>,
    /// Forward/backward event totals per junction.
    pub event_counts: [[u64; 2]; 3],
    /// Sum over samples of the net change of `n1 + n2` during measurement
    /// minus the boundary-junction net event counts; must be zero.
    pub charge_flow_check: i64,
    pub max_rate_dt: f64,
    pub groups: Vec<GroupStats>,
}

impl EnsembleStats {
    /// Largest normalized cross-time correlation `|Corr[n_s(t), n_s'(t')]|`
    /// over pairs separated by at least half a period.
    pub fn correlation_probe(&self) -> f64 {
        let b = self.bins;
        let half = b / 2;
        let mean = |s: usize, i: usize| self.mean_n[s].mean[i];
        let var = |s: usize, i: usize| self.var_n[s].mean[i].max(1e-300);
        let mut probe: f64 = 0.0;
        for b1 in 0..half {
            for b2 in (b1 + half)..b {
                for (c, (s1, s2)) in [(0usize, (0usize, 0usize)), (1, (1, 1)), (2, (0, 1))] {
                    let e12 = self.cross_moment[c][b1 * b + b2];
                    let cov = e12 - mean(s1, b1) * mean(s2, b2);
                    let corr = cov / (var(s1, b1) * var(s2, b2)).sqrt();
                    probe = probe.max(corr.abs());
                }
            }
        }
        probe
    }

    /// Current antisymmetry residual: the largest `|I(b) + I(b + B/2)|` in
    /// standard-error units, together with the worst raw residual and the
    /// group SE at that bin pair.
    pub fn antisymmetry_residual(&self) -> AntisymmetryResidual {
        let half = self.bins / 2;
        let g = self.groups.len();
        let mut worst_z = 0.0f64;
        let mut worst = 0.0f64;
        let mut worst_se = 0.0f64;
        let i_max = self
            .current
            .mean
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        for b in 0..half {
            let vals: Vec<f64> = self
                .groups
                .iter()
                .map(|gr| gr.current[b] + gr.current[b + half])
                .collect();
            let m = vals.iter().sum::<f64>() / g as f64;
            let se = if g > 1 {
                (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                    / ((g - 1) as f64 * g as f64))
                    .sqrt()
            } else {
                0.0
            };
            let z = m.abs() / se.max(1e-300);
            if z > worst_z {
                worst_z = z;
                worst = m.abs();
                worst_se = se;
            }
        }
        AntisymmetryResidual {
            max_z: worst_z,
            residual: worst,
            se: worst_se,
            relative: worst / i_max.max(1e-300),
        }
    }
}

/// Result of [`EnsembleStats::antisymmetry_residual`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AntisymmetryResidual {
    /// Worst residual in group-SE units.
    pub max_z: f64,
    /// Raw residual at the worst bin pair (amps).
    pub residual: f64,
    pub se: f64,
    /// Residual relative to the current amplitude.
    pub relative: f64,
}

/// Row stride of the step-major table: drive voltage, six U bases, six
/// perturbation coefficients.
const ROW: usize = 13;

struct Tables {
    steps: usize,
    dt: f64,
    theta: f64,
    inv_q2r: [f64; 3],
    beta: [f64; 3],
    lambda_inv: [f64; 3],
    /// Step-major row per time step:
    /// `[v, bp1, bm1, bp2, bm2, bp3, bm3, c11, c12, c21, c22, c31, c32]`
    /// where `bpj/bmj` are the n-independent parts of `U_j^{+/-}` and `cjs`
    /// the voltage-plus-gate parts of the odd perturbation coefficients.
    rows: Vec<f64>,
    e_theta: [[f64; 2]; 3],
    /// n-coefficients of the odd perturbation.
    w: [[[f64; 2]; 2]; 3],
    /// Direction-even perturbation coefficients.
    e_even: [[f64; 2]; 3],
    f0: [[[f64; 2]; 2]; 2],
    fg_ng: [[f64; 2]; 2],
    f_const: [f64; 2],
    f_vgate: [f64; 2],
    alpha_q: [[f64; 2]; 2],
    offset: [f64; 2],
    n_init: [i64; 2],
}

fn build_tables(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    steps: usize,
    dt: f64,
) -> Tables {
    let offset = consts.gate_offset(params);
    let n_init = [offset[0].round() as i64, offset[1].round() as i64];

    let mut w = [[[0.0; 2]; 2]; 3];
    let mut e_even = [[0.0; 2]; 3];
    let mut gate_part = [[0.0; 2]; 3];
    for j in 0..3 {
        // gate contribution to the odd coefficient is n- and V-independent
        gate_part[j] = consts.u_perturb_coeff(params, [0.0, 0.0], 0.0, j);
        for s in 0..2 {
            w[j][s] = consts.u_x_n_coef[j][s];
        }
        e_even[j] = consts.u_perturb_even(j);
    }
    let mut rows = vec![0.0; steps * ROW];
    for k in 0..steps {
        let v = drive.voltage(k as f64 * dt);
        let r = &mut rows[k * ROW..(k + 1) * ROW];
        r[0] = v;
        for j in 0..3 {
            let kv = Q_E * consts.kappa[j] * v;
            r[1 + 2 * j] = -consts.e0[j] + kv;
            r[2 + 2 * j] = -consts.e0[j] - kv;
            for s in 0..2 {
                r[7 + 2 * j + s] = v * consts.u_x_v_coef[j][s] + gate_part[j][s];
            }
        }
    }

    let mut fg_ng = [[0.0; 2]; 2];
    let mut f_const = [0.0; 2];
    let mut f_vgate = [0.0; 2];
    if consts.gates > 0 && !params.n_gate.is_empty() {
        for s in 0..2 {
            let v = consts.fg[s].mul_col_vec(&params.n_gate);
            fg_ng[s] = [v[0], v[1]];
            let fgg_ng = consts.fgg[s].mul_col_vec(&params.n_gate);
            f_const[s] = params
                .n_gate
                .iter()
                .zip(&fgg_ng)
                .map(|(a, b)| a * b)
                .sum();
            f_vgate[s] = Q_E
                * params
                    .n_gate
                    .iter()
                    .zip(&consts.alpha_g[s])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
        }
    }
    let mut alpha_q = [[0.0; 2]; 2];
    for s in 0..2 {
        alpha_q[s] = [Q_E * consts.alpha[s][0], Q_E * consts.alpha[s][1]];
    }

    Tables {
        steps,
        dt,
        theta: params.thermal_energy(),
        inv_q2r: [
            1.0 / (Q_E * Q_E * params.r0[0]),
            1.0 / (Q_E * Q_E * params.r0[1]),
            1.0 / (Q_E * Q_E * params.r0[2]),
        ],
        beta: params.beta.unwrap_or([0.0; 3]),
        lambda_inv: [
            1.0 / params.lambda[0],
            1.0 / params.lambda[1],
            1.0 / params.lambda[2],
        ],
        rows,
        e_theta: consts.e_theta,
        w,
        e_even,
        f0: consts.f0,
        fg_ng,
        f_const,
        f_vgate,
        alpha_q,
        offset,
        n_init,
    }
}

#[inline]
fn phi_fast(u: f64, theta: f64) -> f64 {
    let z = u / theta;
    if z.abs() < 1e-3 {
        let z2 = z * z;
        theta * (1.0 + 0.5 * z + z2 / 12.0 - z2 * z2 / 720.0)
    } else if z > 0.0 {
        u / (-(-z).exp_m1())
    } else if z > -16.0 {
        // Phi(u) = u (1 + w) / w with w = expm1(u/kT); detailed-balance
        // rearrangement that needs a single transcendental.
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

struct GroupAcc {
    samples: u64,
    snap: Vec<f64>,
    rate: Vec<f64>, // bins * 6: [bin][j*2+dir]
    cross: [Vec<f64>; 3],
    hists: Vec<(Vec<u64>, u64, u64)>, // counts, total, overflow
    events: [[u64; 2]; 3],
    dn_total: i64,
    max_rate_dt: f64,
}

impl GroupAcc {
    fn new(bins: usize, hist_count: usize, hist_cells: usize) -> Self {
        GroupAcc {
            samples: 0,
            snap: vec![0.0; bins * ch::NCH],
            rate: vec![0.0; bins * 6],
            cross: [
                vec![0.0; bins * bins],
                vec![0.0; bins * bins],
                vec![0.0; bins * bins],
            ],
            hists: (0..hist_count)
                .map(|_| (vec![0u64; hist_cells], 0u64, 0u64))
                .collect(),
            events: [[0; 2]; 3],
            dn_total: 0,
            max_rate_dt: 0.0,
        }
    }
}

struct RunShape {
    bins: usize,
    steps_per_bin: usize,
    periods_burnin: u32,
    periods_measure: u32,
    event_budget: f64,
    frozen: bool,
    perturbed: bool,
    thermal: bool,
    hist_bins: Vec<usize>,
    hist_halfwidth: i64,
    hist_size: usize,
}

fn run_sample(
    tab: &Tables,
    params: &ShuttleParams,
    shape: &RunShape,
    sample_idx: u64,
    master_seed: u64,
    acc: &mut GroupAcc,
    snap_scratch: &mut [f64],
) -> Result<(), McError> {
    let mut rng = Xoshiro256::for_sample(master_seed, sample_idx);
    let mut n = tab.n_init;
    let mut mech = MechState::default();
    let dt = tab.dt;
    let steps = tab.steps;
    let bins = shape.bins;
    let mut measured_start_n = n;

    let (snap_n1, snap_n2) = snap_scratch.split_at_mut(bins);

    let total_periods = shape.periods_burnin + shape.periods_measure;
    let mut gp = [0.0f64; 3];
    let mut gm = [0.0f64; 3];
    for period in 0..total_periods {
        let measuring = period >= shape.periods_burnin;
        if measuring && period == shape.periods_burnin {
            measured_start_n = n;
        }
        for k in 0..steps {
            let nf = [n[0] as f64, n[1] as f64];
            let m1 = nf[0] - tab.offset[0];
            let m2 = nf[1] - tab.offset[1];
            let row = &tab.rows[k * ROW..(k + 1) * ROW];
            let v = row[0];

            // Position factors for T rows (1,0), (-1,1), (0,-1).
            let kfac = if shape.frozen {
                [1.0, 1.0, 1.0]
            } else {
                [
                    (-mech.x[0] * tab.lambda_inv[0]).exp(),
                    (-(mech.x[1] - mech.x[0]) * tab.lambda_inv[1]).exp(),
                    (mech.x[1] * tab.lambda_inv[2]).exp(),
                ]
            };

            let mut rate_dt_sum = 0.0;
            for j in 0..3 {
                let lin = tab.e_theta[j][0] * m1 + tab.e_theta[j][1] * m2;
                let mut up = row[1 + 2 * j] - lin;
                let mut um = row[2 + 2 * j] + lin;
                if shape.perturbed && !shape.frozen {
                    let c1 = row[7 + 2 * j] + nf[0] * tab.w[j][0][0] + nf[1] * tab.w[j][0][1];
                    let c2 = row[8 + 2 * j] + nf[0] * tab.w[j][1][0] + nf[1] * tab.w[j][1][1];
                    let cx = c1 * mech.x[0] + c2 * mech.x[1];
                    let ex = tab.e_even[j][0] * mech.x[0] + tab.e_even[j][1] * mech.x[1];
                    up += cx + ex;
                    um += -cx + ex;
                }
                let mut p = phi_fast(up, tab.theta) * tab.inv_q2r[j];
                let mut q = phi_fast(um, tab.theta) * tab.inv_q2r[j];
                if tab.beta[j] != 0.0 {
                    p *= 1.0 + tab.beta[j] * up * up;
                    q *= 1.0 + tab.beta[j] * um * um;
                }
                gp[j] = kfac[j] * p;
                gm[j] = kfac[j] * q;
                rate_dt_sum += (gp[j] + gm[j]) * dt;
            }

            if rate_dt_sum > shape.event_budget {
                return Err(McError::EventBudgetExceeded {
                    t: (period as usize * steps + k) as f64 * dt,
                    rate_dt: rate_dt_sum,
                });
            }
            if !rate_dt_sum.is_finite() || !mech.is_finite() {
                return Err(McError::NonFiniteState {
                    t: (period as usize * steps + k) as f64 * dt,
                });
            }

            if measuring {
                if acc.max_rate_dt < rate_dt_sum {
                    acc.max_rate_dt = rate_dt_sum;
                }
                let bin = k / shape.steps_per_bin;
                let r = &mut acc.rate[bin * 6..bin * 6 + 6];
                for j in 0..3 {
                    r[j * 2] += gp[j];
                    r[j * 2 + 1] += gm[j];
                }
                if k % shape.steps_per_bin == 0 {
                    let s = &mut acc.snap[bin * ch::NCH..(bin + 1) * ch::NCH];
                    s[ch::N1] += nf[0];
                    s[ch::N2] += nf[1];
                    s[ch::X1] += mech.x[0];
                    s[ch::X2] += mech.x[1];
                    s[ch::V1] += mech.v[0];
                    s[ch::V2] += mech.v[1];
                    s[ch::N1SQ] += nf[0] * nf[0];
                    s[ch::N2SQ] += nf[1] * nf[1];
                    s[ch::N1N2] += nf[0] * nf[1];
                    s[ch::X1SQ] += mech.x[0] * mech.x[0];
                    s[ch::X2SQ] += mech.x[1] * mech.x[1];
                    s[ch::V1SQ] += mech.v[0] * mech.v[0];
                    s[ch::V2SQ] += mech.v[1] * mech.v[1];
                    s[ch::X1V1] += mech.x[0] * mech.v[0];
                    s[ch::X2V2] += mech.x[1] * mech.v[1];
                    s[ch::X1N1] += mech.x[0] * nf[0];
                    s[ch::X2N2] += mech.x[1] * nf[1];
                    s[ch::V1N1] += mech.v[0] * nf[0];
                    s[ch::V2N2] += mech.v[1] * nf[1];
                    snap_n1[bin] = nf[0];
                    snap_n2[bin] = nf[1];
                    if let Some(h) = shape.hist_bins.iter().position(|&hb| hb == bin) {
                        let (counts, total, overflow) = &mut acc.hists[h];
                        let hw = shape.hist_halfwidth;
                        let i = n[0] - (tab.n_init[0] - hw);
                        let jdx = n[1] - (tab.n_init[1] - hw);
                        *total += 1;
                        let size = shape.hist_size as i64;
                        if i >= 0 && i < size && jdx >= 0 && jdx < size {
                            counts[(i * size + jdx) as usize] += 1;
                        } else {
                            *overflow += 1;
                        }
                    }
                }
            }

            // Tunneling draws: one uniform per junction, at most one event.
            for j in 0..3 {
                let r = rng.next_f64();
                let pp = gp[j] * dt;
                if r < pp {
                    n[0] += crate::device::T_MAT_I[j][0];
                    n[1] += crate::device::T_MAT_I[j][1];
                    if measuring {
                        acc.events[j][0] += 1;
                    }
                } else if r < pp + gm[j] * dt {
                    n[0] -= crate::device::T_MAT_I[j][0];
                    n[1] -= crate::device::T_MAT_I[j][1];
                    if measuring {
                        acc.events[j][1] += 1;
                    }
                }
            }

            // Mechanics under the pre-event charge state.
            if !shape.frozen {
                let fx = [
                    nf[0] * (tab.f0[0][0][0] * nf[0] + tab.f0[0][0][1] * nf[1])
                        + nf[1] * (tab.f0[0][1][0] * nf[0] + tab.f0[0][1][1] * nf[1])
                        + tab.fg_ng[0][0] * nf[0]
                        + tab.fg_ng[0][1] * nf[1]
                        + tab.f_const[0]
                        + v * (tab.alpha_q[0][0] * nf[0]
                            + tab.alpha_q[0][1] * nf[1]
                            + tab.f_vgate[0]),
                    nf[0] * (tab.f0[1][0][0] * nf[0] + tab.f0[1][0][1] * nf[1])
                        + nf[1] * (tab.f0[1][1][0] * nf[0] + tab.f0[1][1][1] * nf[1])
                        + tab.fg_ng[1][0] * nf[0]
                        + tab.fg_ng[1][1] * nf[1]
                        + tab.f_const[1]
                        + v * (tab.alpha_q[1][0] * nf[0]
                            + tab.alpha_q[1][1] * nf[1]
                            + tab.f_vgate[1]),
                ];
                mech = if shape.thermal {
                    crate::mechanics::step_with_noise(mech, fx, params, dt, &mut rng)
                } else {
                    crate::mechanics::step_unchecked(mech, fx, params, dt)
                };
            }
        }

        if measuring {
            // Cross-time products over the half-period-separated pairs.
            let half = bins / 2;
            for b1 in 0..half {
                for b2 in (b1 + half)..bins {
                    let idx = b1 * bins + b2;
                    acc.cross[0][idx] += snap_n1[b1] * snap_n1[b2];
                    acc.cross[1][idx] += snap_n2[b1] * snap_n2[b2];
                    acc.cross[2][idx] += snap_n1[b1] * snap_n2[b2];
                }
            }
        }
    }

    acc.dn_total += (n[0] + n[1]) - (measured_start_n[0] + measured_start_n[1]);
    acc.samples += 1;
    Ok(())
}

/// Run the ensemble and collect phase-resolved statistics.
pub fn simulate(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
    cfg: &McConfig,
) -> Result<EnsembleStats, McError> {
    cfg.validate()?;
    params
        .validate()
        .map_err(|e| McError::BadConfig(e.to_string()))?;
    let period = drive.period();
    let dt_req = if cfg.dt > 0.0 {
        cfg.dt
    } else if cfg.frozen_mechanics {
        // No mechanics to resolve; only the drive period matters.
        period / 2000.0
    } else {
        default_dt(params, drive)
    };
    let raw_steps = (period / dt_req).ceil() as usize;
    let steps = raw_steps.div_ceil(cfg.bins).max(1) * cfg.bins;
    let dt = period / steps as f64;
    let steps_per_bin = steps / cfg.bins;

    let tables = build_tables(consts, params, drive, steps, dt);

    // Initial-state budget precheck.
    {
        let rs = crate::tunneling::full_rates(
            consts,
            params,
            [tables.n_init[0] as f64, tables.n_init[1] as f64],
            [0.0; 2],
            0.0,
            drive,
            cfg.perturbed_u,
        )
        .map_err(|e| McError::BadConfig(e.to_string()))?;
        let s = rs.total() * dt;
        if s > cfg.event_budget {
            return Err(McError::EventBudgetExceeded { t: 0.0, rate_dt: s });
        }
    }

    let hist_size = (2 * cfg.hist_halfwidth + 1) as usize;
    let shape = RunShape {
        bins: cfg.bins,
        steps_per_bin,
        periods_burnin: cfg.periods_burnin,
        periods_measure: cfg.periods_measure,
        event_budget: cfg.event_budget,
        frozen: cfg.frozen_mechanics,
        perturbed: cfg.perturbed_u,
        thermal: cfg.thermal_noise,
        hist_bins: cfg.hist_bins.clone(),
        hist_halfwidth: cfg.hist_halfwidth,
        hist_size,
    };

    let group_count = cfg.groups.clamp(1, cfg.samples) as usize;
    let per_group = cfg.samples.div_ceil(group_count as u64);
    let workers = if cfg.workers == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        cfg.workers
    }
    .min(group_count)
    .max(1);

    let next_group = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<GroupAcc, McError>>>> =
        Mutex::new((0..group_count).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut snap_scratch = vec![0.0f64; 2 * shape.bins];
                loop {
                    let g = next_group.fetch_add(1, Ordering::Relaxed);
                    if g >= group_count {
                        break;
                    }
                    let lo = g as u64 * per_group;
                    let hi = ((g as u64 + 1) * per_group).min(cfg.samples);
                    let mut acc =
                        GroupAcc::new(shape.bins, shape.hist_bins.len(), hist_size * hist_size);
                    let mut out: Result<GroupAcc, McError> = Ok(GroupAcc::new(0, 0, 0));
                    let mut failed = false;
                    for idx in lo..hi {
                        if let Err(e) = run_sample(
                            &tables,
                            params,
                            &shape,
                            idx,
                            cfg.master_seed,
                            &mut acc,
                            &mut snap_scratch,
                        ) {
                            out = Err(e);
                            failed = true;
                            break;
                        }
                    }
                    if !failed {
                        out = Ok(acc);
                    }
                    results.lock().unwrap()[g] = Some(out);
                }
            });
        }
    });

    let collected = results.into_inner().unwrap();
    let mut groups_acc = Vec::with_capacity(group_count);
    for slot in collected {
        match slot.expect("worker left a group unprocessed") {
            Ok(acc) => groups_acc.push(acc),
            Err(e) => return Err(e),
        }
    }

    Ok(assemble(consts, drive, cfg, &shape, &tables, groups_acc))
}

fn series_from_groups<F: Fn(&GroupStats, usize) -> f64>(
    groups: &[GroupStats],
    bins: usize,
    f: F,
) -> Series {
    let g = groups.len();
    let mut mean = vec![0.0; bins];
    let mut se = vec![0.0; bins];
    for b in 0..bins {
        let vals: Vec<f64> = groups.iter().map(|gr| f(gr, b)).collect();
        let m = vals.iter().sum::<f64>() / g as f64;
        mean[b] = m;
        if g > 1 {
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (g - 1) as f64;
            se[b] = (var / g as f64).sqrt();
        }
    }
    Series { mean, se }
}

fn assemble(
    consts: &DeviceConstants,
    drive: &DriveWaveform,
    cfg: &McConfig,
    shape: &RunShape,
    tables: &Tables,
    accs: Vec<GroupAcc>,
) -> EnsembleStats {
    let bins = shape.bins;
    let period = drive.period();
    let periods = cfg.periods_measure as u64;
    let mut groups = Vec::with_capacity(accs.len());
    let mut cross_moment = [
        vec![0.0; bins * bins],
        vec![0.0; bins * bins],
        vec![0.0; bins * bins],
    ];
    let mut event_counts = [[0u64; 2]; 3];
    let mut dn_total = 0i64;
    let mut max_rate_dt = 0.0f64;
    let mut hist_raw: Vec<(Vec<u64>, u64, u64)> = (0..shape.hist_bins.len())
        .map(|_| (vec![0u64; shape.hist_size * shape.hist_size], 0, 0))
        .collect();
    let mut total_snap_weight = 0u64;

    // Displacement-current part, exact per bin.
    let bin_dt = period / bins as f64;
    let dv_bin: Vec<f64> = (0..bins)
        .map(|b| {
            let t0 = b as f64 * bin_dt;
            let t1 = (b + 1) as f64 * bin_dt;
            (drive.voltage(t1) - drive.voltage(t0)) / bin_dt
        })
        .collect();
    let kappa = consts.kappa;
    let c0 = consts.c0;

    for acc in &accs {
        let snap_count = (acc.samples * periods) as f64;
        let rate_count = snap_count * shape.steps_per_bin as f64;
        let mut snap_mean = vec![0.0; bins * ch::NCH];
        for (dst, src) in snap_mean.iter_mut().zip(&acc.snap) {
            *dst = src / snap_count;
        }
        let mut rate_mean: [[Vec<f64>; 2]; 3] = Default::default();
        for j in 0..3 {
            for dir in 0..2 {
                rate_mean[j][dir] = (0..bins)
                    .map(|b| acc.rate[b * 6 + j * 2 + dir] / rate_count)
                    .collect();
            }
        }
        for c in 0..3 {
            for (dst, src) in cross_moment[c].iter_mut().zip(&acc.cross[c]) {
                *dst += src;
            }
        }
        for j in 0..3 {
            for d in 0..2 {
                event_counts[j][d] += acc.events[j][d];
            }
        }
        for (h, (counts, total, overflow)) in acc.hists.iter().enumerate() {
            for (dst, src) in hist_raw[h].0.iter_mut().zip(counts) {
                *dst += src;
            }
            hist_raw[h].1 += total;
            hist_raw[h].2 += overflow;
        }
        dn_total += acc.dn_total;
        max_rate_dt = max_rate_dt.max(acc.max_rate_dt);
        total_snap_weight += acc.samples * periods;
        let current: Vec<f64> = (0..bins)
            .map(|b| {
                let tun: f64 = (0..3)
                    .map(|j| kappa[j] * (rate_mean[j][0][b] - rate_mean[j][1][b]))
                    .sum();
                c0 * dv_bin[b] + Q_E * tun
            })
            .collect();
        groups.push(GroupStats {
            samples: acc.samples,
            snap_mean,
            rate_mean,
            current,
        });
    }
    for c in &mut cross_moment {
        for v in c.iter_mut() {
            *v /= total_snap_weight as f64;
        }
    }

    let snap =
        |idx: usize| series_from_groups(&groups, bins, move |g, b| g.snap_mean[b * ch::NCH + idx]);

    let mean_n = [snap(ch::N1), snap(ch::N2)];
    let mean_x = [snap(ch::X1), snap(ch::X2)];
    let mean_v = [snap(ch::V1), snap(ch::V2)];
    let var_ch = |sq: usize, m: usize| {
        series_from_groups(&groups, bins, move |g, b| {
            let mm = g.snap_mean[b * ch::NCH + m];
            (g.snap_mean[b * ch::NCH + sq] - mm * mm).max(0.0)
        })
    };
    let cov_ch = |pq: usize, a: usize, bidx: usize| {
        series_from_groups(&groups, bins, move |g, b| {
            g.snap_mean[b * ch::NCH + pq]
                - g.snap_mean[b * ch::NCH + a] * g.snap_mean[b * ch::NCH + bidx]
        })
    };
    let var_n = [var_ch(ch::N1SQ, ch::N1), var_ch(ch::N2SQ, ch::N2)];
    let cov_n12 = cov_ch(ch::N1N2, ch::N1, ch::N2);
    let var_x = [var_ch(ch::X1SQ, ch::X1), var_ch(ch::X2SQ, ch::X2)];
    let var_v = [var_ch(ch::V1SQ, ch::V1), var_ch(ch::V2SQ, ch::V2)];
    let cov_xv = [
        cov_ch(ch::X1V1, ch::X1, ch::V1),
        cov_ch(ch::X2V2, ch::X2, ch::V2),
    ];
    let cov_xn = [
        cov_ch(ch::X1N1, ch::X1, ch::N1),
        cov_ch(ch::X2N2, ch::X2, ch::N2),
    ];
    let cov_vn = [
        cov_ch(ch::V1N1, ch::V1, ch::N1),
        cov_ch(ch::V2N2, ch::V2, ch::N2),
    ];

    let gamma_net: [Series; 3] = std::array::from_fn(|j| {
        series_from_groups(&groups, bins, move |g, b| {
            g.rate_mean[j][0][b] - g.rate_mean[j][1][b]
        })
    });
    let gamma_star: [Series; 3] = std::array::from_fn(|j| {
        series_from_groups(&groups, bins, move |g, b| {
            g.rate_mean[j][0][b] + g.rate_mean[j][1][b]
        })
    });

    let current = series_from_groups(&groups, bins, |g, b| g.current[b]);

    // DC current per junction: q times the period-averaged net rate.
    let mut i_dc = [0.0; 3];
    let mut i_dc_se = [0.0; 3];
    for j in 0..3 {
        let vals: Vec<f64> = groups
            .iter()
            .map(|g| {
                Q_E * (0..bins)
                    .map(|b| g.rate_mean[j][0][b] - g.rate_mean[j][1][b])
                    .sum::<f64>()
                    / bins as f64
            })
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        i_dc[j] = m;
        if vals.len() > 1 {
            let var =
                vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
            i_dc_se[j] = (var / vals.len() as f64).sqrt();
        }
    }
    let i_dc_spread = i_dc.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - i_dc.iter().fold(f64::INFINITY, |a, &b| a.min(b));

    let histograms = shape
        .hist_bins
        .iter()
        .zip(hist_raw)
        .map(|(&phase_bin, (counts, total, overflow))| PhaseHistogram {
            phase_bin,
            origin: [
                tables.n_init[0] - shape.hist_halfwidth,
                tables.n_init[1] - shape.hist_halfwidth,
            ],
            size: shape.hist_size,
            counts,
            total,
            overflow,
        })
        .collect();

    let expected_flow = event_counts[0][0] as i64
        - event_counts[0][1] as i64
        - (event_counts[2][0] as i64 - event_counts[2][1] as i64);
    let t_grid = (0..bins).map(|b| b as f64 * bin_dt).collect();

    EnsembleStats {
        bins,
        period,
        dt: tables.dt,
        steps_per_period: tables.steps,
        samples: cfg.samples,
        periods_measure: cfg.periods_measure,
        t_grid,
        mean_n,
        mean_x,
        mean_v,
        var_n,
        cov_n12,
        var_x,
        var_v,
        cov_xv,
        cov_xn,
        cov_vn,
        gamma_net,
        gamma_star,
        current,
        i_dc,
        i_dc_se,
        i_dc_spread,
        cross_moment,
        histograms,
        event_counts,
        charge_flow_check: dn_total - expected_flow,
        max_rate_dt,
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::derive_constants;
    use crate::presets;

    fn quick_cfg() -> McConfig {
        McConfig {
            samples: 400,
            periods_burnin: 6,
            periods_measure: 4,
            groups: 8,
            bins: 16,
            master_seed: 7,
            hist_bins: vec![0, 4, 8, 12],
            ..Default::default()
        }
    }

    #[test]
    fn equilibrium_has_zero_means() {
        let input = presets::series_chain_default();
        let consts = derive_constants(&input).unwrap();
        let mut params = presets::params_default();
        params.temperature = 20.0; // measurable equilibrium rates
        let drive = DriveWaveform::sine(0.0, 1.2e8);
        let stats = simulate(&consts, &params, &drive, &quick_cfg()).unwrap();
        // Static deflection from charge fluctuations: the force is quadratic
        // in n, so its equilibrium mean is tr(F0 D) rather than zero.
        let mut x_static = [0.0; 2];
        for s in 0..2 {
            let d11: f64 = stats.var_n[0].mean.iter().sum::<f64>() / stats.bins as f64;
            let d22: f64 = stats.var_n[1].mean.iter().sum::<f64>() / stats.bins as f64;
            let d12: f64 = stats.cov_n12.mean.iter().sum::<f64>() / stats.bins as f64;
            let f = consts.f0[s][0][0] * d11
                + (consts.f0[s][0][1] + consts.f0[s][1][0]) * d12
                + consts.f0[s][1][1] * d22;
            x_static[s] = f / (params.mass[s] * params.omega[s] * params.omega[s]);
        }
        for s in 0..2 {
            for b in 0..stats.bins {
                let m = stats.mean_n[s].mean[b];
                let se = stats.mean_n[s].se[b].max(1e-6);
                assert!(m.abs() < 3.0 * se + 0.05, "n{s} bin {b}: {m} +- {se}");
                let dx = stats.mean_x[s].mean[b] - x_static[s];
                let se_x = stats.mean_x[s].se[b].max(1e-3 * x_static[s].abs()).max(1e-18);
                assert!(dx.abs() < 4.0 * se_x, "x{s} bin {b}: {dx} vs se {se_x}");
                assert!(
                    stats.mean_v[s].mean[b].abs()
                        < 4.0 * stats.mean_v[s].se[b].max(1e-18),
                    "v{s} bin {b}"
                );
            }
        }
    }

    #[test]
    fn charge_bookkeeping_is_exact() {
        let input = presets::series_chain_default();
        let consts = derive_constants(&input).unwrap();
        let params = presets::params_default();
        let drive = DriveWaveform::sine(0.04, 1.2e8);
        let stats = simulate(&consts, &params, &drive, &quick_cfg()).unwrap();
        assert_eq!(stats.charge_flow_check, 0);
        assert!(stats.event_counts.iter().flatten().sum::<u64>() > 0);
    }

    #[test]
    fn reproducible_across_worker_counts() {
        let input = presets::series_chain_default();
        let consts = derive_constants(&input).unwrap();
        let params = presets::params_default();
        let drive = DriveWaveform::sine(0.04, 1.2e8);
        let mut cfg = quick_cfg();
        cfg.samples = 64;
        cfg.workers = 1;
        let a = simulate(&consts, &params, &drive, &cfg).unwrap();
        cfg.workers = 3;
        let b = simulate(&consts, &params, &drive, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn event_budget_abort_reports_time_and_sum() {
        let input = presets::series_chain_default();
        let consts = derive_constants(&input).unwrap();
        let params = presets::params_default();
        let drive = DriveWaveform::sine(0.5, 1.2e8);
        let mut cfg = quick_cfg();
        cfg.dt = drive.period() / 64.0; // way too coarse
        match simulate(&consts, &params, &drive, &cfg) {
            Err(McError::EventBudgetExceeded { rate_dt, .. }) => {
                assert!(rate_dt > cfg.event_budget);
            }
            other => panic!("expected event-budget abort, got {other:?}"),
        }
    }

    #[test]
    fn auto_dt_satisfies_budget() {
        let input = presets::series_chain_default();
        let consts = derive_constants(&input).unwrap();
        let params = presets::params_default();
        let drive = DriveWaveform::sine(0.1, 1.2e8);
        let mut cfg = quick_cfg();
        cfg.dt = drive.period() / 200.0;
        let dt = auto_dt(&consts, &params, &drive, &cfg).unwrap();
        assert!(dt <= cfg.dt);
        cfg.dt = dt;
        cfg.samples = 16;
        assert!(simulate(&consts, &params, &drive, &cfg).is_ok());
    }

    #[test]
    fn histogram_mass_accounts_for_every_snapshot() {
        let input = presets::series_chain_default();
        let consts = derive_constants(&input).unwrap();
        let params = presets::params_default();
        let drive = DriveWaveform::sine(0.04, 1.2e8);
        let cfg = quick_cfg();
        let stats = simulate(&consts, &params, &drive, &cfg).unwrap();
        for h in &stats.histograms {
            assert_eq!(h.total, cfg.samples * cfg.periods_measure as u64);
            assert_eq!(h.counts.iter().sum::<u64>() + h.overflow, h.total);
            assert_eq!(h.overflow, 0);
        }
    }
}
