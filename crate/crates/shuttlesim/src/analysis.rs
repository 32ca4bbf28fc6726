//! Physics-level post-processing: small-signal closed forms, DC current
//! extraction, half-period antisymmetry checks, harmonic content, and
//! parameter sweeps.

use crate::device::{DeviceConstants, ShuttleParams, Q_E};
use crate::drive::DriveWaveform;
use crate::moments::{self, ClosureConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisError {
    AsymmetricJunctions(String),
    NotPureSine,
    BadInput(String),
}

impl std::fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnalysisError::AsymmetricJunctions(m) => {
                write!(f, "small-signal estimate needs symmetric junctions: {m}")
            }
            AnalysisError::NotPureSine => {
                write!(f, "small-signal estimate needs a pure sine drive")
            }
            AnalysisError::BadInput(m) => write!(f, "bad analysis input: {m}"),
        }
    }
}

impl std::error::Error for AnalysisError {}

/// Minimal complex value for the harmonic coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    pub fn from_polar(r: f64, phi: f64) -> Self {
        Complex {
            re: r * phi.cos(),
            im: r * phi.sin(),
        }
    }

    pub fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }

    pub fn arg(self) -> f64 {
        self.im.atan2(self.re)
    }
}

impl std::ops::Add for Complex {
    type Output = Complex;
    fn add(self, o: Complex) -> Complex {
        Complex::new(self.re + o.re, self.im + o.im)
    }
}

impl std::ops::Neg for Complex {
    type Output = Complex;
    fn neg(self) -> Complex {
        Complex::new(-self.re, -self.im)
    }
}

/// Closed-form small-signal response for symmetric junctions under a pure
/// sine drive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallSignalResult {
    /// Complex amplitude of `<n1>`; the time response lags the drive by
    /// `phi`, i.e. `<n1(t)> = |n_bar| sign sin(w t - phi)`.
    pub n_bar: Complex,
    /// Signed real amplitude `(q V0/E2)(kappa1 - R1/Rt)/sqrt((w/wc)^2+1)`.
    pub amplitude: f64,
    /// Phase lag `atan(w / w_c)` in radians.
    pub phi: f64,
    /// Critical angular frequency `E2/q^2 * Rt/(R1 R2)`.
    pub omega_c: f64,
}

impl SmallSignalResult {
    /// The partner shuttle's amplitude: `n_bar2 = -n_bar1` exactly.
    pub fn n_bar2(&self) -> Complex {
        -self.n_bar
    }
}

/// Small-signal electron-number amplitude, Ohmic-regime circuit model with
/// symmetric junctions.
pub fn small_signal(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    drive: &DriveWaveform,
) -> Result<SmallSignalResult, AnalysisError> {
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    if rel(params.r0[0], params.r0[2]) > 1e-9 {
        return Err(AnalysisError::AsymmetricJunctions(format!(
            "R1 = {:.3e}, R3 = {:.3e}",
            params.r0[0], params.r0[2]
        )));
    }
    if rel(consts.e0[0], consts.e0[2]) > 1e-9 {
        return Err(AnalysisError::AsymmetricJunctions(format!(
            "E1 = {:.3e} J, E3 = {:.3e} J",
            consts.e0[0], consts.e0[2]
        )));
    }
    if (consts.kappa[0] - consts.kappa[2]).abs() > 1e-9 {
        return Err(AnalysisError::AsymmetricJunctions(format!(
            "kappa1 = {:.6}, kappa3 = {:.6}",
            consts.kappa[0], consts.kappa[2]
        )));
    }
    if !drive.is_pure_sine() {
        return Err(AnalysisError::NotPureSine);
    }
    Ok(small_signal_from(
        consts.e0[1],
        consts.kappa[0],
        params.r0[0],
        params.r0[1],
        drive.v0,
        drive.omega,
    ))
}

/// The same closed form from raw symmetric-junction parameters.
pub fn small_signal_from(
    e2: f64,
    kappa1: f64,
    r1: f64,
    r2: f64,
    v0: f64,
    omega: f64,
) -> SmallSignalResult {
    let r_t = 2.0 * r1 + r2;
    let omega_c = e2 / (Q_E * Q_E) * r_t / (r1 * r2);
    let phi = (omega / omega_c).atan();
    let amplitude = (Q_E * v0 / e2) * (kappa1 - r1 / r_t)
        / ((omega / omega_c).powi(2) + 1.0).sqrt();
    SmallSignalResult {
        n_bar: Complex::from_polar(amplitude.abs(), phi),
        amplitude,
        phi,
        omega_c,
    }
}

/// Period-averaged DC current from per-junction expected-rate series.
#[derive(Debug, Clone, PartialEq)]
pub struct DcCurrent {
    /// `q w/2pi * integral <Gamma_j> dt` per junction.
    pub i_dc: [f64; 3],
    /// Max minus min across junctions.
    pub spread: f64,
    /// Worst relative endpoint mismatch of the inputs; nonzero values mean
    /// the series was not sampled over exactly one steady-state period.
    pub endpoint_residual: f64,
    pub periodic: bool,
}

/// Trapezoidal Eq-27 average over one period. Each series must hold `M + 1`
/// uniform samples spanning exactly one period, endpoints included.
pub fn dc_current(gamma: &[&[f64]; 3]) -> Result<DcCurrent, AnalysisError> {
    let m = gamma[0].len();
    if m < 3 || gamma.iter().any(|g| g.len() != m) {
        return Err(AnalysisError::BadInput(
            "need three equal-length series of at least 3 samples".into(),
        ));
    }
    let mut i_dc = [0.0; 3];
    let mut endpoint = 0.0f64;
    for (j, g) in gamma.iter().enumerate() {
        let scale = g.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
        endpoint = endpoint.max((g[m - 1] - g[0]).abs() / scale);
        let inner: f64 = g[1..m - 1].iter().sum();
        let avg = (0.5 * (g[0] + g[m - 1]) + inner) / (m - 1) as f64;
        i_dc[j] = Q_E * avg;
    }
    let spread = i_dc.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - i_dc.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    Ok(DcCurrent {
        i_dc,
        spread,
        endpoint_residual: endpoint,
        periodic: endpoint < 1e-3,
    })
}

/// `max_t |I(t) + I(t + T/2)| / max_t |I(t)|` on an even uniform period grid.
pub fn antisymmetry_residual(current: &[f64]) -> Result<f64, AnalysisError> {
    let m = current.len();
    if m < 2 || m % 2 != 0 {
        return Err(AnalysisError::BadInput(
            "need an even number of samples over one period".into(),
        ));
    }
    let half = m / 2;
    let scale = current.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut worst = 0.0f64;
    for b in 0..half {
        worst = worst.max((current[b] + current[b + half]).abs());
    }
    Ok(worst / scale.max(1e-300))
}

/// DFT coefficients `c_k = (1/M) sum f(t_m) exp(-i k w t_m)` for
/// `k = 0..=max_order` on `M` uniform samples spanning one period
/// (no duplicated endpoint). A real series is then
/// `f(t) ~= c_0 + sum_k 2 Re[c_k exp(i k w t)]`.
pub fn harmonic_decompose(series: &[f64], max_order: usize) -> Vec<Complex> {
    let m = series.len();
    let mut out = Vec::with_capacity(max_order + 1);
    for k in 0..=max_order {
        let mut acc = Complex::default();
        for (idx, &f) in series.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (k * idx) as f64 / m as f64;
            acc.re += f * ang.cos();
            acc.im += f * ang.sin();
        }
        out.push(Complex::new(acc.re / m as f64, acc.im / m as f64));
    }
    out
}

/// Swept parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Drive angular frequency (rad/s).
    Frequency,
    /// Drive amplitude V0 (volts).
    Amplitude,
    /// Second-harmonic fraction of V0 (unitless).
    Harmonic2Fraction,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepAxis::Frequency => write!(f, "omega[rad/s]"),
            SweepAxis::Amplitude => write!(f, "v0[V]"),
            SweepAxis::Harmonic2Fraction => write!(f, "harmonic2_fraction[1]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub i_dc: [f64; 3],
    /// Fundamental-harmonic amplitude and phase of `<n1>(t)`.
    pub n1_amplitude: f64,
    pub n1_phase: f64,
    pub n2_amplitude: f64,
    pub x_amplitude: [f64; 2],
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

/// Run the chosen moment tier over a parameter grid. Failures are recorded
/// per point and the sweep continues.
pub fn sweep(
    consts: &DeviceConstants,
    params: &ShuttleParams,
    base_drive: &DriveWaveform,
    axis: SweepAxis,
    grid: &[f64],
    cfg: &ClosureConfig,
) -> SweepTable {
    let mut points = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut drive = base_drive.clone();
        match axis {
            SweepAxis::Frequency => drive.omega = value,
            SweepAxis::Amplitude => drive.v0 = value,
            SweepAxis::Harmonic2Fraction => {
                drive.harmonics.retain(|h| h.order != 2);
                if value != 0.0 {
                    let amp = value * drive.v0;
                    drive = drive.with_harmonic(2, amp, 0.0);
                }
            }
        }
        match moments::integrate(consts, params, &drive, cfg) {
            Ok(tr) => {
                let n1: Vec<f64> = tr.states.iter().map(|s| s.n[0]).collect();
                let n2: Vec<f64> = tr.states.iter().map(|s| s.n[1]).collect();
                let c1 = harmonic_decompose(&n1, 1);
                let c2 = harmonic_decompose(&n2, 1);
                let x_amp = [
                    tr.states.iter().fold(0.0f64, |a, s| a.max(s.x[0].abs())),
                    tr.states.iter().fold(0.0f64, |a, s| a.max(s.x[1].abs())),
                ];
                points.push(SweepPoint {
                    value,
                    i_dc: tr.i_dc,
                    n1_amplitude: 2.0 * c1[1].abs(),
                    n1_phase: c1[1].arg(),
                    n2_amplitude: 2.0 * c2[1].abs(),
                    x_amplitude: x_amp,
                    converged: tr.converged,
                    error: None,
                });
            }
            Err(e) => points.push(SweepPoint {
                value,
                i_dc: [f64::NAN; 3],
                n1_amplitude: f64::NAN,
                n1_phase: f64::NAN,
                n2_amplitude: f64::NAN,
                x_amplitude: [f64::NAN; 2],
                converged: false,
                error: Some(e.to_string()),
            }),
        }
    }
    SweepTable { axis, points }
}
