//! Interactive browser demo: three explorable views of the coupled-shuttle
//! models, rendered as SVG strings for a plain static page.
//!
//! Build with `wasm-pack build --target web crates/shuttlesim-demo` and serve
//! the `www/` directory next to the generated `pkg/`.

use shuttlesim::analysis::{self, SweepAxis};
use shuttlesim::device::{derive_constants, DeviceConstants, Q_E};
use shuttlesim::drive::DriveWaveform;
use shuttlesim::moments::{self, ClosureConfig, Tier};
use shuttlesim::output::{svg_line_plot, PlotSeries};
use shuttlesim::presets::SeriesChain;
use shuttlesim::ShuttleParams;
use wasm_bindgen::prelude::*;

fn demo_device(gap_nm: f64, temperature: f64) -> (DeviceConstants, ShuttleParams) {
    let chain = SeriesChain {
        c_j: [8.0e-18, 1.6e-17, 8.0e-18],
        shuttle_ground: 0.0,
        drain_ground: 1.0e-17,
        gap: gap_nm * 1e-9,
        gate: None,
    };
    let consts = derive_constants(&chain.build()).expect("demo chain is valid");
    let params = ShuttleParams::with_quality(
        [3.3e8, 3.4e8],
        [1.0e-18, 1.05e-18],
        10.0,
        [1.0e-10, 1.0e-10, 1.0e-10],
        [2.0e8, 2.0e8, 2.0e8],
        temperature,
    );
    (consts, params)
}

fn tier_of(name: &str) -> Result<Tier, JsValue> {
    match name {
        "circuit" => Ok(Tier::Circuit),
        "variance" => Ok(Tier::Variance),
        "full" => Ok(Tier::Full),
        other => Err(JsValue::from_str(&format!("unknown tier `{other}`"))),
    }
}

/// Small-signal response of the symmetric device: electron-number amplitude
/// and phase lag against drive frequency, with the critical frequency from
/// the closed form.
#[wasm_bindgen]
pub fn small_signal_view(e2_mev: f64, r1_gohm: f64, r2_gohm: f64, kappa1: f64, v0_mv: f64) -> String {
    let e2 = e2_mev * 1e-3 * Q_E;
    let (r1, r2) = (r1_gohm * 1e9, r2_gohm * 1e9);
    let v0 = v0_mv * 1e-3;
    let probe = analysis::small_signal_from(e2, kappa1, r1, r2, v0, 1.0);
    let f_c = probe.omega_c / (2.0 * std::f64::consts::PI);
    let mut amp = Vec::new();
    let mut phase = Vec::new();
    for i in 0..160 {
        let f = f_c * 10f64.powf(-2.0 + 4.0 * i as f64 / 159.0);
        let ss = analysis::small_signal_from(e2, kappa1, r1, r2, v0, 2.0 * std::f64::consts::PI * f);
        amp.push(((f / f_c).log10(), ss.amplitude.abs()));
        phase.push(((f / f_c).log10(), ss.phi.to_degrees()));
    }
    let svg_a = svg_line_plot(
        &format!("|n1| vs drive frequency (f_c = {:.1} MHz)", f_c / 1e6),
        "log10(f / f_c)",
        "|n1| [electrons]",
        &[PlotSeries {
            label: "|n1|".into(),
            points: amp,
        }],
    );
    let svg_p = svg_line_plot(
        "phase lag vs drive frequency",
        "log10(f / f_c)",
        "phase [deg]",
        &[PlotSeries {
            label: "phi".into(),
            points: phase,
        }],
    );
    format!("{svg_a}\u{1e}{svg_p}")
}

/// One steady-state drive period of the chosen moment tier.
#[wasm_bindgen]
pub struct PeriodView {
    svg_n: String,
    svg_x: String,
    svg_current: String,
    summary: String,
}

#[wasm_bindgen]
impl PeriodView {
    #[wasm_bindgen(getter)]
    pub fn svg_n(&self) -> String {
        self.svg_n.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn svg_x(&self) -> String {
        self.svg_x.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn svg_current(&self) -> String {
        self.svg_current.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn summary(&self) -> String {
        self.summary.clone()
    }
}

#[wasm_bindgen]
pub fn period_view(
    tier: &str,
    v0_mv: f64,
    freq_mhz: f64,
    harm2_pct: f64,
    gap_nm: f64,
    temperature: f64,
) -> Result<PeriodView, JsValue> {
    let (consts, params) = demo_device(gap_nm, temperature);
    let mut drive = DriveWaveform::sine(v0_mv * 1e-3, 2.0 * std::f64::consts::PI * freq_mhz * 1e6);
    if harm2_pct != 0.0 {
        let amp = harm2_pct / 100.0 * drive.v0;
        drive = drive.with_harmonic(2, amp, 0.0);
    }
    let cfg = ClosureConfig {
        tier: tier_of(tier)?,
        steps_per_period: 1024,
        bins: 128,
        tol: 1e-7,
        max_periods: 300,
        ..Default::default()
    };
    let tr = moments::integrate(&consts, &params, &drive, &cfg)
        .map_err(|e| JsValue::from_str(&e.to_string()))?;
    let zip = |f: &dyn Fn(&moments::MomentState) -> f64| -> Vec<(f64, f64)> {
        tr.t_grid
            .iter()
            .zip(&tr.states)
            .map(|(&t, s)| (t * 1e9, f(s)))
            .collect()
    };
    let svg_n = svg_line_plot(
        "mean electron numbers over one period",
        "t [ns]",
        "<n>",
        &[
            PlotSeries {
                label: "n1".into(),
                points: zip(&|s| s.n[0]),
            },
            PlotSeries {
                label: "n2".into(),
                points: zip(&|s| s.n[1]),
            },
        ],
    );
    let svg_x = svg_line_plot(
        "mean displacements",
        "t [ns]",
        "<x> [pm]",
        &[
            PlotSeries {
                label: "x1".into(),
                points: zip(&|s| s.x[0] * 1e12),
            },
            PlotSeries {
                label: "x2".into(),
                points: zip(&|s| s.x[1] * 1e12),
            },
        ],
    );
    let svg_current = svg_line_plot(
        "macroscopic current",
        "t [ns]",
        "I [pA]",
        &[PlotSeries {
            label: "I".into(),
            points: tr
                .t_grid
                .iter()
                .zip(&tr.current)
                .map(|(&t, &i)| (t * 1e9, i * 1e12))
                .collect(),
        }],
    );
    let summary = format!(
        "tier {} | converged after {} periods: {} | I_dc = {:.4e} pA | junction spread {:.1e} pA",
        tr.tier,
        tr.periods_run,
        if tr.converged { "yes" } else { "no" },
        tr.i_dc[1] * 1e12,
        (tr.i_dc.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            - tr.i_dc.iter().fold(f64::INFINITY, |a, &b| a.min(b)))
            * 1e12,
    );
    Ok(PeriodView {
        svg_n,
        svg_x,
        svg_current,
        summary,
    })
}

/// Rectified DC current against the strength of the symmetry breaking:
/// sweep of the second-harmonic fraction.
#[wasm_bindgen]
pub fn rectification_view(
    tier: &str,
    v0_mv: f64,
    freq_mhz: f64,
    gap_nm: f64,
    temperature: f64,
    max_fraction_pct: f64,
    points: usize,
) -> Result<String, JsValue> {
    let (consts, params) = demo_device(gap_nm, temperature);
    let drive = DriveWaveform::sine(v0_mv * 1e-3, 2.0 * std::f64::consts::PI * freq_mhz * 1e6);
    let cfg = ClosureConfig {
        tier: tier_of(tier)?,
        steps_per_period: 1024,
        bins: 64,
        tol: 1e-7,
        max_periods: 300,
        ..Default::default()
    };
    let n = points.clamp(2, 33);
    let grid: Vec<f64> = (0..n)
        .map(|i| max_fraction_pct / 100.0 * i as f64 / (n - 1) as f64)
        .collect();
    let table = analysis::sweep(
        &consts,
        &params,
        &drive,
        SweepAxis::Harmonic2Fraction,
        &grid,
        &cfg,
    );
    let pts: Vec<(f64, f64)> = table
        .points
        .iter()
        .filter(|p| p.error.is_none())
        .map(|p| (p.value * 100.0, p.i_dc[1] * 1e12))
        .collect();
    Ok(svg_line_plot(
        "rectified DC current vs 2nd-harmonic fraction",
        "harmonic fraction [%]",
        "I_dc [pA]",
        &[PlotSeries {
            label: "I_dc".into(),
            points: pts,
        }],
    ))
}
