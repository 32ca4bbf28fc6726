//! Command-line orchestration: config ingestion, run dispatch, persistence.
//!
//! Subcommands: `derive`, `mc`, `moments`, `circuit`, `reference`, `sweep`,
//! `compare`, `symmetry`. Exit codes: 0 success, 1 validation error,
//! 2 runtime abort, 3 ran but did not converge (results still written).

use crate::analysis::{self, SweepAxis};
use crate::config::{self, RunConfig, RunTier};
use crate::device::{derive_constants, DeviceConstants, Q_E};
use crate::master::{self, LatticeBounds, MasterConfig, MasterResult};
use crate::moments::{self, ClosureConfig, MomentTrajectory, Tier};
use crate::monte_carlo::{self, EnsembleStats};
use crate::output::{self, PlotSeries, RunManifest, Table};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_UNCONVERGED: i32 = 3;

#[derive(Debug, Clone, Default)]
pub struct CliOptions {
    pub subcommand: String,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub samples: Option<u64>,
    pub tier: Option<RunTier>,
    pub plot: Option<bool>,
    pub dt: Option<f64>,
    pub order: Option<usize>,
    pub axis: Option<SweepAxis>,
    pub from: Option<f64>,
    pub to: Option<f64>,
    pub points: Option<usize>,
    pub log_grid: bool,
    pub with_reference: bool,
}

pub const USAGE: &str = "\
usage: shuttlesim <subcommand> --config PATH [options]

subcommands:
  derive      derive and print the electrostatic device constants
  circuit     run the means-only circuit model to periodic steady state
  moments     run the configured moment tier (circuit|variance|full)
  mc          run the kinetic Monte-Carlo ensemble
  reference   run the lattice master-equation reference solver
  sweep       run a moment-tier parameter sweep (--axis, --from, --to, --points)
  symmetry    check the half-period current antisymmetry and its breaking
  compare     cross-validate Monte-Carlo against the moment tier

options:
  --config PATH     run configuration file (required)
  --out DIR         output directory for CSV/SVG results
  --seed N          Monte-Carlo master seed (overrides SHUTTLESIM_SEED and config)
  --samples N       Monte-Carlo sample count override
  --tier T          circuit | variance | full
  --plot/--no-plot  emit SVG plots alongside CSVs
  --dt SECONDS      Monte-Carlo step override (0 = auto)
  --order L         moment truncation order (even, 2..=8)
  --axis A          sweep axis: frequency | amplitude | harmonic2
  --from X --to Y   sweep range
  --points N        sweep grid size
  --log             logarithmic sweep grid
  --with-reference  include the lattice solver in `compare`
";

pub fn parse_args(args: &[String]) -> Result<CliOptions, String> {
    let mut opts = CliOptions::default();
    let mut it = args.iter().peekable();
    let sub = it.next().ok_or_else(|| USAGE.to_string())?;
    opts.subcommand = sub.clone();
    let known = [
        "derive", "circuit", "moments", "mc", "reference", "sweep", "symmetry", "compare",
    ];
    if !known.contains(&sub.as_str()) {
        return Err(format!("unknown subcommand `{sub}`\n\n{USAGE}"));
    }
    while let Some(arg) = it.next() {
        let mut take = |name: &str| -> Result<String, String> {
            it.next()
                .cloned()
                .ok_or_else(|| format!("flag {name} needs a value"))
        };
        match arg.as_str() {
            "--config" => opts.config = Some(PathBuf::from(take("--config")?)),
            "--out" => opts.out = Some(PathBuf::from(take("--out")?)),
            "--seed" => {
                opts.seed = Some(
                    take("--seed")?
                        .parse()
                        .map_err(|_| "--seed needs an integer".to_string())?,
                )
            }
            "--samples" => {
                opts.samples = Some(
                    take("--samples")?
                        .parse()
                        .map_err(|_| "--samples needs an integer".to_string())?,
                )
            }
            "--tier" => {
                opts.tier = Some(match take("--tier")?.as_str() {
                    "circuit" => RunTier::Circuit,
                    "variance" => RunTier::Variance,
                    "full" => RunTier::Full,
                    other => return Err(format!("unknown tier `{other}`")),
                })
            }
            "--plot" => opts.plot = Some(true),
            "--no-plot" => opts.plot = Some(false),
            "--dt" => {
                opts.dt = Some(
                    take("--dt")?
                        .parse()
                        .map_err(|_| "--dt needs a number".to_string())?,
                )
            }
            "--order" => {
                opts.order = Some(
                    take("--order")?
                        .parse()
                        .map_err(|_| "--order needs an integer".to_string())?,
                )
            }
            "--axis" => {
                opts.axis = Some(match take("--axis")?.as_str() {
                    "frequency" => SweepAxis::Frequency,
                    "amplitude" => SweepAxis::Amplitude,
                    "harmonic2" => SweepAxis::Harmonic2Fraction,
                    other => return Err(format!("unknown sweep axis `{other}`")),
                })
            }
            "--from" => {
                opts.from = Some(
                    take("--from")?
                        .parse()
                        .map_err(|_| "--from needs a number".to_string())?,
                )
            }
            "--to" => {
                opts.to = Some(
                    take("--to")?
                        .parse()
                        .map_err(|_| "--to needs a number".to_string())?,
                )
            }
            "--points" => {
                opts.points = Some(
                    take("--points")?
                        .parse()
                        .map_err(|_| "--points needs an integer".to_string())?,
                )
            }
            "--log" => opts.log_grid = true,
            "--with-reference" => opts.with_reference = true,
            other => return Err(format!("unknown flag `{other}`\n\n{USAGE}")),
        }
    }
    Ok(opts)
}

struct Prepared {
    cfg: RunConfig,
    consts: DeviceConstants,
    out_dir: Option<PathBuf>,
    plot: bool,
    manifest: RunManifest,
    started: std::time::Instant,
}

fn prepare(opts: &CliOptions) -> Result<Prepared, (i32, String)> {
    let path = opts
        .config
        .as_ref()
        .ok_or((EXIT_VALIDATION, "--config PATH is required".to_string()))?;
    let mut cfg =
        config::parse_file(path).map_err(|e| (EXIT_VALIDATION, e.to_string()))?;

    // Seed precedence: flag > SHUTTLESIM_SEED > config.
    if let Ok(env_seed) = std::env::var("SHUTTLESIM_SEED") {
        if let Ok(v) = env_seed.parse::<u64>() {
            cfg.mc.master_seed = v;
        }
    }
    if let Some(seed) = opts.seed {
        cfg.mc.master_seed = seed;
    }
    if let Some(samples) = opts.samples {
        cfg.mc.samples = samples;
    }
    if let Some(tier) = opts.tier {
        cfg.tier = tier;
        cfg.closure.tier = tier.to_moment_tier();
    }
    if let Some(dt) = opts.dt {
        cfg.mc.dt = dt;
    }
    if let Some(order) = opts.order {
        cfg.closure.order = order;
    }
    let plot = opts.plot.unwrap_or(cfg.plot);
    let out_dir = opts
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from));
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir).map_err(|e| {
            (
                EXIT_VALIDATION,
                format!("cannot create output directory {}: {e}", dir.display()),
            )
        })?;
    }

    let consts =
        derive_constants(&cfg.cap).map_err(|e| (EXIT_VALIDATION, e.to_string()))?;

    let mut manifest = RunManifest::default();
    manifest.set("toolkit_version", env!("CARGO_PKG_VERSION"));
    manifest.set("subcommand", &opts.subcommand);
    manifest.set("config_hash", format!("{:016x}", cfg.content_hash));
    manifest.set("tier", format!("{}", cfg.closure.tier));
    manifest.set("order", cfg.closure.order);
    manifest.set("master_seed", cfg.mc.master_seed);
    manifest.set("mc_samples", cfg.mc.samples);
    manifest.set("mc_dt", output::format_float(cfg.mc.dt));
    manifest.set("event_budget", cfg.mc.event_budget);
    manifest.set("perturbed_u", cfg.mc.perturbed_u);
    manifest.set("frozen_mechanics", cfg.mc.frozen_mechanics);
    manifest.set("thermal_noise", cfg.mc.thermal_noise);
    manifest.set("k_mean_correction", "lognormal_half_lambda_sq");
    manifest.set("u_perturbation", "exact_first_order");
    manifest.set("mc_initial_n", "round(n_G B)");
    manifest.set("status", "running");
    let started = std::time::Instant::now();
    if let Some(dir) = &out_dir {
        // The manifest lands before any result file.
        manifest
            .write(dir)
            .map_err(|e| (EXIT_VALIDATION, format!("cannot write manifest: {e}")))?;
    }
    Ok(Prepared {
        cfg,
        consts,
        out_dir,
        plot,
        manifest,
        started,
    })
}

fn finish(p: &mut Prepared, converged: bool) -> i32 {
    p.manifest.set(
        "wall_clock_seconds",
        format!("{:.3}", p.started.elapsed().as_secs_f64()),
    );
    p.manifest.set("converged", converged);
    p.manifest
        .set("status", if converged { "done" } else { "not_converged" });
    if let Some(dir) = &p.out_dir {
        let _ = p.manifest.write(dir);
    }
    if converged {
        EXIT_OK
    } else {
        EXIT_UNCONVERGED
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(opts: &CliOptions) -> i32 {
    match dispatch(opts) {
        Ok(code) => code,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}

fn dispatch(opts: &CliOptions) -> Result<i32, (i32, String)> {
    match opts.subcommand.as_str() {
        "derive" => cmd_derive(opts),
        "circuit" | "moments" => cmd_moments(opts),
        "mc" => cmd_mc(opts),
        "reference" => cmd_reference(opts),
        "sweep" => cmd_sweep(opts),
        "symmetry" => cmd_symmetry(opts),
        "compare" => cmd_compare(opts),
        other => Err((EXIT_VALIDATION, format!("unknown subcommand `{other}`"))),
    }
}

fn cmd_derive(opts: &CliOptions) -> Result<i32, (i32, String)> {
    let mut p = prepare(opts)?;
    let c = &p.consts;
    println!("device constants");
    println!(
        "  E0 [J]    = {:.6e}  {:.6e}  {:.6e}",
        c.e0[0], c.e0[1], c.e0[2]
    );
    println!(
        "  E0 [eV]   = {:.6}  {:.6}  {:.6}",
        c.e0[0] / Q_E,
        c.e0[1] / Q_E,
        c.e0[2] / Q_E
    );
    println!(
        "  kappa     = {:.9}  {:.9}  {:.9}   (sum = {:.12})",
        c.kappa[0],
        c.kappa[1],
        c.kappa[2],
        c.kappa.iter().sum::<f64>()
    );
    println!("  zeta      = {:.9}  {:.9}", c.zeta[0], c.zeta[1]);
    println!("  C0 [F]    = {:.6e}", c.c0);
    println!(
        "  alpha_1   = {:.4e} {:.4e}  [1/m]",
        c.alpha[0][0], c.alpha[0][1]
    );
    println!(
        "  alpha_2   = {:.4e} {:.4e}  [1/m]",
        c.alpha[1][0], c.alpha[1][1]
    );
    println!("  gates     = {}", c.gates);
    if let Ok(ss) = analysis::small_signal(&p.consts, &p.cfg.params, &p.cfg.drive) {
        println!(
            "  omega_c   = {:.4e} rad/s  (f_c = {:.4e} Hz)",
            ss.omega_c,
            ss.omega_c / (2.0 * std::f64::consts::PI)
        );
    }
    if let Some(dir) = &p.out_dir {
        let mut table = Table::new();
        table.push("junction[1]", vec![1.0, 2.0, 3.0]);
        table.push("e0[J]", c.e0.to_vec());
        table.push("kappa[1]", c.kappa.to_vec());
        write_table(dir, "constants.csv", &table)?;
    }
    Ok(finish(&mut p, true))
}

fn moment_table(tr: &MomentTrajectory) -> Table {
    let mut t = Table::new();
    t.push("time[s]", tr.t_grid.clone());
    let get = |f: &dyn Fn(&moments::MomentState) -> f64| -> Vec<f64> {
        tr.states.iter().map(f).collect()
    };
    t.push("n1[1]", get(&|s| s.n[0]));
    t.push("n2[1]", get(&|s| s.n[1]));
    t.push("x1[m]", get(&|s| s.x[0]));
    t.push("x2[m]", get(&|s| s.x[1]));
    t.push("v1[m/s]", get(&|s| s.v[0]));
    t.push("v2[m/s]", get(&|s| s.v[1]));
    t.push("d11[1]", get(&|s| s.d[0]));
    t.push("d22[1]", get(&|s| s.d[1]));
    t.push("d12[1]", get(&|s| s.d[2]));
    t.push("lambda1[m^2]", get(&|s| s.lam[0]));
    t.push("lambda2[m^2]", get(&|s| s.lam[1]));
    t.push("w1[m^2/s^2]", get(&|s| s.w[0]));
    t.push("w2[m^2/s^2]", get(&|s| s.w[1]));
    t.push("sigma1[m^2/s]", get(&|s| s.sig[0]));
    t.push("sigma2[m^2/s]", get(&|s| s.sig[1]));
    t.push("x1n1[m]", get(&|s| s.xn[0]));
    t.push("x2n2[m]", get(&|s| s.xn[1]));
    t.push("v1n1[m/s]", get(&|s| s.yn[0]));
    t.push("v2n2[m/s]", get(&|s| s.yn[1]));
    for j in 0..3 {
        t.push(format!("gamma{}[1/s]", j + 1), tr.gamma_net[j].clone());
    }
    t.push("current[A]", tr.current.clone());
    t
}

fn plot_trajectory(dir: &Path, tr: &MomentTrajectory) -> Result<(), (i32, String)> {
    let mk = |label: &str, data: Vec<(f64, f64)>| PlotSeries {
        label: label.to_string(),
        points: data,
    };
    let zip = |vals: &dyn Fn(&moments::MomentState) -> f64| -> Vec<(f64, f64)> {
        tr.t_grid
            .iter()
            .zip(&tr.states)
            .map(|(&t, s)| (t, vals(s)))
            .collect()
    };
    let svg = output::svg_line_plot(
        "mean electron numbers",
        "t [s]",
        "<n>",
        &[mk("n1", zip(&|s| s.n[0])), mk("n2", zip(&|s| s.n[1]))],
    );
    write_text(dir, "n_mean.svg", &svg)?;
    let svg = output::svg_line_plot(
        "mean displacements",
        "t [s]",
        "<x> [m]",
        &[mk("x1", zip(&|s| s.x[0])), mk("x2", zip(&|s| s.x[1]))],
    );
    write_text(dir, "x_mean.svg", &svg)?;
    let svg = output::svg_line_plot(
        "current",
        "t [s]",
        "I [A]",
        &[mk(
            "I",
            tr.t_grid
                .iter()
                .zip(&tr.current)
                .map(|(&t, &i)| (t, i))
                .collect(),
        )],
    );
    write_text(dir, "current.svg", &svg)?;
    Ok(())
}

fn cmd_moments(opts: &CliOptions) -> Result<i32, (i32, String)> {
    let mut p = prepare(opts)?;
    let mut closure = p.cfg.closure.clone();
    if opts.subcommand == "circuit" {
        closure.tier = Tier::Circuit;
    }
    let tr = moments::integrate(&p.consts, &p.cfg.params, &p.cfg.drive, &closure)
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    println!(
        "{} tier: {} periods, converged = {}",
        closure.tier, tr.periods_run, tr.converged
    );
    println!(
        "  I_dc per junction [A]: {:.6e}  {:.6e}  {:.6e}",
        tr.i_dc[0], tr.i_dc[1], tr.i_dc[2]
    );
    let n1: Vec<f64> = tr.states.iter().map(|s| s.n[0]).collect();
    let c1 = analysis::harmonic_decompose(&n1, 3);
    println!(
        "  <n1> fundamental amplitude = {:.6e}, phase = {:.4} rad",
        2.0 * c1[1].abs(),
        c1[1].arg()
    );
    p.manifest.set("periods_run", tr.periods_run);
    if let Some(dir) = p.out_dir.clone() {
        write_table(&dir, "series.csv", &moment_table(&tr))?;
        if p.plot {
            plot_trajectory(&dir, &tr)?;
        }
    }
    Ok(finish(&mut p, tr.converged))
}

fn mc_table(stats: &EnsembleStats) -> Table {
    let mut t = Table::new();
    t.push("time[s]", stats.t_grid.clone());
    let pairs: [(&str, &monte_carlo::Series); 11] = [
        ("n1[1]", &stats.mean_n[0]),
        ("n2[1]", &stats.mean_n[1]),
        ("x1[m]", &stats.mean_x[0]),
        ("x2[m]", &stats.mean_x[1]),
        ("v1[m/s]", &stats.mean_v[0]),
        ("v2[m/s]", &stats.mean_v[1]),
        ("d11[1]", &stats.var_n[0]),
        ("d22[1]", &stats.var_n[1]),
        ("d12[1]", &stats.cov_n12),
        ("lambda1[m^2]", &stats.var_x[0]),
        ("lambda2[m^2]", &stats.var_x[1]),
    ];
    for (name, s) in pairs {
        t.push(name, s.mean.clone());
        let base = name.split('[').next().unwrap();
        let unit = &name[base.len()..];
        t.push(format!("{base}_se{unit}"), s.se.clone());
    }
    for j in 0..3 {
        t.push(format!("gamma{}[1/s]", j + 1), stats.gamma_net[j].mean.clone());
        t.push(
            format!("gamma{}_se[1/s]", j + 1),
            stats.gamma_net[j].se.clone(),
        );
    }
    t.push("current[A]", stats.current.mean.clone());
    t.push("current_se[A]", stats.current.se.clone());
    t
}

fn cmd_mc(opts: &CliOptions) -> Result<i32, (i32, String)> {
    let mut p = prepare(opts)?;
    let mut mc_cfg = p.cfg.mc.clone();
    if mc_cfg.dt == 0.0 {
        mc_cfg.dt = monte_carlo::auto_dt(&p.consts, &p.cfg.params, &p.cfg.drive, &mc_cfg)
            .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
        p.manifest.set("mc_dt", output::format_float(mc_cfg.dt));
    }
    let stats = monte_carlo::simulate(&p.consts, &p.cfg.params, &p.cfg.drive, &mc_cfg)
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    println!(
        "mc: {} samples x {} periods, {} steps/period (dt = {:.3e} s)",
        stats.samples, stats.periods_measure, stats.steps_per_period, stats.dt
    );
    for j in 0..3 {
        println!(
            "  I_dc junction {} = {:.6e} +- {:.2e} A",
            j + 1,
            stats.i_dc[j],
            stats.i_dc_se[j]
        );
    }
    let probe = stats.correlation_probe();
    println!("  correlation probe (>= half period) = {probe:.4}");
    println!("  max sum(rate dt) = {:.4}", stats.max_rate_dt);
    p.manifest.set("correlation_probe", format!("{probe:.6}"));
    p.manifest.set("max_rate_dt", format!("{:.6}", stats.max_rate_dt));
    if let Some(dir) = p.out_dir.clone() {
        write_table(&dir, "mc_series.csv", &mc_table(&stats))?;
        for h in &stats.histograms {
            let mut ht = Table::new();
            let mut n1 = Vec::new();
            let mut n2 = Vec::new();
            let mut prob = Vec::new();
            for i in 0..h.size {
                for j in 0..h.size {
                    let p_val = h.counts[i * h.size + j] as f64 / h.total.max(1) as f64;
                    if p_val > 0.0 {
                        n1.push((h.origin[0] + i as i64) as f64);
                        n2.push((h.origin[1] + j as i64) as f64);
                        prob.push(p_val);
                    }
                }
            }
            ht.push("n1[1]", n1);
            ht.push("n2[1]", n2);
            ht.push("probability[1]", prob);
            write_table(&dir, &format!("hist_bin{}.csv", h.phase_bin), &ht)?;
            if p.plot {
                let probs: Vec<f64> = h
                    .counts
                    .iter()
                    .map(|&c| c as f64 / h.total.max(1) as f64)
                    .collect();
                let svg = output::svg_heatmap(
                    &format!("occupation at phase bin {}", h.phase_bin),
                    h.origin,
                    h.size,
                    &probs,
                );
                write_text(&dir, &format!("hist_bin{}.svg", h.phase_bin), &svg)?;
            }
        }
        if p.plot {
            let mk = |label: &str, s: &monte_carlo::Series| PlotSeries {
                label: label.into(),
                points: stats
                    .t_grid
                    .iter()
                    .zip(&s.mean)
                    .map(|(&t, &v)| (t, v))
                    .collect(),
            };
            let svg = output::svg_line_plot(
                "mean electron numbers",
                "t [s]",
                "<n>",
                &[mk("n1", &stats.mean_n[0]), mk("n2", &stats.mean_n[1])],
            );
            write_text(&dir, "n_mean.svg", &svg)?;
            let svg = output::svg_line_plot(
                "current",
                "t [s]",
                "I [A]",
                &[mk("I", &stats.current)],
            );
            write_text(&dir, "current.svg", &svg)?;
        }
    }
    Ok(finish(&mut p, true))
}

/// Lattice half-width policy: configured value, or max(8, |n| + 6 sigma)
/// estimated from a quick variance-tier run.
fn choose_halfwidth(p: &Prepared) -> Result<i64, (i32, String)> {
    if p.cfg.lattice_halfwidth > 0 {
        return Ok(p.cfg.lattice_halfwidth);
    }
    let cfg = ClosureConfig {
        tier: Tier::Variance,
        steps_per_period: 1024,
        bins: 16,
        max_periods: 200,
        tol: 1e-5,
        ..p.cfg.closure.clone()
    };
    let tr = moments::integrate(&p.consts, &p.cfg.params, &p.cfg.drive, &cfg)
        .map_err(|e| (EXIT_RUNTIME, format!("lattice sizing pre-run failed: {e}")))?;
    let mut need = 0.0f64;
    for s in &tr.states {
        for k in 0..2 {
            need = need.max(s.n[k].abs() + 6.0 * s.d[k].max(0.0).sqrt());
        }
    }
    Ok((need.ceil() as i64).max(8))
}

fn master_table(r: &MasterResult) -> Table {
    let mut t = Table::new();
    t.push("time[s]", r.t_grid.clone());
    t.push("n1[1]", r.mean_n[0].clone());
    t.push("n2[1]", r.mean_n[1].clone());
    t.push("d11[1]", r.var_n[0].clone());
    t.push("d22[1]", r.var_n[1].clone());
    t.push("d12[1]", r.cov_n12.clone());
    t.push("x1[m]", r.mean_x[0].clone());
    t.push("x2[m]", r.mean_x[1].clone());
    for j in 0..3 {
        t.push(format!("gamma{}[1/s]", j + 1), r.gamma_net[j].clone());
    }
    t.push("current[A]", r.current.clone());
    t
}

fn cmd_reference(opts: &CliOptions) -> Result<i32, (i32, String)> {
    let mut p = prepare(opts)?;
    let hw = choose_halfwidth(&p)?;
    let offset = p.consts.gate_offset(&p.cfg.params);
    let center = [offset[0].round() as i64, offset[1].round() as i64];
    let bounds = LatticeBounds::centered(center, hw);
    p.manifest.set("lattice_halfwidth", hw);
    let r = master::evolve(&p.consts, &p.cfg.params, &p.cfg.drive, bounds, &p.cfg.master)
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    println!(
        "reference: lattice half-width {hw}, {} periods, converged = {}",
        r.periods_run, r.converged
    );
    println!(
        "  I_dc per junction [A]: {:.6e}  {:.6e}  {:.6e}",
        r.i_dc[0], r.i_dc[1], r.i_dc[2]
    );
    println!(
        "  boundary mass max = {:.2e}, conservation drift max = {:.2e}",
        r.boundary_mass_max, r.conservation_drift_max
    );
    println!("  K excursion max |x.T|/lambda = {:.3e}", r.k_excursion);
    p.manifest.set("periods_run", r.periods_run);
    p.manifest
        .set("boundary_mass_max", format!("{:.3e}", r.boundary_mass_max));
    if let Some(dir) = p.out_dir.clone() {
        write_table(&dir, "reference_series.csv", &master_table(&r))?;
        if p.plot {
            let svg = output::svg_line_plot(
                "reference current",
                "t [s]",
                "I [A]",
                &[PlotSeries {
                    label: "I".into(),
                    points: r
                        .t_grid
                        .iter()
                        .zip(&r.current)
                        .map(|(&t, &i)| (t, i))
                        .collect(),
                }],
            );
            write_text(&dir, "current.svg", &svg)?;
            let svg = output::svg_heatmap(
                "occupation at phase 0",
                [r.bounds.n_min[0], r.bounds.n_min[1]],
                r.bounds.len()[0],
                &r.pdfs[0],
            );
            write_text(&dir, "pdf_bin0.svg", &svg)?;
        }
    }
    Ok(finish(&mut p, r.converged))
}

fn cmd_sweep(opts: &CliOptions) -> Result<i32, (i32, String)> {
    let mut p = prepare(opts)?;
    let axis = opts.axis.ok_or((
        EXIT_VALIDATION,
        "sweep needs --axis frequency|amplitude|harmonic2".to_string(),
    ))?;
    let from = opts
        .from
        .ok_or((EXIT_VALIDATION, "sweep needs --from".to_string()))?;
    let to = opts
        .to
        .ok_or((EXIT_VALIDATION, "sweep needs --to".to_string()))?;
    let points = opts.points.unwrap_or(13);
    let grid: Vec<f64> = if points <= 1 {
        vec![from]
    } else if opts.log_grid {
        if from <= 0.0 || to <= 0.0 {
            return Err((EXIT_VALIDATION, "--log needs positive bounds".to_string()));
        }
        (0..points)
            .map(|i| {
                (from.ln() + (to.ln() - from.ln()) * i as f64 / (points - 1) as f64).exp()
            })
            .collect()
    } else {
        (0..points)
            .map(|i| from + (to - from) * i as f64 / (points - 1) as f64)
            .collect()
    };
    let table = analysis::sweep(
        &p.consts,
        &p.cfg.params,
        &p.cfg.drive,
        axis,
        &grid,
        &p.cfg.closure,
    );
    let failures = table.points.iter().filter(|pt| pt.error.is_some()).count();
    let unconverged = table.points.iter().filter(|pt| !pt.converged).count();
    println!(
        "sweep over {axis}: {} points, {} failures, {} unconverged",
        table.points.len(),
        failures,
        unconverged
    );
    for pt in &table.points {
        match &pt.error {
            Some(e) => println!("  {:>12.5e}: failed: {e}", pt.value),
            None => println!(
                "  {:>12.5e}: |n1| = {:.4e}, I_dc = {:.4e} A{}",
                pt.value,
                pt.n1_amplitude,
                pt.i_dc[0],
                if pt.converged { "" } else { " (not converged)" }
            ),
        }
    }
    if let Some(dir) = p.out_dir.clone() {
        let mut t = Table::new();
        t.push(format!("{axis}"), table.points.iter().map(|p| p.value).collect());
        for j in 0..3 {
            t.push(
                format!("i_dc{}[A]", j + 1),
                table.points.iter().map(|p| p.i_dc[j]).collect(),
            );
        }
        t.push(
            "n1_amplitude[1]",
            table.points.iter().map(|p| p.n1_amplitude).collect(),
        );
        t.push(
            "n1_phase[rad]",
            table.points.iter().map(|p| p.n1_phase).collect(),
        );
        t.push(
            "x1_amplitude[m]",
            table.points.iter().map(|p| p.x_amplitude[0]).collect(),
        );
        t.push(
            "x2_amplitude[m]",
            table.points.iter().map(|p| p.x_amplitude[1]).collect(),
        );
        t.push(
            "converged[1]",
            table
                .points
                .iter()
                .map(|p| if p.converged { 1.0 } else { 0.0 })
                .collect(),
        );
        write_table(&dir, "sweep.csv", &t)?;
        if p.plot {
            for (metric, f) in [
                ("n1_amplitude", &(|pt: &analysis::SweepPoint| pt.n1_amplitude) as &dyn Fn(&analysis::SweepPoint) -> f64),
                ("i_dc", &|pt: &analysis::SweepPoint| pt.i_dc[0]),
                ("x1_amplitude", &|pt: &analysis::SweepPoint| {
                    pt.x_amplitude[0]
                }),
            ] {
                let svg = output::svg_line_plot(
                    metric,
                    &format!("{axis}"),
                    metric,
                    &[PlotSeries {
                        label: metric.into(),
                        points: table.points.iter().map(|pt| (pt.value, f(pt))).collect(),
                    }],
                );
                write_text(&dir, &format!("sweep_{metric}.svg"), &svg)?;
            }
        }
    }
    Ok(finish(&mut p, failures == 0 && unconverged == 0))
}

fn cmd_symmetry(opts: &CliOptions) -> Result<i32, (i32, String)> {
    let mut p = prepare(opts)?;
    let odd = p.cfg.drive.is_half_wave_odd();
    let gate_free = p.cfg.params.n_gate.iter().all(|&g| g == 0.0);
    println!(
        "drive is half-wave odd: {odd}; gate bias free: {gate_free}"
    );

    // Base run on the configured moment tier.
    let tr = moments::integrate(&p.consts, &p.cfg.params, &p.cfg.drive, &p.cfg.closure)
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    let r_moment = analysis::antisymmetry_residual(&tr.current)
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    println!(
        "{} tier: residual max|I(t)+I(t+T/2)|/max|I| = {:.3e}, I_dc = {:.4e} A",
        p.cfg.closure.tier, r_moment, tr.i_dc[1]
    );

    // Reference run.
    let hw = choose_halfwidth(&p)?;
    let offset = p.consts.gate_offset(&p.cfg.params);
    let center = [offset[0].round() as i64, offset[1].round() as i64];
    let mcfg = MasterConfig {
        tol: 1e-13,
        ..p.cfg.master.clone()
    };
    let rref = master::evolve(
        &p.consts,
        &p.cfg.params,
        &p.cfg.drive,
        LatticeBounds::centered(center, hw),
        &mcfg,
    )
    .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    let r_ref = analysis::antisymmetry_residual(&rref.current)
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    let verdict = if odd && gate_free {
        if r_ref < 1e-6 {
            "holds (residual < 1e-6)"
        } else {
            "VIOLATED"
        }
    } else {
        "not expected (symmetry already broken)"
    };
    println!(
        "reference:  residual = {:.3e}, I_dc = {:.4e} A -> antisymmetry {verdict}",
        r_ref, rref.i_dc[1]
    );

    // The two symmetry-breaking routes, on the moment tier.
    let mut broken_drive = p.cfg.drive.clone();
    let amp2 = 0.3 * broken_drive.v0;
    broken_drive = broken_drive.with_harmonic(2, amp2, 0.0);
    let tr_h2 = moments::integrate(&p.consts, &p.cfg.params, &broken_drive, &p.cfg.closure)
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    let r_h2 = analysis::antisymmetry_residual(&tr_h2.current)
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    println!(
        "  +30% 2nd harmonic: residual = {:.3e}, I_dc = {:.4e} A",
        r_h2, tr_h2.i_dc[1]
    );
    let gate_result = if p.consts.gates > 0 {
        let mut params2 = p.cfg.params.clone();
        if params2.n_gate.is_empty() {
            params2.n_gate = vec![0.0; p.consts.gates];
        }
        params2.n_gate[0] += 2.0;
        let tr_g = moments::integrate(&p.consts, &params2, &p.cfg.drive, &p.cfg.closure)
            .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
        let r_g = analysis::antisymmetry_residual(&tr_g.current)
            .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
        println!(
            "  +2 gate electrons: residual = {:.3e}, I_dc = {:.4e} A",
            r_g, tr_g.i_dc[1]
        );
        Some((r_g, tr_g.i_dc[1]))
    } else {
        println!("  (no gate in this device; gate-bias route skipped)");
        None
    };

    p.manifest.set("residual_reference", format!("{r_ref:.6e}"));
    p.manifest.set("residual_moment", format!("{r_moment:.6e}"));
    p.manifest.set("residual_harmonic2", format!("{r_h2:.6e}"));
    if let Some(dir) = p.out_dir.clone() {
        let mut t = Table::new();
        t.push("time[s]", rref.t_grid.clone());
        t.push("current_reference[A]", rref.current.clone());
        t.push("current_moment[A]", tr.current.clone());
        t.push("current_harmonic2[A]", tr_h2.current.clone());
        write_table(&dir, "symmetry.csv", &t)?;
        let _ = gate_result;
    }
    Ok(finish(&mut p, tr.converged && rref.converged))
}

fn cmd_compare(opts: &CliOptions) -> Result<i32, (i32, String)> {
    let mut p = prepare(opts)?;
    let mut mc_cfg = p.cfg.mc.clone();
    if mc_cfg.dt == 0.0 {
        mc_cfg.dt = monte_carlo::auto_dt(&p.consts, &p.cfg.params, &p.cfg.drive, &mc_cfg)
            .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    }
    let stats = monte_carlo::simulate(&p.consts, &p.cfg.params, &p.cfg.drive, &mc_cfg)
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    let mut closure = p.cfg.closure.clone();
    closure.bins = stats.bins;
    let tr = moments::integrate(&p.consts, &p.cfg.params, &p.cfg.drive, &closure)
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;

    let mut worst = (0.0f64, "none".to_string());
    let mut check = |name: &str, model: &[f64], mc: &monte_carlo::Series| {
        for b in 0..model.len() {
            let z = (model[b] - mc.mean[b]).abs() / mc.se[b].max(1e-300);
            if z > worst.0 {
                worst = (z, format!("{name} bin {b}"));
            }
        }
    };
    let n1: Vec<f64> = tr.states.iter().map(|s| s.n[0]).collect();
    let n2: Vec<f64> = tr.states.iter().map(|s| s.n[1]).collect();
    let x1: Vec<f64> = tr.states.iter().map(|s| s.x[0]).collect();
    let x2: Vec<f64> = tr.states.iter().map(|s| s.x[1]).collect();
    let d11: Vec<f64> = tr.states.iter().map(|s| s.d[0]).collect();
    let d22: Vec<f64> = tr.states.iter().map(|s| s.d[1]).collect();
    check("n1", &n1, &stats.mean_n[0]);
    check("n2", &n2, &stats.mean_n[1]);
    check("x1", &x1, &stats.mean_x[0]);
    check("x2", &x2, &stats.mean_x[1]);
    check("D11", &d11, &stats.var_n[0]);
    check("D22", &d22, &stats.var_n[1]);
    println!(
        "compare ({} tier vs mc, {} samples): worst |model - mc| = {:.2} SE at {}",
        closure.tier, stats.samples, worst.0, worst.1
    );
    println!("  correlation probe = {:.4}", stats.correlation_probe());

    let mut tv_report = None;
    if opts.with_reference {
        let hw = choose_halfwidth(&p)?;
        let offset = p.consts.gate_offset(&p.cfg.params);
        let center = [offset[0].round() as i64, offset[1].round() as i64];
        let mut mcfg = p.cfg.master.clone();
        mcfg.bins = stats.bins;
        let rref = master::evolve(
            &p.consts,
            &p.cfg.params,
            &p.cfg.drive,
            LatticeBounds::centered(center, hw),
            &mcfg,
        )
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
        let mut worst_tv = 0.0f64;
        for h in &stats.histograms {
            let mut tv = 0.0;
            for idx in 0..rref.bounds.sites() {
                let n = rref.bounds.site(idx);
                tv += 0.5 * (rref.pdfs[h.phase_bin][idx] - h.probability(n[0], n[1])).abs();
            }
            worst_tv = worst_tv.max(tv);
        }
        println!("  worst TV distance mc vs reference = {worst_tv:.4}");
        tv_report = Some(worst_tv);
    }

    p.manifest.set("max_deviation_se", format!("{:.4}", worst.0));
    p.manifest.set("max_deviation_at", &worst.1);
    if let Some(tv) = tv_report {
        p.manifest.set("max_tv_mc_vs_reference", format!("{tv:.5}"));
    }
    if let Some(dir) = p.out_dir.clone() {
        let mut t = Table::new();
        t.push("time[s]", stats.t_grid.clone());
        t.push("n1_mc[1]", stats.mean_n[0].mean.clone());
        t.push("n1_mc_se[1]", stats.mean_n[0].se.clone());
        t.push("n1_model[1]", n1.clone());
        t.push("n2_mc[1]", stats.mean_n[1].mean.clone());
        t.push("n2_mc_se[1]", stats.mean_n[1].se.clone());
        t.push("n2_model[1]", n2.clone());
        t.push("x1_mc[m]", stats.mean_x[0].mean.clone());
        t.push("x1_mc_se[m]", stats.mean_x[0].se.clone());
        t.push("x1_model[m]", x1.clone());
        t.push("d11_mc[1]", stats.var_n[0].mean.clone());
        t.push("d11_mc_se[1]", stats.var_n[0].se.clone());
        t.push("d11_model[1]", d11.clone());
        write_table(&dir, "compare.csv", &t)?;
        let mut metrics = Table::new();
        metrics.push("max_deviation_se[1]", vec![worst.0]);
        if let Some(tv) = tv_report {
            metrics.push("max_tv[1]", vec![tv]);
        }
        metrics.push(
            "correlation_probe[1]",
            vec![stats.correlation_probe()],
        );
        write_table(&dir, "compare_metrics.csv", &metrics)?;
        if p.plot {
            let svg = output::svg_line_plot(
                "mc vs model: <n1>",
                "t [s]",
                "<n1>",
                &[
                    PlotSeries {
                        label: "mc".into(),
                        points: stats
                            .t_grid
                            .iter()
                            .zip(&stats.mean_n[0].mean)
                            .map(|(&t, &v)| (t, v))
                            .collect(),
                    },
                    PlotSeries {
                        label: "model".into(),
                        points: stats.t_grid.iter().zip(&n1).map(|(&t, &v)| (t, v)).collect(),
                    },
                ],
            );
            write_text(&dir, "compare_n1.svg", &svg)?;
        }
    }
    Ok(finish(&mut p, tr.converged))
}

fn write_table(dir: &Path, name: &str, table: &Table) -> Result<(), (i32, String)> {
    output::write_csv(&dir.join(name), table)
        .map_err(|e| (EXIT_VALIDATION, format!("cannot write {name}: {e}")))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), (i32, String)> {
    std::fs::write(dir.join(name), text)
        .map_err(|e| (EXIT_VALIDATION, format!("cannot write {name}: {e}")))
}
