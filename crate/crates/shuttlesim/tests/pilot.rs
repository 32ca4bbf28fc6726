// Scratch cross-validation pilots, run manually while tuning.
use shuttlesim::device::derive_constants;
use shuttlesim::drive::DriveWaveform;
use shuttlesim::master::{self, LatticeBounds, MasterConfig};
use shuttlesim::moments::{self, ClosureConfig, Tier};
use shuttlesim::monte_carlo::{self, McConfig};
use shuttlesim::presets;

#[test]
#[ignore]
fn pilot_frozen_mc_vs_master() {
    let consts = derive_constants(&presets::series_chain_default()).unwrap();
    let mut params = presets::params_default();
    params.temperature = 20.0;
    let drive = DriveWaveform::sine(0.03, 1.2e8);
    let t0 = std::time::Instant::now();
    let mc = monte_carlo::simulate(
        &consts,
        &params,
        &drive,
        &McConfig {
            samples: 20_000,
            periods_burnin: 8,
            periods_measure: 4,
            bins: 16,
            groups: 50,
            frozen_mechanics: true,
            hist_bins: vec![0, 4, 8, 12],
            master_seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    println!(
        "MC took {:?} ({} steps/period, max rate_dt {:.3})",
        t0.elapsed(),
        mc.steps_per_period,
        mc.max_rate_dt
    );
    let ms = master::evolve(
        &consts,
        &params,
        &drive,
        LatticeBounds::centered([0, 0], 8),
        &MasterConfig {
            steps_per_period: 2048,
            bins: 16,
            frozen_mechanics: true,
            tol: 1e-13,
            ..Default::default()
        },
    )
    .unwrap();
    println!("master converged {} in {} periods", ms.converged, ms.periods_run);
    for h in &mc.histograms {
        let bin = h.phase_bin;
        // TV against the lattice distribution at the same phase.
        let mut tv = 0.0;
        for idx in 0..ms.bounds.sites() {
            let n = ms.bounds.site(idx);
            tv += 0.5 * (ms.pdfs[bin][idx] - h.probability(n[0], n[1])).abs();
        }
        println!("bin {bin}: TV = {tv:.4}");
        println!(
            "  mc mean n = ({:+.4} +- {:.4}, {:+.4}), master ({:+.4}, {:+.4})",
            mc.mean_n[0].mean[bin],
            mc.mean_n[0].se[bin],
            mc.mean_n[1].mean[bin],
            ms.mean_n[0][bin],
            ms.mean_n[1][bin]
        );
        println!(
            "  mc var n1 = {:.4} +- {:.4}, master {:.4}",
            mc.var_n[0].mean[bin], mc.var_n[0].se[bin], ms.var_n[0][bin]
        );
    }
    println!("mc i_dc: {:?} +- {:?}", mc.i_dc, mc.i_dc_se);
    println!("master i_dc: {:?}", ms.i_dc);
    println!("probe: {}", mc.correlation_probe());
}

#[test]
#[ignore]
fn pilot_full_mc_vs_moments() {
    let consts = derive_constants(&presets::series_chain_default()).unwrap();
    let mut params = presets::params_default();
    params.temperature = 30.0;
    let drive = DriveWaveform::sine(0.035, 1.2e8);
    println!(
        "omega_c = {:.3e} rad/s, drive omega = {:.3e}, ratio {:.2}",
        consts.e0[1] * (2.0 * params.r0[0] + params.r0[1])
            / (shuttlesim::device::Q_E * shuttlesim::device::Q_E * params.r0[0] * params.r0[1]),
        drive.omega,
        0.0
    );
    let t0 = std::time::Instant::now();
    let mc = monte_carlo::simulate(
        &consts,
        &params,
        &drive,
        &McConfig {
            samples: 20_000,
            periods_burnin: 30,
            periods_measure: 8,
            bins: 32,
            groups: 50,
            master_seed: 11,
            hist_bins: vec![],
            ..Default::default()
        },
    )
    .unwrap();
    println!(
        "MC took {:?} ({} steps/period, {} samples)",
        t0.elapsed(),
        mc.steps_per_period,
        mc.samples
    );
    let tr = moments::integrate(
        &consts,
        &params,
        &drive,
        &ClosureConfig {
            tier: Tier::Full,
            bins: 32,
            steps_per_period: 2048,
            tol: 1e-9,
            ..Default::default()
        },
    )
    .unwrap();
    println!("moments converged {} in {}", tr.converged, tr.periods_run);
    let mut worst_z_n = 0.0f64;
    let mut worst_z_x = 0.0f64;
    let mut worst_z_d = 0.0f64;
    for b in 0..32 {
        for s in 0..2 {
            let zn = (tr.states[b].n[s] - mc.mean_n[s].mean[b]).abs()
                / mc.mean_n[s].se[b].max(1e-300);
            let zx = (tr.states[b].x[s] - mc.mean_x[s].mean[b]).abs()
                / mc.mean_x[s].se[b].max(1e-300);
            let zd = (tr.states[b].d[s] - mc.var_n[s].mean[b]).abs()
                / mc.var_n[s].se[b].max(1e-300);
            worst_z_n = worst_z_n.max(zn);
            worst_z_x = worst_z_x.max(zx);
            worst_z_d = worst_z_d.max(zd);
        }
    }
    println!("worst z: n {worst_z_n:.2}, x {worst_z_x:.2}, D {worst_z_d:.2}");
    println!(
        "sample bin 8: moment n1 {:+.4}, mc {:+.4} +- {:.4}; moment x1 {:+.3e}, mc {:+.3e} +- {:.1e}; D11 {:.4} vs {:.4} +- {:.4}",
        tr.states[8].n[0],
        mc.mean_n[0].mean[8],
        mc.mean_n[0].se[8],
        tr.states[8].x[0],
        mc.mean_x[0].mean[8],
        mc.mean_x[0].se[8],
        tr.states[8].d[0],
        mc.var_n[0].mean[8],
        mc.var_n[0].se[8]
    );
    println!("probe: {}", mc.correlation_probe());
    println!("mc x amplitude: {:.3e}", mc.mean_x[0].mean.iter().fold(0.0f64, |a, &b| a.max(b.abs())));
    println!("lambda = {:.1e}", params.lambda[0]);
}

#[test]
#[ignore]
fn pilot_variance_tier_vs_master() {
    let consts = derive_constants(&presets::series_chain_default()).unwrap();
    for (label, temp, v0, order) in [
        ("T=30 V=0.035 L=4", 30.0, 0.035, 4usize),
        ("T=30 V=0.035 L=8", 30.0, 0.035, 8),
        ("T=60 V=0.035 L=4", 60.0, 0.035, 4),
        ("T=60 V=0.07  L=4", 60.0, 0.07, 4),
        ("T=120 V=0.07 L=4", 120.0, 0.07, 4),
        ("T=15 V=0.035 L=4", 15.0, 0.035, 4),
    ] {
        let mut params = presets::params_default();
        params.temperature = temp;
        let drive = DriveWaveform::sine(v0, 1.2e8);
        let ms = master::evolve(
            &consts,
            &params,
            &drive,
            LatticeBounds::centered([0, 0], 10),
            &MasterConfig {
                steps_per_period: 2048,
                bins: 16,
                frozen_mechanics: true,
                tol: 1e-13,
                ..Default::default()
            },
        )
        .unwrap();
        let tr = moments::integrate(
            &consts,
            &params,
            &drive,
            &ClosureConfig {
                tier: Tier::Variance,
                order,
                bins: 16,
                steps_per_period: 2048,
                tol: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        // worst relative deviations over the period
        let mut dn: f64 = 0.0;
        let mut dd: f64 = 0.0;
        let n_amp = ms.mean_n[0].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let d_amp = ms.var_n[0].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        for b in 0..16 {
            dn = dn.max((tr.states[b].n[0] - ms.mean_n[0][b]).abs() / n_amp);
            dd = dd.max((tr.states[b].d[0] - ms.var_n[0][b]).abs() / d_amp);
        }
        println!(
            "{label}: n_amp {:.3}, D_amp {:.3}: worst rel n {:.4}, D {:.4} (master conv {} in {}p, moment conv {})",
            n_amp, d_amp, dn, dd, ms.converged, ms.periods_run, tr.converged
        );
    }
}

#[test]
#[ignore]
fn pilot_acceptance_shared_config() {
    use shuttlesim::presets::SeriesChain;
    let chain = SeriesChain {
        c_j: [8.0e-18, 1.6e-17, 8.0e-18],
        shuttle_ground: 0.0,
        drain_ground: 1.0e-17,
        gap: 5.0e-9,
        gate: None,
    };
    let consts = derive_constants(&chain.build()).unwrap();
    let mut params = presets::params_default();
    params.temperature = 30.0;
    let drive = DriveWaveform::sine(0.035, 1.2e8);
    let t0 = std::time::Instant::now();
    let mc = monte_carlo::simulate(
        &consts,
        &params,
        &drive,
        &McConfig {
            dt: drive.period() / 2240.0,
            samples: 20_000,
            periods_burnin: 14,
            periods_measure: 6,
            bins: 64,
            groups: 100,
            master_seed: 20_260_808,
            event_budget: 0.08,
            hist_bins: vec![0, 16, 32, 48],
            ..Default::default()
        },
    )
    .unwrap();
    println!(
        "MC 2e4 took {:?} ({} steps/period) -> 1e5 expect {:?}",
        t0.elapsed(),
        mc.steps_per_period,
        t0.elapsed() * 5
    );
    println!("probe = {:.4}", mc.correlation_probe());
    let anti = mc.antisymmetry_residual();
    println!("antisym z = {:.2} (rel {:.2e})", anti.max_z, anti.relative);
    let tr = moments::integrate(
        &consts,
        &params,
        &drive,
        &ClosureConfig {
            tier: Tier::Full,
            order: 8,
            steps_per_period: 1920,
            bins: 64,
            tol: 1e-9,
            ..Default::default()
        },
    )
    .unwrap();
    println!("full tier L=8 converged {} in {}", tr.converged, tr.periods_run);
    let mut worst = [("n", 0.0f64), ("x", 0.0), ("D", 0.0)];
    for b in 0..64 {
        for s in 0..2 {
            worst[0].1 = worst[0].1.max(
                (tr.states[b].n[s] - mc.mean_n[s].mean[b]).abs() / mc.mean_n[s].se[b].max(1e-300),
            );
            worst[1].1 = worst[1].1.max(
                (tr.states[b].x[s] - mc.mean_x[s].mean[b]).abs() / mc.mean_x[s].se[b].max(1e-300),
            );
            worst[2].1 = worst[2].1.max(
                (tr.states[b].d[s] - mc.var_n[s].mean[b]).abs() / mc.var_n[s].se[b].max(1e-300),
            );
        }
    }
    for (name, z) in worst {
        println!("worst z {name} = {z:.2}");
    }
    println!(
        "x amplitude = {:.3e} (lambda {:.0e}); n amplitude = {:.3}",
        mc.mean_x[0].mean.iter().fold(0.0f64, |a, &b| a.max(b.abs())),
        params.lambda[0],
        mc.mean_n[0].mean.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    );
}

#[test]
#[ignore]
fn pilot_full_tier_debug() {
    use shuttlesim::presets::SeriesChain;
    let chain = SeriesChain {
        c_j: [8.0e-18, 1.6e-17, 8.0e-18],
        shuttle_ground: 0.0,
        drain_ground: 1.0e-17,
        gap: 5.0e-9,
        gate: None,
    };
    let consts = derive_constants(&chain.build()).unwrap();
    let mut params = presets::params_default();
    params.temperature = 30.0;
    let drive = DriveWaveform::sine(0.035, 1.2e8);
    for order in [4usize, 6, 8] {
        let r = moments::integrate(
            &consts,
            &params,
            &drive,
            &ClosureConfig {
                tier: Tier::Full,
                order,
                steps_per_period: 1920,
                bins: 64,
                tol: 1e-9,
                max_periods: 60,
                ..Default::default()
            },
        );
        match r {
            Ok(tr) => {
                let s = tr.states[32];
                println!(
                    "L={order}: conv {} in {}: n1 {:+.4}, D11 {:.4}, Lam1 {:.3e}, X1 {:.3e}, Y1 {:.3e}",
                    tr.converged, tr.periods_run, s.n[0], s.d[0], s.lam[0], s.xn[0], s.yn[0]
                );
            }
            Err(e) => println!("L={order}: ERROR {e}"),
        }
    }
}

#[test]
#[ignore]
fn pilot_l8_bisect() {
    use shuttlesim::moments::Integrator;
    use shuttlesim::presets::SeriesChain;
    let chain = SeriesChain {
        c_j: [8.0e-18, 1.6e-17, 8.0e-18],
        shuttle_ground: 0.0,
        drain_ground: 1.0e-17,
        gap: 5.0e-9,
        gate: None,
    };
    let consts = derive_constants(&chain.build()).unwrap();
    let mut params = presets::params_default();
    params.temperature = 30.0;
    let drive = DriveWaveform::sine(0.035, 1.2e8);
    for (label, tier, steps, integ) in [
        ("variance L8 s1920", Tier::Variance, 1920usize, Integrator::Rk4),
        ("full L8 s3840", Tier::Full, 3840, Integrator::Rk4),
        ("full L8 s7680", Tier::Full, 7680, Integrator::Rk4),
        ("full L8 s1920 heun", Tier::Full, 1920, Integrator::ImprovedEuler),
    ] {
        let r = moments::integrate(
            &consts,
            &params,
            &drive,
            &ClosureConfig {
                tier,
                order: 8,
                steps_per_period: steps,
                bins: 64,
                tol: 1e-9,
                max_periods: 40,
                integrator: integ,
            },
        );
        match r {
            Ok(tr) => println!(
                "{label}: conv {} in {} (n1 mid {:+.4}, D11 {:.4})",
                tr.converged, tr.periods_run, tr.states[32].n[0], tr.states[32].d[0]
            ),
            Err(e) => println!("{label}: ERROR {e}"),
        }
    }
}

#[test]
#[ignore]
fn pilot_order_accuracy_shared_config() {
    use shuttlesim::presets::SeriesChain;
    let chain = SeriesChain {
        c_j: [8.0e-18, 1.6e-17, 8.0e-18],
        shuttle_ground: 0.0,
        drain_ground: 1.0e-17,
        gap: 5.0e-9,
        gate: None,
    };
    let consts = derive_constants(&chain.build()).unwrap();
    let mut params = presets::params_default();
    params.temperature = 30.0;
    let drive = DriveWaveform::sine(0.035, 1.2e8);
    let ms = master::evolve(
        &consts,
        &params,
        &drive,
        LatticeBounds::centered([0, 0], 10),
        &MasterConfig {
            steps_per_period: 2048,
            bins: 64,
            frozen_mechanics: true,
            tol: 1e-13,
            ..Default::default()
        },
    )
    .unwrap();
    let n_amp = ms.mean_n[0].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let d_amp = ms.var_n[0].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    for order in [4usize, 6] {
        let tr = moments::integrate(
            &consts,
            &params,
            &drive,
            &ClosureConfig {
                tier: Tier::Variance,
                order,
                bins: 64,
                steps_per_period: 2048,
                tol: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        let mut dn: f64 = 0.0;
        let mut dd: f64 = 0.0;
        for b in 0..64 {
            dn = dn.max((tr.states[b].n[0] - ms.mean_n[0][b]).abs());
            dd = dd.max((tr.states[b].d[0] - ms.var_n[0][b]).abs());
        }
        println!(
            "variance L={order} vs frozen master: |dn| {:.2e} ({:.3}% of {:.3}), |dD| {:.2e} ({:.3}% of {:.3})",
            dn, dn / n_amp * 100.0, n_amp, dd, dd / d_amp * 100.0, d_amp
        );
    }
}

#[test]
#[ignore]
fn pilot_bigc_config() {
    use shuttlesim::presets::SeriesChain;
    let chain = SeriesChain {
        c_j: [4.0e-17, 8.0e-17, 4.0e-17],
        shuttle_ground: 0.0,
        drain_ground: 5.0e-17,
        gap: 5.0e-9,
        gate: None,
    };
    let consts = derive_constants(&chain.build()).unwrap();
    let mut params = presets::params_default();
    params.temperature = 30.0;
    let ss = shuttlesim::analysis::small_signal(&consts, &params, &DriveWaveform::sine(0.008, 2.0e7)).unwrap();
    println!(
        "E2 = {:.3e} J ({:.2} kT), omega_c = {:.3e} rad/s, drive ratio {:.3}",
        consts.e0[1],
        consts.e0[1] / params.thermal_energy(),
        ss.omega_c,
        2.0e7 / ss.omega_c
    );
    let drive = DriveWaveform::sine(0.008, 2.0e7);

    // (a) closure accuracy against the frozen lattice
    let ms = master::evolve(
        &consts, &params, &drive,
        LatticeBounds::centered([0, 0], 10),
        &MasterConfig { steps_per_period: 2048, bins: 64, frozen_mechanics: true, tol: 1e-13, ..Default::default() },
    ).unwrap();
    let n_amp = ms.mean_n[0].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let d_amp = ms.var_n[0].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    println!("master: n amp {:.3}, D amp {:.3}, boundary {:.1e}, converged {} in {}",
        n_amp, d_amp, ms.boundary_mass_max, ms.converged, ms.periods_run);
    for order in [4usize, 6] {
        let tr = moments::integrate(
            &consts, &params, &drive,
            &ClosureConfig { tier: Tier::Variance, order, bins: 64, steps_per_period: 2048, tol: 1e-10, ..Default::default() },
        ).unwrap();
        let mut dn: f64 = 0.0;
        let mut dd: f64 = 0.0;
        for b in 0..64 {
            dn = dn.max((tr.states[b].n[0] - ms.mean_n[0][b]).abs());
            dd = dd.max((tr.states[b].d[0] - ms.var_n[0][b]).abs());
        }
        println!("variance L={order}: |dn| {:.2e} ({:.4}%), |dD| {:.2e} ({:.4}%)",
            dn, dn / n_amp * 100.0, dd, dd / d_amp * 100.0);
    }

    // (b) quick MC with full-tier comparison
    let t0 = std::time::Instant::now();
    let mc = monte_carlo::simulate(
        &consts, &params, &drive,
        &McConfig {
            dt: 0.0,
            samples: 10_000,
            periods_burnin: 4,
            periods_measure: 6,
            bins: 64,
            groups: 100,
            master_seed: 20_260_808,
            event_budget: 0.08,
            hist_bins: vec![0, 16, 32, 48],
            ..Default::default()
        },
    ).unwrap();
    println!("MC 1e4 took {:?} ({} steps/period, max rate_dt {:.3}) -> 1e5 ~ {:?}",
        t0.elapsed(), mc.steps_per_period, mc.max_rate_dt, t0.elapsed() * 10);
    println!("probe = {:.4}; antisym z = {:.2}", mc.correlation_probe(), mc.antisymmetry_residual().max_z);
    let tr = moments::integrate(
        &consts, &params, &drive,
        &ClosureConfig { tier: Tier::Full, order: 4, steps_per_period: 2048, bins: 64, tol: 1e-9, ..Default::default() },
    ).unwrap();
    println!("full L=4 converged {} in {}", tr.converged, tr.periods_run);
    let mut wn: f64 = 0.0;
    let mut wx: f64 = 0.0;
    let mut wd: f64 = 0.0;
    for b in 0..64 {
        for s in 0..2 {
            wn = wn.max((tr.states[b].n[s] - mc.mean_n[s].mean[b]).abs() / mc.mean_n[s].se[b].max(1e-300));
            wx = wx.max((tr.states[b].x[s] - mc.mean_x[s].mean[b]).abs() / mc.mean_x[s].se[b].max(1e-300));
            wd = wd.max((tr.states[b].d[s] - mc.var_n[s].mean[b]).abs() / mc.var_n[s].se[b].max(1e-300));
        }
    }
    println!("worst z at 1e4 samples: n {wn:.2}, x {wx:.2}, D {wd:.2}");
    println!("x amp {:.2e}, n amp mc {:.3}", 
        mc.mean_x[0].mean.iter().fold(0.0f64, |a, &b| a.max(b.abs())),
        mc.mean_n[0].mean.iter().fold(0.0f64, |a, &b| a.max(b.abs())));
}

#[test]
#[ignore]
fn pilot_rigid_n_sector() {
    use shuttlesim::device::CapacitanceInput;
    use shuttlesim::presets::SeriesChain;
    let chain = SeriesChain {
        c_j: [4.0e-17, 8.0e-17, 4.0e-17],
        shuttle_ground: 0.0,
        drain_ground: 5.0e-17,
        gap: 5.0e-9,
        gate: None,
    };
    let rigid = CapacitanceInput::rigid(chain.build().blocks);
    let consts = derive_constants(&rigid).unwrap();
    let mut params = presets::params_default();
    params.temperature = 30.0;
    let drive = DriveWaveform::sine(0.008, 2.0e7);
    let ms = master::evolve(
        &consts, &params, &drive,
        LatticeBounds::centered([0, 0], 10),
        &MasterConfig { steps_per_period: 2048, bins: 64, frozen_mechanics: true, tol: 1e-13, ..Default::default() },
    ).unwrap();
    let n_amp = ms.mean_n[0].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let d_amp = ms.var_n[0].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    for order in [2usize, 4, 6] {
        let tr = moments::integrate(
            &consts, &params, &drive,
            &ClosureConfig { tier: Tier::Variance, order, bins: 64, steps_per_period: 2048, tol: 1e-10, ..Default::default() },
        ).unwrap();
        let mut dn: f64 = 0.0;
        let mut dd: f64 = 0.0;
        let mut arg = 0usize;
        for b in 0..64 {
            let e = (tr.states[b].n[0] - ms.mean_n[0][b]).abs();
            if e > dn { dn = e; arg = b; }
            dd = dd.max((tr.states[b].d[0] - ms.var_n[0][b]).abs());
        }
        println!(
            "rigid variance L={order}: |dn| {:.3e} ({:.3}% of {:.3}) at bin {}, |dD| {:.3e} ({:.3}%)",
            dn, dn / n_amp * 100.0, n_amp, arg, dd, dd / d_amp * 100.0
        );
        if order == 4 {
            for b in [0usize, 16, 32, 48] {
                println!(
                    "  bin {b}: model n1 {:+.5} D11 {:.5} | master n1 {:+.5} D11 {:.5} skew-ish m3 {:+.4}",
                    tr.states[b].n[0], tr.states[b].d[0], ms.mean_n[0][b], ms.var_n[0][b],
                    third_central(&ms, b)
                );
            }
        }
    }
}

fn third_central(ms: &shuttlesim::master::MasterResult, bin: usize) -> f64 {
    let mut m1 = 0.0;
    for (idx, &p) in ms.pdfs[bin].iter().enumerate() {
        m1 += p * ms.bounds.site(idx)[0] as f64;
    }
    let mut m3 = 0.0;
    for (idx, &p) in ms.pdfs[bin].iter().enumerate() {
        let d = ms.bounds.site(idx)[0] as f64 - m1;
        m3 += p * d * d * d;
    }
    m3
}

#[test]
#[ignore]
fn pilot_bigc_triangulate() {
    use shuttlesim::presets::SeriesChain;
    let chain = SeriesChain {
        c_j: [4.0e-17, 8.0e-17, 4.0e-17],
        shuttle_ground: 0.0,
        drain_ground: 5.0e-17,
        gap: 2.0e-8,
        gate: None,
    };
    let consts = derive_constants(&chain.build()).unwrap();
    let mut params = presets::params_default();
    params.temperature = 30.0;
    let drive = DriveWaveform::sine(0.008, 2.0e7);

    // Master WITH mean-field mechanics feedback.
    let ms = master::evolve(
        &consts, &params, &drive,
        LatticeBounds::centered([0, 0], 10),
        &MasterConfig { steps_per_period: 4096, bins: 64, frozen_mechanics: false, tol: 1e-13, ..Default::default() },
    ).unwrap();
    println!("master(mech) converged {} in {}; x excursion {:.3e}", ms.converged, ms.periods_run, ms.k_excursion);
    let tr = moments::integrate(
        &consts, &params, &drive,
        &ClosureConfig { tier: Tier::Full, order: 6, steps_per_period: 2048, bins: 64, tol: 1e-10, ..Default::default() },
    ).unwrap();
    let n_amp = ms.mean_n[0].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut dn: f64 = 0.0;
    let mut dx: f64 = 0.0;
    let mut dd: f64 = 0.0;
    let x_amp = ms.mean_x[0].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let d_amp = ms.var_n[0].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    for b in 0..64 {
        dn = dn.max((tr.states[b].n[0] - ms.mean_n[0][b]).abs());
        dx = dx.max((tr.states[b].x[0] - ms.mean_x[0][b]).abs());
        dd = dd.max((tr.states[b].d[0] - ms.var_n[0][b]).abs());
    }
    println!(
        "full L4 vs master(mech): |dn| {:.2e} ({:.3}%), |dx| {:.2e} ({:.3}% of {:.2e}), |dD| {:.2e} ({:.3}%)",
        dn, dn / n_amp * 100.0, dx, dx / x_amp * 100.0, x_amp, dd, dd / d_amp * 100.0
    );

    let t0 = std::time::Instant::now();
    let mc = monte_carlo::simulate(
        &consts, &params, &drive,
        &McConfig {
            dt: drive.period() / 4608.0,
            samples: 10_000,
            periods_burnin: 4,
            periods_measure: 4,
            bins: 64,
            groups: 100,
            master_seed: 20_260_808,
            event_budget: 0.08,
            hist_bins: vec![],
            ..Default::default()
        },
    ).unwrap();
    println!("MC 1e4 took {:?} (max rate_dt {:.3})", t0.elapsed(), mc.max_rate_dt);
    let mut zn: f64 = 0.0; let mut zx: f64 = 0.0; let mut zd: f64 = 0.0;
    let mut mn: f64 = 0.0; let mut mx: f64 = 0.0; let mut md: f64 = 0.0;
    for b in 0..64 {
        for s in 0..2 {
            let (d, se) = ((tr.states[b].n[s] - mc.mean_n[s].mean[b]).abs(), mc.mean_n[s].se[b]);
            zn = zn.max(d / se.max(1e-300)); mn = mn.max(d);
            let (d, se) = ((tr.states[b].x[s] - mc.mean_x[s].mean[b]).abs(), mc.mean_x[s].se[b]);
            zx = zx.max(d / se.max(1e-300)); mx = mx.max(d);
            let (d, se) = ((tr.states[b].d[s] - mc.var_n[s].mean[b]).abs(), mc.var_n[s].se[b]);
            zd = zd.max(d / se.max(1e-300)); md = md.max(d);
        }
    }
    println!("full-vs-MC: worst z n {zn:.2} (|d| {:.2e}), x {zx:.2} ({:.2e}), D {zd:.2} ({:.2e})", mn, mx, md);
    println!("typical SE: n {:.2e}, x {:.2e}, D {:.2e}", mc.mean_n[0].se[16], mc.mean_x[0].se[16], mc.var_n[0].se[16]);
    // MC vs master(mech): is the mean-field reference already at MC level?
    let mut zn2: f64 = 0.0;
    for b in 0..64 {
        zn2 = zn2.max((ms.mean_n[0][b] - mc.mean_n[0].mean[b]).abs() / mc.mean_n[0].se[b].max(1e-300));
    }
    println!("master(mech)-vs-MC worst z n1 = {zn2:.2}");
}
