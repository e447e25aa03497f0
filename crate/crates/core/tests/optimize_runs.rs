//! Run-level properties of both pipelines.

use metalopt_core::cnn::CnnArch;
use metalopt_core::optimize::{Generator, Runner};
use metalopt_core::physics::ideal_efficiency;
use metalopt_core::{
    run_direct, run_solarnet, CellParams, ExperimentConfig, IterationLog, RunConfig, SolveOptions,
};

fn run_cfg(iters: usize) -> RunConfig {
    RunConfig {
        max_iters: iters,
        ..RunConfig::default()
    }
}

fn mirror_asymmetry(density: &[f64], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for i in 0..n {
            worst = worst.max((density[j * n + i] - density[(n - 1 - j) * n + i]).abs());
        }
    }
    worst
}

fn strip_time(logs: &[IterationLog]) -> Vec<IterationLog> {
    logs.iter()
        .map(|l| IterationLog {
            wall_s: 0.0,
            ..l.clone()
        })
        .collect()
}

#[test]
fn direct_design_is_mirror_symmetric() {
    let cfg = ExperimentConfig::square(32);
    let out = run_direct(cfg.problem().unwrap(), &run_cfg(50)).unwrap();
    let asym = mirror_asymmetry(out.density.as_slice(), 32);
    assert!(asym < 1e-6, "{asym}");
}

#[test]
fn direct_efficiency_improves_and_best_is_monotone() {
    let cfg = ExperimentConfig::square(24);
    let out = run_direct(cfg.problem().unwrap(), &run_cfg(50)).unwrap();
    assert!(out.logs[49].efficiency > out.logs[0].efficiency);
    let mut best = f64::NEG_INFINITY;
    let mut running = Vec::new();
    for l in &out.logs {
        best = best.max(l.efficiency);
        running.push(best);
    }
    assert!(running.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(out.best_efficiency, best);
    assert_eq!(out.logs[out.best_iteration].efficiency, best);
}

#[test]
fn runs_are_bitwise_reproducible() {
    let cfg = ExperimentConfig::square(16);
    let a = run_direct(cfg.problem().unwrap(), &run_cfg(20)).unwrap();
    let b = run_direct(cfg.problem().unwrap(), &run_cfg(20)).unwrap();
    assert_eq!(strip_time(&a.logs), strip_time(&b.logs));
    assert_eq!(a.density, b.density);

    let run = RunConfig {
        seed: 4,
        ..run_cfg(15)
    };
    let a = run_solarnet(cfg.problem().unwrap(), CnnArch::for_grid(16, 16), &run).unwrap();
    let b = run_solarnet(cfg.problem().unwrap(), CnnArch::for_grid(16, 16), &run).unwrap();
    assert_eq!(a.best_efficiency.to_bits(), b.best_efficiency.to_bits());
    assert_eq!(strip_time(&a.logs), strip_time(&b.logs));
    assert_eq!(a.params, b.params);
}

#[test]
fn solarnet_improves_on_its_initial_design() {
    let cfg = ExperimentConfig::square(32);
    let out = run_solarnet(
        cfg.problem().unwrap(),
        CnnArch::for_grid(32, 32),
        &run_cfg(60),
    )
    .unwrap();
    assert!(
        out.best_efficiency > out.logs[0].efficiency + 1.0,
        "{} -> {}",
        out.logs[0].efficiency,
        out.best_efficiency
    );
}

#[test]
fn solarnet_breaks_symmetry() {
    let cfg = ExperimentConfig::square(32);
    let out = run_solarnet(
        cfg.problem().unwrap(),
        CnnArch::for_grid(32, 32),
        &run_cfg(10),
    )
    .unwrap();
    assert!(mirror_asymmetry(out.density.as_slice(), 32) > 1e-3);
}

#[test]
fn every_density_and_efficiency_in_range() {
    let cfg = ExperimentConfig::square(16);
    let ceiling = ideal_efficiency(&CellParams::default(), 0.5);
    let no_diode = ideal_efficiency(
        &CellParams {
            j_dark: 0.0,
            ..CellParams::default()
        },
        0.5,
    );
    assert!((no_diode - 15.5).abs() < 1e-12);
    for gen in ["direct", "solarnet"] {
        let problem = cfg.problem().unwrap();
        let generator = if gen == "direct" {
            Generator::direct(problem.model())
        } else {
            Generator::cnn(problem.model(), CnnArch::for_grid(16, 16)).unwrap()
        };
        let runner = Runner::new(problem, generator, run_cfg(30)).unwrap();
        let mut state = runner.initial_state().unwrap();
        let mut runner = runner;
        let logs = runner
            .run_from(&mut state, |r, _, st| {
                let prev = &st.previous.as_ref().unwrap().params;
                let (raw, _) = r.generator().design(prev)?;
                let filtered = r.filtered_design(prev)?;
                assert!(raw.iter().chain(&filtered).all(|v| (0.0..=1.0).contains(v)));
                Ok(())
            })
            .unwrap();
        for l in logs {
            assert!(
                l.efficiency <= ceiling && l.efficiency <= no_diode,
                "{gen}: {}",
                l.efficiency
            );
        }
    }
}

#[test]
fn failed_solve_retries_with_half_step() {
    // Two Newton iterations suffice for the first designs but not once the
    // metal pattern sharpens, so later iterations fail.
    let cfg = ExperimentConfig::square(16);
    let problem = cfg.problem().unwrap();
    let strict = metalopt_core::optimize::Problem::with_reference(
        problem.model().clone(),
        problem.filter().clone(),
        SolveOptions {
            newton_max_iter: 2,
            ..SolveOptions::default()
        },
        problem.reference_power(),
    )
    .unwrap();
    let generator = Generator::direct(strict.model());
    let mut runner = Runner::new(strict, generator, run_cfg(40)).unwrap();
    let mut state = runner.initial_state().unwrap();
    let logs = runner.run_from(&mut state, |_, _, _| Ok(())).unwrap();
    let first_fail = logs
        .iter()
        .position(|l| l.failed())
        .expect("a solve should fail");
    assert!(first_fail > 0);
    assert!(logs[..first_fail].iter().all(|l| !l.failed()));
    assert_eq!(logs.len(), 40);
    assert!(state.adam.lr < 0.05);
    let best = state.best.unwrap();
    assert!(best.iteration < logs.len());
    assert!(!logs[best.iteration].failed());
}
