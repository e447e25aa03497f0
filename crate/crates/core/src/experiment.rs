//! Whole runs with their on-disk artifacts, checkpoint rendering, and the
//! pipeline comparison over the standard busbar layouts.

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, ShapeConfig};
use crate::error::{Error, Result};
use crate::io::{
    append_log, busbar_pixels, grid_image, read_log, write_density_pgm, write_overlay_ppm,
    OutputLock,
};
use crate::mesh::{BusbarSegment, BusbarSpec, Edge, Mesh};
use crate::optimize::{
    run_direct, run_solarnet, Generator, IterationLog, Pipeline, RunConfig, Runner,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const DENSITY_FILE: &str = "density.pgm";
pub const OVERLAY_FILE: &str = "overlay.ppm";
pub const SNAPSHOT_DIR: &str = "snapshots";

pub fn build_runner(cfg: &ExperimentConfig) -> Result<Runner> {
    let problem = cfg.problem()?;
    let generator = match cfg.run.pipeline {
        Pipeline::Direct => Generator::direct(problem.model()),
        Pipeline::Solarnet => Generator::cnn(problem.model(), cfg.arch())?,
    };
    Runner::new(problem, generator, cfg.run.clone())
}

/// Writes `density.pgm` and `overlay.ppm` for a per-element field.
pub fn write_design_images(mesh: &Mesh, density: &[f64], dir: &Path) -> Result<()> {
    let g = mesh.grid();
    let img = grid_image(mesh, density);
    write_density_pgm(&dir.join(DENSITY_FILE), &img, g.nx, g.ny)?;
    write_overlay_ppm(
        &dir.join(OVERLAY_FILE),
        &img,
        &busbar_pixels(mesh),
        g.nx,
        g.ny,
    )
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub best_efficiency: f64,
    pub best_iteration: usize,
    pub iterations: usize,
    pub failed_iterations: usize,
}

fn same_experiment(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let strip = |c: &ExperimentConfig| {
        let mut c = c.resolved();
        c.output_dir = PathBuf::new();
        c.run.max_iters = 1;
        c
    };
    strip(a) == strip(b)
}

/// Runs the configured pipeline into `cfg.output_dir`, continuing from
/// `resume` if given. Writes the resolved config, a CSV log row per
/// iteration, periodic snapshots and checkpoints, and the best design's
/// images.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    resume: Option<Checkpoint>,
    mut progress: impl FnMut(&IterationLog),
) -> Result<RunSummary> {
    let dir = cfg.output_dir.clone();
    let _lock = OutputLock::acquire(&dir)?;
    let resolved = cfg.resolved();
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, resolved.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;

    let mut runner = build_runner(&resolved)?;
    let log_path = dir.join(LOG_FILE);
    let mut state = match resume {
        Some(ckpt) => {
            if !same_experiment(&ckpt.config, cfg) {
                return Err(Error::Checkpoint(
                    "checkpoint was written for a different configuration".into(),
                ));
            }
            ckpt.validate_against(runner.generator())?;
            let kept: Vec<IterationLog> = if log_path.exists() {
                read_log(&log_path)?
                    .into_iter()
                    .filter(|r| r.iteration < ckpt.state.iteration)
                    .collect()
            } else {
                Vec::new()
            };
            remove_if_exists(&log_path)?;
            for row in &kept {
                append_log(&log_path, row)?;
            }
            ckpt.state
        }
        None => {
            remove_if_exists(&log_path)?;
            runner.initial_state()?
        }
    };

    let snapshots = dir.join(SNAPSHOT_DIR);
    let every = resolved.run.snapshot_every;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut failed = 0;
    let logs = runner.run_from(&mut state, |r, row, st| {
        append_log(&log_path, row)?;
        failed += usize::from(row.failed());
        progress(row);
        if every > 0 && (row.iteration + 1) % every == 0 {
            std::fs::create_dir_all(&snapshots).map_err(|e| Error::io(&snapshots, e))?;
            if let Some(prev) = &st.previous {
                let design = r.filtered_design(&prev.params)?;
                let mesh = r.problem().model().mesh();
                let g = mesh.grid();
                let path = snapshots.join(format!("density_{:05}.pgm", row.iteration));
                write_density_pgm(&path, &grid_image(mesh, &design), g.nx, g.ny)?;
            }
            Checkpoint::new(resolved.clone(), st.clone()).save(&ckpt_path)?;
        }
        Ok(())
    })?;

    Checkpoint::new(resolved.clone(), state.clone()).save(&ckpt_path)?;
    let best = state
        .best
        .as_ref()
        .ok_or_else(|| Error::config("no iteration produced a converged solve"))?;
    write_design_images(runner.problem().model().mesh(), &best.density, &dir)?;
    Ok(RunSummary {
        out_dir: dir,
        best_efficiency: best.efficiency,
        best_iteration: best.iteration,
        iterations: logs.len(),
        failed_iterations: failed,
    })
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// The design stored in a checkpoint: its best iterate if it has one,
/// otherwise the current parameters pushed through the generator.
pub fn checkpoint_design(ckpt: &Checkpoint) -> Result<(Mesh, Vec<f64>)> {
    let runner = build_runner(&ckpt.config)?;
    ckpt.validate_against(runner.generator())?;
    let density = match &ckpt.state.best {
        Some(best) => best.density.clone(),
        None => runner.filtered_design(&ckpt.state.params)?,
    };
    Ok((runner.problem().model().mesh().clone(), density))
}

/// Writes the checkpoint's design to `out`: a red-busbar overlay for a
/// `.ppm` extension, a 16-bit grayscale PGM otherwise.
pub fn render_checkpoint(ckpt: &Checkpoint, out: &Path) -> Result<()> {
    let (mesh, density) = checkpoint_design(ckpt)?;
    let g = mesh.grid();
    let img = grid_image(&mesh, &density);
    if out
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
    {
        write_overlay_ppm(out, &img, &busbar_pixels(&mesh), g.nx, g.ny)
    } else {
        write_density_pgm(out, &img, g.nx, g.ny)
    }
}

/// The four square-cell busbar layouts and the triangular cell, all with
/// 2 mm contacts unless the contact spans a whole edge.
pub fn standard_layouts(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let w = 2e-3;
    let (lx, ly) = (base.grid.lx, base.grid.ly);
    let v = base.busbar.voltage;
    let seg = |edge, start, length| BusbarSegment {
        edge,
        start,
        length,
    };
    let square = |segments: Vec<BusbarSegment>| {
        let mut c = base.clone();
        c.shape = ShapeConfig::Square;
        c.busbar = BusbarSpec::new(segments, v);
        c
    };
    let mut triangle = square(vec![seg(Edge::Left, 0.5 * (ly - w), w)]);
    triangle.shape = ShapeConfig::Triangle;
    vec![
        (
            "edge-centered".into(),
            square(vec![seg(Edge::Left, 0.5 * (ly - w), w)]),
        ),
        ("full-edge".into(), square(vec![seg(Edge::Left, 0.0, ly)])),
        (
            "opposite-edges".into(),
            square(vec![
                seg(Edge::Left, 0.5 * (ly - w), w),
                seg(Edge::Right, 0.5 * (ly - w), w),
            ]),
        ),
        (
            "corner".into(),
            square(vec![
                seg(Edge::Left, 0.0, w),
                seg(Edge::Bottom, 0.0, w.min(lx)),
            ]),
        ),
        ("triangle".into(), triangle),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub layout: String,
    /// Best efficiency of the direct pipeline. Its initial design does not
    /// depend on the seed, so it runs once.
    pub direct: f64,
    /// Best efficiency of each seeded network run.
    pub solarnet_seeds: Vec<f64>,
}

impl CompareRow {
    pub fn solarnet(&self) -> f64 {
        self.solarnet_seeds
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn delta(&self) -> f64 {
        self.solarnet() - self.direct
    }
}

/// Best-of-seeds efficiency of both pipelines on every standard layout,
/// each with the base config's iteration budget and solver settings.
pub fn compare_pipelines(
    base: &ExperimentConfig,
    seeds: usize,
    mut progress: impl FnMut(&str, Pipeline, u64, f64),
) -> Result<Vec<CompareRow>> {
    if seeds == 0 {
        return Err(Error::config("compare needs at least one seed"));
    }
    let mut rows = Vec::new();
    for (name, cfg) in standard_layouts(base) {
        // Each pipeline uses its own default learning rate.
        let direct_run = RunConfig {
            lr: None,
            ..cfg.run.clone()
        };
        let direct = run_direct(cfg.problem()?, &direct_run)?.best_efficiency;
        progress(&name, Pipeline::Direct, cfg.run.seed, direct);
        let mut solarnet_seeds = Vec::with_capacity(seeds);
        for s in 0..seeds as u64 {
            let run = RunConfig {
                seed: cfg.run.seed + s,
                ..direct_run.clone()
            };
            let eff = run_solarnet(cfg.problem()?, cfg.arch(), &run)?.best_efficiency;
            progress(&name, Pipeline::Solarnet, run.seed, eff);
            solarnet_seeds.push(eff);
        }
        rows.push(CompareRow {
            layout: name,
            direct,
            solarnet_seeds,
        });
    }
    Ok(rows)
}

pub fn format_compare_table(rows: &[CompareRow]) -> String {
    let mut s = format!(
        "{:<16} {:>10} {:>12} {:>8}\n",
        "layout", "direct_%", "solarnet_%", "delta"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>10.4} {:>12.4} {:>+8.4}\n",
            r.layout,
            r.direct,
            r.solarnet(),
            r.delta()
        ));
    }
    s
}
