use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use metalopt_core::experiment::{
    compare_pipelines, format_compare_table, render_checkpoint, run_experiment, CompareRow,
};
use metalopt_core::{gradcheck, Checkpoint, ExperimentConfig};

/// Topology optimization of solar cell front metallization.
#[derive(Parser)]
#[command(name = "metalopt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a design and write images, a CSV log and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `run.seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run of the same
        /// config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every this many iterations; 0 is silent.
        #[arg(long, default_value_t = 10)]
        every: usize,
    },
    /// Check every gradient against finite differences; exits nonzero on
    /// any failure.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Grid size for the physics checks instead of 8 and 16.
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Re-emit the design image from a checkpoint (`.ppm` gives the
    /// busbar overlay, anything else a 16-bit PGM).
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Both pipelines on the standard busbar layouts, best of `seeds`
    /// network initializations.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Where to write `compare.csv`; defaults to the config's
        /// output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            resume,
            every,
        } => {
            let mut cfg = load(&config)?;
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            let resume = resume
                .map(|p| Checkpoint::load(&p).with_context(|| format!("loading {}", p.display())))
                .transpose()?;
            let summary = run_experiment(&cfg, resume, |row| {
                if every > 0 && (row.iteration + 1) % every == 0 {
                    eprintln!(
                        "iter {:>5}  eta {:>8.4}%  loss {:>10.6}  |g| {:.3e}  newton {}",
                        row.iteration, row.efficiency, row.loss, row.grad_norm, row.newton_iters
                    );
                }
            })?;
            println!(
                "best efficiency {:.4}% at iteration {} ({} iterations, {} failed); results in {}",
                summary.best_efficiency,
                summary.best_iteration,
                summary.iterations,
                summary.failed_iterations,
                summary.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { config, grid } => {
            let cfg = load(&config)?;
            let outcomes = gradcheck::run_all(&cfg, grid)?;
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed == 0 {
                println!("all {} checks passed", outcomes.len());
                Ok(ExitCode::SUCCESS)
            } else {
                println!("{failed} of {} checks failed", outcomes.len());
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Render { checkpoint, out } => {
            let ckpt = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            render_checkpoint(&ckpt, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { config, seeds, out } => {
            let cfg = load(&config)?;
            let rows = compare_pipelines(&cfg, seeds, |layout, pipeline, seed, eff| {
                eprintln!(
                    "{layout:<16} {:<9} seed {seed:<4} best {eff:.4}%",
                    pipeline.name()
                );
            })?;
            print!("{}", format_compare_table(&rows));
            let dir = out.unwrap_or(cfg.output_dir);
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("compare.csv");
            write_compare_csv(&path, &rows)
                .with_context(|| format!("writing {}", path.display()))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn write_compare_csv(path: &std::path::Path, rows: &[CompareRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "layout,pipeline,seed_index,efficiency_pct")?;
    for r in rows {
        writeln!(f, "{},direct,0,{:.16e}", r.layout, r.direct)?;
        for (k, e) in r.solarnet_seeds.iter().enumerate() {
            writeln!(f, "{},solarnet,{k},{e:.16e}", r.layout)?;
        }
    }
    f.flush()?;
    Ok(())
}
