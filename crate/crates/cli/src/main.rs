use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use raylines_cli::commands::{run, Command, Overrides};
use raylines_cli::scene::parse_scene;

#[derive(Parser)]
#[command(name = "raylines", version, about = "Ray families, mirrors and symplectic checks for smooth optical systems")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Scene file.
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
    /// Output directory; defaults to the scene's `out` option, then `.`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Grid size per parameter axis.
    #[arg(long, global = true)]
    grid: Option<usize>,
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Finite-difference step in parameter space.
    #[arg(long, global = true)]
    step: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Propagate the family and write the outgoing lines.
    Trace,
    /// Rectangularity defect before and after the system.
    Defect,
    /// Pullback of the symplectic form by each interface.
    CheckSymplectic,
    /// Orthogonal surface of the outgoing family.
    Wavefront,
    /// Focusing mirror for the outgoing family.
    Mirror,
    /// Stationary optical length between two points.
    Characteristic,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(scene_path) = cli.scene else {
        eprintln!("error: --scene is required");
        return ExitCode::from(1);
    };
    let text = match std::fs::read_to_string(&scene_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: reading {}: {e}", scene_path.display());
            return ExitCode::from(1);
        }
    };
    let scene = match parse_scene(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", scene_path.display());
            return ExitCode::from(1);
        }
    };
    let command = match cli.command {
        Cmd::Trace => Command::Trace,
        Cmd::Defect => Command::Defect,
        Cmd::CheckSymplectic => Command::CheckSymplectic,
        Cmd::Wavefront => Command::Wavefront,
        Cmd::Mirror => Command::Mirror,
        Cmd::Characteristic => Command::Characteristic,
    };
    let out = cli
        .out
        .or_else(|| scene.options.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let overrides = Overrides {
        grid: cli.grid,
        tol: cli.tol,
        step: cli.step,
        seed: cli.seed,
    };
    match run(command, &scene, &out, &overrides) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
