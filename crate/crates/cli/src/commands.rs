//! Subcommands: each reads a parsed scene, writes its CSV and report files
//! into the output directory and returns the report text.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raylines::families::{
    default_tolerance, defect_grid, fmt17, reconstruct_wavefront, transform_family, Family, Grid,
    Param, RayFamily,
};
use raylines::line_space::{symplectic_deviation, symplectic_ratio, FD_STEP};
use raylines::optics::{trace_ray, Action, OpticalSystem, SEGMENT_EPS};
use raylines::line_space::chart_jacobian;
use raylines::variational::{
    characteristic_function, design_focusing_mirror, seed_level, verify_focus, Epsilon,
};
use thiserror::Error;

use crate::scene::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Trace,
    Defect,
    CheckSymplectic,
    Wavefront,
    Mirror,
    Characteristic,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Trace => "trace",
            Command::Defect => "defect",
            Command::CheckSymplectic => "check-symplectic",
            Command::Wavefront => "wavefront",
            Command::Mirror => "mirror",
            Command::Characteristic => "characteristic",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    /// The scene lacks something the command needs.
    #[error("scene: {0}")]
    Scene(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// 1 for problems with the inputs, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Scene(_) | RunError::Io { .. } => 1,
            RunError::Numerical(_) => 2,
        }
    }
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: String,
    /// Files written, in order.
    pub files: Vec<PathBuf>,
}

/// Command-line values that take precedence over the scene's `[options]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub grid: Option<usize>,
    pub tol: Option<f64>,
    pub step: Option<f64>,
    pub seed: Option<u64>,
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn write(&mut self, name: &str, contents: &str) -> Result<(), RunError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|source| RunError::Io {
            path: path.clone(),
            source,
        })?;
        self.files.push(path);
        Ok(())
    }
}

fn numerical(e: impl std::fmt::Display) -> RunError {
    RunError::Numerical(e.to_string())
}

/// Appends `key: value` lines.
struct Report(String);

impl Report {
    fn new(command: Command) -> Self {
        Self(format!("command: {}\n", command.name()))
    }

    fn line(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.0, "{key}: {value}");
        self
    }

    fn num(&mut self, key: &str, value: f64) -> &mut Self {
        self.line(key, fmt17(value))
    }
}

fn verdict(ok: bool, yes: &str, no: &str) -> String {
    if ok { yes } else { no }.to_string()
}

/// Family seen after the optical system; the base family when the system is empty.
fn output_family(scene: &Scene) -> RayFamily {
    if scene.system.is_empty() {
        scene.family.clone()
    } else {
        transform_family(&scene.family, &scene.system)
    }
}

pub fn run(
    command: Command,
    scene: &Scene,
    out_dir: &Path,
    overrides: &Overrides,
) -> Result<Outcome, RunError> {
    fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut writer = Writer {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    let ctx = Context {
        scene,
        grid: overrides.grid.unwrap_or(scene.grid),
        tol: overrides.tol.or(scene.options.tol),
        step: overrides.step.or(scene.options.step),
        seed: overrides.seed.unwrap_or(scene.options.seed),
    };
    if ctx.grid < 3 {
        return Err(RunError::Scene(format!("grid must be at least 3, got {}", ctx.grid)));
    }
    let report = match command {
        Command::Trace => trace(&ctx, &mut writer)?,
        Command::Defect => defect(&ctx, &mut writer)?,
        Command::CheckSymplectic => check_symplectic(&ctx, &mut writer)?,
        Command::Wavefront => wavefront(&ctx, &mut writer)?,
        Command::Mirror => mirror(&ctx, &mut writer)?,
        Command::Characteristic => characteristic(&ctx, &mut writer)?,
    };
    Ok(Outcome {
        report,
        files: writer.files,
    })
}

struct Context<'a> {
    scene: &'a Scene,
    grid: usize,
    tol: Option<f64>,
    step: Option<f64>,
    seed: u64,
}

fn trace(ctx: &Context, w: &mut Writer) -> Result<String, RunError> {
    let scene = ctx.scene;
    let grid = Grid::new(&scene.family.domain, ctx.grid, 0.0).map_err(numerical)?;
    let mut csv = String::from("k1,k2,qx,qy,qz,ux,uy,uz,optical_length\n");
    let mut max_length = 0.0f64;
    for k in grid.nodes() {
        let ray = scene.family.ray(&k).map_err(numerical)?;
        let result = trace_ray(&ray, &scene.system)
            .map_err(|e| RunError::Numerical(format!("ray k = ({}, {}): {e}", k.x, k.y)))?;
        let line = result.line_out();
        let (q, u) = (line.foot(), line.direction());
        max_length = max_length.max(result.optical_length);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            fmt17(k.x),
            fmt17(k.y),
            fmt17(q.x),
            fmt17(q.y),
            fmt17(q.z),
            fmt17(u.x),
            fmt17(u.y),
            fmt17(u.z),
            fmt17(result.optical_length)
        );
    }
    w.write("trace.csv", &csv)?;
    let mut r = Report::new(Command::Trace);
    r.line("grid", ctx.grid)
        .line("rays", grid.n * grid.n)
        .line("interfaces", scene.system.interfaces().len())
        .num("segment_eps", SEGMENT_EPS)
        .num("max_optical_length", max_length);
    w.write("trace_report.txt", &r.0)?;
    Ok(r.0)
}

fn defect(ctx: &Context, w: &mut Writer) -> Result<String, RunError> {
    let scene = ctx.scene;
    let domain = scene.family.domain;
    let h = ctx.step.unwrap_or_else(|| domain.default_step());
    let tol = ctx.tol.unwrap_or_else(|| default_tolerance(&domain));
    let before = defect_grid(&scene.family, ctx.grid, h).map_err(numerical)?;
    let after = defect_grid(&output_family(scene), ctx.grid, h).map_err(numerical)?;
    w.write("defect_before.csv", &before.to_csv())?;
    w.write("defect_after.csv", &after.to_csv())?;
    let mut r = Report::new(Command::Defect);
    r.line("grid", ctx.grid)
        .num("step", h)
        .num("tolerance", tol)
        .line("interfaces", scene.system.interfaces().len())
        .num("max_abs_defect_before", before.max_abs_defect)
        .line(
            "verdict_before",
            verdict(before.max_abs_defect < tol, "RECTANGULAR", "NOT RECTANGULAR"),
        )
        .num("max_abs_defect_after", after.max_abs_defect)
        .line(
            "verdict_after",
            verdict(after.max_abs_defect < tol, "RECTANGULAR", "NOT RECTANGULAR"),
        );
    w.write("defect_report.txt", &r.0)?;
    Ok(r.0)
}

fn check_symplectic(ctx: &Context, w: &mut Writer) -> Result<String, RunError> {
    let scene = ctx.scene;
    let tol = ctx.tol.unwrap_or(1e-6);
    let domain = scene.family.domain;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let samples: Vec<Param> = (0..scene.options.samples)
        .map(|_| {
            Param::new(
                rng.random_range(domain.k1.0..=domain.k1.1),
                rng.random_range(domain.k2.0..=domain.k2.1),
            )
        })
        .collect();
    let count = scene.system.interfaces().len();
    let mut deviation = vec![0.0f64; count];
    let mut ratio_sum = vec![0.0f64; count];
    let mut system_deviation = 0.0f64;
    let mut system_ratio_sum = 0.0;
    let expected_system = scene.system.ambient_index() / scene.system.exit_index();
    for k in &samples {
        let ray = scene.family.ray(k).map_err(numerical)?;
        let mut current = ray;
        for (i, it) in scene.system.interfaces().iter().enumerate() {
            let jac = it.chart_jacobian(&current.line(), &current.origin).map_err(|e| {
                RunError::Numerical(format!("interface {i}, sample k = ({}, {}): {e}", k.x, k.y))
            })?;
            deviation[i] = deviation[i].max(symplectic_deviation(&jac, it.symplectic_ratio()));
            ratio_sum[i] += symplectic_ratio(&jac);
            current = it
                .apply(&current, SEGMENT_EPS)
                .map_err(|e| RunError::Numerical(format!("interface {i}, sample k = ({}, {}): {e}", k.x, k.y)))?
                .0;
        }
        let scale = current.origin.norm().max(ray.origin.norm());
        let jac = chart_jacobian(&ray.line(), scale, |l| {
            trace_ray(&raylines::line_space::Ray::on_line(l, &ray.origin), &scene.system)
                .map(|t| t.line_out())
        })
        .map_err(|e| RunError::Numerical(format!("system, sample k = ({}, {}): {e}", k.x, k.y)))?;
        system_deviation = system_deviation.max(symplectic_deviation(&jac, expected_system));
        system_ratio_sum += symplectic_ratio(&jac);
    }
    let n = samples.len() as f64;
    let mut r = Report::new(Command::CheckSymplectic);
    r.line("samples", samples.len())
        .line("seed", ctx.seed)
        .num("step", FD_STEP)
        .num("tolerance", tol);
    for (i, it) in scene.system.interfaces().iter().enumerate() {
        let action = match it.action {
            Action::Reflect => "reflect",
            Action::Refract => "refract",
        };
        r.line(&format!("interface_{i}_action"), action)
            .num(&format!("interface_{i}_expected_ratio"), it.symplectic_ratio())
            .num(&format!("interface_{i}_measured_ratio"), ratio_sum[i] / n)
            .num(&format!("interface_{i}_max_deviation"), deviation[i])
            .line(
                &format!("interface_{i}_verdict"),
                verdict(deviation[i] < tol, "PASS", "FAIL"),
            );
    }
    r.num("system_expected_ratio", expected_system)
        .num("system_measured_ratio", system_ratio_sum / n)
        .num("system_max_deviation", system_deviation)
        .line("system_verdict", verdict(system_deviation < tol, "PASS", "FAIL"));
    w.write("symplectic_report.txt", &r.0)?;
    Ok(r.0)
}

fn wavefront(ctx: &Context, w: &mut Writer) -> Result<String, RunError> {
    let scene = ctx.scene;
    let family = output_family(scene);
    let k0 = scene.options.k0.unwrap_or_else(|| family.domain.center());
    let wf = reconstruct_wavefront(&family, &k0, scene.options.c, ctx.grid).map_err(numerical)?;
    let residual = wf.orthogonality_residual(&family).map_err(numerical)?;
    w.write("wavefront.csv", &wf.to_csv())?;
    let mut r = Report::new(Command::Wavefront);
    r.line("grid", ctx.grid)
        .num("step", wf.step)
        .num("phase_tolerance", raylines::families::PHASE_REFINE_TOL)
        .num("path_discrepancy_max", raylines::families::PATH_DISCREPANCY_MAX)
        .num("k0_1", k0.x)
        .num("k0_2", k0.y)
        .num("c", scene.options.c)
        .num("path_discrepancy", wf.path_discrepancy)
        .num("orthogonality_residual", residual);
    w.write("wavefront_report.txt", &r.0)?;
    Ok(r.0)
}

fn mirror(ctx: &Context, w: &mut Writer) -> Result<String, RunError> {
    let scene = ctx.scene;
    let focus = scene
        .options
        .focus
        .ok_or_else(|| RunError::Scene("mirror needs 'focus' in [options]".into()))?;
    let tol = ctx.tol.unwrap_or(1e-6);
    let family = output_family(scene);
    let k0 = scene.options.k0.unwrap_or_else(|| family.domain.center());
    let eps = scene.options.epsilon;
    let level = seed_level(&family, &k0, scene.options.seed_distance, &focus, eps).map_err(numerical)?;
    let md = design_focusing_mirror(&family, &k0, focus, eps, level, ctx.grid).map_err(numerical)?;
    let check = verify_focus(&md, tol).map_err(numerical)?;
    w.write("mirror.csv", &md.to_csv())?;
    let mut r = Report::new(Command::Mirror);
    r.line("grid", ctx.grid)
        .num("step", md.wavefront.step)
        .num("tolerance", tol)
        .line(
            "epsilon",
            match eps {
                Epsilon::Plus => "+1",
                Epsilon::Minus => "-1",
            },
        )
        .num("level", level)
        .num("level_residual", md.level_residual())
        .line("checked_nodes", check.checked)
        .num("max_miss_distance", check.max_miss)
        .line("verdict", verdict(check.focused, "FOCUSED", "NOT FOCUSED"));
    w.write("mirror_report.txt", &r.0)?;
    Ok(r.0)
}

fn characteristic(ctx: &Context, w: &mut Writer) -> Result<String, RunError> {
    let scene = ctx.scene;
    let (Some(m1), Some(m2)) = (scene.options.m1, scene.options.m2) else {
        return Err(RunError::Scene("characteristic needs 'm1' and 'm2' in [options]".into()));
    };
    let system: &OpticalSystem = &scene.system;
    let ch = characteristic_function(m1, m2, system, None).map_err(numerical)?;
    let mut r = Report::new(Command::Characteristic);
    r.0.push_str(&ch.report().map_err(numerical)?);
    w.write("characteristic.txt", &r.0)?;
    Ok(r.0)
}
