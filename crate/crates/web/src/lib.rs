//! Browser demo: a ray fan through a ball lens, the rectangularity defect of
//! two families, and a focusing-mirror profile. Each export wraps a plain
//! function returning a flat `f64` buffer so the logic is testable natively.

use raylines::families::{defect_grid, transform_family, Domain, Param, RayFamily};
use raylines::line_space::{Ray, Vec3};
use raylines::optics::{Interface, OpticalSystem, SEGMENT_EPS};
use raylines::surfaces::{ImplicitSurface, Side};
use raylines::variational::{design_focusing_mirror, seed_level, verify_focus, Epsilon};
use wasm_bindgen::prelude::*;

/// Length of the segment drawn after the last interface.
const TAIL: f64 = 4.0;

/// Unit ball at the origin, entered from outside in air and left again.
pub fn ball_lens(index: f64) -> Result<OpticalSystem, String> {
    let sphere = ImplicitSurface::sphere(Vec3::zeros(), 1.0).map_err(|e| e.to_string())?;
    OpticalSystem::new(
        1.0,
        vec![
            Interface::refract(sphere.clone().with_incoming(Side::Positive), 1.0, index),
            Interface::refract(sphere.with_incoming(Side::Negative), index, 1.0),
        ],
    )
    .map_err(|e| e.to_string())
}

/// Polylines in the `y = 0` plane for `count` rays leaving `(x, 0, z)`
/// upwards within `spread` of the `+z` axis. Layout: for each ray the
/// number of vertices `m`, then `m` pairs `(x, z)`. A ray stops at the
/// first interface it misses or cannot pass.
pub fn trace_fan(x: f64, z: f64, index: f64, spread: f64, count: usize) -> Result<Vec<f64>, String> {
    if count < 2 {
        return Err("need at least two rays".into());
    }
    let system = ball_lens(index)?;
    let mut out = Vec::new();
    for i in 0..count {
        let slope = spread * (2.0 * i as f64 / (count - 1) as f64 - 1.0);
        let mut ray = Ray::new(Vec3::new(x, 0.0, z), Vec3::new(slope, 0.0, 1.0)).map_err(|e| e.to_string())?;
        let mut vertices = vec![ray.origin];
        for it in system.interfaces() {
            match it.apply(&ray, SEGMENT_EPS) {
                Ok((next, hit)) => {
                    vertices.push(hit.point);
                    ray = next;
                }
                Err(_) => break,
            }
        }
        vertices.push(ray.at(TAIL));
        out.push(vertices.len() as f64);
        out.extend(vertices.iter().flat_map(|p| [p.x, p.z]));
    }
    Ok(out)
}

/// Defect of a family on an `n x n` grid. `kind` 0 is a point source sent
/// through the ball lens, which stays rectangular; `kind` 1 joins two skew
/// lines, which is not. Layout: `n`, the max absolute defect, then the
/// `n * n` values row-major with `k1` outer.
pub fn defect_field(kind: u32, index: f64, n: usize) -> Result<Vec<f64>, String> {
    let family = match kind {
        0 => transform_family(
            &RayFamily::point_source(Vec3::new(0.0, 0.0, -3.0), Vec3::z(), Domain::square(0.25)),
            &ball_lens(index)?,
        ),
        1 => RayFamily::two_skew_lines(
            Vec3::zeros(),
            Vec3::x(),
            Vec3::z(),
            Vec3::y(),
            Domain::new((0.0, 2.0), (0.0, 2.0)).map_err(|e| e.to_string())?,
        ),
        _ => return Err(format!("unknown family kind {kind}")),
    };
    let h = family.domain.default_step();
    let grid = defect_grid(&family, n, h).map_err(|e| e.to_string())?;
    let mut out = vec![n as f64, grid.max_abs_defect];
    out.extend(grid.values);
    Ok(out)
}

/// Mirror that sends a point source at `(0, 0, -1)` to the focus
/// `(fx, 0, fz)`, seeded one unit along the axis. Layout: the max focus
/// miss of the quadratic-fit check, which shrinks with the square of the
/// grid spacing, then `(x, z)` of the mirror points on the row `k2 = 0`.
pub fn mirror_profile(fx: f64, fz: f64, minus: bool, half_width: f64) -> Result<Vec<f64>, String> {
    const N: usize = 21;
    let family = RayFamily::point_source(Vec3::new(0.0, 0.0, -1.0), Vec3::z(), Domain::square(half_width));
    let focus = Vec3::new(fx, 0.0, fz);
    let eps = if minus { Epsilon::Minus } else { Epsilon::Plus };
    let k0 = Param::zeros();
    let level = seed_level(&family, &k0, 1.0, &focus, eps).map_err(|e| e.to_string())?;
    let design = design_focusing_mirror(&family, &k0, focus, eps, level, N).map_err(|e| e.to_string())?;
    let check = verify_focus(&design, 1e-6).map_err(|e| e.to_string())?;
    let grid = design.grid();
    let mut out = vec![check.max_miss];
    for i in 0..grid.n {
        let p = design.points[grid.index(i, grid.n / 2)];
        out.extend([p.x, p.z]);
    }
    Ok(out)
}

fn js(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = traceFan)]
pub fn trace_fan_js(x: f64, z: f64, index: f64, spread: f64, count: usize) -> Result<Vec<f64>, JsError> {
    js(trace_fan(x, z, index, spread, count))
}

#[wasm_bindgen(js_name = defectField)]
pub fn defect_field_js(kind: u32, index: f64, n: usize) -> Result<Vec<f64>, JsError> {
    js(defect_field(kind, index, n))
}

#[wasm_bindgen(js_name = mirrorProfile)]
pub fn mirror_profile_js(fx: f64, fz: f64, minus: bool, half_width: f64) -> Result<Vec<f64>, JsError> {
    js(mirror_profile(fx, fz, minus, half_width))
}
