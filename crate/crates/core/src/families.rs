//! Two-parameter families of rays and the rectangularity (Lagrangian) test.
//!
//! For a family `k -> L(k)` with unit directions `u(k)` and foot points
//! `P(k)`, the pullback of the symplectic form is
//!
//! ```text
//! defect(k) = dP/dk1 · du/dk2 - dP/dk2 · du/dk1
//! ```
//!
//! and the family admits orthogonal surfaces exactly where this vanishes.
//! Equivalently the one-form `u · dP` is closed; integrating it gives the
//! phase `F(k)` and the orthogonal surfaces `Q(k) = P(k) - (F(k) + c) u(k)`.

use nalgebra::{SMatrix, Vector2};
use thiserror::Error;

use crate::line_space::{LineError, OrientedLine, Ray, Vec3, FD_STEP};
use crate::optics::{trace_ray, OpticalSystem, OpticsError};
use crate::par_map;
use crate::surfaces::{orthonormal_frame, ImplicitSurface, LocalPatch, SurfaceError};

pub type Param = Vector2<f64>;

/// Below this `|det|` the transverse-plane map of [`is_regular_point`] is singular.
pub const REGULAR_DET_MIN: f64 = 1e-8;
/// Minimum ratio of singular values of the family's differential.
pub const IMMERSION_RATIO_MIN: f64 = 1e-8;
/// Trapezoid refinement stops once successive estimates differ by less than this.
pub const PHASE_REFINE_TOL: f64 = 1e-9;
/// Largest allowed disagreement between the two L-shaped integration paths.
pub const PATH_DISCREPANCY_MAX: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FamilyError {
    #[error("stencil around k = ({}, {}) leaves the parameter domain", .0[0], .0[1])]
    DomainBoundary([f64; 2]),
    #[error("family is not immersed at k = ({}, {}) (singular value ratio {ratio:e})", .k[0], .k[1])]
    ImmersionFailure { k: [f64; 2], ratio: f64 },
    #[error("family is not rectangular: path integrals disagree by {discrepancy:e}")]
    NotRectangular { discrepancy: f64 },
    #[error("wavefront point is not regular at k = ({}, {})", .0[0], .0[1])]
    NonRegular([f64; 2]),
    #[error("tracing ray k = ({}, {}): {source}", .k[0], .k[1])]
    Trace {
        k: [f64; 2],
        #[source]
        source: OpticsError,
    },
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error(transparent)]
    Line(#[from] LineError),
    #[error("grid must be at least 3x3, got {0}")]
    BadGrid(usize),
    #[error("invalid domain: {0}")]
    BadDomain(String),
}

/// Axis-aligned rectangle of parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub k1: (f64, f64),
    pub k2: (f64, f64),
}

impl Domain {
    pub fn new(k1: (f64, f64), k2: (f64, f64)) -> Result<Self, FamilyError> {
        if !(k1.0 < k1.1 && k2.0 < k2.1) {
            return Err(FamilyError::BadDomain(format!("{k1:?} x {k2:?}")));
        }
        Ok(Self { k1, k2 })
    }

    pub fn square(half_width: f64) -> Self {
        Self {
            k1: (-half_width, half_width),
            k2: (-half_width, half_width),
        }
    }

    pub fn contains(&self, k: &Param) -> bool {
        let slack = 1e-12 * self.diameter();
        k.x >= self.k1.0 - slack
            && k.x <= self.k1.1 + slack
            && k.y >= self.k2.0 - slack
            && k.y <= self.k2.1 + slack
    }

    pub fn diameter(&self) -> f64 {
        (self.k1.1 - self.k1.0).hypot(self.k2.1 - self.k2.0)
    }

    pub fn center(&self) -> Param {
        Param::new(0.5 * (self.k1.0 + self.k1.1), 0.5 * (self.k2.0 + self.k2.1))
    }

    /// Finite-difference step used by default: `1e-5 x diameter`.
    pub fn default_step(&self) -> f64 {
        FD_STEP * self.diameter()
    }
}

/// Something that produces a ray for every parameter pair.
pub trait Family: Sync {
    fn ray(&self, k: &Param) -> Result<Ray, FamilyError>;

    fn domain(&self) -> Domain;

    fn line(&self, k: &Param) -> Result<OrientedLine, FamilyError> {
        self.ray(k).map(|r| r.line())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FamilyKind {
    /// Rays from `apex` with directions `normalize(axis + k1 e1 + k2 e2)`.
    PointSource { apex: Vec3, axis: Vec3 },
    /// Parallel rays along `direction` from `origin + k1 e1 + k2 e2`.
    Collimated { direction: Vec3, origin: Vec3 },
    /// Normals of a surface, emitted from the patch point with coordinates `k`.
    NormalCongruence { patch: LocalPatch },
    /// Lines from `p1 + k1 d1` to `p2 + k2 d2`.
    TwoSkewLines {
        p1: Vec3,
        d1: Vec3,
        p2: Vec3,
        d2: Vec3,
    },
    /// A base family pushed through an optical system.
    Transformed {
        base: Box<RayFamily>,
        system: OpticalSystem,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayFamily {
    pub kind: FamilyKind,
    pub domain: Domain,
}

impl RayFamily {
    pub fn point_source(apex: Vec3, axis: Vec3, domain: Domain) -> Self {
        Self {
            kind: FamilyKind::PointSource {
                apex,
                axis: axis.normalize(),
            },
            domain,
        }
    }

    pub fn collimated(direction: Vec3, origin: Vec3, domain: Domain) -> Self {
        Self {
            kind: FamilyKind::Collimated {
                direction: direction.normalize(),
                origin,
            },
            domain,
        }
    }

    pub fn normal_congruence(
        surface: &ImplicitSurface,
        anchor: &Vec3,
        domain: Domain,
    ) -> Result<Self, FamilyError> {
        Ok(Self {
            kind: FamilyKind::NormalCongruence {
                patch: LocalPatch::new(surface, anchor)?,
            },
            domain,
        })
    }

    pub fn two_skew_lines(p1: Vec3, d1: Vec3, p2: Vec3, d2: Vec3, domain: Domain) -> Self {
        Self {
            kind: FamilyKind::TwoSkewLines { p1, d1, p2, d2 },
            domain,
        }
    }
}

impl Family for RayFamily {
    fn ray(&self, k: &Param) -> Result<Ray, FamilyError> {
        match &self.kind {
            FamilyKind::PointSource { apex, axis } => {
                let (e1, e2) = orthonormal_frame(axis);
                Ok(Ray::new(*apex, axis + k.x * e1 + k.y * e2)?)
            }
            FamilyKind::Collimated { direction, origin } => {
                let (e1, e2) = orthonormal_frame(direction);
                Ok(Ray {
                    origin: origin + k.x * e1 + k.y * e2,
                    dir: *direction,
                })
            }
            FamilyKind::NormalCongruence { patch } => {
                let p = patch.point(k)?;
                Ok(Ray {
                    origin: p,
                    dir: patch.surface().normal_at(&p)?,
                })
            }
            FamilyKind::TwoSkewLines { p1, d1, p2, d2 } => {
                let a = p1 + k.x * d1;
                let b = p2 + k.y * d2;
                Ok(Ray::new(a, b - a)?)
            }
            FamilyKind::Transformed { base, system } => {
                let ray = base.ray(k)?;
                trace_ray(&ray, system)
                    .map(|r| r.ray_out)
                    .map_err(|source| FamilyError::Trace {
                        k: [k.x, k.y],
                        source,
                    })
            }
        }
    }

    fn domain(&self) -> Domain {
        self.domain
    }
}

/// The family obtained by sending every ray of `family` through `system`.
pub fn transform_family(family: &RayFamily, system: &OpticalSystem) -> RayFamily {
    RayFamily {
        kind: FamilyKind::Transformed {
            base: Box::new(family.clone()),
            system: system.clone(),
        },
        domain: family.domain,
    }
}

/// Square grid of `n x n` nodes on the domain shrunk by `inset` on every side,
/// so that finite-difference stencils of that size stay inside.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub n: usize,
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
}

impl Grid {
    pub fn new(domain: &Domain, n: usize, inset: f64) -> Result<Self, FamilyError> {
        if n < 3 {
            return Err(FamilyError::BadGrid(n));
        }
        let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
            let (lo, hi) = (lo + inset, hi - inset);
            (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect()
        };
        Ok(Self {
            n,
            k1: axis(domain.k1),
            k2: axis(domain.k2),
        })
    }

    /// Nodes in row-major order: `k1` outer, `k2` inner.
    pub fn nodes(&self) -> Vec<Param> {
        self.k1
            .iter()
            .flat_map(|&a| self.k2.iter().map(move |&b| Param::new(a, b)))
            .collect()
    }

    pub fn index(&self, i1: usize, i2: usize) -> usize {
        i1 * self.n + i2
    }
}

fn check_stencil(family: &dyn Family, k: &Param, h: f64) -> Result<(), FamilyError> {
    let d = family.domain();
    for off in [Param::new(h, 0.0), Param::new(0.0, h)] {
        if !d.contains(&(k + off)) || !d.contains(&(k - off)) {
            return Err(FamilyError::DomainBoundary([k.x, k.y]));
        }
    }
    Ok(())
}

/// Central differences of direction and foot point along both parameters.
struct LineDerivatives {
    du: [Vec3; 2],
    dq: [Vec3; 2],
}

fn line_derivatives(family: &dyn Family, k: &Param, h: f64) -> Result<LineDerivatives, FamilyError> {
    check_stencil(family, k, h)?;
    let mut du = [Vec3::zeros(); 2];
    let mut dq = [Vec3::zeros(); 2];
    for i in 0..2 {
        let mut off = Param::zeros();
        off[i] = h;
        let plus = family.line(&(k + off))?;
        let minus = family.line(&(k - off))?;
        du[i] = (plus.direction() - minus.direction()) / (2.0 * h);
        dq[i] = (plus.foot() - minus.foot()) / (2.0 * h);
    }
    Ok(LineDerivatives { du, dq })
}

/// The symplectic form evaluated on the two coordinate tangent vectors of the family.
pub fn defect(family: &dyn Family, k: &Param, h: f64) -> Result<f64, FamilyError> {
    let d = line_derivatives(family, k, h)?;
    Ok(d.dq[0].dot(&d.du[1]) - d.dq[1].dot(&d.du[0]))
}

/// Defect at steps `h` and `h / 2` with the Richardson-extrapolated value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Richardson {
    pub coarse: f64,
    pub fine: f64,
    pub extrapolated: f64,
    /// `|fine - coarse| / 3`, the usual estimate of the fine-step error.
    pub error_estimate: f64,
}

pub fn defect_richardson(family: &dyn Family, k: &Param, h: f64) -> Result<Richardson, FamilyError> {
    let coarse = defect(family, k, h)?;
    let fine = defect(family, k, 0.5 * h)?;
    Ok(Richardson {
        coarse,
        fine,
        extrapolated: (4.0 * fine - coarse) / 3.0,
        error_estimate: (fine - coarse).abs() / 3.0,
    })
}

/// Ratio of the smallest to the largest singular value of `k -> (u, q)`.
pub fn immersion_ratio(family: &dyn Family, k: &Param, h: f64) -> Result<f64, FamilyError> {
    let d = line_derivatives(family, k, h)?;
    let mut m = SMatrix::<f64, 6, 2>::zeros();
    for i in 0..2 {
        for r in 0..3 {
            m[(r, i)] = d.du[i][r];
            m[(r + 3, i)] = d.dq[i][r];
        }
    }
    let sv = m.singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    Ok(if hi > 0.0 { lo / hi } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefectGrid {
    pub grid: Grid,
    /// Row-major like [`Grid::nodes`].
    pub values: Vec<f64>,
    pub max_abs_defect: f64,
    pub step: f64,
}

impl DefectGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k1,k2,value\n");
        for (k, v) in self.grid.nodes().iter().zip(&self.values) {
            out.push_str(&format!("{},{},{}\n", fmt17(k.x), fmt17(k.y), fmt17(*v)));
        }
        out
    }
}

/// Float with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Evaluates the defect on an `n x n` grid, checking the immersion condition everywhere.
pub fn defect_grid(family: &dyn Family, n: usize, h: f64) -> Result<DefectGrid, FamilyError> {
    let grid = Grid::new(&family.domain(), n, h)?;
    let nodes = grid.nodes();
    let results = par_map(&nodes, |k| -> Result<f64, FamilyError> {
        let ratio = immersion_ratio(family, k, h)?;
        if !(ratio > IMMERSION_RATIO_MIN) {
            return Err(FamilyError::ImmersionFailure { k: [k.x, k.y], ratio });
        }
        defect(family, k, h)
    });
    let values = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let max_abs_defect = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(DefectGrid {
        grid,
        values,
        max_abs_defect,
        step: h,
    })
}

/// Default rectangularity tolerance: `1e-6 x max(1, domain diameter)`.
pub fn default_tolerance(domain: &Domain) -> f64 {
    1e-6 * domain.diameter().max(1.0)
}

/// `true` iff `max |defect| < tol` over the grid.
pub fn is_rectangular(
    family: &dyn Family,
    n: usize,
    tol: f64,
) -> Result<(bool, DefectGrid), FamilyError> {
    let grid = defect_grid(family, n, family.domain().default_step())?;
    Ok((grid.max_abs_defect < tol, grid))
}

/// Determinant of the map sending nearby parameters to the crossing point of
/// their lines with the plane orthogonal to `L(k)` at distance `t` from the ray origin.
pub fn regularity_determinant(
    family: &dyn Family,
    k: &Param,
    t: f64,
    h: f64,
) -> Result<f64, FamilyError> {
    check_stencil(family, k, h)?;
    let ray = family.ray(k)?;
    let anchor = ray.at(t);
    let normal = ray.dir;
    let (e1, e2) = orthonormal_frame(&normal);
    let crossing = |kk: &Param| -> Result<Option<Vector2<f64>>, FamilyError> {
        let r = family.ray(kk)?;
        let denom = r.dir.dot(&normal);
        if denom.abs() < 1e-12 {
            return Ok(None);
        }
        let s = (anchor - r.origin).dot(&normal) / denom;
        let p = r.at(s) - anchor;
        Ok(Some(Vector2::new(p.dot(&e1), p.dot(&e2))))
    };
    let mut jac = nalgebra::Matrix2::<f64>::zeros();
    for i in 0..2 {
        let mut off = Param::zeros();
        off[i] = h;
        let (Some(plus), Some(minus)) = (crossing(&(k + off))?, crossing(&(k - off))?) else {
            return Ok(0.0);
        };
        jac.set_column(i, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac.determinant())
}

/// Whether the point at distance `t` along the ray `k` is regular.
pub fn is_regular_point(family: &dyn Family, k: &Param, t: f64) -> Result<bool, FamilyError> {
    let h = family.domain().default_step();
    Ok(regularity_determinant(family, k, t, h)?.abs() > REGULAR_DET_MIN)
}

/// The phase one-form `u · dP` along parameter `axis`, by central differences.
fn phase_form(family: &dyn Family, k: &Param, axis: usize, h: f64) -> Result<f64, FamilyError> {
    let mut off = Param::zeros();
    off[axis] = h;
    let plus = family.line(&(k + off))?;
    let minus = family.line(&(k - off))?;
    let u = family.line(k)?.direction();
    Ok(u.dot(&(plus.foot() - minus.foot())) / (2.0 * h))
}

/// Trapezoid rule with interval doubling until successive estimates agree to `PHASE_REFINE_TOL`.
fn integrate_segment(
    g: &impl Fn(f64) -> Result<f64, FamilyError>,
    a: f64,
    b: f64,
) -> Result<f64, FamilyError> {
    if a == b {
        return Ok(0.0);
    }
    let mut m = 1usize;
    let sum_ends = 0.5 * (g(a)? + g(b)?);
    let mut interior = 0.0;
    let mut estimate = sum_ends * (b - a);
    loop {
        let width = (b - a) / (2 * m) as f64;
        let mut added = 0.0;
        for i in 0..m {
            added += g(a + (2 * i + 1) as f64 * width)?;
        }
        interior += added;
        m *= 2;
        let next = (sum_ends + interior) * (b - a) / m as f64;
        let converged = (next - estimate).abs() < PHASE_REFINE_TOL;
        estimate = next;
        if converged && m >= 4 || m >= 1 << 16 {
            return Ok(estimate);
        }
    }
}

/// Integrals of `g` from `start` to every value in `targets`.
fn cumulative_integrals(
    g: &impl Fn(f64) -> Result<f64, FamilyError>,
    start: f64,
    targets: &[f64],
) -> Result<Vec<f64>, FamilyError> {
    let mut points: Vec<f64> = targets.iter().copied().chain([start]).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let s = points.iter().position(|&p| p == start).expect("start is a breakpoint");
    let mut value = vec![0.0; points.len()];
    for i in s + 1..points.len() {
        value[i] = value[i - 1] + integrate_segment(g, points[i - 1], points[i])?;
    }
    for i in (0..s).rev() {
        value[i] = value[i + 1] - integrate_segment(g, points[i], points[i + 1])?;
    }
    Ok(targets
        .iter()
        .map(|t| value[points.iter().position(|p| p == t).expect("target is a breakpoint")])
        .collect())
}

/// Orthogonal surface of a rectangular family, sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Wavefront {
    pub grid: Grid,
    pub k0: Param,
    pub c: f64,
    /// Phase `F(k)` with `F(k0) = 0`, row-major.
    pub phase: Vec<f64>,
    /// Points `Q(k) = P(k) - (F(k) + c) u(k)`.
    pub points: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    /// Largest disagreement between the two integration paths.
    pub path_discrepancy: f64,
    pub step: f64,
}

impl Wavefront {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k1,k2,qx,qy,qz,F\n");
        for ((k, q), f) in self.grid.nodes().iter().zip(&self.points).zip(&self.phase) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt17(k.x),
                fmt17(k.y),
                fmt17(q.x),
                fmt17(q.y),
                fmt17(q.z),
                fmt17(*f)
            ));
        }
        out
    }

    /// Largest `|u · dQ/dk_i| / |dQ/dk_i|` over the grid. `dQ` is formed from
    /// fresh foot points and phase increments integrated over `[k - h, k + h]`.
    pub fn orthogonality_residual(&self, family: &dyn Family) -> Result<f64, FamilyError> {
        let h = self.step;
        let nodes = self.grid.nodes();
        let per_node = par_map(&(0..nodes.len()).collect::<Vec<_>>(), |&idx| {
            let k = nodes[idx];
            let u = self.directions[idx];
            let mut worst = 0.0f64;
            for axis in 0..2 {
                let mut off = Param::zeros();
                off[axis] = h;
                let g = |s: f64| {
                    let mut kk = k;
                    kk[axis] = s;
                    phase_form(family, &kk, axis, h)
                };
                let f_plus = self.phase[idx] + integrate_segment(&g, k[axis], k[axis] + h)?;
                let f_minus = self.phase[idx] - integrate_segment(&g, k[axis] - h, k[axis])?;
                let q_at = |kk: &Param, f: f64| -> Result<Vec3, FamilyError> {
                    let l = family.line(kk)?;
                    Ok(l.foot() - (f + self.c) * l.direction())
                };
                let dq = (q_at(&(k + off), f_plus)? - q_at(&(k - off), f_minus)?) / (2.0 * h);
                let norm = dq.norm();
                if norm > 0.0 {
                    worst = worst.max(u.dot(&dq).abs() / norm);
                }
            }
            Ok::<f64, FamilyError>(worst)
        });
        per_node
            .into_iter()
            .try_fold(0.0f64, |m, r| r.map(|v| m.max(v)))
    }
}

/// Integrates the phase one-form from `k0` along both L-shaped grid paths to
/// every node, certifying closedness, and builds the orthogonal surface.
pub fn reconstruct_wavefront(
    family: &dyn Family,
    k0: &Param,
    c: f64,
    n: usize,
) -> Result<Wavefront, FamilyError> {
    let h = family.domain().default_step();
    let grid = Grid::new(&family.domain(), n, 2.0 * h)?;
    if !family.domain().contains(k0) {
        return Err(FamilyError::DomainBoundary([k0.x, k0.y]));
    }
    let form = |axis: usize, fixed: f64| {
        move |s: f64| {
            let k = if axis == 0 {
                Param::new(s, fixed)
            } else {
                Param::new(fixed, s)
            };
            phase_form(family, &k, axis, h)
        }
    };
    // Path A: along k1 on the row through k0, then along k2.
    let row_a = cumulative_integrals(&form(0, k0.y), k0.x, &grid.k1)?;
    let cols_a = par_map(&grid.k1, |&a| cumulative_integrals(&form(1, a), k0.y, &grid.k2))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    // Path B: along k2 on the column through k0, then along k1.
    let col_b = cumulative_integrals(&form(1, k0.x), k0.y, &grid.k2)?;
    let rows_b = par_map(&grid.k2, |&b| cumulative_integrals(&form(0, b), k0.x, &grid.k1))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let mut phase = vec![0.0; n * n];
    let mut path_discrepancy = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let fa = row_a[i] + cols_a[i][j];
            let fb = col_b[j] + rows_b[j][i];
            path_discrepancy = path_discrepancy.max((fa - fb).abs());
            phase[grid.index(i, j)] = 0.5 * (fa + fb);
        }
    }
    if path_discrepancy > PATH_DISCREPANCY_MAX {
        return Err(FamilyError::NotRectangular {
            discrepancy: path_discrepancy,
        });
    }

    let nodes = grid.nodes();
    let built = par_map(&(0..nodes.len()).collect::<Vec<_>>(), |&idx| {
        let k = nodes[idx];
        let ray = family.ray(&k)?;
        let line = ray.line();
        let q = line.foot() - (phase[idx] + c) * line.direction();
        let t = (q - ray.origin).dot(&ray.dir);
        if regularity_determinant(family, &k, t, h)?.abs() <= REGULAR_DET_MIN {
            return Err(FamilyError::NonRegular([k.x, k.y]));
        }
        Ok((q, line.direction()))
    })
    .into_iter()
    .collect::<Result<Vec<_>, FamilyError>>()?;
    let (points, directions) = built.into_iter().unzip();
    Ok(Wavefront {
        grid,
        k0: *k0,
        c,
        phase,
        points,
        directions,
        path_discrepancy,
        step: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::Interface;
    use approx::assert_abs_diff_eq;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn skew_lines(domain: Domain) -> RayFamily {
        RayFamily::two_skew_lines(
            Vec3::zeros(),
            v(1.0, 0.0, 0.0),
            v(0.0, 0.0, 1.0),
            v(0.0, 1.0, 0.0),
            domain,
        )
    }

    /// Hand differentiation of L(s, t) = line from (s, 0, 0) to (0, t, 1):
    /// with P = (s, 0, 0) and u = (-s, t, 1) / r, r^2 = 1 + s^2 + t^2,
    /// dP/ds = e1, dP/dt = 0, du/dt = (e2 - u u_y) / r, hence defect = s t / r^3.
    fn skew_oracle(s: f64, t: f64) -> f64 {
        s * t / (1.0 + s * s + t * t).powf(1.5)
    }

    #[test]
    fn point_source_defect_vanishes() {
        let f = RayFamily::point_source(v(0.0, 0.0, 0.0), v(0.0, 0.0, -1.0), Domain::square(0.3));
        for k in [Param::new(0.0, 0.0), Param::new(0.1, -0.2), Param::new(-0.25, 0.1)] {
            assert!(defect(&f, &k, 1e-5).unwrap().abs() < 1e-8);
        }
        let f = RayFamily::point_source(v(1.0, -2.0, 3.0), v(0.2, 0.1, -1.0), Domain::square(0.3));
        assert!(defect(&f, &Param::new(0.1, 0.05), 1e-5).unwrap().abs() < 1e-8);
    }

    #[test]
    fn collimated_defect_vanishes() {
        let f = RayFamily::collimated(v(0.3, -0.2, -1.0), v(1.0, 2.0, 5.0), Domain::square(1.0));
        assert!(defect(&f, &Param::new(0.2, -0.4), 1e-5).unwrap().abs() < 1e-10);
    }

    #[test]
    fn skew_lines_match_hand_oracle() {
        let f = skew_lines(Domain::new((-2.0, 2.0), (-2.0, 2.0)).unwrap());
        for (s, t) in [(1.0, 1.0), (0.5, -0.3), (0.0, 0.0), (-1.2, 0.7)] {
            let k = Param::new(s, t);
            for h in [1e-3, 1e-4, 1e-5] {
                let d = defect(&f, &k, h).unwrap();
                assert_abs_diff_eq!(d, skew_oracle(s, t), epsilon = 1e-6);
            }
        }
        // Off the axes the family is far from rectangular.
        assert!(defect(&f, &Param::new(1.0, 1.0), 1e-5).unwrap().abs() > 0.1);
    }

    #[test]
    fn defect_is_antisymmetric_in_parameters() {
        struct Swapped<'a>(&'a RayFamily);
        impl Family for Swapped<'_> {
            fn ray(&self, k: &Param) -> Result<Ray, FamilyError> {
                self.0.ray(&Param::new(k.y, k.x))
            }
            fn domain(&self) -> Domain {
                let d = self.0.domain();
                Domain { k1: d.k2, k2: d.k1 }
            }
        }
        let f = skew_lines(Domain::new((0.0, 2.0), (0.0, 2.0)).unwrap());
        let k = Param::new(0.7, 1.3);
        let a = defect(&f, &k, 1e-5).unwrap();
        let b = defect(&Swapped(&f), &Param::new(k.y, k.x), 1e-5).unwrap();
        assert_abs_diff_eq!(a, -b, epsilon = 1e-10);
    }

    #[test]
    fn domain_boundary_reported() {
        let f = RayFamily::collimated(v(0.0, 0.0, -1.0), Vec3::zeros(), Domain::square(1.0));
        assert_eq!(
            defect(&f, &Param::new(1.0, 0.0), 1e-3),
            Err(FamilyError::DomainBoundary([1.0, 0.0]))
        );
    }

    #[test]
    fn rectangularity_verdicts() {
        let ps = RayFamily::point_source(v(0.0, 0.0, 2.0), v(0.0, 0.0, -1.0), Domain::square(0.3));
        let (ok, grid) = is_rectangular(&ps, 5, 1e-6).unwrap();
        assert!(ok, "{}", grid.max_abs_defect);

        let skew = skew_lines(Domain::new((0.0, 2.0), (0.0, 2.0)).unwrap());
        let (ok, grid) = is_rectangular(&skew, 5, 1e-6).unwrap();
        assert!(!ok);
        assert!(grid.max_abs_defect > 0.1);

        let sphere = ImplicitSurface::sphere(v(0.0, 0.0, 0.0), 2.0).unwrap();
        let nc = RayFamily::normal_congruence(&sphere, &v(0.3, 0.2, 2.0), Domain::square(0.4)).unwrap();
        let (ok, grid) = is_rectangular(&nc, 5, 1e-6).unwrap();
        assert!(ok, "{}", grid.max_abs_defect);
    }

    #[test]
    fn immersion_failure_detected() {
        // Every parameter maps to the same line.
        struct Constant;
        impl Family for Constant {
            fn ray(&self, _k: &Param) -> Result<Ray, FamilyError> {
                Ok(Ray::new(Vec3::zeros(), v(0.0, 0.0, 1.0))?)
            }
            fn domain(&self) -> Domain {
                Domain::square(1.0)
            }
        }
        assert!(matches!(
            is_rectangular(&Constant, 3, 1e-6),
            Err(FamilyError::ImmersionFailure { .. })
        ));
    }

    #[test]
    fn regular_points() {
        let ps = RayFamily::point_source(v(1.0, 0.0, 3.0), v(0.0, 0.0, -1.0), Domain::square(0.3));
        let k = Param::new(0.1, -0.05);
        assert!(is_regular_point(&ps, &k, 1.5).unwrap());
        assert!(!is_regular_point(&ps, &k, 0.0).unwrap());

        let col = RayFamily::collimated(v(0.0, 0.0, -1.0), Vec3::zeros(), Domain::square(1.0));
        for t in [-3.0, 0.0, 7.0] {
            assert!(is_regular_point(&col, &Param::new(0.2, 0.3), t).unwrap());
        }

        // Collimated rays through an ideal focusing element: all lines through (0, 0, -2).
        struct Focused;
        impl Family for Focused {
            fn ray(&self, k: &Param) -> Result<Ray, FamilyError> {
                let start = v(k.x, k.y, 0.0);
                Ok(Ray::new(start, v(0.0, 0.0, -2.0) - start)?)
            }
            fn domain(&self) -> Domain {
                Domain::square(0.5)
            }
        }
        let k = Param::new(0.1, 0.2);
        let t_focus = (v(0.0, 0.0, -2.0) - v(0.1, 0.2, 0.0)).norm();
        assert!(!is_regular_point(&Focused, &k, t_focus).unwrap());
        assert!(is_regular_point(&Focused, &k, 0.5 * t_focus).unwrap());
    }

    #[test]
    fn point_source_wavefront_is_unit_sphere() {
        let f = RayFamily::point_source(Vec3::zeros(), v(0.1, 0.0, -1.0), Domain::square(0.3));
        let k0 = f.domain.center();
        // Foot points are all at the apex, so F = 0 and F + c = 1 puts Q on the unit sphere.
        let wf = reconstruct_wavefront(&f, &k0, 1.0, 7).unwrap();
        for q in &wf.points {
            assert_abs_diff_eq!(q.norm(), 1.0, epsilon = 1e-7);
        }
        assert!(wf.orthogonality_residual(&f).unwrap() < 1e-6);
    }

    #[test]
    fn collimated_wavefront_is_plane() {
        let f = RayFamily::collimated(v(0.0, 0.0, 1.0), v(0.2, 0.0, -1.0), Domain::square(1.0));
        let wf = reconstruct_wavefront(&f, &Param::new(0.1, 0.1), 0.0, 7).unwrap();
        let z0 = wf.points[0].z;
        for q in &wf.points {
            assert_abs_diff_eq!(q.z, z0, epsilon = 1e-9);
        }
    }

    #[test]
    fn skew_lines_have_no_wavefront() {
        let f = skew_lines(Domain::new((0.0, 2.0), (0.0, 2.0)).unwrap());
        assert!(matches!(
            reconstruct_wavefront(&f, &f.domain.center(), 0.0, 5),
            Err(FamilyError::NotRectangular { .. })
        ));
    }

    #[test]
    fn apex_wavefront_is_not_regular() {
        let f = RayFamily::point_source(Vec3::zeros(), v(0.0, 0.0, -1.0), Domain::square(0.3));
        assert!(matches!(
            reconstruct_wavefront(&f, &f.domain.center(), 0.0, 5),
            Err(FamilyError::NonRegular(_))
        ));
    }

    #[test]
    fn phase_changes_by_constant_with_base_point() {
        let f = RayFamily::point_source(v(0.5, -0.3, 4.0), v(0.0, 0.1, -1.0), Domain::square(0.3));
        let a = reconstruct_wavefront(&f, &Param::new(0.0, 0.0), 0.0, 7).unwrap();
        let b = reconstruct_wavefront(&f, &Param::new(0.1, -0.2), 0.0, 7).unwrap();
        let diffs: Vec<f64> = a.phase.iter().zip(&b.phase).map(|(x, y)| x - y).collect();
        let lo = diffs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 1e-7, "spread {}", hi - lo);
    }

    #[test]
    fn identity_transform_keeps_lines() {
        let f = RayFamily::point_source(v(0.0, 0.0, 3.0), v(0.0, 0.0, -1.0), Domain::square(0.2));
        let t = transform_family(&f, &OpticalSystem::empty(1.0));
        let k = Param::new(0.05, -0.1);
        assert_eq!(t.line(&k).unwrap(), f.line(&k).unwrap());
    }

    #[test]
    fn plane_mirror_keeps_point_source_rectangular() {
        let f = RayFamily::point_source(v(0.0, 0.0, 3.0), v(0.1, 0.0, -1.0), Domain::square(0.2));
        let mirror = ImplicitSurface::plane(v(0.1, 0.05, 1.0), 0.0).unwrap();
        let sys = OpticalSystem::new(1.0, vec![Interface::reflect(mirror, 1.0)]).unwrap();
        let t = transform_family(&f, &sys);
        let (ok, grid) = is_rectangular(&t, 7, 1e-6).unwrap();
        assert!(ok, "{}", grid.max_abs_defect);
    }

    #[test]
    fn trace_errors_carry_parameters() {
        let f = RayFamily::point_source(v(0.0, 0.0, 3.0), v(0.0, 0.0, 1.0), Domain::square(0.2));
        let mirror = ImplicitSurface::plane(v(0.0, 0.0, 1.0), 0.0).unwrap();
        let sys = OpticalSystem::new(1.0, vec![Interface::reflect(mirror, 1.0)]).unwrap();
        let t = transform_family(&f, &sys);
        assert!(matches!(
            t.ray(&Param::new(0.0, 0.0)),
            Err(FamilyError::Trace { k: [0.0, 0.0], .. })
        ));
    }

    #[test]
    fn csv_layout() {
        let f = RayFamily::collimated(v(0.0, 0.0, 1.0), Vec3::zeros(), Domain::square(1.0));
        let g = defect_grid(&f, 3, 1e-5).unwrap();
        let csv = g.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "k1,k2,value");
        assert_eq!(lines.len(), 10);
        // k1 outer, k2 inner.
        let row = |i: usize| -> Vec<f64> { lines[i].split(',').map(|x| x.parse().unwrap()).collect() };
        assert_eq!(row(1)[0], row(2)[0]);
        assert!(row(2)[1] > row(1)[1]);
        assert_eq!(fmt17(0.1), "1.0000000000000001e-1");
    }
}
