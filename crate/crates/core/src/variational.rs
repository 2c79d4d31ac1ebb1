//! The characteristic function as a stationary optical length, and
//! focusing mirrors built as level sets of `F_eps(X) = s(X) + eps |X M2|`.

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector2};
use thiserror::Error;

use crate::families::{
    fmt17, reconstruct_wavefront, Domain, Family, FamilyError, Grid, Param, Wavefront,
};
use crate::line_space::{Ray, Vec3};
use crate::optics::{reflect_direction, refract_direction, Action, OpticalSystem, OpticsError};
use crate::par_map;
use crate::surfaces::{
    orthonormal_frame, project_onto, safeguarded_newton, LocalPatch, SurfaceError,
};

/// Newton on the optical length stops once the gradient norm drops below this.
pub const STATIONARY_TOL: f64 = 1e-10;
pub const MAX_NEWTON_ITERATIONS: usize = 100;
/// Step of the central differences in [`stationarity_residual`].
pub const RESIDUAL_STEP: f64 = 1e-6;
/// Hit points must lie on their surface within this distance.
pub const ON_SURFACE_TOL: f64 = 1e-9;
/// Consecutive path vertices closer than this are degenerate.
pub const MIN_SEGMENT: f64 = 1e-9;
/// A mirror root with `|g'|` below this is not isolated.
pub const ROOT_SLOPE_MIN: f64 = 1e-6;
/// Largest accepted condition number of the local quadratic fit.
pub const FIT_CONDITION_MAX: f64 = 1e10;

const HESSIAN_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VariationalError {
    #[error("Newton iteration did not converge after {iterations} steps (|grad| = {gradient:e})")]
    NoConvergence { iterations: usize, gradient: f64 },
    #[error("endpoint M{index} lies on interface {interface}")]
    EndpointOnSurface { index: usize, interface: usize },
    #[error("path vertices {index} and {} coincide", index + 1)]
    DegenerateSegment { index: usize },
    #[error("hit point {index} is {distance:e} off its surface")]
    OffSurface { index: usize, distance: f64 },
    #[error("expected {expected} initial points, got {found}")]
    WrongPointCount { expected: usize, found: usize },
    #[error("level set misses the ray k = ({}, {})", .0[0], .0[1])]
    NoRoot([f64; 2]),
    #[error("local quadratic fit is ill-conditioned at k = ({}, {})", .0[0], .0[1])]
    IllConditionedFit([f64; 2]),
    #[error("family is not rectangular: path integrals disagree by {discrepancy:e}")]
    NotRectangular { discrepancy: f64 },
    #[error("focus coincides with the seed point")]
    FocusAtSeed,
    #[error("interface {index}: {source}")]
    Surface {
        index: usize,
        #[source]
        source: SurfaceError,
    },
    #[error(transparent)]
    Family(FamilyError),
    #[error(transparent)]
    Optics(#[from] OpticsError),
}

impl From<FamilyError> for VariationalError {
    fn from(e: FamilyError) -> Self {
        match e {
            FamilyError::NotRectangular { discrepancy } => Self::NotRectangular { discrepancy },
            other => Self::Family(other),
        }
    }
}

/// A broken path `M1 -> X_1 -> ... -> X_m -> M2` with one vertex on each
/// interface, located by local surface coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PathConfiguration {
    pub m1: Vec3,
    pub m2: Vec3,
    pub coords: Vec<Vector2<f64>>,
    patches: Vec<LocalPatch>,
    system: OpticalSystem,
}

impl PathConfiguration {
    /// Vertices start at the projections of `anchors` onto the interfaces,
    /// which also anchor the local coordinates.
    pub fn new(
        m1: Vec3,
        m2: Vec3,
        system: &OpticalSystem,
        anchors: &[Vec3],
    ) -> Result<Self, VariationalError> {
        let count = system.interfaces().len();
        if anchors.len() != count {
            return Err(VariationalError::WrongPointCount {
                expected: count,
                found: anchors.len(),
            });
        }
        let patches = system
            .interfaces()
            .iter()
            .zip(anchors)
            .enumerate()
            .map(|(index, (it, a))| {
                LocalPatch::new(&it.surface, a)
                    .map_err(|source| VariationalError::Surface { index, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            m1,
            m2,
            coords: vec![Vector2::zeros(); count],
            patches,
            system: system.clone(),
        })
    }

    /// Default starting guess: the point at fraction `(i + 1) / (m + 1)` of
    /// the chord `M1 M2`, projected onto interface `i`.
    pub fn chord(m1: Vec3, m2: Vec3, system: &OpticalSystem) -> Result<Self, VariationalError> {
        let m = system.interfaces().len();
        let anchors: Vec<Vec3> = (0..m)
            .map(|i| m1 + (m2 - m1) * ((i + 1) as f64 / (m + 1) as f64))
            .collect();
        Self::new(m1, m2, system, &anchors)
    }

    pub fn system(&self) -> &OpticalSystem {
        &self.system
    }

    pub fn patches(&self) -> &[LocalPatch] {
        &self.patches
    }

    pub fn with_coords(&self, coords: Vec<Vector2<f64>>) -> Self {
        Self {
            coords,
            ..self.clone()
        }
    }

    /// Interface vertices `X_1 .. X_m`.
    pub fn hit_points(&self) -> Result<Vec<Vec3>, VariationalError> {
        self.patches
            .iter()
            .zip(&self.coords)
            .enumerate()
            .map(|(index, (p, c))| {
                p.point(c)
                    .map_err(|source| VariationalError::Surface { index, source })
            })
            .collect()
    }

    /// All vertices, endpoints included.
    pub fn vertices(&self) -> Result<Vec<Vec3>, VariationalError> {
        let mut v = vec![self.m1];
        v.extend(self.hit_points()?);
        v.push(self.m2);
        Ok(v)
    }

    /// Checks that hits lie on their surfaces and vertices are distinct.
    pub fn validate(&self) -> Result<(), VariationalError> {
        let v = self.vertices()?;
        for (i, (x, it)) in v[1..].iter().zip(self.system.interfaces()).enumerate() {
            let distance = it.surface.distance_estimate(x);
            if distance > ON_SURFACE_TOL * it.surface.length_scale() {
                return Err(VariationalError::OffSurface { index: i, distance });
            }
        }
        for (index, w) in v.windows(2).enumerate() {
            if (w[1] - w[0]).norm() <= MIN_SEGMENT {
                return Err(VariationalError::DegenerateSegment { index });
            }
        }
        Ok(())
    }

    fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.coords.len(),
            self.coords.iter().flat_map(|c| [c.x, c.y]),
        )
    }

    fn with_stacked(&self, x: &DVector<f64>) -> Self {
        self.with_coords(
            (0..self.coords.len())
                .map(|j| Vector2::new(x[2 * j], x[2 * j + 1]))
                .collect(),
        )
    }
}

/// Sum of index times length over the segments of the path.
pub fn optical_length(pc: &PathConfiguration) -> Result<f64, VariationalError> {
    let v = pc.vertices()?;
    Ok(v
        .windows(2)
        .zip(pc.system.segment_indices())
        .map(|(w, n)| n * (w[1] - w[0]).norm())
        .sum())
}

/// Gradient of the optical length in the stacked surface coordinates:
/// `(n_j e_j - n_{j+1} e_{j+1}) · dX_j` with `e_j` the unit direction of segment `j`.
pub fn length_gradient(pc: &PathConfiguration) -> Result<DVector<f64>, VariationalError> {
    let v = pc.vertices()?;
    let n = pc.system.segment_indices();
    let dirs: Vec<Vec3> = v
        .windows(2)
        .enumerate()
        .map(|(index, w)| {
            let d = w[1] - w[0];
            let len = d.norm();
            if len <= MIN_SEGMENT {
                Err(VariationalError::DegenerateSegment { index })
            } else {
                Ok(d / len)
            }
        })
        .collect::<Result<_, _>>()?;
    let mut g = DVector::zeros(2 * pc.coords.len());
    for (j, (patch, c)) in pc.patches.iter().zip(&pc.coords).enumerate() {
        let tangents = patch
            .tangents(c)
            .map_err(|source| VariationalError::Surface { index: j, source })?;
        let pull = n[j] * dirs[j] - n[j + 1] * dirs[j + 1];
        g[2 * j] = pull.dot(&tangents[0]);
        g[2 * j + 1] = pull.dot(&tangents[1]);
    }
    Ok(g)
}

/// Max-norm of the central-difference gradient of the optical length.
pub fn stationarity_residual(pc: &PathConfiguration) -> Result<f64, VariationalError> {
    let x = pc.stacked();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus[i] += RESIDUAL_STEP;
        let mut minus = x.clone();
        minus[i] -= RESIDUAL_STEP;
        let d = (optical_length(&pc.with_stacked(&plus))?
            - optical_length(&pc.with_stacked(&minus))?)
            / (2.0 * RESIDUAL_STEP);
        worst = worst.max(d.abs());
    }
    Ok(worst)
}

/// For each interface, `|u_out - law(u_in)|` where `law` is the reflection or
/// refraction at the vertex with the normal facing the incoming segment.
/// A vertex where the law has no solution (grazing, total internal
/// reflection) scores infinity.
pub fn local_law_residuals(pc: &PathConfiguration) -> Result<Vec<f64>, VariationalError> {
    let v = pc.vertices()?;
    let mut out = Vec::with_capacity(pc.patches.len());
    for (j, it) in pc.system.interfaces().iter().enumerate() {
        let u_in = (v[j + 1] - v[j]).normalize();
        let u_out = (v[j + 2] - v[j + 1]).normalize();
        let g = it.surface.gradient(&v[j + 1]);
        let mut n = g.normalize();
        if u_in.dot(&n) > 0.0 {
            n = -n;
        }
        let expected = match it.action {
            Action::Reflect => reflect_direction(&u_in, &n),
            Action::Refract => refract_direction(&u_in, &n, it.n_in, it.n_out),
        };
        out.push(expected.map_or(f64::INFINITY, |e| (e - u_out).norm()));
    }
    Ok(out)
}

/// A stationary path between two points and its optical length.
#[derive(Debug, Clone, PartialEq)]
pub struct Characteristic {
    pub value: f64,
    pub config: PathConfiguration,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl Characteristic {
    pub fn report(&self) -> Result<String, VariationalError> {
        let mut out = String::new();
        out.push_str(&format!("V: {}\n", fmt17(self.value)));
        out.push_str(&format!(
            "stationarity_residual: {}\n",
            fmt17(stationarity_residual(&self.config)?)
        ));
        out.push_str(&format!("gradient_norm: {}\n", fmt17(self.gradient_norm)));
        out.push_str(&format!("iterations: {}\n", self.iterations));
        out.push_str(&format!("newton_tolerance: {}\n", fmt17(STATIONARY_TOL)));
        out.push_str(&format!("residual_step: {}\n", fmt17(RESIDUAL_STEP)));
        for (i, r) in local_law_residuals(&self.config)?.iter().enumerate() {
            out.push_str(&format!("law_residual_{i}: {}\n", fmt17(*r)));
        }
        for (i, p) in self.config.hit_points()?.iter().enumerate() {
            out.push_str(&format!(
                "hit_{i}: {} {} {}\n",
                fmt17(p.x),
                fmt17(p.y),
                fmt17(p.z)
            ));
        }
        Ok(out)
    }
}

/// Makes the optical length from `m1` to `m2` through `system` stationary by
/// damped Newton in surface coordinates, starting from `initial` or the chord guess.
/// Any stationary point is accepted, minimum or not.
pub fn characteristic_function(
    m1: Vec3,
    m2: Vec3,
    system: &OpticalSystem,
    initial: Option<PathConfiguration>,
) -> Result<Characteristic, VariationalError> {
    for (interface, it) in system.interfaces().iter().enumerate() {
        for (index, m) in [(1, m1), (2, m2)] {
            if it.surface.distance_estimate(&m) <= ON_SURFACE_TOL * it.surface.length_scale() {
                return Err(VariationalError::EndpointOnSurface { index, interface });
            }
        }
    }
    let pc = match initial {
        Some(pc) => pc,
        None => PathConfiguration::chord(m1, m2, system)?,
    };
    pc.validate()?;
    if pc.coords.is_empty() {
        return Ok(Characteristic {
            value: optical_length(&pc)?,
            config: pc,
            iterations: 0,
            gradient_norm: 0.0,
        });
    }

    let mut x = pc.stacked();
    let gradient_at = |x: &DVector<f64>| length_gradient(&pc.with_stacked(x));
    let mut g = gradient_at(&x)?;
    let dim = x.len();
    for iteration in 0..MAX_NEWTON_ITERATIONS {
        if g.norm() < STATIONARY_TOL {
            let config = pc.with_stacked(&x);
            config.validate()?;
            return Ok(Characteristic {
                value: optical_length(&config)?,
                config,
                iterations: iteration,
                gradient_norm: g.norm(),
            });
        }
        let mut hess = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            let mut plus = x.clone();
            plus[i] += HESSIAN_STEP;
            let mut minus = x.clone();
            minus[i] -= HESSIAN_STEP;
            let col = (gradient_at(&plus)? - gradient_at(&minus)?) / (2.0 * HESSIAN_STEP);
            hess.set_column(i, &col);
        }
        let hess = 0.5 * (&hess + hess.transpose());
        let cutoff = 1e-14 * hess.amax().max(1e-300);
        let step = hess
            .svd(true, true)
            .solve(&(-&g), cutoff)
            .map_err(|_| VariationalError::NoConvergence {
                iterations: iteration,
                gradient: g.norm(),
            })?;
        // Backtrack on |grad|^2, for which the Newton step is a descent direction.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &x + alpha * &step;
            if let Ok(gt) = gradient_at(&trial) {
                if gt.norm() < g.norm() {
                    accepted = Some((trial, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((next_x, next_g)) = accepted else {
            return Err(VariationalError::NoConvergence {
                iterations: iteration,
                gradient: g.norm(),
            });
        };
        x = next_x;
        g = next_g;
    }
    if g.norm() < STATIONARY_TOL {
        let config = pc.with_stacked(&x);
        config.validate()?;
        return Ok(Characteristic {
            value: optical_length(&config)?,
            config,
            iterations: MAX_NEWTON_ITERATIONS,
            gradient_norm: g.norm(),
        });
    }
    Err(VariationalError::NoConvergence {
        iterations: MAX_NEWTON_ITERATIONS,
        gradient: g.norm(),
    })
}

/// Sign in front of `|X M2|`: `Plus` focuses reflected rays onto `M2`,
/// `Minus` makes them diverge from it (virtual focus).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Epsilon {
    Plus,
    Minus,
}

impl Epsilon {
    pub fn value(self) -> f64 {
        match self {
            Epsilon::Plus => 1.0,
            Epsilon::Minus => -1.0,
        }
    }
}

/// Mirror sampled as the level set `F_eps = level` along every ray of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorDesign {
    pub k0: Param,
    pub focus: Vec3,
    pub epsilon: Epsilon,
    pub level: f64,
    /// Reference wavefront through the foot point of `L(k0)`.
    pub wavefront: Wavefront,
    /// Signed ray parameter of each mirror point, measured from the wavefront.
    pub params: Vec<f64>,
    /// Row-major like the wavefront grid.
    pub points: Vec<Vec3>,
}

impl MirrorDesign {
    pub fn grid(&self) -> &Grid {
        &self.wavefront.grid
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k1,k2,x,y,z\n");
        for (k, p) in self.grid().nodes().iter().zip(&self.points) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt17(k.x),
                fmt17(k.y),
                fmt17(p.x),
                fmt17(p.y),
                fmt17(p.z)
            ));
        }
        out
    }

    /// Largest `|F_eps(X(k)) - level|` over the samples.
    pub fn level_residual(&self) -> f64 {
        let e = self.epsilon.value();
        self.params
            .iter()
            .zip(&self.points)
            .map(|(s, x)| (s + e * (x - self.focus).norm() - self.level).abs())
            .fold(0.0, f64::max)
    }
}

/// Level through the point at signed distance `seed` along `L(k0)` from its
/// foot point, which is where the reference wavefront crosses that ray.
pub fn seed_level(
    family: &dyn Family,
    k0: &Param,
    seed: f64,
    focus: &Vec3,
    epsilon: Epsilon,
) -> Result<f64, VariationalError> {
    let line = family.line(k0)?;
    let x0 = line.point_at(seed);
    if (x0 - focus).norm() <= MIN_SEGMENT {
        return Err(VariationalError::FocusAtSeed);
    }
    Ok(seed + epsilon.value() * (x0 - focus).norm())
}

/// Solves `s + eps |q + s u - focus| = level` for `s`. The left side is
/// non-decreasing in `s`, so a bracket is grown outward from `s = 0`.
fn level_root(q: &Vec3, u: &Vec3, focus: &Vec3, eps: f64, level: f64) -> Option<f64> {
    let g = |s: f64| s + eps * (q + s * u - focus).norm() - level;
    let dg = |s: f64| {
        let d = q + s * u - focus;
        let n = d.norm();
        if n == 0.0 {
            1.0
        } else {
            1.0 + eps * u.dot(&d) / n
        }
    };
    let mut width = level.abs().max((q - focus).norm()).max(1.0);
    let (lo, hi) = if g(0.0) < 0.0 {
        let mut hi = width;
        for _ in 0..60 {
            if g(hi) > 0.0 {
                break;
            }
            width *= 2.0;
            hi = width;
        }
        (0.0, hi)
    } else {
        let mut lo = -width;
        for _ in 0..60 {
            if g(lo) < 0.0 {
                break;
            }
            width *= 2.0;
            lo = -width;
        }
        (lo, 0.0)
    };
    if !(g(lo) <= 0.0 && g(hi) >= 0.0) {
        return None;
    }
    let s = safeguarded_newton(&g, &dg, lo, hi);
    (dg(s).abs() >= ROOT_SLOPE_MIN).then_some(s)
}

/// Builds the mirror `{X : F_eps(X) = level}` on an `n x n` grid, where
/// `F_eps(X)` is the signed distance along the ray from the reference
/// wavefront through `L(k0)` plus `eps |X focus|`.
pub fn design_focusing_mirror(
    family: &dyn Family,
    k0: &Param,
    focus: Vec3,
    epsilon: Epsilon,
    level: f64,
    n: usize,
) -> Result<MirrorDesign, VariationalError> {
    let wavefront = reconstruct_wavefront(family, k0, 0.0, n)?;
    let nodes = wavefront.grid.nodes();
    let idx: Vec<usize> = (0..nodes.len()).collect();
    let e = epsilon.value();
    let solved = par_map(&idx, |&i| {
        let (q, u) = (wavefront.points[i], wavefront.directions[i]);
        level_root(&q, &u, &focus, e, level)
            .map(|s| (s, q + s * u))
            .ok_or(VariationalError::NoRoot([nodes[i].x, nodes[i].y]))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let (params, points) = solved.into_iter().unzip();
    Ok(MirrorDesign {
        k0: *k0,
        focus,
        epsilon,
        level,
        wavefront,
        params,
        points,
    })
}

/// Outcome of [`verify_focus`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocusCheck {
    pub focused: bool,
    /// Largest distance from the focus to a reflected line.
    pub max_miss: f64,
    pub tolerance: f64,
    /// Number of grid nodes with a centred 3x3 stencil, the ones checked.
    pub checked: usize,
}

/// Reflects every ray off a local quadratic fit of the sampled mirror and
/// measures how far the reflected line passes from the focus. Only nodes
/// with a full centred 3x3 stencil are checked.
pub fn verify_focus(md: &MirrorDesign, tol: f64) -> Result<FocusCheck, VariationalError> {
    let grid = md.grid();
    let n = grid.n;
    let interior: Vec<(usize, usize)> = (1..n - 1)
        .flat_map(|i| (1..n - 1).map(move |j| (i, j)))
        .collect();
    let misses = par_map(&interior, |&(i, j)| {
        let k = Param::new(grid.k1[i], grid.k2[j]);
        let at = |a: usize, b: usize| md.points[grid.index(a, b)];
        let centre = at(i, j);
        let u = md.wavefront.directions[grid.index(i, j)];
        let t1 = at(i + 1, j) - at(i - 1, j);
        let t2 = at(i, j + 1) - at(i, j - 1);
        let normal = t1.cross(&t2);
        if !(normal.norm() > 0.0) {
            return Err(VariationalError::IllConditionedFit([k.x, k.y]));
        }
        let normal = normal.normalize();
        let (e1, e2) = orthonormal_frame(&normal);
        let scale = 0.5 * t1.norm().max(t2.norm());
        let mut a = SMatrix::<f64, 9, 6>::zeros();
        let mut zeta = SVector::<f64, 9>::zeros();
        let mut row = 0;
        for di in [-1i32, 0, 1] {
            for dj in [-1i32, 0, 1] {
                let p = at((i as i32 + di) as usize, (j as i32 + dj) as usize) - centre;
                let (x, y) = (p.dot(&e1) / scale, p.dot(&e2) / scale);
                a.set_row(row, &SMatrix::<f64, 1, 6>::from_row_slice(&[1.0, x, y, x * x, x * y, y * y]));
                zeta[row] = p.dot(&normal);
                row += 1;
            }
        }
        let svd = a.svd(true, true);
        let (smin, smax) = (svd.singular_values.min(), svd.singular_values.max());
        if !(smin > 0.0 && smax / smin < FIT_CONDITION_MAX) {
            return Err(VariationalError::IllConditionedFit([k.x, k.y]));
        }
        let c = svd
            .solve(&zeta, 0.0)
            .map_err(|_| VariationalError::IllConditionedFit([k.x, k.y]))?;
        // Height of the fit and its slopes in unscaled local coordinates.
        let fit = |x: f64, y: f64| {
            let (xs, ys) = (x / scale, y / scale);
            let h = c[0] + c[1] * xs + c[2] * ys + c[3] * xs * xs + c[4] * xs * ys + c[5] * ys * ys;
            let hx = (c[1] + 2.0 * c[3] * xs + c[4] * ys) / scale;
            let hy = (c[2] + c[4] * xs + 2.0 * c[5] * ys) / scale;
            (h, hx, hy)
        };
        let (ux, uy, uz) = (u.dot(&e1), u.dot(&e2), u.dot(&normal));
        let mut t = 0.0;
        for _ in 0..20 {
            let (h, hx, hy) = fit(t * ux, t * uy);
            let r = t * uz - h;
            let dr = uz - hx * ux - hy * uy;
            if dr == 0.0 {
                break;
            }
            let dt = r / dr;
            t -= dt;
            if dt.abs() <= 1e-16 * scale {
                break;
            }
        }
        let (_, hx, hy) = fit(t * ux, t * uy);
        let hit = centre + t * u;
        let m = (normal - hx * e1 - hy * e2).normalize();
        let reflected = u - 2.0 * u.dot(&m) * m;
        let w = md.focus - hit;
        Ok((w - w.dot(&reflected) * reflected).norm())
    })
    .into_iter()
    .collect::<Result<Vec<f64>, _>>()?;
    let max_miss = misses.iter().copied().fold(0.0, f64::max);
    Ok(FocusCheck {
        focused: max_miss < tol,
        max_miss,
        tolerance: tol,
        checked: misses.len(),
    })
}

/// The lines from the designed mirror points to the focus, as a family
/// defined on the whole domain. The phase off the grid is integrated from
/// `k0` along the path that first moves `k1`.
pub struct FocusedFamily<'a> {
    pub design: &'a MirrorDesign,
    pub family: &'a dyn Family,
}

impl FocusedFamily<'_> {
    /// Mirror point on `L(k)` for any `k` in the domain.
    pub fn mirror_point(&self, k: &Param) -> Result<Vec3, VariationalError> {
        let h = self.design.wavefront.step;
        let k0 = self.design.k0;
        let phase_rate = |kk: &Param, axis: usize| -> Result<f64, FamilyError> {
            let mut off = Param::zeros();
            off[axis] = h;
            let plus = self.family.line(&(kk + off))?;
            let minus = self.family.line(&(kk - off))?;
            let u = self.family.line(kk)?.direction();
            Ok(u.dot(&(plus.foot() - minus.foot())) / (2.0 * h))
        };
        let f1 = gauss_legendre(|s| phase_rate(&Param::new(s, k0.y), 0), k0.x, k.x)?;
        let f2 = gauss_legendre(|s| phase_rate(&Param::new(k.x, s), 1), k0.y, k.y)?;
        let line = self.family.line(k)?;
        let u = line.direction();
        let q = line.foot() - (f1 + f2) * u;
        level_root(
            &q,
            &u,
            &self.design.focus,
            self.design.epsilon.value(),
            self.design.level,
        )
        .map(|s| q + s * u)
        .ok_or(VariationalError::NoRoot([k.x, k.y]))
    }
}

impl Family for FocusedFamily<'_> {
    fn ray(&self, k: &Param) -> Result<Ray, FamilyError> {
        let x = self.mirror_point(k).map_err(|e| match e {
            VariationalError::Family(f) => f,
            other => FamilyError::BadDomain(other.to_string()),
        })?;
        Ok(Ray::new(x, self.design.focus - x)?)
    }

    fn domain(&self) -> Domain {
        self.family.domain()
    }
}

/// Composite 8-point Gauss-Legendre quadrature on 16 panels.
fn gauss_legendre(
    f: impl Fn(f64) -> Result<f64, FamilyError>,
    a: f64,
    b: f64,
) -> Result<f64, FamilyError> {
    const X: [f64; 4] = [
        0.183_434_642_495_649_8,
        0.525_532_409_916_329,
        0.796_666_477_413_626_7,
        0.960_289_856_497_536_3,
    ];
    const W: [f64; 4] = [
        0.362_683_783_378_362,
        0.313_706_645_877_887_3,
        0.222_381_034_453_374_5,
        0.101_228_536_290_376_3,
    ];
    if a == b {
        return Ok(0.0);
    }
    let panels = 16;
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * width;
        let half = 0.5 * width;
        for (x, w) in X.iter().zip(&W) {
            total += w * half * (f(mid - x * half)? + f(mid + x * half)?);
        }
    }
    Ok(total)
}

/// Moves each hit of a traced path to a new patch anchor, for building a
/// configuration from an actual ray trace.
pub fn configuration_from_points(
    m1: Vec3,
    m2: Vec3,
    system: &OpticalSystem,
    points: &[Vec3],
) -> Result<PathConfiguration, VariationalError> {
    let projected = system
        .interfaces()
        .iter()
        .zip(points)
        .enumerate()
        .map(|(index, (it, p))| {
            project_onto(&it.surface, p).map_err(|source| VariationalError::Surface { index, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    PathConfiguration::new(m1, m2, system, &projected)
}
