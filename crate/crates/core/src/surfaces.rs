//! Smooth mirrors and refracting interfaces as implicit level sets `f(X) = 0`.

use nalgebra::{Matrix3, Vector2};
use thiserror::Error;

use crate::line_space::{Ray, Vec3};

/// Rays meeting a surface with `|u · n|` below this are rejected as grazing.
pub const TRANSVERSE_MIN: f64 = 1e-6;

/// Default search horizon along a ray, in length units.
pub const DEFAULT_HORIZON: f64 = 1e6;

const GRADIENT_MIN: f64 = 1e-10;
const OFF_SURFACE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SurfaceError {
    #[error("no intersection beyond t = {t_min}")]
    NoIntersection { t_min: f64 },
    #[error("ray meets the surface tangentially (|u.n| = {cos:e})")]
    Tangential { cos: f64 },
    #[error("surface gradient vanishes at {0:?}")]
    DegenerateGradient([f64; 3]),
    #[error("point {point:?} is off the surface (distance ~ {distance:e})")]
    OffSurface { point: [f64; 3], distance: f64 },
    #[error("surface is not a graph over the chosen coordinates near {0:?}")]
    NotAGraph([f64; 3]),
    #[error("invalid surface: {0}")]
    Invalid(String),
}

/// Which side of the surface (sign of `f`) light arrives from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Positive,
    Negative,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Positive => 1.0,
            Side::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SurfaceKind {
    /// `normal · X - offset = 0`, `normal` unit.
    Plane { normal: Vec3, offset: f64 },
    /// `|X - center|^2 - radius^2 = 0`.
    Sphere { center: Vec3, radius: f64 },
    /// `X^T A X + b · X + c = 0`, `A` symmetric.
    Quadric { a: Matrix3<f64>, b: Vec3, c: f64 },
    /// `z - offset - amplitude * sin(kx x + ky y) = 0`.
    Sinusoid {
        amplitude: f64,
        wavevector: Vector2<f64>,
        offset: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitSurface {
    pub kind: SurfaceKind,
    pub incoming: Side,
}

/// Where a ray meets a surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intersection {
    pub point: Vec3,
    /// Distance from the ray origin.
    pub t: f64,
    /// Unit normal facing the side the ray arrives from.
    pub normal: Vec3,
    /// `u · normal`, always negative.
    pub cos_incidence: f64,
}

impl ImplicitSurface {
    pub fn plane(normal: Vec3, offset: f64) -> Result<Self, SurfaceError> {
        let n = normal.norm();
        if !(n > GRADIENT_MIN) {
            return Err(SurfaceError::Invalid("plane normal has zero length".into()));
        }
        Ok(Self {
            kind: SurfaceKind::Plane {
                normal: normal / n,
                offset: offset / n,
            },
            incoming: Side::Positive,
        })
    }

    pub fn sphere(center: Vec3, radius: f64) -> Result<Self, SurfaceError> {
        if !(radius > 0.0) {
            return Err(SurfaceError::Invalid("sphere radius must be positive".into()));
        }
        Ok(Self {
            kind: SurfaceKind::Sphere { center, radius },
            incoming: Side::Positive,
        })
    }

    pub fn quadric(a: Matrix3<f64>, b: Vec3, c: f64) -> Result<Self, SurfaceError> {
        if (a - a.transpose()).amax() > 1e-12 * a.amax().max(1.0) {
            return Err(SurfaceError::Invalid("quadric matrix must be symmetric".into()));
        }
        Ok(Self {
            kind: SurfaceKind::Quadric { a, b, c },
            incoming: Side::Positive,
        })
    }

    pub fn sinusoid(amplitude: f64, wavevector: Vector2<f64>, offset: f64) -> Self {
        Self {
            kind: SurfaceKind::Sinusoid {
                amplitude,
                wavevector,
                offset,
            },
            incoming: Side::Positive,
        }
    }

    pub fn with_incoming(mut self, side: Side) -> Self {
        self.incoming = side;
        self
    }

    pub fn value(&self, p: &Vec3) -> f64 {
        match &self.kind {
            SurfaceKind::Plane { normal, offset } => normal.dot(p) - offset,
            SurfaceKind::Sphere { center, radius } => (p - center).norm_squared() - radius * radius,
            SurfaceKind::Quadric { a, b, c } => p.dot(&(a * p)) + b.dot(p) + c,
            SurfaceKind::Sinusoid {
                amplitude,
                wavevector,
                offset,
            } => p.z - offset - amplitude * (wavevector.x * p.x + wavevector.y * p.y).sin(),
        }
    }

    pub fn gradient(&self, p: &Vec3) -> Vec3 {
        match &self.kind {
            SurfaceKind::Plane { normal, .. } => *normal,
            SurfaceKind::Sphere { center, .. } => 2.0 * (p - center),
            SurfaceKind::Quadric { a, b, .. } => 2.0 * (a * p) + b,
            SurfaceKind::Sinusoid {
                amplitude,
                wavevector,
                ..
            } => {
                let c = amplitude * (wavevector.x * p.x + wavevector.y * p.y).cos();
                Vec3::new(-c * wavevector.x, -c * wavevector.y, 1.0)
            }
        }
    }

    /// Characteristic length used to scale tolerances and steps.
    pub fn length_scale(&self) -> f64 {
        match &self.kind {
            SurfaceKind::Sphere { radius, .. } => radius.max(1.0),
            SurfaceKind::Sinusoid { amplitude, .. } => amplitude.abs().max(1.0),
            _ => 1.0,
        }
    }

    /// First-order distance from `p` to the surface, `|f| / |grad f|`.
    pub fn distance_estimate(&self, p: &Vec3) -> f64 {
        self.value(p).abs() / self.gradient(p).norm()
    }

    /// Unit normal at a surface point, pointing to the declared incoming side.
    pub fn normal_at(&self, p: &Vec3) -> Result<Vec3, SurfaceError> {
        let g = self.gradient(p);
        let gn = g.norm();
        if !(gn >= GRADIENT_MIN) {
            return Err(SurfaceError::DegenerateGradient([p.x, p.y, p.z]));
        }
        let distance = self.value(p).abs() / gn;
        if distance > OFF_SURFACE_TOL * self.length_scale() {
            return Err(SurfaceError::OffSurface {
                point: [p.x, p.y, p.z],
                distance,
            });
        }
        Ok(self.incoming.sign() * g / gn)
    }

    /// First intersection with `t > t_min` within the default horizon.
    pub fn intersect(&self, ray: &Ray, t_min: f64) -> Result<Intersection, SurfaceError> {
        self.intersect_within(ray, t_min, DEFAULT_HORIZON)
    }

    pub fn intersect_within(
        &self,
        ray: &Ray,
        t_min: f64,
        t_max: f64,
    ) -> Result<Intersection, SurfaceError> {
        let t = match &self.kind {
            SurfaceKind::Plane { normal, offset } => {
                let denom = normal.dot(&ray.dir);
                let t = (offset - normal.dot(&ray.origin)) / denom;
                (denom != 0.0 && t > t_min && t <= t_max).then_some(t)
            }
            SurfaceKind::Sphere { center, radius } => {
                let oc = ray.origin - center;
                smallest_root_above(
                    1.0,
                    2.0 * ray.dir.dot(&oc),
                    oc.norm_squared() - radius * radius,
                    t_min,
                    t_max,
                )
            }
            SurfaceKind::Quadric { a, b, .. } => {
                let o = ray.origin;
                let d = ray.dir;
                smallest_root_above(
                    d.dot(&(a * d)),
                    2.0 * d.dot(&(a * o)) + b.dot(&d),
                    self.value(&o),
                    t_min,
                    t_max,
                )
            }
            SurfaceKind::Sinusoid { .. } => self.sinusoid_root(ray, t_min, t_max),
        }
        .ok_or(SurfaceError::NoIntersection { t_min })?;
        let t = self.polish(ray, t);
        let point = ray.at(t);
        let g = self.gradient(&point);
        let gn = g.norm();
        if !(gn >= GRADIENT_MIN) {
            return Err(SurfaceError::DegenerateGradient([point.x, point.y, point.z]));
        }
        let mut normal = g / gn;
        let mut cos = ray.dir.dot(&normal);
        if cos.abs() < TRANSVERSE_MIN {
            return Err(SurfaceError::Tangential { cos: cos.abs() });
        }
        if cos > 0.0 {
            normal = -normal;
            cos = -cos;
        }
        Ok(Intersection {
            point,
            t,
            normal,
            cos_incidence: cos,
        })
    }

    /// Newton steps on `t -> f(origin + t u)`, kept only while they shrink the residual.
    fn polish(&self, ray: &Ray, mut t: f64) -> f64 {
        let mut residual = self.value(&ray.at(t)).abs();
        for _ in 0..3 {
            if residual == 0.0 {
                break;
            }
            let p = ray.at(t);
            let slope = self.gradient(&p).dot(&ray.dir);
            if slope == 0.0 {
                break;
            }
            let next = t - self.value(&p) / slope;
            let r = self.value(&ray.at(next)).abs();
            if r < residual {
                t = next;
                residual = r;
            } else {
                break;
            }
        }
        t
    }

    fn sinusoid_root(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
        let SurfaceKind::Sinusoid {
            amplitude,
            wavevector,
            offset,
        } = &self.kind
        else {
            unreachable!()
        };
        let amp = amplitude.abs();
        let o = ray.origin;
        let d = ray.dir;
        let rate = (wavevector.x * d.x + wavevector.y * d.y).abs();
        // Roots lie in the slab |z - offset| <= amplitude.
        let (mut lo, mut hi) = if d.z.abs() > 1e-14 {
            let a = (offset - amp - o.z) / d.z;
            let b = (offset + amp - o.z) / d.z;
            (a.min(b), a.max(b))
        } else {
            if (o.z - offset).abs() > amp {
                return None;
            }
            if rate == 0.0 {
                return None;
            }
            (t_min, t_min + 1.01 * std::f64::consts::TAU / rate)
        };
        lo = lo.max(t_min);
        hi = hi.min(t_max);
        if !(lo < hi) {
            return None;
        }
        let g = |t: f64| self.value(&ray.at(t));
        let dg = |t: f64| self.gradient(&ray.at(t)).dot(&d);
        // At most 0.2 rad of phase per sample so g' changes sign at most once per cell.
        let mut step = (hi - lo) / 8.0;
        if rate > 0.0 {
            step = step.min(0.2 / rate);
        }
        let cells = ((hi - lo) / step).ceil().min(1e7) as usize;
        let step = (hi - lo) / cells as f64;
        let mut a = lo;
        let mut ga = g(a);
        for i in 0..cells {
            let b = if i + 1 == cells { hi } else { lo + (i + 1) as f64 * step };
            let gb = g(b);
            if ga == 0.0 && a > t_min {
                return Some(a);
            }
            if ga * gb < 0.0 || (gb == 0.0 && b > t_min) {
                return Some(safeguarded_newton(&g, &dg, a, b));
            }
            // A pair of close roots hides inside a cell when g turns around and crosses.
            let (da, db) = (dg(a), dg(b));
            if da * db < 0.0 {
                let e = bisect_sign_change(&dg, a, b);
                let ge = g(e);
                if ge == 0.0 || ge * ga < 0.0 {
                    return Some(safeguarded_newton(&g, &dg, a, e));
                }
            }
            a = b;
            ga = gb;
        }
        None
    }
}

fn smallest_root_above(a: f64, b: f64, c: f64, t_min: f64, t_max: f64) -> Option<f64> {
    let scale = b.abs().max(c.abs()).max(1e-300);
    let roots: Vec<f64> = if a.abs() <= 1e-14 * scale {
        if b == 0.0 {
            vec![]
        } else {
            vec![-c / b]
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            vec![]
        } else {
            let s = disc.sqrt();
            let q = -0.5 * (b + b.signum() * s);
            if q == 0.0 {
                vec![0.0]
            } else {
                vec![q / a, c / q]
            }
        }
    };
    roots
        .into_iter()
        .filter(|&t| t > t_min && t <= t_max)
        .min_by(|x, y| x.total_cmp(y))
}

/// Newton iteration kept inside a sign-change bracket, falling back to bisection.
pub(crate) fn safeguarded_newton(
    g: &impl Fn(f64) -> f64,
    dg: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
) -> f64 {
    let (mut lo, mut hi) = (a, b);
    let mut glo = g(lo);
    if glo == 0.0 {
        return lo;
    }
    if g(hi) == 0.0 {
        return hi;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let gx = g(x);
        if gx == 0.0 {
            return x;
        }
        if gx * glo < 0.0 {
            hi = x;
        } else {
            lo = x;
            glo = gx;
        }
        let slope = dg(x);
        let newton = x - gx / slope;
        let next = if slope != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let done = (next - x).abs() <= 1e-15 * x.abs().max(1.0) || hi - lo <= 1e-15 * x.abs().max(1.0);
        x = next;
        if done {
            break;
        }
    }
    x
}

fn bisect_sign_change(h: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (a, b);
    let hlo = h(lo);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if h(mid) * hlo > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * mid.abs().max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// A right-handed orthonormal pair spanning the plane orthogonal to `axis`.
pub fn orthonormal_frame(axis: &Vec3) -> (Vec3, Vec3) {
    let a = axis.normalize();
    let helper = if a.x.abs() <= a.y.abs() && a.x.abs() <= a.z.abs() {
        Vec3::x()
    } else if a.y.abs() <= a.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let e1 = (helper - helper.dot(&a) * a).normalize();
    let e2 = a.cross(&e1);
    (e1, e2)
}

/// A two-coordinate parametrization of a surface around an anchor point:
/// in-plane coordinates for planes, gnomonic angles for spheres and graph
/// coordinates for quadrics and sinusoids.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPatch {
    surface: ImplicitSurface,
    chart: PatchChart,
}

#[derive(Debug, Clone, PartialEq)]
enum PatchChart {
    Plane { origin: Vec3, e1: Vec3, e2: Vec3 },
    Sphere { n0: Vec3, e1: Vec3, e2: Vec3 },
    /// Coordinates are offsets along `axes[0]`, `axes[1]`; the height axis is `axes[2]`.
    Graph { anchor: Vec3, axes: [usize; 3] },
}

impl LocalPatch {
    /// Builds a patch whose coordinate origin is the projection of `anchor`
    /// onto the surface.
    pub fn new(surface: &ImplicitSurface, anchor: &Vec3) -> Result<Self, SurfaceError> {
        let anchor = project_onto(surface, anchor)?;
        let chart = match &surface.kind {
            SurfaceKind::Plane { normal, .. } => {
                let (e1, e2) = orthonormal_frame(normal);
                PatchChart::Plane {
                    origin: anchor,
                    e1,
                    e2,
                }
            }
            SurfaceKind::Sphere { center, .. } => {
                let n0 = (anchor - center).normalize();
                let (e1, e2) = orthonormal_frame(&n0);
                PatchChart::Sphere { n0, e1, e2 }
            }
            SurfaceKind::Quadric { .. } => {
                let g = surface.gradient(&anchor);
                let h = g.iamax();
                let axes = [(h + 1) % 3, (h + 2) % 3, h];
                PatchChart::Graph { anchor, axes }
            }
            SurfaceKind::Sinusoid { .. } => PatchChart::Graph {
                anchor,
                axes: [0, 1, 2],
            },
        };
        Ok(Self {
            surface: surface.clone(),
            chart,
        })
    }

    pub fn surface(&self) -> &ImplicitSurface {
        &self.surface
    }

    pub fn point(&self, uv: &Vector2<f64>) -> Result<Vec3, SurfaceError> {
        match &self.chart {
            PatchChart::Plane { origin, e1, e2 } => Ok(origin + uv.x * e1 + uv.y * e2),
            PatchChart::Sphere { n0, e1, e2 } => {
                let SurfaceKind::Sphere { center, radius } = &self.surface.kind else {
                    unreachable!()
                };
                let w = n0 + uv.x * e1 + uv.y * e2;
                Ok(center + *radius * w.normalize())
            }
            PatchChart::Graph { anchor, axes } => {
                let mut p = *anchor;
                p[axes[0]] += uv.x;
                p[axes[1]] += uv.y;
                p[axes[2]] = self.height(&p, axes, anchor[axes[2]])?;
                Ok(p)
            }
        }
    }

    fn height(&self, p: &Vec3, axes: &[usize; 3], hint: f64) -> Result<f64, SurfaceError> {
        let h = axes[2];
        match &self.surface.kind {
            SurfaceKind::Sinusoid {
                amplitude,
                wavevector,
                offset,
            } => Ok(offset + amplitude * (wavevector.x * p.x + wavevector.y * p.y).sin()),
            SurfaceKind::Quadric { a, .. } => {
                // f restricted to the height line is quadratic: alpha s^2 + beta s + f0.
                let mut base = *p;
                base[h] = 0.0;
                let f0 = self.surface.value(&base);
                let alpha = a[(h, h)];
                let beta = self.surface.gradient(&base)[h];
                let roots: Vec<f64> = if alpha.abs() <= 1e-14 * beta.abs().max(f0.abs()).max(1e-300) {
                    if beta == 0.0 {
                        vec![]
                    } else {
                        vec![-f0 / beta]
                    }
                } else {
                    let disc = beta * beta - 4.0 * alpha * f0;
                    if disc < 0.0 {
                        vec![]
                    } else {
                        let q = -0.5 * (beta + beta.signum() * disc.sqrt());
                        if q == 0.0 {
                            vec![0.0]
                        } else {
                            vec![q / alpha, f0 / q]
                        }
                    }
                };
                let s = roots
                    .into_iter()
                    .min_by(|a, b| (a - hint).abs().total_cmp(&(b - hint).abs()))
                    .ok_or(SurfaceError::NotAGraph([p.x, p.y, p.z]))?;
                // One Newton step on the full value removes cancellation in the closed form.
                let mut x = base;
                x[h] = s;
                let slope = self.surface.gradient(&x)[h];
                Ok(if slope != 0.0 { s - self.surface.value(&x) / slope } else { s })
            }
            _ => unreachable!(),
        }
    }

    /// Partial derivatives of [`LocalPatch::point`] with respect to the two coordinates.
    pub fn tangents(&self, uv: &Vector2<f64>) -> Result<[Vec3; 2], SurfaceError> {
        match &self.chart {
            PatchChart::Plane { e1, e2, .. } => Ok([*e1, *e2]),
            PatchChart::Sphere { n0, e1, e2 } => {
                let SurfaceKind::Sphere { radius, .. } = &self.surface.kind else {
                    unreachable!()
                };
                let w = n0 + uv.x * e1 + uv.y * e2;
                let wn = w.norm();
                let w_hat = w / wn;
                let proj = |e: &Vec3| *radius * (e - e.dot(&w_hat) * w_hat) / wn;
                Ok([proj(e1), proj(e2)])
            }
            PatchChart::Graph { axes, .. } => {
                let p = self.point(uv)?;
                let g = self.surface.gradient(&p);
                let h = axes[2];
                if g[h].abs() < GRADIENT_MIN {
                    return Err(SurfaceError::NotAGraph([p.x, p.y, p.z]));
                }
                let mut out = [Vec3::zeros(); 2];
                for (i, t) in out.iter_mut().enumerate() {
                    t[axes[i]] = 1.0;
                    t[h] = -g[axes[i]] / g[h];
                }
                Ok(out)
            }
        }
    }

    /// Coordinates of a point lying on the surface.
    pub fn coords(&self, p: &Vec3) -> Vector2<f64> {
        match &self.chart {
            PatchChart::Plane { origin, e1, e2 } => {
                let d = p - origin;
                Vector2::new(d.dot(e1), d.dot(e2))
            }
            PatchChart::Sphere { n0, e1, e2 } => {
                let SurfaceKind::Sphere { center, .. } = &self.surface.kind else {
                    unreachable!()
                };
                let w = p - center;
                let s = w.dot(n0);
                Vector2::new(w.dot(e1) / s, w.dot(e2) / s)
            }
            PatchChart::Graph { anchor, axes } => {
                Vector2::new(p[axes[0]] - anchor[axes[0]], p[axes[1]] - anchor[axes[1]])
            }
        }
    }
}

/// Moves `p` onto the surface by Newton steps along the gradient.
pub fn project_onto(surface: &ImplicitSurface, p: &Vec3) -> Result<Vec3, SurfaceError> {
    let mut x = *p;
    for _ in 0..100 {
        let f = surface.value(&x);
        let g = surface.gradient(&x);
        let gg = g.norm_squared();
        if !(gg >= GRADIENT_MIN * GRADIENT_MIN) {
            return Err(SurfaceError::DegenerateGradient([x.x, x.y, x.z]));
        }
        let step = f / gg * g;
        x -= step;
        if step.norm() <= 1e-15 * x.norm().max(1.0) {
            break;
        }
    }
    if surface.distance_estimate(&x) > 1e-12 * surface.length_scale() * x.norm().max(1.0) {
        return Err(SurfaceError::OffSurface {
            point: [x.x, x.y, x.z],
            distance: surface.distance_estimate(&x),
        });
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn down_from(p: Vec3) -> Ray {
        Ray::new(p, v(0.0, 0.0, -1.0)).unwrap()
    }

    #[test]
    fn axial_sphere_hit() {
        let s = ImplicitSurface::sphere(Vec3::zeros(), 1.0).unwrap();
        let hit = s.intersect(&down_from(v(0.0, 0.0, 5.0)), 0.0).unwrap();
        assert_abs_diff_eq!(hit.point, v(0.0, 0.0, 1.0), epsilon = 1e-14);
        assert_abs_diff_eq!(hit.t, 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(hit.normal, v(0.0, 0.0, 1.0), epsilon = 1e-14);
    }

    #[test]
    fn axial_plane_hit() {
        let s = ImplicitSurface::plane(v(0.0, 0.0, 1.0), 0.0).unwrap();
        let hit = s.intersect(&down_from(v(0.0, 0.0, 5.0)), 0.0).unwrap();
        assert_eq!(hit.point, Vec3::zeros());
        assert_eq!(hit.t, 5.0);
    }

    #[test]
    fn sphere_miss() {
        let s = ImplicitSurface::sphere(Vec3::zeros(), 1.0).unwrap();
        assert!(matches!(
            s.intersect(&down_from(v(5.0, 0.0, 5.0)), 0.0),
            Err(SurfaceError::NoIntersection { .. })
        ));
    }

    #[test]
    fn grazing_is_tangential() {
        let s = ImplicitSurface::sphere(Vec3::zeros(), 1.0).unwrap();
        let ray = down_from(v(1.0, 0.0, 5.0));
        assert!(matches!(s.intersect(&ray, 0.0), Err(SurfaceError::Tangential { .. })));
    }

    #[test]
    fn normals_follow_orientation() {
        let plane = ImplicitSurface::plane(v(0.0, 0.0, 1.0), 0.0).unwrap();
        assert_eq!(plane.normal_at(&v(3.0, 1.0, 0.0)).unwrap(), v(0.0, 0.0, 1.0));

        let sphere = ImplicitSurface::sphere(Vec3::zeros(), 2.0).unwrap();
        assert_eq!(sphere.normal_at(&v(0.0, 0.0, 2.0)).unwrap(), v(0.0, 0.0, 1.0));

        // x^2 + y^2 - z: grad = (2x, 2y, -1).
        let paraboloid =
            ImplicitSurface::quadric(Matrix3::from_diagonal(&v(1.0, 1.0, 0.0)), v(0.0, 0.0, -1.0), 0.0)
                .unwrap();
        assert_eq!(paraboloid.normal_at(&Vec3::zeros()).unwrap(), v(0.0, 0.0, -1.0));
        let flipped = paraboloid.with_incoming(Side::Negative);
        assert_eq!(flipped.normal_at(&Vec3::zeros()).unwrap(), v(0.0, 0.0, 1.0));
    }

    #[test]
    fn normal_at_rejects_off_surface() {
        let sphere = ImplicitSurface::sphere(Vec3::zeros(), 1.0).unwrap();
        assert!(matches!(
            sphere.normal_at(&v(0.0, 0.0, 1.1)),
            Err(SurfaceError::OffSurface { .. })
        ));
    }

    #[test]
    fn degenerate_gradient_detected() {
        // Cone x^2 + y^2 - z^2 has a vanishing gradient at its apex.
        let cone =
            ImplicitSurface::quadric(Matrix3::from_diagonal(&v(1.0, 1.0, -1.0)), Vec3::zeros(), 0.0)
                .unwrap();
        assert!(matches!(
            cone.normal_at(&Vec3::zeros()),
            Err(SurfaceError::DegenerateGradient(_))
        ));
    }

    #[test]
    fn sinusoid_hit_is_on_surface() {
        let s = ImplicitSurface::sinusoid(0.3, Vector2::new(1.3, -0.7), 0.2);
        let ray = Ray::new(v(0.4, -0.3, 4.0), v(0.2, 0.1, -1.0)).unwrap();
        let hit = s.intersect(&ray, 0.0).unwrap();
        assert!(s.value(&hit.point).abs() < 1e-14);
        assert!(hit.cos_incidence < 0.0);
    }

    #[test]
    fn sinusoid_horizontal_ray() {
        let s = ImplicitSurface::sinusoid(0.5, Vector2::new(1.0, 0.0), 0.0);
        let ray = Ray::new(v(0.0, 0.0, 0.25), v(1.0, 0.0, 0.0)).unwrap();
        let hit = s.intersect(&ray, 1e-9).unwrap();
        // sin(x) = 0.5 first at x = pi/6.
        assert_abs_diff_eq!(hit.t, std::f64::consts::FRAC_PI_6, epsilon = 1e-13);
    }

    #[test]
    fn patches_parametrize_their_surface() {
        let surfaces = [
            ImplicitSurface::plane(v(0.2, -0.1, 1.0), 0.4).unwrap(),
            ImplicitSurface::sphere(v(0.1, 0.2, -3.0), 4.0).unwrap(),
            ImplicitSurface::quadric(
                Matrix3::new(0.3, 0.05, 0.0, 0.05, -0.2, 0.0, 0.0, 0.0, 0.0),
                v(0.0, 0.0, -1.0),
                1.0,
            )
            .unwrap(),
            ImplicitSurface::sinusoid(0.2, Vector2::new(0.8, 0.5), -1.0),
        ];
        for s in &surfaces {
            let patch = LocalPatch::new(s, &v(0.3, 0.2, 0.5)).unwrap();
            for uv in [Vector2::new(0.0, 0.0), Vector2::new(0.05, -0.1), Vector2::new(-0.2, 0.15)] {
                let p = patch.point(&uv).unwrap();
                assert!(s.distance_estimate(&p) < 1e-12, "{s:?}");
                assert_abs_diff_eq!(patch.coords(&p), uv, epsilon = 1e-12);
                let [t1, t2] = patch.tangents(&uv).unwrap();
                let h = 1e-6;
                for (i, t) in [t1, t2].iter().enumerate() {
                    let mut up = uv;
                    let mut dn = uv;
                    up[i] += h;
                    dn[i] -= h;
                    let fd = (patch.point(&up).unwrap() - patch.point(&dn).unwrap()) / (2.0 * h);
                    assert_abs_diff_eq!(fd, *t, epsilon = 1e-8);
                }
            }
        }
    }
}
