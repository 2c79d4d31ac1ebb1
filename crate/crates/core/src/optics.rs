//! Laws of reflection and refraction, as maps on directions and on lines,
//! and sequential propagation through an ordered list of interfaces.

use nalgebra::Matrix4;
use thiserror::Error;

use crate::line_space::{chart_jacobian, JacobianError, LineError, OrientedLine, Ray, Vec3};
use crate::surfaces::{ImplicitSurface, Intersection, SurfaceError, TRANSVERSE_MIN};

/// Minimum travel between consecutive hits; keeps a ray from re-finding the
/// point it just left.
pub const SEGMENT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OpticsError {
    #[error("grazing incidence (|u.n| = {cos:e})")]
    Grazing { cos: f64 },
    #[error("total internal reflection ((n1/n2) sin a1 = {ratio})")]
    TotalInternalReflection { ratio: f64 },
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error(transparent)]
    Line(#[from] LineError),
    #[error("interface {index}: {source}")]
    AtInterface {
        index: usize,
        #[source]
        source: Box<OpticsError>,
    },
    #[error("media chain broken at interface {index}: expected n_in = {expected}, found {found}")]
    BadMediaChain {
        index: usize,
        expected: f64,
        found: f64,
    },
    #[error("invalid refractive indices at interface {index}: {reason}")]
    BadIndex { index: usize, reason: String },
    #[error("start point is {distance:e} away from the line")]
    StartOffLine { distance: f64 },
}

/// Mirror image of `u` across the tangent plane with unit normal `n`.
pub fn reflect_direction(u: &Vec3, n: &Vec3) -> Result<Vec3, OpticsError> {
    let c = u.dot(n);
    if c.abs() < TRANSVERSE_MIN {
        return Err(OpticsError::Grazing { cos: c.abs() });
    }
    Ok(u - 2.0 * c * n)
}

/// Vector Snell law: the tangential part scales by `n1 / n2`, the normal part
/// keeps its sign and is fixed by `|u2| = 1`.
pub fn refract_direction(u: &Vec3, n: &Vec3, n1: f64, n2: f64) -> Result<Vec3, OpticsError> {
    let c = u.dot(n);
    if c.abs() < TRANSVERSE_MIN {
        return Err(OpticsError::Grazing { cos: c.abs() });
    }
    let tangential = u - c * n;
    let mu = n1 / n2;
    let ratio = mu * tangential.norm();
    if ratio >= 1.0 {
        return Err(OpticsError::TotalInternalReflection { ratio });
    }
    let normal = (1.0 - ratio * ratio).sqrt();
    if normal < TRANSVERSE_MIN {
        return Err(OpticsError::Grazing { cos: normal });
    }
    Ok(mu * tangential + c.signum() * normal * n)
}

pub fn reflect_line(
    ray: &Ray,
    surface: &ImplicitSurface,
    t_min: f64,
) -> Result<(Ray, Intersection), OpticsError> {
    let hit = surface.intersect(ray, t_min)?;
    let dir = reflect_direction(&ray.dir, &hit.normal)?;
    Ok((
        Ray {
            origin: hit.point,
            dir,
        },
        hit,
    ))
}

pub fn refract_line(
    ray: &Ray,
    surface: &ImplicitSurface,
    n1: f64,
    n2: f64,
    t_min: f64,
) -> Result<(Ray, Intersection), OpticsError> {
    let hit = surface.intersect(ray, t_min)?;
    let dir = refract_direction(&ray.dir, &hit.normal, n1, n2)?;
    Ok((
        Ray {
            origin: hit.point,
            dir,
        },
        hit,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Reflect,
    Refract,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interface {
    pub surface: ImplicitSurface,
    pub action: Action,
    pub n_in: f64,
    /// Equal to `n_in` for mirrors.
    pub n_out: f64,
}

impl Interface {
    pub fn reflect(surface: ImplicitSurface, n: f64) -> Self {
        Self {
            surface,
            action: Action::Reflect,
            n_in: n,
            n_out: n,
        }
    }

    pub fn refract(surface: ImplicitSurface, n_in: f64, n_out: f64) -> Self {
        Self {
            surface,
            action: Action::Refract,
            n_in,
            n_out,
        }
    }

    /// Applies the interface to a ray, searching for the hit beyond `t_min`.
    pub fn apply(&self, ray: &Ray, t_min: f64) -> Result<(Ray, Intersection), OpticsError> {
        match self.action {
            Action::Reflect => reflect_line(ray, &self.surface, t_min),
            Action::Refract => refract_line(ray, &self.surface, self.n_in, self.n_out, t_min),
        }
    }

    /// Factor `r` with `map^* omega = r omega`: 1 for mirrors, `n_in / n_out` for refraction.
    pub fn symplectic_ratio(&self) -> f64 {
        match self.action {
            Action::Reflect => 1.0,
            Action::Refract => self.n_in / self.n_out,
        }
    }

    /// Chart Jacobian of the line-to-line map at `line`. Rays start at the
    /// projection of `anchor` onto each perturbed line.
    pub fn chart_jacobian(
        &self,
        line: &OrientedLine,
        anchor: &Vec3,
    ) -> Result<Matrix4<f64>, JacobianError<OpticsError>> {
        let scale = self
            .surface
            .length_scale()
            .max(line.foot().norm())
            .max(anchor.norm());
        chart_jacobian(line, scale, |l| {
            self.apply(&Ray::on_line(l, anchor), SEGMENT_EPS)
                .map(|(out, _)| out.line())
        })
    }
}

/// An ordered list of interfaces traversed in sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalSystem {
    interfaces: Vec<Interface>,
    ambient_index: f64,
}

impl OpticalSystem {
    /// Checks index positivity and that the media chain is consistent.
    pub fn new(ambient_index: f64, interfaces: Vec<Interface>) -> Result<Self, OpticsError> {
        if !(ambient_index > 0.0) {
            return Err(OpticsError::BadIndex {
                index: 0,
                reason: format!("ambient index {ambient_index} must be positive"),
            });
        }
        let mut current = ambient_index;
        for (index, it) in interfaces.iter().enumerate() {
            if !(it.n_in > 0.0 && it.n_out > 0.0) {
                return Err(OpticsError::BadIndex {
                    index,
                    reason: "indices must be positive".into(),
                });
            }
            if it.n_in != current {
                return Err(OpticsError::BadMediaChain {
                    index,
                    expected: current,
                    found: it.n_in,
                });
            }
            match it.action {
                Action::Refract if it.n_out == it.n_in => {
                    return Err(OpticsError::BadIndex {
                        index,
                        reason: "refraction needs n_out != n_in".into(),
                    })
                }
                Action::Reflect if it.n_out != it.n_in => {
                    return Err(OpticsError::BadIndex {
                        index,
                        reason: "a mirror keeps the medium".into(),
                    })
                }
                _ => {}
            }
            current = it.n_out;
        }
        Ok(Self {
            interfaces,
            ambient_index,
        })
    }

    pub fn empty(ambient_index: f64) -> Self {
        Self {
            interfaces: Vec::new(),
            ambient_index,
        }
    }

    pub fn interfaces(&self) -> &[Interface] {
        &self.interfaces
    }

    pub fn ambient_index(&self) -> f64 {
        self.ambient_index
    }

    /// Index of the medium the light ends up in.
    pub fn exit_index(&self) -> f64 {
        self.interfaces
            .last()
            .map_or(self.ambient_index, |it| it.n_out)
    }

    /// Refractive index of each straight segment: entry medium, then after every interface.
    pub fn segment_indices(&self) -> Vec<f64> {
        std::iter::once(self.ambient_index)
            .chain(self.interfaces.iter().map(|it| it.n_out))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.interfaces.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceResult {
    /// Outgoing ray, starting at the last hit (or at the start when nothing is hit).
    pub ray_out: Ray,
    pub hits: Vec<Intersection>,
    /// Sum of index times segment length from the start to the last hit.
    pub optical_length: f64,
}

impl TraceResult {
    pub fn line_out(&self) -> OrientedLine {
        self.ray_out.line()
    }
}

/// Propagates the line `line`, entering at `start`, through every interface in order.
pub fn propagate_system(
    line: &OrientedLine,
    system: &OpticalSystem,
    start: &Vec3,
) -> Result<TraceResult, OpticsError> {
    let distance = line.distance_to(start);
    if distance > 1e-9 * start.norm().max(1.0) {
        return Err(OpticsError::StartOffLine { distance });
    }
    trace_ray(
        &Ray {
            origin: *start,
            dir: line.direction(),
        },
        system,
    )
}

pub fn trace_ray(ray: &Ray, system: &OpticalSystem) -> Result<TraceResult, OpticsError> {
    let mut current = *ray;
    let mut hits = Vec::with_capacity(system.interfaces.len());
    let mut optical_length = 0.0;
    for (index, it) in system.interfaces.iter().enumerate() {
        let (next, hit) = it
            .apply(&current, SEGMENT_EPS)
            .map_err(|e| OpticsError::AtInterface {
                index,
                source: Box::new(e),
            })?;
        optical_length += it.n_in * hit.t;
        hits.push(hit);
        current = next;
    }
    Ok(TraceResult {
        ray_out: current,
        hits,
        optical_length,
    })
}

/// Finite-difference residuals of the two differential identities satisfied
/// by a one-parameter family of rays crossing one interface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityResiduals {
    /// `(n_in u1 - n_out u2) · dP/ds`.
    pub tangency: f64,
    /// `n_out u2 · dM2/ds - n_in u1 · dM1/ds - d(n_in M1P + n_out PM2)/ds`, with
    /// signed segment values.
    pub transport: f64,
}

/// Evaluates [`IdentityResiduals`] at `s` for rays `ray_of(s)`. The auxiliary
/// points are `M1 = P - a(s) u1` on the incident line and `M2 = P + b(s) u2`
/// on the outgoing one; negative values put them behind the interface.
pub fn identity_residuals(
    interface: &Interface,
    ray_of: impl Fn(f64) -> Ray,
    a: impl Fn(f64) -> f64,
    b: impl Fn(f64) -> f64,
    s: f64,
    h: f64,
) -> Result<IdentityResiduals, OpticsError> {
    let sample = |s: f64| -> Result<[Vec3; 5], OpticsError> {
        let ray = ray_of(s);
        let (out, hit) = interface.apply(&ray, SEGMENT_EPS)?;
        let p = hit.point;
        let m1 = p - a(s) * ray.dir;
        let m2 = p + b(s) * out.dir;
        Ok([p, ray.dir, out.dir, m1, m2])
    };
    let [_, u1, u2, _, _] = sample(s)?;
    let [p_plus, _, _, m1_plus, m2_plus] = sample(s + h)?;
    let [p_minus, _, _, m1_minus, m2_minus] = sample(s - h)?;
    let (n1, n2) = (interface.n_in, interface.n_out);
    let dp = (p_plus - p_minus) / (2.0 * h);
    let dm1 = (m1_plus - m1_minus) / (2.0 * h);
    let dm2 = (m2_plus - m2_minus) / (2.0 * h);
    let dlength = (n1 * (a(s + h) - a(s - h)) + n2 * (b(s + h) - b(s - h))) / (2.0 * h);
    Ok(IdentityResiduals {
        tangency: (n1 * u1 - n2 * u2).dot(&dp),
        transport: n2 * u2.dot(&dm2) - n1 * u1.dot(&dm1) - dlength,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::line_space::symplectic_deviation;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn z_plane(offset: f64) -> ImplicitSurface {
        ImplicitSurface::plane(v(0.0, 0.0, 1.0), offset).unwrap()
    }

    #[test]
    fn reflection_examples() {
        let n = v(0.0, 0.0, 1.0);
        assert_eq!(reflect_direction(&v(0.0, 0.0, -1.0), &n).unwrap(), v(0.0, 0.0, 1.0));
        let u = v(FRAC_1_SQRT_2, 0.0, -FRAC_1_SQRT_2);
        assert_abs_diff_eq!(
            reflect_direction(&u, &n).unwrap(),
            v(FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2),
            epsilon = 1e-15
        );
        assert!(matches!(
            reflect_direction(&v(1.0, 0.0, 0.0), &n),
            Err(OpticsError::Grazing { .. })
        ));
    }

    #[test]
    fn refraction_examples() {
        let n = v(0.0, 0.0, 1.0);
        let u = v(0.6, 0.0, -0.8);
        assert_abs_diff_eq!(refract_direction(&u, &n, 1.3, 1.3).unwrap(), u, epsilon = 1e-15);
        assert_eq!(
            refract_direction(&v(0.0, 0.0, -1.0), &n, 1.0, 2.4).unwrap(),
            v(0.0, 0.0, -1.0)
        );
        // sin a1 = 0.8 > n2/n1 = 2/3.
        assert!(matches!(
            refract_direction(&v(0.8, 0.0, -0.6), &n, 1.5, 1.0),
            Err(OpticsError::TotalInternalReflection { .. })
        ));
        // 1 * sin 30 = 2 * sin t2.
        let u30 = v(0.5, 0.0, -(0.75f64).sqrt());
        let out = refract_direction(&u30, &n, 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(out.x, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(out.norm(), 1.0, epsilon = 1e-15);
        assert!(out.z < 0.0);
    }

    #[test]
    fn refracted_line_examples() {
        let plane = z_plane(0.0);
        let normal = Ray::new(v(0.3, 0.1, 2.0), v(0.0, 0.0, -1.0)).unwrap();
        let (out, _) = refract_line(&normal, &plane, 1.0, 1.7, 0.0).unwrap();
        assert_eq!(out.dir, v(0.0, 0.0, -1.0));

        let oblique = Ray::new(v(0.0, 0.0, 2.0), v(0.5, 0.0, -(0.75f64).sqrt())).unwrap();
        let (out, _) = refract_line(&oblique, &plane, 1.0, 1.5, 0.0).unwrap();
        let angle = out.dir.dot(&v(0.0, 0.0, -1.0)).acos();
        assert_abs_diff_eq!(angle, (1.0f64 / 3.0).asin(), epsilon = 1e-14);

        let steep = Ray::new(v(0.0, 0.0, 2.0), v((0.75f64).sqrt(), 0.0, -0.5)).unwrap();
        assert!(matches!(
            refract_line(&steep, &plane, 1.5, 1.0, 0.0),
            Err(OpticsError::TotalInternalReflection { .. })
        ));
    }

    #[test]
    fn reflected_line_examples() {
        let plane = z_plane(0.0);
        let ray = Ray::new(v(0.0, 0.0, 5.0), v(0.0, 0.0, -1.0)).unwrap();
        let (out, hit) = reflect_line(&ray, &plane, 0.0).unwrap();
        assert_eq!(hit.point, Vec3::zeros());
        assert_eq!(out.dir, v(0.0, 0.0, 1.0));

        let ray = Ray::new(v(0.0, 1.0, 5.0), v(0.0, 0.0, -1.0)).unwrap();
        let (out, _) = reflect_line(&ray, &plane, 0.0).unwrap();
        assert_eq!(out.origin, v(0.0, 1.0, 0.0));
        assert_eq!(out.line().foot(), v(0.0, 1.0, 0.0));
        assert_eq!(out.dir, v(0.0, 0.0, 1.0));
    }

    #[test]
    fn reflected_line_contains_hit() {
        let sphere = ImplicitSurface::sphere(v(0.2, -0.1, 0.0), 1.5).unwrap();
        let ray = Ray::new(v(0.4, 0.3, 6.0), v(-0.05, 0.02, -1.0)).unwrap();
        let (out, hit) = reflect_line(&ray, &sphere, 0.0).unwrap();
        assert!(out.line().distance_to(&hit.point) < 1e-10);
    }

    #[test]
    fn propagation_examples() {
        let line = OrientedLine::through(v(0.0, 0.0, 5.0), v(0.0, 0.0, -1.0)).unwrap();
        let empty = OpticalSystem::empty(1.0);
        let r = propagate_system(&line, &empty, &v(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(r.line_out(), line);
        assert_eq!(r.optical_length, 0.0);

        let mirror = OpticalSystem::new(1.0, vec![Interface::reflect(z_plane(0.0), 1.0)]).unwrap();
        let r = propagate_system(&line, &mirror, &v(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(r.optical_length, 5.0);

        // Down from z = 2 to the floor, back up to the ceiling at z = 1.
        let corridor = OpticalSystem::new(
            1.0,
            vec![
                Interface::reflect(z_plane(0.0), 1.0),
                Interface::reflect(z_plane(1.0).with_incoming(crate::surfaces::Side::Negative), 1.0),
            ],
        )
        .unwrap();
        let r = propagate_system(&line, &corridor, &v(0.0, 0.0, 2.0)).unwrap();
        assert_abs_diff_eq!(r.optical_length, 3.0, epsilon = 1e-12);
        assert_eq!(r.hits.len(), 2);
    }

    #[test]
    fn start_must_lie_on_line() {
        let line = OrientedLine::through(Vec3::zeros(), v(0.0, 0.0, 1.0)).unwrap();
        assert!(matches!(
            propagate_system(&line, &OpticalSystem::empty(1.0), &v(1.0, 0.0, 0.0)),
            Err(OpticsError::StartOffLine { .. })
        ));
    }

    #[test]
    fn media_chain_validation() {
        let ok = OpticalSystem::new(
            1.0,
            vec![
                Interface::refract(z_plane(0.0), 1.0, 1.5),
                Interface::reflect(z_plane(-1.0), 1.5),
                Interface::refract(z_plane(0.0), 1.5, 1.0),
            ],
        );
        assert!(ok.is_ok());
        assert_eq!(ok.unwrap().segment_indices(), vec![1.0, 1.5, 1.5, 1.0]);

        let broken = OpticalSystem::new(
            1.0,
            vec![
                Interface::refract(z_plane(0.0), 1.0, 1.5),
                Interface::reflect(z_plane(-1.0), 1.0),
            ],
        );
        assert!(matches!(broken, Err(OpticsError::BadMediaChain { index: 1, .. })));

        let same = OpticalSystem::new(1.0, vec![Interface::refract(z_plane(0.0), 1.0, 1.0)]);
        assert!(matches!(same, Err(OpticsError::BadIndex { index: 0, .. })));
    }

    #[test]
    fn errors_carry_interface_index() {
        let sys = OpticalSystem::new(
            1.0,
            vec![
                Interface::reflect(z_plane(0.0), 1.0),
                Interface::reflect(z_plane(-5.0), 1.0),
            ],
        )
        .unwrap();
        let line = OrientedLine::through(v(0.0, 0.0, 1.0), v(0.0, 0.0, -1.0)).unwrap();
        let err = propagate_system(&line, &sys, &v(0.0, 0.0, 1.0)).unwrap_err();
        assert!(matches!(err, OpticsError::AtInterface { index: 1, .. }));
    }

    #[test]
    fn plane_mirror_is_symplectic() {
        let it = Interface::reflect(z_plane(0.0), 1.0);
        let line = OrientedLine::through(v(0.3, -0.2, 3.0), v(0.1, 0.2, -1.0)).unwrap();
        let jac = it.chart_jacobian(&line, &v(0.3, -0.2, 3.0)).unwrap();
        assert!(symplectic_deviation(&jac, 1.0) < 1e-8);
    }

    #[test]
    fn sphere_refraction_scales_form() {
        let sphere = ImplicitSurface::sphere(v(0.0, 0.0, -2.0), 2.5).unwrap();
        let it = Interface::refract(sphere, 1.0, 1.5);
        let line = OrientedLine::through(v(0.4, 0.1, 3.0), v(-0.1, 0.05, -1.0)).unwrap();
        let jac = it.chart_jacobian(&line, &v(0.4, 0.1, 3.0)).unwrap();
        assert!(symplectic_deviation(&jac, 1.0 / 1.5) < 1e-7);
        assert!(symplectic_deviation(&jac, 1.0) > 0.1);
    }

    #[test]
    fn differential_identities_hold_on_curved_interfaces() {
        let sphere = ImplicitSurface::sphere(v(0.0, 0.0, -2.0), 2.5).unwrap();
        let ray_of = |s: f64| Ray::new(v(0.2 + s, -0.1 + 0.5 * s, 3.0), v(0.1 * s, 0.05, -1.0)).unwrap();
        let a = |s: f64| 1.0 + 0.3 * s;
        let b = |s: f64| -0.5 + s * s;
        for it in [
            Interface::reflect(sphere.clone(), 1.0),
            Interface::refract(sphere, 1.0, 1.5),
        ] {
            let r = identity_residuals(&it, ray_of, a, b, 0.1, 1e-5).unwrap();
            assert!(r.tangency.abs() < 1e-8, "{r:?}");
            assert!(r.transport.abs() < 1e-8, "{r:?}");
        }
    }
}
