//! Property tests for the geometric invariants of lines, surfaces, interfaces
//! and ray families.

use nalgebra::{Matrix3, Vector2, Vector4};
use proptest::prelude::*;
use raylines::families::{
    defect, defect_richardson, is_rectangular, reconstruct_wavefront, transform_family, Domain, Family, FamilyError,
    Param, RayFamily,
};
use raylines::line_space::{
    from_chart, omega_matrix, symplectic_pairing, to_chart, to_chart_with_origin, ChartId,
    ChartPoint, LineVariation, OrientedLine, Ray, Vec3,
};
use raylines::optics::{reflect_direction, refract_direction, Interface, OpticalSystem};
use raylines::surfaces::{ImplicitSurface, SurfaceError};

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn unit() -> impl Strategy<Value = Vec3> {
    vec3(1.0)
        .prop_filter("non-degenerate", |v| v.norm() > 0.1)
        .prop_map(|v| v.normalize())
}

fn line() -> impl Strategy<Value = OrientedLine> {
    (vec3(5.0), unit()).prop_map(|(p, u)| OrientedLine::through(p, u).unwrap())
}

fn variation_at(l: &OrientedLine) -> impl Strategy<Value = LineVariation> {
    let l = *l;
    (vec3(1.0), vec3(1.0)).prop_map(move |(du, dq)| LineVariation::tangent_at(&l, du, dq))
}

/// Chart tangent vector of the curve `eps -> line.perturbed(v, eps)`, by
/// Richardson-extrapolated central differences.
fn chart_tangent(line: &OrientedLine, v: &LineVariation, chart: ChartId, origin: &Vec3) -> Vector4<f64> {
    let central = |h: f64| {
        let plus = to_chart_with_origin(&line.perturbed(v, h), chart, origin).unwrap();
        let minus = to_chart_with_origin(&line.perturbed(v, -h), chart, origin).unwrap();
        (plus.to_vector() - minus.to_vector()) / (2.0 * h)
    };
    (4.0 * central(5e-4) - central(1e-3)) / 3.0
}

fn omega(w1: &Vector4<f64>, w2: &Vector4<f64>) -> f64 {
    (w1.transpose() * omega_matrix() * w2)[(0, 0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn chart_round_trip(l in line()) {
        let chart = ChartId::preferred(&l.direction());
        let back = from_chart(&to_chart(&l, chart).unwrap());
        prop_assert!((back.direction() - l.direction()).norm() < 1e-12);
        prop_assert!((back.foot() - l.foot()).norm() < 1e-12 * l.foot().norm().max(1.0));
    }

    #[test]
    fn chart_form_matches_pairing(
        a in (-1.5f64..1.5, -1.5f64..1.5),
        b in (-3.0f64..3.0, -3.0f64..3.0),
        w1 in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
        w2 in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
    ) {
        let c = Vector4::new(a.0, a.1, b.0, b.1);
        let w1 = Vector4::new(w1.0, w1.1, w1.2, w1.3);
        let w2 = Vector4::new(w2.0, w2.1, w2.2, w2.3);
        let h = 1e-5;
        let variation = |w: &Vector4<f64>| {
            let plus = from_chart(&ChartPoint::from_vector(ChartId::North, &(c + h * w)));
            let minus = from_chart(&ChartPoint::from_vector(ChartId::North, &(c - h * w)));
            LineVariation {
                du: (plus.direction() - minus.direction()) / (2.0 * h),
                dq: (plus.foot() - minus.foot()) / (2.0 * h),
            }
        };
        let base = from_chart(&ChartPoint::from_vector(ChartId::North, &c));
        let pairing = symplectic_pairing(&base, &variation(&w1), &variation(&w2));
        prop_assert!((pairing - omega(&w1, &w2)).abs() < 1e-7, "{pairing} vs {}", omega(&w1, &w2));
    }

    #[test]
    fn pairing_ignores_origin_and_chart(
        (l, v1, v2) in line()
            .prop_filter("in both charts", |l| l.direction().z.abs() < 0.9)
            .prop_flat_map(|l| (Just(l), variation_at(&l), variation_at(&l))),
        origin in vec3(3.0),
    ) {
        let expected = symplectic_pairing(&l, &v1, &v2);
        for chart in [ChartId::North, ChartId::South] {
            for o in [Vec3::zeros(), origin] {
                let got = omega(&chart_tangent(&l, &v1, chart, &o), &chart_tangent(&l, &v2, chart, &o));
                prop_assert!((got - expected).abs() < 1e-9 * expected.abs().max(1.0),
                    "{chart:?} origin {o:?}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn reflection_keeps_normal_angle_and_plane(u in unit(), n in unit()) {
        prop_assume!(u.dot(&n).abs() > 1e-3);
        let r = reflect_direction(&u, &n).unwrap();
        prop_assert!((r.dot(&n).abs() - u.dot(&n).abs()).abs() < 1e-12);
        prop_assert!(r.dot(&u.cross(&n)).abs() < 1e-12);
        prop_assert!((r.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refraction_conserves_tangential_momentum(u in unit(), n in unit(), n1 in 1.0f64..2.5, n2 in 1.0f64..2.5) {
        prop_assume!(u.dot(&n).abs() > 1e-3);
        match refract_direction(&u, &n, n1, n2) {
            Ok(r) => {
                let t1 = u - u.dot(&n) * n;
                let t2 = r - r.dot(&n) * n;
                prop_assert!((n2 * t2 - n1 * t1).amax() < 1e-12);
                prop_assert!(r.dot(&n) * u.dot(&n) > 0.0);
            }
            Err(_) => {
                let sin1 = (u - u.dot(&n) * n).norm();
                prop_assert!(n1 * sin1 >= n2 * (1.0 - 1e-9));
            }
        }
    }
}

fn surfaces() -> Vec<ImplicitSurface> {
    vec![
        ImplicitSurface::plane(Vec3::new(0.2, -0.1, 1.0), 0.3).unwrap(),
        ImplicitSurface::sphere(Vec3::new(0.1, 0.2, -0.5), 1.7).unwrap(),
        ImplicitSurface::quadric(
            Matrix3::new(0.3, 0.05, 0.0, 0.05, -0.2, 0.0, 0.0, 0.0, 0.1),
            Vec3::new(0.0, 0.1, -1.0),
            0.2,
        )
        .unwrap(),
        ImplicitSurface::sinusoid(0.4, Vector2::new(1.3, -0.7), 0.1),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hits_lie_on_surface_with_unit_normal(origin in vec3(2.0), dir in unit(), which in 0usize..4) {
        let s = &surfaces()[which];
        let ray = Ray::new(origin + Vec3::new(0.0, 0.0, 4.0), dir).unwrap();
        match s.intersect(&ray, 0.0) {
            Ok(hit) => {
                prop_assert!(s.value(&hit.point).abs() / s.gradient(&hit.point).norm() < 1e-9);
                let n = s.normal_at(&hit.point).unwrap();
                prop_assert!((n.norm() - 1.0).abs() < 1e-12);
                prop_assert!((hit.normal.norm() - 1.0).abs() < 1e-12);
                prop_assert!(hit.cos_incidence < 0.0);
            }
            Err(SurfaceError::NoIntersection { .. } | SurfaceError::Tangential { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }
}

/// First root beyond `t_min` found by dense sampling with step `1e-3` and bisection.
fn dense_first_root(s: &ImplicitSurface, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
    let f = |t: f64| s.value(&ray.at(t));
    let step = 1e-3;
    let mut a = t_min;
    let mut fa = f(a);
    while a < t_max {
        let b = a + step;
        let fb = f(b);
        if fa == 0.0 {
            return Some(a);
        }
        if fa * fb < 0.0 {
            let (mut lo, mut hi) = (a, b);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if f(mid) * fa > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        a = b;
        fa = fb;
    }
    None
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sinusoid_roots_match_dense_oracle(
        x in -3.0f64..3.0, y in -3.0f64..3.0, z in 1.0f64..3.0,
        dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..-0.3,
        amp in 0.05f64..0.8, kx in -2.0f64..2.0, ky in -2.0f64..2.0,
    ) {
        let s = ImplicitSurface::sinusoid(amp, Vector2::new(kx, ky), 0.0);
        let ray = Ray::new(Vec3::new(x, y, z), Vec3::new(dx, dy, dz)).unwrap();
        let t_max = 30.0;
        let oracle = dense_first_root(&s, &ray, 0.0, t_max);
        match s.intersect_within(&ray, 0.0, t_max) {
            Ok(hit) => {
                let t = oracle.expect("oracle finds the root too");
                prop_assert!((hit.t - t).abs() < 1e-9, "newton {} vs oracle {t}", hit.t);
            }
            Err(SurfaceError::Tangential { .. }) => {}
            Err(e) => prop_assert!(oracle.is_none(), "{e} but oracle found {oracle:?}"),
        }
    }
}

/// A family precomposed with a diffeomorphism of the parameter plane.
struct Reparametrized<'a> {
    base: &'a RayFamily,
    amplitude: f64,
}

impl Reparametrized<'_> {
    fn map(&self, k: &Param) -> Param {
        Param::new(
            k.x + self.amplitude * (3.0 * k.y).sin(),
            k.y + self.amplitude * (2.0 * k.x).sin(),
        )
    }
}

impl Family for Reparametrized<'_> {
    fn ray(&self, k: &Param) -> Result<Ray, FamilyError> {
        self.base.ray(&self.map(k))
    }

    fn domain(&self) -> Domain {
        // Shrunk so the image stays inside the base domain.
        let d = self.base.domain;
        let m = 2.0 * self.amplitude;
        Domain::new((d.k1.0 + m, d.k1.1 - m), (d.k2.0 + m, d.k2.1 - m)).unwrap()
    }
}

/// Rigid translation of a family.
struct Translated<'a> {
    base: &'a RayFamily,
    offset: Vec3,
}

impl Family for Translated<'_> {
    fn ray(&self, k: &Param) -> Result<Ray, FamilyError> {
        let r = self.base.ray(k)?;
        Ok(Ray::new(r.origin + self.offset, r.dir).unwrap())
    }

    fn domain(&self) -> Domain {
        self.base.domain
    }
}

fn skew(domain: Domain) -> RayFamily {
    RayFamily::two_skew_lines(
        Vec3::new(0.0, 0.0, 2.0),
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(0.0, 0.0, 1.0),
        Vec3::new(0.0, 1.0, 0.0),
        domain,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rectangularity_verdict_survives_reparametrization(amplitude in 0.005f64..0.03, apex in vec3(1.0)) {
        let domain = Domain::square(0.2);
        let source = RayFamily::point_source(apex + Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.1, 0.0, -1.0), domain);
        let lines = skew(Domain::new((0.2, 0.6), (0.2, 0.6)).unwrap());
        for (base, expected) in [(&source, true), (&lines, false)] {
            let tol = 1e-6;
            let (plain, _) = is_rectangular(base, 7, tol).unwrap();
            let warped = Reparametrized { base, amplitude };
            let (after, _) = is_rectangular(&warped, 7, tol).unwrap();
            prop_assert_eq!(plain, expected);
            prop_assert_eq!(after, expected);
        }
    }

    #[test]
    fn translation_leaves_defect_unchanged(offset in vec3(10.0), k in (0.25f64..0.55, 0.25f64..0.55)) {
        let base = skew(Domain::new((0.2, 0.6), (0.2, 0.6)).unwrap());
        let moved = Translated { base: &base, offset };
        let k = Param::new(k.0, k.1);
        let h = 1e-3;
        let d0 = defect_richardson(&base, &k, h).unwrap().extrapolated;
        let d1 = defect_richardson(&moved, &k, h).unwrap().extrapolated;
        prop_assert!((d0 - d1).abs() < 1e-10, "{d0} vs {d1}");
    }

    #[test]
    fn refraction_scales_defect_by_index_ratio(
        n_in in 1.0f64..1.8, n_out in 1.0f64..1.8,
        k in (-0.2f64..0.2, -0.2f64..0.2),
        curved in any::<bool>(),
    ) {
        prop_assume!((n_in - n_out).abs() > 0.05);
        let base = skew(Domain::square(0.3));
        let surface = if curved {
            ImplicitSurface::sphere(Vec3::new(0.0, 0.0, -3.0), 3.0).unwrap()
        } else {
            ImplicitSurface::plane(Vec3::new(0.1, 0.0, 1.0), 0.0).unwrap()
        };
        let system = OpticalSystem::new(n_in, vec![Interface::refract(surface, n_in, n_out)]).unwrap();
        let out = transform_family(&base, &system);
        let k = Param::new(k.0, k.1);
        let h = 1e-5;
        let before = defect(&base, &k, h).unwrap();
        let after = defect(&out, &k, h).unwrap();
        prop_assert!((n_out * after - n_in * before).abs() < 1e-6, "{} vs {}", n_out * after, n_in * before);
    }

    #[test]
    fn phase_shifts_by_a_constant_with_base_point(k0 in (-0.1f64..0.1, -0.1f64..0.1)) {
        let mirror = ImplicitSurface::sphere(Vec3::new(0.0, 0.0, -6.0), 5.0).unwrap();
        let system = OpticalSystem::new(1.0, vec![Interface::reflect(mirror, 1.0)]).unwrap();
        let base = RayFamily::point_source(Vec3::new(0.2, 0.1, 4.0), Vec3::new(0.0, 0.0, -1.0), Domain::square(0.15));
        let family = transform_family(&base, &system);
        let a = reconstruct_wavefront(&family, &Param::zeros(), 0.0, 7).unwrap();
        let b = reconstruct_wavefront(&family, &Param::new(k0.0, k0.1), 0.0, 7).unwrap();
        let diffs: Vec<f64> = a.phase.iter().zip(&b.phase).map(|(x, y)| x - y).collect();
        let spread = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - diffs.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(spread < 1e-7, "{spread}");
        prop_assert!(a.orthogonality_residual(&family).unwrap() < 1e-6);
    }
}
