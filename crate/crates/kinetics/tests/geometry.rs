use phonon_kinetics::geometry::*;
use phonon_kinetics::model::Model;
use phonon_kinetics::rng;
use phonon_kinetics::vecmath::unit_ball_volume;
use proptest::prelude::*;
use rand::Rng;
use std::f64::consts::PI;

fn unit_sphere_psi(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum::<f64>() - 1.0
}

/// Mollified-delta Monte Carlo over the cube [-2, 2]^3, independent of the
/// polar quadrature.
fn mollified_mc(f: &dyn Fn(&[f64]) -> f64, psi: &dyn Fn(&[f64]) -> f64, h: f64, n: usize, seed: u64) -> (f64, f64) {
    let mut r = rng::stream(seed, 99);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let p: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let x = psi(&p);
        let v = f(&p) * (-0.5 * (x / h).powi(2)).exp() / ((2.0 * PI).sqrt() * h) * 64.0;
        s += v;
        s2 += v * v;
    }
    let m = s / n as f64;
    let se = ((s2 / n as f64 - m * m) / n as f64).sqrt();
    let norm = (2.0 * PI).powf(1.5);
    (m / norm, se / norm)
}

#[test]
fn unit_sphere_surface_integral() {
    let dom = Domain::cube(3, 2.0);
    let est = surface_delta_integral(|_: &[f64]| 1.0, unit_sphere_psi, &dom, &SurfaceResolution::default()).unwrap();
    // Lebesgue answer: area 4 pi over |grad psi| = 2
    let exact = 2.0 * PI / (2.0 * PI).powf(1.5);
    assert!((exact - 0.398942).abs() < 1e-6);
    assert!((est.value - exact).abs() < 1e-4, "{est:?}");

    let rays = SurfaceResolution {
        method: SurfaceMethod::RayRoots,
        ..SurfaceResolution::default()
    };
    let r = surface_delta_integral(|_: &[f64]| 1.0, unit_sphere_psi, &dom, &rays).unwrap();
    assert!((r.value - exact).abs() < 1e-8);

    let tri = triangulated_sphere_integral(&|_| 1.0, &|p| 2.0 * p.iter().map(|x| x * x).sum::<f64>().sqrt(), [0.0; 3], 1.0, 5);
    assert!((tri - exact).abs() < 1e-3, "{tri}");

    let (mc, se) = mollified_mc(&|_| 1.0, &unit_sphere_psi, 0.02, 400_000, 1);
    // the h = 0.02 mollifier bias is O(h^2)
    assert!((mc - exact).abs() < 4.0 * se + 1e-3, "{mc} +- {se}");
}

#[test]
fn zero_integrand_and_empty_level_set() {
    let dom = Domain::cube(3, 2.0);
    let z = surface_delta_integral(|_: &[f64]| 0.0, unit_sphere_psi, &dom, &SurfaceResolution::default()).unwrap();
    assert_eq!(z.value, 0.0);
    let empty = surface_delta_integral(
        |_: &[f64]| 1.0,
        |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>() + 1.0,
        &dom,
        &SurfaceResolution {
            method: SurfaceMethod::RayRoots,
            ..SurfaceResolution::default()
        },
    )
    .unwrap();
    assert_eq!(empty.value, 0.0);
}

#[test]
fn even_integrand_matches_half_domain() {
    let f = |p: &[f64]| (-(p[0] * p[0]) - 0.5 * p[1] * p[1]).exp() * (1.0 + p[2] * p[2]);
    let psi = |p: &[f64]| 0.5 * p[0] * p[0] + p[1] * p[1] + 0.8 * p[2] * p[2] - 1.0;
    let res = SurfaceResolution::default();
    let full = surface_delta_integral(f, psi, &Domain::cube(3, 2.5), &res).unwrap();
    let half_dom = Domain {
        lo: vec![0.0, -2.5, -2.5],
        hi: vec![2.5, 2.5, 2.5],
    };
    let half = surface_delta_integral(f, psi, &half_dom, &SurfaceResolution {
        center: Some(vec![1e-9, 0.0, 0.0]),
        method: SurfaceMethod::RayRoots,
        n_theta: 64,
        n_phi: 128,
        ..res
    });
    // a half-space box puts the polar origin on its face; ray roots handle it
    let half = half.unwrap();
    assert!((2.0 * half.value - full.value).abs() < 2e-3 * full.value, "{} vs {}", 2.0 * half.value, full.value);
}

#[test]
fn degenerate_gradient_is_reported() {
    // psi = |p|^2 has a critical point on its zero set
    let err = surface_delta_integral(
        |_: &[f64]| 1.0,
        |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>(),
        &Domain::cube(3, 1.0),
        &SurfaceResolution::default(),
    );
    assert!(matches!(err, Err(GeometryError::DegenerateGradient { .. })), "{err:?}");
}

#[test]
fn slab_volume_examples() {
    let model = Model::default();
    // Phi_+(0, k) = |k|^2 / 2 + 1 ranges over [1, 1.005] on B(0, 0.1)
    let ball = Ball {
        center: vec![0.0; 3],
        radius: 0.1,
    };
    let all = LevelSetSlab {
        p: vec![0.0; 3],
        sigma: 1,
        theta: 1.0,
        delta: 1.0,
    };
    let v = slab_volume(&model, &all, &ball, 10_000, 3);
    let exact = 0.1f64.powi(3) * unit_ball_volume(3) / (2.0 * PI).powf(1.5);
    assert!((v.value - exact).abs() < 1e-15);
    assert_eq!(v.stderr, 0.0);
    assert!((NormalizedMeasure::new(3).ball_volume(0.1) - exact).abs() < 1e-18);

    let empty = LevelSetSlab {
        theta: 0.5,
        delta: 0.1,
        ..all.clone()
    };
    assert_eq!(slab_volume(&model, &empty, &ball, 10_000, 3).value, 0.0);

    // shell |k| = 1 of width 0.02 through a ball of radius 0.1 centered on it:
    // volume ~ 2 delta pi rho^2 (flat-slab approximation), bound C delta rho^(d-1)
    let shell = LevelSetSlab {
        p: vec![0.0; 3],
        sigma: 1,
        theta: 1.5,
        delta: 0.01,
    };
    let on = Ball {
        center: vec![1.0, 0.0, 0.0],
        radius: 0.1,
    };
    let v = slab_volume(&model, &shell, &on, 400_000, 4);
    let flat = 2.0 * 0.01 * PI * 0.01 / (2.0 * PI).powf(1.5);
    assert!((v.value - flat).abs() < 4.0 * v.stderr + 0.02 * flat, "{v:?} vs {flat}");
    let c_tilde = v.value / (0.01 * 0.1f64.powi(2));
    assert!(c_tilde.is_finite() && c_tilde < 1.0, "{c_tilde}");
}

fn transversal_pair(delta1: f64, delta2: f64) -> (LevelSetSlab, LevelSetSlab) {
    // spheres of radius 1 about (-1, 0, 0) and radius sqrt 2 about (1, 0, 0)
    (
        LevelSetSlab {
            p: vec![1.0, 0.0, 0.0],
            sigma: 1,
            theta: 1.5,
            delta: delta1,
        },
        LevelSetSlab {
            p: vec![-1.0, 0.0, 0.0],
            sigma: 1,
            theta: 2.0,
            delta: delta2,
        },
    )
}

#[test]
fn transversality_rejects_equal_momenta() {
    let model = Model::default();
    let a = transversal_pair(0.01, 0.01).0;
    let err = transversality_probe(&model, &a, &a.clone(), 0.1, 1000, 1);
    assert!(matches!(err, Err(GeometryError::InvalidArgument(_))));
}

#[test]
fn transversality_tangent_shells_have_finite_ratio() {
    // p1 = -p2 with equal energies: the two unit spheres touch at k = 0
    let model = Model::default();
    let slab = |p0: f64, delta: f64| LevelSetSlab {
        p: vec![p0, 0.0, 0.0],
        sigma: 1,
        theta: 1.5,
        delta,
    };
    let r1 = transversality_probe(&model, &slab(1.0, 0.01), &slab(-1.0, 0.01), 0.1, 200_000, 5).unwrap();
    let r2 = transversality_probe(&model, &slab(1.0, 0.005), &slab(-1.0, 0.005), 0.1, 200_000, 5).unwrap();
    assert!(r1.candidates > 0);
    assert!(r1.ratio.value.is_finite() && r1.ratio.value > 0.0);
    assert!(r2.ratio.value.is_finite() && r2.ratio.value > 0.0);
    // at a tangency the slab intersection scales like delta^(3/2), so the
    // ratio grows by about sqrt 2 under halving rather than staying put
    let growth = r2.ratio.value / r1.ratio.value;
    assert!(growth > 1.0 && growth < 2.0, "{growth}");
}

#[test]
fn transversal_shells_ratio_is_stable_and_linear() {
    let model = Model::default();
    let (a, b) = transversal_pair(0.01, 0.01);
    let r1 = transversality_probe(&model, &a, &b, 0.1, 400_000, 6).unwrap();
    let (a2, b2) = transversal_pair(0.005, 0.005);
    let r2 = transversality_probe(&model, &a2, &b2, 0.1, 400_000, 6).unwrap();
    assert!(r1.candidates > 0);
    let diff = (r1.ratio.value - r2.ratio.value).abs();
    let se = (r1.ratio.stderr.powi(2) + r2.ratio.stderr.powi(2)).sqrt();
    assert!(diff < 4.0 * se + 0.1 * r1.ratio.value, "{r1:?} {r2:?}");

    // doubling delta1 doubles the intersection volume in a fixed ball
    let q = r1.worst_q.clone();
    let ball = Ball { center: q, radius: 0.1 };
    let (a, b) = transversal_pair(0.01, 0.01);
    let (a_wide, _) = transversal_pair(0.02, 0.01);
    let v1 = intersection_volume(&model, &a, &b, &ball, 1_000_000, 7);
    let v2 = intersection_volume(&model, &a_wide, &b, &ball, 1_000_000, 8);
    let se = (4.0 * v1.stderr.powi(2) + v2.stderr.powi(2)).sqrt();
    assert!((v2.value - 2.0 * v1.value).abs() < 3.0 * se, "{v1:?} {v2:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ray_roots_on_spheres(radius in 0.2f64..3.0) {
        let dom = Domain::cube(3, 4.0);
        let rays = SurfaceResolution { method: SurfaceMethod::RayRoots, n_theta: 16, n_phi: 32, ..SurfaceResolution::default() };
        let psi = move |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>() - radius * radius;
        let est = surface_delta_integral(|_: &[f64]| 1.0, psi, &dom, &rays).unwrap();
        // area 4 pi r^2 over |grad psi| = 2 r
        let exact = 2.0 * PI * radius / (2.0 * PI).powf(1.5);
        prop_assert!((est.value - exact).abs() < 1e-8 * exact.max(1.0));
    }

    #[test]
    fn slab_volume_never_exceeds_ball(theta in 0.5f64..3.0, delta in 0.001f64..0.2, seed in 0u64..100) {
        let model = Model::default();
        let ball = Ball { center: vec![0.8, 0.1, -0.3], radius: 0.2 };
        let slab = LevelSetSlab { p: vec![0.0; 3], sigma: 1, theta, delta };
        let v = slab_volume(&model, &slab, &ball, 2000, seed);
        prop_assert!(v.value >= 0.0);
        prop_assert!(v.value <= NormalizedMeasure::new(3).ball_volume(0.2) * (1.0 + 1e-12));
    }
}
