use nalgebra::DMatrix;
use num_complex::Complex64 as C;
use phonon_kinetics::lattice::{DensityMatrixGrid, LatticeSpec};
use phonon_kinetics::quadrature::gauss_legendre_on;
use phonon_kinetics::wigner::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// psi(x) = pi^{-d/4} e^{-|x|^2/2} has psi^(p) = pi^{-d/4} e^{-|p|^2/2}.
fn gaussian_state(dim: usize, h: f64, m: i32) -> PureStateGrid {
    let lattice = LatticeSpec::box_cutoff(dim, (2.0 * PI).sqrt() / h, m);
    PureStateGrid::from_fn(lattice, |p| {
        let r2: f64 = p.iter().map(|x| x * x).sum();
        C::new(PI.powf(-0.25 * dim as f64) * (-0.5 * r2).exp(), 0.0)
    })
}

fn random_density(lattice: &LatticeSpec, rng: &mut ChaCha8Rng) -> DensityMatrixGrid {
    let n = lattice.len();
    let a = DMatrix::from_fn(n, n, |_, _| C::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
    let mut rho = &a * a.adjoint();
    // localize in momentum
    for i in 0..n {
        for j in 0..n {
            let pi = lattice.momentum(i)[0];
            let pj = lattice.momentum(j)[0];
            rho[(i, j)] *= (-0.15 * (pi * pi + pj * pj)).exp();
        }
    }
    let tr = rho.trace();
    DensityMatrixGrid::new(lattice.clone(), rho / tr)
}

fn random_test_function(rng: &mut ChaCha8Rng) -> TestFunction {
    let terms = (0..rng.random_range(1..=3))
        .map(|_| GaussianTerm {
            coeff: rng.random_range(-1.0..1.0),
            x_center: vec![rng.random_range(-1.0..1.0)],
            x_width: rng.random_range(0.5..1.5),
            powers: vec![rng.random_range(0..=2)],
            v_center: vec![rng.random_range(-1.0..1.0)],
            v_width: if rng.random::<bool>() { Some(rng.random_range(0.5..2.0)) } else { None },
        })
        .collect();
    TestFunction { terms }
}

#[test]
fn gaussian_closed_form_in_three_dimensions() {
    let psi = gaussian_state(3, 0.75, 9);
    let w = wigner_transform(&psi).unwrap();
    let exact = |x: &[f64], v: &[f64]| {
        let r2: f64 = x.iter().chain(v).map(|a| a * a).sum();
        (2.0 / PI).powf(1.5) * (-r2).exp()
    };
    let w00 = w.value(&[0.0; 3], &[0.0; 3]).unwrap();
    assert!((w00 - 0.50795).abs() < 1e-5);
    assert!((w00 - (2.0 / PI).powf(1.5)).abs() < 1e-6);
    for (x, v) in [
        ([0.3, -0.2, 0.1], [0.375, 0.0, -0.75]),
        ([0.0, 0.5, 0.0], [0.0, 0.375, 0.375]),
        ([-0.4, 0.2, 0.7], [-0.75, 1.125, 0.0]),
    ] {
        let z = w.value_complex(&x, &v).unwrap();
        assert!((z.re - exact(&x, &v)).abs() < 1e-6, "{x:?} {v:?}: {} vs {}", z.re, exact(&x, &v));
        assert!(z.im.abs() < 1e-12);
    }
}

#[test]
fn grid_mismatch_and_hermiticity() {
    let psi = gaussian_state(1, 0.5, 10);
    let w = wigner_transform(&psi).unwrap();
    assert!(matches!(w.hat(&[0.3], &[0.0]), Err(WignerError::GridMismatch(_))));
    // v = h/2 needs odd multiples of h for xi
    assert!(matches!(w.hat(&[1.0], &[0.25]), Err(WignerError::GridMismatch(_))));
    assert!(w.hat(&[0.5], &[0.25]).is_ok());
    let want = psi.amp[psi.lattice.find(&[1]).unwrap()] * psi.amp[psi.lattice.find(&[0]).unwrap()].conj();
    assert_eq!(w.hat(&[0.5], &[0.25]).unwrap(), want);

    let lattice = LatticeSpec::box_cutoff(1, 3.0, 2);
    let mut rho = DMatrix::<C>::identity(5, 5) * C::new(0.2, 0.0);
    rho[(0, 1)] = C::new(0.0, 0.1);
    let bad = DensityMatrixGrid::new(lattice, rho);
    assert!(matches!(wigner_transform(&bad), Err(WignerError::NotHermitian(_))));
}

#[test]
fn wigner_is_real_and_marginals_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lattice = LatticeSpec::box_cutoff(1, 3.5, 6);
    let gamma = random_density(&lattice, &mut rng);
    let w = wigner_transform(&gamma).unwrap();
    for v2 in w.half_grid() {
        let v = w.half_grid_momentum(&v2);
        for x in [-1.3, 0.0, 0.4, 2.2] {
            assert!(w.value_complex(&[x], &v).unwrap().im.abs() < 1e-12);
        }
        // int over the box of W(., v): trapezoid is exact for the trigonometric polynomial
        let side = (2.0 * PI).sqrt() * lattice.box_size();
        let n = 256;
        let integral: f64 = (0..n)
            .map(|k| w.value(&[-0.5 * side + side * k as f64 / n as f64], &v).unwrap())
            .sum::<f64>()
            * side
            / n as f64
            / (2.0 * PI).sqrt();
        let want = if v2[0] % 2 == 0 {
            let i = lattice.find(&[v2[0] / 2]).unwrap();
            2.0 * gamma.kernel(i, i).re
        } else {
            0.0
        };
        assert!((integral - want).abs() < 1e-10, "v = {v:?}: {integral} vs {want}");
    }
    for x in [-2.0, -0.3, 0.0, 1.1] {
        let a = w.position_marginal(&[x]);
        let b = position_density(&gamma, &[x]);
        assert!((a - b).abs() < 1e-12);
    }
    assert!((trace(&gamma) - 1.0).abs() < 1e-12);
}

#[test]
fn rescale_identity_group_law_and_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lattice = LatticeSpec::box_cutoff(1, 3.0, 5);
    let gamma = random_density(&lattice, &mut rng);
    let w = wigner_transform(&gamma).unwrap();
    let one = rescale(&w, 1.0).unwrap();
    let v = [0.5 * lattice.spacing()];
    for x in [-0.7, 0.2, 1.9] {
        assert_eq!(one.value(&[x], &v).unwrap(), w.value(&[x], &v).unwrap());
        let nested = rescale(&rescale(&w, 0.5).unwrap(), 0.4).unwrap();
        let direct = rescale(&w, 0.2).unwrap();
        let a = nested.value(&[x], &v).unwrap();
        let b = direct.value(&[x], &v).unwrap();
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    assert!(rescale(&w, 0.0).is_err());
    assert!(rescale(&w, 1.5).is_err());

    // mass: integral of the position marginal over one (rescaled) period
    let side = (2.0 * PI).sqrt() * lattice.box_size();
    for eps in [1.0, 0.5, 0.25] {
        let we = rescale(&w, eps).unwrap();
        let n = 128;
        let period = eps * side;
        let m: f64 = (0..n)
            .map(|k| we.position_marginal(&[-0.5 * period + period * k as f64 / n as f64]))
            .sum::<f64>()
            * period
            / n as f64
            / (2.0 * PI).sqrt();
        assert!((m - 1.0).abs() < 1e-10, "eps = {eps}: {m}");
    }
}

#[test]
fn test_function_fourier_matches_quadrature() {
    let term = GaussianTerm {
        coeff: 0.7,
        x_center: vec![0.4, -0.3],
        x_width: 0.8,
        powers: vec![2, 1],
        v_center: vec![0.1, 0.2],
        v_width: Some(1.3),
    };
    let j = TestFunction::single(term);
    let v = [0.3, -0.5];
    for xi in [[0.0, 0.0], [1.2, -0.4], [-2.5, 3.0]] {
        let (nodes, weights) = gauss_legendre_on(200, -9.0, 9.0);
        let mut s = C::new(0.0, 0.0);
        for (x1, w1) in nodes.iter().zip(&weights) {
            for (x2, w2) in nodes.iter().zip(&weights) {
                let ph = C::from_polar(1.0, -(xi[0] * x1 + xi[1] * x2));
                s += ph * j.value(&[*x1, *x2], &v) * (w1 * w2);
            }
        }
        s /= 2.0 * PI;
        assert!((s - j.fourier(&xi, &v)).norm() < 1e-12, "{xi:?}");
    }
}

#[test]
fn pairing_identity_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let lattice = LatticeSpec::box_cutoff(1, rng.random_range(2.5..4.5), rng.random_range(4..8));
        let gamma = random_density(&lattice, &mut rng);
        let j = random_test_function(&mut rng);
        let eps = rng.random_range(0.3..1.0);
        let r = check_pairing(&gamma, &j, eps, 1e-9).unwrap();
        assert!(r.discrepancy < 1e-9);
        assert!(r.imaginary < 1e-9);
    }
}

#[test]
fn gaussian_pairing_closed_form() {
    let psi = gaussian_state(1, 0.4, 20);
    let (s, wv, eps) = (1.3, 0.9, 0.6);
    let j = TestFunction::single(GaussianTerm {
        coeff: 1.0,
        x_center: vec![0.0],
        x_width: s,
        powers: vec![],
        v_center: vec![0.0],
        v_width: Some(wv),
    });
    let want = (2.0 / PI).sqrt() / eps / (1.0 / (s * s) + 2.0 / (eps * eps)).sqrt() / (1.0 / (wv * wv) + 2.0).sqrt();
    let tr = trace_pairing(&psi, &j, eps);
    assert!((tr.re - want).abs() < 1e-6, "{} vs {want}", tr.re);
    let w = rescale(&wigner_transform(&psi).unwrap(), eps).unwrap();
    assert!((pair(&w, &j).unwrap().re - want).abs() < 1e-6);
}

#[test]
fn mollified_constant_and_momentum_only_observables() {
    // packet of width 1 on a box of side ~100
    let psi = gaussian_state(1, 0.025, 240);
    let tr = trace(&psi);
    let one = TestFunction::mollified_one(1, 30.0);
    let r = trace_pairing(&psi, &one, 1.0).re;
    // 1 - e^{-x^2/(2 s^2)} ~ x^2 / (2 s^2), <x^2> = tr / 2
    assert!((r - tr).abs() < 1e-3 * tr, "{r} vs {tr}");

    let g = |p: f64| (-0.5 * (p - 0.3) * (p - 0.3) / 0.64).exp();
    let jg = TestFunction::single(GaussianTerm {
        coeff: 1.0,
        x_center: vec![0.0],
        x_width: 30.0,
        powers: vec![],
        v_center: vec![0.3],
        v_width: Some(0.8),
    });
    let lat = &psi.lattice;
    let want: f64 = lat.measure() * (0..lat.len()).map(|i| g(lat.momentum(i)[0]) * psi.amp[i].norm_sqr()).sum::<f64>();
    let got = trace_pairing(&psi, &jg, 1.0).re;
    assert!((got - want).abs() < 1e-3 * want);
}

#[test]
fn operator_norm_bounded_by_test_function_norm() {
    let lattice = LatticeSpec::box_cutoff(1, 4.0, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let j = random_test_function(&mut rng);
        for eps in [1.0, 0.5, 0.25] {
            let r = operator_norm_check(&j, eps, &lattice, 1e6).unwrap();
            assert!(r.operator_norm_sq <= r.grid_norm * r.grid_norm * (1.0 + 1e-9), "{r:?}");
        }
        // the grid norm approaches the continuum norm when the lattice resolves J^_eps
        let fine = LatticeSpec::box_cutoff(1, 60.0, 10);
        let g = j.jeps_norm_grid(&fine, 1.0);
        let c = j.jeps_norm();
        assert!((g - c).abs() < 1e-2 * c, "{g} vs {c}");
    }
    let j = random_test_function(&mut rng);
    assert!(matches!(operator_norm_check(&j, 1.0, &lattice, 1e-6), Err(WignerError::NormUnbounded { .. })));
}

fn wkb(curvature: f64, xi0: f64) -> WkbState {
    WkbState {
        amplitude: 1.0,
        center: vec![0.2],
        width: 1.0,
        xi0: vec![xi0],
        curvature,
    }
}

#[test]
fn wkb_without_phase_reproduces_density() {
    let state = wkb(0.0, 0.0);
    let j = TestFunction::single(GaussianTerm {
        coeff: 1.0,
        x_center: vec![0.5],
        x_width: 0.7,
        powers: vec![1],
        v_center: vec![],
        v_width: None,
    });
    let r = wkb_wigner_limit_check(&state, &j, &[0.2, 0.1, 0.05]).unwrap();
    for e in &r.entries {
        assert!((e.norm2 - r.mass).abs() < 1e-10);
        assert!(e.defect < 1e-10, "{e:?}");
    }
}

#[test]
fn wkb_plane_wave_concentrates_at_phase_gradient() {
    let state = wkb(0.0, 1.5);
    let at = |v0: f64| {
        TestFunction::single(GaussianTerm {
            coeff: 1.0,
            x_center: vec![0.0],
            x_width: 1.5,
            powers: vec![],
            v_center: vec![v0],
            v_width: Some(0.3),
        })
    };
    let on = wkb_wigner_limit_check(&state, &at(1.5), &[0.2, 0.1, 0.05]).unwrap();
    let off = wkb_wigner_limit_check(&state, &at(0.5), &[0.2, 0.1, 0.05]).unwrap();
    assert!(on.monotone);
    assert!(on.entries[2].defect < 0.01 * on.limit);
    assert!(off.limit < 1e-2 * on.limit);
    assert!(off.entries[2].pairing < 1e-2 * on.entries[2].pairing);
}

#[test]
fn wkb_defect_decreases_with_chirp() {
    let state = wkb(0.5, 0.8);
    let j = TestFunction {
        terms: vec![
            GaussianTerm {
                coeff: 1.0,
                x_center: vec![0.0],
                x_width: 1.2,
                powers: vec![1],
                v_center: vec![1.0],
                v_width: Some(0.6),
            },
            GaussianTerm {
                coeff: 0.5,
                x_center: vec![0.5],
                x_width: 0.8,
                powers: vec![],
                v_center: vec![0.5],
                v_width: Some(1.0),
            },
        ],
    };
    let r = wkb_wigner_limit_check(&state, &j, &[0.2, 0.1, 0.05]).unwrap();
    assert!(r.monotone, "{r:?}");
    for e in &r.entries {
        assert!((e.norm2 - r.mass).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn wigner_real_for_hermitian_states(seed in 0u64..1000, x in -3.0f64..3.0, k in -8i32..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lattice = LatticeSpec::box_cutoff(1, 3.0, 4);
        let gamma = random_density(&lattice, &mut rng);
        let w = wigner_transform(&gamma).unwrap();
        let v = [0.5 * k as f64 * lattice.spacing()];
        prop_assert!(w.value_complex(&[x], &v).unwrap().im.abs() < 1e-12);
    }

    #[test]
    fn rescale_preserves_position_mass_pointwise_scaling(eps in 0.05f64..1.0, x in -2.0f64..2.0) {
        let psi = gaussian_state(1, 0.5, 12);
        let w = wigner_transform(&psi).unwrap();
        let we = rescale(&w, eps).unwrap();
        let v = [0.25];
        let a = we.value(&[x], &v).unwrap();
        let b = w.value(&[x / eps], &v).unwrap() / eps;
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}
