use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C;
use phonon_kinetics::lattice::{DensityMatrixGrid, LatticeSpec};
use phonon_kinetics::model::{Coupling, Dispersion, Model, ModelConfig};
use phonon_kinetics::quantum::*;
use proptest::prelude::*;
use std::f64::consts::PI;

fn model_1d(lambda: f64, beta: f64) -> Model {
    Model::new(ModelConfig {
        dimension: 1,
        beta,
        lambda,
        ..ModelConfig::default()
    })
    .unwrap()
}

/// Spacing 1.
fn unit_lattice(points: &[i32]) -> LatticeSpec {
    LatticeSpec::from_indices(1, (2.0 * PI).sqrt(), points.iter().map(|&j| vec![j]).collect())
}

fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

fn mixed_electron_state(lattice: &LatticeSpec) -> DensityMatrixGrid {
    let n = lattice.len();
    let amp: Vec<C> = (0..n).map(|i| C::from_polar(1.0 + 0.3 * i as f64, 0.7 * i as f64)).collect();
    let pure = DensityMatrixGrid::pure(lattice.clone(), &amp);
    let mut rho = pure.rho * c(0.6, 0.0);
    for i in 0..n {
        rho[(i, i)] += c(0.4 / n as f64, 0.0);
    }
    DensityMatrixGrid::new(lattice.clone(), rho)
}

#[test]
fn truncated_gibbs_occupations() {
    let x = (-1.0f64).exp();
    // closed-form geometric sums
    let z = (1.0 - x.powi(5)) / (1.0 - x);
    let num = x * (1.0 - 5.0 * x.powi(4) + 4.0 * x.powi(5)) / (1.0 - x).powi(2);
    assert!((truncated_occupation(x, 4) - num / z).abs() < 1e-14);
    assert!((truncated_occupation(x, 4) - 0.548058).abs() < 1e-6);

    let full = 1.0 / (1.0f64.exp() - 1.0);
    let gap8 = full - truncated_occupation(x, 8);
    // tail of the geometric series: N - N_trunc = (n+1) x^{n+1} / (1 - x^{n+1})
    let tail = 9.0 * x.powi(9) / (1.0 - x.powi(9));
    assert!((gap8 - tail).abs() < 1e-12);
    assert!(full - truncated_occupation(x, 9) < 1e-3);

    let model = model_1d(1.0, 1.0);
    let lattice = unit_lattice(&[0, 1]);
    let vac = gibbs_phonon_state(&model, &lattice, &FockTruncation::new(vec![vec![0], vec![1]], 0)).unwrap();
    assert_eq!(vac.probs, vec![1.0]);
    let g = gibbs_phonon_state(&model, &lattice, &FockTruncation::new(vec![vec![0], vec![1]], 4)).unwrap();
    assert!((g.probs.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    for m in 0..2 {
        assert!((g.mean_occupation(m) - 0.548058).abs() < 1e-6);
        assert!((g.mean_anti_occupation(m) - truncated_anti_occupation(x, 4)).abs() < 1e-14);
    }
}

#[test]
fn unstable_bath_is_rejected() {
    let model = Model::new(ModelConfig {
        dimension: 1,
        mu: 2.0,
        ..ModelConfig::default()
    })
    .unwrap();
    let lattice = unit_lattice(&[0]);
    let err = gibbs_phonon_state(&model, &lattice, &FockTruncation::new(vec![vec![0]], 2)).unwrap_err();
    assert!(matches!(err, QuantumError::BathUnstable(_)));
}

#[test]
fn dimension_cap_is_enforced() {
    let model = model_1d(1.0, 1.0);
    let lattice = LatticeSpec::box_cutoff(1, 5.0, 6);
    let mut trunc = FockTruncation::all_modes(&lattice, 3);
    let err = build_hamiltonian(&model, &lattice, &trunc).unwrap_err();
    assert!(matches!(err, QuantumError::DimensionCap { .. }));
    trunc.n_tot = Some(2);
    assert!(build_hamiltonian(&model, &lattice, &trunc).is_ok());
}

#[test]
fn hand_assembled_eight_by_eight() {
    let lambda = 0.3;
    let model = model_1d(lambda, 1.0);
    let lattice = unit_lattice(&[0, 1]);
    let trunc = FockTruncation::new(vec![vec![1], vec![-1]], 1);
    let h = build_hamiltonian(&model, &lattice, &trunc).unwrap();
    assert_eq!(h.dim(), 8);

    // index = 4 e + 2 n_{+1} + n_{-1}; p = 0, 1; e(p) = p^2 / 2; omega = 1
    let cc = lambda * (2.0 * PI).powf(-0.25) * (-0.5f64).exp();
    let mut want = DMatrix::<C>::zeros(8, 8);
    for (e, ep) in [(0usize, 0.0), (1, 0.5)] {
        for np in 0..2 {
            for nm in 0..2 {
                let i = 4 * e + 2 * np + nm;
                want[(i, i)] = c(ep + (np + nm) as f64, 0.0);
            }
        }
    }
    // a_{+1}^dagger moves p = 1 to p = 0, a_{-1}^dagger moves p = 0 to p = 1
    for (to, from) in [(2, 4), (3, 5), (5, 0), (7, 2)] {
        want[(to, from)] = c(0.0, cc);
        want[(from, to)] = c(0.0, -cc);
    }
    let got = h.dense();
    for i in 0..8 {
        for j in 0..8 {
            assert!((got[(i, j)] - want[(i, j)]).norm() < 1e-15, "entry ({i},{j}): {} vs {}", got[(i, j)], want[(i, j)]);
        }
    }
    assert_eq!(h.hermiticity_defect(), 0.0);
}

#[test]
fn decoupled_spectrum_and_free_evolution() {
    let model = model_1d(0.0, 1.0);
    let lattice = LatticeSpec::box_cutoff(1, 4.0, 2);
    let trunc = FockTruncation::new(vec![vec![-1], vec![1], vec![2]], 2);
    let h = build_hamiltonian(&model, &lattice, &trunc).unwrap();
    assert!(h.coupling_rows().iter().all(|r| r.is_empty()));

    let mut want = Vec::new();
    for i in 0..lattice.len() {
        let ep = model.e(&lattice.momentum(i));
        for a in 0..3 {
            for b in 0..3 {
                for d in 0..3 {
                    let w = [a, b, d]
                        .iter()
                        .zip(&trunc.modes)
                        .map(|(&n, k)| n as f64 * model.omega(&lattice.momentum_of(k)))
                        .sum::<f64>();
                    want.push(ep + w);
                }
            }
        }
    }
    want.sort_by(|a, b| a.total_cmp(b));
    let ev = Evolver::new(&h, EvolveOptions::default());
    let mut got = ev.spectrum().unwrap().to_vec();
    got.sort_by(|a, b| a.total_cmp(b));
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }

    let gamma = mixed_electron_state(&lattice);
    let bath = gibbs_phonon_state(&model, &lattice, &trunc).unwrap();
    let g0 = product_state(&gamma, &bath, &h.basis).unwrap();
    let same = ev.evolve(&g0, 0.0).unwrap().to_dense();
    assert!((same - g0.to_dense()).iter().all(|z| z.norm() < 1e-13));

    let t = 1.7;
    let gt = ev.evolve(&g0, t).unwrap();
    let ge = partial_trace_phonons(&gt, &h);
    for i in 0..lattice.len() {
        for j in 0..lattice.len() {
            let de = model.e(&lattice.momentum(i)) - model.e(&lattice.momentum(j));
            let want = gamma.rho[(i, j)] * C::from_polar(1.0, -t * de);
            assert!((ge.rho[(i, j)] - want).norm() < 1e-12);
        }
    }
    // phonon marginal unchanged
    let d = gt.to_dense();
    let nph = h.basis.phonons.len();
    for ph in 0..nph {
        let p: f64 = (0..lattice.len()).map(|e| d[(e * nph + ph, e * nph + ph)].re).sum();
        assert!((p - bath.probs[ph]).abs() < 1e-12);
    }
}

fn coupled_setup() -> (Model, LatticeSpec, FockTruncation) {
    let model = model_1d(0.8, 1.0);
    let lattice = LatticeSpec::box_cutoff(1, 3.0, 2);
    let mut trunc = FockTruncation::all_modes(&lattice, 2);
    trunc.n_tot = Some(3);
    (model, lattice, trunc)
}

#[test]
fn unitary_invariants_dense() {
    let (model, lattice, trunc) = coupled_setup();
    let h = build_hamiltonian(&model, &lattice, &trunc).unwrap();
    assert!(h.dim() > 100);
    let bath = gibbs_phonon_state(&model, &lattice, &trunc).unwrap();
    let g0 = product_state(&mixed_electron_state(&lattice), &bath, &h.basis).unwrap();
    let ev = Evolver::new(&h, EvolveOptions::default());
    let e0 = g0.energy(&h);
    let spec0 = g0.eigenvalues();
    assert!(spec0[0] > -1e-10);
    for step in 0..=10 {
        let gt = ev.evolve(&g0, step as f64).unwrap();
        assert!((gt.trace() - 1.0).abs() < 1e-10);
        assert!((gt.energy(&h) - e0).abs() < 1e-10);
        assert!(gt.hermiticity_defect() < 1e-10);
        if step % 5 == 0 {
            for (a, b) in gt.eigenvalues().iter().zip(&spec0) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let ge = partial_trace_phonons(&gt, &h);
        assert!((ge.trace().re - 1.0).abs() < 1e-10);
        assert!(ge.min_eigenvalue() > -1e-10);
    }
}

#[test]
fn krylov_matches_eigendecomposition() {
    let (model, lattice, trunc) = coupled_setup();
    let h = build_hamiltonian(&model, &lattice, &trunc).unwrap();
    let n = h.dim();
    let v = DVector::from_fn(n, |i, _| C::from_polar(1.0 / (1.0 + i as f64), 0.37 * i as f64));
    let state = CoupledState::pure(v);
    let dense = Evolver::new(&h, EvolveOptions::default());
    let krylov = Evolver::new(
        &h,
        EvolveOptions {
            dense_limit: 0,
            ..EvolveOptions::default()
        },
    );
    assert!(!krylov.is_dense());
    let a = dense.evolve(&state, 6.0).unwrap();
    let b = krylov.evolve(&state, 6.0).unwrap();
    let (CoupledState::Mixture(a), CoupledState::Mixture(b)) = (a, b) else { panic!() };
    assert!((&a[0].1 - &b[0].1).norm() < 1e-9);
    assert!((b[0].1.norm() - 1.0).abs() < 1e-10);
    assert!((CoupledState::Mixture(b).energy(&h) - state.energy(&h)).abs() < 1e-10);

    let starved = EvolveOptions {
        dense_limit: 0,
        krylov_dim: 2,
        krylov_tol: 1e-14,
        max_steps: 20,
    };
    let err = Evolver::new(&h, starved).evolve(&state, 6.0).unwrap_err();
    assert!(matches!(err, QuantumError::StepRejected { .. }));
}

#[test]
fn partial_trace_examples() {
    let model = model_1d(0.5, 1.0);
    let lattice = unit_lattice(&[0, 1, 2]);
    let trunc = FockTruncation::new(vec![vec![1]], 1);
    let h = build_hamiltonian(&model, &lattice, &trunc).unwrap();
    let nph = h.basis.phonons.len();

    // (|p1, 0> + |p2, 1_k>) / sqrt 2
    let mut v = DVector::zeros(h.dim());
    v[nph] = c(1.0, 0.0);
    v[2 * nph + 1] = c(1.0, 0.0);
    let ge = partial_trace_phonons(&CoupledState::pure(v), &h);
    let want = [[0.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((ge.rho[(i, j)] - c(want[i][j], 0.0)).norm() < 1e-15);
        }
    }

    let gamma = mixed_electron_state(&lattice);
    let bath = gibbs_phonon_state(&model, &lattice, &trunc).unwrap();
    let prod = product_state(&gamma, &bath, &h.basis).unwrap();
    let back = partial_trace_phonons(&prod, &h);
    assert!((&back.rho - &gamma.rho).iter().all(|z| z.norm() < 1e-15));
    assert!((back.trace().re - prod.trace()).abs() < 1e-15);
}

#[test]
fn covariance_reproduces_g_sharp() {
    let times = [(0.0, 0.0), (0.5, 0.0), (1.3, 0.4), (-0.7, 2.1), (3.0, -1.0)];
    let model = model_1d(1.0, 2.0);
    let r = covariance_check(&model, &[0.5], 8, &times).unwrap();
    assert!(r.max_error <= 1e-3, "{}", r.max_error);
    assert!(r.max_anomalous_error <= 1e-3);
    assert_eq!(r.max_cross, 0.0);
    // time dependence is that of G#
    for s in &r.samples {
        let n = r.occupation;
        let w = 1.0;
        let g = C::from_polar(n, -(s.tau - s.s) * w) + C::from_polar(n + 1.0, (s.tau - s.s) * w);
        assert!((s.exact - g).norm() < 1e-14);
    }
    // truncation error shrinks with the cap
    let coarse = covariance_check(&model, &[0.5], 4, &times).unwrap();
    assert!(coarse.max_error > r.max_error);
    let hot = covariance_check(&model_1d(1.0, 1.0), &[0.5], 8, &times).unwrap();
    assert!(hot.max_error > r.max_error);
}

#[test]
fn canonical_commutators_below_cap() {
    let model = model_1d(1.0, 1.0);
    let lattice = unit_lattice(&[0]);
    let trunc = FockTruncation::new(vec![vec![-1], vec![1], vec![2]], 3);
    let h = build_hamiltonian(&model, &lattice, &trunc).unwrap();
    let r = commutator_check(&h);
    assert!(r.states_checked > 0);
    // products sqrt(n) sqrt(n) round at the last bit
    assert!(r.canonical_defect < 1e-12);
    assert!(r.b_defect < 1e-12);
}

fn ladder_lattice() -> (LatticeSpec, FockTruncation) {
    let lattice = unit_lattice(&[-1, 0, 1, 2]);
    let trunc = FockTruncation::new(vec![vec![-1], vec![1]], 1);
    (lattice, trunc)
}

#[test]
fn ladder_routes_agree() {
    let (lattice, trunc) = ladder_lattice();
    let model = model_1d(1.0, 1.0);
    let gamma = mixed_electron_state(&lattice);
    let r = ladder_term_check(&model, &lattice, &trunc, &gamma, 0.1, 2.0).unwrap();
    assert!(r.perturbative > 1e-4);
    assert!(r.discrepancy <= 1e-8, "{r:?}");
    assert!(r.oracle_only);

    let zero = ladder_term_check(&model, &lattice, &trunc, &gamma, 0.0, 2.0).unwrap();
    assert_eq!(zero.perturbative, 0.0);
    assert_eq!(zero.formula, 0.0);

    // coupling supported between the lattice shells |k| = 1 and |k| = 2
    let off = Model::new(ModelConfig {
        dimension: 1,
        coupling: Coupling::CompactShell {
            amplitude: 1.0,
            radius: 1.5,
            half_width: 0.2,
        },
        ..ModelConfig::default()
    })
    .unwrap();
    let r = ladder_term_check(&off, &lattice, &trunc, &gamma, 0.1, 2.0).unwrap();
    assert_eq!(r.perturbative, 0.0);
    assert_eq!(r.formula, 0.0);
}

#[test]
fn ladder_routes_agree_dispersive_phonons() {
    let (lattice, trunc) = ladder_lattice();
    let model = Model::new(ModelConfig {
        dimension: 1,
        phonon: Dispersion::AcousticSoft { omega0: 0.6, c: 0.9 },
        beta: 0.7,
        ..ModelConfig::default()
    })
    .unwrap();
    let gamma = mixed_electron_state(&lattice);
    for t in [0.5, 2.0, 5.0] {
        let r = ladder_term_check(&model, &lattice, &trunc, &gamma, 0.2, t).unwrap();
        assert!(r.discrepancy <= 1e-8, "t = {t}: {r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hamiltonian_is_hermitian(lambda in 0.0f64..3.0, l in 1.5f64..6.0, m in 1i32..3, n_max in 1usize..3) {
        let model = model_1d(lambda, 1.0);
        let lattice = LatticeSpec::box_cutoff(1, l, m);
        let mut trunc = FockTruncation::all_modes(&lattice, n_max);
        trunc.n_tot = Some(2);
        let h = build_hamiltonian(&model, &lattice, &trunc).unwrap();
        prop_assert_eq!(h.hermiticity_defect(), 0.0);
        let d = h.dense();
        prop_assert!((&d - d.adjoint()).iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn evolution_preserves_trace(t in -5.0f64..5.0, lambda in 0.0f64..2.0) {
        let model = model_1d(lambda, 1.0);
        let lattice = unit_lattice(&[-1, 0, 1]);
        let trunc = FockTruncation::new(vec![vec![-1], vec![1]], 2);
        let h = build_hamiltonian(&model, &lattice, &trunc).unwrap();
        let bath = gibbs_phonon_state(&model, &lattice, &trunc).unwrap();
        let g0 = product_state(&mixed_electron_state(&lattice), &bath, &h.basis).unwrap();
        let gt = evolve(&h, &g0, t).unwrap();
        prop_assert!((gt.trace() - 1.0).abs() < 1e-10);
        prop_assert!((gt.energy(&h) - g0.energy(&h)).abs() < 1e-10);
    }
}
