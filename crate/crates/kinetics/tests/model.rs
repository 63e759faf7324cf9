use phonon_kinetics::model::*;
use phonon_kinetics::rng;
use proptest::prelude::*;
use rand::Rng;
use std::collections::HashSet;
use std::f64::consts::E;

fn model(f: impl FnOnce(&mut ModelConfig)) -> Model {
    let mut cfg = ModelConfig::default();
    f(&mut cfg);
    Model::new(cfg).unwrap()
}

#[test]
fn default_model_passes_every_assumption() {
    let report = validate_assumptions(&Model::default(), &GridSpec::default()).unwrap();
    for c in &report.checks {
        assert!(c.passed, "{:?}", c);
    }
    let h = report.get(Assumption::HessianBounds);
    assert!((h.measured - 1.0).abs() < 1e-6, "{h:?}");
    assert!((h.measured_upper.unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(report.max_derivative_order, 4);
}

#[test]
fn report_lists_each_assumption_once() {
    for d in [1, 2, 3] {
        let m = model(|c| c.dimension = d);
        let report = validate_assumptions(&m, &GridSpec::default()).unwrap();
        assert_eq!(report.checks.len(), Assumption::ALL.len());
        let seen: HashSet<_> = report.checks.iter().map(|c| c.assumption).collect();
        assert_eq!(seen.len(), Assumption::ALL.len());
    }
}

#[test]
fn soft_quadratic_phonon_fails_hessian_lower_bound() {
    // Hess Phi_- = (1 - 0.9) I = 0.1 I, below C3 = 0.2
    let m = model(|c| c.phonon = Dispersion::Quadratic { scale: 0.9 });
    let report = validate_assumptions(&m, &GridSpec::default()).unwrap();
    let h = report.get(Assumption::HessianBounds);
    assert!(!h.passed);
    assert!((h.measured - 0.1).abs() < 1e-6, "{h:?}");
}

#[test]
fn constant_coupling_fails_decay() {
    let m = model(|c| c.coupling = Coupling::Constant { value: 1.0 });
    let report = validate_assumptions(&m, &GridSpec::default()).unwrap();
    assert!(!report.get(Assumption::CouplingDecay).passed);
    assert!(report.get(Assumption::HessianBounds).passed);
}

#[test]
fn toy_dimension_is_flagged() {
    let m = model(|c| c.dimension = 1);
    assert!(m.is_toy_dimension());
    let report = validate_assumptions(&m, &GridSpec::default()).unwrap();
    assert!(!report.get(Assumption::Dimension).passed);
}

#[test]
fn coarse_grid_is_rejected() {
    let grid = GridSpec {
        points_per_axis: 7,
        ..GridSpec::default()
    };
    assert!(matches!(
        validate_assumptions(&Model::default(), &grid),
        Err(ModelError::GridTooCoarse(_))
    ));
}

#[test]
fn occupation_examples() {
    assert!((occupation(1.0, 1.0, 0.0).unwrap() - 1.0 / (E - 1.0)).abs() < 1e-15);
    assert!((occupation(1.0, 1.0, 0.0).unwrap() - 0.581977).abs() < 1e-6);
    let cold = occupation(1e6, 1.0, 0.0).unwrap();
    assert!(cold >= 0.0 && cold < 1e-300);
    assert!(matches!(occupation(1.0, 1.0, 2.0), Err(ModelError::BathUnstable(_))));
    let m = Model::default();
    assert!((m.phonon_occupation(&[0.3, -1.0, 2.0]).unwrap() - 1.0 / (E - 1.0)).abs() < 1e-15);
}

#[test]
fn phi_examples() {
    let free = model(|c| c.phonon = Dispersion::ConstantOmega { omega: 0.0 });
    assert_eq!(free.phi(&[0.0; 3], &[1.0, 0.0, 0.0], 1), 0.5);
    let m = Model::default();
    assert_eq!(m.phi(&[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0], -1), -1.0);
}

#[test]
fn phi_is_even_on_random_samples() {
    let models = [
        Model::default(),
        model(|c| {
            c.electron = Dispersion::QuadraticPlusEpsCos { eps: 0.3 };
            c.phonon = Dispersion::AcousticSoft { omega0: 1.0, c: 0.2 };
        }),
    ];
    let mut r = rng::stream(11, 0);
    for m in &models {
        for _ in 0..100 {
            let p: Vec<f64> = (0..3).map(|_| r.random_range(-3.0..3.0)).collect();
            let k: Vec<f64> = (0..3).map(|_| r.random_range(-3.0..3.0)).collect();
            let mp: Vec<f64> = p.iter().map(|x| -x).collect();
            let mk: Vec<f64> = k.iter().map(|x| -x).collect();
            for s in [-1, 1] {
                let a = m.phi(&p, &k, s);
                assert!((a - m.phi(&mp, &mk, s)).abs() <= 1e-14 * a.abs().max(1.0));
            }
        }
    }
}

proptest! {
    #[test]
    fn occupation_decreases_in_beta(beta in 0.05f64..20.0, db in 1e-3f64..5.0, omega in 0.05f64..5.0, mu in -3.0f64..0.0) {
        let a = occupation(beta, omega, mu).unwrap();
        let b = occupation(beta + db, omega, mu).unwrap();
        prop_assert!(b <= a);
        prop_assert!(b >= 0.0);
    }

    #[test]
    fn occupation_decreases_in_omega(beta in 0.05f64..20.0, omega in 0.05f64..5.0, dw in 1e-3f64..5.0, mu in -3.0f64..0.0) {
        prop_assert!(occupation(beta, omega + dw, mu).unwrap() <= occupation(beta, omega, mu).unwrap());
    }

    #[test]
    fn dispersions_and_coupling_are_even(k in prop::collection::vec(-6.0f64..6.0, 3)) {
        let m = model(|c| {
            c.electron = Dispersion::QuadraticPlusEpsCos { eps: 0.5 };
            c.phonon = Dispersion::AcousticSoft { omega0: 1.0, c: 0.3 };
        });
        let mk: Vec<f64> = k.iter().map(|x| -x).collect();
        prop_assert_eq!(m.e(&k), m.e(&mk));
        prop_assert_eq!(m.omega(&k), m.omega(&mk));
        prop_assert_eq!(m.q(&k), m.q(&mk));
        prop_assert_eq!(m.phonon_occupation(&k).unwrap(), m.phonon_occupation(&mk).unwrap());
    }
}
