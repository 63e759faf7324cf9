//! The experiment registry. Each experiment writes its tables through
//! [`Artifacts`] and returns its assertions.

use crate::config::{ConfigError, Experiment, ExperimentConfig, ObservableConfig};
use crate::output::{Artifacts, Check, OutputError};
use nalgebra::DMatrix;
use num_complex::Complex64 as C;
use phonon_kinetics::boltzmann::{
    dyson_partial_sum, evolve, pair_observable_estimate, poisson_tail, GaussianMaxwellian, ParticleEnsemble,
};
use phonon_kinetics::diagrams::{count_by_max_peaks, enumerate_patterns, ramsey_check, EXHAUSTIVE_LIMIT};
use phonon_kinetics::kernels::CollisionKernel;
use phonon_kinetics::lattice::{DensityMatrixGrid, LatticeSpec};
use phonon_kinetics::model::{validate_assumptions, Model};
use phonon_kinetics::quantum::{
    build_hamiltonian, commutator_check, covariance_check, gibbs_phonon_state, ladder_term_check, product_state,
    EvolveOptions, Evolver, FockTruncation,
};
use phonon_kinetics::rng;
use phonon_kinetics::wigner::{
    check_pairing, wigner_transform, wkb_wigner_limit_check, GaussianTerm, PureStateGrid, TestFunction, WkbState,
};
use rand::Rng;
use serde::Serialize;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("{0}")]
    Numeric(String),
}

impl RunError {
    fn numeric(e: impl std::fmt::Display) -> Self {
        RunError::Numeric(e.to_string())
    }
}

type Outcome = Result<Vec<Check>, RunError>;

pub fn run_experiment(cfg: &ExperimentConfig, out: &mut Artifacts) -> Outcome {
    match cfg.experiment {
        Experiment::ValidateModel => validate_model(cfg, out),
        Experiment::KernelTable => kernel_table(cfg, out),
        Experiment::BoltzmannRun => boltzmann_run(cfg, out),
        Experiment::DysonCompare => dyson_compare(cfg, out),
        Experiment::QuantumOracle => quantum_oracle(cfg, out),
        Experiment::LadderCheck => ladder_check(cfg, out),
        Experiment::WignerDemo => wigner_demo(cfg, out),
        Experiment::CombinatoricsSuite => combinatorics_suite(cfg, out),
    }
}

fn model(cfg: &ExperimentConfig) -> Result<Model, RunError> {
    Model::new(cfg.model.clone()).map_err(|e| ConfigError::Invalid(format!("model: {e}")).into())
}

fn kernel(cfg: &ExperimentConfig) -> Result<CollisionKernel, RunError> {
    CollisionKernel::with_rate_table(model(cfg)?, cfg.kernel.clone()).map_err(RunError::numeric)
}

fn invalid(msg: impl Into<String>) -> RunError {
    ConfigError::Invalid(msg.into()).into()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn validate_model(cfg: &ExperimentConfig, out: &mut Artifacts) -> Outcome {
    #[derive(Serialize)]
    struct Row {
        assumption: String,
        passed: bool,
        measured: f64,
        measured_upper: Option<f64>,
        worst_point: String,
        note: String,
    }
    let m = model(cfg)?;
    let report = validate_assumptions(&m, &cfg.grid).map_err(|e| invalid(format!("grid: {e}")))?;
    let rows: Vec<Row> = report
        .checks
        .iter()
        .map(|c| Row {
            assumption: format!("{:?}", c.assumption),
            passed: c.passed,
            measured: c.measured,
            measured_upper: c.measured_upper,
            worst_point: join(&c.worst_point),
            note: c.note.clone(),
        })
        .collect();
    out.csv("assumptions.csv", &rows)?;
    out.json("assumptions.json", &report)?;
    Ok(report
        .checks
        .iter()
        .map(|c| {
            let upper = c.measured_upper.map(|u| format!(" upper={u:.6e}")).unwrap_or_default();
            Check::flag(
                &format!("{:?}", c.assumption),
                c.passed,
                format!("measured={:.6e}{upper}; {}", c.measured, c.note),
            )
        })
        .collect())
}

fn axis_vector(dim: usize, s: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = s;
    v
}

fn kernel_table(cfg: &ExperimentConfig, out: &mut Artifacts) -> Outcome {
    #[derive(Serialize)]
    struct Row {
        speed: f64,
        emission: f64,
        absorption: f64,
        sigma0: f64,
        emission_ray: f64,
        absorption_ray: f64,
        minus_two_im_psi: Option<f64>,
        re_psi: Option<f64>,
    }
    let k = CollisionKernel::new(model(cfg)?, cfg.kernel.clone()).map_err(RunError::numeric)?;
    let d = k.model().dim();
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for &s in &cfg.kernel_table.speeds {
        let v = axis_vector(d, s);
        let surf = k.branch_cross_sections_surface(&v).map_err(RunError::numeric)?;
        let ray = k.branch_cross_sections_direct(&v);
        let sigma0 = surf[0] + surf[1];
        let mut row = Row {
            speed: s,
            emission: surf[0],
            absorption: surf[1],
            sigma0,
            emission_ray: ray[0],
            absorption_ray: ray[1],
            minus_two_im_psi: None,
            re_psi: None,
        };
        if cfg.kernel_table.check_psi {
            let name = format!("psi_vs_sigma0[|V|={s}]");
            match k.psi(&v) {
                Ok(b) => {
                    let m2 = -2.0 * b.im_extrapolated;
                    row.minus_two_im_psi = Some(m2);
                    row.re_psi = Some(b.value.re);
                    let rel = (m2 - sigma0).abs() / sigma0.abs().max(f64::MIN_POSITIVE);
                    checks.push(Check::at_most(&name, rel, cfg.tolerances.psi_sigma_rel));
                }
                Err(e) => checks.push(Check::flag(&name, false, e.to_string())),
            }
        }
        rows.push(row);
    }
    out.csv("kernel_table.csv", &rows)?;
    Ok(checks)
}

fn maxwellian(dim: usize, x_width: f64, drift: &[f64], beta: f64) -> Result<GaussianMaxwellian, RunError> {
    let drift = if drift.is_empty() { vec![0.0; dim] } else { drift.to_vec() };
    if drift.len() != dim {
        return Err(invalid(format!("drift has length {}, model dimension is {dim}", drift.len())));
    }
    Ok(GaussianMaxwellian {
        x_center: vec![0.0; dim],
        x_width,
        drift,
        beta,
    })
}

fn boltzmann_run(cfg: &ExperimentConfig, out: &mut Artifacts) -> Outcome {
    #[derive(Serialize)]
    struct Row {
        time: f64,
        mean_energy: f64,
        mean_energy_stderr: f64,
        mean_x2: f64,
        mean_x2_stderr: f64,
        mean_jumps: f64,
        mean_jumps_stderr: f64,
        total_weight: f64,
    }
    let b = &cfg.boltzmann;
    if b.steps == 0 || !(b.t_final >= 0.0) {
        return Err(invalid("boltzmann.steps must be >= 1 and t_final >= 0"));
    }
    let k = kernel(cfg)?;
    let m = k.model().clone();
    let d = m.dim();
    let init = maxwellian(d, b.x_width, &b.drift, m.beta())?;
    let mut ens = ParticleEnsemble::sample(&init, b.particles, cfg.seed);
    let start = ens.clone();
    let mut jumps = vec![0u32; ens.len()];
    let dt = b.t_final / b.steps as f64;
    let mut rows = Vec::new();
    let mut rejected = 0u64;
    for step in 0..=b.steps {
        if step > 0 {
            let st = evolve(&k, &mut ens, dt);
            rejected += st.rejected;
            for (a, j) in jumps.iter_mut().zip(&st.jumps) {
                *a += j;
            }
        }
        let energy = pair_observable_estimate(|_, v| m.e(v), &ens);
        let x2 = pair_observable_estimate(|x, _| x.iter().map(|a| a * a).sum(), &ens);
        let n = jumps.len().max(1) as f64;
        let mj = jumps.iter().map(|&j| j as f64).sum::<f64>() / n;
        let vj = jumps.iter().map(|&j| (j as f64 - mj).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        rows.push(Row {
            time: step as f64 * dt,
            mean_energy: energy.value,
            mean_energy_stderr: energy.stderr,
            mean_x2: x2.value,
            mean_x2_stderr: x2.stderr,
            mean_jumps: mj,
            mean_jumps_stderr: (vj / n).sqrt(),
            total_weight: ens.total_weight(),
        });
    }
    out.csv("moments.csv", &rows)?;
    let cols = |tag: &str| -> Vec<String> {
        (0..d)
            .map(|i| format!("x{i}"))
            .chain((0..d).map(|i| format!("v{i}")))
            .chain(std::iter::once(tag.to_string()))
            .collect()
    };
    let flat = |e: &ParticleEnsemble| -> Vec<f64> {
        (0..e.len())
            .flat_map(|i| {
                e.position(i)
                    .iter()
                    .chain(e.momentum(i))
                    .copied()
                    .chain(std::iter::once(1.0))
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    out.raw("particles_initial", &flat(&start), &cols("weight"))?;
    out.raw("particles_final", &flat(&ens), &cols("weight"))?;

    let mut checks = vec![
        Check::at_most(
            "mass_conservation",
            (ens.total_weight() - start.total_weight()).abs(),
            cfg.tolerances.mass,
        ),
        Check::flag("particle_count", ens.len() == start.len(), format!("{} particles", ens.len())),
    ];
    if rejected > 0 {
        checks.push(Check::flag("no_rejected_jumps", false, format!("{rejected} jumps had no open channel")));
    }
    if m.coupling().is_zero() {
        let mut dx: f64 = 0.0;
        let mut dv: f64 = 0.0;
        for i in 0..ens.len() {
            let g = m.grad_e(start.momentum(i));
            for c in 0..d {
                let exact = start.position(i)[c] + b.t_final * g[c];
                dx = dx.max((ens.position(i)[c] - exact).abs() / (1.0 + exact.abs()));
                dv = dv.max((ens.momentum(i)[c] - start.momentum(i)[c]).abs());
            }
        }
        checks.push(
            Check::at_most("free_transport_positions", dx, cfg.tolerances.free_transport)
                .with_detail("max relative |X_T - X_0 - T grad e(V_0)|"),
        );
        checks.push(Check::at_most("free_transport_momenta", dv, 0.0));
    }
    Ok(checks)
}

fn gaussian_observable(o: &ObservableConfig, dim: usize) -> Result<(Vec<f64>, Vec<f64>), RunError> {
    let fix = |v: &[f64], what: &str| {
        if v.is_empty() {
            Ok(vec![0.0; dim])
        } else if v.len() == dim {
            Ok(v.to_vec())
        } else {
            Err(invalid(format!("observable.{what} has length {}, model dimension is {dim}", v.len())))
        }
    };
    Ok((fix(&o.x_center, "x_center")?, fix(&o.v_center, "v_center")?))
}

fn dyson_compare(cfg: &ExperimentConfig, out: &mut Artifacts) -> Outcome {
    #[derive(Serialize)]
    struct Row {
        source: &'static str,
        order: usize,
        value: f64,
        stderr: f64,
    }
    let dc = &cfg.dyson;
    let k = kernel(cfg)?;
    let m = k.model().clone();
    let d = m.dim();
    let max_rate = match k.rate_table() {
        Some(t) => t.max_total(),
        None => return Err(invalid("dyson-compare needs an isotropic model (rate table)")),
    };
    let t = dc.t_final.unwrap_or(if max_rate > 0.0 { dc.rate_time / max_rate } else { 1.0 });
    let init = maxwellian(d, dc.x_width, &[], m.beta())?;
    let (xc, vc) = gaussian_observable(&dc.observable, d)?;
    let (wx, wv) = (dc.observable.x_width, dc.observable.v_width);
    let (xc, vc) = (&xc, &vc);
    let j = move |x: &[f64], v: &[f64]| {
        let a: f64 = x.iter().zip(xc).map(|(p, q)| (p - q) * (p - q)).sum();
        let b: f64 = v.iter().zip(vc).map(|(p, q)| (p - q) * (p - q)).sum();
        (-0.5 * a / (wx * wx) - 0.5 * b / (wv * wv)).exp()
    };
    let (sum, terms) = dyson_partial_sum(&k, dc.order, t, &init, j, dc.samples, cfg.seed);
    let mut ens = ParticleEnsemble::sample(&init, dc.particles, cfg.seed);
    evolve(&k, &mut ens, t);
    let kmc = pair_observable_estimate(j, &ens);
    let tail = poisson_tail(max_rate * t, dc.order);

    let mut rows: Vec<Row> = terms
        .iter()
        .enumerate()
        .map(|(n, e)| Row {
            source: "dyson_term",
            order: n,
            value: e.value,
            stderr: e.stderr,
        })
        .collect();
    rows.push(Row {
        source: "dyson_sum",
        order: dc.order,
        value: sum.value,
        stderr: sum.stderr,
    });
    rows.push(Row {
        source: "kmc",
        order: dc.order,
        value: kmc.value,
        stderr: kmc.stderr,
    });
    out.csv("dyson.csv", &rows)?;
    let combined = (sum.stderr.powi(2) + kmc.stderr.powi(2)).sqrt();
    let allowed = cfg.tolerances.dyson_sigmas * combined + tail;
    out.json(
        "dyson.json",
        &serde_json::json!({
            "t_final": t,
            "max_rate": max_rate,
            "rate_times_t": max_rate * t,
            "poisson_tail": tail,
            "combined_stderr": combined,
            "difference": (sum.value - kmc.value).abs(),
            "allowed": allowed,
        }),
    )?;
    Ok(vec![
        Check::at_most("dyson_vs_kmc", (sum.value - kmc.value).abs(), allowed).with_detail(format!(
            "{} combined stderr + Poisson tail {tail:.3e}, sigma_0 T = {:.3}",
            cfg.tolerances.dyson_sigmas,
            max_rate * t
        )),
    ])
}

/// Random mixed electron state of rank <= 3 from the seed.
fn random_density(lattice: &LatticeSpec, seed: u64) -> DensityMatrixGrid {
    let n = lattice.len();
    let mut r = rng::stream(seed, rng::tag::QUANTUM);
    let rank = n.min(3);
    let a = DMatrix::from_fn(n, rank, |_, _| C::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5));
    let rho = &a * a.adjoint();
    let tr = rho.trace();
    DensityMatrixGrid::new(lattice.clone(), rho / tr)
}

const COVARIANCE_TIMES: [(f64, f64); 6] = [(0.0, 0.0), (0.5, 0.0), (1.3, 0.4), (-0.7, 2.1), (3.0, -1.0), (7.5, 2.5)];

fn quantum_oracle(cfg: &ExperimentConfig, out: &mut Artifacts) -> Outcome {
    #[derive(Serialize)]
    struct DriftRow {
        t: f64,
        trace: f64,
        energy: f64,
        trace_drift: f64,
        energy_drift: f64,
    }
    #[derive(Serialize)]
    struct CovRow {
        tau: f64,
        s: f64,
        numeric_re: f64,
        numeric_im: f64,
        exact_re: f64,
        exact_im: f64,
        error: f64,
    }
    let q = &cfg.quantum;
    let m = model(cfg)?;
    let d = m.dim();
    let lattice = LatticeSpec::box_cutoff(d, q.box_size, q.cutoff);
    let mut trunc = FockTruncation::all_modes(&lattice, q.n_max);
    trunc.n_tot = q.n_tot;
    let h = build_hamiltonian(&m, &lattice, &trunc).map_err(RunError::numeric)?;
    let bath = gibbs_phonon_state(&m, &lattice, &trunc).map_err(RunError::numeric)?;
    let gamma = random_density(&lattice, cfg.seed);
    let g0 = product_state(&gamma, &bath, &h.basis).map_err(RunError::numeric)?;
    let ev = Evolver::new(&h, EvolveOptions::default());
    let (tr0, e0) = (g0.trace(), g0.energy(&h));
    let mut rows = Vec::new();
    for step in 0..=q.steps {
        let t = q.t_max * step as f64 / q.steps.max(1) as f64;
        let gt = ev.evolve(&g0, t).map_err(RunError::numeric)?;
        let (tr, e) = (gt.trace(), gt.energy(&h));
        rows.push(DriftRow {
            t,
            trace: tr,
            energy: e,
            trace_drift: (tr - tr0).abs(),
            energy_drift: (e - e0).abs(),
        });
    }
    out.csv("drift.csv", &rows)?;
    let max_tr = rows.iter().map(|r| r.trace_drift).fold(0.0, f64::max);
    let max_e = rows.iter().map(|r| r.energy_drift).fold(0.0, f64::max);

    // lambda = 0: rho_ab(t) = rho_ab e^{-i (E_a - E_b) t}
    let free_model = m.with(|c| c.lambda = 0.0).map_err(RunError::numeric)?;
    let hf = build_hamiltonian(&free_model, &lattice, &trunc).map_err(RunError::numeric)?;
    let r0 = g0.to_dense();
    let rt = Evolver::new(&hf, EvolveOptions::default())
        .evolve(&g0, q.t_max)
        .map_err(RunError::numeric)?
        .to_dense();
    let e = hf.h0();
    let mut free_err: f64 = 0.0;
    for a in 0..r0.nrows() {
        for b in 0..r0.ncols() {
            let exact = r0[(a, b)] * C::from_polar(1.0, -(e[a] - e[b]) * q.t_max);
            free_err = free_err.max((rt[(a, b)] - exact).norm());
        }
    }

    let cov_model = match q.covariance_beta {
        Some(beta) => m.with(|c| c.beta = beta).map_err(|e| invalid(format!("covariance_beta: {e}")))?,
        None => m.clone(),
    };
    let u = if q.covariance_mode.is_empty() { vec![0.5; d] } else { q.covariance_mode.clone() };
    if u.len() != d {
        return Err(invalid(format!("covariance_mode has length {}, model dimension is {d}", u.len())));
    }
    let cov = covariance_check(&cov_model, &u, q.covariance_n_max, &COVARIANCE_TIMES).map_err(RunError::numeric)?;
    let cov_rows: Vec<CovRow> = cov
        .samples
        .iter()
        .map(|s| CovRow {
            tau: s.tau,
            s: s.s,
            numeric_re: s.numeric.re,
            numeric_im: s.numeric.im,
            exact_re: s.exact.re,
            exact_im: s.exact.im,
            error: (s.numeric - s.exact).norm(),
        })
        .collect();
    out.csv("covariance.csv", &cov_rows)?;
    let comm = commutator_check(&h);
    out.json(
        "quantum.json",
        &serde_json::json!({
            "dimension": h.dim(),
            "electron_states": lattice.len(),
            "phonon_states": h.basis.phonons.len(),
            "dense": ev.is_dense(),
            "hermiticity_defect": h.hermiticity_defect(),
            "max_trace_drift": max_tr,
            "max_energy_drift": max_e,
            "free_evolution_error": free_err,
            "covariance": {
                "beta": cov_model.beta(),
                "n_max": cov.n_max,
                "occupation": cov.occupation,
                "truncated_occupation": cov.truncated_occupation,
                "max_error": cov.max_error,
                "max_cross": cov.max_cross,
                "max_anomalous_error": cov.max_anomalous_error,
            },
            "commutators": comm,
        }),
    )?;
    Ok(vec![
        Check::at_most("dimension", h.dim() as f64, 4000.0),
        Check::at_most("trace_drift", max_tr, cfg.tolerances.drift),
        Check::at_most("energy_drift", max_e, cfg.tolerances.drift),
        Check::at_most("free_evolution", free_err, cfg.tolerances.free_evolution),
        Check::at_most("covariance", cov.max_error, cfg.tolerances.covariance)
            .with_detail(format!("beta = {}, n_max = {}", cov_model.beta(), cov.n_max)),
        Check::at_most("covariance_anomalous", cov.max_anomalous_error, cfg.tolerances.covariance),
        Check::at_most("canonical_commutator", comm.canonical_defect, 1e-12),
    ])
}

fn ladder_check(cfg: &ExperimentConfig, out: &mut Artifacts) -> Outcome {
    let lc = &cfg.ladder;
    let m = model(cfg)?;
    let d = m.dim();
    if lc.electron_points.iter().chain(&lc.modes).any(|p| p.len() != d) {
        return Err(invalid(format!("ladder points and modes must have model dimension {d}")));
    }
    let lattice = LatticeSpec::from_indices(d, lc.box_size, lc.electron_points.clone());
    let trunc = FockTruncation::new(lc.modes.clone(), lc.n_max);
    let gamma = random_density(&lattice, cfg.seed);
    let r = ladder_term_check(&m, &lattice, &trunc, &gamma, lc.lambda, lc.t).map_err(RunError::numeric)?;
    out.csv("ladder.csv", std::slice::from_ref(&r))?;
    out.json("ladder.json", &r)?;
    Ok(vec![Check::at_most("ladder_discrepancy", r.discrepancy, cfg.tolerances.ladder)
        .with_detail(format!("perturbative {:.6e}, formula {:.6e}", r.perturbative, r.formula))])
}

fn wigner_demo(cfg: &ExperimentConfig, out: &mut Artifacts) -> Outcome {
    #[derive(Serialize)]
    struct GaussRow {
        x: String,
        v: String,
        value: f64,
        exact: f64,
        error: f64,
    }
    #[derive(Serialize)]
    struct PairRow {
        pair: usize,
        lattice_points: usize,
        epsilon: f64,
        phase_space: f64,
        trace: f64,
        discrepancy: f64,
    }
    let wc = &cfg.wigner;
    let dim = wc.gaussian_dim;
    if dim == 0 || dim > 3 {
        return Err(invalid("wigner.gaussian_dim must be 1, 2 or 3"));
    }
    let h = wc.gaussian_spacing;
    let mut r = rng::stream(cfg.seed, rng::tag::WIGNER);

    // psi^(p) = pi^{-d/4} e^{-|p|^2/2} has W(x, v) = (2/pi)^{d/2} e^{-|x|^2 - |v|^2}
    let lattice = LatticeSpec::box_cutoff(dim, (2.0 * PI).sqrt() / h, wc.gaussian_cutoff);
    let psi = PureStateGrid::from_fn(lattice, |p| {
        let r2: f64 = p.iter().map(|x| x * x).sum();
        C::new(PI.powf(-0.25 * dim as f64) * (-0.5 * r2).exp(), 0.0)
    });
    let w = wigner_transform(&psi).map_err(RunError::numeric)?;
    let mut gauss = Vec::new();
    for i in 0..8 {
        let x: Vec<f64> = (0..dim).map(|_| if i == 0 { 0.0 } else { r.random_range(-0.6..0.6) }).collect();
        let v: Vec<f64> = (0..dim)
            .map(|_| if i == 0 { 0.0 } else { 0.5 * h * r.random_range(-3i32..=3) as f64 })
            .collect();
        let value = w.value(&x, &v).map_err(RunError::numeric)?;
        let r2: f64 = x.iter().chain(&v).map(|a| a * a).sum();
        let exact = (2.0 / PI).powf(0.5 * dim as f64) * (-r2).exp();
        gauss.push(GaussRow {
            x: join(&x),
            v: join(&v),
            value,
            exact,
            error: (value - exact).abs(),
        });
    }
    out.csv("gaussian.csv", &gauss)?;
    let gauss_err = gauss.iter().map(|g| g.error).fold(0.0, f64::max);

    let mut pairs = Vec::new();
    let mut pair_fail = 0;
    for i in 0..wc.pairs {
        let lattice = LatticeSpec::box_cutoff(1, r.random_range(2.5..4.5), r.random_range(4..8));
        let n = lattice.len();
        let a = DMatrix::from_fn(n, n, |_, _| C::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5));
        let mut rho = &a * a.adjoint();
        for p in 0..n {
            for q in 0..n {
                let (x, y) = (lattice.momentum(p)[0], lattice.momentum(q)[0]);
                rho[(p, q)] *= (-0.15 * (x * x + y * y)).exp();
            }
        }
        let tr = rho.trace();
        let gamma = DensityMatrixGrid::new(lattice, rho / tr);
        let terms = (0..r.random_range(1..=3))
            .map(|_| GaussianTerm {
                coeff: r.random_range(-1.0..1.0),
                x_center: vec![r.random_range(-1.0..1.0)],
                x_width: r.random_range(0.5..1.5),
                powers: vec![r.random_range(0..=2)],
                v_center: vec![r.random_range(-1.0..1.0)],
                v_width: if r.random::<bool>() { Some(r.random_range(0.5..2.0)) } else { None },
            })
            .collect();
        let j = TestFunction { terms };
        let eps = r.random_range(0.3..1.0);
        let rep = check_pairing(&gamma, &j, eps, f64::INFINITY).map_err(RunError::numeric)?;
        if rep.discrepancy > cfg.tolerances.pairing * rep.trace.abs().max(1.0) {
            pair_fail += 1;
        }
        pairs.push(PairRow {
            pair: i,
            lattice_points: n,
            epsilon: eps,
            phase_space: rep.phase_space,
            trace: rep.trace,
            discrepancy: rep.discrepancy,
        });
    }
    out.csv("pairing.csv", &pairs)?;

    let state = WkbState {
        amplitude: 1.0,
        center: vec![0.2],
        width: 1.0,
        xi0: vec![wc.wkb_xi0],
        curvature: wc.wkb_curvature,
    };
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
    let wkb = wkb_wigner_limit_check(&state, &j, &wc.epsilons).map_err(RunError::numeric)?;
    out.csv("wkb.csv", &wkb.entries)?;
    out.json("wkb.json", &wkb)?;
    Ok(vec![
        Check::at_most("gaussian_closed_form", gauss_err, cfg.tolerances.wigner_closed_form),
        Check::flag(
            "pairing_identity",
            pair_fail == 0,
            format!("{pair_fail} of {} pairs outside tolerance", wc.pairs),
        ),
        Check::flag(
            "wkb_monotone",
            wkb.monotone,
            format!("defects {}", join(&wkb.entries.iter().map(|e| e.defect).collect::<Vec<_>>())),
        ),
    ])
}

fn combinatorics_suite(cfg: &ExperimentConfig, out: &mut Artifacts) -> Outcome {
    #[derive(Serialize)]
    struct PeakRow {
        n: usize,
        max_peaks: usize,
        count: f64,
        bound: f64,
        bound_ok: bool,
    }
    #[derive(Serialize)]
    struct RamseyRow {
        alpha: usize,
        beta: usize,
        n: usize,
        threshold: usize,
        checked: u64,
        applicable: u64,
        counterexamples: usize,
        sequence_counterexamples: usize,
    }
    let c = &cfg.combinatorics;
    if c.n_max > EXHAUSTIVE_LIMIT || c.n_max_21 > EXHAUSTIVE_LIMIT {
        return Err(invalid(format!("combinatorics n_max is limited to {EXHAUSTIVE_LIMIT}")));
    }
    let mut peaks = Vec::new();
    for &k in &c.peak_bounds {
        for n in 1..=c.n_max {
            let pc = count_by_max_peaks(n, k, 0, cfg.seed);
            peaks.push(PeakRow {
                n,
                max_peaks: k,
                count: pc.count.value,
                bound: pc.bound as f64,
                bound_ok: pc.bound_ok,
            });
        }
    }
    out.csv("peak_counts.csv", &peaks)?;
    let mut ramsey = Vec::new();
    let mut witnesses = Vec::new();
    for (a, b, top) in [(1, 1, c.n_max), (1, 2, c.n_max), (2, 1, c.n_max_21)] {
        for n in 1..=top {
            let rep = ramsey_check(a, b, &[n], 0, cfg.seed).map_err(RunError::numeric)?;
            ramsey.push(RamseyRow {
                alpha: a,
                beta: b,
                n,
                threshold: rep.threshold,
                checked: rep.checked,
                applicable: rep.applicable,
                counterexamples: rep.counterexamples.len(),
                sequence_counterexamples: rep.sequence_counterexamples.len(),
            });
            if !rep.counterexamples.is_empty() || !rep.sequence_counterexamples.is_empty() {
                witnesses.push(rep);
            }
        }
    }
    out.csv("ramsey.csv", &ramsey)?;
    out.json("counterexamples.json", &witnesses)?;
    let peak_fail = peaks.iter().filter(|p| !p.bound_ok).count();
    let ramsey_fail: usize = ramsey.iter().map(|r| r.counterexamples + r.sequence_counterexamples).sum();
    let peak_free_3 = count_by_max_peaks(3, 0, 0, cfg.seed).count.value;
    let m13 = enumerate_patterns(1, 3).map_err(RunError::numeric)?.len();
    Ok(vec![
        Check::at_most("peak_count_bound_counterexamples", peak_fail as f64, 0.0),
        Check::at_most("staircase_counterexamples", ramsey_fail as f64, 0.0),
        Check::flag("peak_free_count_n3", peak_free_3 == 4.0, format!("count = {peak_free_3}")),
        Check::flag("pattern_count_1_3", m13 == 2, format!("|M(1,3)| = {m13}")),
    ])
}
