//! Exact simulation of one electron coupled to finitely many phonon modes in a
//! truncated Fock space.
//!
//! Basis states are |p> (x) |n_1 .. n_M> with p running over the electron
//! lattice and n_m <= n_max. The composite index is `e * phonon_dim + ph`.

use crate::lattice::{DensityMatrixGrid, LatticeSpec};
use crate::model::{Model, ModelError};
use crate::quadrature::gauss_legendre_on;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64 as C;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantumError {
    #[error("Hilbert space dimension {dim} exceeds cap {cap}")]
    DimensionCap { dim: u128, cap: usize },
    #[error("bath unstable: beta*omega - mu = {0} <= 0")]
    BathUnstable(f64),
    #[error("Krylov step rejected: error estimate {error:e} above budget {budget:e}")]
    StepRejected { error: f64, budget: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(ModelError),
}

impl From<ModelError> for QuantumError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BathUnstable(a) => QuantumError::BathUnstable(a),
            other => QuantumError::Model(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, QuantumError>;

pub const DEFAULT_DIMENSION_CAP: usize = 200_000;

fn default_cap() -> usize {
    DEFAULT_DIMENSION_CAP
}

/// Retained phonon modes (dual-lattice indices) and occupation caps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FockTruncation {
    pub modes: Vec<Vec<i32>>,
    pub n_max: usize,
    #[serde(default)]
    pub n_tot: Option<usize>,
    #[serde(default = "default_cap")]
    pub dim_cap: usize,
}

impl FockTruncation {
    pub fn new(modes: Vec<Vec<i32>>, n_max: usize) -> Self {
        Self {
            modes,
            n_max,
            n_tot: None,
            dim_cap: DEFAULT_DIMENSION_CAP,
        }
    }

    /// One mode per electron lattice point.
    pub fn all_modes(lattice: &LatticeSpec, n_max: usize) -> Self {
        Self::new((0..lattice.len()).map(|i| lattice.index(i).to_vec()).collect(), n_max)
    }
}

/// Occupation configurations of the retained modes.
#[derive(Clone, Debug)]
pub struct PhononBasis {
    n_modes: usize,
    n_max: usize,
    n_tot: Option<usize>,
    configs: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, usize>,
}

fn count_configs(n_modes: usize, n_max: usize, n_tot: Option<usize>) -> u128 {
    match n_tot {
        None => (n_max as u128 + 1).saturating_pow(n_modes as u32),
        Some(cap) => {
            let mut ways = vec![0u128; cap + 1];
            ways[0] = 1;
            for _ in 0..n_modes {
                let mut next = vec![0u128; cap + 1];
                for (s, &w) in ways.iter().enumerate() {
                    if w == 0 {
                        continue;
                    }
                    for n in 0..=n_max.min(cap - s) {
                        next[s + n] = next[s + n].saturating_add(w);
                    }
                }
                ways = next;
            }
            ways.iter().fold(0u128, |a, &b| a.saturating_add(b))
        }
    }
}

impl PhononBasis {
    pub fn new(n_modes: usize, n_max: usize, n_tot: Option<usize>, cap: usize) -> Result<Self> {
        if n_max > u8::MAX as usize {
            return Err(QuantumError::InvalidArgument(format!("n_max = {n_max} too large")));
        }
        let count = count_configs(n_modes, n_max, n_tot);
        if count > cap as u128 {
            return Err(QuantumError::DimensionCap { dim: count, cap });
        }
        let mut configs = Vec::with_capacity(count as usize);
        let mut cur = vec![0u8; n_modes];
        loop {
            let total: usize = cur.iter().map(|&n| n as usize).sum();
            if n_tot.is_none_or(|c| total <= c) {
                configs.push(cur.clone());
            }
            // odometer, last mode fastest
            let mut i = n_modes;
            loop {
                if i == 0 {
                    let lookup = configs.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
                    return Ok(Self {
                        n_modes,
                        n_max,
                        n_tot,
                        configs,
                        lookup,
                    });
                }
                i -= 1;
                if (cur[i] as usize) < n_max {
                    cur[i] += 1;
                    break;
                }
                cur[i] = 0;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn config(&self, i: usize) -> &[u8] {
        &self.configs[i]
    }

    pub fn find(&self, c: &[u8]) -> Option<usize> {
        self.lookup.get(c).copied()
    }

    /// a_m^dagger |c> = sqrt(n+1) |c + e_m>, zero at the caps.
    pub fn raise(&self, i: usize, m: usize) -> Option<(usize, f64)> {
        let c = &self.configs[i];
        let n = c[m] as usize;
        if n >= self.n_max {
            return None;
        }
        let total: usize = c.iter().map(|&x| x as usize).sum();
        if self.n_tot.is_some_and(|cap| total >= cap) {
            return None;
        }
        let mut d = c.clone();
        d[m] += 1;
        Some((self.lookup[&d], ((n + 1) as f64).sqrt()))
    }

    /// a_m |c> = sqrt(n) |c - e_m>.
    pub fn lower(&self, i: usize, m: usize) -> Option<(usize, f64)> {
        let c = &self.configs[i];
        let n = c[m] as usize;
        if n == 0 {
            return None;
        }
        let mut d = c.clone();
        d[m] -= 1;
        Some((self.lookup[&d], (n as f64).sqrt()))
    }
}

/// Electron lattice times phonon configurations.
#[derive(Clone, Debug)]
pub struct FockBasis {
    pub electron_dim: usize,
    pub phonons: PhononBasis,
}

impl FockBasis {
    pub fn new(lattice: &LatticeSpec, trunc: &FockTruncation) -> Result<Self> {
        let ph = count_configs(trunc.modes.len(), trunc.n_max, trunc.n_tot);
        let dim = ph.saturating_mul(lattice.len() as u128);
        if dim > trunc.dim_cap as u128 {
            return Err(QuantumError::DimensionCap {
                dim,
                cap: trunc.dim_cap,
            });
        }
        let phonons = PhononBasis::new(trunc.modes.len(), trunc.n_max, trunc.n_tot, trunc.dim_cap)?;
        Ok(Self {
            electron_dim: lattice.len(),
            phonons,
        })
    }

    pub fn dim(&self) -> usize {
        self.electron_dim * self.phonons.len()
    }

    pub fn index(&self, e: usize, ph: usize) -> usize {
        e * self.phonons.len() + ph
    }

    pub fn split(&self, i: usize) -> (usize, usize) {
        (i / self.phonons.len(), i % self.phonons.len())
    }
}

/// H = H_0 + H_ep with H_0 diagonal and H_ep stored by rows.
#[derive(Clone, Debug)]
pub struct Hamiltonian {
    pub lattice: LatticeSpec,
    pub truncation: FockTruncation,
    pub basis: FockBasis,
    pub lambda: f64,
    h0: Vec<f64>,
    coupling: Vec<Vec<(usize, C)>>,
}

/// Assembles H_e + H_ph + H_ep with
/// H_ep = i lambda L^{-d/2} sum_k Q(k) [S_{-k} a_k^dagger - S_k a_k],
/// S_{-k}|p> = |p - k>. Channels leaving the electron lattice are dropped.
pub fn build_hamiltonian(model: &Model, lattice: &LatticeSpec, trunc: &FockTruncation) -> Result<Hamiltonian> {
    if lattice.dim() != model.dim() {
        return Err(QuantumError::InvalidArgument(format!(
            "lattice dimension {} differs from model dimension {}",
            lattice.dim(),
            model.dim()
        )));
    }
    if let Some(bad) = trunc.modes.iter().find(|k| k.len() != lattice.dim()) {
        return Err(QuantumError::InvalidArgument(format!("mode {bad:?} has the wrong dimension")));
    }
    let basis = FockBasis::new(lattice, trunc)?;
    let mode_k = &trunc.modes;
    let mode_omega: Vec<f64> = mode_k.iter().map(|k| model.omega(&lattice.momentum_of(k))).collect();
    let amp = model.lambda() * lattice.measure().sqrt();
    let mode_coef: Vec<C> = trunc
        .modes
        .iter()
        .map(|k| C::new(0.0, amp * model.q(&lattice.momentum_of(k))))
        .collect();
    let e_p: Vec<f64> = (0..lattice.len()).map(|i| model.e(&lattice.momentum(i))).collect();

    let h0: Vec<f64> = (0..basis.dim())
        .into_par_iter()
        .map(|i| {
            let (e, ph) = basis.split(i);
            let c = basis.phonons.config(ph);
            e_p[e] + c.iter().zip(&mode_omega).map(|(&n, w)| n as f64 * w).sum::<f64>()
        })
        .collect();

    // A = i lambda L^{-d/2} sum_k Q(k) S_{-k} a_k^dagger, assembled per source row.
    let a_entries: Vec<Vec<(usize, usize, C)>> = (0..basis.dim())
        .into_par_iter()
        .map(|src| {
            let (e, ph) = basis.split(src);
            let mut out = Vec::new();
            for (m, k) in mode_k.iter().enumerate() {
                if mode_coef[m].im == 0.0 {
                    continue;
                }
                let Some(e2) = lattice.shift(e, k, -1) else { continue };
                let Some((ph2, s)) = basis.phonons.raise(ph, m) else { continue };
                out.push((basis.index(e2, ph2), src, mode_coef[m] * s));
            }
            out
        })
        .collect();
    let mut coupling: Vec<Vec<(usize, C)>> = vec![Vec::new(); basis.dim()];
    for (row, col, v) in a_entries.into_iter().flatten() {
        coupling[row].push((col, v));
        coupling[col].push((row, v.conj()));
    }
    coupling.par_iter_mut().for_each(|r| {
        r.sort_by_key(|e| e.0);
        r.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
    });
    Ok(Hamiltonian {
        lattice: lattice.clone(),
        truncation: trunc.clone(),
        basis,
        lambda: model.lambda(),
        h0,
        coupling,
    })
}

impl Hamiltonian {
    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn h0(&self) -> &[f64] {
        &self.h0
    }

    pub fn coupling_rows(&self) -> &[Vec<(usize, C)>] {
        &self.coupling
    }

    pub fn nnz(&self) -> usize {
        self.h0.len() + self.coupling.iter().map(|r| r.len()).sum::<usize>()
    }

    pub fn apply(&self, x: &DVector<C>) -> DVector<C> {
        let y: Vec<C> = (0..self.dim())
            .into_par_iter()
            .map(|i| {
                let mut s = x[i] * self.h0[i];
                for &(j, v) in &self.coupling[i] {
                    s += v * x[j];
                }
                s
            })
            .collect();
        DVector::from_vec(y)
    }

    pub fn coupling_dense(&self) -> DMatrix<C> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.coupling.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] += v;
            }
        }
        m
    }

    pub fn dense(&self) -> DMatrix<C> {
        let mut m = self.coupling_dense();
        for (i, &e) in self.h0.iter().enumerate() {
            m[(i, i)] += e;
        }
        m
    }

    /// max |H_ij - conj(H_ji)| over stored entries.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, row) in self.coupling.iter().enumerate() {
            for &(j, v) in row {
                let back = self.coupling[j]
                    .binary_search_by_key(&i, |e| e.0)
                    .map(|p| self.coupling[j][p].1)
                    .unwrap_or(C::new(0.0, 0.0));
                worst = worst.max((v - back.conj()).norm());
            }
        }
        worst
    }
}

/// sum_{n<=n_max} n x^n / sum_{n<=n_max} x^n.
pub fn truncated_occupation(x: f64, n_max: usize) -> f64 {
    let (mut z, mut s, mut xn) = (0.0, 0.0, 1.0);
    for n in 0..=n_max {
        z += xn;
        s += n as f64 * xn;
        xn *= x;
    }
    s / z
}

/// <a a^dagger> in the truncated geometric state: sum_{n<n_max} (n+1) x^n / Z.
pub fn truncated_anti_occupation(x: f64, n_max: usize) -> f64 {
    let (mut z, mut s, mut xn) = (0.0, 0.0, 1.0);
    for n in 0..=n_max {
        z += xn;
        if n < n_max {
            s += (n + 1) as f64 * xn;
        }
        xn *= x;
    }
    s / z
}

/// Diagonal phonon Gibbs state on the truncated configurations.
#[derive(Clone, Debug)]
pub struct PhononGibbs {
    /// x_m = exp(mu - beta omega(k_m))
    pub x: Vec<f64>,
    pub probs: Vec<f64>,
    pub basis: PhononBasis,
}

impl PhononGibbs {
    pub fn mean_occupation(&self, m: usize) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| p * self.basis.config(i)[m] as f64)
            .sum()
    }

    /// <a_m a_m^dagger> including the cap.
    pub fn mean_anti_occupation(&self, m: usize) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| p * self.basis.raise(i, m).map_or(0.0, |(_, s)| s * s))
            .sum()
    }
}

pub fn gibbs_phonon_state(model: &Model, lattice: &LatticeSpec, trunc: &FockTruncation) -> Result<PhononGibbs> {
    let basis = PhononBasis::new(trunc.modes.len(), trunc.n_max, trunc.n_tot, trunc.dim_cap)?;
    let mut x = Vec::with_capacity(trunc.modes.len());
    for k in &trunc.modes {
        let a = model.beta() * model.omega(&lattice.momentum_of(k)) - model.mu();
        if a.is_nan() || a <= 0.0 {
            return Err(QuantumError::BathUnstable(a));
        }
        x.push((-a).exp());
    }
    let w: Vec<f64> = (0..basis.len())
        .map(|i| {
            basis
                .config(i)
                .iter()
                .zip(&x)
                .map(|(&n, xm)| xm.powi(n as i32))
                .product()
        })
        .collect();
    let z: f64 = w.iter().sum();
    let probs = w.into_iter().map(|v| v / z).collect();
    Ok(PhononGibbs { x, probs, basis })
}

/// Density operator on the truncated space.
#[derive(Clone, Debug)]
pub enum CoupledState {
    Dense(DMatrix<C>),
    /// sum_w p_w |v_w><v_w|
    Mixture(Vec<(f64, DVector<C>)>),
}

impl CoupledState {
    pub fn pure(v: DVector<C>) -> Self {
        let n = v.norm();
        CoupledState::Mixture(vec![(1.0, v / C::new(n, 0.0))])
    }

    pub fn dim(&self) -> usize {
        match self {
            CoupledState::Dense(m) => m.nrows(),
            CoupledState::Mixture(v) => v.first().map_or(0, |x| x.1.len()),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            CoupledState::Dense(m) => m.trace().re,
            CoupledState::Mixture(v) => v.iter().map(|(p, x)| p * x.norm_squared()).sum(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<C> {
        match self {
            CoupledState::Dense(m) => m.clone(),
            CoupledState::Mixture(v) => {
                let n = self.dim();
                let mut m = DMatrix::zeros(n, n);
                for (p, x) in v {
                    m += x * x.adjoint() * C::new(*p, 0.0);
                }
                m
            }
        }
    }

    /// Tr(Gamma H).
    pub fn energy(&self, h: &Hamiltonian) -> f64 {
        match self {
            CoupledState::Dense(m) => {
                let n = m.nrows();
                (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let mut s = m[(i, i)] * h.h0[i];
                        for &(j, v) in &h.coupling[i] {
                            s += v * m[(j, i)];
                        }
                        s.re
                    })
                    .sum()
            }
            CoupledState::Mixture(v) => v.iter().map(|(p, x)| p * x.dotc(&h.apply(x)).re).sum(),
        }
    }

    pub fn hermiticity_defect(&self) -> f64 {
        match self {
            CoupledState::Dense(m) => (m - m.adjoint()).iter().fold(0.0f64, |a, z| a.max(z.norm())),
            CoupledState::Mixture(_) => 0.0,
        }
    }

    /// Ascending spectrum.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = self.to_dense();
        let herm = (&m + m.adjoint()) * C::new(0.5, 0.0);
        let mut v: Vec<f64> = SymmetricEigen::new(herm).eigenvalues.iter().copied().collect();
        v.sort_by(|a, b| a.total_cmp(b));
        v
    }
}

/// gamma_e (x) gamma_ph as a dense matrix.
pub fn product_state(gamma_e: &DensityMatrixGrid, bath: &PhononGibbs, basis: &FockBasis) -> Result<CoupledState> {
    if gamma_e.rho.nrows() != basis.electron_dim || bath.probs.len() != basis.phonons.len() {
        return Err(QuantumError::InvalidArgument("state and basis sizes differ".into()));
    }
    let n = basis.dim();
    let nph = basis.phonons.len();
    let mut m = DMatrix::zeros(n, n);
    for e1 in 0..basis.electron_dim {
        for e2 in 0..basis.electron_dim {
            let g = gamma_e.rho[(e1, e2)];
            if g == C::new(0.0, 0.0) {
                continue;
            }
            for (ph, &p) in bath.probs.iter().enumerate() {
                m[(e1 * nph + ph, e2 * nph + ph)] = g * p;
            }
        }
    }
    Ok(CoupledState::Dense(m))
}

/// |psi_e><psi_e| (x) gamma_ph as a mixture of product vectors.
pub fn product_mixture(psi_e: &[C], bath: &PhononGibbs, basis: &FockBasis) -> Result<CoupledState> {
    if psi_e.len() != basis.electron_dim || bath.probs.len() != basis.phonons.len() {
        return Err(QuantumError::InvalidArgument("state and basis sizes differ".into()));
    }
    let norm = psi_e.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    let nph = basis.phonons.len();
    let out = bath
        .probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(ph, &p)| {
            let mut v = DVector::zeros(basis.dim());
            for (e, a) in psi_e.iter().enumerate() {
                v[e * nph + ph] = a / norm;
            }
            (p, v)
        })
        .collect();
    Ok(CoupledState::Mixture(out))
}

/// gamma_e(p, p') = sum_n Gamma((p, n), (p', n)).
pub fn partial_trace_phonons(state: &CoupledState, h: &Hamiltonian) -> DensityMatrixGrid {
    let ne = h.basis.electron_dim;
    let nph = h.basis.phonons.len();
    let mut rho = DMatrix::zeros(ne, ne);
    match state {
        CoupledState::Dense(m) => {
            for a in 0..ne {
                for b in 0..ne {
                    let mut s = C::new(0.0, 0.0);
                    for ph in 0..nph {
                        s += m[(a * nph + ph, b * nph + ph)];
                    }
                    rho[(a, b)] = s;
                }
            }
        }
        CoupledState::Mixture(v) => {
            for (p, x) in v {
                for a in 0..ne {
                    for b in 0..ne {
                        let mut s = C::new(0.0, 0.0);
                        for ph in 0..nph {
                            s += x[a * nph + ph] * x[b * nph + ph].conj();
                        }
                        rho[(a, b)] += s * *p;
                    }
                }
            }
        }
    }
    DensityMatrixGrid::new(h.lattice.clone(), rho)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveOptions {
    /// Largest dimension handled by dense diagonalization.
    pub dense_limit: usize,
    pub krylov_dim: usize,
    /// Error budget of the Krylov propagator over the whole interval.
    pub krylov_tol: f64,
    pub max_steps: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            dense_limit: 4000,
            krylov_dim: 30,
            krylov_tol: 1e-12,
            max_steps: 100_000,
        }
    }
}

/// Propagator e^{-itH}, by eigendecomposition or Lanczos.
pub struct Evolver<'a> {
    h: &'a Hamiltonian,
    opts: EvolveOptions,
    eigen: Option<(Vec<f64>, DMatrix<C>)>,
}

impl<'a> Evolver<'a> {
    pub fn new(h: &'a Hamiltonian, opts: EvolveOptions) -> Self {
        let eigen = (h.dim() <= opts.dense_limit).then(|| {
            let e = SymmetricEigen::new(h.dense());
            (e.eigenvalues.iter().copied().collect(), e.eigenvectors)
        });
        Self { h, opts, eigen }
    }

    pub fn is_dense(&self) -> bool {
        self.eigen.is_some()
    }

    pub fn spectrum(&self) -> Option<&[f64]> {
        self.eigen.as_ref().map(|e| e.0.as_slice())
    }

    fn unitary(&self, t: f64) -> Option<DMatrix<C>> {
        let (vals, vecs) = self.eigen.as_ref()?;
        let mut scaled = vecs.clone();
        for (j, &l) in vals.iter().enumerate() {
            let ph = C::from_polar(1.0, -t * l);
            for i in 0..scaled.nrows() {
                scaled[(i, j)] *= ph;
            }
        }
        Some(scaled * vecs.adjoint())
    }

    pub fn evolve(&self, state: &CoupledState, t: f64) -> Result<CoupledState> {
        if state.dim() != self.h.dim() {
            return Err(QuantumError::InvalidArgument("state dimension differs from H".into()));
        }
        if let Some(u) = self.unitary(t) {
            return Ok(match state {
                CoupledState::Dense(m) => CoupledState::Dense(&u * m * u.adjoint()),
                CoupledState::Mixture(v) => CoupledState::Mixture(v.iter().map(|(p, x)| (*p, &u * x)).collect()),
            });
        }
        match state {
            CoupledState::Dense(_) => Err(QuantumError::InvalidArgument(format!(
                "dense state of dimension {} above the dense limit {}",
                state.dim(),
                self.opts.dense_limit
            ))),
            CoupledState::Mixture(v) => {
                let out = v
                    .iter()
                    .map(|(p, x)| expv(self.h, x, t, &self.opts).map(|y| (*p, y)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(CoupledState::Mixture(out))
            }
        }
    }
}

pub fn evolve(h: &Hamiltonian, state: &CoupledState, t: f64) -> Result<CoupledState> {
    Evolver::new(h, EvolveOptions::default()).evolve(state, t)
}

/// e^{-itH} v by restarted Lanczos with adaptive substeps.
pub fn expv(h: &Hamiltonian, v: &DVector<C>, t: f64, opts: &EvolveOptions) -> Result<DVector<C>> {
    let total = t.abs();
    let dir = t.signum();
    let mut w = v.clone();
    let mut done = 0.0;
    let mut tau = total;
    let mut steps = 0usize;
    let m = opts.krylov_dim.clamp(2, h.dim().max(2));
    while done < total {
        let beta = w.norm();
        if beta == 0.0 {
            break;
        }
        let mut basis: Vec<DVector<C>> = vec![&w / C::new(beta, 0.0)];
        let mut alpha = Vec::with_capacity(m);
        let mut offd: Vec<f64> = Vec::with_capacity(m);
        let mut breakdown = false;
        for j in 0..m {
            let mut u = h.apply(&basis[j]);
            let a = basis[j].dotc(&u).re;
            alpha.push(a);
            for q in &basis {
                let c = q.dotc(&u);
                u -= q * c;
            }
            for q in &basis {
                let c = q.dotc(&u);
                u -= q * c;
            }
            let b = u.norm();
            if b <= 1e-12 * (a.abs() + offd.last().copied().unwrap_or(0.0) + 1e-300) {
                breakdown = true;
                break;
            }
            offd.push(b);
            if j + 1 < m {
                basis.push(u / C::new(b, 0.0));
            }
        }
        let k = alpha.len();
        let mut tmat = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            tmat[(i, i)] = alpha[i];
            if i + 1 < k {
                tmat[(i, i + 1)] = offd[i];
                tmat[(i + 1, i)] = offd[i];
            }
        }
        let eig = SymmetricEigen::new(tmat);
        let residual = if breakdown { 0.0 } else { offd[k - 1] };
        loop {
            steps += 1;
            if steps > opts.max_steps {
                return Err(QuantumError::StepRejected {
                    error: f64::NAN,
                    budget: opts.krylov_tol,
                });
            }
            tau = tau.min(total - done);
            let mut y = vec![C::new(0.0, 0.0); k];
            for (l, &theta) in eig.eigenvalues.iter().enumerate() {
                let c = eig.eigenvectors[(0, l)] * C::from_polar(1.0, -dir * tau * theta);
                for (i, yi) in y.iter_mut().enumerate() {
                    *yi += c * eig.eigenvectors[(i, l)];
                }
            }
            let err = beta * residual * y[k - 1].norm();
            let budget = opts.krylov_tol * tau / total;
            if err <= budget {
                let mut next = DVector::zeros(w.len());
                for (q, yi) in basis.iter().zip(&y) {
                    next += q * (yi * beta);
                }
                w = next;
                done += tau;
                if done >= total * (1.0 - 1e-15) {
                    done = total;
                }
                tau *= 2.0;
                break;
            }
            if tau < total * 1e-10 {
                return Err(QuantumError::StepRejected { error: err, budget });
            }
            tau *= 0.5;
        }
    }
    Ok(w)
}

/// G#(u, tau) = e^{-i tau omega} N + e^{i tau omega} (N + 1).
pub fn g_sharp(omega: f64, occupation: f64, tau: f64) -> C {
    C::from_polar(occupation, -tau * omega) + C::from_polar(occupation + 1.0, tau * omega)
}

#[derive(Clone, Debug, Serialize)]
pub struct CovarianceSample {
    pub tau: f64,
    pub s: f64,
    pub numeric: C,
    pub exact: C,
}

#[derive(Clone, Debug, Serialize)]
pub struct CovarianceReport {
    pub n_max: usize,
    pub occupation: f64,
    pub truncated_occupation: f64,
    /// max |Tr gamma b_u(tau) b_u(s)^* - G#(u, tau - s)|
    pub max_error: f64,
    /// max |Tr gamma b_u(tau) b_{-u}(s)^*|, exactly zero in the full bath
    pub max_cross: f64,
    /// max |Tr gamma b_u(tau) b_{-u}(tau) + G#(u, 0)|
    pub max_anomalous_error: f64,
    pub samples: Vec<CovarianceSample>,
}

/// Two-point functions of b_{+-u}(tau) = e^{-i tau H_ph} b_{+-u} e^{i tau H_ph}
/// in the truncated Gibbs state of the pair of modes (u, -u).
pub fn covariance_check(model: &Model, u: &[f64], n_max: usize, times: &[(f64, f64)]) -> Result<CovarianceReport> {
    let neg: Vec<f64> = u.iter().map(|x| -x).collect();
    let omega = [model.omega(u), model.omega(&neg)];
    let occ = [model.phonon_occupation(u)?, model.phonon_occupation(&neg)?];
    let basis = PhononBasis::new(2, n_max, None, DEFAULT_DIMENSION_CAP)?;
    let n = basis.len();
    let x: Vec<f64> = omega.iter().map(|w| (model.mu() - model.beta() * w).exp()).collect();
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let c = basis.config(i);
            x[0].powi(c[0] as i32) * x[1].powi(c[1] as i32)
        })
        .collect();
    let z: f64 = w.iter().sum();
    let probs: Vec<f64> = w.iter().map(|v| v / z).collect();
    let energy: Vec<f64> = (0..n)
        .map(|i| {
            let c = basis.config(i);
            c[0] as f64 * omega[0] + c[1] as f64 * omega[1]
        })
        .collect();
    let ladder = |m: usize, create: bool| {
        let mut a = DMatrix::<C>::zeros(n, n);
        for i in 0..n {
            let r = if create { basis.raise(i, m) } else { basis.lower(i, m) };
            if let Some((j, s)) = r {
                a[(j, i)] = C::new(s, 0.0);
            }
        }
        a
    };
    // b_u = a_u^dagger - a_{-u}, b_{-u} = a_{-u}^dagger - a_u
    let b = [ladder(0, true) - ladder(1, false), ladder(1, true) - ladder(0, false)];
    let heis = |op: &DMatrix<C>, t: f64| DMatrix::from_fn(n, n, |i, j| op[(i, j)] * C::from_polar(1.0, -t * (energy[i] - energy[j])));
    let expect = |m: &DMatrix<C>| (0..n).map(|i| m[(i, i)] * probs[i]).sum::<C>();

    let mut report = CovarianceReport {
        n_max,
        occupation: occ[0],
        truncated_occupation: truncated_occupation(x[0], n_max),
        max_error: 0.0,
        max_cross: 0.0,
        max_anomalous_error: 0.0,
        samples: Vec::new(),
    };
    for &(tau, s) in times {
        for (v, bv) in b.iter().enumerate() {
            let bt = heis(bv, tau);
            let bs_star = heis(bv, s).adjoint();
            let numeric = expect(&(&bt * &bs_star));
            let exact = g_sharp(omega[v], occ[v], tau - s);
            report.max_error = report.max_error.max((numeric - exact).norm());
            if v == 0 {
                report.samples.push(CovarianceSample { tau, s, numeric, exact });
            }
            let other = heis(&b[1 - v], s).adjoint();
            report.max_cross = report.max_cross.max(expect(&(&bt * other)).norm());
            let anomalous = expect(&(&bt * heis(&b[1 - v], tau)));
            let want = -(C::new(occ[v], 0.0) + C::new(occ[1 - v] + 1.0, 0.0));
            report.max_anomalous_error = report.max_anomalous_error.max((anomalous - want).norm());
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct CommutatorReport {
    pub states_checked: usize,
    /// max over states below the cap of |([a_k, a_k^dagger] - 1) psi|
    pub canonical_defect: f64,
    /// max |[b_k, b_m] psi| over retained k, m with -k, -m retained
    pub b_defect: f64,
}

type Word = Vec<(usize, bool)>;

fn apply_word(basis: &PhononBasis, word: &[(usize, bool)], start: usize) -> Option<(usize, f64)> {
    let mut i = start;
    let mut c = 1.0;
    for &(m, create) in word.iter().rev() {
        let (j, s) = if create { basis.raise(i, m)? } else { basis.lower(i, m)? };
        i = j;
        c *= s;
    }
    Some((i, c))
}

fn apply_combination(basis: &PhononBasis, terms: &[(f64, Word)], start: usize) -> HashMap<usize, f64> {
    let mut out = HashMap::new();
    for (coef, w) in terms {
        if let Some((j, s)) = apply_word(basis, w, start) {
            *out.entry(j).or_insert(0.0) += coef * s;
        }
    }
    out
}

/// Canonical relations on phonon states with every retained occupation at
/// least two below the cap.
pub fn commutator_check(h: &Hamiltonian) -> CommutatorReport {
    let basis = &h.basis.phonons;
    let modes = &h.truncation.modes;
    let nm = modes.len();
    let partner: Vec<Option<usize>> = modes
        .iter()
        .map(|k| {
            let neg: Vec<i32> = k.iter().map(|x| -x).collect();
            modes.iter().position(|q| *q == neg)
        })
        .collect();
    // b_k = a_k^dagger - a_{-k}
    let b_terms = |m: usize| -> Vec<(f64, (usize, bool))> { vec![(1.0, (m, true)), (-1.0, (partner[m].unwrap(), false))] };
    let below = |i: usize| {
        let c = basis.config(i);
        let total: usize = c.iter().map(|&n| n as usize).sum();
        c.iter().all(|&n| (n as usize) + 2 <= basis.n_max) && basis.n_tot.is_none_or(|cap| total + 2 <= cap)
    };
    let mut report = CommutatorReport {
        states_checked: 0,
        canonical_defect: 0.0,
        b_defect: 0.0,
    };
    for i in (0..basis.len()).filter(|&i| below(i)) {
        report.states_checked += 1;
        for m in 0..nm {
            let terms = vec![(1.0, vec![(m, false), (m, true)]), (-1.0, vec![(m, true), (m, false)])];
            let r = apply_combination(basis, &terms, i);
            let mut defect = 0.0f64;
            for (&j, &v) in &r {
                defect = defect.max((v - if j == i { 1.0 } else { 0.0 }).abs());
            }
            if !r.contains_key(&i) {
                defect = defect.max(1.0);
            }
            report.canonical_defect = report.canonical_defect.max(defect);
        }
        for k in (0..nm).filter(|&k| partner[k].is_some()) {
            for m in (0..nm).filter(|&m| partner[m].is_some()) {
                let mut terms = Vec::new();
                for (c1, o1) in b_terms(k) {
                    for (c2, o2) in b_terms(m) {
                        terms.push((c1 * c2, vec![o1, o2]));
                        terms.push((-c1 * c2, vec![o2, o1]));
                    }
                }
                let r = apply_combination(basis, &terms, i);
                let defect = r.values().fold(0.0f64, |a, v| a.max(v.abs()));
                report.b_defect = report.b_defect.max(defect);
            }
        }
    }
    report
}

#[derive(Clone, Debug, Serialize)]
pub struct LadderReport {
    /// Tr U_1 Gamma_0 U_1^* with U_1 the first-order Duhamel term.
    pub perturbative: f64,
    /// Finite-sum evaluation of the ladder integral with truncated bath weights.
    pub formula: f64,
    pub discrepancy: f64,
    /// Estimate of the weight lost to the occupancy cap relative to an
    /// untruncated bath.
    pub cap_weight: f64,
    pub lambda: f64,
    pub t: f64,
    pub oracle_only: bool,
}

/// |int_0^t e^{-i s A} e^{-i (t - s) B} ds|^2 = 4 sin^2(t D / 2) / D^2, D = A - B.
fn sinc_kernel(t: f64, d: f64) -> f64 {
    let x = t * d;
    if x.abs() < 1e-4 {
        t * t * (1.0 - x * x / 12.0)
    } else {
        let s = (0.5 * x).sin();
        4.0 * s * s / (d * d)
    }
}

/// The one-phonon ladder term Tr E Gamma_0 E^* for a product initial state,
/// once from the truncated Hamiltonian by time-dependent perturbation theory
/// and once from the closed-form ladder integral with the phonon two-point
/// function. With a single phonon line there is one Wick pairing, so the two
/// agree at every finite lattice.
pub fn ladder_term_check(
    model: &Model,
    lattice: &LatticeSpec,
    trunc: &FockTruncation,
    gamma_e: &DensityMatrixGrid,
    lambda: f64,
    t: f64,
) -> Result<LadderReport> {
    let model = model.with(|c| c.lambda = lambda)?;
    let h = build_hamiltonian(&model, lattice, trunc)?;
    let bath = gibbs_phonon_state(&model, lattice, trunc)?;
    let gamma0 = product_state(gamma_e, &bath, &h.basis)?.to_dense();

    // route (a): U_1 = -i int_0^t e^{-i(t-s)H_0} H_ep e^{-isH_0} ds
    let e0 = h.h0();
    let (lo, hi) = e0.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let panels = ((t * (hi - lo)).abs() / 2.0).ceil() as usize + 2;
    let mut nodes = Vec::new();
    for j in 0..panels {
        let (a, b) = (t * j as f64 / panels as f64, t * (j + 1) as f64 / panels as f64);
        let (x, w) = gauss_legendre_on(20, a, b);
        nodes.extend(x.into_iter().zip(w));
    }
    let n = h.dim();
    let mut u1 = DMatrix::<C>::zeros(n, n);
    for (a, row) in h.coupling_rows().iter().enumerate() {
        for &(b, v) in row {
            let integral: C = nodes
                .iter()
                .map(|&(s, w)| C::from_polar(w, -(t - s) * e0[a] - s * e0[b]))
                .sum();
            u1[(a, b)] = C::new(0.0, -1.0) * v * integral;
        }
    }
    let perturbative = (&u1 * &gamma0 * u1.adjoint()).trace().re;

    // route (b): lambda^2 sum_sigma int dk M(k, sigma) int dp gamma^(p, p) |Y|
    let measure = lattice.measure();
    let mut formula = 0.0;
    let mut cap_weight = 0.0;
    for (slot, q_mode) in trunc.modes.iter().enumerate() {
        let k_mode = lattice.momentum_of(q_mode);
        let emit_w = bath.mean_anti_occupation(slot);
        let absorb_w = bath.mean_occupation(slot);
        let full_emit = model.phonon_occupation(&k_mode)? + 1.0;
        let neg_mode: Vec<f64> = k_mode.iter().map(|x| -x).collect();
        for p in 0..lattice.len() {
            let rho = gamma_e.rho[(p, p)].re;
            if rho == 0.0 {
                continue;
            }
            let pm = lattice.momentum(p);
            let ep = model.e(&pm);
            // emission: k = q, p_0 = p - k, Omega_0 = omega(k)
            if let Some(p0) = lattice.shift(p, q_mode, -1) {
                let qk = model.q(&k_mode);
                let mk = qk * qk * emit_w;
                let d = model.e(&lattice.momentum(p0)) + model.omega(&k_mode) - ep;
                formula += lambda * lambda * measure * mk * rho * sinc_kernel(t, d);
                cap_weight += lambda * lambda * measure * qk * qk * (full_emit - emit_w) * rho * t * t;
            }
            // absorption: k = -q, p_0 = p - k, Omega_0 = -omega(k)
            if let Some(p0) = lattice.shift(p, q_mode, 1) {
                let qk = model.q(&neg_mode);
                let mk = qk * qk * absorb_w;
                let d = model.e(&lattice.momentum(p0)) - model.omega(&neg_mode) - ep;
                formula += lambda * lambda * measure * mk * rho * sinc_kernel(t, d);
                cap_weight += lambda * lambda * measure * qk * qk * (full_emit - 1.0 - absorb_w) * rho * t * t;
            }
        }
    }
    Ok(LadderReport {
        perturbative,
        formula,
        discrepancy: (perturbative - formula).abs(),
        cap_weight,
        lambda,
        t,
        oracle_only: model.is_toy_dimension(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_count_with_total_cap() {
        assert_eq!(count_configs(3, 2, None), 27);
        // sum <= 2 with each <= 2 over 3 modes: 1 + 3 + 6
        assert_eq!(count_configs(3, 2, Some(2)), 10);
        let b = PhononBasis::new(3, 2, Some(2), 100).unwrap();
        assert_eq!(b.len(), 10);
    }

    #[test]
    fn sinc_kernel_small_argument() {
        let t = 2.0;
        let a = sinc_kernel(t, 1e-3);
        let b = 4.0 * (0.5e-3 * t).sin().powi(2) / 1e-6;
        assert!((a - b).abs() < 1e-10);
    }
}
