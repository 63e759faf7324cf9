//! Wigner transforms of electron density matrices on a momentum lattice,
//! their macroscopic rescaling, test-function pairings and WKB states.
//!
//! Momenta p, p' on the lattice h Z^d (h = sqrt(2 pi) / L) give
//! xi = p - p' on the lattice and v = (p + p') / 2 on the half-spacing grid.
//! For fixed v the admissible xi form one parity class of spacing 2h, so
//!
//!   W(x, v) = (2 / L)^d sum_xi e^{i xi x} W^(xi, v),   W^(xi, v) = gamma^(v + xi/2, v - xi/2),
//!
//! and a sum over the half grid carries the weight (2L)^{-d}. All integrals
//! use Lebesgue measure divided by (2 pi)^{d/2}.

pub use crate::lattice::DensityMatrixGrid;
use crate::lattice::LatticeSpec;
use crate::quadrature::{gauss_legendre, gauss_legendre_on};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WignerError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("density matrix is not Hermitian (defect {0:e})")]
    NotHermitian(f64),
    #[error("test function norm {norm} exceeds cap {cap}")]
    NormUnbounded { norm: f64, cap: f64 },
    #[error("pairing routes disagree: phase space {phase_space}, trace {trace}, tolerance {tol:e}")]
    PairingMismatch { phase_space: f64, trace: f64, tol: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, WignerError>;

/// Momentum-space kernel gamma^(p_i, p_j) of an electron state.
pub trait MomentumKernel: Sync {
    fn lattice(&self) -> &LatticeSpec;
    fn kernel(&self, i: usize, j: usize) -> C;
    fn hermiticity_defect(&self) -> f64;
}

impl MomentumKernel for DensityMatrixGrid {
    fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }
    fn kernel(&self, i: usize, j: usize) -> C {
        DensityMatrixGrid::kernel(self, i, j)
    }
    fn hermiticity_defect(&self) -> f64 {
        DensityMatrixGrid::hermiticity_defect(self)
    }
}

/// Pure state |psi><psi| stored through psi^(p); no normalization imposed.
#[derive(Clone, Debug, PartialEq)]
pub struct PureStateGrid {
    pub lattice: LatticeSpec,
    pub amp: Vec<C>,
}

impl PureStateGrid {
    pub fn from_fn(lattice: LatticeSpec, f: impl Fn(&[f64]) -> C + Sync) -> Self {
        let amp = (0..lattice.len()).into_par_iter().map(|i| f(&lattice.momentum(i))).collect();
        Self { lattice, amp }
    }

    /// ||psi||^2 = L^{-d} sum_p |psi^(p)|^2.
    pub fn norm2(&self) -> f64 {
        self.lattice.measure() * self.amp.iter().map(|a| a.norm_sqr()).sum::<f64>()
    }

    pub fn to_density_matrix(&self) -> DensityMatrixGrid {
        let n = self.amp.len();
        let m = self.lattice.measure();
        let rho = DMatrix::from_fn(n, n, |i, j| self.amp[i] * self.amp[j].conj() * m);
        DensityMatrixGrid::new(self.lattice.clone(), rho)
    }
}

impl MomentumKernel for PureStateGrid {
    fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }
    fn kernel(&self, i: usize, j: usize) -> C {
        self.amp[i] * self.amp[j].conj()
    }
    fn hermiticity_defect(&self) -> f64 {
        0.0
    }
}

/// Wigner function of a lattice state, rescaled by `epsilon`
/// (W^eps(X, V) = eps^{-d} W(X / eps, V)).
pub struct WignerGrid<'a> {
    source: &'a dyn MomentumKernel,
    pub epsilon: f64,
}

pub fn wigner_transform(gamma: &dyn MomentumKernel) -> Result<WignerGrid<'_>> {
    let defect = gamma.hermiticity_defect();
    if defect > 1e-12 {
        return Err(WignerError::NotHermitian(defect));
    }
    Ok(WignerGrid {
        source: gamma,
        epsilon: 1.0,
    })
}

pub fn rescale<'a>(w: &WignerGrid<'a>, epsilon: f64) -> Result<WignerGrid<'a>> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(WignerError::InvalidArgument(format!("epsilon = {epsilon} outside (0, 1]")));
    }
    Ok(WignerGrid {
        source: w.source,
        epsilon: w.epsilon * epsilon,
    })
}

fn to_index(x: &[f64], scale: f64, what: &str) -> Result<Vec<i32>> {
    x.iter()
        .map(|&c| {
            let r = (c / scale).round();
            if (c / scale - r).abs() > 1e-9 {
                Err(WignerError::GridMismatch(format!("{what} component {c} is off the grid")))
            } else {
                Ok(r as i32)
            }
        })
        .collect()
}

impl<'a> WignerGrid<'a> {
    pub fn lattice(&self) -> &LatticeSpec {
        self.source.lattice()
    }

    fn v2_index(&self, v: &[f64]) -> Result<Vec<i32>> {
        to_index(v, 0.5 * self.lattice().spacing(), "v")
    }

    /// W^(xi, v) = gamma^(v + xi/2, v - xi/2).
    pub fn hat(&self, xi: &[f64], v: &[f64]) -> Result<C> {
        let lat = self.lattice();
        let k = to_index(xi, lat.spacing(), "xi")?;
        let v2 = self.v2_index(v)?;
        let mut a = Vec::with_capacity(k.len());
        let mut b = Vec::with_capacity(k.len());
        for (s, d) in v2.iter().zip(&k) {
            if (s + d) % 2 != 0 {
                return Err(WignerError::GridMismatch("v +- xi/2 leaves the lattice".into()));
            }
            a.push((s + d) / 2);
            b.push((s - d) / 2);
        }
        match (lat.find(&a), lat.find(&b)) {
            (Some(i), Some(j)) => Ok(self.source.kernel(i, j)),
            _ => Ok(C::new(0.0, 0.0)),
        }
    }

    /// Pairs (xi, W^(xi, v)) of the parity class of v.
    pub fn class(&self, v2: &[i32]) -> Vec<(Vec<f64>, C)> {
        let lat = self.lattice();
        let h = lat.spacing();
        (0..lat.len())
            .filter_map(|i| {
                let a = lat.index(i);
                let b: Vec<i32> = v2.iter().zip(a).map(|(s, x)| s - x).collect();
                let j = lat.find(&b)?;
                let xi = a.iter().zip(&b).map(|(x, y)| (x - y) as f64 * h).collect();
                Some((xi, self.source.kernel(i, j)))
            })
            .collect()
    }

    /// Half-grid points v (as 2v / h) with a nonempty class.
    pub fn half_grid(&self) -> Vec<Vec<i32>> {
        let lat = self.lattice();
        let mut set: Vec<Vec<i32>> = Vec::new();
        let mut seen = HashSet::new();
        for i in 0..lat.len() {
            for j in 0..lat.len() {
                let v2: Vec<i32> = lat.index(i).iter().zip(lat.index(j)).map(|(a, b)| a + b).collect();
                if seen.insert(v2.clone()) {
                    set.push(v2);
                }
            }
        }
        set.sort();
        set
    }

    pub fn half_grid_momentum(&self, v2: &[i32]) -> Vec<f64> {
        let h = 0.5 * self.lattice().spacing();
        v2.iter().map(|&j| j as f64 * h).collect()
    }

    fn raw_value(&self, x: &[f64], class: &[(Vec<f64>, C)]) -> C {
        let lat = self.lattice();
        let pref = (2.0 / lat.box_size()).powi(lat.dim() as i32);
        let s: C = class
            .iter()
            .map(|(xi, w)| w * C::from_polar(1.0, xi.iter().zip(x).map(|(a, b)| a * b).sum()))
            .sum();
        s * pref
    }

    /// Complex value of W^eps(X, V); the imaginary part vanishes for Hermitian states.
    pub fn value_complex(&self, x: &[f64], v: &[f64]) -> Result<C> {
        let v2 = self.v2_index(v)?;
        let class = self.class(&v2);
        let micro: Vec<f64> = x.iter().map(|c| c / self.epsilon).collect();
        Ok(self.raw_value(&micro, &class) * self.epsilon.powi(-(x.len() as i32)))
    }

    pub fn value(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        self.value_complex(x, v).map(|z| z.re)
    }

    /// (2L)^{-d} sum_v W(x, v), equal to gamma(x, x).
    pub fn position_marginal(&self, x: &[f64]) -> f64 {
        let lat = self.lattice();
        let w = (2.0 * lat.box_size()).powi(-(lat.dim() as i32));
        let micro: Vec<f64> = x.iter().map(|c| c / self.epsilon).collect();
        let s: f64 = self
            .half_grid()
            .par_iter()
            .map(|v2| self.raw_value(&micro, &self.class(v2)).re)
            .sum();
        s * w * self.epsilon.powi(-(x.len() as i32))
    }
}

/// Tr gamma = L^{-d} sum_p gamma^(p, p).
pub fn trace(gamma: &dyn MomentumKernel) -> f64 {
    let lat = gamma.lattice();
    lat.measure() * (0..lat.len()).map(|i| gamma.kernel(i, i).re).sum::<f64>()
}

/// gamma(x, x) = L^{-2d} sum_{p, p'} e^{i (p - p') x} gamma^(p, p').
pub fn position_density(gamma: &dyn MomentumKernel, x: &[f64]) -> f64 {
    let lat = gamma.lattice();
    let n = lat.len();
    let phase: Vec<C> = (0..n)
        .map(|i| C::from_polar(1.0, lat.momentum(i).iter().zip(x).map(|(a, b)| a * b).sum()))
        .collect();
    let s: C = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| gamma.kernel(i, j) * phase[i] * phase[j].conj()).sum::<C>())
        .sum();
    s.re * lat.measure() * lat.measure()
}

/// One term coeff * prod_i (X_i - c_i)^{n_i} e^{-|X - c|^2 / (2 s^2)} * g(V) with
/// g(V) = e^{-|V - v0|^2 / (2 w^2)}, or g = 1 when `v_width` is None.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianTerm {
    pub coeff: f64,
    pub x_center: Vec<f64>,
    pub x_width: f64,
    /// Per-axis monomial degree, at most 2.
    #[serde(default)]
    pub powers: Vec<u8>,
    #[serde(default)]
    pub v_center: Vec<f64>,
    #[serde(default)]
    pub v_width: Option<f64>,
}

/// Real test functions with closed-form Fourier transform in X.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunction {
    pub terms: Vec<GaussianTerm>,
}

/// int e^{-i xi y} y^n e^{-y^2 / (2 s^2)} dy / sqrt(2 pi)
fn hermite_fourier(n: u8, s: f64, xi: f64) -> C {
    let e = s * (-0.5 * s * s * xi * xi).exp();
    match n {
        0 => C::new(e, 0.0),
        1 => C::new(0.0, -s * s * xi * e),
        2 => C::new(s * s * (1.0 - s * s * xi * xi) * e, 0.0),
        _ => unreachable!("degree checked at construction"),
    }
}

impl GaussianTerm {
    fn power(&self, i: usize) -> u8 {
        self.powers.get(i).copied().unwrap_or(0)
    }

    fn v_factor(&self, v: &[f64]) -> f64 {
        match self.v_width {
            None => 1.0,
            Some(w) => {
                let r2: f64 = v.iter().zip(&self.v_center).map(|(a, b)| (a - b) * (a - b)).sum();
                (-0.5 * r2 / (w * w)).exp()
            }
        }
    }

    pub fn value(&self, x: &[f64], v: &[f64]) -> f64 {
        let mut r2 = 0.0;
        let mut poly = 1.0;
        for (i, (a, c)) in x.iter().zip(&self.x_center).enumerate() {
            let y = a - c;
            r2 += y * y;
            poly *= y.powi(self.power(i) as i32);
        }
        self.coeff * poly * (-0.5 * r2 / (self.x_width * self.x_width)).exp() * self.v_factor(v)
    }

    pub fn fourier(&self, xi: &[f64], v: &[f64]) -> C {
        let mut f = C::new(self.coeff * self.v_factor(v), 0.0);
        let mut shift = 0.0;
        for (i, (k, c)) in xi.iter().zip(&self.x_center).enumerate() {
            f *= hermite_fourier(self.power(i), self.x_width, *k);
            shift += k * c;
        }
        f * C::from_polar(1.0, -shift)
    }
}

impl TestFunction {
    pub fn single(term: GaussianTerm) -> Self {
        Self { terms: vec![term] }
    }

    /// A wide Gaussian in X, constant in V; approximates J = 1.
    pub fn mollified_one(dim: usize, width: f64) -> Self {
        Self::single(GaussianTerm {
            coeff: 1.0,
            x_center: vec![0.0; dim],
            x_width: width,
            powers: vec![],
            v_center: vec![],
            v_width: None,
        })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for t in &self.terms {
            if t.x_center.len() != dim || t.powers.len() > dim || (t.v_width.is_some() && t.v_center.len() != dim) {
                return Err(WignerError::InvalidArgument("test function dimension mismatch".into()));
            }
            if t.powers.iter().any(|&p| p > 2) {
                return Err(WignerError::InvalidArgument("monomial degree above 2".into()));
            }
            if !(t.x_width > 0.0) || t.v_width.is_some_and(|w| !(w > 0.0)) {
                return Err(WignerError::InvalidArgument("widths must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64], v: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.value(x, v)).sum()
    }

    /// J^(xi, v) = int e^{-i xi X} J(X, v) dX.
    pub fn fourier(&self, xi: &[f64], v: &[f64]) -> C {
        self.terms.iter().map(|t| t.fourier(xi, v)).sum()
    }

    /// J^_eps(xi, v) = eps^{-d} J^(xi / eps, v).
    pub fn fourier_scaled(&self, xi: &[f64], v: &[f64], eps: f64) -> C {
        let k: Vec<f64> = xi.iter().map(|x| x / eps).collect();
        self.fourier(&k, v) * eps.powi(-(xi.len() as i32))
    }

    /// Upper bound for int sup_v |J^(xi, v)| d xi; independent of eps.
    pub fn jeps_norm(&self) -> f64 {
        let (x, w) = gauss_legendre(64);
        self.terms
            .iter()
            .map(|t| {
                let mut f = t.coeff.abs();
                for i in 0..t.x_center.len() {
                    let n = t.power(i);
                    let r = 14.0 / t.x_width;
                    let mut s = 0.0;
                    // split at the zeros of the degree-2 transform
                    for (a, b) in [(-r, -1.0 / t.x_width), (-1.0 / t.x_width, 0.0), (0.0, 1.0 / t.x_width), (1.0 / t.x_width, r)] {
                        for (xi, wi) in x.iter().zip(&w) {
                            let k = 0.5 * (a + b) + 0.5 * (b - a) * xi;
                            s += 0.5 * (b - a) * wi * hermite_fourier(n, t.x_width, k).norm();
                        }
                    }
                    f *= s / (2.0 * PI).sqrt();
                }
                f
            })
            .sum()
    }

    /// L^{-d} sum over the full dual lattice of sup_v |J^_eps(xi, v)|.
    pub fn jeps_norm_grid(&self, lattice: &LatticeSpec, eps: f64) -> f64 {
        let h = lattice.spacing();
        let l = lattice.box_size();
        self.terms
            .iter()
            .map(|t| {
                let mut f = t.coeff.abs();
                for i in 0..t.x_center.len() {
                    let n = t.power(i);
                    let kmax = 16.0 * eps / t.x_width;
                    let jmax = (kmax / h).ceil() as i64;
                    let s: f64 = (-jmax..=jmax)
                        .map(|j| hermite_fourier(n, t.x_width, j as f64 * h / eps).norm() / eps)
                        .sum();
                    f *= s / l;
                }
                f
            })
            .sum()
    }
}

/// O_eps(u, v) = J^_eps(u - v, (u + v) / 2) on the lattice.
pub fn observable_kernel(j: &TestFunction, eps: f64, lattice: &LatticeSpec) -> DMatrix<C> {
    let n = lattice.len();
    let mom: Vec<Vec<f64>> = (0..n).map(|i| lattice.momentum(i)).collect();
    let rows: Vec<Vec<C>> = (0..n)
        .into_par_iter()
        .map(|a| {
            (0..n)
                .map(|b| {
                    let xi: Vec<f64> = mom[a].iter().zip(&mom[b]).map(|(x, y)| x - y).collect();
                    let v: Vec<f64> = mom[a].iter().zip(&mom[b]).map(|(x, y)| 0.5 * (x + y)).collect();
                    j.fourier_scaled(&xi, &v, eps)
                })
                .collect()
        })
        .collect();
    DMatrix::from_fn(n, n, |a, b| rows[a][b])
}

/// Tr(gamma O_eps) = L^{-2d} sum_{p, p'} gamma^(p, p') O_eps(p', p).
pub fn trace_pairing(gamma: &dyn MomentumKernel, j: &TestFunction, eps: f64) -> C {
    let lat = gamma.lattice();
    let n = lat.len();
    let mom: Vec<Vec<f64>> = (0..n).map(|i| lat.momentum(i)).collect();
    let s: C = (0..n)
        .into_par_iter()
        .map(|a| {
            let mut acc = C::new(0.0, 0.0);
            for b in 0..n {
                let g = gamma.kernel(a, b);
                if g == C::new(0.0, 0.0) {
                    continue;
                }
                let xi: Vec<f64> = mom[b].iter().zip(&mom[a]).map(|(x, y)| x - y).collect();
                let v: Vec<f64> = mom[a].iter().zip(&mom[b]).map(|(x, y)| 0.5 * (x + y)).collect();
                acc += g * j.fourier_scaled(&xi, &v, eps);
            }
            acc
        })
        .sum();
    s * lat.measure() * lat.measure()
}

/// Tensor Gauss-Legendre nodes over a box with normalized weights.
fn box_rule(lo: &[f64], hi: &[f64], panel: f64) -> Vec<(Vec<f64>, f64)> {
    let norm = (2.0 * PI).sqrt();
    let mut pts = vec![(vec![], 1.0)];
    for (a, b) in lo.iter().zip(hi) {
        let panels = ((b - a) / panel).ceil().max(1.0) as usize;
        let mut axis = Vec::new();
        for k in 0..panels {
            let (x, w) = gauss_legendre_on(16, a + (b - a) * k as f64 / panels as f64, a + (b - a) * (k + 1) as f64 / panels as f64);
            axis.extend(x.into_iter().zip(w.into_iter().map(|w| w / norm)));
        }
        pts = pts
            .into_iter()
            .flat_map(|(p, w): (Vec<f64>, f64)| {
                axis.iter().map(move |&(x, wx)| {
                    let mut q = p.clone();
                    q.push(x);
                    (q, w * wx)
                })
            })
            .collect();
    }
    pts
}

/// <J, W^eps> = int int J(X, V) W^eps(X, V) dX dV with the V integral the
/// half-grid sum and the X integral by quadrature. Returns the complex value;
/// its imaginary part measures round-off.
pub fn pair(w: &WignerGrid<'_>, j: &TestFunction) -> Result<C> {
    let lat = w.lattice();
    let d = lat.dim();
    j.validate(d)?;
    let eps = w.epsilon;
    let classes: Vec<(Vec<f64>, Vec<(Vec<f64>, C)>)> = w
        .half_grid()
        .into_iter()
        .map(|v2| {
            let c = w.class(&v2);
            (w.half_grid_momentum(&v2), c)
        })
        .collect();
    let xi_max = classes
        .iter()
        .flat_map(|(_, c)| c.iter().map(|(xi, _)| xi.iter().fold(0.0f64, |a, b| a.max(b.abs()))))
        .fold(0.0f64, f64::max);
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut smin = f64::INFINITY;
    for t in &j.terms {
        for i in 0..d {
            lo[i] = lo[i].min(t.x_center[i] - 10.0 * t.x_width);
            hi[i] = hi[i].max(t.x_center[i] + 10.0 * t.x_width);
        }
        smin = smin.min(t.x_width);
    }
    let panel = (0.5 * smin).min(if xi_max > 0.0 { 3.0 * eps / xi_max } else { f64::INFINITY });
    let rule = box_rule(&lo, &hi, panel);
    let weight = lat.measure() * lat.measure();
    let total: C = classes
        .par_iter()
        .map(|(v, class)| {
            let mut acc = C::new(0.0, 0.0);
            for (x, wx) in &rule {
                let jv = j.value(x, v);
                if jv == 0.0 {
                    continue;
                }
                let s: C = class
                    .iter()
                    .map(|(xi, hat)| hat * C::from_polar(1.0, xi.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / eps))
                    .sum();
                acc += s * (jv * wx);
            }
            acc
        })
        .sum();
    Ok(total * weight * eps.powi(-(d as i32)))
}

#[derive(Clone, Debug, Serialize)]
pub struct PairingReport {
    pub phase_space: f64,
    pub trace: f64,
    pub discrepancy: f64,
    pub imaginary: f64,
}

/// Both sides of <J, W^eps_gamma> = Tr(gamma O_eps); errors when they differ by
/// more than `tol` (relative to max(1, |trace|)).
pub fn check_pairing(gamma: &dyn MomentumKernel, j: &TestFunction, eps: f64, tol: f64) -> Result<PairingReport> {
    let w = rescale(&wigner_transform(gamma)?, eps)?;
    let ps = pair(&w, j)?;
    let tr = trace_pairing(gamma, j, eps);
    let discrepancy = (ps - tr).norm();
    let report = PairingReport {
        phase_space: ps.re,
        trace: tr.re,
        discrepancy,
        imaginary: ps.im.abs().max(tr.im.abs()),
    };
    if discrepancy > tol * tr.norm().max(1.0) {
        return Err(WignerError::PairingMismatch {
            phase_space: ps.re,
            trace: tr.re,
            tol,
        });
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct NormReport {
    /// ||O_eps O_eps^*|| on the lattice, by power iteration.
    pub operator_norm_sq: f64,
    /// L^{-d} sum_xi sup_v |J^_eps|, a Schur bound for ||O_eps||.
    pub grid_norm: f64,
    pub continuum_norm: f64,
    pub iterations: usize,
}

pub fn operator_norm_check(j: &TestFunction, eps: f64, lattice: &LatticeSpec, cap: f64) -> Result<NormReport> {
    j.validate(lattice.dim())?;
    let continuum_norm = j.jeps_norm();
    if continuum_norm > cap {
        return Err(WignerError::NormUnbounded {
            norm: continuum_norm,
            cap,
        });
    }
    let m = observable_kernel(j, eps, lattice) * C::new(lattice.measure(), 0.0);
    let mh = m.adjoint();
    let n = lattice.len();
    let mut x = DVector::from_fn(n, |i, _| C::new(1.0 + 0.1 * (i as f64).sin(), 0.05 * i as f64));
    x /= C::new(x.norm(), 0.0);
    let mut lambda = 0.0;
    let mut iterations = 0;
    for it in 0..2000 {
        let y = &m * (&mh * &x);
        let next = y.norm();
        iterations = it + 1;
        if next == 0.0 {
            lambda = 0.0;
            break;
        }
        x = y / C::new(next, 0.0);
        if (next - lambda).abs() <= 1e-12 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    Ok(NormReport {
        operator_norm_sq: lambda,
        grid_norm: j.jeps_norm_grid(lattice, eps),
        continuum_norm,
        iterations,
    })
}

/// psi^eps(x) = eps^{d/2} A(eps x) e^{i S(eps x) / eps} with
/// A(X) = a e^{-|X - X0|^2 / (2 sigma^2)} and S(X) = xi0 . X + kappa |X - X0|^2 / 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WkbState {
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub width: f64,
    pub xi0: Vec<f64>,
    #[serde(default)]
    pub curvature: f64,
}

impl WkbState {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn amplitude_at(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        self.amplitude * (-0.5 * r2 / (self.width * self.width)).exp()
    }

    pub fn grad_phase(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .zip(&self.xi0)
            .map(|((a, c), k)| k + self.curvature * (a - c))
            .collect()
    }

    /// int |A|^2 dX = a^2 (sigma / sqrt 2)^d.
    pub fn mass(&self) -> f64 {
        self.amplitude.powi(2) * (self.width / 2f64.sqrt()).powi(self.dim() as i32)
    }

    fn alpha(&self, eps: f64) -> C {
        C::new(eps * eps / (2.0 * self.width * self.width), -0.5 * self.curvature * eps)
    }

    /// psi^(p) of the continuum wavefunction (closed-form Gaussian chirp).
    pub fn fourier(&self, p: &[f64], eps: f64) -> C {
        let alpha = self.alpha(eps);
        let mut f = C::new(eps.powf(0.5 * self.dim() as f64) * self.amplitude, 0.0);
        for ((pi, ki), ci) in p.iter().zip(&self.xi0).zip(&self.center) {
            let x0 = ci / eps;
            let q = pi - ki;
            f *= (2.0 * alpha).sqrt().inv() * (-(q * q) / (4.0 * alpha)).exp() * C::from_polar(1.0, -q * x0);
        }
        f
    }

    /// Lattice large enough to hold psi^eps in position and momentum space.
    pub fn lattice(&self, eps: f64) -> Result<LatticeSpec> {
        let reach = self.center.iter().fold(0.0f64, |a, c| a.max(c.abs())) / eps + 9.0 * self.width / eps;
        let l = 2.0 * reach / (2.0 * PI).sqrt();
        let h = (2.0 * PI).sqrt() / l;
        let alpha = self.alpha(eps);
        let decay = (C::new(0.25, 0.0) / alpha).re;
        let half = (40.0 / decay).sqrt();
        let ranges: Vec<(i32, i32)> = self
            .xi0
            .iter()
            .map(|k| (((k - half) / h).floor() as i32, ((k + half) / h).ceil() as i32))
            .collect();
        let count: f64 = ranges.iter().map(|(a, b)| (b - a + 1) as f64).product();
        if count > 2e4 {
            return Err(WignerError::InvalidArgument(format!("WKB lattice of {count} points is too large")));
        }
        let mut pts = vec![vec![]];
        for &(a, b) in &ranges {
            pts = pts
                .into_iter()
                .flat_map(|p: Vec<i32>| {
                    (a..=b).map(move |j| {
                        let mut q = p.clone();
                        q.push(j);
                        q
                    })
                })
                .collect();
        }
        Ok(LatticeSpec::from_indices(self.dim(), l, pts))
    }

    pub fn grid_state(&self, eps: f64) -> Result<PureStateGrid> {
        let lat = self.lattice(eps)?;
        Ok(PureStateGrid::from_fn(lat, |p| self.fourier(p, eps)))
    }

    /// int J(X, grad S(X)) |A(X)|^2 dX.
    pub fn limit_pairing(&self, j: &TestFunction) -> f64 {
        let lo: Vec<f64> = self.center.iter().map(|c| c - 9.0 * self.width).collect();
        let hi: Vec<f64> = self.center.iter().map(|c| c + 9.0 * self.width).collect();
        box_rule(&lo, &hi, 0.25 * self.width)
            .into_iter()
            .map(|(x, w)| w * j.value(&x, &self.grad_phase(&x)) * self.amplitude_at(&x).powi(2))
            .sum()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WkbEntry {
    pub epsilon: f64,
    pub lattice_points: usize,
    pub norm2: f64,
    pub pairing: f64,
    pub defect: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct WkbReport {
    pub limit: f64,
    pub mass: f64,
    pub entries: Vec<WkbEntry>,
    /// Defects strictly decrease along the given eps sequence.
    pub monotone: bool,
}

pub fn wkb_wigner_limit_check(state: &WkbState, j: &TestFunction, eps_list: &[f64]) -> Result<WkbReport> {
    j.validate(state.dim())?;
    let limit = state.limit_pairing(j);
    let mut entries = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let psi = state.grid_state(eps)?;
        let pairing = trace_pairing(&psi, j, eps).re;
        entries.push(WkbEntry {
            epsilon: eps,
            lattice_points: psi.lattice.len(),
            norm2: psi.norm2(),
            pairing,
            defect: (pairing - limit).abs(),
        });
    }
    let monotone = entries.windows(2).all(|w| w[1].defect < w[0].defect);
    Ok(WkbReport {
        limit,
        mass: state.mass(),
        entries,
        monotone,
    })
}
