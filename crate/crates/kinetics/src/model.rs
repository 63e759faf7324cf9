//! Physical model: dispersion relations, coupling, bath parameters and the
//! runtime validation of the standing assumptions.

use crate::vecmath::{bracket, norm, norm2};
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("bath unstable: beta*omega - mu = {0} <= 0")]
    BathUnstable(f64),
    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
}

/// Dispersion relation registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dispersion {
    /// scale * |k|^2 / 2
    Quadratic {
        #[serde(default = "one")]
        scale: f64,
    },
    /// |k|^2 / 2 + eps * sum_i (1 - cos k_i)
    QuadraticPlusEpsCos { eps: f64 },
    ConstantOmega { omega: f64 },
    /// sqrt(omega0^2 + c^2 |k|^2)
    AcousticSoft { omega0: f64, c: f64 },
}

fn one() -> f64 {
    1.0
}

impl Dispersion {
    pub fn value(&self, k: &[f64]) -> f64 {
        match *self {
            Dispersion::Quadratic { scale } => 0.5 * scale * norm2(k),
            Dispersion::QuadraticPlusEpsCos { eps } => {
                0.5 * norm2(k) + eps * k.iter().map(|x| 1.0 - x.cos()).sum::<f64>()
            }
            Dispersion::ConstantOmega { omega } => omega,
            Dispersion::AcousticSoft { omega0, c } => (omega0 * omega0 + c * c * norm2(k)).sqrt(),
        }
    }

    pub fn gradient(&self, k: &[f64], out: &mut [f64]) {
        match *self {
            Dispersion::Quadratic { scale } => {
                for (o, x) in out.iter_mut().zip(k) {
                    *o = scale * x;
                }
            }
            Dispersion::QuadraticPlusEpsCos { eps } => {
                for (o, x) in out.iter_mut().zip(k) {
                    *o = x + eps * x.sin();
                }
            }
            Dispersion::ConstantOmega { .. } => out.iter_mut().for_each(|o| *o = 0.0),
            Dispersion::AcousticSoft { c, .. } => {
                let w = self.value(k);
                for (o, x) in out.iter_mut().zip(k) {
                    *o = c * c * x / w;
                }
            }
        }
    }

    pub fn gradient_vec(&self, k: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; k.len()];
        self.gradient(k, &mut g);
        g
    }

    /// Row-major d x d Hessian.
    pub fn hessian(&self, k: &[f64]) -> Vec<f64> {
        let d = k.len();
        let mut h = vec![0.0; d * d];
        match *self {
            Dispersion::Quadratic { scale } => {
                for i in 0..d {
                    h[i * d + i] = scale;
                }
            }
            Dispersion::QuadraticPlusEpsCos { eps } => {
                for i in 0..d {
                    h[i * d + i] = 1.0 + eps * k[i].cos();
                }
            }
            Dispersion::ConstantOmega { .. } => {}
            Dispersion::AcousticSoft { c, .. } => {
                let w = self.value(k);
                let c2 = c * c;
                for i in 0..d {
                    for j in 0..d {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        h[i * d + j] = c2 / w * (delta - c2 * k[i] * k[j] / (w * w));
                    }
                }
            }
        }
        h
    }

    /// True when the function depends on k only through |k|.
    pub fn is_isotropic(&self) -> bool {
        !matches!(self, Dispersion::QuadraticPlusEpsCos { .. })
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Dispersion::ConstantOmega { .. })
    }

    /// Lower bound of the function over all momenta.
    pub fn infimum(&self) -> f64 {
        match *self {
            Dispersion::Quadratic { scale } => {
                if scale >= 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Dispersion::QuadraticPlusEpsCos { .. } => 0.0,
            Dispersion::ConstantOmega { omega } => omega,
            Dispersion::AcousticSoft { omega0, .. } => omega0.abs(),
        }
    }
}

/// Coupling function registry. All members are real and even.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coupling {
    /// amplitude * exp(-|k|^2 / (2 width^2))
    Gaussian {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        width: f64,
    },
    Constant { value: f64 },
    Zero,
    /// Smooth bump in |k| supported on (radius - half_width, radius + half_width).
    CompactShell {
        amplitude: f64,
        radius: f64,
        half_width: f64,
    },
}

impl Coupling {
    pub fn value(&self, k: &[f64]) -> f64 {
        match *self {
            Coupling::Gaussian { amplitude, width } => {
                amplitude * (-norm2(k) / (2.0 * width * width)).exp()
            }
            Coupling::Constant { value } => value,
            Coupling::Zero => 0.0,
            Coupling::CompactShell {
                amplitude,
                radius,
                half_width,
            } => {
                let t = (norm(k) - radius) / half_width;
                if t.abs() >= 1.0 {
                    0.0
                } else {
                    amplitude * (1.0 - 1.0 / (1.0 - t * t)).exp()
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            Coupling::Zero => true,
            Coupling::Constant { value } => value == 0.0,
            Coupling::Gaussian { amplitude, .. } => amplitude == 0.0,
            Coupling::CompactShell { amplitude, .. } => amplitude == 0.0,
        }
    }

    pub fn is_isotropic(&self) -> bool {
        true
    }
}

/// Thresholds used by the assumption validator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssumptionConstants {
    /// Lower Hessian bound of k -> Phi_pm(p, k).
    pub c3: f64,
    /// Upper Hessian bound.
    pub c4: f64,
    /// Bath stability margin.
    pub c6: f64,
    /// Cap on the measured growth constants of e and omega.
    pub growth_cap: f64,
    /// Required excess of boundary minimum over global minimum of Phi.
    pub coercivity_margin: f64,
    /// Decay check: |d^l Q| <k>^(2d+12) far outside the grid must stay below
    /// this fraction of its maximum over the grid.
    pub decay_boundary_ratio: f64,
    /// Small-scale constant bounding slab widths and ball radii.
    pub rho_tilde: f64,
}

impl Default for AssumptionConstants {
    fn default() -> Self {
        Self {
            c3: 0.2,
            c4: 100.0,
            c6: 0.1,
            growth_cap: 1.0e3,
            coercivity_margin: 1.0,
            decay_boundary_ratio: 0.5,
            rho_tilde: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "three")]
    pub dimension: usize,
    #[serde(default = "default_electron")]
    pub electron: Dispersion,
    #[serde(default = "default_phonon")]
    pub phonon: Dispersion,
    #[serde(default = "default_coupling")]
    pub coupling: Coupling,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub epsilon: f64,
    /// Enforce lambda^2 = epsilon.
    #[serde(default)]
    pub weak_coupling_link: bool,
    #[serde(default)]
    pub constants: AssumptionConstants,
}

fn three() -> usize {
    3
}
fn default_electron() -> Dispersion {
    Dispersion::Quadratic { scale: 1.0 }
}
fn default_phonon() -> Dispersion {
    Dispersion::ConstantOmega { omega: 1.0 }
}
fn default_coupling() -> Coupling {
    Coupling::Gaussian {
        amplitude: 1.0,
        width: 1.0,
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dimension: 3,
            electron: default_electron(),
            phonon: default_phonon(),
            coupling: default_coupling(),
            beta: 1.0,
            mu: 0.0,
            lambda: 1.0,
            epsilon: 1.0,
            weak_coupling_link: false,
            constants: AssumptionConstants::default(),
        }
    }
}

/// Immutable, validated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelConfig", into = "ModelConfig")]
pub struct Model {
    cfg: ModelConfig,
}

impl TryFrom<ModelConfig> for Model {
    type Error = ModelError;
    fn try_from(cfg: ModelConfig) -> Result<Self, ModelError> {
        Model::new(cfg)
    }
}

impl From<Model> for ModelConfig {
    fn from(m: Model) -> Self {
        m.cfg
    }
}

impl Default for Model {
    fn default() -> Self {
        Model::new(ModelConfig::default()).expect("default model is valid")
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        if cfg.dimension == 0 {
            return Err(ModelError::InvalidParameter("dimension must be >= 1".into()));
        }
        if cfg.beta.is_nan() || cfg.beta <= 0.0 {
            return Err(ModelError::InvalidParameter(format!("beta = {} must be > 0", cfg.beta)));
        }
        if cfg.lambda.is_nan() || cfg.lambda < 0.0 {
            return Err(ModelError::InvalidParameter(format!("lambda = {} must be >= 0", cfg.lambda)));
        }
        if !(cfg.epsilon > 0.0 && cfg.epsilon <= 1.0) {
            return Err(ModelError::InvalidParameter(format!(
                "epsilon = {} must lie in (0, 1]",
                cfg.epsilon
            )));
        }
        if cfg.weak_coupling_link && (cfg.lambda * cfg.lambda - cfg.epsilon).abs() > 1e-12 * cfg.epsilon {
            return Err(ModelError::InvalidParameter(format!(
                "weak coupling link requires lambda^2 = epsilon, got {} vs {}",
                cfg.lambda * cfg.lambda,
                cfg.epsilon
            )));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Copy of the configuration with modifications applied, revalidated.
    pub fn with(&self, f: impl FnOnce(&mut ModelConfig)) -> Result<Model, ModelError> {
        let mut cfg = self.cfg.clone();
        f(&mut cfg);
        Model::new(cfg)
    }

    pub fn dim(&self) -> usize {
        self.cfg.dimension
    }
    pub fn beta(&self) -> f64 {
        self.cfg.beta
    }
    pub fn mu(&self) -> f64 {
        self.cfg.mu
    }
    pub fn lambda(&self) -> f64 {
        self.cfg.lambda
    }
    pub fn epsilon(&self) -> f64 {
        self.cfg.epsilon
    }
    pub fn constants(&self) -> &AssumptionConstants {
        &self.cfg.constants
    }
    pub fn electron(&self) -> &Dispersion {
        &self.cfg.electron
    }
    pub fn phonon(&self) -> &Dispersion {
        &self.cfg.phonon
    }
    pub fn coupling(&self) -> &Coupling {
        &self.cfg.coupling
    }

    /// True below the dimension the theory requires; such runs are toy runs.
    pub fn is_toy_dimension(&self) -> bool {
        self.cfg.dimension < 3
    }

    pub fn is_isotropic(&self) -> bool {
        self.cfg.electron.is_isotropic() && self.cfg.phonon.is_isotropic() && self.cfg.coupling.is_isotropic()
    }

    pub fn e(&self, k: &[f64]) -> f64 {
        self.cfg.electron.value(k)
    }
    pub fn grad_e(&self, k: &[f64]) -> Vec<f64> {
        self.cfg.electron.gradient_vec(k)
    }
    pub fn omega(&self, k: &[f64]) -> f64 {
        self.cfg.phonon.value(k)
    }
    pub fn q(&self, k: &[f64]) -> f64 {
        self.cfg.coupling.value(k)
    }

    /// Expected phonon number in mode k.
    pub fn phonon_occupation(&self, k: &[f64]) -> Result<f64, ModelError> {
        occupation(self.cfg.beta, self.omega(k), self.cfg.mu)
    }

    /// Phi_sigma(p, k) = e(k + p) + sigma * omega(k).
    pub fn phi(&self, p: &[f64], k: &[f64], sigma: i8) -> f64 {
        let d = k.len();
        if d <= 8 {
            let mut buf = [0.0; 8];
            for i in 0..d {
                buf[i] = k[i] + p[i];
            }
            self.e(&buf[..d]) + sigma as f64 * self.omega(k)
        } else {
            let kp: Vec<f64> = k.iter().zip(p).map(|(a, b)| a + b).collect();
            self.e(&kp) + sigma as f64 * self.omega(k)
        }
    }

    /// Gradient of k -> Phi_sigma(p, k).
    pub fn phi_grad(&self, p: &[f64], k: &[f64], sigma: i8, out: &mut [f64]) {
        let d = k.len();
        if d <= 8 {
            let mut buf = [0.0; 8];
            for i in 0..d {
                buf[i] = k[i] + p[i];
            }
            self.cfg.electron.gradient(&buf[..d], out);
            if !self.cfg.phonon.is_constant() {
                self.cfg.phonon.gradient(k, &mut buf[..d]);
                for (o, x) in out.iter_mut().zip(&buf[..d]) {
                    *o += sigma as f64 * x;
                }
            }
        } else {
            let kp: Vec<f64> = k.iter().zip(p).map(|(a, b)| a + b).collect();
            self.cfg.electron.gradient(&kp, out);
            if !self.cfg.phonon.is_constant() {
                let mut g = vec![0.0; d];
                self.cfg.phonon.gradient(k, &mut g);
                for (o, x) in out.iter_mut().zip(&g) {
                    *o += sigma as f64 * x;
                }
            }
        }
    }

    /// Hessian of k -> Phi_sigma(p, k), row-major.
    pub fn phi_hessian(&self, p: &[f64], k: &[f64], sigma: i8) -> Vec<f64> {
        let kp: Vec<f64> = k.iter().zip(p).map(|(a, b)| a + b).collect();
        let mut h = self.cfg.electron.hessian(&kp);
        let hw = self.cfg.phonon.hessian(k);
        for (a, b) in h.iter_mut().zip(&hw) {
            *a += sigma as f64 * b;
        }
        h
    }

    /// Critical point of k -> Phi_sigma(p, k) by damped Newton iteration.
    pub fn phi_critical_point(&self, p: &[f64], sigma: i8) -> Vec<f64> {
        let d = self.dim();
        let mut k: Vec<f64> = p.iter().map(|x| -x).collect();
        let mut g = vec![0.0; d];
        for _ in 0..100 {
            self.phi_grad(p, &k, sigma, &mut g);
            let gn = norm(&g);
            if gn < 1e-14 {
                break;
            }
            let h = DMatrix::from_row_slice(d, d, &self.phi_hessian(p, &k, sigma));
            let step = match h.clone().lu().solve(&nalgebra::DVector::from_column_slice(&g)) {
                Some(s) => s,
                None => break,
            };
            let f0 = self.phi(p, &k, sigma);
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = k.iter().zip(step.iter()).map(|(a, b)| a - t * b).collect();
                if self.phi(p, &trial, sigma) <= f0 + 1e-15 * f0.abs().max(1.0) || t < 1e-6 {
                    k = trial;
                    break;
                }
                t *= 0.5;
            }
        }
        k
    }
}

/// Bose occupation 1 / (exp(beta*omega - mu) - 1).
pub fn occupation(beta: f64, omega: f64, mu: f64) -> Result<f64, ModelError> {
    let a = beta * omega - mu;
    if a.is_nan() || a <= 0.0 {
        return Err(ModelError::BathUnstable(a));
    }
    Ok(1.0 / a.exp_m1())
}

/// Uniform sampling box [-k_max, k_max]^d with `points_per_axis` nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub k_max: f64,
    pub points_per_axis: usize,
    /// Base points p at which Phi_pm(p, .) is examined.
    pub p_samples: Vec<Vec<f64>>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            k_max: 6.0,
            points_per_axis: 25,
            p_samples: Vec::new(),
        }
    }
}

impl GridSpec {
    pub fn spacing(&self) -> f64 {
        2.0 * self.k_max / (self.points_per_axis - 1) as f64
    }

    fn node(&self, idx: &[usize]) -> Vec<f64> {
        let h = self.spacing();
        idx.iter().map(|&i| -self.k_max + h * i as f64).collect()
    }

    fn multi_index(&self, flat: usize, d: usize) -> Vec<usize> {
        let n = self.points_per_axis;
        let mut idx = vec![0; d];
        let mut r = flat;
        for slot in idx.iter_mut().rev() {
            *slot = r % n;
            r /= n;
        }
        idx
    }

    fn total(&self, d: usize) -> usize {
        self.points_per_axis.pow(d as u32)
    }

    fn default_p_samples(d: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; d]];
        let mut e1 = vec![0.0; d];
        e1[0] = 1.0;
        out.push(e1.clone());
        out.push(e1.iter().map(|x| -x).collect());
        if d >= 2 {
            let v: Vec<f64> = (0..d).map(|i| 0.7 - 0.4 * i as f64).collect();
            out.push(v);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Assumption {
    Dimension,
    Symmetry,
    ElectronDerivativeGrowth,
    PhononDerivativeGrowth,
    Coercivity,
    HessianBounds,
    CouplingDecay,
    BathStability,
    UniqueCriticalPoint,
}

impl Assumption {
    pub const ALL: [Assumption; 9] = [
        Assumption::Dimension,
        Assumption::Symmetry,
        Assumption::ElectronDerivativeGrowth,
        Assumption::PhononDerivativeGrowth,
        Assumption::Coercivity,
        Assumption::HessianBounds,
        Assumption::CouplingDecay,
        Assumption::BathStability,
        Assumption::UniqueCriticalPoint,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub assumption: Assumption,
    pub passed: bool,
    /// Sample point at which the measured constant is attained.
    pub worst_point: Vec<f64>,
    pub measured: f64,
    /// Secondary measurement, e.g. the largest Hessian eigenvalue.
    pub measured_upper: Option<f64>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    pub max_derivative_order: usize,
    pub notes: Vec<String>,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, a: Assumption) -> &AssumptionCheck {
        self.checks
            .iter()
            .find(|c| c.assumption == a)
            .expect("every assumption is reported")
    }
}

/// Mixed partial derivatives of order `order` at x by nested central
/// differences with step h; returns the Frobenius norm of the tensor.
pub(crate) fn derivative_tensor_norm(f: &dyn Fn(&[f64]) -> f64, x: &[f64], order: usize, h: f64) -> f64 {
    if order == 0 {
        return f(x).abs();
    }
    let d = x.len();
    let mut total = 0.0;
    let mut dirs = vec![0usize; order];
    let count = d.pow(order as u32);
    let mut pt = vec![0.0; d];
    for flat in 0..count {
        let mut r = flat;
        for slot in dirs.iter_mut() {
            *slot = r % d;
            r /= d;
        }
        // expand prod_j (shift_+ - shift_-) / (2h)
        let mut acc = 0.0;
        for signs in 0..(1usize << order) {
            pt.copy_from_slice(x);
            let mut sgn = 1.0;
            for (j, &dir) in dirs.iter().enumerate() {
                if signs >> j & 1 == 1 {
                    pt[dir] -= h;
                    sgn = -sgn;
                } else {
                    pt[dir] += h;
                }
            }
            acc += sgn * f(&pt);
        }
        let v = acc / (2.0 * h).powi(order as i32);
        total += v * v;
    }
    total.sqrt()
}

struct Worst {
    value: f64,
    point: Vec<f64>,
}

fn fold_max(items: impl ParallelIterator<Item = (f64, Vec<f64>)>) -> Worst {
    let (value, point) = items.reduce(
        || (f64::NEG_INFINITY, Vec::new()),
        |a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a },
    );
    Worst { value, point }
}

fn fold_min(items: impl ParallelIterator<Item = (f64, Vec<f64>)>) -> Worst {
    let w = fold_max(items.map(|(v, p)| (-v, p)));
    Worst {
        value: -w.value,
        point: w.point,
    }
}

/// Check the standing assumptions on a sampled grid.
pub fn validate_assumptions(model: &Model, grid: &GridSpec) -> Result<AssumptionReport, ModelError> {
    let d = model.dim();
    let n = grid.points_per_axis;
    if n < 2 || grid.k_max <= 0.0 {
        return Err(ModelError::InvalidParameter("grid must have >= 2 points per axis and k_max > 0".into()));
    }
    let max_order = (2 * d).min(4);
    let margin = max_order;
    if n < 2 * margin + 1 {
        return Err(ModelError::GridTooCoarse(format!(
            "order-{max_order} stencils need at least {} points per axis, got {n}",
            2 * margin + 1
        )));
    }
    let h = grid.spacing();
    let total = grid.total(d);
    let interior = |idx: &[usize], m: usize| idx.iter().all(|&i| i >= m && i + m < n);
    let p_samples = if grid.p_samples.is_empty() {
        GridSpec::default_p_samples(d)
    } else {
        grid.p_samples.clone()
    };
    let consts = model.constants();
    let mut checks = Vec::new();
    let mut notes = Vec::new();

    // dimension
    checks.push(AssumptionCheck {
        assumption: Assumption::Dimension,
        passed: d >= 3,
        worst_point: vec![],
        measured: d as f64,
        measured_upper: None,
        note: if d >= 3 {
            "d >= 3".into()
        } else {
            "d < 3: toy run, results are not covered by the theory".into()
        },
    });

    // symmetry of e, omega, Q, and occupation
    let sym = fold_max((0..total).into_par_iter().map(|f| {
        let k = grid.node(&grid.multi_index(f, d));
        let mk: Vec<f64> = k.iter().map(|x| -x).collect();
        let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + a.abs().max(b.abs()));
        let mut worst = rel(model.e(&k), model.e(&mk))
            .max(rel(model.omega(&k), model.omega(&mk)))
            .max(rel(model.q(&k), model.q(&mk)));
        if let (Ok(a), Ok(b)) = (model.phonon_occupation(&k), model.phonon_occupation(&mk)) {
            worst = worst.max(rel(a, b));
        }
        (worst, k)
    }));
    checks.push(AssumptionCheck {
        assumption: Assumption::Symmetry,
        passed: sym.value <= 1e-12,
        worst_point: sym.point,
        measured: sym.value,
        measured_upper: None,
        note: "max relative asymmetry under k -> -k".into(),
    });

    // derivative growth
    let growth = |f: &(dyn Fn(&[f64]) -> f64 + Sync)| -> Worst {
        fold_max((0..total).into_par_iter().filter_map(|fl| {
            let idx = grid.multi_index(fl, d);
            if !interior(&idx, margin) {
                return None;
            }
            let k = grid.node(&idx);
            let b = bracket(&k);
            let mut worst = 0.0f64;
            for l in 0..=max_order {
                let v = derivative_tensor_norm(f, &k, l, h);
                let bound = 1.0 + b.powi(2 - l as i32);
                worst = worst.max(v / bound);
            }
            Some((worst, k))
        }))
    };
    let ge = growth(&|k: &[f64]| model.e(k));
    let gw = growth(&|k: &[f64]| model.omega(k));
    for (a, w) in [
        (Assumption::ElectronDerivativeGrowth, ge),
        (Assumption::PhononDerivativeGrowth, gw),
    ] {
        checks.push(AssumptionCheck {
            assumption: a,
            passed: w.value.is_finite() && w.value <= consts.growth_cap,
            worst_point: w.point,
            measured: w.value,
            measured_upper: None,
            note: format!(
                "max_l |d^l f| / (1 + <k>^(2-l)) for l <= {max_order}; orders above {max_order} are not checked by finite differences"
            ),
        });
    }

    // coercivity: boundary minimum of Phi exceeds the global minimum
    let mut coer_worst = Worst {
        value: f64::INFINITY,
        point: vec![],
    };
    for p in &p_samples {
        for sigma in [1i8, -1] {
            let vals: Vec<(f64, bool)> = (0..total)
                .into_par_iter()
                .map(|f| {
                    let idx = grid.multi_index(f, d);
                    let on_boundary = idx.iter().any(|&i| i == 0 || i == n - 1);
                    (model.phi(p, &grid.node(&idx), sigma), on_boundary)
                })
                .collect();
            let gmin = vals.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
            let bmin = vals.iter().filter(|v| v.1).map(|v| v.0).fold(f64::INFINITY, f64::min);
            let excess = bmin - gmin;
            if excess < coer_worst.value {
                coer_worst = Worst {
                    value: excess,
                    point: p.clone(),
                };
            }
        }
    }
    checks.push(AssumptionCheck {
        assumption: Assumption::Coercivity,
        passed: coer_worst.value >= consts.coercivity_margin,
        worst_point: coer_worst.point,
        measured: coer_worst.value,
        measured_upper: None,
        note: "min over boundary of Phi_pm minus min over grid, worst base point".into(),
    });

    // Hessian bounds of Phi_pm via finite differences
    let mut hmin = Worst {
        value: f64::INFINITY,
        point: vec![],
    };
    let mut hmax = f64::NEG_INFINITY;
    for p in &p_samples {
        for sigma in [1i8, -1] {
            let (lo, hi) = (0..total)
                .into_par_iter()
                .filter_map(|f| {
                    let idx = grid.multi_index(f, d);
                    if !interior(&idx, 1) {
                        return None;
                    }
                    let k = grid.node(&idx);
                    let hess = fd_hessian(&|x: &[f64]| model.phi(p, x, sigma), &k, h);
                    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &hess)).eigenvalues;
                    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    Some(((lo, k), hi))
                })
                .reduce(
                    || ((f64::INFINITY, Vec::new()), f64::NEG_INFINITY),
                    |a, b| {
                        let lo = if b.0 .0 < a.0 .0 || (b.0 .0 == a.0 .0 && b.0 .1 < a.0 .1) { b.0 } else { a.0 };
                        (lo, a.1.max(b.1))
                    },
                );
            if lo.0 < hmin.value {
                let mut pt = p.clone();
                pt.extend(lo.1);
                pt.push(sigma as f64);
                hmin = Worst {
                    value: lo.0,
                    point: pt,
                };
            }
            hmax = hmax.max(hi);
        }
    }
    checks.push(AssumptionCheck {
        assumption: Assumption::HessianBounds,
        passed: hmin.value >= consts.c3 && hmax <= consts.c4,
        worst_point: hmin.point,
        measured: hmin.value,
        measured_upper: Some(hmax),
        note: format!(
            "smallest / largest eigenvalue of the finite-difference Hessian of Phi_pm; worst point lists (p, k, sigma); thresholds C3 = {}, C4 = {}",
            consts.c3, consts.c4
        ),
    });

    // decay of Q: the weighted envelope measured on the grid must bound it
    // on rays far outside the grid as well
    let weight_exp = (2 * d + 12) as i32;
    let envelope_at = |k: &[f64]| -> f64 {
        let mut env = 0.0f64;
        for l in 0..=max_order {
            env = env.max(derivative_tensor_norm(&|x: &[f64]| model.q(x), k, l, h));
        }
        env * bracket(k).powi(weight_exp)
    };
    let (c7, c7_point) = (0..total)
        .into_par_iter()
        .filter_map(|f| {
            let idx = grid.multi_index(f, d);
            if !interior(&idx, margin) {
                return None;
            }
            let k = grid.node(&idx);
            Some((envelope_at(&k), k))
        })
        .reduce(
            || (0.0, Vec::new()),
            |a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a },
        );
    let mut directions: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        for s in [1.0, -1.0] {
            let mut u = vec![0.0; d];
            u[i] = s;
            directions.push(u);
        }
    }
    directions.push(vec![1.0 / (d as f64).sqrt(); d]);
    let mut tail = 0.0f64;
    for u in &directions {
        for scale in [2.0, 4.0, 8.0] {
            let k: Vec<f64> = u.iter().map(|c| c * scale * grid.k_max).collect();
            tail = tail.max(envelope_at(&k));
        }
    }
    let ratio = if c7 > 0.0 { tail / c7 } else { 0.0 };
    checks.push(AssumptionCheck {
        assumption: Assumption::CouplingDecay,
        passed: c7.is_finite() && tail.is_finite() && ratio <= consts.decay_boundary_ratio,
        worst_point: c7_point,
        measured: c7,
        measured_upper: Some(ratio),
        note: format!(
            "measured C7 = max_l |d^l Q| <k>^{weight_exp} on the grid; upper value is the largest envelope at 2, 4, 8 k_max along axes and the diagonal, relative to C7 (threshold {})",
            consts.decay_boundary_ratio
        ),
    });

    // bath stability
    let bath = fold_min((0..total).into_par_iter().map(|f| {
        let k = grid.node(&grid.multi_index(f, d));
        (model.omega(&k) - model.mu() / model.beta(), k)
    }));
    checks.push(AssumptionCheck {
        assumption: Assumption::BathStability,
        passed: bath.value >= consts.c6,
        worst_point: bath.point,
        measured: bath.value,
        measured_upper: None,
        note: format!("inf omega - mu/beta over the grid, threshold C6 = {}", consts.c6),
    });

    // unique critical point of Phi_pm
    let mut worst_count = 1usize;
    let mut worst_pt = Vec::new();
    for p in &p_samples {
        for sigma in [1i8, -1] {
            let c = count_critical_cells(model, grid, p, sigma);
            if worst_pt.is_empty() || (c != 1 && (worst_count == 1 || c > worst_count)) {
                worst_count = c;
                let mut pt = p.clone();
                pt.push(sigma as f64);
                worst_pt = pt;
            }
        }
    }
    let all_one = worst_count == 1;
    checks.push(AssumptionCheck {
        assumption: Assumption::UniqueCriticalPoint,
        passed: all_one,
        worst_point: worst_pt,
        measured: worst_count as f64,
        measured_upper: None,
        note: "connected clusters of grid cells where every finite-difference gradient component changes sign".into(),
    });

    if max_order < 2 * d {
        notes.push(format!(
            "derivative bounds verified to order {max_order} of the required {}; higher finite-difference orders are numerically unreliable",
            2 * d
        ));
    }
    if model.is_toy_dimension() {
        notes.push("dimension below 3: toy run".into());
    }
    Ok(AssumptionReport {
        checks,
        max_derivative_order: max_order,
        notes,
    })
}

fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d * d];
    let mut pt = x.to_vec();
    let f0 = f(x);
    for i in 0..d {
        pt[i] = x[i] + h;
        let fp = f(&pt);
        pt[i] = x[i] - h;
        let fm = f(&pt);
        pt[i] = x[i];
        out[i * d + i] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in (i + 1)..d {
            let mut s = 0.0;
            for (si, sj, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                pt[i] = x[i] + si * h;
                pt[j] = x[j] + sj * h;
                s += w * f(&pt);
            }
            pt[i] = x[i];
            pt[j] = x[j];
            let v = s / (4.0 * h * h);
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
    out
}

/// Number of connected clusters of grid cells in which each component of
/// the finite-difference gradient of Phi_sigma(p, .) changes sign.
pub fn count_critical_cells(model: &Model, grid: &GridSpec, p: &[f64], sigma: i8) -> usize {
    let d = model.dim();
    let n = grid.points_per_axis;
    let h = grid.spacing();
    let total = grid.total(d);
    let grads: Vec<Vec<f64>> = (0..total)
        .into_par_iter()
        .map(|f| {
            let idx = grid.multi_index(f, d);
            let k = grid.node(&idx);
            let mut g = vec![0.0; d];
            let mut pt = k.clone();
            for i in 0..d {
                let (lo, hi) = (idx[i] > 0, idx[i] + 1 < n);
                let (a, b) = (if hi { h } else { 0.0 }, if lo { h } else { 0.0 });
                pt[i] = k[i] + a;
                let fp = model.phi(p, &pt, sigma);
                pt[i] = k[i] - b;
                let fm = model.phi(p, &pt, sigma);
                pt[i] = k[i];
                g[i] = (fp - fm) / (a + b);
            }
            g
        })
        .collect();
    let cells = (n - 1).pow(d as u32);
    let cell_idx = |flat: usize| -> Vec<usize> {
        let mut idx = vec![0; d];
        let mut r = flat;
        for slot in idx.iter_mut().rev() {
            *slot = r % (n - 1);
            r /= n - 1;
        }
        idx
    };
    let node_flat = |idx: &[usize]| idx.iter().fold(0usize, |acc, &i| acc * n + i);
    let flagged: Vec<bool> = (0..cells)
        .into_par_iter()
        .map(|c| {
            let base = cell_idx(c);
            (0..d).all(|comp| {
                let (mut pos, mut neg) = (false, false);
                for corner in 0..(1usize << d) {
                    let idx: Vec<usize> = base.iter().enumerate().map(|(j, &b)| b + (corner >> j & 1)).collect();
                    let g = grads[node_flat(&idx)][comp];
                    if g >= 0.0 {
                        pos = true;
                    }
                    if g <= 0.0 {
                        neg = true;
                    }
                }
                pos && neg
            })
        })
        .collect();
    // connected components over face/edge/corner adjacency
    let mut seen = vec![false; cells];
    let mut clusters = 0;
    let cell_flat = |idx: &[usize]| idx.iter().fold(0usize, |acc, &i| acc * (n - 1) + i);
    for start in 0..cells {
        if !flagged[start] || seen[start] {
            continue;
        }
        clusters += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(c) = stack.pop() {
            let base = cell_idx(c);
            for off in 0..3usize.pow(d as u32) {
                let mut r = off;
                let mut nb = base.clone();
                let mut ok = true;
                for slot in nb.iter_mut() {
                    let delta = (r % 3) as isize - 1;
                    r /= 3;
                    let v = *slot as isize + delta;
                    if v < 0 || v >= (n - 1) as isize {
                        ok = false;
                        break;
                    }
                    *slot = v as usize;
                }
                if !ok {
                    continue;
                }
                let f = cell_flat(&nb);
                if flagged[f] && !seen[f] {
                    seen[f] = true;
                    stack.push(f);
                }
            }
        }
    }
    clusters
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn occupation_values() {
        let m = Model::default();
        let nk = m.phonon_occupation(&[0.3, 0.0, 0.0]).unwrap();
        assert!((nk - 1.0 / (std::f64::consts::E - 1.0)).abs() < 1e-15);
        assert!((nk - 0.581977).abs() < 1e-6);
        assert!(occupation(1e6, 1.0, 0.0).unwrap() <= 1e-300);
        assert_eq!(occupation(1.0, 1.0, 2.0), Err(ModelError::BathUnstable(-1.0)));
    }

    #[test]
    fn phi_examples() {
        let m = Model::default();
        let m0 = m.with(|c| c.phonon = Dispersion::ConstantOmega { omega: 0.0 }).unwrap();
        assert_eq!(m0.phi(&[0.0; 3], &[1.0, 0.0, 0.0], 1), 0.5);
        assert_eq!(m.phi(&[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0], -1), -1.0);
    }

    #[test]
    fn acoustic_hessian_matches_finite_differences() {
        let w = Dispersion::AcousticSoft { omega0: 0.7, c: 1.3 };
        let k = [0.4, -0.2, 0.9];
        let fd = fd_hessian(&|x: &[f64]| w.value(x), &k, 1e-4);
        for (a, b) in fd.iter().zip(w.hessian(&k)) {
            assert!((a - b).abs() < 1e-6);
        }
        let mut g = [0.0; 3];
        w.gradient(&k, &mut g);
        for i in 0..3 {
            let mut kp = k;
            kp[i] += 1e-6;
            let mut km = k;
            km[i] -= 1e-6;
            assert!(((w.value(&kp) - w.value(&km)) / 2e-6 - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn weak_coupling_link_enforced() {
        let bad = ModelConfig {
            lambda: 0.5,
            epsilon: 0.3,
            weak_coupling_link: true,
            ..ModelConfig::default()
        };
        assert!(Model::new(bad).is_err());
        let good = ModelConfig {
            lambda: 0.5,
            epsilon: 0.25,
            weak_coupling_link: true,
            ..ModelConfig::default()
        };
        assert!(Model::new(good).is_ok());
    }

    #[test]
    fn derivative_norm_of_quadratic() {
        let f = |x: &[f64]| 0.5 * norm2(x);
        let k = [0.3, 0.1, -0.2];
        assert!((derivative_tensor_norm(&f, &k, 2, 0.5) - 3f64.sqrt()).abs() < 1e-12);
        assert!(derivative_tensor_norm(&f, &k, 3, 0.5) < 1e-10);
    }
}
