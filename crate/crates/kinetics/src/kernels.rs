//! Collision kernel, total cross section, post-collision sampling and the
//! oscillatory functions Theta, Upsilon_eta, Upsilon_0+ and Psi.

use crate::geometry::{
    extrapolate_h2, surface_delta_integral, AngularRule, Domain, GeometryError, NormalizedMeasure,
    SurfaceMethod, SurfaceResolution,
};
use crate::model::{derivative_tensor_norm, Model, ModelError};
use crate::quadrature::{breakpoints, gauss_legendre_on, integrate_adaptive, AdaptiveOptions};
use crate::stats::pairwise_sum;
use crate::vecmath::{self, dot, norm, norm2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("quadrature did not reach tolerance: estimated error {error:e}")]
    QuadratureFail { error: f64 },
    #[error("evaluation routes disagree: direct {direct}, time {time}, allowed {allowed:e}")]
    RouteMismatch {
        direct: Complex64,
        time: Complex64,
        allowed: f64,
    },
    #[error("no open collision channel at V = {0:?}")]
    NoOpenChannel(Vec<f64>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Sign sigma = +1 is emission (weight N + 1), sigma = -1 absorption (N).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Emission,
    Absorption,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Emission, Branch::Absorption];

    pub fn sigma(self) -> i8 {
        match self {
            Branch::Emission => 1,
            Branch::Absorption => -1,
        }
    }

    pub fn from_sigma(s: i8) -> Branch {
        if s > 0 {
            Branch::Emission
        } else {
            Branch::Absorption
        }
    }

    fn index(self) -> usize {
        match self {
            Branch::Emission => 0,
            Branch::Absorption => 1,
        }
    }
}

/// Vertex weight M(k, sigma) = |Q(k)|^2 (N(k) + (sigma + 1) / 2).
pub fn vertex_weight(model: &Model, k: &[f64], sigma: i8) -> f64 {
    let q = model.q(k);
    if q == 0.0 {
        return 0.0;
    }
    let n = model.phonon_occupation(k).unwrap_or(f64::INFINITY);
    q * q * (n + if sigma > 0 { 1.0 } else { 0.0 })
}

/// Envelope M*(k): maximum over both signs and derivative orders up to
/// min(2d, 4) of the finite-difference derivative norms of M.
pub fn vertex_envelope(model: &Model, k: &[f64], h: f64) -> f64 {
    let order = (2 * model.dim()).min(4);
    let mut out = 0.0f64;
    for sigma in [1i8, -1] {
        let f = |x: &[f64]| vertex_weight(model, x, sigma);
        for l in 0..=order {
            out = out.max(derivative_tensor_norm(&f, k, l, h));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelOptions {
    /// Momentum cutoff |k| <= k_cut for all phonon-momentum integrals.
    pub k_cut: f64,
    pub n_theta: usize,
    pub n_phi: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_segments: usize,
    /// Allowed energy mismatch of sampled post-collision momenta.
    pub shell_tolerance: f64,
    /// Regularizations used for the eta -> 0 extrapolation.
    pub etas: Vec<f64>,
    /// Relative tolerance of the dual-route comparison of Im Upsilon_0+.
    pub boundary_rel_tol: f64,
    /// Relative floor added to route error estimates.
    pub route_floor: f64,
    pub surface: SurfaceResolution,
    /// Rate table: speeds in [0, table_v_max] with table_nodes nodes.
    pub table_v_max: f64,
    pub table_nodes: usize,
    /// Directions scanned to build the rejection envelope of the sampler.
    pub envelope_scan: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            k_cut: 7.0,
            n_theta: 24,
            n_phi: 48,
            rel_tol: 1e-8,
            abs_tol: 1e-13,
            max_segments: 4000,
            shell_tolerance: 1e-3,
            etas: vec![0.1, 0.05, 0.025],
            boundary_rel_tol: 1e-2,
            route_floor: 1e-7,
            surface: SurfaceResolution::default(),
            table_v_max: 8.0,
            table_nodes: 801,
            envelope_scan: 48,
        }
    }
}

/// One polar ray through the cutoff ball: k = c + r u, r in [r0, r1].
struct Ray<'a> {
    u: &'a [f64],
    weight: f64,
    r0: f64,
    r1: f64,
}

/// Tabulated branch cross sections for isotropic models.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateTable {
    pub v_max: f64,
    pub speeds: Vec<f64>,
    pub emission: Vec<f64>,
    pub absorption: Vec<f64>,
}

impl RateTable {
    fn lookup(&self, speed: f64) -> Option<[f64; 2]> {
        if speed > self.v_max || self.speeds.len() < 2 {
            return None;
        }
        let n = self.speeds.len() - 1;
        let x = speed / self.v_max * n as f64;
        let i = (x.floor() as usize).min(n - 1);
        let t = x - i as f64;
        let lerp = |v: &[f64]| ((1.0 - t) * v[i] + t * v[i + 1]).max(0.0);
        Some([lerp(&self.emission), lerp(&self.absorption)])
    }

    pub fn max_total(&self) -> f64 {
        self.emission
            .iter()
            .zip(&self.absorption)
            .map(|(a, b)| a + b)
            .fold(0.0, f64::max)
    }
}

/// Boundary value Upsilon_0+(alpha, p) with its two imaginary-part routes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryValue {
    pub value: Complex64,
    /// Im part from the co-area surface integral.
    pub im_surface: f64,
    /// Im part from the eta -> 0 extrapolation of Im Upsilon_eta.
    pub im_extrapolated: f64,
    pub re_residual: f64,
    pub im_residual: f64,
}

/// Upsilon_eta from both evaluation routes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteComparison {
    pub direct: Complex64,
    pub direct_error: f64,
    pub time: Complex64,
    pub time_error: f64,
}

pub struct CollisionKernel {
    model: Model,
    opts: KernelOptions,
    rule: AngularRule,
    coarse_rule: AngularRule,
    factor: f64,
    table: Option<RateTable>,
}

impl CollisionKernel {
    pub fn new(model: Model, opts: KernelOptions) -> Result<Self, KernelError> {
        let d = model.dim();
        let rule = AngularRule::new(d, opts.n_theta, opts.n_phi)?;
        let coarse_rule = AngularRule::new(d, (opts.n_theta * 2 / 3).max(2), (opts.n_phi * 2 / 3).max(4))?;
        Ok(Self {
            factor: NormalizedMeasure::new(d).factor(),
            model,
            opts,
            rule,
            coarse_rule,
            table: None,
        })
    }

    /// Kernel with a precomputed rate table when the model is isotropic.
    pub fn with_rate_table(model: Model, opts: KernelOptions) -> Result<Self, KernelError> {
        let mut k = Self::new(model, opts)?;
        if k.model.is_isotropic() {
            k.table = Some(k.build_rate_table());
        }
        Ok(k)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn options(&self) -> &KernelOptions {
        &self.opts
    }

    pub fn rate_table(&self) -> Option<&RateTable> {
        self.table.as_ref()
    }

    fn opts_adaptive(&self) -> AdaptiveOptions {
        AdaptiveOptions {
            abs_tol: self.opts.abs_tol,
            rel_tol: self.opts.rel_tol,
            max_segments: self.opts.max_segments,
        }
    }

    fn rays<'a>(&self, rule: &'a AngularRule, c: &[f64]) -> Vec<Ray<'a>> {
        let kc = self.opts.k_cut;
        let c2 = norm2(c);
        rule.dirs
            .iter()
            .zip(&rule.weights)
            .filter_map(|(u, &w)| {
                let b = dot(c, u);
                let disc = b * b - c2 + kc * kc;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let (r0, r1) = ((-b - s).max(0.0), -b + s);
                (r1 > r0).then_some(Ray { u, weight: w, r0, r1 })
            })
            .collect()
    }

    fn jac(&self, r: f64) -> f64 {
        match self.model.dim() {
            1 => 1.0,
            2 => r,
            d => r.powi(d as i32 - 1),
        }
    }

    /// Phi_sigma(p, .) along the ray and its radial derivative.
    fn phi_on_ray(&self, p: &[f64], sigma: i8, c: &[f64], u: &[f64], r: f64) -> (f64, f64) {
        let d = c.len();
        let mut k = [0.0; 8];
        for i in 0..d {
            k[i] = c[i] + r * u[i];
        }
        let mut g = [0.0; 8];
        self.model.phi_grad(p, &k[..d], sigma, &mut g[..d]);
        (self.model.phi(p, &k[..d], sigma), dot(&g[..d], u))
    }

    /// Root of Phi_sigma(p, c + r u) = target on [lo, hi] (Phi increasing
    /// along rays from its minimum); returns (r, dPhi/dr).
    fn shell_root(&self, p: &[f64], sigma: i8, c: &[f64], u: &[f64], target: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
        let (flo, _) = self.phi_on_ray(p, sigma, c, u, lo);
        let (fhi, _) = self.phi_on_ray(p, sigma, c, u, hi);
        if !(flo <= target && fhi >= target) {
            return None;
        }
        // safeguarded Newton from the quadratic model about the center
        let curv = {
            let h = self.model.phi_hessian(p, c, sigma);
            let d = c.len();
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += u[i] * h[i * d + j] * u[j];
                }
            }
            s
        };
        let (f0, _) = self.phi_on_ray(p, sigma, c, u, 0.0);
        let mut r = if curv > 0.0 && target > f0 {
            (2.0 * (target - f0) / curv).sqrt().clamp(lo, hi)
        } else {
            0.5 * (lo + hi)
        };
        let (mut a, mut b) = (lo, hi);
        for _ in 0..100 {
            let (f, df) = self.phi_on_ray(p, sigma, c, u, r);
            let res = f - target;
            if res.abs() <= 1e-13 * (1.0 + target.abs()) {
                return Some((r, df));
            }
            if res < 0.0 {
                a = r;
            } else {
                b = r;
            }
            let mut next = if df > 0.0 { r - res / df } else { f64::NAN };
            if !(next > a && next < b) {
                next = 0.5 * (a + b);
            }
            if (b - a) < 1e-15 * (1.0 + b) {
                let (_, df) = self.phi_on_ray(p, sigma, c, u, next);
                return Some((next, df));
            }
            r = next;
        }
        let (_, df) = self.phi_on_ray(p, sigma, c, u, r);
        Some((r, df))
    }

    /// Theta(s, p, Omega) = sum_sigma int exp(-i s (Phi_sigma + Omega)) M dk.
    pub fn theta_fn(&self, s: f64, p: &[f64], omega_shift: f64) -> Result<Complex64, KernelError> {
        self.check_dim(p)?;
        let mut total = Complex64::new(0.0, 0.0);
        for sigma in [1i8, -1] {
            let c = self.model.phi_critical_point(p, sigma);
            let rays = self.rays(&self.rule, &c);
            let parts: Vec<Result<Complex64, KernelError>> = rays
                .par_iter()
                .map(|ray| {
                    let (fa, _) = self.phi_on_ray(p, sigma, &c, ray.u, ray.r0);
                    let (fb, _) = self.phi_on_ray(p, sigma, &c, ray.u, ray.r1);
                    let phase = s.abs() * (fb - fa).abs();
                    let panels = (phase / PI).ceil() as usize + 4;
                    let pts: Vec<f64> = (0..=panels)
                        .map(|i| ray.r0 + (ray.r1 - ray.r0) * i as f64 / panels as f64)
                        .collect();
                    let res = integrate_adaptive(
                        |r: f64| {
                            let k: Vec<f64> = vecmath::axpy(&c, r, ray.u);
                            let (ph, _) = self.phi_on_ray(p, sigma, &c, ray.u, r);
                            let m = vertex_weight(&self.model, &k, sigma);
                            Complex64::from_polar(m * self.jac(r), -s * (ph + omega_shift))
                        },
                        &pts,
                        AdaptiveOptions {
                            max_segments: self.opts.max_segments.max(4 * panels),
                            ..self.opts_adaptive()
                        },
                    );
                    if !res.converged {
                        return Err(KernelError::QuadratureFail { error: res.error });
                    }
                    Ok(res.value * ray.weight)
                })
                .collect();
            let mut re = Vec::with_capacity(parts.len());
            let mut im = Vec::with_capacity(parts.len());
            for v in parts {
                let v = v?;
                re.push(v.re);
                im.push(v.im);
            }
            total += Complex64::new(pairwise_sum(&re), pairwise_sum(&im));
        }
        Ok(total * self.factor)
    }

    fn check_dim(&self, p: &[f64]) -> Result<(), KernelError> {
        if p.len() != self.model.dim() {
            return Err(KernelError::InvalidArgument(format!(
                "momentum has {} components, model dimension is {}",
                p.len(),
                self.model.dim()
            )));
        }
        Ok(())
    }

    /// Direct route: momentum integration of M / (alpha - Phi + i eta).
    fn upsilon_direct_with(&self, rule: &AngularRule, eta: f64, alpha: f64, p: &[f64]) -> Result<(Complex64, f64), KernelError> {
        let mut total = Complex64::new(0.0, 0.0);
        let mut err = 0.0;
        for sigma in [1i8, -1] {
            let c = self.model.phi_critical_point(p, sigma);
            let rays = self.rays(rule, &c);
            let parts: Vec<(Complex64, f64, bool)> = rays
                .par_iter()
                .map(|ray| {
                    let mut pts = Vec::new();
                    if let Some((r, slope)) = self.shell_root(p, sigma, &c, ray.u, alpha, ray.r0, ray.r1) {
                        let w = eta / slope.abs().max(1e-12);
                        for j in [-30.0, -10.0, -3.0, -1.0, 0.0, 1.0, 3.0, 10.0, 30.0] {
                            pts.push(r + j * w);
                        }
                    }
                    let bp = breakpoints(ray.r0, ray.r1, &pts);
                    let res = integrate_adaptive(
                        |r: f64| {
                            let k = vecmath::axpy(&c, r, ray.u);
                            let (ph, _) = self.phi_on_ray(p, sigma, &c, ray.u, r);
                            let m = vertex_weight(&self.model, &k, sigma) * self.jac(r);
                            Complex64::new(m, 0.0) / Complex64::new(alpha - ph, eta)
                        },
                        &bp,
                        self.opts_adaptive(),
                    );
                    (res.value * ray.weight, res.error * ray.weight, res.converged)
                })
                .collect();
            let mut re = Vec::new();
            let mut im = Vec::new();
            for (v, e, ok) in parts {
                if !ok {
                    return Err(KernelError::QuadratureFail { error: e });
                }
                re.push(v.re);
                im.push(v.im);
                err += e;
            }
            total += Complex64::new(pairwise_sum(&re), pairwise_sum(&im));
        }
        Ok((total * self.factor, err * self.factor))
    }

    /// Upsilon_eta by direct momentum integration only.
    pub fn upsilon_direct(&self, eta: f64, alpha: f64, p: &[f64]) -> Result<Complex64, KernelError> {
        self.check_dim(p)?;
        if !(eta > 0.0) {
            return Err(KernelError::InvalidArgument("eta must be positive".into()));
        }
        if self.model.coupling().is_zero() {
            return Ok(Complex64::new(0.0, 0.0));
        }
        Ok(self.upsilon_direct_with(&self.rule, eta, alpha, p)?.0)
    }

    /// Energy density rho_sigma(E) = int M delta(E - Phi_sigma(p, k)) dk on
    /// Gauss nodes E = E_min + t^2; returns (E, weight * rho) pairs.
    fn energy_density(&self, rule: &AngularRule, p: &[f64], sigma: i8, panels: usize) -> Vec<(f64, f64)> {
        let c = self.model.phi_critical_point(p, sigma);
        let e_min = self.model.phi(p, &c, sigma);
        let rays = self.rays(rule, &c);
        let e_max = rays
            .iter()
            .map(|ray| self.phi_on_ray(p, sigma, &c, ray.u, ray.r1).0)
            .fold(e_min, f64::max);
        let t_max = (e_max - e_min).max(0.0).sqrt();
        let mut nodes = Vec::new();
        for j in 0..panels {
            let (x, w) = gauss_legendre_on(8, t_max * j as f64 / panels as f64, t_max * (j + 1) as f64 / panels as f64);
            for (t, wt) in x.into_iter().zip(w) {
                nodes.push((t, wt));
            }
        }
        nodes
            .par_iter()
            .map(|&(t, wt)| {
                let e = e_min + t * t;
                let parts: Vec<f64> = rays
                    .iter()
                    .map(|ray| match self.shell_root(p, sigma, &c, ray.u, e, ray.r0, ray.r1) {
                        Some((r, slope)) if slope > 0.0 => {
                            let k = vecmath::axpy(&c, r, ray.u);
                            ray.weight * self.jac(r) * vertex_weight(&self.model, &k, sigma) / slope
                        }
                        _ => 0.0,
                    })
                    .collect();
                (e, 2.0 * t * wt * pairwise_sum(&parts) * self.factor)
            })
            .collect()
    }

    /// Time route: -i int_0^S exp(i s (alpha + i eta)) Theta(s, p, 0) ds with
    /// Theta synthesized from the energy density. The prefactor -i matches
    /// Theta's exp(-i s Phi) phase.
    fn upsilon_time_with(&self, rule: &AngularRule, panels: usize, eta: f64, alpha: f64, p: &[f64]) -> Complex64 {
        let mut spectrum = Vec::new();
        for sigma in [1i8, -1] {
            spectrum.extend(self.energy_density(rule, p, sigma, panels));
        }
        let total: f64 = spectrum.iter().map(|x| x.1.abs()).sum();
        let spectrum: Vec<(f64, f64)> = spectrum.into_iter().filter(|x| x.1.abs() > 1e-18 * total).collect();
        if spectrum.is_empty() {
            return Complex64::new(0.0, 0.0);
        }
        let max_freq = spectrum.iter().map(|(e, _)| (alpha - e).abs()).fold(0.0, f64::max);
        let s_max = 40.0 / eta;
        let width = (1.0 / (max_freq + 1.0)).min(s_max);
        let n_panels = (s_max / width).ceil() as usize;
        let width = s_max / n_panels as f64;
        let (gx, gw) = gauss_legendre_on(10, 0.0, width);
        // Theta(s) = sum_E rho(E) exp(-i s E); the time integral is taken
        // node by node, phases advanced panel to panel by recurrence
        let parts: Vec<Complex64> = spectrum
            .par_chunks(32)
            .map(|chunk| {
                let mut acc = Complex64::new(0.0, 0.0);
                for &(e, rho) in chunk {
                    let z = Complex64::new(-eta, alpha - e);
                    let node: Vec<Complex64> = gx.iter().zip(&gw).map(|(x, w)| (z * x).exp() * w).collect();
                    let step = (z * width).exp();
                    let mut phase = Complex64::new(1.0, 0.0);
                    let mut sum = Complex64::new(0.0, 0.0);
                    for j in 0..n_panels {
                        if j % 256 == 0 {
                            // refresh against drift of the recurrence
                            phase = (z * (j as f64 * width)).exp();
                        }
                        let mut panel = Complex64::new(0.0, 0.0);
                        for c in &node {
                            panel += c;
                        }
                        sum += phase * panel;
                        phase *= step;
                    }
                    acc += sum * rho;
                }
                acc
            })
            .collect();
        let re: Vec<f64> = parts.iter().map(|z| z.re).collect();
        let im: Vec<f64> = parts.iter().map(|z| z.im).collect();
        Complex64::new(0.0, -1.0) * Complex64::new(pairwise_sum(&re), pairwise_sum(&im))
    }

    /// Both routes with error estimates from resolution refinement.
    pub fn upsilon_routes(&self, eta: f64, alpha: f64, p: &[f64]) -> Result<RouteComparison, KernelError> {
        self.check_dim(p)?;
        if !(eta > 0.0) {
            return Err(KernelError::InvalidArgument("eta must be positive".into()));
        }
        if self.model.coupling().is_zero() {
            let z = Complex64::new(0.0, 0.0);
            return Ok(RouteComparison {
                direct: z,
                direct_error: 0.0,
                time: z,
                time_error: 0.0,
            });
        }
        let (fine, qerr) = self.upsilon_direct_with(&self.rule, eta, alpha, p)?;
        let (coarse, _) = self.upsilon_direct_with(&self.coarse_rule, eta, alpha, p)?;
        let t_fine = self.upsilon_time_with(&self.rule, 32, eta, alpha, p);
        let t_coarse = self.upsilon_time_with(&self.coarse_rule, 20, eta, alpha, p);
        Ok(RouteComparison {
            direct: fine,
            direct_error: qerr + (fine - coarse).norm(),
            time: t_fine,
            time_error: (t_fine - t_coarse).norm(),
        })
    }

    /// Upsilon_eta(alpha, p), asserting agreement of the direct and the time
    /// representation.
    pub fn upsilon(&self, eta: f64, alpha: f64, p: &[f64]) -> Result<Complex64, KernelError> {
        let rc = self.upsilon_routes(eta, alpha, p)?;
        let allowed = 10.0 * (rc.direct_error + rc.time_error) + self.opts.route_floor * rc.direct.norm();
        if (rc.direct - rc.time).norm() > allowed {
            return Err(KernelError::RouteMismatch {
                direct: rc.direct,
                time: rc.time,
                allowed,
            });
        }
        Ok(rc.direct)
    }

    fn phonon_domain(&self) -> Domain {
        Domain::cube(self.model.dim(), self.opts.k_cut)
    }

    /// Normalized surface integral of M(., sigma) over {Phi_sigma(p, .) = alpha}.
    fn shell_integral(&self, alpha: f64, p: &[f64], sigma: i8, method: SurfaceMethod) -> Result<f64, KernelError> {
        let c = self.model.phi_critical_point(p, sigma);
        let dom = self.phonon_domain();
        if !dom.contains(&c) {
            return Ok(0.0);
        }
        if self.model.phi(p, &c, sigma) > alpha + 1.0 {
            // empty shell well beyond the mollifier reach
            return Ok(0.0);
        }
        let res = SurfaceResolution {
            method,
            center: Some(c),
            ..self.opts.surface.clone()
        };
        let est = surface_delta_integral(
            |k: &[f64]| vertex_weight(&self.model, k, sigma),
            |k: &[f64]| alpha - self.model.phi(p, k, sigma),
            &dom,
            &res,
        )?;
        Ok(est.value)
    }

    /// Upsilon_0+(alpha, p): Im part by the co-area surface integral, Re part
    /// by extrapolation eta -> 0 of the direct route, Im part cross-checked
    /// against the extrapolated Im Upsilon_eta.
    pub fn upsilon_boundary(&self, alpha: f64, p: &[f64]) -> Result<BoundaryValue, KernelError> {
        self.check_dim(p)?;
        if self.model.coupling().is_zero() {
            return Ok(BoundaryValue {
                value: Complex64::new(0.0, 0.0),
                im_surface: 0.0,
                im_extrapolated: 0.0,
                re_residual: 0.0,
                im_residual: 0.0,
            });
        }
        let mut im_surface = 0.0;
        for sigma in [1i8, -1] {
            im_surface -= PI * self.shell_integral(alpha, p, sigma, SurfaceMethod::Mollified)?;
        }
        let mut vals = Vec::with_capacity(self.opts.etas.len());
        for &eta in &self.opts.etas {
            vals.push(self.upsilon_direct(eta, alpha, p)?);
        }
        let re: Vec<f64> = vals.iter().map(|z| z.re).collect();
        let im: Vec<f64> = vals.iter().map(|z| z.im).collect();
        let (re0, re_res) = extrapolate_linear(&self.opts.etas, &re);
        let (im0, im_res) = extrapolate_linear(&self.opts.etas, &im);
        let scale = im_surface.abs().max(im0.abs());
        let allowed = self.opts.boundary_rel_tol * scale + 10.0 * im_res;
        if (im0 - im_surface).abs() > allowed {
            return Err(KernelError::RouteMismatch {
                direct: Complex64::new(re0, im_surface),
                time: Complex64::new(re0, im0),
                allowed,
            });
        }
        Ok(BoundaryValue {
            value: Complex64::new(re0, im_surface),
            im_surface,
            im_extrapolated: im0,
            re_residual: re_res,
            im_residual: im_res,
        })
    }

    /// Psi(V) = Upsilon_0+(e(V), V).
    pub fn psi(&self, v: &[f64]) -> Result<BoundaryValue, KernelError> {
        self.upsilon_boundary(self.model.e(v), v)
    }

    /// Total cross section sigma_0(V) = int sigma(U, V) dU via mollified
    /// surface integrals over the outgoing shells in U-space.
    pub fn total_cross_section(&self, v: &[f64]) -> Result<f64, KernelError> {
        Ok(self.branch_cross_sections_surface(v)?.iter().sum())
    }

    /// Branch cross sections [emission, absorption] by mollified surface
    /// integrals over U.
    pub fn branch_cross_sections_surface(&self, v: &[f64]) -> Result<[f64; 2], KernelError> {
        self.check_dim(v)?;
        let mut out = [0.0; 2];
        if self.model.coupling().is_zero() {
            return Ok(out);
        }
        let ev = self.model.e(v);
        for b in Branch::BOTH {
            let sigma = b.sigma();
            let c = vecmath::add(v, &self.model.phi_critical_point(v, sigma));
            let half = self.opts.k_cut;
            let dom = Domain {
                lo: v.iter().map(|x| x - half).collect(),
                hi: v.iter().map(|x| x + half).collect(),
            };
            if !dom.contains(&c) || self.model.phi(v, &vecmath::sub(&c, v), sigma) > ev + 1.0 {
                continue;
            }
            let res = SurfaceResolution {
                method: SurfaceMethod::Mollified,
                center: Some(c),
                ..self.opts.surface.clone()
            };
            let est = surface_delta_integral(
                |u: &[f64]| vertex_weight(&self.model, &vecmath::sub(u, v), sigma),
                |u: &[f64]| ev - self.model.e(u) - sigma as f64 * self.model.omega(&vecmath::sub(u, v)),
                &dom,
                &res,
            )?;
            out[b.index()] = 2.0 * PI * est.value;
        }
        Ok(out)
    }

    /// Branch cross sections by the exact ray-root co-area formula.
    pub fn branch_cross_sections_direct(&self, v: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        if self.model.coupling().is_zero() {
            return out;
        }
        let ev = self.model.e(v);
        for b in Branch::BOTH {
            let sigma = b.sigma();
            let c = self.model.phi_critical_point(v, sigma);
            if self.model.phi(v, &c, sigma) >= ev {
                continue;
            }
            let rays = self.rays(&self.rule, &c);
            let parts: Vec<f64> = rays
                .iter()
                .map(|ray| self.ray_density(v, sigma, &c, ray.u, ev, ray.r0, ray.r1).map_or(0.0, |x| x.0) * ray.weight)
                .collect();
            out[b.index()] = 2.0 * PI * self.factor * pairwise_sum(&parts);
        }
        out
    }

    /// Co-area density along one ray: r^{d-1} M / |dPhi/dr| at the shell
    /// root, with the root and phonon momentum.
    fn ray_density(&self, v: &[f64], sigma: i8, c: &[f64], u: &[f64], ev: f64, r0: f64, r1: f64) -> Option<(f64, Vec<f64>)> {
        let (r, slope) = self.shell_root(v, sigma, c, u, ev, r0, r1)?;
        if slope <= 0.0 {
            return None;
        }
        let k = vecmath::axpy(c, r, u);
        Some((self.jac(r) * vertex_weight(&self.model, &k, sigma) / slope, k))
    }

    fn build_rate_table(&self) -> RateTable {
        let n = self.opts.table_nodes.max(2);
        let d = self.model.dim();
        let speeds: Vec<f64> = (0..n).map(|i| self.opts.table_v_max * i as f64 / (n - 1) as f64).collect();
        let rates: Vec<[f64; 2]> = speeds
            .par_iter()
            .map(|&s| {
                let mut v = vec![0.0; d];
                v[0] = s;
                self.branch_cross_sections_direct(&v)
            })
            .collect();
        RateTable {
            v_max: self.opts.table_v_max,
            speeds,
            emission: rates.iter().map(|r| r[0]).collect(),
            absorption: rates.iter().map(|r| r[1]).collect(),
        }
    }

    /// Branch cross sections [emission, absorption]: table lookup when
    /// available, ray-root evaluation otherwise.
    pub fn branch_rates(&self, v: &[f64]) -> [f64; 2] {
        if let Some(t) = &self.table {
            if let Some(r) = t.lookup(norm(v)) {
                return r;
            }
        }
        self.branch_cross_sections_direct(v)
    }

    /// Fast total rate used by the particle solvers.
    pub fn rate(&self, v: &[f64]) -> f64 {
        let r = self.branch_rates(v);
        r[0] + r[1]
    }

    /// Draw U with density sigma(U, V) / sigma_0(V).
    pub fn sample_post_collision<R: Rng>(&self, v: &[f64], rng: &mut R) -> Result<(Vec<f64>, Branch), KernelError> {
        let rates = self.branch_rates(v);
        let total = rates[0] + rates[1];
        if !(total > 0.0) {
            return Err(KernelError::NoOpenChannel(v.to_vec()));
        }
        let first = if rng.random::<f64>() * total < rates[0] {
            Branch::Emission
        } else {
            Branch::Absorption
        };
        let order = [first, if first == Branch::Emission { Branch::Absorption } else { Branch::Emission }];
        for b in order {
            if rates[b.index()] <= 0.0 {
                continue;
            }
            if let Some(k) = self.sample_on_shell(v, b.sigma(), rng) {
                let u = vecmath::add(v, &k);
                let mismatch = (self.model.e(&u) - self.model.e(v) + b.sigma() as f64 * self.model.omega(&k)).abs();
                debug_assert!(mismatch <= self.opts.shell_tolerance);
                if mismatch <= self.opts.shell_tolerance {
                    return Ok((u, b));
                }
            }
        }
        Err(KernelError::NoOpenChannel(v.to_vec()))
    }

    /// Phonon momentum k on {Phi_sigma(V, k) = e(V)} with density
    /// proportional to M(k, sigma) / |grad Phi| in surface measure.
    fn sample_on_shell<R: Rng>(&self, v: &[f64], sigma: i8, rng: &mut R) -> Option<Vec<f64>> {
        let d = v.len();
        let ev = self.model.e(v);
        let c = self.model.phi_critical_point(v, sigma);
        if self.model.phi(v, &c, sigma) >= ev {
            return None;
        }
        let kc = self.opts.k_cut;
        let chord = |u: &[f64]| -> Option<(f64, f64)> {
            let b = dot(&c, u);
            let disc = b * b - norm2(&c) + kc * kc;
            if disc <= 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let (r0, r1) = ((-b - s).max(0.0), -b + s);
            (r1 > r0).then_some((r0, r1))
        };
        let density = |u: &[f64]| -> Option<(f64, Vec<f64>)> {
            let (r0, r1) = chord(u)?;
            self.ray_density(v, sigma, &c, u, ev, r0, r1)
        };
        if d == 1 {
            let wp = density(&[1.0]).map_or(0.0, |x| x.0);
            let wm = density(&[-1.0]).map_or(0.0, |x| x.0);
            if wp + wm <= 0.0 {
                return None;
            }
            let u = if rng.random::<f64>() * (wp + wm) < wp { [1.0] } else { [-1.0] };
            return density(&u).map(|x| x.1);
        }
        // proposal: equal mixture of uniform and a von Mises-Fisher lobe
        // pointing from the shell center toward k = 0
        let cn = norm(&c);
        let mean: Vec<f64> = if cn > 1e-12 {
            c.iter().map(|x| -x / cn).collect()
        } else {
            let mut e = vec![0.0; d];
            e[0] = 1.0;
            e
        };
        let w_plus = density(&mean).map_or(0.0, |x| x.0);
        let w_minus = density(&vecmath::neg(&mean)).map_or(0.0, |x| x.0);
        let kappa = if w_plus > 0.0 && w_minus > 0.0 {
            (0.5 * (w_plus / w_minus).ln()).clamp(0.0, 500.0)
        } else {
            0.0
        };
        let area = vecmath::unit_sphere_area(d);
        let q = |u: &[f64]| 0.5 / area + 0.5 * vmf_density(d, kappa, dot(u, &mean));
        let mut env = 0.0f64;
        let scan = fibonacci_directions(d, self.opts.envelope_scan);
        for u in scan.iter().chain([mean.clone(), vecmath::neg(&mean)].iter()) {
            if let Some((w, _)) = density(u) {
                env = env.max(w / q(u));
            }
        }
        if env <= 0.0 {
            return None;
        }
        env *= 1.3;
        for _ in 0..100_000 {
            let u = if rng.random::<f64>() < 0.5 {
                uniform_direction(d, rng)
            } else {
                sample_vmf(d, kappa, &mean, rng)
            };
            let Some((w, k)) = density(&u) else { continue };
            let ratio = w / q(&u);
            if ratio > env {
                // envelope underestimated: enlarge and keep sampling
                env = 1.5 * ratio;
                continue;
            }
            if rng.random::<f64>() * env < ratio {
                return Some(k);
            }
        }
        None
    }

    /// Pointwise kernel data for the pair (V, U): per branch the weight
    /// 2 pi M(U - V) and the shell residual.
    pub fn kernel_weight(&self, v: &[f64], u: &[f64]) -> [(Branch, f64, f64); 2] {
        let k = vecmath::sub(u, v);
        Branch::BOTH.map(|b| {
            let s = b.sigma();
            let residual = self.model.e(v) - self.model.e(u) - s as f64 * self.model.omega(&k);
            (b, 2.0 * PI * vertex_weight(&self.model, &k, s), residual)
        })
    }
}

fn extrapolate_linear(xs: &[f64], vals: &[f64]) -> (f64, f64) {
    // Neville in eta (not eta^2): Upsilon_eta has odd powers of eta
    let sq: Vec<f64> = xs.iter().map(|x| x.sqrt()).collect();
    extrapolate_h2(&sq, vals)
}

/// Normalized von Mises-Fisher density on S^{d-1} (d = 2, 3) as a function
/// of the cosine to the mean direction.
fn vmf_density(d: usize, kappa: f64, cos: f64) -> f64 {
    let area = vecmath::unit_sphere_area(d);
    if kappa < 1e-8 {
        return 1.0 / area;
    }
    match d {
        3 => {
            // kappa / (2 pi (1 - e^{-2 kappa})) e^{kappa (cos - 1)}
            kappa / (2.0 * PI * (-(-2.0 * kappa).exp_m1())) * (kappa * (cos - 1.0)).exp()
        }
        2 => (kappa * (cos - 1.0)).exp() / (2.0 * PI * bessel_i0_scaled(kappa)),
        _ => 1.0 / area,
    }
}

/// e^{-x} I_0(x).
fn bessel_i0_scaled(x: f64) -> f64 {
    let (gx, gw) = gauss_legendre_on(64, 0.0, PI);
    gx.iter().zip(&gw).map(|(t, w)| w * (x * (t.cos() - 1.0)).exp()).sum::<f64>() / PI
}

fn uniform_direction<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn sample_vmf<R: Rng>(d: usize, kappa: f64, mean: &[f64], rng: &mut R) -> Vec<f64> {
    if kappa < 1e-8 {
        return uniform_direction(d, rng);
    }
    match d {
        3 => {
            let xi: f64 = rng.random();
            let w = 1.0 + (xi + (1.0 - xi) * (-2.0 * kappa).exp()).ln() / kappa;
            let w = w.clamp(-1.0, 1.0);
            let phi = 2.0 * PI * rng.random::<f64>();
            let s = (1.0 - w * w).max(0.0).sqrt();
            let (e1, e2) = orthonormal_complement(mean);
            (0..3).map(|i| w * mean[i] + s * (phi.cos() * e1[i] + phi.sin() * e2[i])).collect()
        }
        2 => {
            // rejection from the uniform angle
            loop {
                let t = 2.0 * PI * rng.random::<f64>() - PI;
                if rng.random::<f64>() < (kappa * (t.cos() - 1.0)).exp() {
                    let a = mean[1].atan2(mean[0]) + t;
                    return vec![a.cos(), a.sin()];
                }
            }
        }
        _ => uniform_direction(d, rng),
    }
}

fn orthonormal_complement(m: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let a = if m[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let t = dot(&a, m);
    let e1: Vec<f64> = (0..3).map(|i| a[i] - t * m[i]).collect();
    let n1 = norm(&e1);
    let e1: Vec<f64> = e1.iter().map(|x| x / n1).collect();
    let e2 = vec![
        m[1] * e1[2] - m[2] * e1[1],
        m[2] * e1[0] - m[0] * e1[2],
        m[0] * e1[1] - m[1] * e1[0],
    ];
    (e1, e2)
}

/// Nearly uniform point set on S^{d-1}.
pub fn fibonacci_directions(d: usize, n: usize) -> Vec<Vec<f64>> {
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..n)
            .map(|i| {
                let a = 2.0 * PI * (i as f64 + 0.5) / n as f64;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let s = (1.0 - z * z).sqrt();
                    let a = golden * i as f64;
                    vec![s * a.cos(), s * a.sin(), z]
                })
                .collect()
        }
    }
}

/// R = 1 / (alpha - e_p - Omega + i eta).
pub fn free_resolvent(alpha: f64, e_p: f64, omega_shift: f64, eta: f64) -> Complex64 {
    Complex64::new(1.0, 0.0) / Complex64::new(alpha - e_p - omega_shift, eta)
}

/// Partial sum sum_{m <= m_max} R^{m+1} (lambda^2 Psi)^m.
pub fn resolvent_partial_sum(alpha: f64, e_p: f64, omega_shift: f64, eta: f64, self_energy: Complex64, m_max: usize) -> Complex64 {
    let r = free_resolvent(alpha, e_p, omega_shift, eta);
    let mut term = r;
    let mut sum = r;
    for _ in 0..m_max {
        term = term * r * self_energy;
        sum += term;
    }
    sum
}

/// Closed form 1 / (alpha - e_p - Omega - lambda^2 Psi + i eta).
pub fn resolvent_resummed(alpha: f64, e_p: f64, omega_shift: f64, eta: f64, self_energy: Complex64) -> Complex64 {
    Complex64::new(1.0, 0.0) / (Complex64::new(alpha - e_p - omega_shift, eta) - self_energy)
}

/// Cached Upsilon_eta on an (alpha, |p|) grid for isotropic models, with
/// bilinear interpolation between nodes.
#[derive(Clone, Debug)]
pub struct ResolventTable {
    pub eta: f64,
    pub alphas: Vec<f64>,
    pub speeds: Vec<f64>,
    values: Vec<Complex64>,
}

impl ResolventTable {
    pub fn build(
        kernel: &CollisionKernel,
        eta: f64,
        alpha_range: (f64, f64),
        n_alpha: usize,
        p_max: f64,
        n_p: usize,
    ) -> Result<Self, KernelError> {
        if !kernel.model().is_isotropic() {
            return Err(KernelError::InvalidArgument("resolvent table needs an isotropic model".into()));
        }
        let d = kernel.model().dim();
        let alphas: Vec<f64> = (0..n_alpha)
            .map(|i| alpha_range.0 + (alpha_range.1 - alpha_range.0) * i as f64 / (n_alpha - 1) as f64)
            .collect();
        let speeds: Vec<f64> = (0..n_p).map(|i| p_max * i as f64 / (n_p - 1) as f64).collect();
        let mut values = Vec::with_capacity(n_alpha * n_p);
        for &s in &speeds {
            let mut p = vec![0.0; d];
            p[0] = s;
            for &a in &alphas {
                values.push(kernel.upsilon_direct(eta, a, &p)?);
            }
        }
        Ok(Self {
            eta,
            alphas,
            speeds,
            values,
        })
    }

    /// Interpolated value, or None outside the tabulated range.
    pub fn eval(&self, alpha: f64, p: &[f64]) -> Option<Complex64> {
        let s = norm(p);
        let (na, np) = (self.alphas.len(), self.speeds.len());
        let (a0, a1) = (self.alphas[0], self.alphas[na - 1]);
        let p1 = self.speeds[np - 1];
        if alpha < a0 || alpha > a1 || s > p1 {
            return None;
        }
        let xa = (alpha - a0) / (a1 - a0) * (na - 1) as f64;
        let xp = s / p1 * (np - 1) as f64;
        let (ia, ip) = ((xa.floor() as usize).min(na - 2), (xp.floor() as usize).min(np - 2));
        let (ta, tp) = (xa - ia as f64, xp - ip as f64);
        let at = |i: usize, j: usize| self.values[j * na + i];
        Some(
            at(ia, ip) * ((1.0 - ta) * (1.0 - tp))
                + at(ia + 1, ip) * (ta * (1.0 - tp))
                + at(ia, ip + 1) * ((1.0 - ta) * tp)
                + at(ia + 1, ip + 1) * (ta * tp),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vmf_density_normalized() {
        for kappa in [0.0, 0.5, 3.0, 40.0] {
            let (x, w) = gauss_legendre_on(200, -1.0, 1.0);
            let s: f64 = x.iter().zip(&w).map(|(c, w)| w * 2.0 * PI * vmf_density(3, kappa, *c)).sum();
            assert!((s - 1.0).abs() < 1e-8, "kappa {kappa}: {s}");
            let (x, w) = gauss_legendre_on(200, -PI, PI);
            let s: f64 = x.iter().zip(&w).map(|(t, w)| w * vmf_density(2, kappa, t.cos())).sum();
            assert!((s - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn resummation_partial_sums_converge() {
        let se = Complex64::new(0.05, -0.08);
        let exact = resolvent_resummed(1.0, 0.2, 0.1, 0.05, se);
        let approx = resolvent_partial_sum(1.0, 0.2, 0.1, 0.05, se, 60);
        assert!((exact - approx).norm() < 1e-12);
    }
}
