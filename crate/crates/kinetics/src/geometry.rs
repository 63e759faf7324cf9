//! Measure conventions and energy-surface geometry: co-area delta
//! integrals, level-set slabs and their intersection volumes.

use crate::model::Model;
use crate::quadrature::{breakpoints, gauss_legendre, integrate_adaptive, AdaptiveOptions};
use crate::rng::{self, tag};
use crate::stats::{chunked_moments, pairwise_sum, Estimate, Moments};
use crate::vecmath::{self, norm, two_pi_half_d};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate gradient |grad psi| = {norm:e} at {point:?}")]
    DegenerateGradient { point: Vec<f64>, norm: f64 },
    #[error("extrapolation did not converge: residual {residual:e} for value {value:e}")]
    NonConvergent { value: f64, residual: f64 },
    #[error("dimension {0} is not supported by the angular rules (d <= 3)")]
    UnsupportedDimension(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Lebesgue measure divided by (2 pi)^{d/2}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedMeasure {
    pub dim: usize,
}

impl NormalizedMeasure {
    pub const CONVENTION: &'static str = "lebesgue_over_2pi_halfd";

    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    /// Multiplier turning a Lebesgue integral into a normalized one.
    pub fn factor(&self) -> f64 {
        1.0 / two_pi_half_d(self.dim)
    }

    pub fn ball_volume(&self, radius: f64) -> f64 {
        vecmath::unit_ball_volume(self.dim) * radius.powi(self.dim as i32) * self.factor()
    }
}

/// Axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Domain {
    pub fn cube(dim: usize, half: f64) -> Self {
        Self {
            lo: vec![-half; dim],
            hi: vec![half; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// Distance from c (inside) to the boundary along the unit vector u.
    pub fn exit_distance(&self, c: &[f64], u: &[f64]) -> f64 {
        let mut t = f64::INFINITY;
        for i in 0..c.len() {
            if u[i] > 1e-300 {
                t = t.min((self.hi[i] - c[i]) / u[i]);
            } else if u[i] < -1e-300 {
                t = t.min((self.lo[i] - c[i]) / u[i]);
            }
        }
        t.max(0.0)
    }
}

/// Quadrature over the unit sphere S^{d-1}; weights sum to its area.
#[derive(Clone, Debug)]
pub struct AngularRule {
    pub dirs: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl AngularRule {
    /// d = 1: the two directions; d = 2: `n_phi` equispaced angles;
    /// d = 3: Gauss-Legendre in cos(theta) times equispaced phi.
    pub fn new(dim: usize, n_theta: usize, n_phi: usize) -> Result<Self, GeometryError> {
        let two_pi = 2.0 * std::f64::consts::PI;
        match dim {
            1 => Ok(Self {
                dirs: vec![vec![1.0], vec![-1.0]],
                weights: vec![1.0, 1.0],
            }),
            2 => {
                let n = n_phi.max(4);
                let dirs = (0..n)
                    .map(|j| {
                        let a = two_pi * (j as f64 + 0.5) / n as f64;
                        vec![a.cos(), a.sin()]
                    })
                    .collect();
                Ok(Self {
                    dirs,
                    weights: vec![two_pi / n as f64; n],
                })
            }
            3 => {
                let (ct, wt) = gauss_legendre(n_theta.max(2));
                let n = n_phi.max(4);
                let mut dirs = Vec::with_capacity(ct.len() * n);
                let mut weights = Vec::with_capacity(ct.len() * n);
                for (c, w) in ct.iter().zip(&wt) {
                    let s = (1.0 - c * c).max(0.0).sqrt();
                    for j in 0..n {
                        let a = two_pi * (j as f64 + 0.5) / n as f64;
                        dirs.push(vec![s * a.cos(), s * a.sin(), *c]);
                        weights.push(w * two_pi / n as f64);
                    }
                }
                Ok(Self { dirs, weights })
            }
            d => Err(GeometryError::UnsupportedDimension(d)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceMethod {
    /// Gaussian-mollified delta with extrapolation in the width.
    Mollified,
    /// Exact co-area sum over the roots along each ray.
    RayRoots,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceResolution {
    pub method: SurfaceMethod,
    pub n_theta: usize,
    pub n_phi: usize,
    /// Mollifier widths, largest first.
    pub widths: Vec<f64>,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Scan points per ray used to locate the level set.
    pub scan_points: usize,
    /// Origin of the polar coordinates; defaults to a critical point of psi.
    pub center: Option<Vec<f64>>,
}

impl Default for SurfaceResolution {
    fn default() -> Self {
        Self {
            method: SurfaceMethod::Mollified,
            n_theta: 32,
            n_phi: 64,
            widths: vec![0.08, 0.04, 0.02],
            rel_tol: 1e-4,
            abs_tol: 1e-10,
            scan_points: 96,
            center: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceEstimate {
    pub value: f64,
    /// Extrapolation residual (mollified) or angular refinement difference.
    pub error: f64,
    /// Mollified values at each width (empty for ray roots).
    pub mollified: Vec<f64>,
}

/// Roots of g on [0, r_max] located by a uniform scan and refined by
/// bracketed secant steps. Also returns scan points where |g| is a local
/// minimum without a sign change.
pub fn ray_roots(g: &dyn Fn(f64) -> f64, r_max: f64, n_scan: usize) -> (Vec<f64>, Vec<f64>) {
    let mut roots = Vec::new();
    let mut dips = Vec::new();
    if r_max <= 0.0 {
        return (roots, dips);
    }
    let n = n_scan.max(4);
    let vals: Vec<f64> = (0..=n).map(|i| g(r_max * i as f64 / n as f64)).collect();
    for i in 0..n {
        let (a, b) = (r_max * i as f64 / n as f64, r_max * (i + 1) as f64 / n as f64);
        let (fa, fb) = (vals[i], vals[i + 1]);
        if fa == 0.0 {
            roots.push(a);
        } else if fa * fb < 0.0 {
            roots.push(refine_root(g, a, b, fa, fb));
        }
        if i > 0 && vals[i].abs() < vals[i - 1].abs() && vals[i].abs() < vals[i + 1].abs() && vals[i - 1] * vals[i + 1] > 0.0 {
            dips.push(a);
        }
    }
    if vals[n] == 0.0 {
        roots.push(r_max);
    }
    (roots, dips)
}

/// Illinois-modified regula falsi on a sign-changing bracket.
pub fn refine_root(g: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, mut fa: f64, mut fb: f64) -> f64 {
    let mut side = 0;
    for _ in 0..200 {
        let c = (a * fb - b * fa) / (fb - fa);
        let c = if c.is_finite() && c > a.min(b) && c < a.max(b) { c } else { 0.5 * (a + b) };
        let fc = g(c);
        if fc == 0.0 || (b - a).abs() < 1e-15 * (1.0 + c.abs()) {
            return c;
        }
        if fc * fb < 0.0 {
            a = b;
            fa = fb;
            b = c;
            fb = fc;
            side = 0;
        } else {
            b = c;
            fb = fc;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
        if (b - a).abs() < 1e-14 * (1.0 + b.abs()) {
            return b;
        }
    }
    0.5 * (a + b)
}

fn fd_gradient(psi: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut pt = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * (1.0 + x[i].abs());
            pt[i] = x[i] + h;
            let fp = psi(&pt);
            pt[i] = x[i] - h;
            let fm = psi(&pt);
            pt[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Critical point of psi by Newton iteration on finite differences,
/// falling back to `start` if the iteration leaves the domain.
fn fd_critical_point(psi: &dyn Fn(&[f64]) -> f64, start: &[f64], domain: &Domain) -> Vec<f64> {
    let d = start.len();
    let mut x = start.to_vec();
    for _ in 0..50 {
        let g = fd_gradient(psi, &x);
        if norm(&g) < 1e-10 {
            break;
        }
        let mut hm = nalgebra::DMatrix::<f64>::zeros(d, d);
        for j in 0..d {
            let h = 1e-4 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let gp = fd_gradient(psi, &xp);
            let gm = fd_gradient(psi, &xm);
            for i in 0..d {
                hm[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let hm = (&hm + hm.transpose()) * 0.5;
        match hm.lu().solve(&nalgebra::DVector::from_vec(g)) {
            Some(step) => {
                for i in 0..d {
                    x[i] -= step[i];
                }
            }
            None => return start.to_vec(),
        }
        if !domain.contains(&x) {
            return start.to_vec();
        }
    }
    x
}

fn gaussian_kernel(x: f64, h: f64) -> f64 {
    (-0.5 * (x / h).powi(2)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * h)
}

/// Polynomial extrapolation in h^2 to h = 0 (Neville); returns the
/// extrapolated value and the difference to the next-lower order.
pub fn extrapolate_h2(hs: &[f64], vals: &[f64]) -> (f64, f64) {
    let n = hs.len();
    assert!(n >= 1 && n == vals.len());
    let x: Vec<f64> = hs.iter().map(|h| h * h).collect();
    let mut p = vals.to_vec();
    let mut prev_top = vals[n - 1];
    for level in 1..n {
        for i in 0..(n - level) {
            p[i] = (x[i] * p[i + 1] - x[i + level] * p[i]) / (x[i] - x[i + level]);
        }
        if level == n - 1 {
            break;
        }
        prev_top = p[n - level - 1];
    }
    let value = p[0];
    let residual = if n == 1 { 0.0 } else { (value - prev_top).abs() };
    (value, residual)
}

/// Normalized integral of F(p) delta(psi(p)) over a box.
pub fn surface_delta_integral<F, P>(
    f: F,
    psi: P,
    domain: &Domain,
    res: &SurfaceResolution,
) -> Result<SurfaceEstimate, GeometryError>
where
    F: Fn(&[f64]) -> f64 + Sync,
    P: Fn(&[f64]) -> f64 + Sync,
{
    surface_delta_dyn(&f, &psi, domain, res)
}

type FieldRef<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

fn surface_delta_dyn(
    f: FieldRef<'_>,
    psi: FieldRef<'_>,
    domain: &Domain,
    res: &SurfaceResolution,
) -> Result<SurfaceEstimate, GeometryError> {
    let d = domain.dim();
    let rule = AngularRule::new(d, res.n_theta, res.n_phi)?;
    let center = match &res.center {
        Some(c) => c.clone(),
        None => fd_critical_point(&psi, &domain.center(), domain),
    };
    if center.len() != d || !domain.contains(&center) {
        return Err(GeometryError::InvalidArgument("polar center must lie in the domain".into()));
    }
    let factor = NormalizedMeasure::new(d).factor();

    // roots and their radial slopes per direction
    let rays: Vec<(f64, Vec<f64>, Vec<f64>)> = rule
        .dirs
        .par_iter()
        .map(|u| {
            let rmax = domain.exit_distance(&center, u);
            let g = |r: f64| psi(&vecmath::axpy(&center, r, u));
            let (roots, dips) = ray_roots(&g, rmax, res.scan_points);
            (rmax, roots, dips)
        })
        .collect();
    for (u, (_, roots, _)) in rule.dirs.iter().zip(&rays) {
        for &r in roots {
            let pt = vecmath::axpy(&center, r, u);
            let gn = norm(&fd_gradient(&psi, &pt));
            if gn < 1e-6 {
                return Err(GeometryError::DegenerateGradient { point: pt, norm: gn });
            }
        }
    }

    let radial_slope = |u: &[f64], r: f64| -> f64 {
        let h = 1e-6 * (1.0 + r);
        let gp = psi(&vecmath::axpy(&center, r + h, u));
        let gm = psi(&vecmath::axpy(&center, r - h, u));
        (gp - gm) / (2.0 * h)
    };

    match res.method {
        SurfaceMethod::RayRoots => {
            let contrib = |idx: &[usize]| -> f64 {
                let parts: Vec<f64> = idx
                    .iter()
                    .map(|&i| {
                        let u = &rule.dirs[i];
                        rays[i]
                            .1
                            .iter()
                            .map(|&r| {
                                let pt = vecmath::axpy(&center, r, u);
                                let jac = if d == 1 { 1.0 } else { r.powi(d as i32 - 1) };
                                jac * f(&pt) / radial_slope(u, r).abs()
                            })
                            .sum::<f64>()
                            * rule.weights[i]
                    })
                    .collect();
                pairwise_sum(&parts)
            };
            let all: Vec<usize> = (0..rule.dirs.len()).collect();
            let value = contrib(&all) * factor;
            // coarse comparison on the ray-root formula with a thinner rule
            let coarse = if d >= 2 && res.n_phi >= 8 {
                let c = surface_delta_dyn(
                    f,
                    psi,
                    domain,
                    &SurfaceResolution {
                        method: SurfaceMethod::RayRoots,
                        n_theta: (res.n_theta / 2).max(2),
                        n_phi: res.n_phi / 2,
                        center: Some(center.clone()),
                        ..res.clone()
                    },
                );
                c.map(|c| c.value).unwrap_or(value)
            } else {
                value
            };
            Ok(SurfaceEstimate {
                value,
                error: (value - coarse).abs(),
                mollified: Vec::new(),
            })
        }
        SurfaceMethod::Mollified => {
            if res.widths.is_empty() {
                return Err(GeometryError::InvalidArgument("no mollifier widths".into()));
            }
            let opts = AdaptiveOptions {
                abs_tol: 1e-14,
                rel_tol: 1e-9,
                max_segments: 400,
            };
            let mut per_h = Vec::with_capacity(res.widths.len());
            for &h in &res.widths {
                let parts: Vec<f64> = rule
                    .dirs
                    .par_iter()
                    .zip(rays.par_iter())
                    .zip(rule.weights.par_iter())
                    .map(|((u, (rmax, roots, dips)), w)| {
                        let mut pts = Vec::new();
                        for &r0 in roots {
                            let s = radial_slope(u, r0).abs().max(1e-12);
                            let width = h / s;
                            for j in [-10.0, -6.0, -3.0, -1.5, 0.0, 1.5, 3.0, 6.0, 10.0] {
                                pts.push(r0 + j * width);
                            }
                        }
                        let step = rmax / res.scan_points.max(4) as f64;
                        for &r0 in dips {
                            let g0 = psi(&vecmath::axpy(&center, r0, u)).abs();
                            if g0 < 12.0 * h {
                                pts.extend([r0 - step, r0 - 0.5 * step, r0, r0 + 0.5 * step, r0 + step]);
                            }
                        }
                        if pts.is_empty() {
                            // psi never approaches zero on this ray
                            let near = (0..=res.scan_points)
                                .map(|i| psi(&vecmath::axpy(&center, rmax * i as f64 / res.scan_points as f64, u)).abs())
                                .fold(f64::INFINITY, f64::min);
                            if near > 12.0 * h {
                                return 0.0;
                            }
                        }
                        let bp = breakpoints(0.0, *rmax, &pts);
                        let r = integrate_adaptive(
                            |r: f64| {
                                let pt = vecmath::axpy(&center, r, u);
                                let jac = if d == 1 { 1.0 } else { r.powi(d as i32 - 1) };
                                jac * f(&pt) * gaussian_kernel(psi(&pt), h)
                            },
                            &bp,
                            opts,
                        );
                        r.value * w
                    })
                    .collect();
                per_h.push(pairwise_sum(&parts) * factor);
            }
            let (value, residual) = extrapolate_h2(&res.widths, &per_h);
            if residual > res.abs_tol + res.rel_tol * value.abs() {
                return Err(GeometryError::NonConvergent { value, residual });
            }
            Ok(SurfaceEstimate {
                value,
                error: residual,
                mollified: per_h,
            })
        }
    }
}

/// Normalized integral of F over the sphere |p - c| = radius weighted by
/// 1/|grad psi|, by midpoint rule on a subdivided icosahedron.
pub fn triangulated_sphere_integral(
    f: &dyn Fn(&[f64]) -> f64,
    grad_norm: &dyn Fn(&[f64]) -> f64,
    center: [f64; 3],
    radius: f64,
    level: usize,
) -> f64 {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    for v in verts.iter_mut() {
        *v = unit(*v);
    }
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache = std::collections::HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let (p, q) = (verts[a], verts[b]);
                verts.push(unit([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                verts.len() - 1
            })
        };
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    // flat triangle areas rescaled so that the total equals the sphere area
    let areas: Vec<f64> = faces
        .iter()
        .map(|&[a, b, c]| {
            let (p, q, r) = (verts[a], verts[b], verts[c]);
            let u = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
            let v = [r[0] - p[0], r[1] - p[1], r[2] - p[2]];
            let cr = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
            0.5 * (cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2]).sqrt()
        })
        .collect();
    let total: f64 = areas.iter().sum();
    let scale = 4.0 * std::f64::consts::PI / total * radius * radius;
    let parts: Vec<f64> = faces
        .iter()
        .zip(&areas)
        .map(|(&[a, b, c], area)| {
            let m = unit([
                verts[a][0] + verts[b][0] + verts[c][0],
                verts[a][1] + verts[b][1] + verts[c][1],
                verts[a][2] + verts[b][2] + verts[c][2],
            ]);
            let pt = [center[0] + radius * m[0], center[1] + radius * m[1], center[2] + radius * m[2]];
            area * scale * f(&pt) / grad_norm(&pt)
        })
        .collect();
    pairwise_sum(&parts) / two_pi_half_d(3)
}

/// Neighborhood {k : |Phi_sigma(p, k) - theta| <= delta}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSetSlab {
    pub p: Vec<f64>,
    pub sigma: i8,
    pub theta: f64,
    pub delta: f64,
}

impl LevelSetSlab {
    pub fn contains(&self, model: &Model, k: &[f64]) -> bool {
        (model.phi(&self.p, k, self.sigma) - self.theta).abs() <= self.delta
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

fn sample_in_ball<R: Rng>(rng: &mut R, ball: &Ball, out: &mut [f64]) {
    let d = out.len();
    let mut n2 = 0.0;
    for o in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *o = z;
        n2 += z * z;
    }
    let u: f64 = rng.random();
    let r = ball.radius * u.powf(1.0 / d as f64) / n2.sqrt();
    for (o, c) in out.iter_mut().zip(&ball.center) {
        *o = c + *o * r;
    }
}

/// Normalized volume of the set of ball points satisfying `inside`.
fn ball_fraction_volume(
    ball: &Ball,
    samples: usize,
    seed: u64,
    stream: u64,
    inside: &(dyn Fn(&[f64]) -> bool + Sync),
) -> Estimate {
    let d = ball.center.len();
    let m: Moments = chunked_moments(samples, |c, range| {
        let mut rng = rng::stream(seed, stream.wrapping_add(c));
        let mut k = vec![0.0; d];
        let mut mo = Moments::default();
        for _ in range {
            sample_in_ball(&mut rng, ball, &mut k);
            mo.push(if inside(&k) { 1.0 } else { 0.0 });
        }
        mo
    });
    let vol = NormalizedMeasure::new(d).ball_volume(ball.radius);
    let e = m.estimate();
    if e.value == 0.0 {
        return Estimate::exact(0.0);
    }
    let p = e.value;
    Estimate {
        value: vol * p,
        stderr: vol * (p * (1.0 - p) / samples as f64).sqrt(),
    }
}

/// Monte Carlo volume of a slab inside a ball (normalized measure).
pub fn slab_volume(model: &Model, slab: &LevelSetSlab, ball: &Ball, samples: usize, seed: u64) -> Estimate {
    ball_fraction_volume(ball, samples, seed, tag::GEOMETRY, &|k: &[f64]| slab.contains(model, k))
}

/// Monte Carlo volume of the intersection of two slabs inside a ball.
pub fn intersection_volume(
    model: &Model,
    a: &LevelSetSlab,
    b: &LevelSetSlab,
    ball: &Ball,
    samples: usize,
    seed: u64,
) -> Estimate {
    ball_fraction_volume(ball, samples, seed, tag::GEOMETRY + (1 << 40), &|k: &[f64]| {
        a.contains(model, k) && b.contains(model, k)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransversalityProbe {
    /// Worst ratio |E1 ∩ E2 ∩ B(q)| |p1 - p2| / (delta1 delta2 rho^(d-2)).
    pub ratio: Estimate,
    pub worst_q: Vec<f64>,
    pub candidates: usize,
    pub intersection_volume: Estimate,
}

/// Project onto {Phi = theta} by Newton steps along the gradient.
fn project_to_level(model: &Model, slab: &LevelSetSlab, k: &mut [f64]) {
    let d = k.len();
    let mut g = vec![0.0; d];
    for _ in 0..30 {
        let r = model.phi(&slab.p, k, slab.sigma) - slab.theta;
        model.phi_grad(&slab.p, k, slab.sigma, &mut g);
        let g2 = vecmath::norm2(&g);
        if r.abs() < 1e-13 || g2 < 1e-24 {
            break;
        }
        for i in 0..d {
            k[i] -= r * g[i] / g2;
        }
    }
}

/// Candidate centers near the intersection of the two level sets, found by
/// alternating projections from points spread over the first level set.
pub fn intersection_candidates(model: &Model, a: &LevelSetSlab, b: &LevelSetSlab, spread: f64) -> Vec<Vec<f64>> {
    let d = model.dim();
    let rule = match AngularRule::new(d, 12, 24) {
        Ok(r) => r,
        Err(_) => return Vec::new(),
    };
    let c = model.phi_critical_point(&a.p, a.sigma);
    let mut out: Vec<Vec<f64>> = Vec::new();
    for u in &rule.dirs {
        let g = |r: f64| model.phi(&a.p, &vecmath::axpy(&c, r, u), a.sigma) - a.theta;
        let (roots, _) = ray_roots(&g, 20.0, 200);
        for r in roots {
            let mut k = vecmath::axpy(&c, r, u);
            for _ in 0..200 {
                project_to_level(model, b, &mut k);
                project_to_level(model, a, &mut k);
            }
            let ra = (model.phi(&a.p, &k, a.sigma) - a.theta).abs();
            let rb = (model.phi(&b.p, &k, b.sigma) - b.theta).abs();
            if ra <= a.delta && rb <= b.delta && out.iter().all(|q| vecmath::norm(&vecmath::sub(q, &k)) > spread) {
                out.push(k);
            }
        }
    }
    out
}

/// Empirical transversality constant over candidate ball centers.
pub fn transversality_probe(
    model: &Model,
    a: &LevelSetSlab,
    b: &LevelSetSlab,
    rho: f64,
    samples: usize,
    seed: u64,
) -> Result<TransversalityProbe, GeometryError> {
    let dist = vecmath::norm(&vecmath::sub(&a.p, &b.p));
    if dist == 0.0 {
        return Err(GeometryError::InvalidArgument("p1 = p2: ratio undefined".into()));
    }
    let cap = model.constants().rho_tilde;
    if a.delta > cap || b.delta > cap || rho > cap || a.delta <= 0.0 || b.delta <= 0.0 || rho <= 0.0 {
        return Err(GeometryError::InvalidArgument(format!(
            "delta1, delta2, rho must lie in (0, {cap}]"
        )));
    }
    let cands = intersection_candidates(model, a, b, 0.5 * rho);
    let d = model.dim();
    let denom = a.delta * b.delta * rho.powi(d as i32 - 2);
    let mut best = TransversalityProbe {
        ratio: Estimate::exact(0.0),
        worst_q: Vec::new(),
        candidates: cands.len(),
        intersection_volume: Estimate::exact(0.0),
    };
    for (i, q) in cands.iter().enumerate() {
        let ball = Ball {
            center: q.clone(),
            radius: rho,
        };
        let v = intersection_volume(model, a, b, &ball, samples, seed.wrapping_add(i as u64));
        let r = Estimate {
            value: v.value * dist / denom,
            stderr: v.stderr * dist / denom,
        };
        if r.value > best.ratio.value {
            best.ratio = r;
            best.worst_q = q.clone();
            best.intersection_volume = v;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angular_rules_sum_to_sphere_area() {
        for d in 1..=3 {
            let r = AngularRule::new(d, 8, 16).unwrap();
            let s: f64 = r.weights.iter().sum();
            assert!((s - vecmath::unit_sphere_area(d)).abs() < 1e-12);
        }
        assert!(matches!(AngularRule::new(4, 8, 8), Err(GeometryError::UnsupportedDimension(4))));
    }

    #[test]
    fn extrapolation_is_exact_for_quadratics_in_h2() {
        let hs = [0.08, 0.04, 0.02];
        let vals: Vec<f64> = hs.iter().map(|h: &f64| 3.0 + 2.0 * h * h - 5.0 * h.powi(4)).collect();
        let (v, _) = extrapolate_h2(&hs, &vals);
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn roots_on_a_ray() {
        let (r, _) = ray_roots(&|x: f64| (x - 1.3) * (x - 2.7), 4.0, 50);
        assert_eq!(r.len(), 2);
        assert!((r[0] - 1.3).abs() < 1e-12 && (r[1] - 2.7).abs() < 1e-12);
    }
}
