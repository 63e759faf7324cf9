//! Kinetic Monte Carlo for the linear Boltzmann equation and a Monte Carlo
//! evaluation of its Dyson-series terms.

use crate::kernels::{Branch, CollisionKernel, KernelError};
use crate::model::Model;
use crate::rng::{self, StreamRng};
use crate::stats::{chunked_moments, pairwise_sum, Estimate, Moments};
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Weighted phase-space particles stored as flat arrays of length n * d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub dim: usize,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub time: f64,
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            x: Vec::new(),
            v: Vec::new(),
            w: Vec::new(),
            time: 0.0,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn push(&mut self, x: &[f64], v: &[f64], w: f64) {
        assert_eq!(x.len(), self.dim);
        assert_eq!(v.len(), self.dim);
        self.x.extend_from_slice(x);
        self.v.extend_from_slice(v);
        self.w.push(w);
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn momentum(&self, i: usize) -> &[f64] {
        &self.v[i * self.dim..(i + 1) * self.dim]
    }

    pub fn total_weight(&self) -> f64 {
        pairwise_sum(&self.w)
    }

    /// Draw n unit-weight particles from an initial density.
    pub fn sample<D: InitialDensity + ?Sized>(density: &D, n: usize, seed: u64) -> Self {
        let d = density.dim();
        let chunks = n.div_ceil(crate::stats::CHUNK);
        let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut r = rng::stream(seed, rng::tag::INITIAL | c as u64);
                let len = crate::stats::CHUNK.min(n - c * crate::stats::CHUNK);
                let mut xs = Vec::with_capacity(len * d);
                let mut vs = Vec::with_capacity(len * d);
                for _ in 0..len {
                    let (x, v) = density.sample(&mut r);
                    xs.extend(x);
                    vs.extend(v);
                }
                (xs, vs)
            })
            .collect();
        let mut e = Self::new(d, seed);
        for (xs, vs) in parts {
            e.x.extend(xs);
            e.v.extend(vs);
        }
        e.w = vec![1.0; n];
        e
    }
}

/// Probability density F_0 on phase space, known through a sampler.
pub trait InitialDensity: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>);
}

/// Gaussian in X times a Maxwellian exp(-beta |V - drift|^2 / 2) in V.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMaxwellian {
    pub x_center: Vec<f64>,
    pub x_width: f64,
    pub drift: Vec<f64>,
    pub beta: f64,
}

impl InitialDensity for GaussianMaxwellian {
    fn dim(&self) -> usize {
        self.x_center.len()
    }

    fn sample(&self, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
        let sv = 1.0 / self.beta.sqrt();
        let x = self
            .x_center
            .iter()
            .map(|c| c + self.x_width * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let v = self
            .drift
            .iter()
            .map(|m| m + sv * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, v)
    }
}

/// Spatially homogeneous (X = 0) Gibbs state exp(-beta e(V)) for quadratic
/// electron dispersion, drawn through the energy: e ~ Gamma(d/2, 1/beta).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsQuadratic {
    pub dim: usize,
    pub beta: f64,
}

impl InitialDensity for GibbsQuadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
        let g = Gamma::new(self.dim as f64 / 2.0, 1.0 / self.beta).expect("valid gamma");
        let e: f64 = g.sample(rng);
        let speed = (2.0 * e).sqrt();
        let dir: Vec<f64> = loop {
            let u: Vec<f64> = (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = crate::vecmath::norm(&u);
            if n > 1e-12 {
                break u.iter().map(|c| c / n).collect();
            }
        };
        (vec![0.0; self.dim], dir.iter().map(|c| c * speed).collect())
    }
}

/// X <- X + dt grad e(V) for every particle.
pub fn free_flight(model: &Model, ensemble: &mut ParticleEnsemble, dt: f64) {
    let d = ensemble.dim;
    let v = &ensemble.v;
    ensemble
        .x
        .par_chunks_mut(d)
        .zip(v.par_chunks(d))
        .for_each(|(x, v)| flight(model, x, v, dt));
    ensemble.time += dt;
}

fn flight(model: &Model, x: &mut [f64], v: &[f64], dt: f64) {
    let mut g = [0.0; 8];
    let g = if v.len() <= 8 {
        model.electron().gradient(v, &mut g[..v.len()]);
        &g[..v.len()]
    } else {
        return flight_alloc(model, x, v, dt);
    };
    for (xi, gi) in x.iter_mut().zip(g) {
        *xi += dt * gi;
    }
}

fn flight_alloc(model: &Model, x: &mut [f64], v: &[f64], dt: f64) {
    for (xi, gi) in x.iter_mut().zip(model.grad_e(v)) {
        *xi += dt * gi;
    }
}

/// Per-particle jump statistics from one evolve call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JumpStats {
    pub jumps: Vec<u32>,
    /// int_0^T sigma_0(V_s) ds along each trajectory.
    pub integrated_rate: Vec<f64>,
    /// Jumps abandoned because the sampler found no open channel.
    pub rejected: u64,
}

impl JumpStats {
    /// Mean of (jumps - integrated rate); zero in expectation.
    pub fn compensated_mean(&self) -> Estimate {
        let mut m = Moments::default();
        for (j, r) in self.jumps.iter().zip(&self.integrated_rate) {
            m.push(*j as f64 - r);
        }
        m.estimate()
    }

    pub fn mean_jumps(&self) -> f64 {
        self.jumps.iter().map(|&j| j as f64).sum::<f64>() / self.jumps.len().max(1) as f64
    }
}

/// Evolve every particle by the jump process of the linear Boltzmann
/// equation over macroscopic time T: exponential waits at rate sigma_0(V),
/// free flight in between, post-collision momenta from the kernel.
pub fn evolve(kernel: &CollisionKernel, ensemble: &mut ParticleEnsemble, t: f64) -> JumpStats {
    let d = ensemble.dim;
    let model = kernel.model();
    let seed = ensemble.seed;
    // distinct stream per particle and per evolve call
    let epoch = ensemble.time.to_bits().rotate_left(17);
    let results: Vec<(u32, f64, u64)> = ensemble
        .x
        .par_chunks_mut(d)
        .zip(ensemble.v.par_chunks_mut(d))
        .enumerate()
        .map(|(i, (x, v))| {
            let mut r = rng::stream(seed ^ epoch, rng::tag::EVOLVE | i as u64);
            let mut left = t;
            let mut jumps = 0u32;
            let mut integ = 0.0;
            let mut rejected = 0u64;
            loop {
                let rate = kernel.rate(v);
                if !(rate > 0.0) {
                    flight(model, x, v, left);
                    break;
                }
                let wait: f64 = Exp::new(rate).expect("positive rate").sample(&mut r);
                if wait >= left {
                    integ += rate * left;
                    flight(model, x, v, left);
                    break;
                }
                integ += rate * wait;
                flight(model, x, v, wait);
                left -= wait;
                match kernel.sample_post_collision(v, &mut r) {
                    Ok((u, _)) => {
                        v.copy_from_slice(&u);
                        jumps += 1;
                    }
                    Err(_) => rejected += 1,
                }
            }
            (jumps, integ, rejected)
        })
        .collect();
    ensemble.time += t;
    JumpStats {
        jumps: results.iter().map(|r| r.0).collect(),
        integrated_rate: results.iter().map(|r| r.1).collect(),
        rejected: results.iter().map(|r| r.2).sum(),
    }
}

/// <J, F>: weighted mean of J over the ensemble.
pub fn pair_observable<J>(j: J, ensemble: &ParticleEnsemble) -> f64
where
    J: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    let d = ensemble.dim;
    let vals: Vec<f64> = ensemble
        .x
        .par_chunks(d)
        .zip(ensemble.v.par_chunks(d))
        .zip(ensemble.w.par_iter())
        .map(|((x, v), w)| w * j(x, v))
        .collect();
    pairwise_sum(&vals) / ensemble.total_weight()
}

/// <J, F> with the standard error of the particle mean (unit weights).
pub fn pair_observable_estimate<J>(j: J, ensemble: &ParticleEnsemble) -> Estimate
where
    J: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    let d = ensemble.dim;
    let total = ensemble.total_weight();
    let n = ensemble.len();
    let m = chunked_moments(n, |_, range| {
        let mut m = Moments::default();
        for i in range {
            let x = &ensemble.x[i * d..(i + 1) * d];
            let v = &ensemble.v[i * d..(i + 1) * d];
            m.push(ensemble.w[i] * n as f64 / total * j(x, v));
        }
        m
    });
    m.estimate()
}

/// Collision history of one Dyson term: V_0 is the final momentum, V_n the
/// initial one; sigma_{j+1} labels the jump V_{j+1} -> V_j.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionChain {
    pub times: Vec<f64>,
    pub momenta: Vec<Vec<f64>>,
    pub branches: Vec<Branch>,
}

impl CollisionChain {
    pub fn order(&self) -> usize {
        self.branches.len()
    }

    /// Largest |e(V_j) - e(V_{j+1}) + sigma_{j+1} omega(V_j - V_{j+1})|.
    pub fn shell_residual(&self, model: &Model) -> f64 {
        (0..self.order())
            .map(|j| {
                let (a, b) = (&self.momenta[j], &self.momenta[j + 1]);
                let k = crate::vecmath::sub(a, b);
                (model.e(a) - model.e(b) + self.branches[j].sigma() as f64 * model.omega(&k)).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// One importance sample of the n-th Dyson term: the chain, the point
/// where J is evaluated, and the weight multiplying J.
pub fn sample_chain(
    kernel: &CollisionKernel,
    n: usize,
    t: f64,
    x0: &[f64],
    vn: &[f64],
    rng: &mut StreamRng,
) -> Result<(CollisionChain, Vec<f64>, f64), KernelError> {
    let model = kernel.model();
    let mut momenta = vec![vn.to_vec()];
    let mut branches = Vec::with_capacity(n);
    let mut weight = 1.0;
    for _ in 0..n {
        let cur = momenta.last().unwrap();
        let rate = kernel.rate(cur);
        if !(rate > 0.0) {
            return Err(KernelError::NoOpenChannel(cur.clone()));
        }
        weight *= rate;
        let (u, b) = kernel.sample_post_collision(cur, rng)?;
        momenta.push(u);
        branches.push(b);
    }
    momenta.reverse();
    branches.reverse();
    // times on the simplex sum alpha_j = t, volume t^n / n!
    let mut times: Vec<f64> = (0..=n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = times.iter().sum();
    for a in &mut times {
        *a *= t / s;
    }
    let mut vol = 1.0;
    for k in 1..=n {
        vol *= t / k as f64;
    }
    weight *= vol;
    let mut x = x0.to_vec();
    let mut damp = 0.0;
    for (a, v) in times.iter().zip(&momenta) {
        // 2 alpha Im Psi(V) = -alpha sigma_0(V)
        damp += a * kernel.rate(v);
        for (xi, gi) in x.iter_mut().zip(model.grad_e(v)) {
            *xi += a * gi;
        }
    }
    weight *= (-damp).exp();
    Ok((
        CollisionChain {
            times,
            momenta,
            branches,
        },
        x,
        weight,
    ))
}

/// Monte Carlo estimate of the n-th Dyson term <J, F_T^{(n)}> for a
/// probability density F_0; chains without an open channel contribute 0.
pub fn dyson_term<D, J>(
    kernel: &CollisionKernel,
    n: usize,
    t: f64,
    density: &D,
    j: J,
    samples: usize,
    seed: u64,
) -> Estimate
where
    D: InitialDensity + ?Sized,
    J: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    if n > 0 && kernel.model().coupling().is_zero() {
        return Estimate::exact(0.0);
    }
    let m = chunked_moments(samples, |c, range| {
        let mut r = rng::stream(seed, rng::tag::DYSON | ((n as u64) << 40) | c);
        let mut m = Moments::default();
        for _ in range {
            let (x0, vn) = density.sample(&mut r);
            match sample_chain(kernel, n, t, &x0, &vn, &mut r) {
                Ok((chain, x, w)) => m.push(w * j(&x, &chain.momenta[0])),
                Err(_) => m.push(0.0),
            }
        }
        m
    });
    m.estimate()
}

/// Sum of Dyson terms 0..=n_max with errors added in quadrature.
pub fn dyson_partial_sum<D, J>(
    kernel: &CollisionKernel,
    n_max: usize,
    t: f64,
    density: &D,
    j: J,
    samples: usize,
    seed: u64,
) -> (Estimate, Vec<Estimate>)
where
    D: InitialDensity + ?Sized,
    J: Fn(&[f64], &[f64]) -> f64 + Sync + Copy,
{
    let terms: Vec<Estimate> = (0..=n_max)
        .map(|n| dyson_term(kernel, n, t, density, j, samples, seed))
        .collect();
    let value = terms.iter().map(|e| e.value).sum();
    let stderr = terms.iter().map(|e| e.stderr * e.stderr).sum::<f64>().sqrt();
    (Estimate { value, stderr }, terms)
}

/// Poisson tail bound (sigma T)^{n+1} / (n+1)! for truncating after order n.
pub fn poisson_tail(rate_times_t: f64, n_max: usize) -> f64 {
    let mut v = 1.0;
    for k in 1..=n_max + 1 {
        v *= rate_times_t / k as f64;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_tail_values() {
        assert!((poisson_tail(0.5, 4) - 0.5f64.powi(5) / 120.0).abs() < 1e-18);
        assert_eq!(poisson_tail(0.0, 2), 0.0);
    }
}
