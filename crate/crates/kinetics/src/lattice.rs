//! Finite momentum lattices (sqrt(2 pi) / L) Z^d and density matrices on them.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;

/// A finite set of points of the dual lattice, given by integer indices.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "LatticeRepr", into = "LatticeRepr")]
pub struct LatticeSpec {
    dim: usize,
    l: f64,
    points: Vec<Vec<i32>>,
    lookup: HashMap<Vec<i32>, usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LatticeRepr {
    dim: usize,
    l: f64,
    points: Vec<Vec<i32>>,
}

impl From<LatticeRepr> for LatticeSpec {
    fn from(r: LatticeRepr) -> Self {
        LatticeSpec::from_indices(r.dim, r.l, r.points)
    }
}

impl From<LatticeSpec> for LatticeRepr {
    fn from(s: LatticeSpec) -> Self {
        LatticeRepr {
            dim: s.dim,
            l: s.l,
            points: s.points,
        }
    }
}

impl PartialEq for LatticeSpec {
    fn eq(&self, o: &Self) -> bool {
        self.dim == o.dim && self.l == o.l && self.points == o.points
    }
}

impl LatticeSpec {
    pub fn from_indices(dim: usize, l: f64, points: Vec<Vec<i32>>) -> Self {
        assert!(points.iter().all(|p| p.len() == dim), "index dimension mismatch");
        let lookup = points.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        Self { dim, l, points, lookup }
    }

    /// All indices with |j_i| <= m in every coordinate.
    pub fn box_cutoff(dim: usize, l: f64, m: i32) -> Self {
        let mut points = vec![vec![]];
        for _ in 0..dim {
            points = points
                .into_iter()
                .flat_map(|p: Vec<i32>| {
                    (-m..=m).map(move |j| {
                        let mut q = p.clone();
                        q.push(j);
                        q
                    })
                })
                .collect();
        }
        Self::from_indices(dim, l, points)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn box_size(&self) -> f64 {
        self.l
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Lattice spacing sqrt(2 pi) / L.
    pub fn spacing(&self) -> f64 {
        (2.0 * PI).sqrt() / self.l
    }

    /// Weight L^{-d} of the normalized sum over the dual lattice.
    pub fn measure(&self) -> f64 {
        self.l.powi(-(self.dim as i32))
    }

    pub fn index(&self, i: usize) -> &[i32] {
        &self.points[i]
    }

    pub fn momentum(&self, i: usize) -> Vec<f64> {
        let h = self.spacing();
        self.points[i].iter().map(|&j| j as f64 * h).collect()
    }

    /// Momentum of an arbitrary dual-lattice index.
    pub fn momentum_of(&self, idx: &[i32]) -> Vec<f64> {
        let h = self.spacing();
        idx.iter().map(|&j| j as f64 * h).collect()
    }

    pub fn find(&self, idx: &[i32]) -> Option<usize> {
        self.lookup.get(idx).copied()
    }

    /// Position of p + sign * k when on the lattice.
    pub fn shift(&self, p: usize, k: &[i32], sign: i32) -> Option<usize> {
        let q: Vec<i32> = self.points[p].iter().zip(k).map(|(a, b)| a + sign * b).collect();
        self.find(&q)
    }
}

/// Electron density matrix rho(p, p') on a lattice with sum_p rho(p, p) = 1;
/// the kernel gamma^(p, p') of the continuum convention is L^d rho.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrixGrid {
    pub lattice: LatticeSpec,
    pub rho: DMatrix<Complex64>,
}

impl DensityMatrixGrid {
    pub fn new(lattice: LatticeSpec, rho: DMatrix<Complex64>) -> Self {
        assert_eq!(rho.nrows(), lattice.len());
        assert_eq!(rho.ncols(), lattice.len());
        Self { lattice, rho }
    }

    /// Pure state from momentum amplitudes, normalized.
    pub fn pure(lattice: LatticeSpec, amp: &[Complex64]) -> Self {
        let norm: f64 = amp.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        let v: Vec<Complex64> = amp.iter().map(|a| a / norm).collect();
        let n = v.len();
        let rho = DMatrix::from_fn(n, n, |i, j| v[i] * v[j].conj());
        Self::new(lattice, rho)
    }

    pub fn trace(&self) -> Complex64 {
        self.rho.trace()
    }

    /// gamma^(p_i, p_j) = L^d rho_ij.
    pub fn kernel(&self, i: usize, j: usize) -> Complex64 {
        self.rho[(i, j)] / self.lattice.measure()
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.rho.nrows();
        let mut m = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                m = m.max((self.rho[(i, j)] - self.rho[(j, i)].conj()).norm());
            }
        }
        m
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut v: Vec<f64> = SymmetricEigen::new(self.rho.clone()).eigenvalues.iter().copied().collect();
        v.sort_by(|a, b| a.total_cmp(b));
        v
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_lattice_lookup() {
        let l = LatticeSpec::box_cutoff(2, 3.0, 1);
        assert_eq!(l.len(), 9);
        let c = l.find(&[0, 0]).unwrap();
        let e = l.shift(c, &[1, -1], 1).unwrap();
        assert_eq!(l.index(e), &[1, -1]);
        assert!(l.shift(e, &[1, 0], 1).is_none());
        assert!((l.spacing() - (2.0 * PI).sqrt() / 3.0).abs() < 1e-15);
    }
}
