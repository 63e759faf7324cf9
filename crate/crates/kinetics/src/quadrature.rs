//! One-dimensional quadrature rules shared by the integration routines.

use num_complex::Complex64;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::ops::{Add, Mul, Sub};

/// Scalar types that can be integrated (real or complex).
pub trait Integrand:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> + Send + Sync
{
    fn zero() -> Self;
    fn modulus(self) -> f64;
}

impl Integrand for f64 {
    fn zero() -> Self {
        0.0
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl Integrand for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = 0.0;
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Gauss-Legendre rule mapped onto [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let h = 0.5 * (b - a);
    let c = 0.5 * (a + b);
    (
        x.iter().map(|t| c + h * t).collect(),
        w.iter().map(|t| h * t).collect(),
    )
}

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<T: Integrand, F: FnMut(f64) -> T>(f: &mut F, a: f64, b: f64) -> (T, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kronrod = kronrod + s * WGK[j];
        if j % 2 == 1 {
            gauss = gauss + s * WG[j / 2];
        }
    }
    let kronrod = kronrod * h;
    let gauss = gauss * h;
    (kronrod, (kronrod - gauss).modulus())
}

#[derive(Clone, Copy, Debug)]
pub struct AdaptiveOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_segments: usize,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 1e-9,
            max_segments: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QuadResult<T> {
    pub value: T,
    pub error: f64,
    pub converged: bool,
}

struct Segment<T> {
    a: f64,
    b: f64,
    value: T,
    error: f64,
}

impl<T> PartialEq for Segment<T> {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl<T> Eq for Segment<T> {}
impl<T> PartialOrd for Segment<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Segment<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Adaptive Gauss-Kronrod (7/15) integration over the partition given by
/// `points` (sorted, at least two entries).
pub fn integrate_adaptive<T: Integrand, F: FnMut(f64) -> T>(
    mut f: F,
    points: &[f64],
    opts: AdaptiveOptions,
) -> QuadResult<T> {
    let mut heap = BinaryHeap::new();
    let mut total = T::zero();
    let mut err = 0.0;
    for w in points.windows(2) {
        if w[1] <= w[0] {
            continue;
        }
        let (v, e) = gk15(&mut f, w[0], w[1]);
        total = total + v;
        err += e;
        heap.push(Segment {
            a: w[0],
            b: w[1],
            value: v,
            error: e,
        });
    }
    let mut converged = false;
    loop {
        if err <= opts.abs_tol.max(opts.rel_tol * total.modulus()) {
            converged = true;
            break;
        }
        if heap.len() >= opts.max_segments {
            break;
        }
        let Some(seg) = heap.pop() else {
            converged = true;
            break;
        };
        let m = 0.5 * (seg.a + seg.b);
        if m <= seg.a || m >= seg.b {
            heap.push(seg);
            break;
        }
        let (v1, e1) = gk15(&mut f, seg.a, m);
        let (v2, e2) = gk15(&mut f, m, seg.b);
        total = total - seg.value + v1 + v2;
        err += e1 + e2 - seg.error;
        heap.push(Segment {
            a: seg.a,
            b: m,
            value: v1,
            error: e1,
        });
        heap.push(Segment {
            a: m,
            b: seg.b,
            value: v2,
            error: e2,
        });
    }
    // recompute the sums to shed accumulated rounding
    let mut value = T::zero();
    let mut error = 0.0;
    for s in heap.iter() {
        value = value + s.value;
        error += s.error;
    }
    QuadResult {
        value,
        error,
        converged,
    }
}

/// Sorted, deduplicated breakpoints clipped to [a, b].
pub fn breakpoints(a: f64, b: f64, interior: &[f64]) -> Vec<f64> {
    let mut pts = vec![a, b];
    pts.extend(interior.iter().copied().filter(|x| *x > a && *x < b));
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|x, y| (*x - *y).abs() < 1e-14 * (1.0 + x.abs()));
    pts
}
