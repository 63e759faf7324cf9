//! Small helpers for momentum vectors stored as slices.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm2(a).sqrt()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn neg(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| -x).collect()
}

/// a + t * b
pub fn axpy(a: &[f64], t: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + t * y).collect()
}

/// Japanese bracket (1 + |k|^2)^(1/2).
pub fn bracket(a: &[f64]) -> f64 {
    (1.0 + norm2(a)).sqrt()
}

/// Volume of the Euclidean unit ball in dimension d.
pub fn unit_ball_volume(d: usize) -> f64 {
    let pi = std::f64::consts::PI;
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * pi / d as f64 * unit_ball_volume(d - 2),
    }
}

/// Surface area of the unit sphere S^{d-1}.
pub fn unit_sphere_area(d: usize) -> f64 {
    d as f64 * unit_ball_volume(d)
}

/// (2 pi)^{d/2}, the normalization of d-dimensional integrals.
pub fn two_pi_half_d(d: usize) -> f64 {
    (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0)
}
