//! Small numeric helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Quintic smoothstep on [0,1]: C² with vanishing first and second derivatives at the ends.
pub fn smoothstep5(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

pub fn smoothstep5_d(t: f64) -> f64 {
    if !(0.0..=1.0).contains(&t) {
        return 0.0;
    }
    30.0 * t * t * (1.0 - t) * (1.0 - t)
}

/// Cubic smoothstep on [0,1].
pub fn smoothstep3(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn max_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Angle between unit vectors, accurate near 0 and π.
pub fn unit_angle(a: &[f64], b: &[f64]) -> f64 {
    let c = dist(a, b);
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x + y) * (x + y)).sum::<f64>().sqrt();
    2.0 * c.atan2(s)
}

/// Orthonormal basis of the orthogonal complement of the unit vector `xi`.
pub fn complement_basis(xi: &[f64]) -> Vec<Vec<f64>> {
    let nu = xi.len();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(nu - 1);
    let mut order: Vec<usize> = (0..nu).collect();
    order.sort_by(|&i, &j| xi[i].abs().partial_cmp(&xi[j].abs()).unwrap());
    for &k in &order {
        if basis.len() == nu - 1 {
            break;
        }
        let mut v = vec![0.0; nu];
        v[k] = 1.0;
        for b in std::iter::once(xi).chain(basis.iter().map(|b| b.as_slice())) {
            let d = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= d * bi);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// Gauss–Legendre nodes and weights on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            let dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                let (mut q0, mut q1) = (1.0, 0.0);
                for j in 0..n {
                    let q2 = q1;
                    q1 = q0;
                    q0 = ((2 * j + 1) as f64 * z * q1 - j as f64 * q2) / (j + 1) as f64;
                }
                let dq = n as f64 * (z * q0 - q1) / (z * z - 1.0);
                x[i] = -z;
                w[i] = 2.0 / ((1.0 - z * z) * dq * dq);
                break;
            }
        }
    }
    (x, w)
}

/// Sum in a fixed pairwise order, for reproducible reductions.
pub fn stable_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    stable_sum(&v[..mid]) + stable_sum(&v[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(6);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert!((s - 2.0 / 11.0).abs() < 1e-13);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn complement_basis_is_orthonormal() {
        let xi = [0.6, 0.0, 0.8];
        let b = complement_basis(&xi);
        assert_eq!(b.len(), 2);
        for v in &b {
            assert!(dot(v, &xi).abs() < 1e-14 && (norm(v) - 1.0).abs() < 1e-14);
        }
        assert!(dot(&b[0], &b[1]).abs() < 1e-14);
    }
}
