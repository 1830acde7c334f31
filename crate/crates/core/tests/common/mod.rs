#![allow(dead_code)]

use mahaguard::GaussianStats;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

pub fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
}

/// `A Aᵀ / d + c·I`, comfortably SPD.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, ridge: f64) -> Array2<f64> {
    let a = normal_matrix(rng, d, d);
    let mut s = a.dot(&a.t()) / d as f64;
    for i in 0..d {
        s[[i, i]] += ridge;
    }
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (s[[i, j]] + s[[j, i]]);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    s
}

pub fn random_stats(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GaussianStats {
    let means = normal_matrix(rng, k, d) * 2.0;
    let tied = random_spd(rng, d, 0.5);
    let bg_mean = normal_vec(rng, d);
    let bg = random_spd(rng, d, 1.0);
    GaussianStats::from_parts(means, tied, bg_mean, bg).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn dense_inverse(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
            .unwrap();
        for j in 0..n {
            m.swap([col, j], [pivot, j]);
            inv.swap([col, j], [pivot, j]);
        }
        let p = m[[col, col]];
        for j in 0..n {
            m[[col, j]] /= p;
            inv[[col, j]] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = m[[i, col]];
                for j in 0..n {
                    m[[i, j]] -= f * m[[col, j]];
                    inv[[i, j]] -= f * inv[[col, j]];
                }
            }
        }
    }
    inv
}

/// Determinant by LU elimination with partial pivoting.
pub fn dense_det(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut m = a.clone();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
            .unwrap();
        if pivot != col {
            for j in 0..n {
                m.swap([col, j], [pivot, j]);
            }
            det = -det;
        }
        let p = m[[col, col]];
        det *= p;
        for i in (col + 1)..n {
            let f = m[[i, col]] / p;
            for j in col..n {
                m[[i, j]] -= f * m[[col, j]];
            }
        }
    }
    det
}

pub fn dense_md(z: &Array1<f64>, mu: &Array1<f64>, inv: &Array2<f64>) -> f64 {
    let v = z - mu;
    v.dot(&inv.dot(&v))
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
