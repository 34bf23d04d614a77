#![allow(dead_code)]

use mfviflow::diff::Tensor;
use mfviflow::flows::FlowStack;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Overwrites one named parameter.
pub fn set_param(stack: &mut FlowStack, name: &str, values: &[f64]) {
    let store = stack.params_mut();
    let idx = store
        .names()
        .iter()
        .position(|n| n == name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    store.tensors_mut()[idx].data_mut().copy_from_slice(values);
}

/// Raw conditioner output that the clamp maps to log-scale `s`.
pub fn raw_scale(s: f64, clamp: f64) -> f64 {
    clamp * (s / clamp).atanh()
}

/// Makes a fresh two-block 2D stack the affine map
/// `z_i = (x_i - mean_i) / sd_i`; block k transforms coordinate k.
pub fn diagonal_affine(stack: &mut FlowStack, mean: [f64; 2], sd: [f64; 2]) {
    let clamp = stack.arch().clamp;
    for k in 0..2 {
        let s = -sd[k].ln();
        set_param(stack, &format!("b{k}.c.out.b"), &[raw_scale(s, clamp), -mean[k] / sd[k]]);
    }
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        if a[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap(p, c);
            d = -d;
        }
        d *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            let pivot = a[c].clone();
            for (k, v) in a[r].iter_mut().enumerate().skip(c) {
                *v -= f * pivot[k];
            }
        }
    }
    d
}

/// Central-difference Jacobian of a map on one row.
pub fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut p = x.to_vec();
    for i in 0..n {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        cols.push(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
    }
    (0..n).map(|r| (0..n).map(|c| cols[c][r]).collect()).collect()
}

pub fn row(x: &[f64]) -> Tensor {
    Tensor::matrix(1, x.len(), x.to_vec()).unwrap()
}
