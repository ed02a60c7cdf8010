mod common;

use common::{randn, rng};
use nalgebra::DMatrix;
use proptest::prelude::*;
use relora::tensor::{singular_values, svd_singular_values, Tensor};

fn oracle(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

#[test]
fn agrees_with_reference_decomposition() {
    let mut r = rng(1);
    for _ in 0..50 {
        let rows = 1 + (r.random::<u32>() % 40) as usize;
        let cols = 1 + (r.random::<u32>() % 40) as usize;
        let data = randn(&mut r, rows * cols, 1.0);
        let got = singular_values(&data, rows, cols);
        let want = oracle(&data, rows, cols);
        assert_eq!(got.len(), rows.min(cols));
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-10 * want[0], "{rows}x{cols}: {g} vs {w}");
        }
    }
}

#[test]
fn rank_two_product() {
    // u1 v1^T + 2 u2 v2^T with orthonormal u, v has singular values 2, 1, 0...
    let (rows, cols) = (5, 4);
    let u1 = [1.0, 0.0, 0.0, 0.0, 0.0];
    let u2 = [0.0, 0.6, 0.8, 0.0, 0.0];
    let v1 = [0.0, 0.0, 1.0, 0.0];
    let v2 = [0.5, 0.5, 0.0, f64::sqrt(0.5)];
    let mut m = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            m[i * cols + j] = u1[i] * v1[j] + 2.0 * u2[i] * v2[j];
        }
    }
    let sv = singular_values(&m, rows, cols);
    assert!((sv[0] - 2.0).abs() < 1e-14);
    assert!((sv[1] - 1.0).abs() < 1e-14);
    assert!(sv[2] < 1e-14 && sv[3] < 1e-14);
}

#[test]
fn single_precision_input_is_widened() {
    let t = Tensor::from_vec(&[2, 2], vec![3.0f32, 0.0, 0.0, -4.0]).unwrap();
    assert_eq!(svd_singular_values(&t).unwrap(), vec![4.0, 3.0]);
}

use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frobenius_norm_is_preserved(seed in 0u64..100_000, rows in 1usize..30, cols in 1usize..30) {
        let mut r = rng(seed);
        let data = randn(&mut r, rows * cols, 1.0);
        let sv = singular_values(&data, rows, cols);
        let fro2: f64 = data.iter().map(|x| x * x).sum();
        let sv2: f64 = sv.iter().map(|s| s * s).sum();
        prop_assert!((fro2 - sv2).abs() <= 1e-10 * fro2.max(1.0));
        prop_assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(sv.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn transpose_has_the_same_spectrum(seed in 0u64..100_000, rows in 1usize..20, cols in 1usize..20) {
        let mut r = rng(seed);
        let data = randn(&mut r, rows * cols, 1.0);
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = data[i * cols + j];
            }
        }
        let a = singular_values(&data, rows, cols);
        let b = singular_values(&t, cols, rows);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * a[0].max(1.0));
        }
    }
}
