//! Least-squares check that every synthetic modality is affinely predictable from the others.

#![allow(clippy::needless_range_loop)]

use cerd::synth::{generate, SyntheticSpec};

/// Solves `a x = b` for square `a` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            for c in 0..b[r].len() {
                b[r][c] -= f * b[col][c];
            }
        }
    }
    for col in (0..n).rev() {
        for c in 0..b[col].len() {
            let mut v = b[col][c];
            for k in col + 1..n {
                v -= a[col][k] * b[k][c];
            }
            b[col][c] = v / a[col][col];
        }
    }
    b
}

#[test]
fn conditional_mean_is_affine_in_the_other_modalities() {
    let spec = SyntheticSpec {
        subjects: 3000,
        missing_rates: vec![0.0; 4],
        ..SyntheticSpec::default()
    };
    let data = generate(&spec).unwrap();
    let (fit, held): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|i| i % 4 != 0);
    for target in 0..data.num_modalities() {
        let design = |i: usize| {
            let mut x = vec![1.0];
            for m in (0..data.num_modalities()).filter(|&m| m != target) {
                x.extend_from_slice(data.row(i, m));
            }
            x
        };
        let p = design(0).len();
        let d = data.dims[target];
        let mut xtx = vec![vec![0.0; p]; p];
        let mut xty = vec![vec![0.0; d]; p];
        for &i in &fit {
            let x = design(i);
            let y = data.row(i, target);
            for r in 0..p {
                for c in 0..p {
                    xtx[r][c] += x[r] * x[c];
                }
                for c in 0..d {
                    xty[r][c] += x[r] * y[c];
                }
            }
        }
        let w = solve(xtx, xty);

        let mean: Vec<f64> = (0..d)
            .map(|c| held.iter().map(|&i| data.row(i, target)[c]).sum::<f64>() / held.len() as f64)
            .collect();
        let (mut resid, mut total) = (0.0, 0.0);
        for &i in &held {
            let x = design(i);
            let y = data.row(i, target);
            for c in 0..d {
                let pred: f64 = (0..p).map(|r| x[r] * w[r][c]).sum();
                resid += (y[c] - pred).powi(2);
                total += (y[c] - mean[c]).powi(2);
            }
        }
        let noise_floor = spec.noise * spec.noise * d as f64 * held.len() as f64;
        let frac = resid / total;
        assert!(frac < 0.85, "{}: affine residual fraction {frac:.3}", data.modalities[target]);
        assert!(resid > noise_floor, "{}: residual below the noise floor", data.modalities[target]);
    }
}
