//! Single-rank dense reference multiplication and the verification metric.
//!
//! This is the second route for every correctness check: a plain triple
//! loop over row-major buffers, never touching the block kernels, stacks,
//! or transport.

/// `C = A * B` for row-major dense buffers, `A` is `m x k`, `B` is `k x n`.
pub fn matmul_reference(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[i * n..(i + 1) * n];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// Largest elementwise deviation of `got` from `want`, scaled by the
/// product of the matching A-row and B-column Euclidean norms.
///
/// This is the standard backward-style error for a length-`k` dot product;
/// exact zero rows/columns contribute zero error by construction.
pub fn max_scaled_error(
    got: &[f64],
    want: &[f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> f64 {
    assert_eq!(got.len(), m * n);
    assert_eq!(want.len(), m * n);
    let row_norms: Vec<f64> = (0..m)
        .map(|i| a[i * k..(i + 1) * k].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut col_norms = vec![0.0f64; n];
    for p in 0..k {
        for j in 0..n {
            col_norms[j] += b[p * n + j] * b[p * n + j];
        }
    }
    for c in &mut col_norms {
        *c = c.sqrt();
    }
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..n {
            let diff = (got[i * n + j] - want[i * n + j]).abs();
            if diff == 0.0 {
                continue;
            }
            let scale = row_norms[i] * col_norms[j];
            let err = if scale > 0.0 { diff / scale } else { f64::INFINITY };
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Relative tolerance used everywhere a result is checked against the
/// dense reference.
pub const VERIFY_TOL: f64 = 1e-12;
