//! Slice-level numeric kernels shared by eager tensor ops and the tape.
//!
//! All matrices are row-major. Output buffers are overwritten unless the
//! function name says `accumulate`.

use super::Mask;
use crate::error::{Error, Result};

/// `out[m x n] = a[m x k] * b[k x n]`
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.fill(0.0);
    matmul_accumulate(a, b, out, m, k, n);
}

/// `out[m x n] += a[m x k] * b[k x n]`
pub fn matmul_accumulate(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`
pub fn matmul_nt_accumulate(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[m x n] += a[k x m]^T * b[k x n]`
pub fn matmul_tn_accumulate(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Stabilized row softmax. Masked entries are written as exactly zero.
pub fn softmax_rows(
    x: &[f64],
    mask: Option<&Mask>,
    out: &mut [f64],
    rows: usize,
    cols: usize,
) -> Result<()> {
    for r in 0..rows {
        let visible = |c: usize| mask.is_none_or(|m| m.allows(r, c));
        let row = &x[r * cols..(r + 1) * cols];
        if !(0..cols).any(visible) {
            return Err(Error::FullyMaskedRow { row: r });
        }
        // non-finite logits propagate as NaN so callers can detect divergence
        let max = (0..cols)
            .filter(|&c| visible(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for c in 0..cols {
            out_row[c] = if visible(c) {
                let e = (row[c] - max).exp();
                sum += e;
                e
            } else {
                0.0
            };
        }
        for v in out_row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(())
}

/// Vector-Jacobian product of the row softmax: `dx = y * (dy - <dy, y>)`.
pub fn softmax_rows_backward_accumulate(
    y: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    rows: usize,
    cols: usize,
) {
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for c in 0..cols {
            dx[r * cols + c] += yr[c] * (dyr[c] - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 12);
        let b = random(&mut rng, 8);
        let mut out = vec![0.0; 6];
        matmul(&a, &b, &mut out, 3, 4, 2);
        let oracle = triple_loop(&a, &b, 3, 4, 2);
        for (x, y) in out.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, k, n) = (3, 5, 4);
        let a = random(&mut rng, m * k);
        let b_t = random(&mut rng, n * k);
        let mut b = vec![0.0; k * n];
        transpose(&b_t, &mut b, n, k);
        let mut nt = vec![0.0; m * n];
        matmul_nt_accumulate(&a, &b_t, &mut nt, m, k, n);
        let oracle = triple_loop(&a, &b, m, k, n);
        for (x, y) in nt.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut a_t = vec![0.0; k * m];
        transpose(&a, &mut a_t, m, k);
        let mut tn = vec![0.0; m * n];
        matmul_tn_accumulate(&a_t, &b, &mut tn, k, m, n);
        for (x, y) in tn.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
