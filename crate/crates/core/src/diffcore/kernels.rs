//! Dense numeric kernels shared by the graph evaluator.

/// `out = beta * out + op(a) · op(b)` for an `m×k` by `k×n` product.
///
/// With `ta` the buffer `a` holds the `k×m` matrix whose transpose is used;
/// likewise `tb` means `b` holds an `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    out: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths match the strides above, so every access
    // made by the kernel stays inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = data[r * cols + c];
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut out, 0.0);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_beta_one() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut out = [10.0];
        gemm(1, 2, 1, &a, false, &b, false, &mut out, 1.0);
        assert_eq!(out[0], 21.0);
    }

    #[test]
    fn log_softmax_is_log_of_softmax() {
        let x = [0.3, -1.2, 2.5, 0.0];
        let s = softmax_rows(&x, 4);
        let l = log_softmax_rows(&x, 4);
        for (a, b) in s.iter().zip(&l) {
            assert!((a.ln() - b).abs() < 1e-14);
        }
    }
}
