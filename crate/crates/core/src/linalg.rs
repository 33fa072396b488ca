//! Thin row-major GEMM wrapper used by every matrix-shaped primitive.

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is
/// `k x n`. Transposition is expressed through strides; nothing is copied.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    if m == 1 || n == 1 || k == 1 {
        // matrixmultiply pads to full register tiles, which wastes most of
        // the work on vector-shaped products such as a single LSTM step.
        return gemm_thin(m, k, n, a, a_trans, b, b_trans, c, beta);
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above against the stated
    // dimensions, and the strides address exactly those elements.
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
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_thin(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64], beta: f64) {
    if beta == 0.0 {
        c.fill(0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    let axpy = |c: &mut [f64], s: f64, x: &[f64]| c.iter_mut().zip(x).for_each(|(c, x)| *c += s * x);
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(x, y)| x * y).sum::<f64>();
    if k == 1 {
        // Outer product; a single column or row is laid out the same either way.
        for i in 0..m {
            axpy(&mut c[i * n..(i + 1) * n], a[i], b);
        }
    } else if m == 1 {
        if b_trans {
            for j in 0..n {
                c[j] += dot(a, &b[j * k..(j + 1) * k]);
            }
        } else {
            for p in 0..k {
                axpy(c, a[p], &b[p * n..(p + 1) * n]);
            }
        }
    } else if a_trans {
        for p in 0..k {
            axpy(c, b[p], &a[p * m..(p + 1) * m]);
        }
    } else {
        for i in 0..m {
            c[i] += dot(&a[i * k..(i + 1) * k], b);
        }
    }
}

pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, false, &mut c, 0.0);
    c
}

/// Transpose of a row-major `rows x cols` matrix.
pub(crate) fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn thin_shapes_match_naive() {
        for &(m, k, n) in &[(1, 5, 4), (3, 1, 4), (4, 5, 1), (1, 1, 1), (1, 3, 1)] {
            let a: Vec<f64> = (0..m * k).map(|v| (v as f64 * 0.7).cos()).collect();
            let b: Vec<f64> = (0..k * n).map(|v| (v as f64 * 1.3).sin()).collect();
            let expect = naive(m, k, n, &a, &b);
            for (at, bt) in [(false, false), (true, false), (false, true), (true, true)] {
                let aa = if at { transpose(m, k, &a) } else { a.clone() };
                let bb = if bt { transpose(k, n, &b) } else { b.clone() };
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, &aa, at, &bb, bt, &mut c, 2.0);
                for (x, y) in c.iter().zip(&expect) {
                    assert!((x - (y + 2.0)).abs() < 1e-12, "{m}x{k}x{n} {at} {bt}");
                }
            }
        }
    }

    #[test]
    fn transposed_operands_match_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let expect = naive(2, 3, 4, &a, &b);
        let at = transpose(2, 3, &a);
        let bt = transpose(3, 4, &b);
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &at, true, &bt, true, &mut c, 0.0);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
