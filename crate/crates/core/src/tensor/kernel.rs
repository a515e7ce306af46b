//! Dense kernels shared by the eager and taped paths.
//!
//! Every forward matrix product goes through [`matmul_forward`], which also
//! bumps a thread-local multiply-add counter. Backward products call [`gemm`]
//! directly and are not counted.

use std::cell::Cell;

thread_local! {
    static MAC_COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-adds performed by forward matmuls on this thread since the last reset.
pub fn mac_count() -> u64 {
    MAC_COUNTER.with(|c| c.get())
}

pub fn reset_mac_count() {
    MAC_COUNTER.with(|c| c.set(0));
}

/// Runs `f` and returns its result together with the forward multiply-adds it performed.
pub fn count_macs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = mac_count();
    let out = f();
    (out, mac_count() - before)
}

/// Layout of a row-major operand as seen by the product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Normal,
    Transposed,
}

/// `c = a' * b' (+ c if accumulate)` where `a'` is `m x k` and `b'` is `k x n`
/// after applying the layouts to the row-major buffers `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer length");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer length");
    assert_eq!(c.len(), m * n, "gemm: output buffer length");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: lengths are asserted above and the strides address exactly the
    // m*k, k*n and m*n elements of the respective buffers.
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

/// Counted forward product of row-major `p x q` and `q x r` buffers.
pub fn matmul_forward(p: usize, q: usize, r: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    gemm(p, q, r, a, Layout::Normal, b, Layout::Normal, &mut out, false);
    MAC_COUNTER.with(|c| c.set(c.get() + (p * q * r) as u64));
    out
}

pub fn add_bias_forward(x: &[f64], cols: usize, bias: &[f64]) -> Vec<f64> {
    debug_assert_eq!(bias.len(), cols);
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(cols) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction; returns probabilities and the mean
/// negative log-likelihood of `labels`.
pub fn softmax_xent_forward(logits: &[f64], classes: usize, labels: &[usize]) -> (Vec<f64>, f64) {
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for ((row, prow), &label) in logits
        .chunks_exact(classes)
        .zip(probs.chunks_exact_mut(classes))
        .zip(labels)
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (v - max).exp();
            z += *p;
        }
        for p in prow.iter_mut() {
            *p /= z;
        }
        total += -(row[label] - max - z.ln());
    }
    (probs, total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_layouts_agree_with_naive_product() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (abuf, al) in [(&a, Layout::Normal), (&at, Layout::Transposed)] {
            for (bbuf, bl) in [(&b, Layout::Normal), (&bt, Layout::Transposed)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, abuf, al, bbuf, bl, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gemm_accumulates() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        gemm(1, 2, 1, &a, Layout::Normal, &b, Layout::Normal, &mut c, true);
        assert_eq!(c[0], 21.0);
    }

    #[test]
    fn forward_product_is_counted() {
        reset_mac_count();
        let (_, macs) = count_macs(|| matmul_forward(2, 3, 4, &[0.0; 6], &[0.0; 12]));
        assert_eq!(macs, 24);
        assert_eq!(mac_count(), 24);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((1.0 - sigmoid(50.0)).abs() < 1e-9);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
