//! Scalar/matrix kernels shared by the tape forward pass and the frozen
//! inference path in `models::snapshot`. Keeping a single implementation of
//! each primitive means the two paths agree bit-for-bit.

/// Row-major matmul: `out[m,n] = a[m,k] * b[k,n]`.
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b^T[n,k]` (i.e. `a * transpose(b)` for `b[k,n]`).
pub fn mm_abt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s += av * bv;
            }
            out[i * k + j] += s;
        }
    }
}

/// `out[k,n] += a^T[k,m] * b[m,n]` (i.e. `transpose(a) * b` for `a[m,k]`).
pub fn mm_atb_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// In-place stable softmax over one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Variance floor used by layer normalization. f64 everywhere makes a tiny
/// epsilon safe, and it keeps the normalized variance within 1e-6 of 1.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Normalizes one row to zero mean / unit variance, then applies the affine
/// `gamma * xhat + beta`. Returns `(mean, inv_std)` for the backward pass.
pub fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for ((o, &v), (&g, &b)) in out.iter_mut().zip(x).zip(gamma.iter().zip(beta)) {
        *o = (v - mean) * inv_std * g + b;
    }
    (mean, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        mm(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_match_explicit_transpose() {
        let a = [1.0, -2.0, 0.5, 3.0, 1.5, -1.0]; // 2x3
        let b = [2.0, 1.0, 0.0, -1.0, 4.0, 2.5]; // 2x3
        // a^T(3x2) * b(2x3) -> 3x3
        let mut atb = vec![0.0; 9];
        mm_atb_acc(&a, &b, 2, 3, 3, &mut atb);
        let at = [1.0, 3.0, -2.0, 1.5, 0.5, -1.0];
        let mut expect = vec![0.0; 9];
        mm(&at, &b, 3, 2, 3, &mut expect);
        for (x, y) in atb.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // a(2x3) * b^T(3x2) -> 2x2
        let mut abt = vec![0.0; 4];
        mm_abt_acc(&a, &b, 2, 3, 2, &mut abt);
        let bt = [2.0, -1.0, 1.0, 4.0, 0.0, 2.5];
        let mut expect2 = vec![0.0; 4];
        mm(&a, &bt, 2, 3, 2, &mut expect2);
        for (x, y) in abt.iter().zip(&expect2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_row_normalizes() {
        let mut r = [1.0, 2.0, 3.0];
        softmax_row(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softplus_stable_at_extremes() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
        assert!(softplus(-50.0) > 0.0);
        assert!(softplus(-50.0) < 1e-20);
    }
}
