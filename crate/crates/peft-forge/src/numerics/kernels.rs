//! Generic compute kernels shared by the tape ops and plain tensor math.
//!
//! All kernels are written over [`Element`] and monomorphize to f32 and f64.
//! Matrix kernels use an i-k-j loop order so the inner loop streams rows of B
//! and C contiguously, which the compiler autovectorizes.

use super::tensor::Element;

/// C[m,n] = A[m,k] x B[k,n]
pub fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] x B[n,k]^T. Inner loop is a dot product of contiguous rows.
pub fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T x B[m,n]
pub fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for t in 0..k {
            let ait = a[i * k + t];
            let crow = &mut c[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += ait * brow[j];
            }
        }
    }
    c
}

/// Kronecker product: A[p,q] (x) B[m,n] -> C[p*m, q*n],
/// C[i*m+s, j*n+t] = A[i,j] * B[s,t].
pub fn kron<E: Element>(a: &[E], b: &[E], p: usize, q: usize, m: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); p * m * q * n];
    let out_cols = q * n;
    for i in 0..p {
        for j in 0..q {
            let aij = a[i * q + j];
            for s in 0..m {
                let crow = (i * m + s) * out_cols + j * n;
                let brow = s * n;
                for t in 0..n {
                    c[crow + t] = aij * b[brow + t];
                }
            }
        }
    }
    c
}

/// GELU, tanh approximation:
/// 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
pub fn gelu<E: Element>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (E::one() + inner.tanh())
}

/// d/dx of the tanh-approximation GELU.
pub fn gelu_grad<E: Element>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4);
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * k * x * x)
}

/// Row-wise softmax over the first `visible` entries of each row; entries at
/// and beyond `visible[r]` are exactly zero in the output. Uses the usual
/// max-shift for stability.
pub fn softmax_rows<E: Element>(x: &[E], rows: usize, cols: usize, visible: &[usize]) -> Vec<E> {
    debug_assert_eq!(visible.len(), rows);
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        let v = visible[r].min(cols);
        if v == 0 {
            continue;
        }
        let row = &x[r * cols..r * cols + v];
        let mut mx = row[0];
        for &e in row.iter() {
            mx = mx.maximum(e);
        }
        let mut sum = E::zero();
        let orow = &mut out[r * cols..r * cols + v];
        for (o, &e) in orow.iter_mut().zip(row.iter()) {
            let ex = (e - mx).exp();
            *o = ex;
            sum += ex;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Per-row layer normalization with affine gain/bias:
/// y = gain * (x - mean) / sqrt(var + eps) + bias.
/// Returns (y, normalized x-hat, inverse std per row) for the backward pass.
pub fn layer_norm<E: Element>(
    x: &[E],
    gain: &[E],
    bias: &[E],
    rows: usize,
    d: usize,
    eps: f64,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let mut y = vec![E::zero(); rows * d];
    let mut xhat = vec![E::zero(); rows * d];
    let mut inv_std = vec![E::zero(); rows];
    let dn = E::from_f64(d as f64);
    let eps = E::from_f64(eps);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut mean = E::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / dn;
        let mut var = E::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var / dn;
        let istd = E::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        for i in 0..d {
            let xh = (row[i] - mean) * istd;
            xhat[r * d + i] = xh;
            y[r * d + i] = gain[i] * xh + bias[i];
        }
    }
    (y, xhat, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        // A: 3x2, B: 2x4. Check matmul_nt and matmul_tn against matmul with
        // explicitly transposed inputs.
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let c = matmul(&a, &b, 3, 2, 4);

        // B^T: 4x2
        let mut bt = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                bt[j * 2 + i] = b[i * 4 + j];
            }
        }
        let c_nt = matmul_nt(&a, &bt, 3, 2, 4);
        assert_eq!(c, c_nt);

        // A^T: 2x3
        let mut at = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                at[j * 3 + i] = a[i * 2 + j];
            }
        }
        let c_tn = matmul_tn(&at, &b, 2, 3, 4);
        // matmul_tn computes (A^T)^T x B = A x B
        assert_eq!(c, c_tn);
    }

    #[test]
    fn kron_identity_factor() {
        // kron([[1]], B) == B
        let b = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let c = kron(&[1.0], &b, 1, 1, 2, 3);
        assert_eq!(c, b);
    }

    #[test]
    fn kron_block_diagonal() {
        // kron(I2, B) is block-diagonal(B, B)
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let c = kron(&[1.0, 0.0, 0.0, 1.0], &b, 2, 2, 2, 2);
        #[rustfmt::skip]
        let expected = vec![
            1.0, 2.0, 0.0, 0.0,
            3.0, 4.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 2.0,
            0.0, 0.0, 3.0, 4.0,
        ];
        assert_eq!(c, expected);
    }

    #[test]
    fn kron_scalar_expansion() {
        let c = kron(&[2.0], &[1.0, 1.0, 1.0, 1.0], 1, 1, 2, 2);
        assert_eq!(c, vec![2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn kron_is_bilinear_in_its_first_argument() {
        // kron(alpha * A, B) == alpha * kron(A, B), elementwise exact at f64
        // up to one multiply rounding.
        let mut rng = crate::rng::Rng::new(6);
        let a: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let alpha = 1.371;
        let scaled_a: Vec<f64> = a.iter().map(|v| alpha * v).collect();
        let left = kron(&scaled_a, &b, 2, 3, 2, 4);
        let right: Vec<f64> = kron(&a, &b, 2, 3, 2, 4).iter().map(|v| alpha * v).collect();
        for (l, r) in left.iter().zip(right.iter()) {
            let ulp = r.abs() * f64::EPSILON;
            assert!((l - r).abs() <= ulp, "{l} vs {r}");
        }
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-4);
        assert!(gelu(-10.0f64).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_masks_tail() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let y = softmax_rows(&x, 1, 4, &[2]);
        assert_eq!(y[2], 0.0);
        assert_eq!(y[3], 0.0);
        assert!((y[0] + y[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let x = vec![3.0f64, 3.0, 3.0];
        let gain = vec![1.0; 3];
        let bias = vec![0.0; 3];
        let (y, _, _) = layer_norm(&x, &gain, &bias, 1, 3, 1e-5);
        for v in y {
            assert!(v.abs() < 1e-9);
        }
    }
}
