//! Raw slice kernels shared by the tape and the attention paths.
//!
//! All loops run in a fixed order, so results are bit-reproducible for a given build.

use super::scalar::Scalar;

/// `out[p×r] = a[p×q] · b[q×r]` (overwrites `out`).
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(out.len(), p * r);
    out.fill(T::zero());
    matmul_acc(a, b, out, p, q, r);
}

/// `out[p×r] += a[p×q] · b[q×r]`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(out.len(), p * r);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { matmul_acc_avx2(a, b, out, p, q, r) };
            return;
        }
    }
    matmul_acc_tiled(a, b, out, p, q, r);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    matmul_acc_tiled(a, b, out, p, q, r);
}

const MR: usize = 4;
const NR: usize = 16;

/// Register-tiled product over `MR×NR` output tiles; ragged edges use row updates.
#[inline(always)]
fn matmul_acc_tiled<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    let (pm, rn) = (p - p % MR, r - r % NR);
    for i0 in (0..pm).step_by(MR) {
        for j0 in (0..rn).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for k in 0..q {
                let brow: &[T; NR] = b[k * r + j0..k * r + j0 + NR].try_into().expect("tile width");
                for (ii, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + ii) * q + k];
                    for jj in 0..NR {
                        acc_row[jj] += av * brow[jj];
                    }
                }
            }
            for (ii, acc_row) in acc.iter().enumerate() {
                let o = &mut out[(i0 + ii) * r + j0..(i0 + ii) * r + j0 + NR];
                for jj in 0..NR {
                    o[jj] += acc_row[jj];
                }
            }
        }
        if rn < r {
            for i in i0..i0 + MR {
                for k in 0..q {
                    axpy(a[i * q + k], &b[k * r + rn..(k + 1) * r], &mut out[i * r + rn..(i + 1) * r]);
                }
            }
        }
    }
    for i in pm..p {
        let o = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            axpy(a[i * q + k], &b[k * r..(k + 1) * r], o);
        }
    }
}

/// `out[q×r] += aᵀ · b` for `a[p×q]`, `b[p×r]`.
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    debug_assert_eq!(out.len(), q * r);
    let at = transpose(a, p, q);
    matmul_acc(&at, b, out, q, p, r);
}

/// `out[p×q] += a[p×r] · bᵀ` for `b[q×r]`.
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    let bt = transpose(b, q, r);
    matmul_acc(a, &bt, out, p, r, q);
}

/// Transpose of a `rows×cols` matrix.
pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight independent accumulators (fixed order).
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

/// In-place softmax of `row` over its entries, stabilized by the row maximum.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
