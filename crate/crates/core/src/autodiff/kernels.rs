//! Dense matmul kernels shared by the tape and the inference path.
//!
//! All matrices are row-major slices. Every kernel either overwrites or
//! accumulates into `c`, and the summation order for each output element is
//! fixed, so results are reproducible bit for bit.

use super::tensor::Real;

const LANES: usize = 8;

/// Dot product with a fixed 8-lane accumulation pattern.
#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [R::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let xa = &a[c * LANES..c * LANES + LANES];
        let xb = &b[c * LANES..c * LANES + LANES];
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = R::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let s0 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let s1 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

#[inline]
pub fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`
pub fn mm_nn<R: Real>(
    a: &[R],
    b: &[R],
    c: &mut [R],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(R::zero());
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av != R::zero() {
                axpy(av, &b[kk * n..(kk + 1) * n], crow);
            }
        }
    }
}

/// `c[m×n] (+)= a[m×k] · b[n×k]ᵀ`
pub fn mm_nt<R: Real>(
    a: &[R],
    b: &[R],
    c: &mut [R],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let d = dot(arow, &b[j * k..(j + 1) * k]);
            if accumulate {
                *cv += d;
            } else {
                *cv = d;
            }
        }
    }
}

/// `c[m×n] (+)= a[k×m]ᵀ · b[k×n]`
pub fn mm_tn<R: Real>(
    a: &[R],
    b: &[R],
    c: &mut [R],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(R::zero());
    }
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != R::zero() {
                axpy(av, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}
