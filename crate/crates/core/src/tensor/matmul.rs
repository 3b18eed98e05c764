//! Row-major matrix multiply kernels.
//!
//! Every convolution and dense layer bottoms out here, so the loops are
//! arranged for contiguous row access (axpy/dot inner loops that the
//! compiler vectorizes). Parallelism is over disjoint output rows, which
//! keeps results bit-identical regardless of thread scheduling.

use crate::element::Element;
use rayon::prelude::*;

/// Rows below this stay single-threaded; tiny matmuls dominate in tests.
const PAR_THRESHOLD: usize = 1 << 15;

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul<F: Element>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |acc: &mut [F], ar: &[F]| {
        for (p, &av) in ar.iter().enumerate() {
            if av != F::zero() {
                let br = &b[p * n..p * n + n];
                for (o, &bv) in acc.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * k * n < PAR_THRESHOLD {
        for (acc, ar) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(acc, ar);
        }
    } else {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(acc, ar)| row(acc, ar));
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T  (both operands traversed along rows)
pub fn matmul_nt<F: Element>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |acc: &mut [F], ar: &[F]| {
        for (j, o) in acc.iter_mut().enumerate() {
            let br = &b[j * k..j * k + k];
            let mut s = F::zero();
            for (&av, &bv) in ar.iter().zip(br) {
                s += av * bv;
            }
            *o += s;
        }
    };
    if m * k * n < PAR_THRESHOLD {
        for (acc, ar) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(acc, ar);
        }
    } else {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(acc, ar)| row(acc, ar));
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
pub fn matmul_tn<F: Element>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // Serial over k (each step touches all of out); vectorizes over n.
    for p in 0..k {
        let br = &b[p * n..p * n + n];
        for i in 0..m {
            let av = a[p * m + i];
            if av != F::zero() {
                let acc = &mut out[i * n..i * n + n];
                for (o, &bv) in acc.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
    }
}
