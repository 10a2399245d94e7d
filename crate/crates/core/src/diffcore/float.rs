use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float as NumFloat, NumAssign};

/// Element type of the tensor engine: `f32` for training, `f64` for verification.
pub trait Float: NumFloat + NumAssign + Sum + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = op(a) · op(b) (+ c when accumulate)` over row-major buffers.
    /// `op(a)` is `m × k`, `op(b)` is `k × n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

/// Products below this many multiply-adds skip the packed kernel, whose
/// buffer setup dominates at small sizes.
const SMALL_GEMM: usize = 32 * 1024;

#[allow(clippy::too_many_arguments)]
fn small_gemm<T: NumFloat + NumAssign>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let c = &mut c[..m * n];
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    match (a_trans, b_trans) {
        (false, false) => {
            for i in 0..m {
                let row = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    row.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, &bv)| *o += av * bv);
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let mut s = T::zero();
                    for (&x, &y) in ar.iter().zip(&b[j * k..(j + 1) * k]) {
                        s += x * y;
                    }
                    c[i * n + j] += s;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let br = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    c[i * n..(i + 1) * n].iter_mut().zip(br).for_each(|(o, &bv)| *o += av * bv);
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = T::zero();
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

macro_rules! impl_float {
    ($t:ty, $kernel:path) => {
        impl Float for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if m * n * k <= SMALL_GEMM {
                    small_gemm(m, k, n, a, a_trans, b, b_trans, c, accumulate);
                    return;
                }
                let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above guarantee every strided access is in bounds.
                unsafe {
                    $kernel(
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
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    let av = if at { a[t * m + i] } else { a[i * k + t] };
                    let bv = if bt { b[j * k + t] } else { b[t * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn all_transpose_variants_agree_with_loops() {
        // the second shape goes through the packed kernel
        for (m, k, n) in [(3, 5, 4), (40, 37, 33)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
            for &(at, bt) in &[(false, false), (true, false), (false, true), (true, true)] {
                for accumulate in [false, true] {
                    let mut c = vec![0.5; m * n];
                    f64::gemm(m, k, n, &a, at, &b, bt, &mut c, accumulate);
                    let want = naive(m, k, n, &a, at, &b, bt);
                    let base = if accumulate { 0.5 } else { 0.0 };
                    for (x, y) in c.iter().zip(&want) {
                        assert!((x - base - y).abs() < 1e-11);
                    }
                }
            }
        }
    }
}
