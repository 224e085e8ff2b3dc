//! Raw slice kernels shared by the tape's forward and backward passes.

use crate::real::Real;

/// Matrix view layout: `false` means stored as the logical matrix, `true`
/// means stored transposed.
#[derive(Clone, Copy)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

/// `c (+)= a·b` where `a` is logically `[m,k]` and `b` is `[k,n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    la: Layout,
    b: &[F],
    lb: Layout,
    c: &mut [F],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: extents were checked above and `c` is a distinct &mut slice.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
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

/// Max-shifted softmax over `len` elements spaced `inner` apart.
pub(crate) fn softmax_forward<F: Real>(
    x: &[F],
    out: &mut [F],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut total = F::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
}

pub(crate) fn softmax_backward<F: Real>(
    y: &[F],
    g: &[F],
    dx: &mut [F],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let mut dot = F::zero();
            for j in 0..len {
                dot += g[at(j)] * y[at(j)];
            }
            for j in 0..len {
                dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
}

pub(crate) fn std_normal_cdf<F: Real>(x: F) -> F {
    let half = F::from_f64_lossy(0.5);
    half * (F::one() + (x * F::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn std_normal_pdf<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * F::from_f64_lossy(0.5)).exp()
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_layouts_agree() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let at = [1.0f64, 3.0, 2.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let bt = [5.0f64, 7.0, 6.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, Layout::Normal, &b, Layout::Normal, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        let mut c2 = [0.0; 4];
        gemm(2, 2, 2, &at, Layout::Transposed, &bt, Layout::Transposed, &mut c2, false);
        assert_eq!(c2, c);
        gemm(2, 2, 2, &a, Layout::Normal, &b, Layout::Normal, &mut c2, true);
        assert_eq!(c2, [38.0, 44.0, 86.0, 100.0]);
    }
}
