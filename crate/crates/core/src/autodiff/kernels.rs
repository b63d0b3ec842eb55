//! Dense kernels shared by the forward and backward passes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Trans {
    No,
    Yes,
}

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), all row-major.
///
/// `op(a)` is `m x k`; with `Trans::Yes` the slice holds the `k x m` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: Trans,
    b: &[f64],
    tb: Trans,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the length asserts above guarantee every strided access made by
    // dgemm for an (m x k) * (k x n) product stays inside the three slices.
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

/// Unfolds `[b, c, len]` into `[b * l_out, c * k]` patches with zero padding.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f64],
    b: usize,
    c: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
    l_out: usize,
) -> Vec<f64> {
    let width = c * k;
    let mut cols = vec![0.0; b * l_out * width];
    for bi in 0..b {
        for o in 0..l_out {
            let row = &mut cols[(bi * l_out + o) * width..(bi * l_out + o + 1) * width];
            for ci in 0..c {
                for ki in 0..k {
                    let pos = (o * stride + ki) as isize - pad_left as isize;
                    if pos >= 0 && (pos as usize) < len {
                        row[ci * k + ki] = x[(bi * c + ci) * len + pos as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    b: usize,
    c: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
    l_out: usize,
) -> Vec<f64> {
    let width = c * k;
    let mut x = vec![0.0; b * c * len];
    for bi in 0..b {
        for o in 0..l_out {
            let row = &cols[(bi * l_out + o) * width..(bi * l_out + o + 1) * width];
            for ci in 0..c {
                for ki in 0..k {
                    let pos = (o * stride + ki) as isize - pad_left as isize;
                    if pos >= 0 && (pos as usize) < len {
                        x[(bi * c + ci) * len + pos as usize] += row[ci * k + ki];
                    }
                }
            }
        }
    }
    x
}
