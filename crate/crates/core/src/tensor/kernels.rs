// Low-level kernels shared by the graph ops. Row-major everywhere.

use super::Real;

macro_rules! gemm_impl {
    ($name:ident, $t:ty, $kernel:path) => {
/// `c = a[m×k] · b[k×n]` with explicit strides for `a` and `b`;
/// `c` is dense row-major `m×n` and is overwritten when `accumulate` is false.
#[allow(clippy::too_many_arguments)]
pub(crate) fn $name(
    m: usize,
    k: usize,
    n: usize,
    a: &[$t],
    rsa: isize,
    csa: isize,
    b: &[$t],
    rsb: isize,
    csb: isize,
    c: &mut [$t],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0 as $t);
        }
        return;
    }
    let beta: $t = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices covering the strided extents; checked by
    // the debug assertions on the last addressed element.
    debug_assert!(((m - 1) as isize * rsa + (k - 1) as isize * csa) < a.len() as isize);
    debug_assert!(((k - 1) as isize * rsb + (n - 1) as isize * csb) < b.len() as isize);
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
    };
}

gemm_impl!(gemm_f32, f32, matrixmultiply::sgemm);
gemm_impl!(gemm_f64, f64, matrixmultiply::dgemm);

/// Geometry of one 1-D convolution over a `[batch, c_in, t_in]` input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub t_out: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.c_in * self.kernel
    }

    pub fn cols_width(&self) -> usize {
        self.batch * self.t_out
    }

    /// Source time index for output frame `t` and tap `k`, if inside the input.
    #[inline]
    fn source(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }
}

/// Unfolds the input into a `[c_in*kernel, batch*t_out]` column matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let width = g.cols_width();
    let mut cols = vec![T::zero(); g.cols_rows() * width];
    for ci in 0..g.c_in {
        for k in 0..g.kernel {
            let row = &mut cols[(ci * g.kernel + k) * width..(ci * g.kernel + k + 1) * width];
            for b in 0..g.batch {
                let src = &x[(b * g.c_in + ci) * g.t_in..(b * g.c_in + ci + 1) * g.t_in];
                let dst = &mut row[b * g.t_out..(b + 1) * g.t_out];
                for (t, d) in dst.iter_mut().enumerate() {
                    if let Some(p) = g.source(t, k) {
                        *d = src[p];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im_add<T: Real>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let width = g.cols_width();
    for ci in 0..g.c_in {
        for k in 0..g.kernel {
            let row = &dcols[(ci * g.kernel + k) * width..(ci * g.kernel + k + 1) * width];
            for b in 0..g.batch {
                let dst = &mut dx[(b * g.c_in + ci) * g.t_in..(b * g.c_in + ci + 1) * g.t_in];
                let src = &row[b * g.t_out..(b + 1) * g.t_out];
                for (t, s) in src.iter().enumerate() {
                    if let Some(p) = g.source(t, k) {
                        dst[p] = dst[p] + *s;
                    }
                }
            }
        }
    }
}

/// `[c, batch*t]` (matrix layout) -> `[batch, c, t]` (tensor layout).
pub(crate) fn mat_to_batched<T: Real>(mat: &[T], batch: usize, c: usize, t: usize) -> Vec<T> {
    let mut out = vec![T::zero(); mat.len()];
    for ch in 0..c {
        for b in 0..batch {
            let src = &mat[ch * batch * t + b * t..ch * batch * t + (b + 1) * t];
            out[(b * c + ch) * t..(b * c + ch + 1) * t].copy_from_slice(src);
        }
    }
    out
}

/// `[batch, c, t]` -> `[c, batch*t]`.
pub(crate) fn batched_to_mat<T: Real>(x: &[T], batch: usize, c: usize, t: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..c {
            let src = &x[(b * c + ch) * t..(b * c + ch + 1) * t];
            out[ch * batch * t + b * t..ch * batch * t + (b + 1) * t].copy_from_slice(src);
        }
    }
    out
}
