//! Row-major matrix products and the patch unrolling used by convolutions.

use crate::tensor::Scalar;

use super::forward::valid_range;
use super::KERNEL_SIZE;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            for (cv, &bv) in c_row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored `k×m` and `b` stored `k×n`.
pub(crate) fn gemm_at_b_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &av) in a[kk * m..(kk + 1) * m].iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Geometry of a padded 3×3 convolution on one image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
}

impl ConvGeometry {
    /// Rows of the unrolled patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * KERNEL_SIZE * KERNEL_SIZE
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = *self;
        for c in 0..g.c_in {
            for ky in 0..KERNEL_SIZE {
                let (ylo, yhi) = valid_range(ky, g.stride, g.h, g.ho);
                for kx in 0..KERNEL_SIZE {
                    let (xlo, xhi) = valid_range(kx, g.stride, g.w, g.wo);
                    let row = (c * KERNEL_SIZE + ky) * KERNEL_SIZE + kx;
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - 1;
                        for ox in xlo..xhi {
                            let ix = ox * g.stride + kx - 1;
                            f(row, oy * g.wo + ox, (c * g.h + iy) * g.w + ix);
                        }
                    }
                }
            }
        }
    }

    /// Unrolls one `C×H×W` image into a `(C·9)×(Ho·Wo)` patch matrix.
    pub fn im2col<S: Scalar>(&self, image: &[S], col: &mut [S]) {
        col.iter_mut().for_each(|v| *v = S::zero());
        let p = self.positions();
        self.for_each_tap(|row, pos, src| col[row * p + pos] = image[src]);
    }

    /// The transpose of [`ConvGeometry::im2col`], `(Ho·Wo)×(C·9)`.
    pub fn im2col_transposed<S: Scalar>(&self, image: &[S], col: &mut [S]) {
        col.iter_mut().for_each(|v| *v = S::zero());
        let k = self.patch_len();
        self.for_each_tap(|row, pos, src| col[pos * k + row] = image[src]);
    }

    /// Adds a patch-matrix gradient back onto the image it came from.
    pub fn col2im_acc<S: Scalar>(&self, col: &[S], image: &mut [S]) {
        let p = self.positions();
        self.for_each_tap(|row, pos, src| image[src] = image[src] + col[row * p + pos]);
    }
}
