//! Cross-correlation via patch-matrix expansion.

use super::gemm::{gemm, MatRef};
use super::{Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub(crate) fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        let mismatch = |axes: Vec<usize>| TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
            axes,
        };
        if input.len() != 4 || weight.len() != 4 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("expected rank-4 input and weight, got {input:?} and {weight:?}"),
            });
        }
        if input[1] != weight[1] {
            return Err(mismatch(vec![1]));
        }
        if weight[2] != weight[3] || weight[2] % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel must be square with odd size, got {}x{}", weight[2], weight[3]),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be at least 1".into(),
            });
        }
        let k = weight[2];
        let (h, w) = (input[2], input[3]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch(vec![2, 3]));
        }
        Ok(Self {
            batch: input[0],
            cin: input[1],
            h,
            w,
            cout: weight[0],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_sample(&self) -> usize {
        self.cin * self.h * self.w
    }
}

/// Expands one sample `[cin, h, w]` into `[cin*k*k, ho*wo]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto a `[cin, h, w]` sample.
fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.batch * g.cout * plane];
    let mut cols = vec![T::zero(); g.patch_len() * plane];
    let wmat = MatRef::new(w, g.cout, g.patch_len());
    for b in 0..g.batch {
        im2col(&x[b * g.in_sample()..(b + 1) * g.in_sample()], g, &mut cols);
        let dst = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        gemm(wmat, MatRef::new(&cols, g.patch_len(), plane), dst, false);
    }
    out
}

/// Returns `(d_input, d_weight)`; the weight gradient is accumulated over the
/// batch in ascending sample order.
pub(crate) fn backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad: &[T],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut dx = need_input.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_weight.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); patch * plane];
    let wmat = MatRef::new(w, g.cout, patch);
    for b in 0..g.batch {
        let gb = MatRef::new(&grad[b * g.cout * plane..(b + 1) * g.cout * plane], g.cout, plane);
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * g.in_sample()..(b + 1) * g.in_sample()], g, &mut cols);
            gemm(gb, MatRef::new(&cols, patch, plane).t(), dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(wmat.t(), gb, &mut cols, false);
            col2im_add(&cols, g, &mut dx[b * g.in_sample()..(b + 1) * g.in_sample()]);
        }
    }
    (dx, dw)
}
