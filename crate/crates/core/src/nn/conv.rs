//! 1-D convolution compute kernels. Forward, input-gradient, and
//! kernel-gradient passes are each a single GEMM over an im2col panel; the
//! transposed (fractional-stride) convolution reuses them as pure adjoints,
//! so the two op families cannot drift apart numerically.
//!
//! Layouts: activations `[C, B, L]` row-major; kernels `[W, C_in, C_out]`.
//! A kernel in that layout doubles, without copying, as the GEMM operand
//! `A[c_out, w·C_in + c_in]` via strides (1, C_out).

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Geometry of one convolution: `[ci, batch, li]` input, `[co, batch, lo]`
/// output with `lo = (li + 2·pad − w)/stride + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub ci: usize,
    pub co: usize,
    pub li: usize,
    pub w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn new(
        batch: usize,
        ci: usize,
        co: usize,
        li: usize,
        w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if batch == 0 || ci == 0 || co == 0 || li == 0 || w == 0 {
            return Err(Error::data("convolution with an empty dimension"));
        }
        if stride == 0 {
            return Err(Error::data("convolution stride must be positive"));
        }
        if li + 2 * pad < w {
            return Err(Error::data(format!(
                "kernel width {} exceeds padded input length {}",
                w,
                li + 2 * pad
            )));
        }
        Ok(ConvDims {
            batch,
            ci,
            co,
            li,
            w,
            stride,
            pad,
        })
    }

    pub fn lo(&self) -> usize {
        (self.li + 2 * self.pad - self.w) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.ci * self.batch * self.li
    }

    pub fn output_len(&self) -> usize {
        self.co * self.batch * self.lo()
    }

    pub fn kernel_len(&self) -> usize {
        self.w * self.ci * self.co
    }

    /// Output-position range `[lo_min, lo_max)` whose input index
    /// `lo·stride + w − pad` stays inside `[0, li)` for a fixed tap `w`.
    fn valid_range(&self, w: usize) -> (usize, usize) {
        let lo_n = self.lo();
        let lo_min = if w >= self.pad {
            0
        } else {
            (self.pad - w).div_ceil(self.stride)
        };
        let lo_max = if self.li + self.pad > w {
            ((self.li + self.pad - w - 1) / self.stride + 1).min(lo_n)
        } else {
            0
        };
        let lo_min = lo_min.min(lo_n);
        (lo_min, lo_max.max(lo_min))
    }
}

/// Gather `x [ci, b, li]` into the panel `col [w·ci, b·lo]`; out-of-range taps
/// become zeros.
fn im2col<S: Scalar>(x: &[S], d: &ConvDims, col: &mut [S]) {
    let lo_n = d.lo();
    let ncols = d.batch * lo_n;
    for w in 0..d.w {
        let (lo_min, lo_max) = d.valid_range(w);
        let base = w as isize - d.pad as isize;
        for ci in 0..d.ci {
            let row = &mut col[(w * d.ci + ci) * ncols..(w * d.ci + ci + 1) * ncols];
            for b in 0..d.batch {
                let xoff = ci * (d.batch * d.li) + b * d.li;
                let out = &mut row[b * lo_n..(b + 1) * lo_n];
                out[..lo_min].fill(S::ZERO);
                for (lo, o) in out[lo_min..lo_max].iter_mut().enumerate() {
                    let li = ((lo_min + lo) * d.stride) as isize + base;
                    *o = x[xoff + li as usize];
                }
                out[lo_max..].fill(S::ZERO);
            }
        }
    }
}

/// Scatter-add the panel back onto the input layout: the exact transpose of
/// [`im2col`].
fn col2im_add<S: Scalar>(col: &[S], d: &ConvDims, dx: &mut [S]) {
    let lo_n = d.lo();
    let ncols = d.batch * lo_n;
    for w in 0..d.w {
        let (lo_min, lo_max) = d.valid_range(w);
        let base = w as isize - d.pad as isize;
        for ci in 0..d.ci {
            let row = &col[(w * d.ci + ci) * ncols..(w * d.ci + ci + 1) * ncols];
            for b in 0..d.batch {
                let xoff = ci * (d.batch * d.li) + b * d.li;
                let src = &row[b * lo_n..(b + 1) * lo_n];
                for (lo, &v) in src[lo_min..lo_max].iter().enumerate() {
                    let li = ((lo_min + lo) * d.stride) as isize + base;
                    dx[xoff + li as usize] += v;
                }
            }
        }
    }
}

/// y = conv(x, k) + bias. `accumulate` switches the write into `out` to +=.
pub fn conv1d_fwd<S: Scalar>(
    x: &[S],
    k: &[S],
    bias: Option<&[S]>,
    d: &ConvDims,
    out: &mut [S],
    accumulate: bool,
) {
    debug_assert_eq!(x.len(), d.input_len());
    debug_assert_eq!(k.len(), d.kernel_len());
    debug_assert_eq!(out.len(), d.output_len());
    let n = d.batch * d.lo();
    let kk = d.w * d.ci;
    let mut col = vec![S::ZERO; kk * n];
    im2col(x, d, &mut col);
    let beta = if accumulate { S::ONE } else { S::ZERO };
    unsafe {
        S::gemm(
            d.co,
            kk,
            n,
            S::ONE,
            k.as_ptr(),
            1,
            d.co as isize,
            col.as_ptr(),
            n as isize,
            1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    if let Some(bias) = bias {
        debug_assert_eq!(bias.len(), d.co);
        for (co, &bv) in bias.iter().enumerate() {
            for o in &mut out[co * n..(co + 1) * n] {
                *o += bv;
            }
        }
    }
}

/// dx += kᵀ applied to dy (the adjoint of the forward map).
pub fn conv1d_bwd_input<S: Scalar>(dy: &[S], k: &[S], d: &ConvDims, dx: &mut [S]) {
    debug_assert_eq!(dy.len(), d.output_len());
    debug_assert_eq!(dx.len(), d.input_len());
    let n = d.batch * d.lo();
    let kk = d.w * d.ci;
    let mut dcol = vec![S::ZERO; kk * n];
    unsafe {
        // dcol[r, j] = Σ_co k[co, r]·dy[co, j]
        S::gemm(
            kk,
            d.co,
            n,
            S::ONE,
            k.as_ptr(),
            d.co as isize,
            1,
            dy.as_ptr(),
            n as isize,
            1,
            S::ZERO,
            dcol.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    col2im_add(&dcol, d, dx);
}

/// dk += x ⋆ dy and dbias += Σ dy. The im2col panel is recomputed rather than
/// cached from the forward pass; it is cheaper than holding one panel per
/// layer for the whole step.
pub fn conv1d_bwd_kernel<S: Scalar>(
    x: &[S],
    dy: &[S],
    d: &ConvDims,
    dk: &mut [S],
    dbias: Option<&mut [S]>,
) {
    debug_assert_eq!(dk.len(), d.kernel_len());
    let n = d.batch * d.lo();
    let kk = d.w * d.ci;
    let mut col = vec![S::ZERO; kk * n];
    im2col(x, d, &mut col);
    unsafe {
        // dk[r, co] += Σ_j col[r, j]·dy[co, j]
        S::gemm(
            kk,
            n,
            d.co,
            S::ONE,
            col.as_ptr(),
            n as isize,
            1,
            dy.as_ptr(),
            1,
            n as isize,
            S::ONE,
            dk.as_mut_ptr(),
            d.co as isize,
            1,
        );
    }
    if let Some(dbias) = dbias {
        debug_assert_eq!(dbias.len(), d.co);
        for (co, db) in dbias.iter_mut().enumerate() {
            let mut s = S::ZERO;
            for &v in &dy[co * n..(co + 1) * n] {
                s += v;
            }
            *db += s;
        }
    }
}

// Transposed convolution, defined as the exact adjoint of a convolution with
// the same kernel. `d` always describes that underlying convolution: its
// OUTPUT side (co, lo) is the transposed convolution's input, and its INPUT
// side (ci, li) is the transposed convolution's output. Kernels for
// transposed layers are therefore stored in the underlying convolution's
// [w, ci, co] layout.

/// y = tconv(x) + bias, i.e. the adjoint of `conv1d_fwd` plus a bias over the
/// produced (conv-input-side) channels.
pub fn tconv1d_fwd<S: Scalar>(x: &[S], k: &[S], bias: Option<&[S]>, d: &ConvDims, out: &mut [S]) {
    out.fill(S::ZERO);
    conv1d_bwd_input(x, k, d, out);
    if let Some(bias) = bias {
        debug_assert_eq!(bias.len(), d.ci);
        let n = d.batch * d.li;
        for (ci, &bv) in bias.iter().enumerate() {
            for o in &mut out[ci * n..(ci + 1) * n] {
                *o += bv;
            }
        }
    }
}

/// dx += conv(g, k): pushing a gradient back through an adjoint is the
/// forward map itself.
pub fn tconv1d_bwd_input<S: Scalar>(g: &[S], k: &[S], d: &ConvDims, dx: &mut [S]) {
    conv1d_fwd(g, k, None, d, dx, true);
}

/// Kernel gradient of the transposed op: with ⟨g, Cᵀ(x)⟩ = ⟨C(g), x⟩, the
/// roles of input and output gradient simply swap.
pub fn tconv1d_bwd_kernel<S: Scalar>(x: &[S], g: &[S], d: &ConvDims, dk: &mut [S]) {
    conv1d_bwd_kernel(g, x, d, dk, None);
}
