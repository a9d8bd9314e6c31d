//! Raw array kernels behind the graph operations.
//!
//! Everything here works on flat row-major slices. Convolutions lower to
//! im2col + GEMM; the transposed convolution reuses the same lowering with
//! the roles of the two buffers exchanged, which keeps the two operators exact
//! adjoints of each other.

use super::Scalar;

/// Geometry of a 2-D convolution over one batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent with floor semantics, or `None` if the kernel does not
    /// fit inside the padded input.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let ph = self.height + 2 * self.pad;
        let pw = self.width + 2 * self.pad;
        if self.stride == 0 || ph < self.kh || pw < self.kw {
            return None;
        }
        Some((
            (ph - self.kh) / self.stride + 1,
            (pw - self.kw) / self.stride + 1,
        ))
    }

    /// Rows of the column matrix (C·kh·kw).
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one C×H×W image into a (C·kh·kw)×(Ho·Wo) column matrix.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, ho: usize, wo: usize, col: &mut [T]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let pad = g.pad as isize;
    let s = g.stride as isize;
    let plane = g.height * g.width;
    let cols = ho * wo;
    for c in 0..g.channels {
        let src = &img[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - pad;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - pad;
                        *v = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back, accumulating into `img`.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, ho: usize, wo: usize, img: &mut [T]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let pad = g.pad as isize;
    let s = g.stride as isize;
    let plane = g.height * g.width;
    let cols = ho * wo;
    for c in 0..g.channels {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = ox as isize * s + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward. `weight` is Co×Ci×kh×kw, `input` N×Ci×H×W.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ho, wo) = g.output_hw().expect("conv geometry validated by caller");
    let k = g.col_rows();
    let p = ho * wo;
    let in_plane = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * out_channels * p];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..batch {
        let x = &input[n * in_plane..(n + 1) * in_plane];
        let rhs: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, ho, wo, &mut col);
            &col
        };
        let dst = &mut out[n * out_channels * p..(n + 1) * out_channels * p];
        if let Some(b) = bias {
            for (c, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[c]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            out_channels,
            k,
            p,
            T::one(),
            weight,
            k as isize,
            1,
            rhs,
            p as isize,
            1,
            beta,
            dst,
            p as isize,
            1,
        );
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output buffer is accumulated into
/// when present.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    out_channels: usize,
    dout: &[T],
    dinput: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let (ho, wo) = g.output_hw().expect("conv geometry validated by caller");
    let k = g.col_rows();
    let p = ho * wo;
    let in_plane = g.channels * g.height * g.width;
    let out_plane = out_channels * p;

    if let Some(db) = dbias {
        for n in 0..batch {
            for (c, chunk) in dout[n * out_plane..(n + 1) * out_plane]
                .chunks(p)
                .enumerate()
            {
                db[c] += chunk.iter().copied().sum::<T>();
            }
        }
    }

    if let Some(dw) = dweight {
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * p]
        };
        for n in 0..batch {
            let x = &input[n * in_plane..(n + 1) * in_plane];
            let cm: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(x, g, ho, wo, &mut col);
                &col
            };
            let dy = &dout[n * out_plane..(n + 1) * out_plane];
            // dW[co, k] += dy[co, p] · col[k, p]^T
            T::gemm(
                out_channels,
                p,
                k,
                T::one(),
                dy,
                p as isize,
                1,
                cm,
                1,
                p as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
    }

    if let Some(dx) = dinput {
        let mut dcol = vec![T::zero(); k * p];
        for n in 0..batch {
            let dy = &dout[n * out_plane..(n + 1) * out_plane];
            let dst = &mut dx[n * in_plane..(n + 1) * in_plane];
            if g.is_pointwise() {
                T::gemm(
                    k,
                    out_channels,
                    p,
                    T::one(),
                    weight,
                    1,
                    k as isize,
                    dy,
                    p as isize,
                    1,
                    T::one(),
                    dst,
                    p as isize,
                    1,
                );
            } else {
                // dcol[k, p] = W^T[k, co] · dy[co, p]
                T::gemm(
                    k,
                    out_channels,
                    p,
                    T::one(),
                    weight,
                    1,
                    k as isize,
                    dy,
                    p as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    p as isize,
                    1,
                );
                col2im(&dcol, g, ho, wo, dst);
            }
        }
    }
}

/// Output extent of a transposed convolution.
pub fn deconv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Option<(usize, usize)> {
    let oh = ((h as isize - 1) * stride as isize + kh as isize).checked_sub(2 * pad as isize)?;
    let ow = ((w as isize - 1) * stride as isize + kw as isize).checked_sub(2 * pad as isize)?;
    if h == 0 || w == 0 || oh <= 0 || ow <= 0 {
        return None;
    }
    Some((oh as usize, ow as usize))
}

/// Transposed convolution. `weight` is Ci×Co×kh×kw (input channels first), so
/// the operator is the adjoint of a convolution whose weight is read as
/// Co'=Ci, Ci'=Co.
#[allow(clippy::too_many_arguments)]
pub fn deconv2d_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    in_channels: usize,
    h: usize,
    w: usize,
    weight: &[T],
    out_channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    bias: Option<&[T]>,
) -> (Vec<T>, usize, usize) {
    let (oh, ow) =
        deconv_output_hw(h, w, kh, kw, stride, pad).expect("deconv geometry validated by caller");
    let og = ConvGeom {
        channels: out_channels,
        height: oh,
        width: ow,
        kh,
        kw,
        stride,
        pad,
    };
    let k = og.col_rows();
    let p = h * w;
    let in_plane = in_channels * p;
    let out_plane = out_channels * oh * ow;
    let mut out = vec![T::zero(); batch * out_plane];
    let mut col = vec![T::zero(); k * p];
    for n in 0..batch {
        let x = &input[n * in_plane..(n + 1) * in_plane];
        // col[k, p] = W^T[k, ci] · x[ci, p]
        T::gemm(
            k,
            in_channels,
            p,
            T::one(),
            weight,
            1,
            k as isize,
            x,
            p as isize,
            1,
            T::zero(),
            &mut col,
            p as isize,
            1,
        );
        let dst = &mut out[n * out_plane..(n + 1) * out_plane];
        if let Some(b) = bias {
            for (c, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[c]);
            }
        }
        col2im(&col, &og, h, w, dst);
    }
    (out, oh, ow)
}

#[allow(clippy::too_many_arguments)]
pub fn deconv2d_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    in_channels: usize,
    h: usize,
    w: usize,
    weight: &[T],
    out_channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dout: &[T],
    dinput: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let (oh, ow) =
        deconv_output_hw(h, w, kh, kw, stride, pad).expect("deconv geometry validated by caller");
    let og = ConvGeom {
        channels: out_channels,
        height: oh,
        width: ow,
        kh,
        kw,
        stride,
        pad,
    };
    let k = og.col_rows();
    let p = h * w;
    let in_plane = in_channels * p;
    let out_plane = out_channels * oh * ow;

    if let Some(db) = dbias {
        for n in 0..batch {
            for (c, chunk) in dout[n * out_plane..(n + 1) * out_plane]
                .chunks(oh * ow)
                .enumerate()
            {
                db[c] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    if dinput.is_none() && dweight.is_none() {
        return;
    }
    let mut dinput = dinput;
    let mut dweight = dweight;
    let mut dcol = vec![T::zero(); k * p];
    for n in 0..batch {
        im2col(
            &dout[n * out_plane..(n + 1) * out_plane],
            &og,
            h,
            w,
            &mut dcol,
        );
        if let Some(dx) = dinput.as_deref_mut() {
            // dx[ci, p] += W[ci, k] · dcol[k, p]
            let dst = &mut dx[n * in_plane..(n + 1) * in_plane];
            T::gemm(
                in_channels,
                k,
                p,
                T::one(),
                weight,
                k as isize,
                1,
                &dcol,
                p as isize,
                1,
                T::one(),
                dst,
                p as isize,
                1,
            );
        }
        if let Some(dw) = dweight.as_deref_mut() {
            // dW[ci, k] += x[ci, p] · dcol[k, p]^T
            let x = &input[n * in_plane..(n + 1) * in_plane];
            T::gemm(
                in_channels,
                p,
                k,
                T::one(),
                x,
                p as isize,
                1,
                &dcol,
                1,
                p as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
    }
}

/// 2×2 stride-2 max pooling over `planes` planes of size h×w. Returns the
/// pooled values and, per output, the flat input index of the winner. Ties go
/// to the first element in row-major window order.
pub fn maxpool2_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(argmax: &[u32], dout: &[T], dinput: &mut [T]) {
    for (&idx, &g) in argmax.iter().zip(dout) {
        dinput[idx as usize] += g;
    }
}

/// Nearest-neighbour 2× upsampling of `planes` planes of size h×w.
pub fn upsample2_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ow = 2 * w;
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for pl in 0..planes {
        let src = &input[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * 4 * h * w..(pl + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                let o = 2 * y * ow + 2 * x;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    dinput: &mut [T],
) {
    let ow = 2 * w;
    for pl in 0..planes {
        let src = &dout[pl * 4 * h * w..(pl + 1) * 4 * h * w];
        let dst = &mut dinput[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let o = 2 * y * ow + 2 * x;
                dst[y * w + x] += src[o] + src[o + 1] + src[o + ow] + src[o + ow + 1];
            }
        }
    }
}
