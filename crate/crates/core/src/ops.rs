//! Forward and adjoint kernels for the differentiable operator set.
//!
//! These work on plain tensors; [`crate::graph::Graph`] records them and
//! chains the adjoints. Every reduction runs in a fixed order so results
//! are bit-reproducible.

use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};
use crate::tensor::Tensor;

const LANES: usize = 8;

/// Inner product with a fixed 8-lane accumulation order.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    reduce_lanes(acc) + tail
}

/// Sum with the same lane structure as [`dot`].
pub fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = a.chunks_exact(LANES);
    let rest = chunks.remainder();
    for x in chunks {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    let mut tail = T::zero();
    for &x in rest {
        tail += x;
    }
    reduce_lanes(acc) + tail
}

#[inline]
fn reduce_lanes<T: Scalar>(acc: [T; LANES]) -> T {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Stride, zero padding and dilation of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            pad,
            dilation,
        }
    }

    /// Output extent of a convolution over `input` with kernel extent `k`.
    pub fn out_extent(&self, input: usize, k: usize) -> isize {
        let span = (self.dilation * (k.max(1) - 1) + 1) as isize;
        let padded = input as isize + 2 * self.pad as isize;
        if padded < span {
            return 0;
        }
        (padded - span) / self.stride as isize + 1
    }

    /// Output extent of the transposed convolution with kernel extent `k`.
    pub fn transpose_out_extent(&self, input: usize, k: usize) -> isize {
        (input as isize - 1) * self.stride as isize - 2 * self.pad as isize
            + (self.dilation * (k - 1)) as isize
            + 1
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid(format!(
                "{op}: stride and dilation must be positive"
            )));
        }
        Ok(())
    }
}

/// Valid index range `[lo, hi)` of outputs `o` with `0 <= o*stride + off < len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    // smallest o with o*s + off >= 0
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    // largest o with o*s + off <= in_len - 1
    let top = in_len as isize - 1 - off;
    let hi = if top < 0 { 0 } else { top / s + 1 };
    let lo = lo.clamp(0, out_len as isize) as usize;
    let hi = hi.clamp(0, out_len as isize) as usize;
    (lo, hi.max(lo))
}

/// Output shape of `conv2d`, or an error for mismatched or empty shapes.
pub fn conv2d_shape(
    input: [usize; 4],
    weights: [usize; 4],
    geom: ConvGeometry,
) -> Result<[usize; 4]> {
    geom.validate("conv2d")?;
    let [n, cin, h, w] = input;
    let [cout, wcin, kh, kw] = weights;
    if cin != wcin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: input,
            right: weights,
        });
    }
    let oh = geom.out_extent(h, kh);
    let ow = geom.out_extent(w, kw);
    if oh < 1 || ow < 1 {
        return Err(Error::EmptyOutput {
            op: "conv2d",
            input,
            extent: oh.min(ow),
        });
    }
    Ok([n, cout, oh as usize, ow as usize])
}

/// Unrolls the receptive fields of sample `b` into a `(cin·kh·kw) × (oh·ow)`
/// row-major matrix.
fn im2col<T: Scalar>(
    input: &Tensor<T>,
    b: usize,
    kh: usize,
    kw: usize,
    out_hw: (usize, usize),
    geom: ConvGeometry,
    col: &mut [T],
) {
    let [_, cin, h, w] = input.shape();
    let (oh, ow) = out_hw;
    let (s, d, p) = (geom.stride, geom.dilation, geom.pad as isize);
    let ohw = oh * ow;
    for ci in 0..cin {
        let plane = input.plane(b, ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let dst = &mut col[r * ohw..(r + 1) * ohw];
                let off = (kx * d) as isize - p;
                let (lo, hi) = valid_range(ow, w, s, off);
                for oy in 0..oh {
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * s) as isize + (ky * d) as isize - p;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if s == 1 {
                        let st = (lo as isize + off) as usize;
                        drow[lo..hi].copy_from_slice(&in_row[st..st + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = in_row[((ox * s) as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into sample `b` of `grad`.
fn col2im<T: Scalar>(
    col: &[T],
    grad: &mut Tensor<T>,
    b: usize,
    kh: usize,
    kw: usize,
    out_hw: (usize, usize),
    geom: ConvGeometry,
) {
    let [_, cin, h, w] = grad.shape();
    let (oh, ow) = out_hw;
    let (s, d, p) = (geom.stride, geom.dilation, geom.pad as isize);
    let ohw = oh * ow;
    for ci in 0..cin {
        let plane = grad.plane_mut(b, ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let src = &col[r * ohw..(r + 1) * ohw];
                let off = (kx * d) as isize - p;
                let (lo, hi) = valid_range(ow, w, s, off);
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * s) as isize + (ky * d) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    let grow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        let st = (lo as isize + off) as usize;
                        for (g, &v) in grow[st..st + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *g += v;
                        }
                    } else {
                        for ox in lo..hi {
                            grow[((ox * s) as isize + off) as usize] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding; `weights` is `[cout, cin, kh, kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let out_shape = conv2d_shape(input.shape(), weights.shape(), geom)?;
    if let Some(b) = bias {
        if b.len() != out_shape[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: weights.shape(),
                right: b.shape(),
            });
        }
    }
    let [n, cin, _, _] = input.shape();
    let [cout, _, kh, kw] = weights.shape();
    let [_, _, oh, ow] = out_shape;
    let k = cin * kh * kw;
    let ohw = oh * ow;
    let mut col = vec![T::zero(); k * ohw];
    let mut out = Tensor::zeros(out_shape);
    for b in 0..n {
        im2col(input, b, kh, kw, (oh, ow), geom, &mut col);
        let dst = &mut out.data_mut()[b * cout * ohw..(b + 1) * cout * ohw];
        T::gemm(
            cout,
            k,
            ohw,
            T::one(),
            MatRef::rows(weights.data(), k),
            MatRef::rows(&col, ohw),
            T::zero(),
            dst,
            ohw,
        );
    }
    if let Some(b) = bias {
        add_channel_bias(&mut out, b);
    }
    Ok(out)
}

/// Adjoint of `conv2d` with respect to its input: scatters `grad_out`
/// through `weights` into a tensor of `input_shape`.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    weights: &Tensor<T>,
    input_shape: [usize; 4],
    geom: ConvGeometry,
) -> Tensor<T> {
    let [n, cin, _, _] = input_shape;
    let [_, cout, oh, ow] = grad_out.shape();
    let [_, _, kh, kw] = weights.shape();
    let k = cin * kh * kw;
    let ohw = oh * ow;
    let mut col = vec![T::zero(); k * ohw];
    let mut gin = Tensor::zeros(input_shape);
    for b in 0..n {
        let g = &grad_out.data()[b * cout * ohw..(b + 1) * cout * ohw];
        T::gemm(
            k,
            cout,
            ohw,
            T::one(),
            MatRef::transposed(weights.data(), k),
            MatRef::rows(g, ohw),
            T::zero(),
            &mut col,
            ohw,
        );
        col2im(&col, &mut gin, b, kh, kw, (oh, ow), geom);
    }
    gin
}

/// Adjoint of `conv2d` with respect to its weights.
pub fn conv2d_backward_weights<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight_shape: [usize; 4],
    geom: ConvGeometry,
) -> Tensor<T> {
    let [n, cin, _, _] = input.shape();
    let [_, cout, oh, ow] = grad_out.shape();
    let [_, _, kh, kw] = weight_shape;
    let k = cin * kh * kw;
    let ohw = oh * ow;
    let mut col = vec![T::zero(); k * ohw];
    let mut gw = Tensor::zeros(weight_shape);
    for b in 0..n {
        im2col(input, b, kh, kw, (oh, ow), geom, &mut col);
        let g = &grad_out.data()[b * cout * ohw..(b + 1) * cout * ohw];
        let beta = if b == 0 { T::zero() } else { T::one() };
        T::gemm(
            cout,
            ohw,
            k,
            T::one(),
            MatRef::rows(g, ohw),
            MatRef::transposed(&col, ohw),
            beta,
            gw.data_mut(),
            k,
        );
    }
    gw
}

/// Per-channel sums of `grad_out`, the adjoint of an additive channel bias.
pub fn channel_sums<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = grad_out.shape();
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += sum(grad_out.plane(b, ch));
        }
    }
    Tensor::channel_vector(out)
}

/// Output shape of `transpose_conv2d`; `weights` is `[cin, cout, kh, kw]`.
pub fn transpose_conv2d_shape(
    input: [usize; 4],
    weights: [usize; 4],
    geom: ConvGeometry,
) -> Result<[usize; 4]> {
    geom.validate("transpose_conv2d")?;
    let [n, cin, h, w] = input;
    let [wcin, cout, kh, kw] = weights;
    if cin != wcin {
        return Err(Error::ShapeMismatch {
            op: "transpose_conv2d",
            left: input,
            right: weights,
        });
    }
    let oh = geom.transpose_out_extent(h, kh);
    let ow = geom.transpose_out_extent(w, kw);
    if oh < 1 || ow < 1 {
        return Err(Error::EmptyOutput {
            op: "transpose_conv2d",
            input,
            extent: oh.min(ow),
        });
    }
    Ok([n, cout, oh as usize, ow as usize])
}

/// Transposed convolution: the input-adjoint of a `conv2d` whose weights
/// are `weights` read as `[cout_conv = cin, cin_conv = cout, kh, kw]`.
pub fn transpose_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let out_shape = transpose_conv2d_shape(input.shape(), weights.shape(), geom)?;
    let mut out = conv2d_backward_input(input, weights, out_shape, geom);
    if let Some(b) = bias {
        if b.len() != out_shape[1] {
            return Err(Error::ShapeMismatch {
                op: "transpose_conv2d bias",
                left: weights.shape(),
                right: b.shape(),
            });
        }
        add_channel_bias(&mut out, b);
    }
    Ok(out)
}

pub(crate) fn add_channel_bias<T: Scalar>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let [n, c, _, _] = out.shape();
    for b in 0..n {
        for ch in 0..c {
            let bv = bias.data()[ch];
            out.plane_mut(b, ch).iter_mut().for_each(|v| *v += bv);
        }
    }
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Multiplies every element of channel `c` by `gains[c]`.
pub fn per_channel_scale<T: Scalar>(input: &Tensor<T>, gains: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, _, _] = input.shape();
    if gains.len() != c {
        return Err(Error::ShapeMismatch {
            op: "per_channel_scale",
            left: input.shape(),
            right: gains.shape(),
        });
    }
    let mut out = input.clone();
    for b in 0..n {
        for ch in 0..c {
            let g = gains.data()[ch];
            out.plane_mut(b, ch).iter_mut().for_each(|v| *v *= g);
        }
    }
    Ok(out)
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat input index that produced it (first maximum
/// in row-major window order).
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "maxpool2 needs even non-zero spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_i = input.offset(b, ch, 2 * oy, 2 * ox);
                    let mut best = input.data()[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = input.offset(b, ch, 2 * oy + dy, 2 * ox + dx);
                        if input.data()[i] > best {
                            best = input.data()[i];
                            best_i = i;
                        }
                    }
                    out.set(b, ch, oy, ox, best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((out, arg))
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample_nearest2<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out.set(b, ch, y, x, input.get(b, ch, y / 2, x / 2));
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest2`]: sums each 2×2 block.
pub fn upsample_nearest2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = grad_out.shape();
    let mut out = Tensor::zeros([n, c, h2 / 2, w2 / 2]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h2 / 2 {
                for x in 0..w2 / 2 {
                    let s = (grad_out.get(b, ch, 2 * y, 2 * x) + grad_out.get(b, ch, 2 * y, 2 * x + 1))
                        + (grad_out.get(b, ch, 2 * y + 1, 2 * x)
                            + grad_out.get(b, ch, 2 * y + 1, 2 * x + 1));
                    out.set(b, ch, y, x, s);
                }
            }
        }
    }
    out
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if na != nb || ha != hb || wa != wb {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    let (pa, pb) = (ca * ha * wa, cb * hb * wb);
    for s in 0..na {
        data.extend_from_slice(&a.data()[s * pa..(s + 1) * pa]);
        data.extend_from_slice(&b.data()[s * pb..(s + 1) * pb]);
    }
    Tensor::from_vec([na, ca + cb, ha, wa], data)
}

/// Splits a channel-concatenated tensor back into its two parts.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = t.shape();
    let hw = h * w;
    let mut a = Vec::with_capacity(n * first * hw);
    let mut b = Vec::with_capacity(n * (c - first) * hw);
    for s in 0..n {
        let base = s * c * hw;
        a.extend_from_slice(&t.data()[base..base + first * hw]);
        b.extend_from_slice(&t.data()[base + first * hw..base + c * hw]);
    }
    (
        Tensor::from_vec([n, first, h, w], a).expect("split shape"),
        Tensor::from_vec([n, c - first, h, w], b).expect("split shape"),
    )
}
