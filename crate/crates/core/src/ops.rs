//! Forward and backward kernels for the fixed op set used by the projectors.
//!
//! Every reduction accumulates in `f64` and rounds once on store.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::error::{Axis, TensorError};
use crate::tensor::{Element, Tensor};

const POS_TILE: usize = 16;
const CO_BLOCK: usize = 256;

/// Resolved shapes of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Length of one flattened receptive field, `kh * kw * cin`.
    pub fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1
    }

    fn window_rows(&self, pos: usize) -> impl Iterator<Item = usize> + '_ {
        let (oy, ox) = (pos / self.out_w, pos % self.out_w);
        (0..self.kernel_h).map(move |ky| {
            let y = oy * self.stride + ky;
            (y * self.width + ox * self.stride) * self.in_channels
        })
    }

    fn gather_patch<T: Element>(&self, input: &[T], pos: usize, dst: &mut [T]) {
        let row_len = self.kernel_w * self.in_channels;
        for (ky, start) in self.window_rows(pos).enumerate() {
            dst[ky * row_len..(ky + 1) * row_len].copy_from_slice(&input[start..start + row_len]);
        }
    }

    fn scatter_patch<T: Element>(&self, src: &[f64], pos: usize, grad_input: &mut [T]) {
        let row_len = self.kernel_w * self.in_channels;
        for (ky, start) in self.window_rows(pos).enumerate() {
            for (g, &s) in grad_input[start..start + row_len]
                .iter_mut()
                .zip(&src[ky * row_len..(ky + 1) * row_len])
            {
                *g = T::from_f64(g.to_f64() + s);
            }
        }
    }

    /// Patch rows for positions `p0..p0 + n`, borrowed when the conv is pointwise.
    fn patches<'a, T: Element>(&self, input: &'a [T], p0: usize, n: usize) -> Cow<'a, [T]> {
        let k = self.patch_len();
        if self.is_pointwise() {
            Cow::Borrowed(&input[p0 * k..(p0 + n) * k])
        } else {
            let mut buf = vec![T::ZERO; n * k];
            for (j, dst) in buf.chunks_mut(k).enumerate() {
                self.gather_patch(input, p0 + j, dst);
            }
            Cow::Owned(buf)
        }
    }
}

/// Validates a conv call and resolves its output extents.
///
/// Windows must tile the input exactly: `(extent - kernel) % stride == 0`.
/// There is no padding.
pub fn conv_geometry<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<ConvGeometry, TensorError> {
    const OP: &str = "conv2d";
    let (height, width, in_channels) = input.dims3(OP)?;
    let (kernel_h, kernel_w, w_in, out_channels) = weight.dims4(OP)?;
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: "stride must be at least 1".into(),
        });
    }
    if w_in != in_channels {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            axis: Axis::Channel,
            expected: w_in,
            actual: in_channels,
        });
    }
    if bias.len() != out_channels {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            axis: Axis::OutChannel,
            expected: out_channels,
            actual: bias.len(),
        });
    }
    for (axis, kernel, extent) in [
        (Axis::Height, kernel_h, height),
        (Axis::Width, kernel_w, width),
    ] {
        if kernel == 0 || kernel > extent {
            return Err(TensorError::KernelTooLarge {
                op: OP,
                axis,
                kernel,
                extent,
            });
        }
        if (extent - kernel) % stride != 0 {
            return Err(TensorError::NotDivisible {
                op: OP,
                axis,
                extent,
                divisor: stride,
            });
        }
    }
    Ok(ConvGeometry {
        height,
        width,
        in_channels,
        kernel_h,
        kernel_w,
        out_channels,
        stride,
        out_h: (height - kernel_h) / stride + 1,
        out_w: (width - kernel_w) / stride + 1,
    })
}

/// Cross-correlation of an `H x W x Cin` map with `k x k x Cin x Cout` weights.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>, TensorError> {
    let g = conv_geometry(input, weight, bias, stride)?;
    let cout = g.out_channels;
    let k = g.patch_len();
    let x = input.data();
    let w = weight.data();
    let b = bias.data();
    let mut out = vec![T::ZERO; g.positions() * cout];

    out.par_chunks_mut(POS_TILE * cout)
        .enumerate()
        .for_each(|(tile, out_tile)| {
            let p0 = tile * POS_TILE;
            let np = out_tile.len() / cout;
            let patches = g.patches(x, p0, np);
            let mut acc = vec![0.0f64; np * CO_BLOCK.min(cout)];
            for co0 in (0..cout).step_by(CO_BLOCK) {
                let cb = CO_BLOCK.min(cout - co0);
                let acc = &mut acc[..np * cb];
                for row in acc.chunks_mut(cb) {
                    for (a, bv) in row.iter_mut().zip(&b[co0..co0 + cb]) {
                        *a = bv.to_f64();
                    }
                }
                for i in 0..k {
                    let wrow = &w[i * cout + co0..i * cout + co0 + cb];
                    for (p, row) in acc.chunks_mut(cb).enumerate() {
                        let xv = patches[p * k + i].to_f64();
                        for (a, wv) in row.iter_mut().zip(wrow) {
                            *a += xv * wv.to_f64();
                        }
                    }
                }
                for (p, row) in acc.chunks(cb).enumerate() {
                    for (o, &a) in out_tile[p * cout + co0..p * cout + co0 + cb]
                        .iter_mut()
                        .zip(row)
                    {
                        *o = T::from_f64(a);
                    }
                }
            }
        });

    Tensor::new(vec![g.out_h, g.out_w, cout], out)
}

/// Accumulates conv gradients (`+=`) given the upstream gradient.
///
/// `geometry` must come from [`conv_geometry`] on the same input and weights.
/// `grad_input` is skipped when `None`.
pub fn conv2d_backward<T: Element>(
    geometry: &ConvGeometry,
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Result<(), TensorError> {
    let g = *geometry;
    let cout = g.out_channels;
    let k = g.patch_len();
    let np = g.positions();
    if grad_out.len() != np * cout {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            axis: Axis::Length,
            expected: np * cout,
            actual: grad_out.len(),
        });
    }

    for (co, gb) in grad_bias.iter_mut().enumerate() {
        let s: f64 = (0..np).map(|p| grad_out[p * cout + co].to_f64()).sum();
        *gb = T::from_f64(gb.to_f64() + s);
    }

    let cols = g.patches(input.data(), 0, np);
    grad_weight
        .par_chunks_mut(cout)
        .enumerate()
        .for_each(|(i, gw_row)| {
            let mut acc = vec![0.0f64; cout];
            for p in 0..np {
                let xv = cols[p * k + i].to_f64();
                for (a, go) in acc.iter_mut().zip(&grad_out[p * cout..(p + 1) * cout]) {
                    *a += xv * go.to_f64();
                }
            }
            for (gw, a) in gw_row.iter_mut().zip(acc) {
                *gw = T::from_f64(gw.to_f64() + a);
            }
        });

    if let Some(grad_input) = grad_input {
        let patch_grads: Vec<Vec<f64>> = (0..np)
            .into_par_iter()
            .map(|p| {
                let go = &grad_out[p * cout..(p + 1) * cout];
                (0..k)
                    .map(|i| {
                        weight[i * cout..(i + 1) * cout]
                            .iter()
                            .zip(go)
                            .map(|(wv, gv)| wv.to_f64() * gv.to_f64())
                            .sum()
                    })
                    .collect()
            })
            .collect();
        for (p, pg) in patch_grads.iter().enumerate() {
            g.scatter_patch(pg, p, grad_input);
        }
    }
    Ok(())
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu_f64(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_scalar(x: f32) -> f32 {
    gelu_f64(x as f64) as f32
}

/// Derivative of the exact GeLU, `Phi(x) + x * phi(x)`.
pub fn gelu_derivative(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

pub fn gelu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|x| T::from_f64(gelu_f64(x.to_f64())))
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("gelu preserves shape")
}

pub fn gelu_backward<T: Element>(input: &Tensor<T>, grad_out: &[T], grad_input: &mut [T]) {
    for ((gi, x), go) in grad_input.iter_mut().zip(input.data()).zip(grad_out) {
        *gi = T::from_f64(gi.to_f64() + gelu_derivative(x.to_f64()) * go.to_f64());
    }
}

/// Concatenates `H x W x Ci` maps along the channel axis, in argument order.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "concat_channels";
    let first = inputs.first().ok_or_else(|| TensorError::InvalidArgument {
        op: OP,
        reason: "no inputs".into(),
    })?;
    let (h, w, _) = first.dims3(OP)?;
    let mut widths = Vec::with_capacity(inputs.len());
    for t in inputs {
        let (th, tw, tc) = t.dims3(OP)?;
        if th != h {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                axis: Axis::Height,
                expected: h,
                actual: th,
            });
        }
        if tw != w {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                axis: Axis::Width,
                expected: w,
                actual: tw,
            });
        }
        widths.push(tc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(h * w * total);
    for p in 0..h * w {
        for (t, &c) in inputs.iter().zip(&widths) {
            out.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, total], out)
}

/// Adds the channel slice `offset..offset + width` of a concatenated
/// gradient (row width `total`) into one input's gradient buffer.
pub fn concat_channels_backward<T: Element>(
    grad_out: &[T],
    total: usize,
    offset: usize,
    width: usize,
    grad_input: &mut [T],
) {
    for (row, gi) in grad_out.chunks(total).zip(grad_input.chunks_mut(width)) {
        for (g, &v) in gi.iter_mut().zip(&row[offset..offset + width]) {
            *g += v;
        }
    }
}

fn require_even(op: &'static str, h: usize, w: usize) -> Result<(), TensorError> {
    for (axis, extent) in [(Axis::Height, h), (Axis::Width, w)] {
        if extent % 2 != 0 || extent == 0 {
            return Err(TensorError::OddExtent { op, axis, extent });
        }
    }
    Ok(())
}

/// Mean over each disjoint 2x2 window.
pub fn avgpool2x2<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "avgpool2x2";
    let (h, w, c) = input.dims3(OP)?;
    require_even(OP, h, w)?;
    let x = input.data();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::ZERO; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (ch, o) in dst.iter_mut().enumerate() {
                let mut s = 0.0f64;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += x[((2 * oy + dy) * w + 2 * ox + dx) * c + ch].to_f64();
                    }
                }
                *o = T::from_f64(s / 4.0);
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

pub fn avgpool2x2_backward<T: Element>(
    input_shape: (usize, usize, usize),
    grad_out: &[T],
    grad_input: &mut [T],
) {
    let (_, w, c) = input_shape;
    let ow = w / 2;
    let quarter = T::from_f64(0.25);
    for (pos, row) in grad_out.chunks(c).enumerate() {
        let (oy, ox) = (pos / ow, pos % ow);
        for dy in 0..2 {
            for dx in 0..2 {
                let base = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                for (g, &v) in grad_input[base..base + c].iter_mut().zip(row) {
                    *g += v * quarter;
                }
            }
        }
    }
}

/// Moves each `block x block` window into the channel axis.
///
/// Output channel `(i * block + j) * C + c` holds input `(by + i, bx + j, c)`,
/// matching the row order of a flattened `[kh, kw, cin, cout]` conv weight.
pub fn space_to_depth<T: Element>(input: &Tensor<T>, block: usize) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "space_to_depth";
    let (h, w, c) = input.dims3(OP)?;
    if block == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: "block must be at least 1".into(),
        });
    }
    for (axis, extent) in [(Axis::Height, h), (Axis::Width, w)] {
        if extent % block != 0 {
            return Err(TensorError::NotDivisible {
                op: OP,
                axis,
                extent,
                divisor: block,
            });
        }
    }
    let (oh, ow) = (h / block, w / block);
    let row_len = block * c;
    let mut out = Vec::with_capacity(h * w * c);
    let x = input.data();
    for oy in 0..oh {
        for ox in 0..ow {
            for i in 0..block {
                let start = ((oy * block + i) * w + ox * block) * c;
                out.extend_from_slice(&x[start..start + row_len]);
            }
        }
    }
    Tensor::new(vec![oh, ow, block * block * c], out)
}

/// Inverse rearrangement of [`space_to_depth`], accumulated into `grad_input`.
pub fn space_to_depth_backward<T: Element>(
    input_shape: (usize, usize, usize),
    block: usize,
    grad_out: &[T],
    grad_input: &mut [T],
) {
    let (_, w, c) = input_shape;
    let ow = w / block;
    let row_len = block * c;
    for (pos, row) in grad_out.chunks(block * row_len).enumerate() {
        let (oy, ox) = (pos / ow, pos % ow);
        for i in 0..block {
            let start = ((oy * block + i) * w + ox * block) * c;
            for (g, &v) in grad_input[start..start + row_len]
                .iter_mut()
                .zip(&row[i * row_len..(i + 1) * row_len])
            {
                *g += v;
            }
        }
    }
}

/// Splits each position's channel vector into `per_position` contiguous
/// sub-tokens, giving a `[H * W * per_position, C / per_position]` sequence.
///
/// With channel-fastest storage this is a pure reinterpretation of the buffer.
pub fn reshape_tokens<T: Element>(input: Tensor<T>, per_position: usize) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "reshape_tokens";
    let (h, w, c) = input.dims3(OP)?;
    if per_position == 0 || c % per_position != 0 {
        return Err(TensorError::NotDivisible {
            op: OP,
            axis: Axis::Channel,
            extent: c,
            divisor: per_position,
        });
    }
    input.reshape(vec![h * w * per_position, c / per_position])
}
