//! 2-D cross-correlation with stride, zero padding, dilation and groups.
//!
//! All three kernels (forward, input gradient, weight gradient) visit taps in
//! the fixed order `(input channel, ky, kx)` per output element, so results do
//! not depend on how the work is scheduled. Taps that fall entirely in the
//! zero padding are skipped; they would only add zeros.

use super::{ensure_finite, Element, Result, Shape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// `floor((len + 2·padding − dilation·(k−1) − 1) / stride) + 1`, or `None`
/// when the dilated kernel does not fit.
pub fn conv_output_dim(len: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k.max(1) - 1) + 1;
    let padded = len + 2 * padding;
    if stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

pub(crate) fn output_shape(xs: Shape, ws: Shape, bias: Option<Shape>, p: &ConvParams) -> Result<Shape> {
    const OP: &str = "conv2d";
    let bad = |detail: String| Err(TensorError::InvalidArgument { op: OP, detail });
    if p.stride == 0 || p.dilation == 0 || p.groups == 0 {
        return bad(format!(
            "stride {}, dilation {} and groups {} must be >= 1",
            p.stride, p.dilation, p.groups
        ));
    }
    let mismatch = |detail: String| Err(TensorError::ShapeMismatch { op: OP, detail });
    if !xs.c.is_multiple_of(p.groups) || !ws.n.is_multiple_of(p.groups) {
        return mismatch(format!(
            "channels in {} / out {} not divisible by groups {}",
            xs.c, ws.n, p.groups
        ));
    }
    if ws.c != xs.c / p.groups {
        return mismatch(format!(
            "weight {} expects {} input channels per group, input {} has {}",
            ws,
            ws.c,
            xs,
            xs.c / p.groups
        ));
    }
    if ws.h == 0 || ws.w == 0 || ws.n == 0 {
        return mismatch(format!("empty weight {ws}"));
    }
    if let Some(bs) = bias {
        if bs.numel() != ws.n {
            return mismatch(format!("bias {} for {} output channels", bs, ws.n));
        }
    }
    let oh = conv_output_dim(xs.h, ws.h, p.stride, p.padding, p.dilation);
    let ow = conv_output_dim(xs.w, ws.w, p.stride, p.padding, p.dilation);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 && xs.n > 0 => Ok(Shape::new(xs.n, ws.n, oh, ow)),
        _ => Err(TensorError::EmptyOutput {
            op: OP,
            detail: format!("input {xs}, kernel {}x{}, {p:?}", ws.h, ws.w),
        }),
    }
}

/// Range of output positions `o` for which `o·stride + offset − padding`
/// lands inside `[0, len)`.
#[inline]
fn valid_range(offset: usize, padding: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let offset = offset as isize - padding as isize;
    let stride_i = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + stride_i - 1) / stride_i
    };
    let last = len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / stride_i + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

#[inline]
fn axpy<T: Element>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

struct Geometry {
    xs: Shape,
    ws: Shape,
    os: Shape,
    p: ConvParams,
    cin_per_group: usize,
    cout_per_group: usize,
}

impl Geometry {
    fn new(xs: Shape, ws: Shape, os: Shape, p: ConvParams) -> Self {
        Self {
            xs,
            ws,
            os,
            p,
            cin_per_group: xs.c / p.groups,
            cout_per_group: ws.n / p.groups,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.ws.h == 1 && self.ws.w == 1 && self.p.stride == 1 && self.p.padding == 0
    }

    fn rows(&self, ky: usize) -> (usize, usize) {
        valid_range(ky * self.p.dilation, self.p.padding, self.p.stride, self.xs.h, self.os.h)
    }

    fn cols(&self, kx: usize) -> (usize, usize) {
        valid_range(kx * self.p.dilation, self.p.padding, self.p.stride, self.xs.w, self.os.w)
    }

    fn weight_index(&self, co: usize, cig: usize, ky: usize, kx: usize) -> usize {
        ((co * self.cin_per_group + cig) * self.ws.h + ky) * self.ws.w + kx
    }

    /// Multiply-accumulates this convolution performs, counted per tap
    /// position including padded taps.
    fn macs(&self) -> u64 {
        (self.os.n * self.os.c * self.os.plane() * self.cin_per_group * self.ws.h * self.ws.w) as u64
    }
}

pub(crate) fn forward_raw<T: Element>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    bias: Option<&[T]>,
    os: Shape,
    p: ConvParams,
) -> Vec<T> {
    let g = Geometry::new(xs, ws, os, p);
    let (ih, iw) = (xs.h, xs.w);
    let (oh, ow) = (os.h, os.w);
    let mut out = vec![T::zero(); os.numel()];
    for n in 0..xs.n {
        for co in 0..ws.n {
            let group = co / g.cout_per_group;
            let o_start = (n * ws.n + co) * oh * ow;
            let out_plane = &mut out[o_start..o_start + oh * ow];
            if let Some(b) = bias {
                out_plane.fill(b[co]);
            }
            for cig in 0..g.cin_per_group {
                let ci = group * g.cin_per_group + cig;
                let i_start = (n * xs.c + ci) * ih * iw;
                let in_plane = &x[i_start..i_start + ih * iw];
                if g.is_pointwise() {
                    axpy(out_plane, w[g.weight_index(co, cig, 0, 0)], in_plane);
                    continue;
                }
                for ky in 0..ws.h {
                    let (oy0, oy1) = g.rows(ky);
                    if oy0 >= oy1 {
                        continue;
                    }
                    for kx in 0..ws.w {
                        let (ox0, ox1) = g.cols(kx);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wv = w[g.weight_index(co, cig, ky, kx)];
                        let len = ox1 - ox0;
                        for oy in oy0..oy1 {
                            let iy = oy * p.stride + ky * p.dilation - p.padding;
                            let ix0 = ox0 * p.stride + kx * p.dilation - p.padding;
                            let orow = &mut out_plane[oy * ow + ox0..oy * ow + ox1];
                            let irow = &in_plane[iy * iw..(iy + 1) * iw];
                            if p.stride == 1 {
                                axpy(orow, wv, &irow[ix0..ix0 + len]);
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * irow[ix0 + j * p.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates `∂L/∂input` into `gin` given `∂L/∂output`.
pub(crate) fn backward_input<T: Element>(gout: &[T], os: Shape, w: &[T], ws: Shape, xs: Shape, p: ConvParams, gin: &mut [T]) {
    let g = Geometry::new(xs, ws, os, p);
    let (ih, iw) = (xs.h, xs.w);
    let (oh, ow) = (os.h, os.w);
    for n in 0..xs.n {
        for ci in 0..xs.c {
            let group = ci / g.cin_per_group;
            let cig = ci % g.cin_per_group;
            let i_start = (n * xs.c + ci) * ih * iw;
            let gin_plane = &mut gin[i_start..i_start + ih * iw];
            for co in group * g.cout_per_group..(group + 1) * g.cout_per_group {
                let o_start = (n * os.c + co) * oh * ow;
                let gout_plane = &gout[o_start..o_start + oh * ow];
                if g.is_pointwise() {
                    axpy(gin_plane, w[g.weight_index(co, cig, 0, 0)], gout_plane);
                    continue;
                }
                for ky in 0..ws.h {
                    let (oy0, oy1) = g.rows(ky);
                    if oy0 >= oy1 {
                        continue;
                    }
                    for kx in 0..ws.w {
                        let (ox0, ox1) = g.cols(kx);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wv = w[g.weight_index(co, cig, ky, kx)];
                        let len = ox1 - ox0;
                        for oy in oy0..oy1 {
                            let iy = oy * p.stride + ky * p.dilation - p.padding;
                            let ix0 = ox0 * p.stride + kx * p.dilation - p.padding;
                            let grow = &gout_plane[oy * ow + ox0..oy * ow + ox1];
                            let irow = &mut gin_plane[iy * iw..(iy + 1) * iw];
                            if p.stride == 1 {
                                axpy(&mut irow[ix0..ix0 + len], wv, grow);
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    irow[ix0 + j * p.stride] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `∂L/∂weight` into `gw`.
pub(crate) fn backward_weight<T: Element>(gout: &[T], os: Shape, x: &[T], xs: Shape, ws: Shape, p: ConvParams, gw: &mut [T]) {
    let g = Geometry::new(xs, ws, os, p);
    let (ih, iw) = (xs.h, xs.w);
    let (oh, ow) = (os.h, os.w);
    for co in 0..ws.n {
        let group = co / g.cout_per_group;
        for cig in 0..g.cin_per_group {
            let ci = group * g.cin_per_group + cig;
            for ky in 0..ws.h {
                let (oy0, oy1) = g.rows(ky);
                for kx in 0..ws.w {
                    let (ox0, ox1) = g.cols(kx);
                    let widx = g.weight_index(co, cig, ky, kx);
                    if oy0 >= oy1 || ox0 >= ox1 {
                        continue;
                    }
                    let len = ox1 - ox0;
                    let mut acc = T::zero();
                    for n in 0..xs.n {
                        let o_start = (n * os.c + co) * oh * ow;
                        let gout_plane = &gout[o_start..o_start + oh * ow];
                        let i_start = (n * xs.c + ci) * ih * iw;
                        let in_plane = &x[i_start..i_start + ih * iw];
                        if g.is_pointwise() {
                            acc += dot(gout_plane, in_plane);
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * p.stride + ky * p.dilation - p.padding;
                            let ix0 = ox0 * p.stride + kx * p.dilation - p.padding;
                            let grow = &gout_plane[oy * ow + ox0..oy * ow + ox1];
                            let irow = &in_plane[iy * iw..(iy + 1) * iw];
                            if p.stride == 1 {
                                acc += dot(grow, &irow[ix0..ix0 + len]);
                            } else {
                                let mut s = T::zero();
                                for (j, &gv) in grow.iter().enumerate() {
                                    s += gv * irow[ix0 + j * p.stride];
                                }
                                acc += s;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
}

/// Accumulates `∂L/∂bias` (per-channel sum of the output gradient).
pub(crate) fn backward_bias<T: Element>(gout: &[T], os: Shape, gb: &mut [T]) {
    let plane = os.plane();
    for image in gout.chunks_exact(os.c * plane).take(os.n) {
        for (g, ch) in gb.iter_mut().zip(image.chunks_exact(plane)) {
            *g += ch.iter().fold(T::zero(), |a, &v| a + v);
        }
    }
}

pub(crate) fn mac_count(xs: Shape, ws: Shape, os: Shape, p: ConvParams) -> u64 {
    Geometry::new(xs, ws, os, p).macs()
}

/// Cross-correlation of `input` with `weight` `(C_out, C_in/groups, kH, kW)`.
pub fn conv2d<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, params: ConvParams) -> Result<Tensor<T>> {
    let os = output_shape(input.shape(), weight.shape(), bias.map(|b| b.shape()), &params)?;
    let out = forward_raw(
        input.data(),
        input.shape(),
        weight.data(),
        weight.shape(),
        bias.map(|b| b.data()),
        os,
        params,
    );
    ensure_finite("conv2d", &out)?;
    Tensor::from_vec(os, out)
}

/// Per-channel spatial convolution (`groups = C_in`) followed by a 1×1
/// pointwise convolution.
pub fn depthwise_separable_conv<T: Element>(
    input: &Tensor<T>,
    depthwise: &Tensor<T>,
    pointwise: &Tensor<T>,
    pointwise_bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    let spatial = conv2d(
        input,
        depthwise,
        None,
        ConvParams::new(stride, padding, dilation, input.shape().c),
    )?;
    conv2d(&spatial, pointwise, pointwise_bias, ConvParams::default())
}
