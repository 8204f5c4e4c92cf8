//! Non-convolution primitives: activation, normalization, pooling, resize,
//! channel softmax and the per-pixel classification loss.
//!
//! Each public function here is the forward definition. The `*_backward`
//! helpers are used by the tape and accumulate into an existing gradient
//! buffer.

use super::{ensure_finite, Element, Result, Shape, Tensor, TensorError};

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{a} vs {b}"),
        })
    }
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Element>(input: &[T], gout: &[T], gin: &mut [T]) {
    for ((g, &x), &go) in gin.iter_mut().zip(input).zip(gout) {
        if x > T::zero() {
            *g += go;
        }
    }
}

/// Elementwise sum of two equally shaped tensors (residual connection).
pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a.shape(), b.shape())?;
    let data: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    ensure_finite("add", &data)?;
    Tensor::from_vec(a.shape(), data)
}

pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or(TensorError::InvalidArgument {
        op: "concat_channels",
        detail: "no inputs".into(),
    })?;
    let base = first.shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (base.n, base.h, base.w) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{base} vs {s}"),
            });
        }
        channels += s.c;
    }
    let out_shape = Shape::new(base.n, channels, base.h, base.w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..base.n {
        for t in inputs {
            let chunk = t.shape().c * base.plane();
            data.extend_from_slice(&t.data()[n * chunk..(n + 1) * chunk]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Scatters the gradient of a channel concatenation back to input `index`.
pub(crate) fn concat_backward<T: Element>(gout: &[T], out_shape: Shape, shapes: &[Shape], index: usize, gin: &mut [T]) {
    let plane = out_shape.plane();
    let offset: usize = shapes[..index].iter().map(|s| s.c).sum();
    let chunk = shapes[index].c * plane;
    for n in 0..out_shape.n {
        let src = (n * out_shape.c + offset) * plane;
        for (g, &v) in gin[n * chunk..(n + 1) * chunk].iter_mut().zip(&gout[src..src + chunk]) {
            *g += v;
        }
    }
}

pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let denom = T::from_f64(s.plane() as f64);
    let data = input
        .data()
        .chunks(s.plane().max(1))
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pooled shape")
}

pub(crate) fn global_avg_pool_backward<T: Element>(gout: &[T], in_shape: Shape, gin: &mut [T]) {
    let plane = in_shape.plane();
    let scale = T::one() / T::from_f64(plane as f64);
    for (chunk, &g) in gin.chunks_mut(plane).zip(gout) {
        let v = g * scale;
        for x in chunk {
            *x += v;
        }
    }
}

/// Softmax over the channel axis at every pixel, stabilized by subtracting
/// the per-pixel maximum.
pub fn softmax_channels<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let plane = s.plane();
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for i in 0..plane {
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(x[base + c * plane + i]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (x[base + c * plane + i] - m).exp();
                out[base + c * plane + i] = e;
                z += e;
            }
            for c in 0..s.c {
                out[base + c * plane + i] /= z;
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

pub(crate) fn softmax_backward<T: Element>(y: &[T], s: Shape, gout: &[T], gin: &mut [T]) {
    let plane = s.plane();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for i in 0..plane {
            let mut dotp = T::zero();
            for c in 0..s.c {
                let k = base + c * plane + i;
                dotp += gout[k] * y[k];
            }
            for c in 0..s.c {
                let k = base + c * plane + i;
                gin[k] += y[k] * (gout[k] - dotp);
            }
        }
    }
}

/// Max pooling; padded positions never win. Returns the output and, for each
/// output element, the flat input index it was taken from.
pub(crate) fn max_pool_indexed<T: Element>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    const OP: &str = "max_pool";
    let s = input.shape();
    if k == 0 || stride == 0 || padding >= k {
        return Err(TensorError::InvalidArgument {
            op: OP,
            detail: format!("kernel {k}, stride {stride}, padding {padding}"),
        });
    }
    let dim = |len: usize| (len + 2 * padding).checked_sub(k).map(|r| r / stride + 1);
    let (oh, ow) = match (dim(s.h), dim(s.w)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(TensorError::EmptyOutput {
                op: OP,
                detail: format!("input {s}, kernel {k}"),
            })
        }
    };
    let os = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(os.numel());
    let mut idx = Vec::with_capacity(os.numel());
    let x = input.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let i = base + iy as usize * s.w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                idx.push(best_i);
            }
        }
    }
    Ok((Tensor::from_vec(os, out)?, idx))
}

pub fn max_pool<T: Element>(input: &Tensor<T>, k: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    max_pool_indexed(input, k, stride, padding).map(|(t, _)| t)
}

/// Source taps along one axis for half-pixel-center bilinear sampling.
#[derive(Clone, Debug)]
pub(crate) struct AxisPlan {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisPlan {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut plan = AxisPlan {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for d in 0..out_len {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            plan.lo.push(lo);
            plan.hi.push(hi);
            plan.frac.push(src - lo as f64);
        }
        plan
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    rows: AxisPlan,
    cols: AxisPlan,
    in_shape: Shape,
    out_shape: Shape,
}

impl ResizePlan {
    pub(crate) fn new(in_shape: Shape, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 || in_shape.h == 0 || in_shape.w == 0 {
            return Err(TensorError::InvalidArgument {
                op: "bilinear_resize",
                detail: format!("resize {in_shape} to {out_h}x{out_w}"),
            });
        }
        Ok(Self {
            rows: AxisPlan::new(in_shape.h, out_h),
            cols: AxisPlan::new(in_shape.w, out_w),
            in_shape,
            out_shape: Shape::new(in_shape.n, in_shape.c, out_h, out_w),
        })
    }

    pub(crate) fn out_shape(&self) -> Shape {
        self.out_shape
    }

    pub(crate) fn forward<T: Element>(&self, x: &[T]) -> Vec<T> {
        let (is, os) = (self.in_shape, self.out_shape);
        let mut out = Vec::with_capacity(os.numel());
        for nc in 0..is.n * is.c {
            let plane = &x[nc * is.plane()..(nc + 1) * is.plane()];
            for y in 0..os.h {
                let (y0, y1) = (self.rows.lo[y], self.rows.hi[y]);
                let fy = T::from_f64(self.rows.frac[y]);
                for xo in 0..os.w {
                    let (x0, x1) = (self.cols.lo[xo], self.cols.hi[xo]);
                    let fx = T::from_f64(self.cols.frac[xo]);
                    let top = plane[y0 * is.w + x0] * (T::one() - fx) + plane[y0 * is.w + x1] * fx;
                    let bot = plane[y1 * is.w + x0] * (T::one() - fx) + plane[y1 * is.w + x1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        out
    }

    pub(crate) fn backward<T: Element>(&self, gout: &[T], gin: &mut [T]) {
        let (is, os) = (self.in_shape, self.out_shape);
        for nc in 0..is.n * is.c {
            let g_plane = &gout[nc * os.plane()..(nc + 1) * os.plane()];
            let i_plane = &mut gin[nc * is.plane()..(nc + 1) * is.plane()];
            for y in 0..os.h {
                let (y0, y1) = (self.rows.lo[y], self.rows.hi[y]);
                let fy = T::from_f64(self.rows.frac[y]);
                for xo in 0..os.w {
                    let (x0, x1) = (self.cols.lo[xo], self.cols.hi[xo]);
                    let fx = T::from_f64(self.cols.frac[xo]);
                    let g = g_plane[y * os.w + xo];
                    let top = g * (T::one() - fy);
                    let bot = g * fy;
                    i_plane[y0 * is.w + x0] += top * (T::one() - fx);
                    i_plane[y0 * is.w + x1] += top * fx;
                    i_plane[y1 * is.w + x0] += bot * (T::one() - fx);
                    i_plane[y1 * is.w + x1] += bot * fx;
                }
            }
        }
    }
}

/// Bilinear interpolation with half-pixel centers: output pixel `d` samples
/// source coordinate `(d + 0.5)·in/out − 0.5`, clamped to the image.
pub fn bilinear_resize<T: Element>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let plan = ResizePlan::new(input.shape(), out_h, out_w)?;
    Tensor::from_vec(plan.out_shape(), plan.forward(input.data()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub training: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            training: true,
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

impl BatchNormConfig {
    pub fn eval() -> Self {
        Self {
            training: false,
            ..Self::default()
        }
    }
}

pub(crate) struct BatchNormOutput<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub invstd: Vec<T>,
}

pub(crate) fn batch_norm_raw<T: Element>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    cfg: BatchNormConfig,
) -> Result<BatchNormOutput<T>> {
    const OP: &str = "batch_norm";
    let s = input.shape();
    if cfg.eps.is_nan() || cfg.eps <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            detail: format!("eps must be > 0, got {}", cfg.eps),
        });
    }
    if !(0.0..=1.0).contains(&cfg.momentum) {
        return Err(TensorError::InvalidArgument {
            op: OP,
            detail: format!("momentum must be in [0, 1], got {}", cfg.momentum),
        });
    }
    for (what, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
    ] {
        if len != s.c {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("{what} has {len} entries for {} channels", s.c),
            });
        }
    }
    let plane = s.plane();
    let count = s.n * plane;
    if count == 0 {
        return Err(TensorError::EmptyOutput {
            op: OP,
            detail: format!("input {s}"),
        });
    }
    let x = input.data();
    let eps = T::from_f64(cfg.eps);
    let momentum = T::from_f64(cfg.momentum);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut invstd = vec![T::zero(); s.c];
    let m = T::from_f64(count as f64);
    for c in 0..s.c {
        let planes = || (0..s.n).map(move |n| (n * s.c + c) * plane);
        let (mean, var) = if cfg.training {
            let mut sum = T::zero();
            for start in planes() {
                sum += x[start..start + plane].iter().fold(T::zero(), |a, &v| a + v);
            }
            let mean = sum / m;
            let mut sq = T::zero();
            for start in planes() {
                sq += x[start..start + plane]
                    .iter()
                    .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean));
            }
            let var = sq / m;
            running_mean[c] = momentum * running_mean[c] + (T::one() - momentum) * mean;
            running_var[c] = momentum * running_var[c] + (T::one() - momentum) * var;
            (mean, var)
        } else {
            (running_mean[c], running_var[c])
        };
        let is = T::one() / (var + eps).sqrt();
        invstd[c] = is;
        for start in planes() {
            for i in start..start + plane {
                let h = (x[i] - mean) * is;
                xhat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        }
    }
    ensure_finite(OP, &out)?;
    Ok(BatchNormOutput { out, xhat, invstd })
}

/// Per-channel batch normalization. In training mode normalizes with batch
/// statistics and folds them into the running statistics
/// (`running = momentum·running + (1 − momentum)·batch`); in eval mode uses the
/// running statistics only.
pub fn batch_norm<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut [T],
    running_var: &mut [T],
    cfg: BatchNormConfig,
) -> Result<Tensor<T>> {
    let r = batch_norm_raw(input, gamma.data(), beta.data(), running_mean, running_var, cfg)?;
    Tensor::from_vec(input.shape(), r.out)
}

pub(crate) struct BatchNormGrads<'a, T> {
    pub input: Option<&'a mut [T]>,
    pub gamma: Option<&'a mut [T]>,
    pub beta: Option<&'a mut [T]>,
}

pub(crate) fn batch_norm_backward<T: Element>(
    gout: &[T],
    s: Shape,
    xhat: &[T],
    invstd: &[T],
    gamma: &[T],
    training: bool,
    grads: BatchNormGrads<'_, T>,
) {
    let plane = s.plane();
    let m = T::from_f64((s.n * plane) as f64);
    let BatchNormGrads {
        mut input,
        gamma: mut ggamma,
        beta: mut gbeta,
    } = grads;
    for c in 0..s.c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for i in start..start + plane {
                sum_g += gout[i];
                sum_gx += gout[i] * xhat[i];
            }
        }
        if let Some(gg) = ggamma.as_deref_mut() {
            gg[c] += sum_gx;
        }
        if let Some(gb) = gbeta.as_deref_mut() {
            gb[c] += sum_g;
        }
        if let Some(gi) = input.as_deref_mut() {
            let k = gamma[c] * invstd[c];
            for n in 0..s.n {
                let start = (n * s.c + c) * plane;
                for i in start..start + plane {
                    gi[i] += if training {
                        k * (gout[i] - sum_g / m - xhat[i] * sum_gx / m)
                    } else {
                        k * gout[i]
                    };
                }
            }
        }
    }
}

/// Per-pixel class labels `(N, H, W)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(TensorError::DataLength {
                shape: Shape::new(n, 1, h, w),
                expected: n * h * w,
                got: data.len(),
            });
        }
        Ok(Self { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, label: u8) -> Self {
        Self {
            n,
            h,
            w,
            data: vec![label; n * h * w],
        }
    }
}

pub(crate) struct CrossEntropyOutput<T> {
    pub loss: T,
    pub probs: Vec<T>,
    pub weights: Vec<T>,
}

pub(crate) fn cross_entropy_raw<T: Element>(
    logits: &Tensor<T>,
    target: &LabelMap,
    class_weights: Option<&[f64]>,
) -> Result<CrossEntropyOutput<T>> {
    const OP: &str = "cross_entropy";
    let s = logits.shape();
    if (target.n, target.h, target.w) != (s.n, s.h, s.w) {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            detail: format!("logits {s} vs target ({}, {}, {})", target.n, target.h, target.w),
        });
    }
    let weights: Vec<T> = match class_weights {
        Some(w) if w.len() != s.c => {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                detail: format!("{} class weights for {} classes", w.len(), s.c),
            })
        }
        Some(w) => w.iter().map(|&v| T::from_f64(v)).collect(),
        None => vec![T::one(); s.c],
    };
    if let Some(&bad) = target.data.iter().find(|&&l| l as usize >= s.c) {
        return Err(TensorError::InvalidLabel {
            label: bad,
            classes: s.c,
        });
    }
    let probs = softmax_channels(logits).into_data();
    let x = logits.data();
    let plane = s.plane();
    let mut total = T::zero();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for i in 0..plane {
            let y = target.data[n * plane + i] as usize;
            let wy = weights[y];
            if wy == T::zero() {
                continue;
            }
            // log-sum-exp with max subtraction
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(x[base + c * plane + i]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                z += (x[base + c * plane + i] - m).exp();
            }
            let log_p = x[base + y * plane + i] - m - z.ln();
            total -= wy * log_p;
        }
    }
    let loss = total / T::from_f64((s.n * plane) as f64);
    ensure_finite(OP, &[loss])?;
    Ok(CrossEntropyOutput { loss, probs, weights })
}

/// Mean over all pixels of `−w_y · log softmax(logits)_y`.
pub fn cross_entropy_loss<T: Element>(logits: &Tensor<T>, target: &LabelMap, class_weights: Option<&[f64]>) -> Result<T> {
    cross_entropy_raw(logits, target, class_weights).map(|r| r.loss)
}

pub(crate) fn cross_entropy_backward<T: Element>(
    g: T,
    s: Shape,
    probs: &[T],
    target: &LabelMap,
    weights: &[T],
    gin: &mut [T],
) {
    let plane = s.plane();
    let scale = g / T::from_f64((s.n * plane) as f64);
    for n in 0..s.n {
        let base = n * s.c * plane;
        for i in 0..plane {
            let y = target.data[n * plane + i] as usize;
            let k = scale * weights[y];
            for c in 0..s.c {
                let idx = base + c * plane + i;
                let delta = if c == y { T::one() } else { T::zero() };
                gin[idx] += k * (probs[idx] - delta);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_of_negatives_is_zero() {
        let x = Tensor::<f32>::from_fn([1, 2, 3, 3], |_, c, h, w| -1.0 - (c + h + w) as f32);
        assert!(relu(&x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::<f32>::full([1, 2, 5, 7], 7.0);
        for (h, w) in [(1, 1), (3, 11), (16, 16), (5, 7)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            assert_eq!(y.shape(), Shape::new(1, 2, h, w));
            assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-6));
        }
    }

    #[test]
    fn resize_2x2_to_centroid() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let y = bilinear_resize(&x, 1, 1).unwrap();
        assert_eq!(y.item(), 3.0);
    }

    #[test]
    fn resize_phone_resolution() {
        // Stored (H, W): the 4032 x 3024 landscape frame is 3024 rows high.
        let x = Tensor::<f32>::zeros([1, 1, 3024, 4032]);
        let y = bilinear_resize(&x, 432, 576).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 432, 576));
    }

    #[test]
    fn resize_rejects_zero_target() {
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        assert!(bilinear_resize(&x, 0, 3).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor::<f32>::from_fn([2, 3, 4, 4], |n, c, h, w| ((n * 7 + c * 13 + h * 3 + w) % 11) as f32 - 5.0);
        let y = softmax_channels(&x);
        for n in 0..2 {
            for h in 0..4 {
                for w in 0..4 {
                    let s: f32 = (0..3).map(|c| y.at(n, c, h, w)).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn batch_norm_training_moments() {
        let x = Tensor::<f64>::from_fn([4, 3, 5, 6], |n, c, h, w| {
            ((n * 31 + c * 17 + h * 7 + w * 3) % 23) as f64 * (c as f64 + 0.5) + c as f64 * 10.0
        });
        let gamma = Tensor::full([1, 3, 1, 1], 1.0);
        let beta = Tensor::zeros([1, 3, 1, 1]);
        let (mut rm, mut rv) = (vec![0.0; 3], vec![1.0; 3]);
        let y = batch_norm(&x, &gamma, &beta, &mut rm, &mut rv, BatchNormConfig::default()).unwrap();
        let per = (4 * 30) as f64;
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / per;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(rm.iter().all(|&m| m != 0.0), "running mean updated");
    }

    #[test]
    fn batch_norm_rejects_bad_eps() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let g = Tensor::full([1, 1, 1, 1], 1.0);
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let cfg = BatchNormConfig { eps: 0.0, ..Default::default() };
        assert!(batch_norm(&x, &g, &g, &mut rm, &mut rv, cfg).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let shape = [2, 2, 3, 4];
        let target = LabelMap::new(2, 3, 4, (0..24).map(|i| (i % 2) as u8).collect()).unwrap();
        let confident = Tensor::<f64>::from_fn(shape, |n, c, h, w| {
            let y = target.data[(n * 3 + h) * 4 + w] as usize;
            if c == y { 20.0 } else { -20.0 }
        });
        assert!(cross_entropy_loss(&confident, &target, None).unwrap() < 1e-6);

        let flat = Tensor::<f64>::full(shape, 0.3);
        let l = cross_entropy_loss(&flat, &target, None).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6);

        let zeros = LabelMap::filled(2, 3, 4, 0);
        let l = cross_entropy_loss(&flat, &zeros, Some(&[0.0, 3.0])).unwrap();
        assert_eq!(l, 0.0);

        let bad = LabelMap::filled(2, 3, 4, 2);
        assert!(matches!(
            cross_entropy_loss(&flat, &bad, None),
            Err(TensorError::InvalidLabel { label: 2, .. })
        ));
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::<f32>::from_fn([1, 1, 4, 4], |_, _, h, w| (h * 4 + w) as f32);
        let y = max_pool(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let y = max_pool(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn global_pool_and_concat() {
        let a = Tensor::<f32>::from_fn([2, 1, 2, 2], |n, _, h, w| (n * 4 + h * 2 + w) as f32);
        let p = global_avg_pool(&a);
        assert_eq!(p.data(), &[1.5, 5.5]);
        let b = Tensor::<f32>::full([2, 2, 2, 2], 9.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 3, 2, 2));
        assert_eq!(c.plane(1, 0), a.plane(1, 0));
        assert_eq!(c.plane(1, 2), b.plane(1, 1));
    }
}
