//! Forward and backward rules for each layer kind, operating on whole batches.
//!
//! Per-sample work runs in parallel, but every reduction is accumulated in a
//! fixed order so results do not depend on the number of worker threads.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use super::NetError;

pub const KERNEL: usize = 3;

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4], NetError> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(NetError::Shape(format!(
            "{what} must be rank 4 (NCHW), got {:?}",
            t.shape()
        ))),
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 2], NetError> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        _ => Err(NetError::Shape(format!(
            "{what} must be rank 2, got {:?}",
            t.shape()
        ))),
    }
}

fn check_conv_params<T: Scalar>(
    channels: usize,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<usize, NetError> {
    let [k, c, kh, kw] = dims4(weights, "conv weights")?;
    if c != channels || kh != KERNEL || kw != KERNEL {
        return Err(NetError::Shape(format!(
            "conv weights {:?} do not fit {channels} input channels with a 3x3 kernel",
            weights.shape()
        )));
    }
    if let Some(bias) = bias {
        if bias.shape() != [k] {
            return Err(NetError::Shape(format!(
                "conv bias {:?} does not match {k} filters",
                bias.shape()
            )));
        }
    }
    Ok(k)
}

/// 3x3 convolution with zero same-padding.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NetError> {
    let [n, c, h, w] = dims4(input, "conv input")?;
    let k = check_conv_params(c, weights, Some(bias))?;
    let plane = h * w;
    let mut out = Tensor::<T>::zeros(vec![n, k, h, w]);
    let wd = weights.data();
    let bd = bias.data();
    out.data_mut()
        .par_chunks_mut(k * plane)
        .zip(input.data().par_chunks(c * plane))
        .for_each(|(out_s, in_s)| {
            for (kk, out_p) in out_s.chunks_mut(plane).enumerate() {
                out_p.fill(bd[kk]);
                for cc in 0..c {
                    let in_p = &in_s[cc * plane..(cc + 1) * plane];
                    for dy in 0..KERNEL {
                        for dx in 0..KERNEL {
                            let wv = wd[((kk * c + cc) * KERNEL + dy) * KERNEL + dx];
                            accumulate_shifted(out_p, in_p, h, w, dy, dx, wv);
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// out[y][x] += wv * src[y + dy - 1][x + dx - 1], skipping out-of-range taps.
#[inline]
fn accumulate_shifted<T: Scalar>(
    out: &mut [T],
    src: &[T],
    h: usize,
    w: usize,
    dy: usize,
    dx: usize,
    wv: T,
) {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    for y in y0..y1 {
        let sy = y + dy - 1;
        let orow = &mut out[y * w + x0..y * w + x1];
        let srow = &src[sy * w + x0 + dx - 1..sy * w + x1 + dx - 1];
        for (o, &s) in orow.iter_mut().zip(srow) {
            *o = *o + wv * s;
        }
    }
}

/// Output positions p for which p + d - 1 lies in [0, extent).
#[inline]
fn valid_range(extent: usize, d: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(d);
    let hi = (extent + 1 - d).min(extent);
    (lo, hi)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>, NetError> {
    let [n, c, h, w] = dims4(input, "conv input")?;
    let k = check_conv_params(c, weights, None)?;
    if grad_out.shape() != [n, k, h, w] {
        return Err(NetError::Shape(format!(
            "conv output gradient {:?} does not match [{n}, {k}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let plane = h * w;
    let wd = weights.data();
    let gd = grad_out.data();
    let id = input.data();

    // dL/dinput: correlate output gradients with the flipped kernel, per sample.
    let mut grad_in = Tensor::<T>::zeros(vec![n, c, h, w]);
    grad_in
        .data_mut()
        .par_chunks_mut(c * plane)
        .zip(gd.par_chunks(k * plane))
        .for_each(|(gin_s, g_s)| {
            for (cc, gin_p) in gin_s.chunks_mut(plane).enumerate() {
                for kk in 0..k {
                    let g_p = &g_s[kk * plane..(kk + 1) * plane];
                    for dy in 0..KERNEL {
                        for dx in 0..KERNEL {
                            let wv = wd[((kk * c + cc) * KERNEL + dy) * KERNEL + dx];
                            // gin[y'+dy-1][x'+dx-1] += wv * g[y'][x']
                            // i.e. gin[y][x] += wv * g[y - dy + 1][x - dx + 1]
                            accumulate_shifted(
                                gin_p,
                                g_p,
                                h,
                                w,
                                KERNEL - 1 - dy,
                                KERNEL - 1 - dx,
                                wv,
                            );
                        }
                    }
                }
            }
        });

    // dL/dweights: one filter per task, samples summed in batch order.
    let mut grad_w = Tensor::<T>::zeros(weights.shape().to_vec());
    grad_w
        .data_mut()
        .par_chunks_mut(c * KERNEL * KERNEL)
        .enumerate()
        .for_each(|(kk, gw_k)| {
            for s in 0..n {
                let g_p = &gd[(s * k + kk) * plane..(s * k + kk + 1) * plane];
                for cc in 0..c {
                    let in_p = &id[(s * c + cc) * plane..(s * c + cc + 1) * plane];
                    for dy in 0..KERNEL {
                        let (y0, y1) = valid_range(h, dy);
                        for dx in 0..KERNEL {
                            let (x0, x1) = valid_range(w, dx);
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                let grow = &g_p[y * w + x0..y * w + x1];
                                let sy = y + dy - 1;
                                let irow = &in_p[sy * w + x0 + dx - 1..sy * w + x1 + dx - 1];
                                for (&g, &v) in grow.iter().zip(irow) {
                                    acc = acc + g * v;
                                }
                            }
                            let slot = &mut gw_k[(cc * KERNEL + dy) * KERNEL + dx];
                            *slot = *slot + acc;
                        }
                    }
                }
            }
        });

    let mut grad_b = Tensor::<T>::zeros(vec![k]);
    for (kk, gb) in grad_b.data_mut().iter_mut().enumerate() {
        for s in 0..n {
            let g_p = &gd[(s * k + kk) * plane..(s * k + kk + 1) * plane];
            *gb = *gb + g_p.iter().copied().sum::<T>();
        }
    }

    Ok(ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    })
}

/// 2x2 max pooling with stride 2. The second value holds, per output element,
/// the flat input index of the winner; ties go to the first element in
/// row-major order.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), NetError> {
    let [n, c, h, w] = dims4(input, "maxpool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NetError::OddSpatial { height: h, width: w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Tensor::<T>::zeros(vec![n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(p, (out_p, arg_p))| {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out_p[oy * ow + ox] = src[best];
                    arg_p[oy * ow + ox] = best;
                }
            }
        });
    Ok((out, argmax))
}

pub fn maxpool2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, NetError> {
    if argmax.len() != grad_out.len() {
        return Err(NetError::Shape(format!(
            "maxpool gradient has {} values but {} argmax entries",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut grad_in = Tensor::<T>::zeros(input_shape.to_vec());
    let gin = grad_in.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        let slot = gin
            .get_mut(idx)
            .ok_or_else(|| NetError::Shape(format!("argmax index {idx} out of range")))?;
        *slot = *slot + g;
    }
    Ok(grad_in)
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = v.max(T::zero());
    }
    out
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, NetError> {
    if input.shape() != grad_out.shape() {
        return Err(NetError::Shape(format!(
            "relu gradient {:?} does not match input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let mut grad = grad_out.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(grad)
}

/// out = input · weightsᵀ + bias
pub fn fc_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NetError> {
    let [n, f] = dims2(input, "fc input")?;
    let [g, wf] = dims2(weights, "fc weights")?;
    if wf != f {
        return Err(NetError::Shape(format!(
            "fc weights expect {wf} features, input has {f}"
        )));
    }
    if bias.shape() != [g] {
        return Err(NetError::Shape(format!(
            "fc bias {:?} does not match {g} outputs",
            bias.shape()
        )));
    }
    let wd = weights.data();
    let bd = bias.data();
    let mut out = Tensor::<T>::zeros(vec![n, g]);
    out.data_mut()
        .par_chunks_mut(g)
        .zip(input.data().par_chunks(f))
        .for_each(|(out_s, x)| {
            for (gg, o) in out_s.iter_mut().enumerate() {
                let row = &wd[gg * f..(gg + 1) * f];
                let mut acc = bd[gg];
                for (&wv, &xv) in row.iter().zip(x) {
                    acc = acc + wv * xv;
                }
                *o = acc;
            }
        });
    Ok(out)
}

pub struct FcGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn fc_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<FcGrads<T>, NetError> {
    let [n, f] = dims2(input, "fc input")?;
    let [g, wf] = dims2(weights, "fc weights")?;
    if wf != f || grad_out.shape() != [n, g] {
        return Err(NetError::Shape(format!(
            "fc backward shapes disagree: input {:?}, weights {:?}, gradient {:?}",
            input.shape(),
            weights.shape(),
            grad_out.shape()
        )));
    }
    let wd = weights.data();
    let xd = input.data();
    let gd = grad_out.data();

    let mut grad_in = Tensor::<T>::zeros(vec![n, f]);
    grad_in
        .data_mut()
        .par_chunks_mut(f)
        .zip(gd.par_chunks(g))
        .for_each(|(gin, gs)| {
            for (gg, &gv) in gs.iter().enumerate() {
                let row = &wd[gg * f..(gg + 1) * f];
                for (o, &wv) in gin.iter_mut().zip(row) {
                    *o = *o + gv * wv;
                }
            }
        });

    let mut grad_w = Tensor::<T>::zeros(vec![g, f]);
    grad_w
        .data_mut()
        .par_chunks_mut(f)
        .enumerate()
        .for_each(|(gg, row)| {
            for s in 0..n {
                let gv = gd[s * g + gg];
                for (o, &xv) in row.iter_mut().zip(&xd[s * f..(s + 1) * f]) {
                    *o = *o + gv * xv;
                }
            }
        });

    let mut grad_b = Tensor::<T>::zeros(vec![g]);
    for s in 0..n {
        for (o, &gv) in grad_b.data_mut().iter_mut().zip(&gd[s * g..(s + 1) * g]) {
            *o = *o + gv;
        }
    }

    Ok(FcGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    })
}

/// Binary cross-entropy on a logit, in the overflow-free softplus form.
pub fn bce_with_logits<T: Scalar>(logit: T, label: bool) -> T {
    let y = if label { T::one() } else { T::zero() };
    logit.max(T::zero()) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// d/dlogit of [`bce_with_logits`].
pub fn bce_grad<T: Scalar>(logit: T, label: bool) -> T {
    let y = if label { T::one() } else { T::zero() };
    sigmoid(logit) - y
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
