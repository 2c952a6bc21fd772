use crate::error::{Error, Result};

use super::{Real, Tensor4};

/// Gradients of a convolution with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

fn check_conv(x: &Tensor4<impl Real>, kernel_len: usize, bias_len: usize, k: usize) -> Result<usize> {
    let c_in = x.c();
    let c_out = bias_len;
    if kernel_len != c_out * c_in * k * k {
        return Err(Error::Shape(format!(
            "kernel of {kernel_len} weights does not fit ({c_out}, {c_in}, {k}, {k}) for input {:?}",
            x.shape()
        )));
    }
    Ok(c_out)
}

const CONV_TILE: usize = 2048;

/// Zero-padded copies of every `(n, c)` plane, `(h + 2) x (w + 2)` plus two
/// trailing zeros so that flat shifted reads never run past the end.
fn pad_planes<T: Real>(x: &Tensor4<T>) -> Vec<T> {
    let [n, c, h, w] = x.shape();
    let wp = w + 2;
    let plen = (h + 2) * wp + 2;
    let mut out = vec![T::zero(); n * c * plen];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * plen..(p + 1) * plen];
        for y in 0..h {
            dst[(y + 1) * wp + 1..(y + 1) * wp + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    out
}

/// Dot product with eight independent partial sums.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    acc.iter().fold(T::zero(), |s, &v| s + v) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// 3x3 convolution, stride 1, zero padding 1. `kernel` is laid out
/// `(c_out, c_in, 3, 3)` and `bias` has `c_out` entries.
///
/// Each output pixel accumulates `bias` first, then taps in
/// `(c_in, ky, kx)` order. Taps over the padding contribute an exact zero.
pub fn conv2d<T: Real>(x: &Tensor4<T>, kernel: &[T], bias: &[T]) -> Result<Tensor4<T>> {
    let c_out = check_conv(x, kernel.len(), bias.len(), 3)?;
    let [n, c_in, h, w] = x.shape();
    let wp = w + 2;
    let plen = (h + 2) * wp + 2;
    let span = h * wp;
    let padded = pad_planes(x);
    let mut out = Tensor4::zeros([n, c_out, h, w]);
    let mut wide = vec![T::zero(); span];
    for b in 0..n {
        for co in 0..c_out {
            wide.fill(bias[co]);
            // tiles keep the accumulator resident in L1
            for j0 in (0..span).step_by(CONV_TILE) {
                let j1 = (j0 + CONV_TILE).min(span);
                let acc = &mut wide[j0..j1];
                for ci in 0..c_in {
                    let xp = &padded[(b * c_in + ci) * plen..(b * c_in + ci + 1) * plen];
                    let wk = &kernel[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let off = ky * wp + kx;
                            axpy(wk[ky * 3 + kx], &xp[j0 + off..j1 + off], acc);
                        }
                    }
                }
            }
            let o = out.plane_mut(b, co);
            for y in 0..h {
                o[y * w..(y + 1) * w].copy_from_slice(&wide[y * wp..y * wp + w]);
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`] given the forward input and upstream gradient.
pub fn conv2d_backward<T: Real>(x: &Tensor4<T>, kernel: &[T], grad_out: &Tensor4<T>) -> Result<ConvGrads<T>> {
    let [n, c_in, h, w] = x.shape();
    let c_out = grad_out.c();
    if grad_out.shape() != [n, c_out, h, w] || kernel.len() != c_out * c_in * 9 {
        return Err(Error::Shape(format!(
            "conv2d backward: input {:?}, grad {:?}, kernel {}",
            x.shape(),
            grad_out.shape(),
            kernel.len()
        )));
    }
    let wp = w + 2;
    let plen = (h + 2) * wp + 2;
    let span = h * wp;
    let padded = pad_planes(x);
    let mut gpad = vec![T::zero(); n * c_in * plen];
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); c_out];
    // upstream gradient in padded-width layout, zero in the two extra columns
    let mut gwide = vec![T::zero(); span];
    for b in 0..n {
        for co in 0..c_out {
            let g = grad_out.plane(b, co);
            for y in 0..h {
                gwide[y * wp..y * wp + w].copy_from_slice(&g[y * w..(y + 1) * w]);
            }
            gb[co] = gb[co] + g.iter().copied().sum::<T>();
            for ci in 0..c_in {
                let p0 = (b * c_in + ci) * plen;
                let xp = &padded[p0..p0 + plen];
                let base = (co * c_in + ci) * 9;
                let gp = &mut gpad[p0..p0 + plen];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let off = ky * wp + kx;
                        let t = base + ky * 3 + kx;
                        gk[t] = gk[t] + dot(&gwide, &xp[off..off + span]);
                        axpy(kernel[t], &gwide, &mut gp[off..off + span]);
                    }
                }
            }
        }
    }
    let mut gx = Tensor4::zeros(x.shape());
    for p in 0..n * c_in {
        let src = &gpad[p * plen..(p + 1) * plen];
        let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&src[(y + 1) * wp + 1..(y + 1) * wp + 1 + w]);
        }
    }
    Ok(ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    })
}

/// Pointwise (1x1) convolution; `kernel` is `(c_out, c_in)`.
pub fn conv1x1<T: Real>(x: &Tensor4<T>, kernel: &[T], bias: &[T]) -> Result<Tensor4<T>> {
    let c_out = check_conv(x, kernel.len(), bias.len(), 1)?;
    let [n, c_in, h, w] = x.shape();
    let mut out = Tensor4::zeros([n, c_out, h, w]);
    for b in 0..n {
        for co in 0..c_out {
            let o = out.plane_mut(b, co);
            o.fill(bias[co]);
            for ci in 0..c_in {
                let wv = kernel[co * c_in + ci];
                for (ov, &iv) in o.iter_mut().zip(x.plane(b, ci)) {
                    *ov = *ov + wv * iv;
                }
            }
        }
    }
    Ok(out)
}

pub fn conv1x1_backward<T: Real>(x: &Tensor4<T>, kernel: &[T], grad_out: &Tensor4<T>) -> Result<ConvGrads<T>> {
    let [n, c_in, h, w] = x.shape();
    let c_out = grad_out.c();
    if grad_out.shape() != [n, c_out, h, w] || kernel.len() != c_out * c_in {
        return Err(Error::Shape(format!(
            "conv1x1 backward: input {:?}, grad {:?}, kernel {}",
            x.shape(),
            grad_out.shape(),
            kernel.len()
        )));
    }
    let mut gx = Tensor4::zeros(x.shape());
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); c_out];
    for b in 0..n {
        for co in 0..c_out {
            let g = grad_out.plane(b, co);
            gb[co] = gb[co] + g.iter().copied().sum::<T>();
            for ci in 0..c_in {
                let xin = x.plane(b, ci);
                gk[co * c_in + ci] = gk[co * c_in + ci] + dot(g, xin);
                let wv = kernel[co * c_in + ci];
                for (iv, &gv) in gx.plane_mut(b, ci).iter_mut().zip(g) {
                    *iv = *iv + wv * gv;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    })
}

/// Exponential linear unit with `alpha = 1`.
pub fn elu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { v.exp_m1() })
}

/// ELU derivative expressed through the forward output `y`:
/// `1` where `y > 0`, `y + 1` elsewhere.
pub fn elu_backward<T: Real>(y: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&yv, &g)| if yv > T::zero() { g } else { g * (yv + T::one()) })
        .collect();
    Tensor4::from_vec(y.shape(), data).expect("same shape")
}

#[inline]
fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Real>(y: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&yv, &g)| g * yv * (T::one() - yv))
        .collect();
    Tensor4::from_vec(y.shape(), data).expect("same shape")
}

/// Flat input index of the maximum of each pooling window.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    input_shape: [usize; 4],
    argmax: Vec<u32>,
}

/// 2x2 max pooling, stride 2. Ties resolve to the first element in scan order.
pub fn max_pool2<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, PoolIndices)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max_pool2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let i0 = base + 2 * y * w + 2 * xo;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[o] = src[best];
                argmax.push(best as u32);
                o += 1;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: x.shape(),
            argmax,
        },
    ))
}

pub fn max_pool2_backward<T: Real>(idx: &PoolIndices, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let mut gx = Tensor4::zeros(idx.input_shape);
    let g = gx.data_mut();
    for (&i, &gv) in idx.argmax.iter().zip(grad_out.data()) {
        g[i as usize] = g[i as usize] + gv;
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let ow = 2 * w;
    let mut out = Tensor4::zeros([n, c, 2 * h, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..h {
            let row = &src[(plane * h + y) * w..(plane * h + y + 1) * w];
            let o0 = (plane * 2 * h + 2 * y) * ow;
            for (xi, &v) in row.iter().enumerate() {
                dst[o0 + 2 * xi] = v;
                dst[o0 + 2 * xi + 1] = v;
            }
            dst.copy_within(o0..o0 + ow, o0 + ow);
        }
    }
    out
}

/// Sums each 2x2 block of the upstream gradient.
pub fn upsample2_backward<T: Real>(grad_out: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, oh, ow] = grad_out.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = Tensor4::zeros([n, c, h, w]);
    let g = grad_out.data();
    let dst = gx.data_mut();
    for plane in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                let i = (plane * oh + 2 * y) * ow + 2 * x;
                dst[(plane * h + y) * w + x] = g[i] + g[i + 1] + g[i + ow] + g[i + ow + 1];
            }
        }
    }
    gx
}

/// Stacks channels `[a; b]`.
pub fn concat_channels<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "concat_channels: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        data.extend_from_slice(a.sample(s));
        data.extend_from_slice(b.sample(s));
    }
    Tensor4::from_vec([n, ca + cb, h, w], data)
}

/// Splits a concatenated gradient back into the parts of `a` (first
/// `channels_a` channels) and `b`.
pub fn concat_channels_backward<T: Real>(grad: &Tensor4<T>, channels_a: usize) -> (Tensor4<T>, Tensor4<T>) {
    let [n, c, h, w] = grad.shape();
    let cb = c - channels_a;
    let mut ga = Vec::with_capacity(n * channels_a * h * w);
    let mut gb = Vec::with_capacity(n * cb * h * w);
    let split = channels_a * h * w;
    for s in 0..n {
        let sample = grad.sample(s);
        ga.extend_from_slice(&sample[..split]);
        gb.extend_from_slice(&sample[split..]);
    }
    (
        Tensor4::from_vec([n, channels_a, h, w], ga).expect("split"),
        Tensor4::from_vec([n, cb, h, w], gb).expect("split"),
    )
}
