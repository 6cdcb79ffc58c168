//! Forward and backward kernels on [`Tensor`].
//!
//! Convolutions lower to GEMM through an im2col buffer. Strides and padding
//! are independent per axis, which the matrix-layer extensions need
//! (stride 1x2 to the right, 2x1 downward).

use crate::error::{Error, Result};
use crate::net::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dGeom {
    pub const fn new(stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self { stride, pad }
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        if sh == 0 || sw == 0 {
            return Err(Error::Shape("conv stride must be at least 1".into()));
        }
        let ph = h + 2 * self.pad.0;
        let pw = w + 2 * self.pad.1;
        if ph < kh || pw < kw {
            return Err(Error::Shape(format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}")));
        }
        Ok(((ph - kh) / sh + 1, (pw - kw) / sw + 1))
    }
}

/// `C = alpha * A(m x k) * B(k x n) + beta * C`, all row-major with the given
/// row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n - 1) * csb + 1 || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: bounds of all three operands are asserted above for the given
    // strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, g: Conv2dGeom, oh: usize, ow: usize, cols: &mut [f64]) {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, g: Conv2dGeom, oh: usize, ow: usize, x: &mut [f64]) {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, g: Conv2dGeom) -> bool {
    kh == 1 && kw == 1 && g.stride == (1, 1) && g.pad == (0, 0)
}

fn check_conv(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<()> {
    let [_, ci, _, _] = input.shape();
    let [o, wi, _, _] = weight.shape();
    if ci != wi {
        return Err(Error::Shape(format!("conv input has {ci} channels, weight expects {wi}")));
    }
    if let Some(b) = bias {
        if b.len() != o {
            return Err(Error::Shape(format!("conv bias has {} entries for {o} filters", b.len())));
        }
    }
    Ok(())
}

/// Cross-correlation of `input [n, c, h, w]` with `weight [o, c, kh, kw]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: Conv2dGeom) -> Result<Tensor> {
    check_conv(input, weight, bias)?;
    let [n, c, h, w] = input.shape();
    let [o, _, kh, kw] = weight.shape();
    let (oh, ow) = g.output_hw(h, w, kh, kw)?;
    let k = c * kh * kw;
    let ohw = oh * ow;
    let mut out = Tensor::zeros([n, o, oh, ow]);
    let pointwise = is_pointwise(kh, kw, g);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * ohw] };
    for i in 0..n {
        let dst = out.sample_mut(i);
        if let Some(b) = bias {
            for (oc, &bv) in b.data().iter().enumerate() {
                dst[oc * ohw..(oc + 1) * ohw].fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let src: &[f64] = if pointwise {
            input.sample(i)
        } else {
            im2col(input.sample(i), c, h, w, kh, kw, g, oh, ow, &mut cols);
            &cols
        };
        gemm(o, k, ohw, weight.data(), (k, 1), src, (ohw, 1), beta, dst);
    }
    Ok(out)
}

pub struct Conv2dGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`. The input
/// gradient is skipped when `need_input` is false.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: Conv2dGeom,
    need_input: bool,
) -> Result<Conv2dGrads> {
    check_conv(input, weight, None)?;
    let [n, c, h, w] = input.shape();
    let [o, _, kh, kw] = weight.shape();
    let (oh, ow) = g.output_hw(h, w, kh, kw)?;
    if grad_out.shape() != [n, o, oh, ow] {
        return Err(Error::Shape(format!(
            "conv grad_out {:?} does not match output [{n}, {o}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let k = c * kh * kw;
    let ohw = oh * ow;
    let pointwise = is_pointwise(kh, kw, g);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros([1, o, 1, 1]);
    let mut gx = if need_input { Some(Tensor::zeros(input.shape())) } else { None };
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * ohw] };
    let mut gcols = if need_input && !pointwise { vec![0.0; k * ohw] } else { Vec::new() };

    for i in 0..n {
        let go = grad_out.sample(i);
        for oc in 0..o {
            gb.data_mut()[oc] += go[oc * ohw..(oc + 1) * ohw].iter().sum::<f64>();
        }
        let src: &[f64] = if pointwise {
            input.sample(i)
        } else {
            im2col(input.sample(i), c, h, w, kh, kw, g, oh, ow, &mut cols);
            &cols
        };
        // gW[o, k] += gO[o, ohw] * cols[k, ohw]^T
        gemm(o, ohw, k, go, (ohw, 1), src, (1, ohw), 1.0, gw.data_mut());
        if let Some(gx) = gx.as_mut() {
            // gcols[k, ohw] = W[o, k]^T * gO[o, ohw]
            if pointwise {
                gemm(k, o, ohw, weight.data(), (1, k), go, (ohw, 1), 0.0, gx.sample_mut(i));
            } else {
                gemm(k, o, ohw, weight.data(), (1, k), go, (ohw, 1), 0.0, &mut gcols);
                col2im(&gcols, c, h, w, kh, kw, g, oh, ow, gx.sample_mut(i));
            }
        }
    }
    Ok(Conv2dGrads { input: gx, weight: gw, bias: gb })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` in place by `out > 0`, where `out` is the ReLU output.
pub fn relu_backward_inplace(out: &Tensor, grad: &mut Tensor) {
    for (g, &o) in grad.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("add {:?} + {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Max pooling with `-inf` padding. Also returns the flat argmax per output
/// element for the backward pass.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = x.shape();
    if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!("max pool k={k} stride={stride} pad={pad} on {h}x{w}")));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let mut o = 0;
    for i in 0..n {
        for ch in 0..c {
            let base = x.index(i, ch, 0, 0);
            let plane = x.plane(i, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let j = iy as usize * w + ix as usize;
                            if plane[j] > best || best_i == usize::MAX {
                                best = plane[j];
                                best_i = j;
                            }
                        }
                    }
                    out.data_mut()[o] = best;
                    arg[o] = base + best_i;
                    o += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2d_backward(input_shape: [usize; 4], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    for (&j, &g) in argmax.iter().zip(grad_out.data()) {
        gx.data_mut()[j] += g;
    }
    gx
}

/// Source sample positions for bilinear resizing (half-pixel centers).
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every plane to `(oh, ow)`.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(Error::Shape("bilinear resize with an empty side".into()));
    }
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch).to_vec();
            let dst = out.plane_mut(i, ch);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

pub fn resize_bilinear_backward(input_shape: [usize; 4], grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = grad_out.hw();
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut gx = Tensor::zeros(input_shape);
    for i in 0..n {
        for ch in 0..c {
            let go = grad_out.plane(i, ch).to_vec();
            let dst = gx.plane_mut(i, ch);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = go[oy * ow + ox];
                    dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                    dst[y1 * w + x0] += g * fy * (1.0 - fx);
                    dst[y1 * w + x1] += g * fy * fx;
                }
            }
        }
    }
    gx
}
