//! 2-D convolution kernels (NCHW, square kernels) lowered to gemm via im2col.

use serde::{Deserialize, Serialize};

use crate::scalar::{matmul, MatRef, Scalar};
use crate::tensor::Tensor;
use crate::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        Self { kernel, stride, padding, dilation }
    }

    /// Output length of a convolution over an axis of length `len`.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span || self.stride == 0 {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }

    /// Output length of the transposed convolution over an axis of length `len`.
    pub fn transposed_out_len(&self, len: usize, output_padding: usize) -> Option<usize> {
        let full = (len.checked_sub(1)?) * self.stride + self.dilation * (self.kernel - 1) + 1 + output_padding;
        full.checked_sub(2 * self.padding).filter(|&v| v > 0)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = g.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    let seg = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let k = g.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_weight<T: Scalar>(w: &Tensor<T>, k: usize) -> Result<(usize, usize), NnError> {
    match w.shape() {
        &[a, b, kh, kw] if kh == k && kw == k => Ok((a, b)),
        s => Err(NnError::Shape(format!("weight shape {:?} does not match kernel {}", s, k))),
    }
}

/// Convolution. `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Result<Tensor<T>, NnError> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc) = check_weight(w, g.kernel)?;
    if wc != c {
        return Err(NnError::Shape(format!("conv2d: input has {} channels, weight expects {}", c, wc)));
    }
    let oh = g.out_len(h).ok_or_else(|| NnError::Shape(format!("conv2d: input height {} too small", h)))?;
    let ow = g.out_len(wd).ok_or_else(|| NnError::Shape(format!("conv2d: input width {} too small", wd)))?;
    let kk = c * g.kernel * g.kernel;
    let p = oh * ow;
    let mut cols = vec![T::zero(); kk * p];
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let in_per = c * h * wd;
    let out_per = o * p;
    for s in 0..n {
        im2col(&x.data()[s * in_per..(s + 1) * in_per], c, h, wd, g, oh, ow, &mut cols);
        let dst = &mut out.data_mut()[s * out_per..(s + 1) * out_per];
        matmul(MatRef::row_major(w.data(), o, kk), MatRef::row_major(&cols, kk, p), dst, false);
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Ok(out)
}

/// Input, weight and bias gradients of a convolution.
pub type ConvGrads<T> = (Tensor<T>, Tensor<T>, Tensor<T>);

/// Gradients of [`conv2d`] given the upstream gradient `dy`: `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeom,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>, NnError> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, _) = check_weight(w, g.kernel)?;
    let (_, _, oh, ow) = dy.dims4()?;
    let kk = c * g.kernel * g.kernel;
    let p = oh * ow;
    let mut cols = vec![T::zero(); kk * p];
    let mut dcols = vec![T::zero(); kk * p];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[o]);
    let in_per = c * h * wd;
    let out_per = o * p;
    for s in 0..n {
        let dys = &dy.data()[s * out_per..(s + 1) * out_per];
        im2col(&x.data()[s * in_per..(s + 1) * in_per], c, h, wd, g, oh, ow, &mut cols);
        matmul(MatRef::row_major(dys, o, p), MatRef::transposed(&cols, kk, p), dw.data_mut(), true);
        matmul(MatRef::transposed(w.data(), o, kk), MatRef::row_major(dys, o, p), &mut dcols, false);
        col2im(&dcols, c, h, wd, g, oh, ow, &mut dx.data_mut()[s * in_per..(s + 1) * in_per]);
        for (oc, chunk) in dys.chunks(p).enumerate() {
            let acc = chunk.iter().fold(T::zero(), |a, &v| a + v);
            db.data_mut()[oc] = db.data()[oc] + acc;
        }
    }
    Ok((dx, dw, db))
}

/// Transposed convolution. `x: [N, Cin, H, W]`, `w: [Cin, Cout, k, k]`, `b: [Cout]`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: ConvGeom,
    output_padding: usize,
) -> Result<Tensor<T>, NnError> {
    let (n, cin, h, wd) = x.dims4()?;
    let (wcin, cout) = check_weight(w, g.kernel)?;
    if wcin != cin {
        return Err(NnError::Shape(format!(
            "conv_transpose2d: input has {} channels, weight expects {}",
            cin, wcin
        )));
    }
    let oh = g
        .transposed_out_len(h, output_padding)
        .ok_or_else(|| NnError::Shape("conv_transpose2d: empty output".into()))?;
    let ow = g
        .transposed_out_len(wd, output_padding)
        .ok_or_else(|| NnError::Shape("conv_transpose2d: empty output".into()))?;
    let kk = cout * g.kernel * g.kernel;
    let p_in = h * wd;
    let mut cols = vec![T::zero(); kk * p_in];
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let in_per = cin * p_in;
    let out_per = cout * oh * ow;
    for s in 0..n {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        matmul(MatRef::transposed(w.data(), cin, kk), MatRef::row_major(xs, cin, p_in), &mut cols, false);
        let dst = &mut out.data_mut()[s * out_per..(s + 1) * out_per];
        col2im(&cols, cout, oh, ow, g, h, wd, dst);
        if let Some(b) = b {
            for (oc, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv_transpose2d`]: `(dx, dw, db)`.
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeom,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>, NnError> {
    let (n, cin, h, wd) = x.dims4()?;
    let (_, cout) = check_weight(w, g.kernel)?;
    let (_, _, oh, ow) = dy.dims4()?;
    let kk = cout * g.kernel * g.kernel;
    let p_in = h * wd;
    let mut dcols = vec![T::zero(); kk * p_in];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let in_per = cin * p_in;
    let out_per = cout * oh * ow;
    for s in 0..n {
        let dys = &dy.data()[s * out_per..(s + 1) * out_per];
        im2col(dys, cout, oh, ow, g, h, wd, &mut dcols);
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        matmul(
            MatRef::row_major(w.data(), cin, kk),
            MatRef::row_major(&dcols, kk, p_in),
            &mut dx.data_mut()[s * in_per..(s + 1) * in_per],
            false,
        );
        matmul(MatRef::row_major(xs, cin, p_in), MatRef::transposed(&dcols, kk, p_in), dw.data_mut(), true);
        for (oc, chunk) in dys.chunks(oh * ow).enumerate() {
            let acc = chunk.iter().fold(T::zero(), |a, &v| a + v);
            db.data_mut()[oc] = db.data()[oc] + acc;
        }
    }
    Ok((dx, dw, db))
}
