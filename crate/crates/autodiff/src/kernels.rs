//! Raw numeric kernels on [`Tensor`]s. No graph bookkeeping happens here; the
//! differentiable wrappers live in `ops`.

use crate::error::{AutodiffError, Result};
use crate::tensor::{strides, Tensor};

/// `op(a) · op(b)` where `op` optionally transposes a rank-2 tensor.
pub fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    let (rsa, csa) = if trans_a { (1, ac) } else { (ac, 1) };
    let (rsb, csb) = if trans_b { (1, bc) } else { (bc, 1) };
    gemm(m, k, n, a.data(), rsa, csa, b.data(), rsb, csb, &mut out, n, 1, false);
    Tensor::new(&[m, n], out)
}

/// `c (+)= a · b` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the caller guarantees that every (row, col) index reachable
    // through the given dimensions and strides lies inside each slice.
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
            rsc as isize,
            csc as isize,
        );
    }
}

fn check_broadcastable(op: &'static str, small: &[usize], big: &[usize]) -> Result<()> {
    let ok = small.len() == big.len()
        && small
            .iter()
            .zip(big)
            .all(|(&s, &b)| s == b || s == 1);
    if ok {
        Ok(())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: small.to_vec(),
            rhs: big.to_vec(),
        })
    }
}

/// Expands size-1 axes of `t` to `shape` (same rank).
pub fn broadcast_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    check_broadcastable("broadcast_to", t.shape(), shape)?;
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let src_strides: Vec<usize> = strides(t.shape())
        .into_iter()
        .zip(t.shape())
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let src = t.data();
    let last = shape.len() - 1;
    let inner = shape[last];
    let inner_stride = src_strides[last];
    for _ in 0..n / inner.max(1) {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        // odometer over all axes except the last
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(shape, out)
}

/// Sums `t` over the axes where `shape` has size 1 (adjoint of [`broadcast_to`]).
pub fn sum_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    check_broadcastable("sum_to", shape, t.shape())?;
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let dst_strides: Vec<usize> = strides(shape)
        .into_iter()
        .zip(shape)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect();
    let big = t.shape();
    let mut out = vec![0.0; shape.iter().product()];
    let mut idx = vec![0usize; big.len()];
    let src = t.data();
    let last = big.len() - 1;
    let inner = big[last];
    let inner_stride = dst_strides[last];
    let mut pos = 0;
    for _ in 0..src.len() / inner.max(1) {
        let base: usize = idx.iter().zip(&dst_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out[base + j * inner_stride] += src[pos];
            pos += 1;
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < big[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(shape, out)
}

/// Convolution geometry shared by the forward op and both of its adjoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn output_len(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel || (padded - kernel) % self.stride != 0 {
            return Err(AutodiffError::NonIntegralOutput {
                op: "conv2d",
                input,
                kernel,
                stride: self.stride,
                padding: self.padding,
            });
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x_shape: &[usize], k_shape: &[usize], geom: ConvGeom) -> Result<ConvDims> {
    if x_shape.len() != 4 || k_shape.len() != 4 || x_shape[1] != k_shape[1] {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv2d",
            lhs: x_shape.to_vec(),
            rhs: k_shape.to_vec(),
        });
    }
    let ho = geom.output_len(x_shape[2], k_shape[2])?;
    let wo = geom.output_len(x_shape[3], k_shape[3])?;
    Ok(ConvDims {
        b: x_shape[0],
        c: x_shape[1],
        h: x_shape[2],
        w: x_shape[3],
        co: k_shape[0],
        kh: k_shape[2],
        kw: k_shape[3],
        ho,
        wo,
    })
}

/// Output columns `lo..hi` whose stride-1 tap `kj` lands inside the input row.
fn unit_stride_span(kj: usize, padding: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kj).min(wo);
    let hi = (w + padding).saturating_sub(kj).min(wo).max(lo);
    (lo, hi)
}

fn im2col(x: &[f64], d: &ConvDims, geom: ConvGeom, cols: &mut [f64]) {
    let hw_out = d.ho * d.wo;
    let p = geom.padding as isize;
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oi in 0..d.ho {
                    let ii = (oi * geom.stride + ki) as isize - p;
                    let dst_row = &mut dst[oi * d.wo..(oi + 1) * d.wo];
                    if ii < 0 || ii >= d.h as isize {
                        dst_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &x[(c * d.h + ii as usize) * d.w..][..d.w];
                    if geom.stride == 1 {
                        let (lo, hi) = unit_stride_span(kj, geom.padding, d.w, d.wo);
                        dst_row[..lo].iter_mut().for_each(|v| *v = 0.0);
                        dst_row[hi..].iter_mut().for_each(|v| *v = 0.0);
                        if lo < hi {
                            let off = lo + kj - geom.padding;
                            dst_row[lo..hi].copy_from_slice(&src_row[off..off + hi - lo]);
                        }
                        continue;
                    }
                    for (oj, v) in dst_row.iter_mut().enumerate() {
                        let jj = (oj * geom.stride + kj) as isize - p;
                        *v = if jj < 0 || jj >= d.w as isize {
                            0.0
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, geom: ConvGeom, x: &mut [f64]) {
    let hw_out = d.ho * d.wo;
    let p = geom.padding as isize;
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oi in 0..d.ho {
                    let ii = (oi * geom.stride + ki) as isize - p;
                    if ii < 0 || ii >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut x[(c * d.h + ii as usize) * d.w..][..d.w];
                    if geom.stride == 1 {
                        let (lo, hi) = unit_stride_span(kj, geom.padding, d.w, d.wo);
                        if lo < hi {
                            let off = lo + kj - geom.padding;
                            for (t, v) in dst_row[off..off + hi - lo].iter_mut().zip(&src[oi * d.wo + lo..oi * d.wo + hi]) {
                                *t += v;
                            }
                        }
                        continue;
                    }
                    for oj in 0..d.wo {
                        let jj = (oj * geom.stride + kj) as isize - p;
                        if jj >= 0 && jj < d.w as isize {
                            dst_row[jj as usize] += src[oi * d.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(d: &ConvDims, geom: ConvGeom) -> bool {
    d.kh == 1 && d.kw == 1 && geom.stride == 1 && geom.padding == 0
}

/// Cross-correlation of `x` `[B,C,H,W]` with `k` `[C',C,kh,kw]`.
pub fn conv2d(x: &Tensor, k: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let d = conv_dims(x.shape(), k.shape(), geom)?;
    let ckk = d.c * d.kh * d.kw;
    let hw_out = d.ho * d.wo;
    let in_len = d.c * d.h * d.w;
    let out_len = d.co * hw_out;
    let mut out = vec![0.0; d.b * out_len];
    let pointwise = is_pointwise(&d, geom);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; ckk * hw_out] };
    for b in 0..d.b {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let colsb: &[f64] = if pointwise {
            xb
        } else {
            im2col(xb, &d, geom, &mut cols);
            &cols
        };
        gemm(
            d.co,
            ckk,
            hw_out,
            k.data(),
            ckk,
            1,
            colsb,
            hw_out,
            1,
            &mut out[b * out_len..(b + 1) * out_len],
            hw_out,
            1,
            false,
        );
    }
    Tensor::new(&[d.b, d.co, d.ho, d.wo], out)
}

/// Gradient of `conv2d` with respect to its input, given output gradient `gy`.
pub fn conv2d_grad_input(
    gy: &Tensor,
    k: &Tensor,
    x_shape: &[usize],
    geom: ConvGeom,
) -> Result<Tensor> {
    let d = conv_dims(x_shape, k.shape(), geom)?;
    if gy.shape() != [d.b, d.co, d.ho, d.wo] {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv2d_grad_input",
            lhs: gy.shape().to_vec(),
            rhs: vec![d.b, d.co, d.ho, d.wo],
        });
    }
    let ckk = d.c * d.kh * d.kw;
    let hw_out = d.ho * d.wo;
    let in_len = d.c * d.h * d.w;
    let out_len = d.co * hw_out;
    let mut gx = vec![0.0; d.b * in_len];
    let pointwise = is_pointwise(&d, geom);
    let mut cols = vec![0.0; if pointwise { 0 } else { ckk * hw_out }];
    for b in 0..d.b {
        let gyb = &gy.data()[b * out_len..(b + 1) * out_len];
        let gxb = &mut gx[b * in_len..(b + 1) * in_len];
        if pointwise {
            gemm(d.c, d.co, hw_out, k.data(), 1, ckk, gyb, hw_out, 1, gxb, hw_out, 1, false);
        } else {
            gemm(ckk, d.co, hw_out, k.data(), 1, ckk, gyb, hw_out, 1, &mut cols, hw_out, 1, false);
            col2im(&cols, &d, geom, gxb);
        }
    }
    Tensor::new(x_shape, gx)
}

/// Gradient of `conv2d` with respect to its kernel, given output gradient `gy`.
pub fn conv2d_grad_kernel(
    x: &Tensor,
    gy: &Tensor,
    k_shape: &[usize],
    geom: ConvGeom,
) -> Result<Tensor> {
    let d = conv_dims(x.shape(), k_shape, geom)?;
    if gy.shape() != [d.b, d.co, d.ho, d.wo] {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv2d_grad_kernel",
            lhs: gy.shape().to_vec(),
            rhs: vec![d.b, d.co, d.ho, d.wo],
        });
    }
    let ckk = d.c * d.kh * d.kw;
    let hw_out = d.ho * d.wo;
    let in_len = d.c * d.h * d.w;
    let out_len = d.co * hw_out;
    let mut gk = vec![0.0; d.co * ckk];
    let pointwise = is_pointwise(&d, geom);
    let mut cols = vec![0.0; if pointwise { 0 } else { ckk * hw_out }];
    for b in 0..d.b {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let colsb: &[f64] = if pointwise {
            xb
        } else {
            im2col(xb, &d, geom, &mut cols);
            &cols
        };
        let gyb = &gy.data()[b * out_len..(b + 1) * out_len];
        gemm(d.co, hw_out, ckk, gyb, hw_out, 1, colsb, 1, hw_out, &mut gk, ckk, 1, true);
    }
    Tensor::new(k_shape, gk)
}

/// Per-output-index source taps for one axis of an align-corners bilinear resize.
fn interp_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..output)
        .map(|o| {
            let src = if output > 1 {
                o as f64 * (input - 1) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Align-corners bilinear resize of `[B,C,H,W]` to `[B,C,out_h,out_w]`.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || out_h == 0 || out_w == 0 || s[2] == 0 || s[3] == 0 {
        return Err(AutodiffError::InvalidShape {
            op: "bilinear_resize",
            shape: s.to_vec(),
            reason: format!("cannot resize to {out_h}x{out_w}"),
        });
    }
    let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let th = interp_taps(h, out_h);
    let tw = interp_taps(w, out_w);
    let mut out = vec![0.0; bc * out_h * out_w];
    for plane in 0..bc {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oi, &(i0, i1, a0, a1)) in th.iter().enumerate() {
            for (oj, &(j0, j1, b0, b1)) in tw.iter().enumerate() {
                dst[oi * out_w + oj] = a0 * (b0 * src[i0 * w + j0] + b1 * src[i0 * w + j1])
                    + a1 * (b0 * src[i1 * w + j0] + b1 * src[i1 * w + j1]);
            }
        }
    }
    Tensor::new(&[s[0], s[1], out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`]: maps `[B,C,out_h,out_w]` back to `[B,C,in_h,in_w]`.
pub fn bilinear_resize_adjoint(g: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let s = g.shape();
    if s.len() != 4 || in_h == 0 || in_w == 0 {
        return Err(AutodiffError::InvalidShape {
            op: "bilinear_resize_adjoint",
            shape: s.to_vec(),
            reason: format!("cannot map back to {in_h}x{in_w}"),
        });
    }
    let (bc, out_h, out_w) = (s[0] * s[1], s[2], s[3]);
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(g.clone());
    }
    let th = interp_taps(in_h, out_h);
    let tw = interp_taps(in_w, out_w);
    let mut out = vec![0.0; bc * in_h * in_w];
    for plane in 0..bc {
        let src = &g.data()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let dst = &mut out[plane * in_h * in_w..(plane + 1) * in_h * in_w];
        for (oi, &(i0, i1, a0, a1)) in th.iter().enumerate() {
            for (oj, &(j0, j1, b0, b1)) in tw.iter().enumerate() {
                let v = src[oi * out_w + oj];
                dst[i0 * in_w + j0] += a0 * b0 * v;
                dst[i0 * in_w + j1] += a0 * b1 * v;
                dst[i1 * in_w + j0] += a1 * b0 * v;
                dst[i1 * in_w + j1] += a1 * b1 * v;
            }
        }
    }
    Tensor::new(&[s[0], s[1], in_h, in_w], out)
}

/// 2×2 average pooling with stride 2; trailing odd rows/columns are dropped.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(AutodiffError::InvalidShape {
            op: "avg_pool2",
            shape: s.to_vec(),
            reason: "need rank 4 with H,W >= 2".into(),
        });
    }
    let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; bc * oh * ow];
    for plane in 0..bc {
        let src = &x.data()[plane * h * w..];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                dst[i * ow + j] = 0.25 * (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]);
            }
        }
    }
    Tensor::new(&[s[0], s[1], oh, ow], out)
}

/// Adjoint of [`avg_pool2`] back to an input of spatial size `h × w`.
pub fn avg_pool2_adjoint(g: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = g.shape();
    if s.len() != 4 || s[2] != h / 2 || s[3] != w / 2 {
        return Err(AutodiffError::InvalidShape {
            op: "avg_pool2_adjoint",
            shape: s.to_vec(),
            reason: format!("does not pool from {h}x{w}"),
        });
    }
    let (bc, oh, ow) = (s[0] * s[1], s[2], s[3]);
    let mut out = vec![0.0; bc * h * w];
    for plane in 0..bc {
        let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let v = 0.25 * src[i * ow + j];
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                dst[r0] += v;
                dst[r0 + 1] += v;
                dst[r1] += v;
                dst[r1 + 1] += v;
            }
        }
    }
    Tensor::new(&[s[0], s[1], h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_transposes_agree() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
        let ab = matmul(&a, &b, false, false).unwrap();
        assert_eq!(ab.data(), &[4., 5., 10., 11.]);
        let at = t(&[3, 2], &[1., 4., 2., 5., 3., 6.]);
        let bt = t(&[2, 3], &[1., 0., 1., 0., 1., 1.]);
        assert_eq!(matmul(&at, &bt, true, true).unwrap(), ab);
        assert!(matmul(&a, &a, false, false).is_err());
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint() {
        let x = t(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.]);
        let y = broadcast_to(&x, &[2, 4, 3]).unwrap();
        assert_eq!(&y.data()[..6], &[1., 2., 3., 1., 2., 3.]);
        let g = Tensor::from_fn(&[2, 4, 3], |i| i as f64);
        // <broadcast(x), g> == <x, sum_to(g)>
        let lhs = y.dot(&g).unwrap();
        let rhs = x.dot(&sum_to(&g, &[2, 1, 3]).unwrap()).unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn conv_adjoint_identities() {
        let geom = ConvGeom { stride: 2, padding: 1 };
        let x = Tensor::from_fn(&[2, 3, 5, 5], |i| ((i * 7) % 11) as f64 - 5.0);
        let k = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 5) % 7) as f64 - 3.0);
        let y = conv2d(&x, &k, geom).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        let g = Tensor::from_fn(y.shape(), |i| ((i * 3) % 5) as f64 - 2.0);
        let yg = y.dot(&g).unwrap();
        let gx = conv2d_grad_input(&g, &k, x.shape(), geom).unwrap();
        let gk = conv2d_grad_kernel(&x, &g, k.shape(), geom).unwrap();
        assert_eq!(x.dot(&gx).unwrap(), yg);
        assert_eq!(k.dot(&gk).unwrap(), yg);
    }

    fn direct_conv(x: &Tensor, k: &Tensor, geom: ConvGeom) -> Vec<f64> {
        let (xs, ks) = (x.shape(), k.shape());
        let ho = geom.output_len(xs[2], ks[2]).unwrap();
        let wo = geom.output_len(xs[3], ks[3]).unwrap();
        let mut out = Vec::new();
        for b in 0..xs[0] {
            for o in 0..ks[0] {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..xs[1] {
                            for ki in 0..ks[2] {
                                for kj in 0..ks[3] {
                                    let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
                                    let jj = (oj * geom.stride + kj) as isize - geom.padding as isize;
                                    if ii < 0 || jj < 0 || ii >= xs[2] as isize || jj >= xs[3] as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * xs[1] + c) * xs[2] + ii as usize) * xs[3] + jj as usize];
                                    acc += xv * k.data()[((o * ks[1] + c) * ks[2] + ki) * ks[3] + kj];
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (stride, padding, ksz, h, w) in [(1, 1, 3, 5, 4), (1, 0, 3, 4, 6), (1, 2, 3, 3, 3), (2, 1, 3, 5, 5), (1, 0, 1, 3, 2)] {
            let geom = ConvGeom { stride, padding };
            let x = Tensor::from_fn(&[2, 3, h, w], |i| ((i * 7) % 11) as f64 - 5.0);
            let k = Tensor::from_fn(&[2, 3, ksz, ksz], |i| ((i * 5) % 7) as f64 - 3.0);
            let y = conv2d(&x, &k, geom).unwrap();
            assert_eq!(y.data(), &direct_conv(&x, &k, geom)[..]);
            let g = Tensor::from_fn(y.shape(), |i| ((i * 3) % 5) as f64 - 2.0);
            let yg = y.dot(&g).unwrap();
            assert_eq!(x.dot(&conv2d_grad_input(&g, &k, x.shape(), geom).unwrap()).unwrap(), yg);
            assert_eq!(k.dot(&conv2d_grad_kernel(&x, &g, k.shape(), geom).unwrap()).unwrap(), yg);
        }
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let geom = ConvGeom { stride: 2, padding: 0 };
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, geom),
            Err(AutodiffError::NonIntegralOutput { .. })
        ));
    }

    #[test]
    fn resize_adjoint_identity() {
        let x = Tensor::from_fn(&[1, 2, 3, 4], |i| (i as f64).sin());
        let y = bilinear_resize(&x, 5, 2).unwrap();
        let g = Tensor::from_fn(y.shape(), |i| (i as f64).cos());
        let lhs = y.dot(&g).unwrap();
        let rhs = x.dot(&bilinear_resize_adjoint(&g, 3, 4).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_adjoint_identity() {
        let x = Tensor::from_fn(&[1, 2, 4, 6], |i| (i as f64).sin());
        let y = avg_pool2(&x).unwrap();
        let g = Tensor::from_fn(y.shape(), |i| (i as f64).cos());
        let lhs = y.dot(&g).unwrap();
        let rhs = x.dot(&avg_pool2_adjoint(&g, 4, 6).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
