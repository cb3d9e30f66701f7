//! Spatial kernels: convolution, deformable convolution, bilinear sampling,
//! RoIAlign, pooling and resampling.
//!
//! Conventions:
//! - feature maps are `[C, H, W]` row-major;
//! - `bilinear_sample` places pixel centers at integer coordinates and treats
//!   everything outside the map as zero;
//! - `roi_align` follows the usual detector convention instead: sample points
//!   up to one pixel outside the map clamp to the border, anything further
//!   contributes zero.

use super::gemm_into;
use crate::scalar::Scalar;
use crate::tape::{acc_slice, Buf, Result, Tape, Tensor, TensorError};

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(TensorError::dim(format!(
            "conv kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Scatter-free im2col: `col[(ci*k*k + u*k + v), (i*ow + j)]`.
fn im2col<S: Scalar>(
    x: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    let spatial = oh * ow;
    for ci in 0..c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for u in 0..k {
            for v in 0..k {
                let row = &mut col[(ci * k * k + u * k + v) * spatial..][..spatial];
                for i in 0..oh {
                    let y = (i * stride + u) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        for cell in &mut row[i * ow..(i + 1) * ow] {
                            *cell = S::ZERO;
                        }
                        continue;
                    }
                    let src = &plane[y as usize * w..(y as usize + 1) * w];
                    for j in 0..ow {
                        let xcol = (j * stride + v) as isize - pad as isize;
                        row[i * ow + j] = if xcol < 0 || xcol >= w as isize {
                            S::ZERO
                        } else {
                            src[xcol as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_acc<S: Scalar>(
    dcol: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [S],
) {
    let spatial = oh * ow;
    for ci in 0..c_in {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for u in 0..k {
            for v in 0..k {
                let row = &dcol[(ci * k * k + u * k + v) * spatial..][..spatial];
                for i in 0..oh {
                    let y = (i * stride + u) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * w..(y as usize + 1) * w];
                    for j in 0..ow {
                        let xcol = (j * stride + v) as isize - pad as isize;
                        if xcol >= 0 && xcol < w as isize {
                            dst[xcol as usize] += row[i * ow + j];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear read with zero outside; returns value and the 4 corner taps
/// `(index, weight, dw/du, dw/dv)` for gradient work.
#[inline]
fn bilin_taps<S: Scalar>(
    plane_h: usize,
    plane_w: usize,
    u: f64,
    v: f64,
) -> ([(isize, isize, f64, f64, f64); 4], usize) {
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    let (u0, v0) = (u0 as isize, v0 as isize);
    let mut taps = [(0isize, 0isize, 0.0, 0.0, 0.0); 4];
    let mut n = 0;
    // (du weight sign, dv weight sign) per corner of the unit cell
    let corners = [
        (u0, v0, (1.0 - fu) * (1.0 - fv), -(1.0 - fv), -(1.0 - fu)),
        (u0 + 1, v0, fu * (1.0 - fv), 1.0 - fv, -fu),
        (u0, v0 + 1, (1.0 - fu) * fv, -fv, 1.0 - fu),
        (u0 + 1, v0 + 1, fu * fv, fv, fu),
    ];
    for (cu, cv, wgt, dwu, dwv) in corners {
        if cu >= 0 && cu < plane_w as isize && cv >= 0 && cv < plane_h as isize {
            taps[n] = (cu, cv, wgt, dwu, dwv);
            n += 1;
        }
    }
    (taps, n)
}

impl<S: Scalar> Tape<S> {
    /// 2-d convolution with zero padding. `x: [C_in, H, W]`,
    /// `w: [C_out, C_in, k, k]`, odd `k`.
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(TensorError::dim(format!("conv2d: x {xs:?}, w {ws:?}")));
        }
        let k = ws[2];
        if k % 2 == 0 {
            return Err(TensorError::invalid(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d stride must be positive"));
        }
        let (c_in, h, wdt) = (xs[0], xs[1], xs[2]);
        let c_out = ws[0];
        let oh = conv_out(h, k, stride, pad)?;
        let ow = conv_out(wdt, k, stride, pad)?;
        let spatial = oh * ow;
        let ck2 = c_in * k * k;

        let mut col = vec![S::ZERO; ck2 * spatial];
        im2col(self.data(x), c_in, h, wdt, k, stride, pad, oh, ow, &mut col);
        let mut out = vec![S::ZERO; c_out * spatial];
        gemm_into(c_out, ck2, spatial, S::ONE, self.data(w), ck2, false, &col, spatial, false, S::ZERO, &mut out);

        let (nx, nw) = (self.needs_grad(x), self.needs_grad(w));
        self.push_op(Buf::new(vec![c_out, oh, ow], out), nx || nw, "conv2d", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            // recompute col rather than saving it
            let xd = &ctx.vals[x.idx()].data;
            let mut col = vec![S::ZERO; ck2 * spatial];
            im2col(xd, c_in, h, wdt, k, stride, pad, oh, ow, &mut col);
            if nw {
                let acc = acc_slice(ctx.grads, w, c_out * ck2);
                gemm_into(c_out, spatial, ck2, S::ONE, &g, spatial, false, &col, spatial, true, S::ONE, acc);
            }
            if nx {
                let wd = &ctx.vals[w.idx()].data;
                let mut dcol = vec![S::ZERO; ck2 * spatial];
                gemm_into(ck2, c_out, spatial, S::ONE, wd, ck2, true, &g, spatial, false, S::ZERO, &mut dcol);
                let acc = acc_slice(ctx.grads, x, c_in * h * wdt);
                col2im_acc(&dcol, c_in, h, wdt, k, stride, pad, oh, ow, acc);
            }
        })
    }

    /// Deformable convolution: every kernel tap is sampled at its base
    /// location plus a learned offset. `offsets: [2*k*k, H', W']`, channel
    /// `2t` holding the y shift and `2t+1` the x shift of tap `t`. Gradients
    /// flow to the input, the weights and the offsets.
    pub fn deformable_conv2d(
        &mut self,
        x: Tensor,
        w: Tensor,
        offsets: Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(TensorError::dim(format!("deformable_conv2d: x {xs:?}, w {ws:?}")));
        }
        let k = ws[2];
        if k % 2 == 0 {
            return Err(TensorError::invalid(format!("deformable kernel size {k} must be odd")));
        }
        let (c_in, h, wdt) = (xs[0], xs[1], xs[2]);
        let c_out = ws[0];
        let oh = conv_out(h, k, stride, pad)?;
        let ow = conv_out(wdt, k, stride, pad)?;
        if self.shape(offsets) != [2 * k * k, oh, ow] {
            return Err(TensorError::dim(format!(
                "deformable offsets {:?}, expected [{}, {oh}, {ow}]",
                self.shape(offsets),
                2 * k * k
            )));
        }
        let spatial = oh * ow;
        let ck2 = c_in * k * k;

        let build_col = move |xd: &[S], od: &[S]| -> Vec<S> {
            let mut col = vec![S::ZERO; ck2 * spatial];
            for t in 0..k * k {
                let (u_tap, v_tap) = (t / k, t % k);
                for i in 0..oh {
                    for j in 0..ow {
                        let dy = od[(2 * t) * spatial + i * ow + j].to_f64();
                        let dx = od[(2 * t + 1) * spatial + i * ow + j].to_f64();
                        let py = (i * stride + u_tap) as f64 - pad as f64 + dy;
                        let px = (j * stride + v_tap) as f64 - pad as f64 + dx;
                        let (taps, ntap) = bilin_taps::<S>(h, wdt, px, py);
                        for ci in 0..c_in {
                            let plane = &xd[ci * h * wdt..(ci + 1) * h * wdt];
                            let mut acc = S::ZERO;
                            for &(cu, cv, wgt, _, _) in &taps[..ntap] {
                                acc += S::from_f64(wgt) * plane[cv as usize * wdt + cu as usize];
                            }
                            col[(ci * k * k + t) * spatial + i * ow + j] = acc;
                        }
                    }
                }
            }
            col
        };

        let col = build_col(self.data(x), self.data(offsets));
        let mut out = vec![S::ZERO; c_out * spatial];
        gemm_into(c_out, ck2, spatial, S::ONE, self.data(w), ck2, false, &col, spatial, false, S::ZERO, &mut out);

        let (nx, nw, no) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(offsets));
        self.push_op(
            Buf::new(vec![c_out, oh, ow], out),
            nx || nw || no,
            "deformable_conv2d",
            move |ctx| {
                let Some(g) = ctx.take_out() else { return };
                let xd = &ctx.vals[x.idx()].data;
                let od = &ctx.vals[offsets.idx()].data;
                let wd = &ctx.vals[w.idx()].data;
                if nw {
                    let col = build_col(xd, od);
                    let acc = acc_slice(ctx.grads, w, c_out * ck2);
                    gemm_into(c_out, spatial, ck2, S::ONE, &g, spatial, false, &col, spatial, true, S::ONE, acc);
                }
                if !(nx || no) {
                    return;
                }
                let mut dcol = vec![S::ZERO; ck2 * spatial];
                gemm_into(ck2, c_out, spatial, S::ONE, wd, ck2, true, &g, spatial, false, S::ZERO, &mut dcol);
                let mut dx = if nx { vec![S::ZERO; c_in * h * wdt] } else { Vec::new() };
                let mut doff = if no { vec![S::ZERO; 2 * k * k * spatial] } else { Vec::new() };
                for t in 0..k * k {
                    let (u_tap, v_tap) = (t / k, t % k);
                    for i in 0..oh {
                        for j in 0..ow {
                            let dy = od[(2 * t) * spatial + i * ow + j].to_f64();
                            let dxo = od[(2 * t + 1) * spatial + i * ow + j].to_f64();
                            let py = (i * stride + u_tap) as f64 - pad as f64 + dy;
                            let px = (j * stride + v_tap) as f64 - pad as f64 + dxo;
                            let (taps, ntap) = bilin_taps::<S>(h, wdt, px, py);
                            let mut gy = S::ZERO;
                            let mut gx = S::ZERO;
                            for ci in 0..c_in {
                                let gc = dcol[(ci * k * k + t) * spatial + i * ow + j];
                                let plane = ci * h * wdt;
                                for &(cu, cv, wgt, dwu, dwv) in &taps[..ntap] {
                                    let pix = plane + cv as usize * wdt + cu as usize;
                                    if nx {
                                        dx[pix] += gc * S::from_f64(wgt);
                                    }
                                    if no {
                                        let xv = xd[pix];
                                        gx += gc * xv * S::from_f64(dwu);
                                        gy += gc * xv * S::from_f64(dwv);
                                    }
                                }
                            }
                            if no {
                                doff[(2 * t) * spatial + i * ow + j] += gy;
                                doff[(2 * t + 1) * spatial + i * ow + j] += gx;
                            }
                        }
                    }
                }
                if nx {
                    let acc = acc_slice(ctx.grads, x, c_in * h * wdt);
                    for (a, d) in acc.iter_mut().zip(&dx) {
                        *a += *d;
                    }
                }
                if no {
                    let acc = acc_slice(ctx.grads, offsets, 2 * k * k * spatial);
                    for (a, d) in acc.iter_mut().zip(&doff) {
                        *a += *d;
                    }
                }
            },
        )
    }

    /// Sample `x: [C, H, W]` at continuous points `[(u, v); P]` (u along
    /// width, v along height, pixel centers at integers). Out-of-map mass is
    /// zero. Differentiable in both the map and the points.
    pub fn bilinear_sample(&mut self, x: Tensor, points: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ps = self.shape(points).to_vec();
        if xs.len() != 3 || ps.len() != 2 || ps[1] != 2 {
            return Err(TensorError::dim(format!(
                "bilinear_sample: x {xs:?}, points {ps:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let p = ps[0];
        let pd = self.data(points);
        let xd = self.data(x);
        let mut out = vec![S::ZERO; c * p];
        for pi in 0..p {
            let u = pd[pi * 2].to_f64();
            let v = pd[pi * 2 + 1].to_f64();
            let (taps, ntap) = bilin_taps::<S>(h, w, u, v);
            for ci in 0..c {
                let plane = &xd[ci * h * w..(ci + 1) * h * w];
                let mut acc = S::ZERO;
                for &(cu, cv, wgt, _, _) in &taps[..ntap] {
                    acc += S::from_f64(wgt) * plane[cv as usize * w + cu as usize];
                }
                out[ci * p + pi] = acc;
            }
        }
        let (nx, np) = (self.needs_grad(x), self.needs_grad(points));
        self.push_op(Buf::new(vec![c, p], out), nx || np, "bilinear_sample", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let xd = &ctx.vals[x.idx()].data;
            let pd = &ctx.vals[points.idx()].data;
            let mut dx = if nx { vec![S::ZERO; c * h * w] } else { Vec::new() };
            let mut dp = if np { vec![S::ZERO; p * 2] } else { Vec::new() };
            for pi in 0..p {
                let u = pd[pi * 2].to_f64();
                let v = pd[pi * 2 + 1].to_f64();
                let (taps, ntap) = bilin_taps::<S>(h, w, u, v);
                for ci in 0..c {
                    let gi = g[ci * p + pi];
                    let plane = ci * h * w;
                    for &(cu, cv, wgt, dwu, dwv) in &taps[..ntap] {
                        let pix = plane + cv as usize * w + cu as usize;
                        if nx {
                            dx[pix] += gi * S::from_f64(wgt);
                        }
                        if np {
                            dp[pi * 2] += gi * xd[pix] * S::from_f64(dwu);
                            dp[pi * 2 + 1] += gi * xd[pix] * S::from_f64(dwv);
                        }
                    }
                }
            }
            if nx {
                let acc = acc_slice(ctx.grads, x, c * h * w);
                for (a, d) in acc.iter_mut().zip(&dx) {
                    *a += *d;
                }
            }
            if np {
                let acc = acc_slice(ctx.grads, points, p * 2);
                for (a, d) in acc.iter_mut().zip(&dp) {
                    *a += *d;
                }
            }
        })
    }

    /// RoIAlign over one box. The box is given in image pixels together with
    /// the map's stride; it is treated as a constant (no gradient to the box),
    /// while the map receives gradients. Each output bin averages
    /// `sampling^2` bilinear reads; degenerate boxes are expanded to 1e-3 px.
    pub fn roi_align(
        &mut self,
        map: Tensor,
        boxpx: [f64; 4],
        stride: f64,
        out_h: usize,
        out_w: usize,
        sampling: usize,
    ) -> Result<Tensor> {
        let xs = self.shape(map).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::dim(format!("roi_align on map {xs:?}")));
        }
        if out_h == 0 || out_w == 0 || sampling == 0 {
            return Err(TensorError::invalid("roi_align output/sampling must be positive"));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let [mut x1, mut y1, mut x2, mut y2] = boxpx;
        if x2 - x1 < 1e-3 {
            let cx = 0.5 * (x1 + x2);
            x1 = cx - 5e-4;
            x2 = cx + 5e-4;
        }
        if y2 - y1 < 1e-3 {
            let cy = 0.5 * (y1 + y2);
            y1 = cy - 5e-4;
            y2 = cy + 5e-4;
        }
        let scale = 1.0 / stride;
        let rx = x1 * scale - 0.5;
        let ry = y1 * scale - 0.5;
        let bw = (x2 - x1) * scale / out_w as f64;
        let bh = (y2 - y1) * scale / out_h as f64;
        let n = sampling;
        let inv = S::from_f64(1.0 / (n * n) as f64);

        // torchvision-style clamped bilinear read
        let read_taps = move |u: f64, v: f64| -> ([(usize, usize, f64); 4], usize) {
            let mut taps = [(0usize, 0usize, 0.0); 4];
            if v < -1.0 || v > h as f64 || u < -1.0 || u > w as f64 {
                return (taps, 0);
            }
            let v = v.max(0.0);
            let u = u.max(0.0);
            let mut v0 = v.floor() as usize;
            let mut u0 = u.floor() as usize;
            let (v1, vv) = if v0 >= h - 1 {
                v0 = h - 1;
                (h - 1, v0 as f64)
            } else {
                (v0 + 1, v)
            };
            let (u1, uu) = if u0 >= w - 1 {
                u0 = w - 1;
                (w - 1, u0 as f64)
            } else {
                (u0 + 1, u)
            };
            let fv = vv - v0 as f64;
            let fu = uu - u0 as f64;
            taps[0] = (v0, u0, (1.0 - fv) * (1.0 - fu));
            taps[1] = (v0, u1, (1.0 - fv) * fu);
            taps[2] = (v1, u0, fv * (1.0 - fu));
            taps[3] = (v1, u1, fv * fu);
            (taps, 4)
        };

        let xd = self.data(map);
        let mut out = vec![S::ZERO; c * out_h * out_w];
        for i in 0..out_h {
            for j in 0..out_w {
                for si in 0..n {
                    for sj in 0..n {
                        let v = ry + (i as f64 + (si as f64 + 0.5) / n as f64) * bh;
                        let u = rx + (j as f64 + (sj as f64 + 0.5) / n as f64) * bw;
                        let (taps, ntap) = read_taps(u, v);
                        for ci in 0..c {
                            let plane = &xd[ci * h * w..(ci + 1) * h * w];
                            let mut acc = S::ZERO;
                            for &(tv, tu, wgt) in &taps[..ntap] {
                                acc += S::from_f64(wgt) * plane[tv * w + tu];
                            }
                            out[ci * out_h * out_w + i * out_w + j] += acc * inv;
                        }
                    }
                }
            }
        }
        let needs = self.needs_grad(map);
        self.push_op(Buf::new(vec![c, out_h, out_w], out), needs, "roi_align", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let acc = acc_slice(ctx.grads, map, c * h * w);
            for i in 0..out_h {
                for j in 0..out_w {
                    for si in 0..n {
                        for sj in 0..n {
                            let v = ry + (i as f64 + (si as f64 + 0.5) / n as f64) * bh;
                            let u = rx + (j as f64 + (sj as f64 + 0.5) / n as f64) * bw;
                            let (taps, ntap) = read_taps(u, v);
                            for ci in 0..c {
                                let gi = g[ci * out_h * out_w + i * out_w + j] * inv;
                                for &(tv, tu, wgt) in &taps[..ntap] {
                                    acc[ci * h * w + tv * w + tu] += gi * S::from_f64(wgt);
                                }
                            }
                        }
                    }
                }
            }
        })
    }

    /// Average pooling over `s x s` blocks. Sizes that do not divide are
    /// handled by edge replication (clamped indices).
    pub fn avg_pool(&mut self, x: Tensor, s: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || s == 0 || xs[1] == 0 || xs[2] == 0 {
            return Err(TensorError::dim(format!("avg_pool({s}) on {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let oh = h.div_ceil(s);
        let ow = w.div_ceil(s);
        let inv = S::from_f64(1.0 / (s * s) as f64);
        let xd = self.data(x);
        let mut out = vec![S::ZERO; c * oh * ow];
        for ci in 0..c {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = S::ZERO;
                    for di in 0..s {
                        let y = (i * s + di).min(h - 1);
                        for dj in 0..s {
                            let xcol = (j * s + dj).min(w - 1);
                            acc += plane[y * w + xcol];
                        }
                    }
                    out[ci * oh * ow + i * ow + j] = acc * inv;
                }
            }
        }
        let needs = self.needs_grad(x);
        self.push_op(Buf::new(vec![c, oh, ow], out), needs, "avg_pool", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let acc = acc_slice(ctx.grads, x, c * h * w);
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let gi = g[ci * oh * ow + i * ow + j] * inv;
                        for di in 0..s {
                            let y = (i * s + di).min(h - 1);
                            for dj in 0..s {
                                let xcol = (j * s + dj).min(w - 1);
                                acc[ci * h * w + y * w + xcol] += gi;
                            }
                        }
                    }
                }
            }
        })
    }

    /// Bilinear 2x upsampling (half-pixel centers, borders replicate).
    pub fn upsample2x(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 || xs[2] == 0 {
            return Err(TensorError::dim(format!("upsample2x on {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (2 * h, 2 * w);
        // per-axis source taps are the same for every row/column pair
        let taps_1d = |n: usize, i: usize| -> (usize, usize, f64) {
            let src = (i as f64 + 0.5) / 2.0 - 0.5;
            let src = src.clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        };
        let xd = self.data(x);
        let mut out = vec![S::ZERO; c * oh * ow];
        for ci in 0..c {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            for i in 0..oh {
                let (y0, y1, fy) = taps_1d(h, i);
                for j in 0..ow {
                    let (x0, x1, fx) = taps_1d(w, j);
                    let v00 = plane[y0 * w + x0].to_f64();
                    let v01 = plane[y0 * w + x1].to_f64();
                    let v10 = plane[y1 * w + x0].to_f64();
                    let v11 = plane[y1 * w + x1].to_f64();
                    let val = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                    out[ci * oh * ow + i * ow + j] = S::from_f64(val);
                }
            }
        }
        let needs = self.needs_grad(x);
        self.push_op(Buf::new(vec![c, oh, ow], out), needs, "upsample2x", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let acc = acc_slice(ctx.grads, x, c * h * w);
            for ci in 0..c {
                for i in 0..oh {
                    let (y0, y1, fy) = taps_1d(h, i);
                    for j in 0..ow {
                        let (x0, x1, fx) = taps_1d(w, j);
                        let gi = g[ci * oh * ow + i * ow + j];
                        let base = ci * h * w;
                        acc[base + y0 * w + x0] += gi * S::from_f64((1.0 - fy) * (1.0 - fx));
                        acc[base + y0 * w + x1] += gi * S::from_f64((1.0 - fy) * fx);
                        acc[base + y1 * w + x0] += gi * S::from_f64(fy * (1.0 - fx));
                        acc[base + y1 * w + x1] += gi * S::from_f64(fy * fx);
                    }
                }
            }
        })
    }

    /// Global average pool: `[C, H, W] -> [C]`.
    pub fn spatial_mean(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::dim(format!("spatial_mean on {xs:?}")));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let inv = S::from_f64(1.0 / hw as f64);
        let xd = self.data(x);
        let mut out = vec![S::ZERO; c];
        for ci in 0..c {
            let mut s = S::ZERO;
            for &v in &xd[ci * hw..(ci + 1) * hw] {
                s += v;
            }
            out[ci] = s * inv;
        }
        let needs = self.needs_grad(x);
        self.push_op(Buf::new(vec![c], out), needs, "spatial_mean", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            let acc = acc_slice(ctx.grads, x, c * hw);
            for ci in 0..c {
                let gi = g[ci] * inv;
                for a in &mut acc[ci * hw..(ci + 1) * hw] {
                    *a += gi;
                }
            }
        })
    }

    /// Rearrange `b x b` blocks into channels:
    /// `[C, H, W] -> [C*b*b, H/b, W/b]` with out channel `c*b*b + di*b + dj`.
    pub fn space_to_depth(&mut self, x: Tensor, b: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || b == 0 || xs[1] % b != 0 || xs[2] % b != 0 {
            return Err(TensorError::dim(format!("space_to_depth({b}) on {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / b, w / b);
        let xd = self.data(x);
        let mut out = vec![S::ZERO; c * h * w];
        for ci in 0..c {
            for di in 0..b {
                for dj in 0..b {
                    let oc = ci * b * b + di * b + dj;
                    for i in 0..oh {
                        for j in 0..ow {
                            out[oc * oh * ow + i * ow + j] =
                                xd[ci * h * w + (i * b + di) * w + (j * b + dj)];
                        }
                    }
                }
            }
        }
        let needs = self.needs_grad(x);
        self.push_op(
            Buf::new(vec![c * b * b, oh, ow], out),
            needs,
            "space_to_depth",
            move |ctx| {
                let Some(g) = ctx.take_out() else { return };
                let acc = acc_slice(ctx.grads, x, c * h * w);
                for ci in 0..c {
                    for di in 0..b {
                        for dj in 0..b {
                            let oc = ci * b * b + di * b + dj;
                            for i in 0..oh {
                                for j in 0..ow {
                                    acc[ci * h * w + (i * b + di) * w + (j * b + dj)] +=
                                        g[oc * oh * ow + i * ow + j];
                                }
                            }
                        }
                    }
                }
            },
        )
    }

    /// Multiply `[C, H, W]` by a single-channel mask `[1, H, W]`, broadcast
    /// over channels.
    pub fn mul_channel_bcast(&mut self, x: Tensor, m: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m).to_vec();
        if xs.len() != 3 || ms != [1, xs[1], xs[2]] {
            return Err(TensorError::dim(format!("mul_channel_bcast: x {xs:?}, m {ms:?}")));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let xd = self.data(x);
        let md = self.data(m);
        let mut out = vec![S::ZERO; c * hw];
        for ci in 0..c {
            for i in 0..hw {
                out[ci * hw + i] = xd[ci * hw + i] * md[i];
            }
        }
        let (nx, nm) = (self.needs_grad(x), self.needs_grad(m));
        self.push_op(Buf::new(xs, out), nx || nm, "mul_channel_bcast", move |ctx| {
            let Some(g) = ctx.take_out() else { return };
            if nx {
                let md = &ctx.vals[m.idx()].data;
                let acc = acc_slice(ctx.grads, x, c * hw);
                for ci in 0..c {
                    for i in 0..hw {
                        acc[ci * hw + i] += g[ci * hw + i] * md[i];
                    }
                }
            }
            if nm {
                let xd = &ctx.vals[x.idx()].data;
                let acc = acc_slice(ctx.grads, m, hw);
                for ci in 0..c {
                    for i in 0..hw {
                        acc[i] += g[ci * hw + i] * xd[ci * hw + i];
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::{Tape, Tensor};

    fn rng(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn leaf(t: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        t.leaf(shape, data, true).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut t = Tape::<f64>::new();
        let mut r = rng(1);
        let x: Vec<f64> = (0..2 * 5 * 4).map(|_| r()).collect();
        let tx = leaf(&mut t, vec![2, 5, 4], x.clone());
        // 1x1 kernels picking out each input channel
        let w = leaf(&mut t, vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]);
        let y = t.conv2d(tx, w, 1, 0).unwrap();
        for (a, b) in t.data(y).iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_all_ones_on_constant() {
        let mut t = Tape::<f64>::new();
        let c = 0.7;
        let x = leaf(&mut t, vec![1, 6, 6], vec![c; 36]);
        let w = leaf(&mut t, vec![1, 1, 3, 3], vec![1.0; 9]);
        let y = t.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 4, 4]);
        for &v in t.data(y) {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut r = rng(7);
        let (cin, cout, h, w, k, s, p) = (3, 2, 7, 6, 3, 2, 1);
        let x: Vec<f64> = (0..cin * h * w).map(|_| r()).collect();
        let wv: Vec<f64> = (0..cout * cin * k * k).map(|_| r()).collect();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut oracle = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let y = (i * s + u) as isize - p as isize;
                                let xc = (j * s + v) as isize - p as isize;
                                if y >= 0 && y < h as isize && xc >= 0 && xc < w as isize {
                                    acc += x[ci * h * w + y as usize * w + xc as usize]
                                        * wv[co * cin * k * k + ci * k * k + u * k + v];
                                }
                            }
                        }
                    }
                    oracle[co * oh * ow + i * ow + j] = acc;
                }
            }
        }
        let mut t = Tape::<f64>::new();
        let tx = leaf(&mut t, vec![cin, h, w], x);
        let tw = leaf(&mut t, vec![cout, cin, k, k], wv);
        let y = t.conv2d(tx, tw, s, p).unwrap();
        for (a, b) in t.data(y).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_rejects_even_kernel_and_tiny_input() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![1, 4, 4], vec![0.0; 16]);
        let w_even = leaf(&mut t, vec![1, 1, 2, 2], vec![0.0; 4]);
        assert!(t.conv2d(x, w_even, 1, 0).is_err());
        let x2 = leaf(&mut t, vec![1, 2, 2], vec![0.0; 4]);
        let w5 = leaf(&mut t, vec![1, 1, 5, 5], vec![0.0; 25]);
        assert!(t.conv2d(x2, w5, 1, 0).is_err());
    }

    #[test]
    fn bilinear_integer_point_is_exact() {
        let mut t = Tape::<f64>::new();
        let mut r = rng(3);
        let x: Vec<f64> = (0..2 * 5 * 4).map(|_| r()).collect();
        let tx = leaf(&mut t, vec![2, 5, 4], x.clone());
        let pts = leaf(&mut t, vec![1, 2], vec![2.0, 3.0]);
        let y = t.bilinear_sample(tx, pts).unwrap();
        assert!((t.data(y)[0] - x[3 * 4 + 2]).abs() < 1e-12);
        assert!((t.data(y)[1] - x[5 * 4 + 3 * 4 + 2]).abs() < 1e-12);
    }

    #[test]
    fn bilinear_patch_center_is_mean() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]);
        let pts = leaf(&mut t, vec![1, 2], vec![0.5, 0.5]);
        let y = t.bilinear_sample(x, pts).unwrap();
        assert!((t.data(y)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_matches_corner_weight_oracle() {
        let mut t = Tape::<f64>::new();
        let mut r = rng(11);
        let x: Vec<f64> = (0..1 * 4 * 4).map(|_| r()).collect();
        let (u, v) = (1.37, 2.81);
        let (u0, v0) = (1usize, 2usize);
        let (fu, fv) = (u - 1.0, v - 2.0);
        let want = (1.0 - fu) * (1.0 - fv) * x[v0 * 4 + u0]
            + fu * (1.0 - fv) * x[v0 * 4 + u0 + 1]
            + (1.0 - fu) * fv * x[(v0 + 1) * 4 + u0]
            + fu * fv * x[(v0 + 1) * 4 + u0 + 1];
        let tx = leaf(&mut t, vec![1, 4, 4], x);
        let pts = leaf(&mut t, vec![1, 2], vec![u, v]);
        let y = t.bilinear_sample(tx, pts).unwrap();
        assert!((t.data(y)[0] - want).abs() < 1e-6);
    }

    #[test]
    fn deformable_zero_offsets_equals_conv() {
        let mut t = Tape::<f64>::new();
        let mut r = rng(5);
        let x: Vec<f64> = (0..2 * 6 * 5).map(|_| r()).collect();
        let wv: Vec<f64> = (0..3 * 2 * 9).map(|_| r()).collect();
        let tx = leaf(&mut t, vec![2, 6, 5], x);
        let tw = leaf(&mut t, vec![3, 2, 3, 3], wv);
        let off = leaf(&mut t, vec![18, 6, 5], vec![0.0; 18 * 30]);
        let yd = t.deformable_conv2d(tx, tw, off, 1, 1).unwrap();
        let yc = t.conv2d(tx, tw, 1, 1).unwrap();
        for (a, b) in t.data(yd).iter().zip(t.data(yc)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn deformable_integer_offset_shifts_image() {
        // offset (dy=0, dx=+1) everywhere equals convolving the left-shifted image
        let mut t = Tape::<f64>::new();
        let mut r = rng(9);
        let (h, w) = (5, 6);
        let x: Vec<f64> = (0..h * w).map(|_| r()).collect();
        let wv: Vec<f64> = (0..9).map(|_| r()).collect();
        // shifted[y][x] = x[y][x+1], zero at the right edge
        let mut shifted = vec![0.0; h * w];
        for y in 0..h {
            for xc in 0..w - 1 {
                shifted[y * w + xc] = x[y * w + xc + 1];
            }
        }
        let tx = leaf(&mut t, vec![1, h, w], x);
        let ts = leaf(&mut t, vec![1, h, w], shifted);
        let tw = leaf(&mut t, vec![1, 1, 3, 3], wv);
        let mut offd = vec![0.0; 18 * h * w];
        for tap in 0..9 {
            for i in 0..h * w {
                offd[(2 * tap + 1) * h * w + i] = 1.0;
            }
        }
        let off = leaf(&mut t, vec![18, h, w], offd);
        let yd = t.deformable_conv2d(tx, tw, off, 1, 1).unwrap();
        let yc = t.conv2d(ts, tw, 1, 1).unwrap();
        // column 0 differs by construction: zero padding in the shifted conv
        // hides the pixel the offset taps still reach, so compare j >= 1
        for i in 0..h {
            for j in 1..w {
                let a = t.data(yd)[i * w + j];
                let b = t.data(yc)[i * w + j];
                assert!((a - b).abs() < 1e-9, "({i},{j}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn avg_pool_basics() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = t.avg_pool(x, 2).unwrap();
        assert_eq!(t.data(y), &[2.5]);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![2, 3, 3], vec![0.4; 18]);
        let y = t.upsample2x(x).unwrap();
        assert_eq!(t.shape(y), &[2, 6, 6]);
        for &v in t.data(y) {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_then_upsample_constant_roundtrip() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![1, 4, 4], vec![1.25; 16]);
        let p = t.avg_pool(x, 2).unwrap();
        let u = t.upsample2x(p).unwrap();
        assert_eq!(t.shape(u), &[1, 4, 4]);
        for &v in t.data(u) {
            assert!((v - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_align_constant_map() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![2, 8, 8], vec![0.3; 128]);
        let y = t.roi_align(x, [4.0, 4.0, 20.0, 12.0], 4.0, 2, 4, 2).unwrap();
        for &v in t.data(y) {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_align_dense_sampling_approaches_identity() {
        // a linear ramp is reproduced by dense RoIAlign over the whole map
        let (h, w) = (8, 8);
        let mut x = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                x[i * w + j] = 0.02 * i as f64 + 0.03 * j as f64;
            }
        }
        let mut t = Tape::<f64>::new();
        let tx = leaf(&mut t, vec![1, h, w], x.clone());
        let y = t
            .roi_align(tx, [0.0, 0.0, w as f64, h as f64], 1.0, h, w, 8)
            .unwrap();
        for (a, b) in t.data(y).iter().zip(&x) {
            assert!((a - b).abs() <= 1e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn space_to_depth_roundtrips_layout() {
        let mut t = Tape::<f64>::new();
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let tx = leaf(&mut t, vec![1, 4, 4], x);
        let y = t.space_to_depth(tx, 2).unwrap();
        assert_eq!(t.shape(y), &[4, 2, 2]);
        // block (0,0) = pixels (0,0),(0,1),(1,0),(1,1) -> channels 0..4
        assert_eq!(t.data(y)[0], 0.0); // ch0 (di=0,dj=0) at (0,0)
        assert_eq!(t.data(y)[4], 1.0); // ch1 (di=0,dj=1) at (0,0)
        assert_eq!(t.data(y)[8], 4.0); // ch2 (di=1,dj=0) at (0,0)
        assert_eq!(t.data(y)[12], 5.0); // ch3 (di=1,dj=1) at (0,0)
    }
}
