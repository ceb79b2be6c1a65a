//! Layer primitives: per-position channel maps, resampling and convolutions.
//!
//! Convolutions are 3-wide with one voxel/pixel of zero padding. The hot
//! loops accumulate whole output rows so the inner loop runs over contiguous
//! memory.

use super::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Apply `weight` (`[C_out, C_in]`) across the leading channel axis of
    /// `x` (`[C_in, ...]`), plus an optional per-channel bias.
    pub fn channel_linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let xt = self.value(x);
        let wt = self.value(weight);
        let (cout, cin) = (wt.dim(0), wt.dim(1));
        assert_eq!(xt.dim(0), cin, "channel_linear: input has {} channels, weight expects {}", xt.dim(0), cin);
        let p = xt.len() / cin;
        let mut out = vec![0.0; cout * p];
        for co in 0..cout {
            let orow = &mut out[co * p..(co + 1) * p];
            if let Some(b) = bias {
                orow.fill(self.value(b).data()[co]);
            }
            for ci in 0..cin {
                let w = wt.data()[co * cin + ci];
                if w == 0.0 {
                    continue;
                }
                for (o, &v) in orow.iter_mut().zip(&xt.data()[ci * p..(ci + 1) * p]) {
                    *o += w * v;
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        shape[0] = cout;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(
            Tensor::new(shape, out),
            &parents,
            Box::new(move |ctx| {
                let (x, w, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let gx = ctx.needs(0).then(|| {
                    let mut gx = vec![0.0; cin * p];
                    for co in 0..cout {
                        let grow = &g.data()[co * p..(co + 1) * p];
                        for ci in 0..cin {
                            let wv = w.data()[co * cin + ci];
                            for (o, &gv) in gx[ci * p..(ci + 1) * p].iter_mut().zip(grow) {
                                *o += wv * gv;
                            }
                        }
                    }
                    Tensor::new(x.shape().to_vec(), gx)
                });
                let gw = ctx.needs(1).then(|| {
                    let mut gw = vec![0.0; cout * cin];
                    for co in 0..cout {
                        let grow = &g.data()[co * p..(co + 1) * p];
                        for ci in 0..cin {
                            gw[co * cin + ci] = dot(grow, &x.data()[ci * p..(ci + 1) * p]);
                        }
                    }
                    Tensor::new(w.shape().to_vec(), gw)
                });
                let mut grads = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs(2).then(|| {
                        let gb = (0..cout).map(|co| g.data()[co * p..(co + 1) * p].iter().sum()).collect();
                        Tensor::new([cout], gb)
                    }));
                }
                grads
            }),
        )
    }

    /// Bilinear resize of the two trailing axes with half-pixel centers
    /// (edge-clamped). Resizing to the same size is the identity.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xt = self.value(x);
        let nd = xt.ndim();
        assert!(nd >= 2);
        let (h, w) = (xt.dim(nd - 2), xt.dim(nd - 1));
        let planes = xt.len() / (h * w);
        let ys = resample_table(h, out_h);
        let xs = resample_table(w, out_w);
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &xt.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        shape[nd - 2] = out_h;
        shape[nd - 1] = out_w;
        self.push(
            Tensor::new(shape, out),
            &[x],
            Box::new(move |ctx| {
                let mut gx = Tensor::zeros(ctx.inputs[0].shape().to_vec());
                for p in 0..planes {
                    let g = &ctx.grad.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
                    let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let gv = g[oy * out_w + ox];
                            dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// 2×2 mean pooling over the two trailing axes (even sizes only).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let nd = xt.ndim();
        let (h, w) = (xt.dim(nd - 2), xt.dim(nd - 1));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial sizes");
        let (oh, ow) = (h / 2, w / 2);
        let planes = xt.len() / (h * w);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &xt.data()[p * h * w..];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x) = (2 * oy, 2 * ox);
                    out[(p * oh + oy) * ow + ox] = 0.25
                        * (src[y * w + x] + src[y * w + x + 1] + src[(y + 1) * w + x] + src[(y + 1) * w + x + 1]);
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        self.push(
            Tensor::new(shape, out),
            &[x],
            Box::new(move |ctx| {
                let mut gx = Tensor::zeros(ctx.inputs[0].shape().to_vec());
                let g = ctx.grad.data();
                let d = gx.data_mut();
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = 0.25 * g[(p * oh + oy) * ow + ox];
                            let (y, x) = (2 * oy, 2 * ox);
                            let base = p * h * w;
                            d[base + y * w + x] += v;
                            d[base + y * w + x + 1] += v;
                            d[base + (y + 1) * w + x] += v;
                            d[base + (y + 1) * w + x + 1] += v;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// 3×3 convolution of `x` (`[C_in, H, W]`) with `weight`
    /// (`[C_out, C_in, 3, 3]`), zero padding 1 and the given stride.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Var {
        let xt = self.value(x);
        let wt = self.value(weight);
        assert_eq!(xt.ndim(), 3, "conv2d input must be [C, H, W]");
        let geom = Conv2dGeom {
            cin: xt.dim(0),
            cout: wt.dim(0),
            h: xt.dim(1),
            w: xt.dim(2),
            stride,
        };
        assert_eq!(wt.shape(), &[geom.cout, geom.cin, 3, 3], "conv2d weight shape");
        let padded = pad2d(xt.data(), geom.cin, geom.h, geom.w);
        let out = conv2d_forward(&padded, wt.data(), bias.map(|b| self.value(b).data()), &geom);
        let shape = vec![geom.cout, geom.out_h(), geom.out_w()];
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(
            Tensor::new(shape, out),
            &parents,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let w = ctx.inputs[1];
                let gx = ctx.needs(0).then(|| {
                    Tensor::new(ctx.inputs[0].shape().to_vec(), conv2d_grad_input(g, w.data(), &geom))
                });
                let gw = ctx.needs(1).then(|| {
                    let padded = pad2d(ctx.inputs[0].data(), geom.cin, geom.h, geom.w);
                    Tensor::new(w.shape().to_vec(), conv2d_grad_weight(g, &padded, &geom))
                });
                let mut grads = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs(2).then(|| channel_sums(g, geom.cout)));
                }
                grads
            }),
        )
    }

    /// 3×3×3 convolution of `x` (`[C_in, D, H, W]`) with `weight`
    /// (`[C_out, C_in, 3, 3, 3]`), stride 1, zero padding 1.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let xt = self.value(x);
        let wt = self.value(weight);
        assert_eq!(xt.ndim(), 4, "conv3d input must be [C, D, H, W]");
        let geom = Conv3dGeom {
            cin: xt.dim(0),
            cout: wt.dim(0),
            d: xt.dim(1),
            h: xt.dim(2),
            w: xt.dim(3),
        };
        assert_eq!(wt.shape(), &[geom.cout, geom.cin, 3, 3, 3], "conv3d weight shape");
        let padded = pad3d(xt.data(), geom.cin, geom.d, geom.h, geom.w);
        let out = conv3d_forward(&padded, wt.data(), bias.map(|b| self.value(b).data()), &geom);
        let shape = vec![geom.cout, geom.d, geom.h, geom.w];
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(
            Tensor::new(shape, out),
            &parents,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let w = ctx.inputs[1];
                let gx = ctx.needs(0).then(|| {
                    // Transposed convolution == convolution of the padded
                    // upstream gradient with flipped, channel-swapped taps.
                    let flipped = flip_transpose3d(w.data(), geom.cout, geom.cin);
                    let gp = pad3d(g, geom.cout, geom.d, geom.h, geom.w);
                    let back = Conv3dGeom {
                        cin: geom.cout,
                        cout: geom.cin,
                        ..geom
                    };
                    Tensor::new(ctx.inputs[0].shape().to_vec(), conv3d_forward(&gp, &flipped, None, &back))
                });
                let gw = ctx.needs(1).then(|| {
                    let padded = pad3d(ctx.inputs[0].data(), geom.cin, geom.d, geom.h, geom.w);
                    Tensor::new(w.shape().to_vec(), conv3d_grad_weight(g, &padded, &geom))
                });
                let mut grads = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs(2).then(|| channel_sums(g, geom.cout)));
                }
                grads
            }),
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn channel_sums(g: &[f64], channels: usize) -> Tensor {
    let per = g.len() / channels;
    Tensor::new([channels], (0..channels).map(|c| g[c * per..(c + 1) * per].iter().sum()).collect())
}

/// For each output coordinate: (low source index, high source index, weight
/// of the high one).
fn resample_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Conv2dGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    stride: usize,
}

impl Conv2dGeom {
    fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }
    fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }
}

fn pad2d(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; c * ph * pw];
    for ci in 0..c {
        for y in 0..h {
            let dst = (ci * ph + y + 1) * pw + 1;
            out[dst..dst + w].copy_from_slice(&x[(ci * h + y) * w..(ci * h + y + 1) * w]);
        }
    }
    out
}

fn conv2d_forward(padded: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &Conv2dGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ph, pw) = (g.h + 2, g.w + 2);
    let s = g.stride;
    let mut out = vec![0.0; g.cout * oh * ow];
    let mut acc = vec![0.0; ow];
    for co in 0..g.cout {
        for oy in 0..oh {
            acc.fill(bias.map_or(0.0, |b| b[co]));
            for ci in 0..g.cin {
                for ky in 0..3 {
                    let row = &padded[(ci * ph + oy * s + ky) * pw..(ci * ph + oy * s + ky + 1) * pw];
                    let k = &weight[((co * g.cin + ci) * 3 + ky) * 3..((co * g.cin + ci) * 3 + ky) * 3 + 3];
                    if s == 1 {
                        let (r0, r1, r2) = (&row[0..ow], &row[1..ow + 1], &row[2..ow + 2]);
                        for x in 0..ow {
                            acc[x] += k[0] * r0[x] + k[1] * r1[x] + k[2] * r2[x];
                        }
                    } else {
                        for (x, a) in acc.iter_mut().enumerate() {
                            let b = x * s;
                            *a += k[0] * row[b] + k[1] * row[b + 1] + k[2] * row[b + 2];
                        }
                    }
                }
            }
            out[(co * oh + oy) * ow..(co * oh + oy + 1) * ow].copy_from_slice(&acc);
        }
    }
    out
}

fn conv2d_grad_input(grad: &[f64], weight: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ph, pw) = (g.h + 2, g.w + 2);
    let s = g.stride;
    let mut gp = vec![0.0; g.cin * ph * pw];
    for ci in 0..g.cin {
        for co in 0..g.cout {
            for oy in 0..oh {
                let grow = &grad[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
                for ky in 0..3 {
                    let k = &weight[((co * g.cin + ci) * 3 + ky) * 3..((co * g.cin + ci) * 3 + ky) * 3 + 3];
                    let base = (ci * ph + oy * s + ky) * pw;
                    let row = &mut gp[base..base + pw];
                    if s == 1 {
                        for kx in 0..3 {
                            for (r, &gv) in row[kx..kx + ow].iter_mut().zip(grow) {
                                *r += k[kx] * gv;
                            }
                        }
                    } else {
                        for (x, &gv) in grow.iter().enumerate() {
                            let b = x * s;
                            row[b] += k[0] * gv;
                            row[b + 1] += k[1] * gv;
                            row[b + 2] += k[2] * gv;
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for y in 0..g.h {
            let src = (ci * ph + y + 1) * pw + 1;
            out[(ci * g.h + y) * g.w..(ci * g.h + y + 1) * g.w].copy_from_slice(&gp[src..src + g.w]);
        }
    }
    out
}

fn conv2d_grad_weight(grad: &[f64], padded: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ph, pw) = (g.h + 2, g.w + 2);
    let s = g.stride;
    let mut gw = vec![0.0; g.cout * g.cin * 9];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            let mut acc = [0.0f64; 9];
            for oy in 0..oh {
                let grow = &grad[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
                for ky in 0..3 {
                    let row = &padded[(ci * ph + oy * s + ky) * pw..(ci * ph + oy * s + ky + 1) * pw];
                    for kx in 0..3 {
                        acc[ky * 3 + kx] += if s == 1 {
                            dot(grow, &row[kx..kx + ow])
                        } else {
                            grow.iter().enumerate().map(|(x, &gv)| gv * row[x * s + kx]).sum()
                        };
                    }
                }
            }
            gw[(co * g.cin + ci) * 9..(co * g.cin + ci) * 9 + 9].copy_from_slice(&acc);
        }
    }
    gw
}

#[derive(Clone, Copy)]
struct Conv3dGeom {
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
    w: usize,
}

fn pad3d(x: &[f64], c: usize, d: usize, h: usize, w: usize) -> Vec<f64> {
    let (pd, ph, pw) = (d + 2, h + 2, w + 2);
    let mut out = vec![0.0; c * pd * ph * pw];
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let dst = ((ci * pd + z + 1) * ph + y + 1) * pw + 1;
                let src = ((ci * d + z) * h + y) * w;
                out[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }
    out
}

/// `[C_out, C_in, k]` taps -> `[C_in, C_out, flipped k]`.
fn flip_transpose3d(w: &[f64], cout: usize, cin: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..27 {
                out[(ci * cout + co) * 27 + (26 - k)] = w[(co * cin + ci) * 27 + k];
            }
        }
    }
    out
}

impl Conv3dGeom {
    fn padded_len(&self) -> usize {
        (self.d + 2) * (self.h + 2) * (self.w + 2)
    }

    /// Flat offsets of the 27 taps relative to the output position, in the
    /// padded layout.
    fn tap_offsets(&self) -> [isize; 27] {
        let (ph, pw) = ((self.h + 2) as isize, (self.w + 2) as isize);
        let mut off = [0isize; 27];
        for (t, o) in off.iter_mut().enumerate() {
            let (kz, ky, kx) = ((t / 9) as isize, (t / 3 % 3) as isize, (t % 3) as isize);
            *o = ((kz - 1) * ph + ky - 1) * pw + kx - 1;
        }
        off
    }

    /// Range of padded positions that covers every interior voxel.
    fn span(&self) -> (usize, usize) {
        let (ph, pw) = (self.h + 2, self.w + 2);
        let first = (ph + 1) * pw + 1;
        let last = ((self.d * ph + self.h) * pw) + self.w;
        (first, last + 1)
    }
}

/// Correlate padded planes with 27 taps per channel pair, writing every
/// position of `span` (pad positions receive garbage and are discarded).
fn conv3d_flat(padded: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &Conv3dGeom) -> Vec<f64> {
    const B: usize = 4;
    const P: usize = 8;
    let plen = g.padded_len();
    let (q0, q1) = g.span();
    let len = q1 - q0;
    let off = g.tap_offsets();
    let taps = g.cin * 27;
    let sources: Vec<usize> = (0..taps)
        .map(|k| ((k / 27 * plen + q0) as isize + off[k % 27]) as usize)
        .collect();
    let mut out = vec![0.0; g.cout * len];
    let mut wv = vec![[0.0f64; B]; taps];
    for co in (0..g.cout).step_by(B) {
        let nb = B.min(g.cout - co);
        for (k, w) in wv.iter_mut().enumerate() {
            for (j, wj) in w.iter_mut().enumerate() {
                *wj = if j < nb { weight[(co + j) * taps + k] } else { 0.0 };
            }
        }
        let whole = len / P * P;
        for i in (0..whole).step_by(P) {
            let acc = tile_kernel::<B, P>(padded, &wv, &sources, i);
            for (j, a) in acc.iter().enumerate().take(nb) {
                out[(co + j) * len + i..(co + j) * len + i + P].copy_from_slice(a);
            }
        }
        for q in whole..len {
            for j in 0..nb {
                out[(co + j) * len + q] = wv.iter().zip(&sources).map(|(w, &src)| w[j] * padded[src + q]).sum();
            }
        }
        if let Some(b) = bias {
            for j in 0..nb {
                out[(co + j) * len..(co + j + 1) * len].iter_mut().for_each(|v| *v += b[co + j]);
            }
        }
    }
    out
}

/// `B` output channels × `P` consecutive positions, accumulated over every
/// (input channel, tap) pair in registers.
fn tile_kernel<const B: usize, const P: usize>(
    padded: &[f64],
    wv: &[[f64; B]],
    sources: &[usize],
    i: usize,
) -> [[f64; P]; B] {
    #[cfg(target_arch = "x86_64")]
    if B == 4 && P == 8 && simd::available() {
        assert!(sources.iter().all(|&s| s + i + P <= padded.len()));
        // SAFETY: features checked above; every source window is in bounds.
        let acc = unsafe { simd::tile_4x8(padded, wv.as_ptr().cast(), sources, i) };
        return std::array::from_fn(|j| std::array::from_fn(|l| acc[j][l]));
    }
    let mut acc = [[0.0f64; P]; B];
    for (w, &src) in wv.iter().zip(sources) {
        let x: &[f64; P] = padded[src + i..src + i + P].try_into().unwrap();
        for j in 0..B {
            for l in 0..P {
                acc[j][l] += w[j] * x[l];
            }
        }
    }
    acc
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    pub fn available() -> bool {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }

    /// `wv` points at `sources.len()` groups of 4 weights.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn tile_4x8(padded: &[f64], wv: *const f64, sources: &[usize], i: usize) -> [[f64; 8]; 4] {
        let mut a = [_mm256_setzero_pd(); 8];
        let base = padded.as_ptr().add(i);
        for (k, &src) in sources.iter().enumerate() {
            let x0 = _mm256_loadu_pd(base.add(src));
            let x1 = _mm256_loadu_pd(base.add(src + 4));
            let w = wv.add(4 * k);
            for j in 0..4 {
                let b = _mm256_broadcast_sd(&*w.add(j));
                a[2 * j] = _mm256_fmadd_pd(b, x0, a[2 * j]);
                a[2 * j + 1] = _mm256_fmadd_pd(b, x1, a[2 * j + 1]);
            }
        }
        let mut out = [[0.0; 8]; 4];
        for (j, o) in out.iter_mut().enumerate() {
            _mm256_storeu_pd(o.as_mut_ptr(), a[2 * j]);
            _mm256_storeu_pd(o.as_mut_ptr().add(4), a[2 * j + 1]);
        }
        out
    }

    /// Partial dot products of 4 gradient rows against 4 shifted input rows
    /// over `[0, n)`, `n` a multiple of 4.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dots_4x4(g: [&[f64]; 4], x: [&[f64]; 4], n: usize) -> [[f64; 4]; 4] {
        let mut a = [[_mm256_setzero_pd(); 4]; 4];
        let mut i = 0;
        while i < n {
            let gv: [__m256d; 4] = std::array::from_fn(|j| _mm256_loadu_pd(g[j].as_ptr().add(i)));
            for t in 0..4 {
                let xv = _mm256_loadu_pd(x[t].as_ptr().add(i));
                for j in 0..4 {
                    a[j][t] = _mm256_fmadd_pd(gv[j], xv, a[j][t]);
                }
            }
            i += 4;
        }
        let mut out = [[0.0; 4]; 4];
        for j in 0..4 {
            for t in 0..4 {
                let mut lanes = [0.0; 4];
                _mm256_storeu_pd(lanes.as_mut_ptr(), a[j][t]);
                out[j][t] = lanes.iter().sum();
            }
        }
        out
    }
}

/// Pull the interior voxels out of a `conv3d_flat` result.
fn unflatten3d(flat: &[f64], c: usize, g: &Conv3dGeom) -> Vec<f64> {
    let (ph, pw) = (g.h + 2, g.w + 2);
    let (q0, q1) = g.span();
    let len = q1 - q0;
    let mut out = vec![0.0; c * g.d * g.h * g.w];
    for ch in 0..c {
        for z in 0..g.d {
            for y in 0..g.h {
                let q = ((z + 1) * ph + y + 1) * pw + 1 - q0;
                let dst = ((ch * g.d + z) * g.h + y) * g.w;
                out[dst..dst + g.w].copy_from_slice(&flat[ch * len + q..ch * len + q + g.w]);
            }
        }
    }
    out
}

fn conv3d_forward(padded: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &Conv3dGeom) -> Vec<f64> {
    unflatten3d(&conv3d_flat(padded, weight, bias, g), g.cout, g)
}

fn conv3d_grad_weight(grad: &[f64], padded: &[f64], g: &Conv3dGeom) -> Vec<f64> {
    const B: usize = 4;
    let plen = g.padded_len();
    let (q0, q1) = g.span();
    let len = q1 - q0;
    let off = g.tap_offsets();
    let taps = g.cin * 27;
    let sources: Vec<usize> = (0..taps)
        .map(|k| ((k / 27 * plen + q0) as isize + off[k % 27]) as usize)
        .collect();
    // Upstream gradient in the padded layout, zero on pad positions.
    let gp = pad3d(grad, g.cout, g.d, g.h, g.w);
    let grows: Vec<&[f64]> = (0..g.cout).map(|co| &gp[co * plen + q0..co * plen + q1]).collect();
    let zeros = vec![0.0; len];
    let mut gw = vec![0.0; g.cout * taps];
    #[cfg(target_arch = "x86_64")]
    let fast = simd::available();
    #[cfg(not(target_arch = "x86_64"))]
    let fast = false;
    let whole = if fast { len / 4 * 4 } else { 0 };
    for co in (0..g.cout).step_by(B) {
        let gr: [&[f64]; B] = std::array::from_fn(|j| grows.get(co + j).copied().unwrap_or(&zeros));
        for k in (0..taps).step_by(B) {
            let xs: [&[f64]; B] = std::array::from_fn(|t| {
                sources.get(k + t).map_or(&zeros[..], |&src| &padded[src..src + len])
            });
            #[allow(unused_mut)]
            let mut acc = [[0.0f64; B]; B];
            #[cfg(target_arch = "x86_64")]
            if fast {
                // SAFETY: features checked; all rows have `len >= whole` entries.
                acc = unsafe { simd::dots_4x4(gr, xs, whole) };
            }
            for j in 0..B.min(g.cout - co) {
                for t in 0..B.min(taps - k) {
                    let tail = dot(&gr[j][whole..], &xs[t][whole..]);
                    gw[(co + j) * taps + k + t] = acc[j][t] + tail;
                }
            }
        }
    }
    gw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradient, random_tensor, weighted_sum};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct definition of a 3×3 zero-padded convolution, independent of the
    /// row-accumulating kernels.
    fn naive_conv2d(x: &Tensor, w: &Tensor, b: &[f64], stride: usize) -> Tensor {
        let (cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let cout = w.dim(0);
        let (oh, ow) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let mut out = Tensor::zeros([cout, oh, ow]);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.data()[((co * cin + ci) * 3 + ky) * 3 + kx]
                                    * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for stride in [1, 2] {
            let x = random_tensor(&mut rng, &[3, 7, 6]);
            let w = random_tensor(&mut rng, &[4, 3, 3, 3]);
            let b = random_tensor(&mut rng, &[4]);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
            let y = tape.conv2d(xv, wv, Some(bv), stride);
            let expected = naive_conv2d(&x, &w, b.data(), stride);
            assert_eq!(tape.shape(y), expected.shape());
            for (a, e) in tape.value(y).data().iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for stride in [1, 2] {
            let x = random_tensor(&mut rng, &[2, 6, 5]);
            let w = random_tensor(&mut rng, &[3, 2, 3, 3]);
            let b = random_tensor(&mut rng, &[3]);
            let proj = random_tensor(&mut rng, &[3, (6 - 1) / stride + 1, (5 - 1) / stride + 1]);
            let report = check_gradient(
                &[x, w, b],
                |tape, v| {
                    let y = tape.conv2d(v[0], v[1], Some(v[2]), stride);
                    weighted_sum(tape, y, &proj)
                },
                1e-5,
            );
            assert!(report.max_rel_error < 1e-6, "stride {stride}: {report:?}");
        }
    }

    #[test]
    fn conv3d_matches_definition_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (cin, cout, d, h, w) = (3, 5, 4, 3, 6);
        let x = random_tensor(&mut rng, &[cin, d, h, w]);
        let wt = random_tensor(&mut rng, &[cout, cin, 3, 3, 3]);
        let b = random_tensor(&mut rng, &[cout]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(wt.clone()), tape.leaf(b.clone()));
        let y = tape.conv3d(xv, wv, Some(bv));
        let got = tape.value(y).clone();
        for co in 0..cout {
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut s = b.data()[co];
                        for ci in 0..cin {
                            for t in 0..27 {
                                let iz = (z + t / 9) as isize - 1;
                                let iy = (yy + t / 3 % 3) as isize - 1;
                                let ix = (xx + t % 3) as isize - 1;
                                if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += wt.data()[(co * cin + ci) * 27 + t]
                                    * x.data()[((ci * d + iz as usize) * h + iy as usize) * w + ix as usize];
                            }
                        }
                        let g = got.data()[((co * d + z) * h + yy) * w + xx];
                        assert!((g - s).abs() < 1e-12, "({co},{z},{yy},{xx}): {g} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv3d_gradients_and_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, &[2, 4, 5, 3]);
        let w = random_tensor(&mut rng, &[3, 2, 3, 3, 3]);
        let b = random_tensor(&mut rng, &[3]);
        // Spot-check one interior output against the definition.
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.conv3d(xv, wv, Some(bv));
        let (co, z, yy, xx) = (1, 2, 2, 1);
        let mut s = b.data()[co];
        for ci in 0..2 {
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iz, iy, ix) = (z + kz - 1, yy + ky - 1, xx + kx - 1);
                        s += w.data()[(co * 2 + ci) * 27 + kz * 9 + ky * 3 + kx]
                            * x.data()[((ci * 4 + iz) * 5 + iy) * 3 + ix];
                    }
                }
            }
        }
        let got = tape.value(y).data()[((co * 4 + z) * 5 + yy) * 3 + xx];
        assert!((got - s).abs() < 1e-12);

        let proj = random_tensor(&mut rng, &[3, 4, 5, 3]);
        let report = check_gradient(
            &[x, w, b],
            |tape, v| {
                let y = tape.conv3d(v[0], v[1], Some(v[2]));
                weighted_sum(tape, y, &proj)
            },
            1e-5,
        );
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn linear_resize_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_tensor(&mut rng, &[3, 2, 4, 6]);
        let w = random_tensor(&mut rng, &[5, 3]);
        let b = random_tensor(&mut rng, &[5]);
        let proj = random_tensor(&mut rng, &[5, 2, 4, 5]);
        let report = check_gradient(
            &[x, w, b],
            |tape, v| {
                let y = tape.channel_linear(v[0], v[1], Some(v[2]));
                let up = tape.resize_bilinear(y, 8, 10);
                let down = tape.avg_pool2(up);
                weighted_sum(tape, down, &proj)
            },
            1e-5,
        );
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, &[2, 5, 7]);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.resize_bilinear(v, 5, 7);
        assert_eq!(tape.value(y), &x);
    }
}
