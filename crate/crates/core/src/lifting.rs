//! Lifting per-view 2D features into a per-keypoint voxel volume.
//!
//! Layer stacks are projected to a common width by per-layer 1×1
//! bottlenecks, resized to the image resolution and blended with learned
//! scalar weights. A shallow per-pixel head maps the result to one channel
//! per keypoint, which is sampled at every voxel center's projection in
//! every view and fused across views with a softmax over the samples.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{pixel_to_array, project_with, CameraRig, DEPTH_EPS};
use crate::tensor::Tensor;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// `M³` voxel centers uniformly filling an axis-aligned box; center `i` on
/// an axis sits at `lo + (i + 0.5)·(hi − lo)/M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl VoxelGrid {
    /// The canonical cube `[-1, 1]^3`.
    pub fn cube(resolution: usize) -> Result<Self> {
        Self::new(resolution, [-1.0; 3], [1.0; 3])
    }

    pub fn new(resolution: usize, lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::invalid("voxel grid", format!("resolution {resolution} < 2")));
        }
        if (0..3).any(|a| !(hi[a] > lo[a])) {
            return Err(Error::invalid("voxel grid", format!("empty box {lo:?}..{hi:?}")));
        }
        Ok(Self { resolution, lo, hi })
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (i as f64 + 0.5) * (self.hi[axis] - self.lo[axis]) / self.resolution as f64
    }

    /// Flat index `(iz·M + iy)·M + ix`.
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.resolution + iy) * self.resolution + ix
    }

    pub fn center(&self, flat: usize) -> Vector3<f64> {
        let m = self.resolution;
        Vector3::new(
            self.coordinate(0, flat % m),
            self.coordinate(1, (flat / m) % m),
            self.coordinate(2, flat / (m * m)),
        )
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        (0..self.voxel_count()).map(|i| self.center(i)).collect()
    }

    pub fn box_center(&self) -> Vector3<f64> {
        (Vector3::from(self.lo) + Vector3::from(self.hi)) / 2.0
    }

    pub fn diagonal(&self) -> f64 {
        (Vector3::from(self.hi) - Vector3::from(self.lo)).norm()
    }

    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] - tol && p[a] <= self.hi[a] + tol)
    }
}

/// Values over a voxel grid, `[N, M, M, M]` (z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub values: Tensor,
    pub grid: VoxelGrid,
}

/// `F = Σ_l w_l · upsample(B_l f_l)` for layers `f_l` of shape
/// `[C_l, K, h_l, w_l]`, bottlenecks `B_l` of shape `[C′, C_l]` and weights
/// `w` of shape `[L]`. Returns `[C′, K, H, W]`.
///
/// The bottleneck is applied before resizing; both are linear and act on
/// different axes, so the order does not change the result.
pub fn aggregate_features(
    tape: &mut Tape,
    stack: &[Var],
    layer_weights: Var,
    bottlenecks: &[Var],
    target: (usize, usize),
) -> Result<Var> {
    let l = stack.len();
    if l == 0 || bottlenecks.len() != l || tape.value(layer_weights).len() != l {
        return Err(Error::invalid(
            "aggregator",
            format!(
                "{} feature layers, {} bottlenecks, {} layer weights",
                l,
                bottlenecks.len(),
                tape.value(layer_weights).len()
            ),
        ));
    }
    let mut width = None;
    let mut terms = Vec::with_capacity(l);
    for (i, (&f, &b)) in stack.iter().zip(bottlenecks).enumerate() {
        let (fs, bs) = (tape.shape(f).to_vec(), tape.shape(b).to_vec());
        if fs.len() != 4 || bs.len() != 2 || bs[1] != fs[0] {
            return Err(Error::invalid(
                "aggregator",
                format!("layer {i}: features {fs:?} do not fit bottleneck {bs:?}"),
            ));
        }
        if *width.get_or_insert(bs[0]) != bs[0] {
            return Err(Error::invalid("aggregator", "bottlenecks disagree on output width"));
        }
        let projected = tape.channel_linear(f, b, None);
        let resized = tape.resize_bilinear(projected, target.0, target.1);
        let w = tape.narrow(layer_weights, i, 1);
        terms.push(tape.mul_scalar_var(resized, w));
    }
    Ok(if terms.len() == 1 { terms[0] } else { tape.add_n(&terms) })
}

/// Per-pixel two-layer map `W₂ relu(W₁ x + b₁) + b₂` from `[C′, K, H, W]`
/// to `[N, K, H, W]`.
pub fn keypoint_head(tape: &mut Tape, f_agg: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let hidden = tape.channel_linear(f_agg, w1, Some(b1));
    let hidden = tape.relu(hidden);
    tape.channel_linear(hidden, w2, Some(b2))
}

/// Bilinear taps at continuous array position `(col, row)` with zero
/// padding: neighbors outside the raster get weight 0.
pub fn bilinear_taps(col: f64, row: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let mut taps = [(0, 0.0); 4];
    if !(col > -1.0 && row > -1.0 && col < w as f64 && row < h as f64) {
        return taps;
    }
    let (c0, r0) = (col.floor(), row.floor());
    let (fc, fr) = (col - c0, row - r0);
    let corners = [(0.0, 0.0, (1.0 - fc) * (1.0 - fr)), (1.0, 0.0, fc * (1.0 - fr)), (0.0, 1.0, (1.0 - fc) * fr), (1.0, 1.0, fc * fr)];
    for (tap, (dc, dr, wt)) in taps.iter_mut().zip(corners) {
        let (c, r) = (c0 + dc, r0 + dr);
        if c >= 0.0 && r >= 0.0 && c < w as f64 && r < h as f64 && wt != 0.0 {
            *tap = (r as usize * w + c as usize, wt);
        }
    }
    taps
}

pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, col: f64, row: f64) -> f64 {
    bilinear_taps(col, row, h, w).iter().map(|&(i, wt)| wt * plane[i]).sum()
}

/// Precomputed bilinear taps of every voxel center in every view.
#[derive(Debug, Clone)]
pub struct SamplingTable {
    grid: VoxelGrid,
    views: usize,
    image_size: (usize, usize),
    /// `[view][voxel]`
    taps: Vec<Vec<[(usize, f64); 4]>>,
}

impl SamplingTable {
    pub fn new(rig: &CameraRig, grid: &VoxelGrid) -> Self {
        let (h, w) = rig.image_size();
        let centers = grid.centers();
        let taps = rig
            .cameras()
            .iter()
            .map(|cam| {
                centers
                    .iter()
                    .map(|x| {
                        let p = project_with(cam.projection(), x);
                        if !p.valid || p.depth <= DEPTH_EPS {
                            return [(0, 0.0); 4];
                        }
                        let a = pixel_to_array(p.pixel, (h, w));
                        bilinear_taps(a.x, a.y, h, w)
                    })
                    .collect()
            })
            .collect();
        Self {
            grid: *grid,
            views: rig.len(),
            image_size: (h, w),
            taps,
        }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn views(&self) -> usize {
        self.views
    }

    /// Sampling weight mass at a voxel in a view (1 well inside the frame,
    /// 0 outside).
    pub fn coverage(&self, view: usize, voxel: usize) -> f64 {
        self.taps[view][voxel].iter().map(|t| t.1).sum()
    }
}

/// Sample `F_kp` (`[N, K, H, W]`) at every voxel center's projection in every
/// view, giving `[N, K, M³]`. Samples off the image or behind the camera are
/// zero.
pub fn unproject(tape: &mut Tape, f_kp: Var, table: &Arc<SamplingTable>) -> Result<Var> {
    let shape = tape.shape(f_kp).to_vec();
    let (h, w) = table.image_size;
    if shape.len() != 4 || shape[1] != table.views || shape[2] != h || shape[3] != w {
        return Err(Error::ShapeMismatch {
            entry: "keypoint features".into(),
            expected: vec![shape.first().copied().unwrap_or(0), table.views, h, w],
            found: shape,
        });
    }
    let (n, k) = (shape[0], shape[1]);
    let v = table.grid.voxel_count();
    let f = tape.value(f_kp);
    let mut out = vec![0.0; n * k * v];
    for c in 0..n {
        for view in 0..k {
            let plane = &f.data()[(c * k + view) * h * w..(c * k + view + 1) * h * w];
            let dst = &mut out[(c * k + view) * v..(c * k + view + 1) * v];
            for (o, taps) in dst.iter_mut().zip(&table.taps[view]) {
                *o = taps.iter().map(|&(i, wt)| wt * plane[i]).sum();
            }
        }
    }
    let table = Arc::clone(table);
    Ok(tape.push(
        Tensor::new([n, k, v], out),
        &[f_kp],
        Box::new(move |ctx| {
            let mut g = Tensor::zeros(ctx.inputs[0].shape().to_vec());
            for c in 0..n {
                for view in 0..k {
                    let src = &ctx.grad.data()[(c * k + view) * v..(c * k + view + 1) * v];
                    let plane = &mut g.data_mut()[(c * k + view) * h * w..(c * k + view + 1) * h * w];
                    for (&gv, taps) in src.iter().zip(&table.taps[view]) {
                        if gv != 0.0 {
                            for &(i, wt) in taps {
                                plane[i] += wt * gv;
                            }
                        }
                    }
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// Fuse `[N, K, V]` per-view samples into `[N, V]`: per channel and voxel,
/// `Σ_k ω_k f_k` with `ω = softmax_k(f_k / temperature)`.
pub fn attention_fuse(tape: &mut Tape, per_view: Var, temperature: f64) -> Var {
    let t = tape.value(per_view);
    assert_eq!(t.ndim(), 3, "per-view samples must be [N, K, V]");
    let (n, k, v) = (t.dim(0), t.dim(1), t.dim(2));
    let mut out = vec![0.0; n * v];
    let mut weights = vec![0.0; n * k * v];
    let mut e = vec![0.0; k];
    for c in 0..n {
        for x in 0..v {
            let at = |j: usize| t.data()[(c * k + j) * v + x];
            let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
            for (j, ej) in e.iter_mut().enumerate() {
                *ej = ((at(j) - m) / temperature).exp();
            }
            let z: f64 = e.iter().sum();
            let mut acc = 0.0;
            for j in 0..k {
                let wj = e[j] / z;
                weights[(c * k + j) * v + x] = wj;
                acc += wj * at(j);
            }
            out[c * v + x] = acc;
        }
    }
    tape.push(
        Tensor::new([n, v], out),
        &[per_view],
        Box::new(move |ctx| {
            let (f, y, g) = (ctx.inputs[0].data(), ctx.output.data(), ctx.grad.data());
            let mut gf = vec![0.0; n * k * v];
            for c in 0..n {
                for j in 0..k {
                    for x in 0..v {
                        let i = (c * k + j) * v + x;
                        let yv = y[c * v + x];
                        gf[i] = g[c * v + x] * weights[i] * (1.0 + (f[i] - yv) / temperature);
                    }
                }
            }
            vec![Some(Tensor::new([n, k, v], gf))]
        }),
    )
}
