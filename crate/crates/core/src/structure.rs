//! Learnable keypoint adjacency and differentiable edge-map rendering.
//!
//! 2D positions here are array coordinates `(col, row)`; pixel `(r, c)` has
//! its center at `(c, r)`.

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default line width at a 64-pixel-tall image; scale with the height.
pub const SIGMA_LINE_AT_64: f64 = 1.5;

pub fn default_sigma_line(height: usize) -> f64 {
    SIGMA_LINE_AT_64 * height as f64 / 64.0
}

/// `sigmoid((L + Lᵀ)/2)` with a zero diagonal.
pub fn adjacency_weights(tape: &mut Tape, logits: Var) -> Result<Var> {
    let l = tape.value(logits);
    if l.ndim() != 2 || l.dim(0) != l.dim(1) {
        return Err(Error::invalid("adjacency logits", format!("shape {:?} is not square", l.shape())));
    }
    let n = l.dim(0);
    let out = adjacency_values(l);
    Ok(tape.push(
        out,
        &[logits],
        Box::new(move |ctx| {
            let (y, g) = (ctx.output.data(), ctx.grad.data());
            let mut gl = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let s = y[i * n + j];
                        gl[i * n + j] = s * (1.0 - s) * (g[i * n + j] + g[j * n + i]) / 2.0;
                    }
                }
            }
            vec![Some(Tensor::new([n, n], gl))]
        }),
    ))
}

/// Value-level [`adjacency_weights`] for a square tensor.
pub fn adjacency_values(logits: &Tensor) -> Tensor {
    let n = logits.dim(0);
    let l = logits.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out[i * n + j] = sigmoid((l[i * n + j] + l[j * n + i]) / 2.0);
            }
        }
    }
    Tensor::new([n, n], out)
}

/// Closest point parameter `t ∈ [0, 1]` on segment `pq` and the squared
/// distance from `u`.
fn segment_closest(u: [f64; 2], p: [f64; 2], q: [f64; 2]) -> (f64, f64) {
    let e = [q[0] - p[0], q[1] - p[1]];
    let ee = e[0] * e[0] + e[1] * e[1];
    let t = if ee > 0.0 {
        (((u[0] - p[0]) * e[0] + (u[1] - p[1]) * e[1]) / ee).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = [p[0] + t * e[0], p[1] + t * e[1]];
    let d2 = (u[0] - c[0]).powi(2) + (u[1] - c[1]).powi(2);
    (t, d2)
}

/// `exp(−dist(u, pq)² / 2σ²)` at every pixel of an `H×W` raster.
pub fn render_gaussian_line(p: [f64; 2], q: [f64; 2], size: (usize, usize), sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma_line", format!("{sigma} must be positive")));
    }
    let (h, w) = size;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let data = (0..h * w)
        .map(|i| {
            let (_, d2) = segment_closest([(i % w) as f64, (i / w) as f64], p, q);
            (-d2 * inv).exp()
        })
        .collect();
    Ok(Tensor::new([h, w], data))
}

/// `E(u) = max_{i<j} a_ij · line_ij(u)` over pairs of valid keypoints.
/// `kps` is `[N, 2]` array coordinates, `weights` `[N, N]`; the result is
/// `[H, W]`. Gradients follow the maximizing pair at each pixel.
pub fn render_edge_map(
    tape: &mut Tape,
    kps: Var,
    weights: Var,
    valid: &[bool],
    size: (usize, usize),
    sigma: f64,
) -> Var {
    let (h, w) = size;
    let k = tape.value(kps);
    let n = k.dim(0);
    assert_eq!(k.shape(), &[n, 2], "keypoints must be [N, 2]");
    assert_eq!(tape.shape(weights), &[n, n], "weights must be [N, N]");
    assert_eq!(valid.len(), n);
    let pts: Vec<[f64; 2]> = k.data().chunks(2).map(|c| [c[0], c[1]]).collect();
    let a = tape.value(weights).data().to_vec();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| valid[i] && valid[j])
        .collect();
    if pairs.is_empty() && n > 0 {
        log::debug!("edge map: fewer than two valid keypoints, rendering an empty map");
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0.0; h * w];
    // Per pixel: (pair index, t, line value) of the maximizing pair.
    let mut arg: Vec<Option<(u32, f64, f64)>> = vec![None; h * w];
    for (pi, &(i, j)) in pairs.iter().enumerate() {
        let aij = a[i * n + j];
        if aij <= 0.0 {
            continue;
        }
        let (p, q) = (pts[i], pts[j]);
        for r in 0..h {
            for c in 0..w {
                let (t, d2) = segment_closest([c as f64, r as f64], p, q);
                let line = (-d2 * inv).exp();
                let v = aij * line;
                let idx = r * w + c;
                if v > out[idx] {
                    out[idx] = v;
                    arg[idx] = Some((pi as u32, t, line));
                }
            }
        }
    }
    let inv_s2 = 1.0 / (sigma * sigma);
    tape.push(
        Tensor::new([h, w], out),
        &[kps, weights],
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut gk = vec![0.0; n * 2];
            let mut ga = vec![0.0; n * n];
            for (idx, am) in arg.iter().enumerate() {
                let Some((pi, t, line)) = *am else { continue };
                let gv = g[idx];
                if gv == 0.0 {
                    continue;
                }
                let (i, j) = pairs[pi as usize];
                let aij = a[i * n + j];
                ga[i * n + j] += gv * line;
                let (p, q) = (pts[i], pts[j]);
                let u = [(idx % w) as f64, (idx / w) as f64];
                let cpt = [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])];
                let s = gv * aij * line * inv_s2;
                for d in 0..2 {
                    let diff = u[d] - cpt[d];
                    gk[i * 2 + d] += s * diff * (1.0 - t);
                    gk[j * 2 + d] += s * diff * t;
                }
            }
            vec![
                ctx.needs(0).then(|| Tensor::new([n, 2], gk)),
                ctx.needs(1).then(|| Tensor::new([n, n], ga)),
            ]
        }),
    )
}
