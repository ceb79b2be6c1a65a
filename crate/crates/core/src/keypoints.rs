//! Heatmap volumes and soft-argmax keypoint extraction.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lifting::VoxelGrid;
use crate::tensor::Tensor;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Three 3×3×3 convolutions `N → 2N → 2N → N` with ReLU between, on a
/// `[N, M, M, M]` volume. `layers` holds `(weight, bias)` pairs.
pub fn volume_net(tape: &mut Tape, volume: Var, layers: &[(Var, Var)]) -> Var {
    let mut x = volume;
    for (i, &(w, b)) in layers.iter().enumerate() {
        x = tape.conv3d(x, w, Some(b));
        if i + 1 < layers.len() {
            x = tape.relu(x);
        }
    }
    x
}

/// Soft-argmax over `heatmaps` (`[N, M, M, M]` logits): per keypoint the
/// softmax over all voxels, then the expected voxel center. Returns `[N, 3]`.
pub fn integral_regression(tape: &mut Tape, heatmaps: Var, grid: &VoxelGrid) -> Var {
    let h = tape.value(heatmaps);
    let v = grid.voxel_count();
    assert_eq!(h.len() % v, 0, "heatmaps do not match the grid");
    let n = h.len() / v;
    let m = grid.resolution;
    let coords: [Vec<f64>; 3] = std::array::from_fn(|a| (0..m).map(|i| grid.coordinate(a, i)).collect());
    let mut probs = vec![0.0; n * v];
    let mut out = vec![0.0; n * 3];
    for c in 0..n {
        let logits = &h.data()[c * v..(c + 1) * v];
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p = &mut probs[c * v..(c + 1) * v];
        let mut z = 0.0;
        for (pi, &l) in p.iter_mut().zip(logits) {
            *pi = (l - mx).exp();
            z += *pi;
        }
        let mut s = [0.0; 3];
        for (i, pi) in p.iter_mut().enumerate() {
            *pi /= z;
            s[0] += *pi * coords[0][i % m];
            s[1] += *pi * coords[1][(i / m) % m];
            s[2] += *pi * coords[2][i / (m * m)];
        }
        out[c * 3..c * 3 + 3].copy_from_slice(&s);
    }
    let shape = tape.shape(heatmaps).to_vec();
    tape.push(
        Tensor::new([n, 3], out),
        &[heatmaps],
        Box::new(move |ctx| {
            let (s, g) = (ctx.output.data(), ctx.grad.data());
            let mut gh = vec![0.0; n * v];
            for c in 0..n {
                let (gc, sc) = (&g[c * 3..c * 3 + 3], &s[c * 3..c * 3 + 3]);
                let base = gc[0] * sc[0] + gc[1] * sc[1] + gc[2] * sc[2];
                for i in 0..v {
                    let dot = gc[0] * coords[0][i % m] + gc[1] * coords[1][(i / m) % m] + gc[2] * coords[2][i / (m * m)];
                    gh[c * v + i] = probs[c * v + i] * (dot - base);
                }
            }
            vec![Some(Tensor::new(shape.clone(), gh))]
        }),
    )
}

pub const KEYPOINTS_FORMAT_VERSION: u32 = 1;

/// Ordered 3D keypoints with the grid they were regressed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet3D {
    pub format_version: u32,
    pub positions: Vec<[f64; 3]>,
    pub grid: VoxelGrid,
}

impl KeypointSet3D {
    pub fn from_tensor(t: &Tensor, grid: VoxelGrid) -> Self {
        Self {
            format_version: KEYPOINTS_FORMAT_VERSION,
            positions: t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            grid,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn points(&self) -> Vec<Vector3<f64>> {
        self.positions.iter().map(|&p| Vector3::from(p)).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.len(), 3], self.positions.iter().flatten().copied().collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != KEYPOINTS_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                format: "keypoint set",
                found: self.format_version,
                supported: KEYPOINTS_FORMAT_VERSION,
            });
        }
        let tol = 1e-9 * self.grid.diagonal();
        if let Some((i, p)) = self
            .points()
            .iter()
            .enumerate()
            .find(|(_, p)| !p.iter().all(|v| v.is_finite()) || !self.grid.contains(p, tol))
        {
            return Err(Error::Invariant {
                invariant: "keypoints inside grid bounds",
                detail: format!("keypoint {i} at {:?}", [p.x, p.y, p.z]),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("keypoints serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let k: Self = serde_json::from_str(text).map_err(|e| Error::json("<keypoints>", e))?;
        k.validate()?;
        Ok(k)
    }
}
