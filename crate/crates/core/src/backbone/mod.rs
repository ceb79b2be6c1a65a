//! Sources of multi-view samples: the synthetic articulated-figure oracle and
//! the on-disk sample bundle that real cached features can populate.

mod bundle;
mod dataset;
mod synth;

pub use bundle::{read_bundle, write_bundle, BUNDLE_FORMAT, BUNDLE_VERSION};
pub use dataset::{
    dataset_hash, generate_dataset, load_dataset, read_index, DatasetIndex, RigParams, DATASET_INDEX_FILE, DATASET_VERSION,
};
pub use synth::{synth_generate, synth_generate_with_diagnostics, OracleDiagnostics, SceneSpec, CUBE_LIMIT};

use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewSample {
    /// `[K, 3, H, W]` in `[0, 1]`.
    pub images: Tensor,
    /// `[K, H, W]`, entries exactly 0 or 1.
    pub masks: Tensor,
    pub rig: CameraRig,
    /// Per layer `[C_l, K, h_l, w_l]`.
    pub layer_features: Option<Vec<Tensor>>,
    /// `[J, 3]`, synthetic samples only.
    pub ground_truth_joints: Option<Tensor>,
}

impl MultiViewSample {
    pub fn views(&self) -> usize {
        self.rig.len()
    }

    /// `(H, W)`
    pub fn image_size(&self) -> (usize, usize) {
        self.rig.image_size()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.rig.len();
        let (h, w) = self.rig.image_size();
        check_shape("images", &self.images, &[k, 3, h, w])?;
        check_shape("masks", &self.masks, &[k, h, w])?;
        if let Some(v) = self.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("images", format!("value {v} outside [0, 1]")));
        }
        if self.masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("masks", "entries must be exactly 0 or 1"));
        }
        if let Some(layers) = &self.layer_features {
            for (l, f) in layers.iter().enumerate() {
                let name = format!("features/{l}");
                if f.ndim() != 4 || f.dim(1) != k {
                    return Err(Error::ShapeMismatch {
                        entry: name,
                        expected: vec![f.shape().first().copied().unwrap_or(0), k, h, w],
                        found: f.shape().to_vec(),
                    });
                }
                let (fh, fw) = (f.dim(2), f.dim(3));
                if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 {
                    return Err(Error::invalid(
                        name,
                        format!("spatial size {fh}×{fw} does not divide the image size {h}×{w}"),
                    ));
                }
                if !f.all_finite() {
                    return Err(Error::invalid(name, "non-finite values"));
                }
            }
        }
        if let Some(j) = &self.ground_truth_joints {
            if j.ndim() != 2 || j.dim(1) != 3 {
                return Err(Error::ShapeMismatch {
                    entry: "joints".into(),
                    expected: vec![j.shape().first().copied().unwrap_or(0), 3],
                    found: j.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Features, or an error explaining that the sample cannot be lifted.
    pub fn features(&self) -> Result<&[Tensor]> {
        self.layer_features
            .as_deref()
            .ok_or_else(|| Error::invalid("sample", "has no layer features; it cannot be lifted"))
    }

    /// The first `k` views (view 0 stays the input view).
    pub fn truncated(&self, k: usize) -> Result<Self> {
        let rig = self.rig.truncated(k)?;
        let take = |t: &Tensor, axis: usize| -> Tensor {
            let shape = t.shape();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let n = shape[axis];
            let mut data = Vec::with_capacity(outer * k * inner);
            for o in 0..outer {
                data.extend_from_slice(&t.data()[o * n * inner..(o * n + k) * inner]);
            }
            let mut s = shape.to_vec();
            s[axis] = k;
            Tensor::new(s, data)
        };
        Ok(Self {
            images: take(&self.images, 0),
            masks: take(&self.masks, 0),
            rig,
            layer_features: self
                .layer_features
                .as_ref()
                .map(|ls| ls.iter().map(|f| take(f, 1)).collect()),
            ground_truth_joints: self.ground_truth_joints.clone(),
        })
    }
}

fn check_shape(entry: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::ShapeMismatch {
            entry: entry.into(),
            expected: expected.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(())
}
