//! Sample bundles: one container directory per multi-view sample.
//!
//! Images and features are stored as `f32`, masks as `u8`, joints as `f64`;
//! the camera rig rides along as `rig.json`.

use super::MultiViewSample;
use crate::container::{Container, Dtype};
use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const BUNDLE_FORMAT: &str = "keyvol-sample";
pub const BUNDLE_VERSION: u32 = 1;
const RIG_FILE: &str = "rig.json";

#[derive(Debug, Serialize, Deserialize)]
struct BundleMeta {
    views: usize,
    /// `[H, W]`
    image_size: [usize; 2],
    layers: usize,
    has_joints: bool,
}

pub fn write_bundle(sample: &MultiViewSample, dir: &Path) -> Result<()> {
    sample.validate()?;
    let mut c = Container::new(BUNDLE_FORMAT, BUNDLE_VERSION);
    let (h, w) = sample.image_size();
    c.insert("images", Dtype::F32, &sample.images)?;
    c.insert("masks", Dtype::U8, &sample.masks)?;
    let layers = sample.layer_features.as_deref().unwrap_or(&[]);
    for (l, f) in layers.iter().enumerate() {
        c.insert(&format!("features/{l}"), Dtype::F32, f)?;
    }
    if let Some(j) = &sample.ground_truth_joints {
        c.insert("joints", Dtype::F64, j)?;
    }
    c.put_file(RIG_FILE, sample.rig.to_json().into_bytes());
    let meta = BundleMeta {
        views: sample.views(),
        image_size: [h, w],
        layers: layers.len(),
        has_joints: sample.ground_truth_joints.is_some(),
    };
    c.set_metadata(serde_json::to_value(meta).expect("bundle metadata serializes"));
    c.write_dir(dir)
}

pub fn read_bundle(dir: &Path) -> Result<MultiViewSample> {
    let c = Container::read_dir(dir)?;
    c.check_format(BUNDLE_FORMAT, BUNDLE_VERSION)?;
    let meta: BundleMeta =
        serde_json::from_value(c.metadata().clone()).map_err(|e| Error::json(dir.join("manifest.json"), e))?;
    let (k, [h, w]) = (meta.views, meta.image_size);
    let images = c.get_shaped("images", &[k, 3, h, w])?;
    let masks = c.get_shaped("masks", &[k, h, w])?;
    let rig_text = std::str::from_utf8(c.file(RIG_FILE)?)
        .map_err(|e| Error::invalid(RIG_FILE, e.to_string()))?;
    let rig = CameraRig::from_json(rig_text)?;
    if rig.len() != k || rig.image_size() != (h, w) {
        return Err(Error::invalid(
            RIG_FILE,
            format!(
                "rig has {} views of {:?}, manifest declares {k} views of {:?}",
                rig.len(),
                rig.image_size(),
                (h, w)
            ),
        ));
    }
    let layer_features = if meta.layers == 0 {
        None
    } else {
        Some(
            (0..meta.layers)
                .map(|l| c.get(&format!("features/{l}")))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let ground_truth_joints = if meta.has_joints { Some(c.get("joints")?) } else { None };
    let sample = MultiViewSample {
        images,
        masks,
        rig,
        layer_features,
        ground_truth_joints,
    };
    sample.validate()?;
    Ok(sample)
}
