//! Synthetic datasets: a directory of sample bundles plus `dataset.json`.

use super::{read_bundle, synth_generate, write_bundle, MultiViewSample, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::{make_orbit_rig, CameraRig};
use crate::rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub const DATASET_INDEX_FILE: &str = "dataset.json";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigParams {
    pub views: usize,
    pub elevation_deg: f64,
    pub radius: f64,
    /// `[H, W]`
    pub image_size: [usize; 2],
}

impl Default for RigParams {
    fn default() -> Self {
        Self {
            views: 4,
            elevation_deg: 10.0,
            radius: 3.5,
            image_size: [64, 64],
        }
    }
}

impl RigParams {
    pub fn build(&self) -> Result<CameraRig> {
        make_orbit_rig(self.views, self.elevation_deg, self.radius, (self.image_size[0], self.image_size[1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub seed: u64,
    pub scene: SceneSpec,
    pub rig: RigParams,
    /// Bundle directories relative to the dataset root.
    pub samples: Vec<String>,
}

impl DatasetIndex {
    pub fn sample_seed(&self, i: usize) -> u64 {
        rng::derive_seed(self.seed, &[rng::tag::SAMPLE, i as u64])
    }
}

/// Generate `count` samples into `out`, which must be absent or empty.
/// Work happens in a sibling staging directory that is removed on failure.
pub fn generate_dataset(out: &Path, count: usize, scene: &SceneSpec, rig: &RigParams, seed: u64) -> Result<DatasetIndex> {
    scene.validate()?;
    let camera_rig = rig.build()?;
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() {
            return Err(Error::invalid("output directory", format!("{} is not empty", out.display())));
        }
    }
    let staging = staging_path(out);
    let _ = fs::remove_dir_all(&staging);
    let result = (|| {
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        let mut index = DatasetIndex {
            format_version: DATASET_VERSION,
            seed,
            scene: scene.clone(),
            rig: rig.clone(),
            samples: Vec::with_capacity(count),
        };
        for i in 0..count {
            let name = format!("sample_{i:05}");
            let sample = synth_generate(scene, &camera_rig, index.sample_seed(i))?;
            write_bundle(&sample, &staging.join(&name))?;
            index.samples.push(name);
        }
        let p = staging.join(DATASET_INDEX_FILE);
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
        if out.exists() {
            fs::remove_dir(out).map_err(|e| Error::io(out, e))?;
        }
        fs::rename(&staging, out).map_err(|e| Error::io(out, e))?;
        Ok(index)
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn staging_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "dataset".into());
    name.push(".partial");
    out.with_file_name(name)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let p = dir.join(DATASET_INDEX_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?;
    if index.format_version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            format: "dataset index",
            found: index.format_version,
            supported: DATASET_VERSION,
        });
    }
    Ok(index)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<MultiViewSample>)> {
    let index = read_index(dir)?;
    let samples = index
        .samples
        .iter()
        .map(|s| read_bundle(&dir.join(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, samples))
}

/// SHA-256 over every file under `dir` except `exclude`, in sorted relative
/// path order, hashing each path and its contents.
pub fn dataset_hash(dir: &Path, exclude: &[&str]) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.push((rel, path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for (rel, path) in files.iter().filter(|(rel, _)| !exclude.contains(&rel.as_str())) {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        hasher.update((rel.len() as u64).to_le_bytes());
        hasher.update(rel.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}
