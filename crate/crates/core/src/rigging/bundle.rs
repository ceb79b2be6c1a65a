//! On-disk rig format shared with the viewer.
//!
//! ```text
//! rig.json        skeleton, root, adjacency, keypoints, skinning parameters
//! mesh.obj        rest-pose mesh
//! manifest.json   tensor container: `weights` [V, E] and `keypoints` [N, 3], f64
//! weights.bin
//! keypoints.bin
//! ```

use super::skin::{axis_angle_matrix, lbs_deform, SkinningWeights};
use super::{Mesh, Skeleton};
use crate::container::{Container, Dtype};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const RIG_FORMAT: &str = "keyvol-rig";
pub const RIG_VERSION: u32 = 1;
pub const POSE_FORMAT: &str = "keyvol-pose";
const TENSOR_FORMAT: &str = "keyvol-rig-tensors";
const RIG_FILE: &str = "rig.json";
const MESH_FILE: &str = "mesh.obj";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigParameters {
    pub sigma: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigBundle {
    pub mesh: Mesh,
    pub skeleton: Skeleton,
    pub weights: SkinningWeights,
    pub keypoints: Vec<[f64; 3]>,
    /// `[N, N]`
    pub adjacency: Tensor,
    pub parameters: RigParameters,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigRecord {
    format: String,
    format_version: u32,
    joints: Vec<[f64; 3]>,
    edges: Vec<[usize; 2]>,
    root: usize,
    adjacency: Vec<Vec<f64>>,
    parameters: RigParameters,
    mesh: String,
    vertex_count: usize,
}

impl RigBundle {
    pub fn validate(&self) -> Result<()> {
        self.mesh.validate()?;
        self.skeleton.validate()?;
        let (v, e, n) = (self.mesh.vertices.len(), self.skeleton.edges.len(), self.skeleton.joint_count());
        if self.weights.matrix.shape() != [v, e] {
            return Err(Error::ShapeMismatch {
                entry: "weights".into(),
                expected: vec![v, e],
                found: self.weights.matrix.shape().to_vec(),
            });
        }
        self.weights.validate()?;
        if self.adjacency.shape() != [n, n] {
            return Err(Error::ShapeMismatch {
                entry: "adjacency".into(),
                expected: vec![n, n],
                found: self.adjacency.shape().to_vec(),
            });
        }
        if self.keypoints.len() != n {
            return Err(Error::ShapeMismatch {
                entry: "keypoints".into(),
                expected: vec![n, 3],
                found: vec![self.keypoints.len(), 3],
            });
        }
        let a = self.adjacency.data();
        for i in 0..n {
            if a[i * n + i] != 0.0 || (0..n).any(|j| a[i * n + j] != a[j * n + i] || !(0.0..=1.0).contains(&a[i * n + j])) {
                return Err(Error::Invariant {
                    invariant: "adjacency is symmetric in [0, 1] with zero diagonal",
                    detail: format!("row {i}"),
                });
            }
        }
        if !(self.parameters.sigma > 0.0 && self.parameters.alpha > 0.0) {
            return Err(Error::invalid("rig parameters", "sigma and alpha must be positive"));
        }
        Ok(())
    }

    /// Deformed vertices under `pose`.
    pub fn deform(&self, pose: &Pose) -> Result<Vec<Vector3<f64>>> {
        lbs_deform(&self.mesh, &self.skeleton, &pose.matrices(self.skeleton.edges.len())?, &self.weights)
    }
}

/// Write `bundle` into `dir`. Refuses bundles whose weights or shapes
/// break an invariant.
pub fn export_rig_bundle(bundle: &RigBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = bundle.skeleton.joint_count();
    let record = RigRecord {
        format: RIG_FORMAT.into(),
        format_version: RIG_VERSION,
        joints: bundle.skeleton.joints.clone(),
        edges: bundle.skeleton.edges.iter().map(|&(p, c)| [p, c]).collect(),
        root: bundle.skeleton.root,
        adjacency: bundle.adjacency.data().chunks(n).map(|r| r.to_vec()).collect(),
        parameters: bundle.parameters,
        mesh: MESH_FILE.into(),
        vertex_count: bundle.mesh.vertices.len(),
    };
    let mut c = Container::new(TENSOR_FORMAT, RIG_VERSION);
    c.insert("weights", Dtype::F64, &bundle.weights.matrix)?;
    let kp = Tensor::new([n, 3], bundle.keypoints.iter().flatten().copied().collect());
    c.insert("keypoints", Dtype::F64, &kp)?;
    c.write_dir(dir)?;
    bundle.mesh.save(&dir.join(MESH_FILE))?;
    let text = serde_json::to_string_pretty(&record).expect("rig record serializes") + "\n";
    let p = dir.join(RIG_FILE);
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Load and fully validate a bundle written by [`export_rig_bundle`].
pub fn import_rig_bundle(dir: &Path) -> Result<RigBundle> {
    let p = dir.join(RIG_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let record: RigRecord = serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?;
    if record.format != RIG_FORMAT {
        return Err(Error::invalid("rig", format!("expected format `{RIG_FORMAT}`, found `{}`", record.format)));
    }
    if record.format_version != RIG_VERSION {
        return Err(Error::UnsupportedVersion {
            format: RIG_FORMAT,
            found: record.format_version,
            supported: RIG_VERSION,
        });
    }
    let mesh = Mesh::load(&dir.join(&record.mesh))?;
    if mesh.vertices.len() != record.vertex_count {
        return Err(Error::ShapeMismatch {
            entry: "mesh vertices".into(),
            expected: vec![record.vertex_count, 3],
            found: vec![mesh.vertices.len(), 3],
        });
    }
    let n = record.joints.len();
    if record.adjacency.len() != n || record.adjacency.iter().any(|r| r.len() != n) {
        return Err(Error::ShapeMismatch {
            entry: "adjacency".into(),
            expected: vec![n, n],
            found: vec![record.adjacency.len(), record.adjacency.first().map_or(0, Vec::len)],
        });
    }
    let c = Container::read_dir(dir)?;
    c.check_format(TENSOR_FORMAT, RIG_VERSION)?;
    let e = n.saturating_sub(1);
    let weights = SkinningWeights {
        matrix: c.get_shaped("weights", &[mesh.vertices.len(), e])?,
    };
    let keypoints = c.get_shaped("keypoints", &[n, 3])?;
    let bundle = RigBundle {
        mesh,
        skeleton: Skeleton {
            joints: record.joints,
            edges: record.edges.iter().map(|e| (e[0], e[1])).collect(),
            root: record.root,
        },
        weights,
        keypoints: keypoints.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        adjacency: Tensor::new([n, n], record.adjacency.concat()),
        parameters: record.parameters,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Per-edge axis-angle rotations (radians), indexed like the skeleton's
/// edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub format: String,
    pub format_version: u32,
    pub rotations: Vec<[f64; 3]>,
}

impl Pose {
    pub fn identity(edges: usize) -> Self {
        Self::from_axis_angles(vec![[0.0; 3]; edges])
    }

    pub fn from_axis_angles(rotations: Vec<[f64; 3]>) -> Self {
        Self {
            format: POSE_FORMAT.into(),
            format_version: RIG_VERSION,
            rotations,
        }
    }

    pub fn matrices(&self, edges: usize) -> Result<Vec<Matrix3<f64>>> {
        if self.rotations.len() != edges {
            return Err(Error::ShapeMismatch {
                entry: "pose rotations".into(),
                expected: vec![edges, 3],
                found: vec![self.rotations.len(), 3],
            });
        }
        if let Some(l) = self.rotations.iter().position(|r| !r.iter().all(|x| x.is_finite())) {
            return Err(Error::invalid("pose", format!("edge {l} rotation is not finite")));
        }
        Ok(self.rotations.iter().map(axis_angle_matrix).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pose serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pose: Self = serde_json::from_str(text).map_err(|e| Error::invalid("pose", e.to_string()))?;
        if pose.format != POSE_FORMAT {
            return Err(Error::invalid("pose", format!("expected format `{POSE_FORMAT}`, found `{}`", pose.format)));
        }
        if pose.format_version != RIG_VERSION {
            return Err(Error::UnsupportedVersion {
                format: POSE_FORMAT,
                found: pose.format_version,
                supported: RIG_VERSION,
            });
        }
        Ok(pose)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
