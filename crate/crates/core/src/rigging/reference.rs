//! A small deterministic rig with fixed poses, used as a shared fixture for
//! checking other skinning implementations against this one.

use super::{extract_skeleton, skinning_weights, Mesh, Pose, RigBundle, RigParameters};
use crate::backbone::SceneSpec;
use crate::error::Result;
use crate::tensor::Tensor;
use nalgebra::Vector3;

const RING: usize = 10;
const STATIONS: usize = 7;

/// Rest-pose joint positions of a figure, root at the origin.
pub fn rest_joints(spec: &SceneSpec) -> Vec<Vector3<f64>> {
    let mut out = vec![Vector3::zeros(); spec.joint_count];
    // Parents precede children in the figure's joint order.
    for j in 0..spec.joint_count {
        if let Some(p) = spec.limb_topology[j] {
            out[j] = out[p] + spec.bone_lengths[j] * Vector3::from(spec.rest_directions[j]).normalize();
        }
    }
    out
}

/// Closed tubes around every limb.
pub fn tube_mesh(joints: &[Vector3<f64>], limbs: &[(usize, usize)], radii: &[f64]) -> Mesh {
    let mut mesh = Mesh::default();
    for (&(a, b), &r) in limbs.iter().zip(radii) {
        let (pa, pb) = (joints[a], joints[b]);
        let axis = (pb - pa).normalize();
        let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let u = axis.cross(&helper).normalize();
        let w = axis.cross(&u);
        let base = mesh.vertices.len();
        for s in 0..STATIONS {
            let c = pa + (pb - pa) * (s as f64 / (STATIONS - 1) as f64);
            for k in 0..RING {
                let t = std::f64::consts::TAU * k as f64 / RING as f64;
                let p = c + r * (t.cos() * u + t.sin() * w);
                mesh.vertices.push([p.x, p.y, p.z]);
            }
        }
        let cap_a = mesh.vertices.len();
        mesh.vertices.push([pa.x, pa.y, pa.z]);
        mesh.vertices.push([pb.x, pb.y, pb.z]);
        let at = |s: usize, k: usize| base + s * RING + k % RING;
        for s in 0..STATIONS - 1 {
            for k in 0..RING {
                mesh.faces.push([at(s, k), at(s, k + 1), at(s + 1, k + 1)]);
                mesh.faces.push([at(s, k), at(s + 1, k + 1), at(s + 1, k)]);
            }
        }
        for k in 0..RING {
            mesh.faces.push([cap_a, at(0, k + 1), at(0, k)]);
            mesh.faces.push([cap_a + 1, at(STATIONS - 1, k), at(STATIONS - 1, k + 1)]);
        }
    }
    mesh
}

/// The reference rig: the default figure in its rest pose, tube mesh,
/// adjacency 0.9 on limbs and 0.1 elsewhere, default skinning parameters.
pub fn reference_rig() -> Result<RigBundle> {
    let spec = SceneSpec::figure(0);
    let joints = rest_joints(&spec);
    let limbs = spec.limbs();
    let n = joints.len();
    let mut adjacency = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let limb = limbs.contains(&(i, j)) || limbs.contains(&(j, i));
                adjacency.data_mut()[i * n + j] = if limb { 0.9 } else { 0.1 };
            }
        }
    }
    let skeleton = extract_skeleton(&joints, &adjacency, None)?;
    let mesh = tube_mesh(&joints, &limbs, &spec.limb_radii);
    let parameters = RigParameters {
        sigma: super::default_sigma(&skeleton),
        alpha: 1.0,
    };
    let weights = skinning_weights(&mesh, &skeleton, parameters.sigma, parameters.alpha)?;
    Ok(RigBundle {
        mesh,
        keypoints: skeleton.joints.clone(),
        skeleton,
        weights,
        adjacency,
        parameters,
    })
}

/// Five fixed poses for an `edges`-edge skeleton: rest, one large single
/// rotation, a whole-body turn, and two poses moving every edge.
pub fn reference_poses(edges: usize) -> Vec<Pose> {
    let mut out = vec![Pose::identity(edges)];
    let mut single = vec![[0.0; 3]; edges];
    single[edges - 1] = [0.0, 0.0, 1.2];
    out.push(Pose::from_axis_angles(single));
    let mut turn = vec![[0.0; 3]; edges];
    turn[0] = [0.0, 0.9, 0.0];
    out.push(Pose::from_axis_angles(turn));
    for s in [1.0, -0.7] {
        let all = (0..edges)
            .map(|l| {
                let t = l as f64 + 1.0;
                [s * 0.3 * (t * 0.7).sin(), s * 0.5 * (t * 1.3).cos(), s * 0.4 * (t * 0.4).sin()]
            })
            .collect();
        out.push(Pose::from_axis_angles(all));
    }
    out
}
