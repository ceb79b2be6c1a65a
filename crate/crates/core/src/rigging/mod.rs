//! Skeleton extraction, skinning and pose deformation.
//!
//! A skeleton is a minimum spanning tree over the keypoints under a cost
//! mixing normalized distance and adjacency weight, directed away from a
//! root. Mesh vertices are bound to skeleton edges with normalized Gaussian
//! weights of their distance to each edge segment and deformed by linear
//! blend skinning of forward-kinematic edge transforms.

mod bundle;
mod mesh;
pub mod reference;
mod skin;

pub use bundle::{export_rig_bundle, import_rig_bundle, Pose, RigBundle, RigParameters, POSE_FORMAT, RIG_FORMAT, RIG_VERSION};
pub use mesh::Mesh;
pub use skin::{
    axis_angle_matrix, default_sigma, edge_transforms, lbs_deform, point_segment_distance, skinning_weights,
    transport_points, Affine, SkinningWeights,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Joints plus edges directed away from `root`. Edges are stored in
/// breadth-first order, so every edge comes after the edge leading into its
/// parent joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints: Vec<[f64; 3]>,
    /// `(parent, child)`
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
}

impl Skeleton {
    pub fn joint(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.joints[i])
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// The edge ending at each joint; `None` for the root.
    pub fn incoming(&self) -> Vec<Option<usize>> {
        let mut inc = vec![None; self.joints.len()];
        for (l, &(_, c)) in self.edges.iter().enumerate() {
            inc[c] = Some(l);
        }
        inc
    }

    /// The edge leading into each edge's parent joint.
    pub fn parent_edges(&self) -> Vec<Option<usize>> {
        let inc = self.incoming();
        self.edges.iter().map(|&(p, _)| inc[p]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joints.len();
        let bad = |detail: String| Err(Error::Invariant { invariant: "skeleton is a rooted spanning tree", detail });
        if n < 2 {
            return bad(format!("{n} joints, need at least 2"));
        }
        if self.root >= n {
            return bad(format!("root {} out of range", self.root));
        }
        if self.edges.len() != n - 1 {
            return bad(format!("{} edges for {n} joints", self.edges.len()));
        }
        if self.joints.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite joint position".into());
        }
        let mut has_parent = vec![false; n];
        let mut reached = vec![false; n];
        reached[self.root] = true;
        for (l, &(p, c)) in self.edges.iter().enumerate() {
            if p >= n || c >= n {
                return bad(format!("edge {l} ({p}, {c}) out of range"));
            }
            if c == self.root || has_parent[c] {
                return bad(format!("joint {c} has more than one parent"));
            }
            if !reached[p] {
                return bad(format!("edge {l} leaves joint {p} before it is reached from the root"));
            }
            has_parent[c] = true;
            reached[c] = true;
        }
        Ok(())
    }

    /// Axis-aligned bounding-box diagonal of the joints.
    pub fn bbox_diagonal(&self) -> f64 {
        let pts: Vec<Vector3<f64>> = (0..self.joints.len()).map(|i| self.joint(i)).collect();
        bbox_diagonal(&pts)
    }
}

pub(crate) fn bbox_diagonal(points: &[Vector3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let lo = points.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = points.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    (hi - lo).norm()
}

fn check_adjacency(n: usize, adjacency: &Tensor) -> Result<()> {
    if adjacency.shape() != [n, n] {
        return Err(Error::ShapeMismatch {
            entry: "adjacency".into(),
            expected: vec![n, n],
            found: adjacency.shape().to_vec(),
        });
    }
    if adjacency.data().iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::invalid("adjacency", "weights must lie in [0, 1]"));
    }
    Ok(())
}

/// Cost of every pair `i < j`: `d_ij / d_max + (1 − a_ij)`, or `1 − a_ij`
/// when all points coincide.
pub fn edge_costs(points: &[Vector3<f64>], adjacency: &Tensor) -> Result<Vec<(usize, usize, f64)>> {
    let n = points.len();
    check_adjacency(n, adjacency)?;
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::invalid("keypoints", "non-finite position"));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let d_max = pairs.iter().map(|&(i, j)| (points[i] - points[j]).norm()).fold(0.0, f64::max);
    if d_max == 0.0 && n > 1 {
        log::warn!("all keypoints coincide; skeleton costs use adjacency only");
    }
    let a = adjacency.data();
    Ok(pairs
        .into_iter()
        .map(|(i, j)| {
            let d = if d_max > 0.0 { (points[i] - points[j]).norm() / d_max } else { 0.0 };
            (i, j, d + (1.0 - a[i * n + j]))
        })
        .collect())
}

/// Sum of pair costs over `edges`, accumulated in sorted edge order.
pub fn tree_cost(points: &[Vector3<f64>], adjacency: &Tensor, edges: &[(usize, usize)]) -> Result<f64> {
    let costs = edge_costs(points, adjacency)?;
    let n = points.len();
    let mut sorted: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    sorted.sort_unstable();
    let index = |i: usize, j: usize| i * n - i * (i + 1) / 2 + (j - i - 1);
    Ok(sorted.iter().map(|&(i, j)| costs[index(i, j)].2).sum())
}

/// Kruskal's algorithm over the complete graph. Ties in cost are broken
/// by the lexicographic order of `(i, j)`. Returns edges as `(i, j)` with
/// `i < j` in sorted order.
pub fn build_mst(points: &[Vector3<f64>], adjacency: &Tensor) -> Result<Vec<(usize, usize)>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid("keypoints", format!("a skeleton needs at least 2 keypoints, got {n}")));
    }
    let mut costs = edge_costs(points, adjacency)?;
    costs.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut tree = Vec::with_capacity(n - 1);
    for (i, j, _) in costs {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            tree.push((i, j));
            if tree.len() == n - 1 {
                break;
            }
        }
    }
    tree.sort_unstable();
    Ok(tree)
}

/// Joint with the largest total adjacency weight, lowest index on ties.
pub fn default_root(adjacency: &Tensor) -> usize {
    let n = adjacency.dim(0);
    let degree = |i: usize| adjacency.data()[i * n..(i + 1) * n].iter().sum::<f64>();
    (0..n).fold(0, |best, i| if degree(i) > degree(best) { i } else { best })
}

/// Direct an undirected spanning tree away from `root` (default:
/// [`default_root`]) by breadth-first traversal, visiting neighbours in
/// index order.
pub fn orient_tree(
    points: &[Vector3<f64>],
    tree: &[(usize, usize)],
    adjacency: &Tensor,
    root: Option<usize>,
) -> Result<Skeleton> {
    let n = points.len();
    check_adjacency(n, adjacency)?;
    let root = root.unwrap_or_else(|| default_root(adjacency));
    if root >= n {
        return Err(Error::invalid("root", format!("{root} out of range for {n} joints")));
    }
    let mut nbrs = vec![Vec::new(); n];
    for &(a, b) in tree {
        if a >= n || b >= n || a == b {
            return Err(Error::invalid("tree", format!("bad edge ({a}, {b})")));
        }
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    nbrs.iter_mut().for_each(|v| v.sort_unstable());
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    while let Some(p) = queue.pop_front() {
        for &c in &nbrs[p] {
            if !seen[c] {
                seen[c] = true;
                edges.push((p, c));
                queue.push_back(c);
            }
        }
    }
    if edges.len() != n - 1 || tree.len() != n - 1 {
        let missing: Vec<usize> = (0..n).filter(|&i| !seen[i]).collect();
        return Err(Error::invalid(
            "tree",
            format!("not a spanning tree: {} edges over {n} joints, unreachable from {root}: {missing:?}", tree.len()),
        ));
    }
    let skeleton = Skeleton {
        joints: points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        edges,
        root,
    };
    skeleton.validate()?;
    Ok(skeleton)
}

/// MST then orientation.
pub fn extract_skeleton(points: &[Vector3<f64>], adjacency: &Tensor, root: Option<usize>) -> Result<Skeleton> {
    let tree = build_mst(points, adjacency)?;
    orient_tree(points, &tree, adjacency, root)
}
