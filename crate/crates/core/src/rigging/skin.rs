use super::{Mesh, Skeleton};
use crate::error::{Error, Result};
use crate::geometry::orthonormality_error;
use crate::tensor::Tensor;
use nalgebra::{Matrix3, Rotation3, Vector3};

const ROTATION_TOL: f64 = 1e-6;
const ROW_SUM_TOL: f64 = 1e-6;

/// Distance from `v` to the segment `a`–`b`.
pub fn point_segment_distance(v: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((v - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (v - (a + t * ab)).norm()
}

/// `0.1 ×` the skeleton's bounding-box diagonal.
pub fn default_sigma(skeleton: &Skeleton) -> f64 {
    0.1 * skeleton.bbox_diagonal()
}

/// Vertex-by-edge weights, `[V, E]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinningWeights {
    pub matrix: Tensor,
}

impl SkinningWeights {
    pub fn vertices(&self) -> usize {
        self.matrix.dim(0)
    }

    pub fn edges(&self) -> usize {
        self.matrix.dim(1)
    }

    pub fn row(&self, v: usize) -> &[f64] {
        let e = self.edges();
        &self.matrix.data()[v * e..(v + 1) * e]
    }

    /// Entries non-negative and every row summing to 1.
    pub fn validate(&self) -> Result<()> {
        if self.matrix.ndim() != 2 {
            return Err(Error::invalid("skinning weights", format!("shape {:?} is not 2-D", self.matrix.shape())));
        }
        for v in 0..self.vertices() {
            let row = self.row(v);
            if let Some(l) = row.iter().position(|w| !(*w >= 0.0)) {
                return Err(Error::Invariant {
                    invariant: "skinning weights are non-negative",
                    detail: format!("row {v}, edge {l}: {}", row[l]),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Invariant {
                    invariant: "skinning weight rows sum to 1",
                    detail: format!("row {v} sums to {sum}"),
                });
            }
        }
        Ok(())
    }
}

/// `W_il ∝ exp(−α·d(v_i, E_l)² / (2σ²))`, normalized over edges. A vertex
/// whose Gaussians all underflow goes entirely to its nearest edge.
pub fn skinning_weights_for(points: &[Vector3<f64>], skeleton: &Skeleton, sigma: f64, alpha: f64) -> Result<SkinningWeights> {
    skeleton.validate()?;
    if !(sigma > 0.0) || !(alpha > 0.0) {
        return Err(Error::invalid("skinning parameters", format!("sigma {sigma} and alpha {alpha} must be positive")));
    }
    let e = skeleton.edges.len();
    let segs: Vec<(Vector3<f64>, Vector3<f64>)> =
        skeleton.edges.iter().map(|&(p, c)| (skeleton.joint(p), skeleton.joint(c))).collect();
    let mut data = Vec::with_capacity(points.len() * e);
    let mut fallbacks = 0;
    for v in points {
        let d: Vec<f64> = segs.iter().map(|(a, b)| point_segment_distance(v, a, b)).collect();
        let g: Vec<f64> = d.iter().map(|d| (-alpha * d * d / (2.0 * sigma * sigma)).exp()).collect();
        let sum: f64 = g.iter().sum();
        if sum > 0.0 {
            data.extend(g.iter().map(|x| x / sum));
        } else {
            fallbacks += 1;
            let nearest = (0..e).fold(0, |best, l| if d[l] < d[best] { l } else { best });
            data.extend((0..e).map(|l| if l == nearest { 1.0 } else { 0.0 }));
        }
    }
    if fallbacks > 0 {
        log::warn!("{fallbacks} vertices are too far from every edge; bound to their nearest edge");
    }
    Ok(SkinningWeights {
        matrix: Tensor::new([points.len(), e], data),
    })
}

pub fn skinning_weights(mesh: &Mesh, skeleton: &Skeleton, sigma: f64, alpha: f64) -> Result<SkinningWeights> {
    skinning_weights_for(&mesh.points(), skeleton, sigma, alpha)
}

/// `x ↦ A x + b`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub linear: Matrix3<f64>,
    pub offset: Vector3<f64>,
}

impl Affine {
    pub const IDENTITY: Self = Self {
        linear: Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        offset: Vector3::new(0.0, 0.0, 0.0),
    };

    /// Rotation `r` about `pivot`.
    pub fn rotation_about(r: &Matrix3<f64>, pivot: &Vector3<f64>) -> Self {
        Self {
            linear: *r,
            offset: pivot - r * pivot,
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.linear * x + self.offset
    }

    /// `self ∘ other`
    pub fn then_apply(&self, other: &Affine) -> Self {
        Self {
            linear: self.linear * other.linear,
            offset: self.linear * other.offset + self.offset,
        }
    }
}

/// Rotation matrix of an axis-angle vector (angle = norm).
pub fn axis_angle_matrix(v: &[f64; 3]) -> Matrix3<f64> {
    let v = Vector3::from(*v);
    if v.norm() == 0.0 {
        return Matrix3::identity();
    }
    Rotation3::new(v).into_inner()
}

/// World transform of every edge: its own rotation about its parent joint
/// (in rest coordinates), preceded down the chain by every ancestor edge's.
pub fn edge_transforms(skeleton: &Skeleton, rotations: &[Matrix3<f64>]) -> Result<Vec<Affine>> {
    skeleton.validate()?;
    if rotations.len() != skeleton.edges.len() {
        return Err(Error::ShapeMismatch {
            entry: "joint rotations".into(),
            expected: vec![skeleton.edges.len(), 3, 3],
            found: vec![rotations.len(), 3, 3],
        });
    }
    for (l, r) in rotations.iter().enumerate() {
        let err = orthonormality_error(r);
        if !(err <= ROTATION_TOL) || r.determinant() < 0.0 {
            return Err(Error::invalid(
                "joint rotation",
                format!("edge {l} is not a rotation: ‖RᵀR − I‖ = {err:.3e}, det = {:.6}", r.determinant()),
            ));
        }
    }
    let parents = skeleton.parent_edges();
    let mut out: Vec<Affine> = Vec::with_capacity(rotations.len());
    for (l, &(p, _)) in skeleton.edges.iter().enumerate() {
        let local = Affine::rotation_about(&rotations[l], &skeleton.joint(p));
        out.push(match parents[l] {
            Some(pe) => out[pe].then_apply(&local),
            None => local,
        });
    }
    Ok(out)
}

fn blend(points: &[Vector3<f64>], transforms: &[Affine], weights: &SkinningWeights) -> Vec<Vector3<f64>> {
    points
        .iter()
        .enumerate()
        .map(|(i, v)| {
            // Blending displacements keeps identity poses exact.
            let shift: Vector3<f64> = weights
                .row(i)
                .iter()
                .zip(transforms)
                .filter(|(w, _)| **w != 0.0)
                .map(|(w, t)| *w * (t.apply(v) - v))
                .sum();
            v + shift
        })
        .collect()
}

/// `v′ = Σ_l W_vl · T_l(v)` with forward-kinematic edge transforms.
pub fn lbs_deform(
    mesh: &Mesh,
    skeleton: &Skeleton,
    rotations: &[Matrix3<f64>],
    weights: &SkinningWeights,
) -> Result<Vec<Vector3<f64>>> {
    if weights.vertices() != mesh.vertices.len() || weights.edges() != skeleton.edges.len() {
        return Err(Error::ShapeMismatch {
            entry: "skinning weights".into(),
            expected: vec![mesh.vertices.len(), skeleton.edges.len()],
            found: weights.matrix.shape().to_vec(),
        });
    }
    let transforms = edge_transforms(skeleton, rotations)?;
    Ok(blend(&mesh.points(), &transforms, weights))
}

/// Move arbitrary points (e.g. Gaussian splat centers) with the same
/// skinning model; covariances are not touched.
pub fn transport_points(
    points: &[Vector3<f64>],
    skeleton: &Skeleton,
    rotations: &[Matrix3<f64>],
    sigma: f64,
    alpha: f64,
) -> Result<Vec<Vector3<f64>>> {
    let weights = skinning_weights_for(points, skeleton, sigma, alpha)?;
    let transforms = edge_transforms(skeleton, rotations)?;
    Ok(blend(points, &transforms, &weights))
}
