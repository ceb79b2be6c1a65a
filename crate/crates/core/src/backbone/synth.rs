//! Synthetic articulated figures: capsule limbs on a random pose, ray-cast
//! into every view with a z-buffer, plus part-indicator feature stacks.

use super::MultiViewSample;
use crate::error::{Error, Result};
use crate::geometry::{array_to_pixel, CameraProjection, CameraRig};
use crate::rng;
use crate::tensor::Tensor;
use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Posed figures, limb radii included, must fit in `[-CUBE_LIMIT, CUBE_LIMIT]^3`.
pub const CUBE_LIMIT: f64 = 0.95;

/// Falloff length (world units) of the soft occupancy features.
const FEATURE_FALLOFF: f64 = 0.08;
/// Weight of the soft term in the full-resolution layer.
const SOFT_BLEND: f64 = 0.3;
const MAX_CLAMPS: usize = 8;

/// Articulated figure description. Joint `j` hangs off `limb_topology[j]`
/// (`None` for the root); every non-root joint ends one limb, and limbs are
/// numbered in joint order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub joint_count: usize,
    pub limb_topology: Vec<Option<usize>>,
    /// One per limb.
    pub limb_radii: Vec<f64>,
    /// Per joint `[min, max]` radians. The root's range is the global yaw;
    /// other joints swing their limb about two axes by angles in the range.
    pub joint_angle_ranges: Vec<[f64; 2]>,
    pub appearance_seed: u64,
    /// Per joint distance to its parent (ignored for the root).
    pub bone_lengths: Vec<f64>,
    /// Per joint rest direction from its parent (ignored for the root).
    pub rest_directions: Vec<[f64; 3]>,
}

impl SceneSpec {
    /// Six-joint figure: pelvis, neck, two hands off the neck, two feet off
    /// the pelvis.
    pub fn figure(appearance_seed: u64) -> Self {
        use std::f64::consts::PI;
        Self {
            joint_count: 6,
            limb_topology: vec![None, Some(0), Some(1), Some(1), Some(0), Some(0)],
            limb_radii: vec![0.11, 0.07, 0.07, 0.08, 0.08],
            joint_angle_ranges: vec![[-PI, PI], [-0.35, 0.35], [-0.8, 0.8], [-0.8, 0.8], [-0.5, 0.5], [-0.5, 0.5]],
            appearance_seed,
            bone_lengths: vec![0.0, 0.6, 0.55, 0.55, 0.7, 0.7],
            rest_directions: vec![
                [0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, -0.3, 0.0],
                [-1.0, -0.3, 0.0],
                [0.3, -1.0, 0.0],
                [-0.3, -1.0, 0.0],
            ],
        }
    }

    pub fn single_joint(appearance_seed: u64) -> Self {
        Self {
            joint_count: 1,
            limb_topology: vec![None],
            limb_radii: vec![],
            joint_angle_ranges: vec![[0.0, 0.0]],
            appearance_seed,
            bone_lengths: vec![0.0],
            rest_directions: vec![[0.0, 0.0, 0.0]],
        }
    }

    /// `(parent, child)` per limb.
    pub fn limbs(&self) -> Vec<(usize, usize)> {
        self.limb_topology
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (p, j)))
            .collect()
    }

    pub fn root(&self) -> usize {
        self.limb_topology.iter().position(Option::is_none).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joint_count;
        let bad = |reason: String| Err(Error::invalid("scene spec", reason));
        if j == 0 {
            return bad("joint_count must be at least 1".into());
        }
        for (name, len) in [
            ("limb_topology", self.limb_topology.len()),
            ("joint_angle_ranges", self.joint_angle_ranges.len()),
            ("bone_lengths", self.bone_lengths.len()),
            ("rest_directions", self.rest_directions.len()),
        ] {
            if len != j {
                return bad(format!("{name} has {len} entries for {j} joints"));
            }
        }
        if self.limb_topology.iter().filter(|p| p.is_none()).count() != 1 {
            return bad("topology must have exactly one root".into());
        }
        if let Some(p) = self.limb_topology.iter().flatten().find(|&&p| p >= j) {
            return bad(format!("parent index {p} out of range"));
        }
        if self.order().len() != j {
            return bad("topology is not a connected tree".into());
        }
        let limbs = self.limbs();
        if self.limb_radii.len() != limbs.len() {
            return bad(format!("{} radii for {} limbs", self.limb_radii.len(), limbs.len()));
        }
        if let Some(r) = self.limb_radii.iter().find(|r| !(**r > 0.0)) {
            return bad(format!("limb radius {r} must be positive"));
        }
        for &(_, c) in &limbs {
            if !(self.bone_lengths[c] > 0.0) {
                return bad(format!("bone length of joint {c} must be positive"));
            }
            if Vector3::from(self.rest_directions[c]).norm() < 1e-9 {
                return bad(format!("rest direction of joint {c} is zero"));
            }
        }
        if self.joint_angle_ranges.iter().any(|[a, b]| !(a <= b)) {
            return bad("angle ranges must satisfy min ≤ max".into());
        }
        Ok(())
    }

    /// Joints in breadth-first order from the root.
    fn order(&self) -> Vec<usize> {
        let mut order = vec![self.root()];
        let mut i = 0;
        while i < order.len() {
            let p = order[i];
            order.extend((0..self.joint_count).filter(|&c| self.limb_topology[c] == Some(p)));
            i += 1;
            if order.len() > self.joint_count {
                break;
            }
        }
        order
    }

    fn pose(&self, yaw: f64, swings: &[(f64, f64)], shrink: f64) -> Vec<Vector3<f64>> {
        let yaw_rot = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
        let mut pos = vec![Vector3::zeros(); self.joint_count];
        for &c in &self.order()[1..] {
            let p = self.limb_topology[c].unwrap();
            let (a, b) = swings[c];
            let swing = Rotation3::from_axis_angle(&Vector3::z_axis(), a * shrink)
                * Rotation3::from_axis_angle(&Vector3::x_axis(), b * shrink);
            let dir = yaw_rot * swing * Vector3::from(self.rest_directions[c]).normalize();
            pos[c] = pos[p] + self.bone_lengths[c] * dir;
        }
        let (lo, hi) = bounds(&pos);
        let center = (lo + hi) / 2.0;
        pos.iter().map(|p| p - center).collect()
    }

    fn fits(&self, joints: &[Vector3<f64>]) -> bool {
        let r = self.limb_radii.iter().copied().fold(0.0, f64::max);
        joints.iter().all(|p| p.amax() + r <= CUBE_LIMIT)
    }
}

fn bounds(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

#[derive(Debug, Clone)]
struct Capsule {
    a: Vector3<f64>,
    b: Vector3<f64>,
    radius: f64,
}

impl Capsule {
    /// Nearest ray parameter of intersection, for a unit direction.
    fn intersect(&self, ro: &Vector3<f64>, rd: &Vector3<f64>) -> Option<f64> {
        let ba = self.b - self.a;
        let oa = ro - self.a;
        let baba = ba.dot(&ba);
        let bard = ba.dot(rd);
        let baoa = ba.dot(&oa);
        let rdoa = rd.dot(&oa);
        let oaoa = oa.dot(&oa);
        let r2 = self.radius * self.radius;
        let a = baba - bard * bard;
        if a > 1e-12 {
            let b = baba * rdoa - baoa * bard;
            let c = baba * oaoa - baoa * baoa - r2 * baba;
            let h = b * b - a * c;
            if h < 0.0 {
                return None;
            }
            let t = (-b - h.sqrt()) / a;
            let y = baoa + t * bard;
            if y > 0.0 && y < baba {
                return (t > 0.0).then_some(t);
            }
        }
        // End caps, nearest hit over both spheres.
        [self.a, self.b]
            .iter()
            .filter_map(|center| {
                let oc = ro - center;
                let b = rd.dot(&oc);
                let h = b * b - (oc.dot(&oc) - r2);
                (h >= 0.0).then(|| -b - h.sqrt()).filter(|t| *t > 0.0)
            })
            .min_by(f64::total_cmp)
    }

    fn closest_on_axis(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let ba = self.b - self.a;
        let s = ((p - self.a).dot(&ba) / ba.norm_squared().max(1e-300)).clamp(0.0, 1.0);
        self.a + s * ba
    }

    /// Distance between the ray's line and the axis segment.
    fn ray_axis_distance(&self, ro: &Vector3<f64>, rd: &Vector3<f64>) -> f64 {
        let project = |v: Vector3<f64>| v - rd * rd.dot(&v);
        let w0 = project(self.a - ro);
        let e = project(self.b - self.a);
        let ee = e.norm_squared();
        let s = if ee > 1e-300 { (-w0.dot(&e) / ee).clamp(0.0, 1.0) } else { 0.0 };
        (w0 + s * e).norm()
    }
}

struct RayCaster {
    k_inv: Matrix3<f64>,
    rt: Matrix3<f64>,
    origin: Vector3<f64>,
    size: (usize, usize),
}

impl RayCaster {
    fn new(camera: &CameraProjection, size: (usize, usize)) -> Self {
        Self {
            k_inv: camera.intrinsics().try_inverse().expect("invertible intrinsics"),
            rt: camera.rotation().transpose(),
            origin: camera.center(),
            size,
        }
    }

    /// Ray through continuous array position `(col, row)` of a raster whose
    /// pixels are `scale` image pixels wide.
    fn ray(&self, col: f64, row: f64, scale: f64) -> Vector3<f64> {
        let full = Vector2::new((col + 0.5) * scale - 0.5, (row + 0.5) * scale - 0.5);
        let px = array_to_pixel(full, self.size);
        (self.rt * (self.k_inv * Vector3::new(px.x, px.y, 1.0))).normalize()
    }
}

/// Everything the oracle knows beyond the sample itself.
#[derive(Debug, Clone)]
pub struct OracleDiagnostics {
    /// Joint positions, `[J]`.
    pub joints: Vec<Vector3<f64>>,
    /// `[view][limb]`: the limb's midpoint is in frame and is the first
    /// surface its own ray meets.
    pub midpoint_unoccluded: Vec<Vec<bool>>,
    /// Times the pose angles were halved to fit the cube.
    pub clamps: usize,
}

pub fn synth_generate(spec: &SceneSpec, rig: &CameraRig, seed: u64) -> Result<MultiViewSample> {
    synth_generate_with_diagnostics(spec, rig, seed).map(|(s, _)| s)
}

pub fn synth_generate_with_diagnostics(
    spec: &SceneSpec,
    rig: &CameraRig,
    seed: u64,
) -> Result<(MultiViewSample, OracleDiagnostics)> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[rng::tag::SAMPLE]);
    let [ylo, yhi] = spec.joint_angle_ranges[spec.root()];
    let yaw = if yhi > ylo { rng.random_range(ylo..yhi) } else { ylo };
    let swings: Vec<(f64, f64)> = spec
        .joint_angle_ranges
        .iter()
        .map(|&[lo, hi]| {
            let mut draw = || if hi > lo { rng.random_range(lo..hi) } else { lo };
            (draw(), draw())
        })
        .collect();

    let mut shrink = 1.0;
    let mut clamps = 0;
    let mut joints = spec.pose(yaw, &swings, shrink);
    while !spec.fits(&joints) {
        if clamps == MAX_CLAMPS {
            return Err(Error::invalid("scene spec", "rest pose does not fit inside the canonical cube"));
        }
        clamps += 1;
        shrink = if clamps == MAX_CLAMPS { 0.0 } else { shrink * 0.5 };
        log::info!("sample {seed}: figure leaves the cube, regenerating with angles scaled by {shrink}");
        joints = spec.pose(yaw, &swings, shrink);
    }

    let limbs: Vec<Capsule> = spec
        .limbs()
        .iter()
        .zip(&spec.limb_radii)
        .map(|(&(p, c), &radius)| Capsule {
            a: joints[p],
            b: joints[c],
            radius,
        })
        .collect();
    let mut app = rng::stream(spec.appearance_seed, &[rng::tag::APPEARANCE]);
    let colors: Vec<[f64; 3]> = limbs
        .iter()
        .map(|_| [app.random_range(0.3..1.0), app.random_range(0.3..1.0), app.random_range(0.3..1.0)])
        .collect();

    let k = rig.len();
    let (h, w) = rig.image_size();
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let half_ok = h % 2 == 0 && w % 2 == 0;
    let (h1, w1) = if half_ok { (h2, w2) } else { (h, w) };
    let scale1 = if half_ok { 2.0 } else { 1.0 };
    let nl = limbs.len();
    let mut images = Tensor::zeros([k, 3, h, w]);
    let mut masks = Tensor::zeros([k, h, w]);
    let mut feat0 = Tensor::zeros([nl, k, h, w]);
    let mut feat1 = Tensor::zeros([nl, k, h1, w1]);
    let mut midpoint_unoccluded = vec![vec![false; nl]; k];

    for (v, camera) in rig.cameras().iter().enumerate() {
        let caster = RayCaster::new(camera, (h, w));
        let ro = caster.origin;
        for row in 0..h {
            for col in 0..w {
                let rd = caster.ray(col as f64, row as f64, 1.0);
                let hit = first_hit(&limbs, &ro, &rd);
                let pix = row * w + col;
                if let Some((l, t)) = hit {
                    let p = ro + t * rd;
                    let normal = (p - limbs[l].closest_on_axis(&p)).normalize();
                    let shade = 0.35 + 0.65 * normal.dot(&-rd).max(0.0);
                    for c in 0..3 {
                        images.data_mut()[((v * 3 + c) * h + row) * w + col] = colors[l][c] * shade;
                    }
                    masks.data_mut()[v * h * w + pix] = 1.0;
                }
                for (l, cap) in limbs.iter().enumerate() {
                    let ind = if hit.map(|(i, _)| i) == Some(l) { 1.0 } else { 0.0 };
                    let soft = soft_occupancy(cap, &ro, &rd);
                    feat0.data_mut()[((l * k + v) * h + row) * w + col] = (1.0 - SOFT_BLEND) * ind + SOFT_BLEND * soft;
                }
            }
        }
        for row in 0..h1 {
            for col in 0..w1 {
                let rd = caster.ray(col as f64, row as f64, scale1);
                for (l, cap) in limbs.iter().enumerate() {
                    feat1.data_mut()[((l * k + v) * h1 + row) * w1 + col] = soft_occupancy(cap, &ro, &rd);
                }
            }
        }
        for (l, cap) in limbs.iter().enumerate() {
            let mid = (cap.a + cap.b) / 2.0;
            let proj = camera.project_point(&mid);
            let arr = crate::geometry::pixel_to_array(proj.pixel, (h, w));
            let in_frame = proj.valid
                && proj.depth > 0.0
                && arr.x >= -0.5
                && arr.y >= -0.5
                && arr.x < w as f64 - 0.5
                && arr.y < h as f64 - 0.5;
            if in_frame {
                let rd = (mid - ro).normalize();
                midpoint_unoccluded[v][l] = first_hit(&limbs, &ro, &rd).map(|(i, _)| i) == Some(l);
            }
        }
    }

    let gt = Tensor::new([spec.joint_count, 3], joints.iter().flat_map(|p| [p.x, p.y, p.z]).collect());
    let sample = MultiViewSample {
        images,
        masks,
        rig: rig.clone(),
        layer_features: Some(vec![feat0, feat1]),
        ground_truth_joints: Some(gt),
    };
    Ok((
        sample,
        OracleDiagnostics {
            joints,
            midpoint_unoccluded,
            clamps,
        },
    ))
}

fn first_hit(limbs: &[Capsule], ro: &Vector3<f64>, rd: &Vector3<f64>) -> Option<(usize, f64)> {
    limbs
        .iter()
        .enumerate()
        .filter_map(|(l, c)| c.intersect(ro, rd).map(|t| (l, t)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

fn soft_occupancy(cap: &Capsule, ro: &Vector3<f64>, rd: &Vector3<f64>) -> f64 {
    let gap = (cap.ray_axis_distance(ro, rd) - cap.radius).max(0.0);
    (-gap * gap / (2.0 * FEATURE_FALLOFF * FEATURE_FALLOFF)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capsule_hits_body_and_caps() {
        let cap = Capsule {
            a: Vector3::new(-1.0, 0.0, 0.0),
            b: Vector3::new(1.0, 0.0, 0.0),
            radius: 0.5,
        };
        let ro = Vector3::new(0.0, 0.0, 5.0);
        let t = cap.intersect(&ro, &-Vector3::z()).unwrap();
        assert!((t - 4.5).abs() < 1e-12);
        let ro = Vector3::new(1.2, 0.0, 5.0);
        let t = cap.intersect(&ro, &-Vector3::z()).unwrap();
        assert!((t - (5.0 - (0.25f64 - 0.04).sqrt())).abs() < 1e-12);
        assert!(cap.intersect(&Vector3::new(2.0, 0.0, 5.0), &-Vector3::z()).is_none());
        // Ray along the axis.
        let t = cap.intersect(&Vector3::new(5.0, 0.0, 0.0), &-Vector3::x()).unwrap();
        assert!((t - 3.5).abs() < 1e-12);
    }

    #[test]
    fn ray_axis_distance_matches_geometry() {
        let cap = Capsule {
            a: Vector3::new(-1.0, 0.0, 0.0),
            b: Vector3::new(1.0, 0.0, 0.0),
            radius: 0.1,
        };
        let d = cap.ray_axis_distance(&Vector3::new(0.0, 0.3, 5.0), &-Vector3::z());
        assert!((d - 0.3).abs() < 1e-12);
        let d = cap.ray_axis_distance(&Vector3::new(4.0, 0.0, 5.0), &-Vector3::z());
        assert!((d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn figure_spec_is_valid() {
        SceneSpec::figure(0).validate().unwrap();
        SceneSpec::single_joint(0).validate().unwrap();
        let mut s = SceneSpec::figure(0);
        s.limb_topology[0] = Some(1);
        assert!(s.validate().is_err());
        let mut s = SceneSpec::figure(0);
        s.limb_radii[2] = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn oversized_figure_is_clamped_into_the_cube() {
        let mut s = SceneSpec::figure(0);
        s.joint_angle_ranges = vec![[0.0, 0.0]; 6];
        s.joint_angle_ranges[2] = [1.5, 1.6];
        s.joint_angle_ranges[3] = [1.5, 1.6];
        s.bone_lengths = vec![0.0, 0.6, 0.8, 0.8, 0.7, 0.7];
        let rig = crate::geometry::make_orbit_rig(1, 10.0, 3.5, (16, 16)).unwrap();
        let (_, diag) = synth_generate_with_diagnostics(&s, &rig, 3).unwrap();
        assert!(s.fits(&diag.joints));
        assert!(diag.clamps >= 1);
    }
}
