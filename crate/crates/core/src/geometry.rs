//! Pinhole camera algebra.
//!
//! World space is the canonical cube `[-1, 1]^3`. Cameras follow the usual
//! computer-vision convention (x right, y down, z forward) and map a world
//! point `X` to homogeneous pixel coordinates `P [X; 1]` with
//! `P = K [R | t]`.
//!
//! Pixel coordinates are continuous. With a zero principal point (as produced
//! by [`make_orbit_rig`]) the origin sits at the image center; use
//! [`pixel_to_array`] / [`array_to_pixel`] to move between that frame and
//! array `(col, row)` positions, where integer values are pixel centers.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Projections with `|depth|` below this are flagged invalid instead of
/// being divided.
pub const DEPTH_EPS: f64 = 1e-6;

/// Rotations must satisfy `RᵀR = I` to this tolerance.
pub const ORTHONORMAL_TOL: f64 = 1e-5;

/// Default focal length of orbit rigs, as a multiple of the image width.
pub const DEFAULT_FOCAL_FACTOR: f64 = 1.2;

pub const RIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub pixel: Vector2<f64>,
    /// Third homogeneous coordinate before division.
    pub depth: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraProjection {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    projection: Matrix3x4<f64>,
}

/// `‖RᵀR − I‖_F`
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

impl CameraProjection {
    /// Compose `P = K [R | t]` after checking that `R` is a proper rotation.
    pub fn compose(intrinsics: Matrix3<f64>, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = orthonormality_error(&rotation);
        if !err.is_finite() || err > ORTHONORMAL_TOL {
            return Err(Error::invalid(
                "rotation",
                format!("not orthonormal: ‖RᵀR − I‖ = {err:.3e} (tolerance {ORTHONORMAL_TOL:e})"),
            ));
        }
        let det = rotation.determinant();
        if det < 0.0 {
            return Err(Error::invalid("rotation", format!("reflection (det = {det:.6})")));
        }
        let mut extrinsic = Matrix3x4::zeros();
        extrinsic.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        extrinsic.set_column(3, &translation);
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            projection: intrinsics * extrinsic,
        })
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    /// Camera center in world coordinates, `−Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn project_point(&self, point: &Vector3<f64>) -> ProjectedPoint {
        project_with(&self.projection, point)
    }

    pub fn project_points(&self, points: &[Vector3<f64>]) -> Vec<ProjectedPoint> {
        points.iter().map(|p| self.project_point(p)).collect()
    }

    /// Derivative of the pixel with respect to the world point. Zero for
    /// invalid projections.
    pub fn project_jacobian(&self, point: &Vector3<f64>) -> Matrix2x3<f64> {
        projection_jacobian(&self.projection, point)
    }

    /// World-space ray (origin, unit direction) through a pixel.
    pub fn back_project(&self, pixel: &Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let k_inv = self
            .intrinsics
            .try_inverse()
            .expect("intrinsics must be invertible to back-project");
        let cam_dir = k_inv * Vector3::new(pixel.x, pixel.y, 1.0);
        let dir = (self.rotation.transpose() * cam_dir).normalize();
        (self.center(), dir)
    }
}

/// Homogeneous projection through an arbitrary 3×4 matrix.
pub fn project_with(p: &Matrix3x4<f64>, point: &Vector3<f64>) -> ProjectedPoint {
    let h = p * point.push(1.0);
    if h.z.abs() < DEPTH_EPS || !h.z.is_finite() {
        return ProjectedPoint {
            pixel: Vector2::zeros(),
            depth: h.z,
            valid: false,
        };
    }
    ProjectedPoint {
        pixel: Vector2::new(h.x / h.z, h.y / h.z),
        depth: h.z,
        valid: true,
    }
}

fn projection_jacobian(p: &Matrix3x4<f64>, point: &Vector3<f64>) -> Matrix2x3<f64> {
    let h = p * point.push(1.0);
    if h.z.abs() < DEPTH_EPS {
        return Matrix2x3::zeros();
    }
    let a = p.fixed_view::<3, 3>(0, 0);
    let inv = 1.0 / h.z;
    let mut j = Matrix2x3::zeros();
    for c in 0..3 {
        j[(0, c)] = (a[(0, c)] - h.x * inv * a[(2, c)]) * inv;
        j[(1, c)] = (a[(1, c)] - h.y * inv * a[(2, c)]) * inv;
    }
    j
}

/// Continuous centered pixel `(u, v)` to array `(col, row)`.
pub fn pixel_to_array(pixel: Vector2<f64>, image_size: (usize, usize)) -> Vector2<f64> {
    let (h, w) = image_size;
    Vector2::new(pixel.x + (w as f64 - 1.0) / 2.0, pixel.y + (h as f64 - 1.0) / 2.0)
}

/// Array `(col, row)` to continuous centered pixel `(u, v)`.
pub fn array_to_pixel(array: Vector2<f64>, image_size: (usize, usize)) -> Vector2<f64> {
    let (h, w) = image_size;
    Vector2::new(array.x - (w as f64 - 1.0) / 2.0, array.y - (h as f64 - 1.0) / 2.0)
}

/// Ordered cameras sharing one image size. View 0 is the input view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<CameraProjection>,
    image_size: (usize, usize),
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraProjection>, image_size: (usize, usize)) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("camera rig", "needs at least one camera"));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::invalid("camera rig", format!("image size {image_size:?}")));
        }
        Ok(Self { cameras, image_size })
    }

    pub fn cameras(&self) -> &[CameraProjection] {
        &self.cameras
    }

    pub fn camera(&self, k: usize) -> &CameraProjection {
        &self.cameras[k]
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// `(height, width)`
    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    /// The first `k` views.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.cameras.len() {
            return Err(Error::invalid(
                "view count",
                format!("{k} requested from a rig of {}", self.cameras.len()),
            ));
        }
        Self::new(self.cameras[..k].to_vec(), self.image_size)
    }

    /// Reorder views; `order` must be a permutation of `0..len`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            cameras: order.iter().map(|&i| self.cameras[i].clone()).collect(),
            image_size: self.image_size,
        }
    }

    pub fn to_record(&self) -> RigRecord {
        let strings = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v.to_string()).collect::<Vec<_>>();
        RigRecord {
            format_version: RIG_FORMAT_VERSION,
            image_size: [self.image_size.0, self.image_size.1],
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraRecord {
                    k: strings(&mut row_major(&c.intrinsics)),
                    r: strings(&mut row_major(&c.rotation)),
                    t: strings(&mut c.translation.iter().copied()),
                })
                .collect(),
        }
    }

    pub fn from_record(record: &RigRecord) -> Result<Self> {
        if record.format_version != RIG_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                format: "camera rig",
                found: record.format_version,
                supported: RIG_FORMAT_VERSION,
            });
        }
        let parse = |what: &str, v: &[String], n: usize| -> Result<Vec<f64>> {
            if v.len() != n {
                return Err(Error::invalid(what, format!("expected {n} numbers, found {}", v.len())));
            }
            v.iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::invalid(what, format!("`{s}`: {e}"))))
                .collect()
        };
        let cameras = record
            .cameras
            .iter()
            .map(|c| {
                let k = Matrix3::from_row_slice(&parse("K", &c.k, 9)?);
                let r = Matrix3::from_row_slice(&parse("R", &c.r, 9)?);
                let t = Vector3::from_row_slice(&parse("t", &c.t, 3)?);
                CameraProjection::compose(k, r, t)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras, (record.image_size[0], record.image_size[1]))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_record()).expect("rig record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: RigRecord =
            serde_json::from_str(text).map_err(|e| Error::json("<camera rig>", e))?;
        Self::from_record(&record)
    }
}

fn row_major(m: &Matrix3<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..3).flat_map(move |r| (0..3).map(move |c| m[(r, c)]))
}

/// On-disk camera rig: per camera a row-major 3×3 `K`, 3×3 `R` and `t`,
/// every number a decimal string that round-trips `f64` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigRecord {
    pub format_version: u32,
    /// `[height, width]`
    pub image_size: [usize; 2],
    pub cameras: Vec<CameraRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    #[serde(rename = "K")]
    pub k: Vec<String>,
    #[serde(rename = "R")]
    pub r: Vec<String>,
    pub t: Vec<String>,
}

/// Rotation whose rows are the camera axes (right, down, forward) for a
/// camera at `center` looking at the world origin with `+y` up.
pub fn look_at_origin(center: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let forward = -center.normalize();
    let up = Vector3::y();
    let right = forward.cross(&up);
    if right.norm() < 1e-9 {
        return Err(Error::invalid("camera placement", "viewing direction is parallel to the up axis"));
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    Ok(Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]))
}

/// Cameras on a circle of `radius` at `elevation_deg`, equally spaced in
/// azimuth starting from the `+z` axis, all looking at the origin.
///
/// Intrinsics use a zero principal point and a focal length of
/// [`DEFAULT_FOCAL_FACTOR`] times the image width.
pub fn make_orbit_rig(
    num_views: usize,
    elevation_deg: f64,
    radius: f64,
    image_size: (usize, usize),
) -> Result<CameraRig> {
    make_orbit_rig_with_focal(num_views, elevation_deg, radius, image_size, DEFAULT_FOCAL_FACTOR * image_size.1 as f64)
}

pub fn make_orbit_rig_with_focal(
    num_views: usize,
    elevation_deg: f64,
    radius: f64,
    image_size: (usize, usize),
    focal_px: f64,
) -> Result<CameraRig> {
    if num_views == 0 {
        return Err(Error::invalid("orbit rig", "num_views must be at least 1"));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid("orbit rig", format!("radius must be positive, got {radius}")));
    }
    if image_size.0 == 0 || image_size.1 == 0 {
        return Err(Error::invalid("orbit rig", format!("image size must be positive, got {image_size:?}")));
    }
    if !(focal_px > 0.0) {
        return Err(Error::invalid("orbit rig", format!("focal length must be positive, got {focal_px}")));
    }
    if elevation_deg.abs() >= 90.0 {
        return Err(Error::invalid("orbit rig", format!("elevation {elevation_deg}° leaves no horizon")));
    }
    let intrinsics = Matrix3::new(focal_px, 0.0, 0.0, 0.0, focal_px, 0.0, 0.0, 0.0, 1.0);
    let elev = elevation_deg.to_radians();
    let cameras = (0..num_views)
        .map(|k| {
            let azimuth = std::f64::consts::TAU * k as f64 / num_views as f64;
            let center = radius * Vector3::new(elev.cos() * azimuth.sin(), elev.sin(), elev.cos() * azimuth.cos());
            let rotation = look_at_origin(&center)?;
            let translation = -(rotation * center);
            CameraProjection::compose(intrinsics, rotation, translation)
        })
        .collect::<Result<Vec<_>>>()?;
    CameraRig::new(cameras, image_size)
}

/// Differentiable projection of `points` (`[N, 3]`) into array coordinates
/// (`[N, 2]`, columns `(col, row)`).
///
/// Returns the per-point validity flags alongside; invalid points produce
/// `(0, 0)` with zero gradient.
pub fn project_points_on_tape(
    tape: &mut Tape,
    points: Var,
    camera: &CameraProjection,
    image_size: (usize, usize),
) -> (Var, Vec<bool>) {
    let pts = tape.value(points);
    assert_eq!(pts.shape()[1], 3, "points must be [N, 3]");
    let n = pts.dim(0);
    let p = *camera.projection();
    let mut out = vec![0.0; n * 2];
    let mut valid = vec![false; n];
    let mut jacobians = vec![Matrix2x3::zeros(); n];
    for i in 0..n {
        let x = Vector3::from_row_slice(&pts.data()[i * 3..i * 3 + 3]);
        let proj = project_with(&p, &x);
        if proj.valid {
            let a = pixel_to_array(proj.pixel, image_size);
            out[i * 2] = a.x;
            out[i * 2 + 1] = a.y;
            valid[i] = true;
            jacobians[i] = projection_jacobian(&p, &x);
        }
    }
    let var = tape.push(
        Tensor::new([n, 2], out),
        &[points],
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut gp = vec![0.0; n * 3];
            for (i, j) in jacobians.iter().enumerate() {
                for c in 0..3 {
                    gp[i * 3 + c] = g[i * 2] * j[(0, c)] + g[i * 2 + 1] * j[(1, c)];
                }
            }
            vec![Some(Tensor::new([n, 3], gp))]
        }),
    );
    (var, valid)
}
