//! Pinhole cameras, 3D↔2D projection, lifting of 2D detections into BEV states,
//! and rigid ego-motion transforms.
//!
//! Conventions: the camera frame is x right, y down, z forward. Extrinsics map
//! world (ego) coordinates into the camera frame.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for rotation orthonormality and `det = +1`.
pub const ROTATION_TOL: f64 = 1e-9;
/// Points with camera-frame depth at or below this are behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;
/// Default minimum max-bin probability for a detection's depth distribution.
pub const DEFAULT_DEPTH_CONFIDENCE_MIN: f64 = 0.3;

pub type Point3 = Vector3<f64>;

fn check_rotation(r: &Matrix3<f64>, what: &str) -> Result<()> {
    let gram = r.transpose() * r - Matrix3::identity();
    let max_dev = gram.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let det = r.determinant();
    if !max_dev.is_finite() || max_dev > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
        return Err(Error::Invalid(format!(
            "{what}: rotation is not orthonormal with det +1 (max |RᵀR - I| = {max_dev:e}, det = {det})"
        )));
    }
    Ok(())
}

fn homogeneous(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    m
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Rotation about +z by `yaw` radians.
pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Pinhole camera with a world→camera extrinsic.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub camera_id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    world_to_camera: Matrix4<f64>,
    camera_to_world: Matrix4<f64>,
    intrinsic: Matrix4<f64>,
    intrinsic_inv: Matrix4<f64>,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        camera_id: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::Invalid(format!(
                "camera {camera_id}: focal lengths must be positive"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid(format!(
                "camera {camera_id}: non-finite parameters"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!(
                "camera {camera_id}: image extent must be positive"
            )));
        }
        check_rotation(&rotation, &format!("camera {camera_id}"))?;

        let world_to_camera = homogeneous(&rotation, &translation);
        let rt = rotation.transpose();
        let camera_to_world = homogeneous(&rt, &(-(rt * translation)));
        #[rustfmt::skip]
        let intrinsic = Matrix4::new(
            fx, 0.0, cx, 0.0,
            0.0, fy, cy, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        #[rustfmt::skip]
        let intrinsic_inv = Matrix4::new(
            1.0 / fx, 0.0, -cx / fx, 0.0,
            0.0, 1.0 / fy, -cy / fy, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        Ok(Self {
            camera_id,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
            world_to_camera,
            camera_to_world,
            intrinsic,
            intrinsic_inv,
        })
    }

    /// Camera at the world origin looking down +z.
    pub fn identity(
        camera_id: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        Self::new(
            camera_id,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            Matrix3::identity(),
            Vector3::zeros(),
        )
    }

    /// Camera mounted at `position` (world frame, z up) looking horizontally along `yaw`.
    #[allow(clippy::too_many_arguments)]
    pub fn looking_along(
        camera_id: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        position: Point3,
        yaw: f64,
    ) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        // rows: right, down, forward
        #[rustfmt::skip]
        let rotation = Matrix3::new(
            s, -c, 0.0,
            0.0, 0.0, -1.0,
            c, s, 0.0,
        );
        let translation = -(rotation * position);
        Self::new(
            camera_id,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn world_to_camera(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    pub fn camera_to_world(&self) -> &Matrix4<f64> {
        &self.camera_to_world
    }

    pub fn intrinsic(&self) -> &Matrix4<f64> {
        &self.intrinsic
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < f64::from(self.width) && v < f64::from(self.height)
    }
}

/// Result of projecting a 3D point into one camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Projection {
    /// Pixel column; NaN when the point is behind the camera.
    pub u: f64,
    /// Pixel row; NaN when the point is behind the camera.
    pub v: f64,
    /// Camera-frame z coordinate.
    pub depth: f64,
    pub in_front: bool,
}

/// Applies the extrinsic then the intrinsic.
pub fn project_point(cam: &CameraModel, p: &Point3) -> Projection {
    let pc = cam.world_to_camera * Vector4::new(p.x, p.y, p.z, 1.0);
    let depth = pc.z;
    if depth <= MIN_DEPTH {
        return Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth,
            in_front: false,
        };
    }
    let img = cam.intrinsic * Vector4::new(pc.x / depth, pc.y / depth, 1.0, 1.0);
    Projection {
        u: img.x,
        v: img.y,
        depth,
        in_front: true,
    }
}

/// Discrete depth distribution attached to a detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthDistribution {
    /// Bin centers in meters.
    pub bins: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DepthDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.bins.is_empty() || self.bins.len() != self.probs.len() {
            return Err(Error::Invalid(format!(
                "depth distribution has {} bins and {} probabilities",
                self.bins.len(),
                self.probs.len()
            )));
        }
        if self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid("depth probability outside [0, 1]".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "depth probabilities sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    pub fn expected(&self) -> f64 {
        self.bins.iter().zip(&self.probs).map(|(b, p)| b * p).sum()
    }

    pub fn max_probability(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }
}

/// A 2D box from one camera together with its semantic vector and depth estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub camera_id: u32,
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
    pub z_sem: Vec<f32>,
    pub score: f64,
    /// Expected depth in meters.
    pub depth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_distribution: Option<DepthDistribution>,
}

impl Detection2D {
    /// Builds a detection whose scalar depth is the expectation of `dist`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_distribution(
        camera_id: u32,
        u: f64,
        v: f64,
        w: f64,
        h: f64,
        z_sem: Vec<f32>,
        score: f64,
        dist: DepthDistribution,
    ) -> Result<Self> {
        dist.validate()?;
        let det = Self {
            camera_id,
            u,
            v,
            w,
            h,
            z_sem,
            score,
            depth: dist.expected(),
            depth_distribution: Some(dist),
        };
        det.validate()?;
        Ok(det)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::Invalid(format!(
                "detection box size must be positive, got {}x{}",
                self.w, self.h
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Invalid(format!(
                "detection score {} outside [0, 1]",
                self.score
            )));
        }
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return Err(Error::Invalid(format!(
                "detection depth must be positive, got {}",
                self.depth
            )));
        }
        if !(self.u.is_finite() && self.v.is_finite()) {
            return Err(Error::Invalid("detection center is not finite".into()));
        }
        if let Some(d) = &self.depth_distribution {
            d.validate()?;
        }
        Ok(())
    }

    /// Max-bin probability of the depth distribution; 1 when none is attached.
    pub fn depth_confidence(&self) -> f64 {
        self.depth_distribution
            .as_ref()
            .map_or(1.0, DepthDistribution::max_probability)
    }
}

/// 9-dim BEV object state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RefState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
}

impl RefState {
    pub const DIM: usize = 9;

    pub fn center(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }

    pub fn with_center(mut self, c: &Point3) -> Self {
        self.x = c.x;
        self.y = c.y;
        self.z = c.z;
        self
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.x, self.y, self.z, self.w, self.l, self.h, self.theta, self.vx, self.vy,
        ]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            z: a[2],
            w: a[3],
            l: a[4],
            h: a[5],
            theta: a[6],
            vx: a[7],
            vy: a[8],
        }
    }
}

/// Lifts a 2D detection into a BEV reference state.
///
/// The center is `K⁻¹ I⁻¹ [u·d, v·d, d, 1]ᵀ` (intrinsic unprojection, then
/// camera→world), the size is `d·w/fx` and `d·h/fy` with `l = w`, and heading and
/// velocity are zero.
pub fn lift_detection(cam: &CameraModel, det: &Detection2D) -> Result<RefState> {
    let d = det.depth;
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::Invalid(format!(
            "cannot lift detection with depth {d}"
        )));
    }
    if det.camera_id != cam.camera_id {
        return Err(Error::Reference(format!(
            "detection from camera {} lifted with camera {}",
            det.camera_id, cam.camera_id
        )));
    }
    let pixel = Vector4::new(det.u * d, det.v * d, d, 1.0);
    let world = cam.camera_to_world * (cam.intrinsic_inv * pixel);
    let w = d * det.w / cam.fx;
    let h = d * det.h / cam.fy;
    Ok(RefState {
        x: world.x,
        y: world.y,
        z: world.z,
        w,
        l: w,
        h,
        theta: 0.0,
        vx: 0.0,
        vy: 0.0,
    })
}

/// Rigid motion `p ↦ R p + T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoMotion {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl EgoMotion {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation, "ego motion")?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation_only(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Planar motion: yaw rotation about +z followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: yaw_rotation(yaw),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Heading change induced in the BEV plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        homogeneous(&self.rotation, &self.translation)
    }
}

/// `compose_ego(a, b).apply(p) == a.apply(b.apply(p))`.
pub fn compose_ego(a: &EgoMotion, b: &EgoMotion) -> EgoMotion {
    EgoMotion {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn apply_ego(e: &EgoMotion, p: &Point3) -> Point3 {
    e.apply(p)
}

/// Camera rig; ids are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<CameraModel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraRecord {
    id: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraModel>) -> Result<Self> {
        for (i, c) in cameras.iter().enumerate() {
            if cameras[..i].iter().any(|o| o.camera_id == c.camera_id) {
                return Err(Error::Invalid(format!(
                    "duplicate camera id {}",
                    c.camera_id
                )));
            }
        }
        Ok(Self { cameras })
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn get(&self, camera_id: u32) -> Option<&CameraModel> {
        self.cameras.iter().find(|c| c.camera_id == camera_id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CameraModel> {
        self.cameras.iter()
    }

    /// Parses the JSON rig format: a list of
    /// `{id, fx, fy, cx, cy, width, height, rotation: [9 row-major], translation: [3]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let records: Vec<CameraRecord> = serde_json::from_str(text)?;
        let cameras = records
            .into_iter()
            .map(|r| {
                CameraModel::new(
                    r.id,
                    r.fx,
                    r.fy,
                    r.cx,
                    r.cy,
                    r.width,
                    r.height,
                    Matrix3::from_row_slice(&r.rotation),
                    Vector3::from_row_slice(&r.translation),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras)
    }

    pub fn to_json(&self) -> Result<String> {
        let records: Vec<CameraRecord> = self
            .cameras
            .iter()
            .map(|c| {
                let mut rotation = [0.0; 9];
                for r in 0..3 {
                    for col in 0..3 {
                        rotation[r * 3 + col] = c.rotation[(r, col)];
                    }
                }
                CameraRecord {
                    id: c.camera_id,
                    fx: c.fx,
                    fy: c.fy,
                    cx: c.cx,
                    cy: c.cy,
                    width: c.width,
                    height: c.height,
                    rotation,
                    translation: [c.translation.x, c.translation.y, c.translation.z],
                }
            })
            .collect();
        Ok(serde_json::to_string_pretty(&records)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl<'a> IntoIterator for &'a CameraRig {
    type Item = &'a CameraModel;
    type IntoIter = std::slice::Iter<'a, CameraModel>;

    fn into_iter(self) -> Self::IntoIter {
        self.cameras.iter()
    }
}

/// Parses a JSON list of [`Detection2D`] records and validates each.
pub fn detections_from_json(text: &str) -> Result<Vec<Detection2D>> {
    let dets: Vec<Detection2D> = serde_json::from_str(text)?;
    for d in &dets {
        d.validate()?;
    }
    Ok(dets)
}
