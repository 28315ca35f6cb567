//! Synthetic multi-camera scenes that stand in for a trained image backbone.
//!
//! Boxes move at constant velocity in a world frame that coincides with the
//! first ego frame. Each frame reports boxes, detections and feature maps in its
//! own ego frame.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    project_point, wrap_angle, CameraModel, CameraRig, Detection2D, EgoMotion, Point3, RefState,
};
use crate::sampling::{FeatureMap, FeaturePyramid, Level};

/// Minimum camera depth for a box center to count as visible.
const MIN_VISIBLE_DEPTH: f64 = 1.0;
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_boxes: usize,
    pub num_cameras: usize,
    pub num_frames: usize,
    /// Seconds between frames.
    pub frame_dt: f64,
    /// Ego forward speed (m/s).
    pub ego_speed: f64,
    /// Ego yaw rate (rad/s).
    pub ego_yaw_rate: f64,
    /// Standard deviation of detection pixel noise.
    pub pixel_noise: f64,
    /// Standard deviation of detection depth noise (meters).
    pub depth_noise: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    /// Radius of the camera ring around the ego origin.
    pub rig_radius: f64,
    pub camera_height: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub max_object_speed: f64,
    pub num_classes: usize,
    pub feature_channels: usize,
    /// Blob sigma as a fraction of the smaller projected box side.
    pub blob_sigma_scale: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_boxes: 12,
            num_cameras: 6,
            num_frames: 6,
            frame_dt: 0.5,
            ego_speed: 5.0,
            ego_yaw_rate: 0.05,
            pixel_noise: 0.0,
            depth_noise: 0.0,
            image_width: 704,
            image_height: 256,
            focal: 500.0,
            rig_radius: 1.0,
            camera_height: 1.5,
            min_range: 6.0,
            max_range: 35.0,
            max_object_speed: 2.0,
            num_classes: 10,
            feature_channels: 64,
            blob_sigma_scale: 0.25,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_cameras == 0 || self.num_frames == 0 {
            return Err(Error::Config(
                "a scene needs at least one camera and one frame".into(),
            ));
        }
        if self.image_width < 32 || self.image_height < 32 {
            return Err(Error::Config("image extent must be at least 32x32".into()));
        }
        if !(self.focal > 0.0 && self.frame_dt > 0.0) {
            return Err(Error::Config(
                "focal length and frame_dt must be positive".into(),
            ));
        }
        if !(self.min_range > self.rig_radius && self.max_range >= self.min_range) {
            return Err(Error::Config(
                "need rig_radius < min_range <= max_range".into(),
            ));
        }
        if !(self.pixel_noise >= 0.0 && self.depth_noise >= 0.0 && self.max_object_speed >= 0.0) {
            return Err(Error::Config(
                "noise levels and speeds must be nonnegative".into(),
            ));
        }
        if self.num_classes == 0 || self.feature_channels == 0 {
            return Err(Error::Config(
                "num_classes and feature_channels must be positive".into(),
            ));
        }
        if self.blob_sigma_scale.is_nan() || self.blob_sigma_scale <= 0.0 {
            return Err(Error::Config("blob_sigma_scale must be positive".into()));
        }
        Ok(())
    }

    /// Cameras evenly spaced on a ring, looking outward.
    pub fn rig(&self) -> Result<CameraRig> {
        let (cx, cy) = (
            self.image_width as f64 / 2.0,
            self.image_height as f64 / 2.0,
        );
        let cams = (0..self.num_cameras)
            .map(|k| {
                let yaw = 2.0 * PI * k as f64 / self.num_cameras as f64;
                let pos = Point3::new(
                    self.rig_radius * yaw.cos(),
                    self.rig_radius * yaw.sin(),
                    self.camera_height,
                );
                CameraModel::looking_along(
                    k as u32,
                    self.focal,
                    self.focal,
                    cx,
                    cy,
                    self.image_width,
                    self.image_height,
                    pos,
                    yaw,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        CameraRig::new(cams)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub state: RefState,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub index: usize,
    pub timestamp: f64,
    /// Maps the previous ego frame into this one (identity for the first frame).
    pub ego_from_prev: EgoMotion,
    /// Ground truth in this frame's ego coordinates.
    pub boxes: Vec<GtBox>,
    pub detections: Vec<Detection2D>,
    pub pyramid: FeaturePyramid,
}

impl SceneFrame {
    pub fn truth_states(&self) -> Vec<RefState> {
        self.boxes.iter().map(|b| b.state).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub config: SceneConfig,
    pub rig: CameraRig,
    pub frames: Vec<SceneFrame>,
}

#[derive(Serialize, Deserialize)]
struct EgoRecord {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<&EgoMotion> for EgoRecord {
    fn from(e: &EgoMotion) -> Self {
        let r = e.rotation();
        let t = e.translation();
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = r[(i, j)];
            }
        }
        Self {
            rotation,
            translation: [t.x, t.y, t.z],
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    index: usize,
    timestamp: f64,
    ego_from_prev: EgoRecord,
    boxes: Vec<GtBox>,
    detections: Vec<Detection2D>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    seed: u64,
    config: SceneConfig,
    frames: Vec<FrameRecord>,
}

impl SyntheticScene {
    fn record(&self) -> SceneRecord {
        SceneRecord {
            seed: self.seed,
            config: self.config.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| FrameRecord {
                    index: f.index,
                    timestamp: f.timestamp,
                    ego_from_prev: (&f.ego_from_prev).into(),
                    boxes: f.boxes.clone(),
                    detections: f.detections.clone(),
                })
                .collect(),
        }
    }

    /// Canonical byte serialization: rig JSON, scene JSON, then every pyramid.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(self.rig.to_json()?.as_bytes());
        buf.extend_from_slice(serde_json::to_string(&self.record())?.as_bytes());
        for f in &self.frames {
            f.pyramid.write(&mut buf)?;
        }
        Ok(buf)
    }

    /// Writes `rig.json`, `scene.json`, and per frame `frame_NNN_detections.json`
    /// and `frame_NNN_pyramid.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("rig.json"), self.rig.to_json()?)?;
        std::fs::write(
            dir.join("scene.json"),
            serde_json::to_string_pretty(&self.record())?,
        )?;
        for f in &self.frames {
            let dets = serde_json::to_string_pretty(&f.detections)?;
            std::fs::write(
                dir.join(format!("frame_{:03}_detections.json", f.index)),
                dets,
            )?;
            f.pyramid
                .save(dir.join(format!("frame_{:03}_pyramid.bin", f.index)))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let rig = CameraRig::load(dir.join("rig.json"))?;
        let rec: SceneRecord =
            serde_json::from_str(&std::fs::read_to_string(dir.join("scene.json"))?)?;
        rec.config.validate()?;
        let frames = rec
            .frames
            .into_iter()
            .map(|f| {
                let ego = EgoMotion::new(
                    Matrix3::from_row_slice(&f.ego_from_prev.rotation),
                    Vector3::from_row_slice(&f.ego_from_prev.translation),
                )?;
                for d in &f.detections {
                    d.validate()?;
                }
                Ok(SceneFrame {
                    index: f.index,
                    timestamp: f.timestamp,
                    ego_from_prev: ego,
                    boxes: f.boxes,
                    detections: f.detections,
                    pyramid: FeaturePyramid::load(
                        dir.join(format!("frame_{:03}_pyramid.bin", f.index)),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: rec.seed,
            config: rec.config,
            rig,
            frames,
        })
    }
}

/// A box in world coordinates moving at constant velocity.
struct WorldBox {
    center: Point3,
    size: [f64; 3],
    theta: f64,
    velocity: Vector3<f64>,
    class_id: usize,
}

impl WorldBox {
    fn center_at(&self, t: f64) -> Point3 {
        self.center + self.velocity * t
    }
}

/// Ego pose (ego → world) for every frame, integrated with a constant speed and yaw rate.
fn ego_poses(cfg: &SceneConfig) -> Vec<EgoMotion> {
    let mut poses = Vec::with_capacity(cfg.num_frames);
    let mut pos = Vector3::zeros();
    let mut yaw = 0.0_f64;
    for k in 0..cfg.num_frames {
        if k > 0 {
            pos += cfg.ego_speed * cfg.frame_dt * Vector3::new(yaw.cos(), yaw.sin(), 0.0);
            yaw += cfg.ego_yaw_rate * cfg.frame_dt;
        }
        poses.push(EgoMotion::from_yaw(yaw, pos));
    }
    poses
}

fn visible_in(cam: &CameraModel, p: &Point3) -> Option<(f64, f64, f64)> {
    let pr = project_point(cam, p);
    (pr.in_front && pr.depth >= MIN_VISIBLE_DEPTH && cam.contains_pixel(pr.u, pr.v))
        .then_some((pr.u, pr.v, pr.depth))
}

fn to_ego(b: &WorldBox, pose_inv: &EgoMotion, yaw: f64, t: f64) -> RefState {
    let c = pose_inv.apply(&b.center_at(t));
    let v = pose_inv.rotation() * b.velocity;
    RefState {
        x: c.x,
        y: c.y,
        z: c.z,
        w: b.size[0],
        l: b.size[1],
        h: b.size[2],
        theta: wrap_angle(b.theta - yaw),
        vx: v.x,
        vy: v.y,
    }
}

fn paint_blob(
    data: &mut [f32],
    height: usize,
    width: usize,
    channel: usize,
    x: f64,
    y: f64,
    sigma: f64,
) {
    let radius = (3.0 * sigma).ceil();
    let (c0, c1) = (
        (x - radius).floor().max(0.0) as usize,
        (x + radius).ceil().min(width as f64 - 1.0),
    );
    let (r0, r1) = (
        (y - radius).floor().max(0.0) as usize,
        (y + radius).ceil().min(height as f64 - 1.0),
    );
    if c1 < 0.0 || r1 < 0.0 {
        return;
    }
    let plane = &mut data[channel * height * width..(channel + 1) * height * width];
    for row in r0..=r1 as usize {
        for col in c0..=c1 as usize {
            let d2 = (col as f64 - x).powi(2) + (row as f64 - y).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
            let cell = &mut plane[row * width + col];
            *cell = cell.max(v);
        }
    }
}

/// Generates a scene. The same seed and config always produce the same scene.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let rig = cfg.rig()?;
    let poses = ego_poses(cfg);
    let inverses: Vec<EgoMotion> = poses.iter().map(EgoMotion::inverse).collect();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut box_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
    let mut det_rng = ChaCha8Rng::seed_from_u64(master.next_u64());

    let mut boxes = Vec::with_capacity(cfg.num_boxes);
    for b in 0..cfg.num_boxes {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let r = box_rng.gen_range(cfg.min_range..=cfg.max_range);
            let phi = box_rng.gen_range(-PI..PI);
            let size = [
                box_rng.gen_range(1.5..2.5),
                box_rng.gen_range(3.5..5.0),
                box_rng.gen_range(1.4..2.0),
            ];
            let theta = box_rng.gen_range(-PI..PI);
            let speed = box_rng.gen_range(0.0..=cfg.max_object_speed);
            let class_id = box_rng.gen_range(0..cfg.num_classes);
            let candidate = WorldBox {
                center: Point3::new(r * phi.cos(), r * phi.sin(), size[2] / 2.0),
                size,
                theta,
                velocity: Vector3::new(speed * theta.cos(), speed * theta.sin(), 0.0),
                class_id,
            };
            let always_visible = (0..cfg.num_frames).all(|k| {
                let c = inverses[k].apply(&candidate.center_at(k as f64 * cfg.frame_dt));
                rig.iter().any(|cam| visible_in(cam, &c).is_some())
            });
            if always_visible {
                placed = Some(candidate);
                break;
            }
        }
        boxes.push(placed.ok_or_else(|| {
            Error::Config(format!("could not place box {b} so it stays visible"))
        })?);
    }

    let pixel_noise =
        Normal::new(0.0, cfg.pixel_noise).map_err(|e| Error::Config(e.to_string()))?;
    let depth_noise =
        Normal::new(0.0, cfg.depth_noise).map_err(|e| Error::Config(e.to_string()))?;
    let (nw, nh) = (cfg.image_width, cfg.image_height);
    let mut frames = Vec::with_capacity(cfg.num_frames);
    for k in 0..cfg.num_frames {
        let t = k as f64 * cfg.frame_dt;
        let yaw = poses[k].yaw();
        let ego_from_prev = if k == 0 {
            EgoMotion::identity()
        } else {
            crate::geometry::compose_ego(&inverses[k], &poses[k - 1])
        };
        let truth: Vec<GtBox> = boxes
            .iter()
            .map(|b| GtBox {
                state: to_ego(b, &inverses[k], yaw, t),
                class_id: b.class_id,
            })
            .collect();

        let mut detections = Vec::new();
        let mut maps = Vec::with_capacity(rig.len() * 4);
        for cam in &rig {
            let mut planes: Vec<Vec<f32>> = Level::ALL
                .iter()
                .map(|l| {
                    vec![0.0; cfg.feature_channels * l.extent(nw) as usize * l.extent(nh) as usize]
                })
                .collect();
            for gt in &truth {
                let Some((u, v, depth)) = visible_in(cam, &gt.state.center()) else {
                    continue;
                };
                let w_px = cam.fx * gt.state.w / depth;
                let h_px = cam.fy * gt.state.h / depth;
                let mut z_sem = vec![0.0f32; cfg.num_classes];
                z_sem[gt.class_id] = 1.0;
                let score = det_rng.gen_range(0.5..=1.0);
                let (mut du, mut dv, mut dd) = (0.0, 0.0, 0.0);
                if cfg.pixel_noise > 0.0 {
                    du = pixel_noise.sample(&mut det_rng);
                    dv = pixel_noise.sample(&mut det_rng);
                }
                if cfg.depth_noise > 0.0 {
                    dd = depth_noise.sample(&mut det_rng);
                }
                detections.push(Detection2D {
                    camera_id: cam.camera_id,
                    u: u + du,
                    v: v + dv,
                    w: w_px,
                    h: h_px,
                    z_sem,
                    score,
                    depth: (depth + dd).max(MIN_VISIBLE_DEPTH),
                    depth_distribution: None,
                });
                for (level, plane) in Level::ALL.iter().zip(&mut planes) {
                    let s = level.scale();
                    let sigma = (cfg.blob_sigma_scale * w_px.min(h_px) * s).max(0.5);
                    let (lw, lh) = (level.extent(nw) as usize, level.extent(nh) as usize);
                    paint_blob(
                        plane,
                        lh,
                        lw,
                        gt.class_id % cfg.feature_channels,
                        u * s - 0.5,
                        v * s - 0.5,
                        sigma,
                    );
                }
            }
            for (level, plane) in Level::ALL.iter().zip(planes) {
                maps.push(FeatureMap::new(
                    cam.camera_id,
                    *level,
                    cfg.feature_channels,
                    level.extent(nh) as usize,
                    level.extent(nw) as usize,
                    plane,
                )?);
            }
        }
        frames.push(SceneFrame {
            index: k,
            timestamp: t,
            ego_from_prev,
            boxes: truth,
            detections,
            pyramid: FeaturePyramid::new(nw, nh, maps)?,
        });
    }
    Ok(SyntheticScene {
        seed,
        config: cfg.clone(),
        rig,
        frames,
    })
}

/// A fixed-size scene with no noise, for tests and smoke runs.
pub fn small_scene_config() -> SceneConfig {
    SceneConfig {
        num_boxes: 4,
        num_frames: 3,
        feature_channels: 16,
        ..SceneConfig::default()
    }
}
