//! Multi-scale hybrid sampling: box-anchored and learned 3D sampling points,
//! projection into every camera, bilinear lookups over the feature pyramid and
//! deformable aggregation back into the queries. Also hosts the FFN.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_point, yaw_rotation, CameraRig, Point3, RefState};
use crate::linear::{logistic, relu, softmax_in_place, Linear};
use crate::queries::QuerySet;

pub const PYRAMID_MAGIC: &[u8; 8] = b"CAM3DFM1";
pub const DEFAULT_FFN_HIDDEN: usize = 2048;
pub const DEFAULT_LEARNABLE_POINTS: usize = 13;

/// Pyramid level, coded 0..3 for strides 4, 8, 16, 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Quarter,
    Eighth,
    Sixteenth,
    ThirtySecond,
}

impl Level {
    pub const ALL: [Level; 4] = [
        Level::Quarter,
        Level::Eighth,
        Level::Sixteenth,
        Level::ThirtySecond,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Feature-map pixels per input pixel.
    pub fn scale(self) -> f64 {
        1.0 / f64::from(4u32 << self.code())
    }

    /// Level extent for a nominal input extent (rounded down).
    pub fn extent(self, nominal: u32) -> u32 {
        nominal >> (2 + self.code())
    }
}

/// One `C×H×W` channel-major map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub camera_id: u32,
    pub level: Level,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        camera_id: u32,
        level: Level,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "feature map {channels}x{height}x{width} has an empty dimension"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "feature map values",
                channels * height * width,
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(Self {
            camera_id,
            level,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(
        camera_id: u32,
        level: Level,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        Self::new(
            camera_id,
            level,
            channels,
            height,
            width,
            vec![0.0; channels * height * width],
        )
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f32) {
        self.data[(c * self.height + row) * self.width + col] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Value at integer cell `(row, col)` or 0 outside the map.
    #[inline]
    fn padded(&self, c: usize, row: i64, col: i64) -> f64 {
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            0.0
        } else {
            f64::from(self.get(c, row as usize, col as usize))
        }
    }
}

/// Bilinear stencil at level coordinates: top-left cell and fractional offsets.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    col: i64,
    row: i64,
    fx: f64,
    fy: f64,
}

impl Stencil {
    /// Pixel `(i, j)` is centered at `(i + 0.5, j + 0.5)` in level coordinates.
    fn at(fm: &FeatureMap, u: f64, v: f64) -> Self {
        let scale = fm.level.scale();
        let x = u * scale - 0.5;
        let y = v * scale - 0.5;
        let (x0, y0) = (x.floor(), y.floor());
        Self {
            col: x0 as i64,
            row: y0 as i64,
            fx: x - x0,
            fy: y - y0,
        }
    }

    #[inline]
    fn corners(&self, fm: &FeatureMap, c: usize) -> [f64; 4] {
        [
            fm.padded(c, self.row, self.col),
            fm.padded(c, self.row, self.col + 1),
            fm.padded(c, self.row + 1, self.col),
            fm.padded(c, self.row + 1, self.col + 1),
        ]
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ]
    }
}

/// Bilinear lookup at input-pixel coordinates `(u, v)` with zero padding.
pub fn bilinear_sample(fm: &FeatureMap, u: f64, v: f64) -> Vec<f64> {
    let mut out = vec![0.0; fm.channels];
    bilinear_accumulate(fm, u, v, 1.0, &mut out);
    out
}

/// `acc += weight * bilinear_sample(fm, u, v)`.
pub fn bilinear_accumulate(fm: &FeatureMap, u: f64, v: f64, weight: f64, acc: &mut [f64]) {
    let st = Stencil::at(fm, u, v);
    let w = st.weights();
    // in-bounds corners as (plane offset, weight); padded corners contribute nothing
    let mut taps = [(0usize, 0.0f64); 4];
    let mut n = 0;
    for (k, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        let (row, col) = (st.row + dr, st.col + dc);
        if row >= 0 && col >= 0 && row < fm.height as i64 && col < fm.width as i64 {
            taps[n] = (row as usize * fm.width + col as usize, w[k]);
            n += 1;
        }
    }
    if n == 0 {
        return;
    }
    let plane = fm.height * fm.width;
    for (c, a) in acc.iter_mut().enumerate().take(fm.channels) {
        let data = &fm.data[c * plane..(c + 1) * plane];
        let s: f64 = taps[..n]
            .iter()
            .map(|&(i, tw)| tw * f64::from(data[i]))
            .sum();
        *a += weight * s;
    }
}

/// Value and coordinate gradient of a bilinear lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearGrad {
    pub value: Vec<f64>,
    pub d_u: Vec<f64>,
    pub d_v: Vec<f64>,
}

/// Piecewise-linear gradient; one-sided (from the right) on integer-coordinate kinks.
pub fn bilinear_sample_grad(fm: &FeatureMap, u: f64, v: f64) -> BilinearGrad {
    let st = Stencil::at(fm, u, v);
    let w = st.weights();
    let scale = fm.level.scale();
    let mut g = BilinearGrad {
        value: Vec::with_capacity(fm.channels),
        d_u: Vec::with_capacity(fm.channels),
        d_v: Vec::with_capacity(fm.channels),
    };
    for c in 0..fm.channels {
        let [n00, n01, n10, n11] = st.corners(fm, c);
        g.value
            .push(w[0] * n00 + w[1] * n01 + w[2] * n10 + w[3] * n11);
        g.d_u
            .push(scale * ((1.0 - st.fy) * (n01 - n00) + st.fy * (n11 - n10)));
        g.d_v
            .push(scale * ((1.0 - st.fx) * (n10 - n00) + st.fx * (n11 - n01)));
    }
    g
}

/// All levels for a set of cameras at one nominal input size.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    nominal_width: u32,
    nominal_height: u32,
    channels: usize,
    camera_ids: Vec<u32>,
    /// `maps[camera_index * 4 + level_code]`
    maps: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(nominal_width: u32, nominal_height: u32, maps: Vec<FeatureMap>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Config("feature pyramid has no maps".into()));
        }
        let channels = maps[0].channels;
        let mut camera_ids: Vec<u32> = maps.iter().map(|m| m.camera_id).collect();
        camera_ids.sort_unstable();
        camera_ids.dedup();
        let mut slots: Vec<Option<FeatureMap>> = vec![None; camera_ids.len() * 4];
        for m in maps {
            if m.channels != channels {
                return Err(Error::shape("pyramid channels", channels, m.channels));
            }
            let (w, h) = (
                m.level.extent(nominal_width),
                m.level.extent(nominal_height),
            );
            if m.width != w as usize || m.height != h as usize {
                return Err(Error::Config(format!(
                    "camera {} level {:?} is {}x{}, expected {w}x{h} for nominal {nominal_width}x{nominal_height}",
                    m.camera_id, m.level, m.width, m.height
                )));
            }
            let ci = camera_ids
                .binary_search(&m.camera_id)
                .expect("collected above");
            let slot = &mut slots[ci * 4 + m.level.code() as usize];
            if slot.is_some() {
                return Err(Error::Config(format!(
                    "camera {} level {:?} appears twice",
                    m.camera_id, m.level
                )));
            }
            *slot = Some(m);
        }
        let maps = slots
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                m.ok_or_else(|| {
                    Error::Config(format!(
                        "camera {} is missing level {:?}",
                        camera_ids[i / 4],
                        Level::ALL[i % 4]
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            nominal_width,
            nominal_height,
            channels,
            camera_ids,
            maps,
        })
    }

    pub fn nominal_size(&self) -> (u32, u32) {
        (self.nominal_width, self.nominal_height)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn camera_ids(&self) -> &[u32] {
        &self.camera_ids
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    pub fn get(&self, camera_id: u32, level: Level) -> Option<&FeatureMap> {
        let ci = self.camera_ids.binary_search(&camera_id).ok()?;
        Some(&self.maps[ci * 4 + level.code() as usize])
    }

    /// Binary layout: magic, `u32` count, then per map `u32` camera_id,
    /// level_code, C, H, W and `C·H·W` channel-major `f32` values.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PYRAMID_MAGIC)?;
        w.write_u32::<LittleEndian>(self.maps.len() as u32)?;
        for m in &self.maps {
            for v in [
                m.camera_id,
                m.level.code(),
                m.channels as u32,
                m.height as u32,
                m.width as u32,
            ] {
                w.write_u32::<LittleEndian>(v)?;
            }
            for &v in &m.data {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    /// Reads the binary layout. The nominal size is taken as four times the
    /// finest level, which reproduces every level extent exactly.
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("feature pyramid", "truncated header"))?;
        if &magic != PYRAMID_MAGIC {
            return Err(Error::format("feature pyramid", "bad magic"));
        }
        let count = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::format("feature pyramid", "truncated header"))?;
        let mut maps = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut h = [0u32; 5];
            for v in &mut h {
                *v = r
                    .read_u32::<LittleEndian>()
                    .map_err(|_| Error::format("feature pyramid", "truncated map header"))?;
            }
            let [camera_id, code, c, height, width] = h;
            let level = Level::from_code(code).ok_or_else(|| {
                Error::format("feature pyramid", format!("level code {code} out of range"))
            })?;
            let n = (c as usize) * (height as usize) * (width as usize);
            let mut data = vec![0.0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)
                .map_err(|_| Error::format("feature pyramid", "truncated map data"))?;
            maps.push(FeatureMap::new(
                camera_id,
                level,
                c as usize,
                height as usize,
                width as usize,
                data,
            )?);
        }
        let finest = maps
            .iter()
            .find(|m| m.level == Level::Quarter)
            .ok_or_else(|| Error::Config("feature pyramid has no 1/4 level".into()))?;
        let (nw, nh) = (4 * finest.width as u32, 4 * finest.height as u32);
        Self::new(nw, nh, maps)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Placement of the box-anchored sampling points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FixedLayout {
    /// Box center only (1 point).
    Center,
    /// Box center and the 6 face centers (7 points).
    #[default]
    Faces,
    /// Box center and the 8 corners (9 points).
    Corners,
}

impl FixedLayout {
    pub fn count(self) -> usize {
        match self {
            FixedLayout::Center => 1,
            FixedLayout::Faces => 7,
            FixedLayout::Corners => 9,
        }
    }

    fn unit_offsets(self) -> Vec<[f64; 3]> {
        let mut v = vec![[0.0, 0.0, 0.0]];
        match self {
            FixedLayout::Center => {}
            FixedLayout::Faces => v.extend([
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, 0.0, -1.0],
            ]),
            FixedLayout::Corners => {
                for sx in [1.0, -1.0] {
                    for sy in [1.0, -1.0] {
                        for sz in [1.0, -1.0] {
                            v.push([sx, sy, sz]);
                        }
                    }
                }
            }
        }
        v
    }
}

/// Maps half-extent-normalised box coordinates to world points.
fn box_point(state: &RefState, unit: [f64; 3]) -> Point3 {
    let local = Point3::new(
        unit[0] * state.w / 2.0,
        unit[1] * state.l / 2.0,
        unit[2] * state.h / 2.0,
    );
    yaw_rotation(state.theta) * local + state.center()
}

/// Box center followed by the ±x, ±y, ±z face centers.
pub fn fixed_points(state: &RefState) -> Vec<Point3> {
    fixed_points_with(state, FixedLayout::Faces)
}

pub fn fixed_points_with(state: &RefState, layout: FixedLayout) -> Vec<Point3> {
    layout
        .unit_offsets()
        .into_iter()
        .map(|u| box_point(state, u))
        .collect()
}

/// `k` points inside the box: `tanh(net(embedding))` reshaped to `k×3`, scaled by
/// the half extents, rotated by the heading and moved to the center.
pub fn learnable_offsets(
    embedding: ArrayView1<f64>,
    state: &RefState,
    net: &Linear,
) -> Result<Vec<Point3>> {
    if !net.output_dim().is_multiple_of(3) {
        return Err(Error::shape(
            "offset net output (multiple of 3)",
            net.output_dim() / 3 * 3,
            net.output_dim(),
        ));
    }
    let raw = net.apply(embedding)?;
    Ok(raw
        .as_slice()
        .expect("contiguous")
        .chunks_exact(3)
        .map(|c| box_point(state, [c[0].tanh(), c[1].tanh(), c[2].tanh()]))
        .collect())
}

/// `alpha·fixed + (1−alpha)·learned` on the first `min(|fixed|, |learned|)`
/// index pairs; the unpaired tail of the longer list is appended unchanged.
pub fn blend_points(fixed: &[Point3], learned: &[Point3], alpha: f64) -> Result<Vec<Point3>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!(
            "blend weight {alpha} outside [0, 1]"
        )));
    }
    let paired = fixed.len().min(learned.len());
    let mut out: Vec<Point3> = fixed
        .iter()
        .zip(learned)
        .map(|(f, l)| {
            if alpha == 1.0 {
                *f
            } else if alpha == 0.0 {
                *l
            } else {
                f * alpha + l * (1.0 - alpha)
            }
        })
        .collect();
    out.extend_from_slice(&fixed[paired..]);
    out.extend_from_slice(&learned[paired..]);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointProjection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// In front of the camera and inside `[0, width) × [0, height)`.
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CameraPoints {
    pub camera_id: u32,
    pub points: Vec<PointProjection>,
}

/// Projects every point into every camera of the rig.
pub fn project_points(pts: &[Point3], rig: &CameraRig) -> Vec<CameraPoints> {
    rig.iter()
        .map(|cam| CameraPoints {
            camera_id: cam.camera_id,
            points: pts
                .iter()
                .map(|p| {
                    let pr = project_point(cam, p);
                    PointProjection {
                        u: pr.u,
                        v: pr.v,
                        depth: pr.depth,
                        visible: pr.in_front && cam.contains_pixel(pr.u, pr.v),
                    }
                })
                .collect(),
        })
        .collect()
}

/// Sampling points for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPointSet {
    pub fixed: Vec<Point3>,
    pub learned: Vec<Point3>,
    pub alpha: f64,
    pub points: Vec<Point3>,
    pub projections: Vec<CameraPoints>,
}

impl SamplingPointSet {
    pub fn from_parts(
        fixed: Vec<Point3>,
        learned: Vec<Point3>,
        alpha: f64,
        rig: &CameraRig,
    ) -> Result<Self> {
        let points = blend_points(&fixed, &learned, alpha)?;
        let projections = project_points(&points, rig);
        Ok(Self {
            fixed,
            learned,
            alpha,
            points,
            projections,
        })
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn any_visible(&self) -> bool {
        self.projections
            .iter()
            .any(|c| c.points.iter().any(|p| p.visible))
    }
}

/// Generates hybrid sampling points from a query.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridSampler {
    pub layout: FixedLayout,
    /// `d → k·3` learned box-normalised offsets.
    pub offset_net: Linear,
    /// `d → 1` blend logit; the blend weight is its logistic.
    pub alpha_net: Linear,
}

impl HybridSampler {
    pub fn zeros(d: usize, layout: FixedLayout, learnable: usize) -> Self {
        Self {
            layout,
            offset_net: Linear::zeros(d, 3 * learnable, true),
            alpha_net: Linear::zeros(d, 1, true),
        }
    }

    pub fn seeded(d: usize, layout: FixedLayout, learnable: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            layout,
            offset_net: Linear::seeded(&mut rng, d, 3 * learnable, true),
            alpha_net: Linear::seeded(&mut rng, d, 1, true),
        }
    }

    pub fn learnable_count(&self) -> usize {
        self.offset_net.output_dim() / 3
    }

    /// Points per query after blending.
    pub fn point_count(&self) -> usize {
        self.layout.count().max(self.learnable_count())
    }

    pub fn alpha(&self, embedding: ArrayView1<f64>) -> Result<f64> {
        Ok(logistic(self.alpha_net.apply(embedding)?[0]))
    }

    pub fn sample(
        &self,
        state: &RefState,
        embedding: ArrayView1<f64>,
        rig: &CameraRig,
    ) -> Result<SamplingPointSet> {
        let fixed = fixed_points_with(state, self.layout);
        let learned = learnable_offsets(embedding, state, &self.offset_net)?;
        let alpha = self.alpha(embedding)?;
        SamplingPointSet::from_parts(fixed, learned, alpha, rig)
    }
}

/// Deformable aggregation weights.
///
/// Sampled keys are the hybrid sampling points of the query, so `keys` must match
/// the point count. Offsets `Δp` are in level pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformableParams {
    pub heads: usize,
    pub d: usize,
    pub channels: usize,
    pub keys: usize,
    pub levels: usize,
    /// Per head `W′_h`: `C → d/H`, no bias.
    pub value_proj: Vec<Linear>,
    /// Per head `W_h`: `d/H → d`, no bias.
    pub out_proj: Vec<Linear>,
    /// `d → H·keys·2`, laid out `[head][key][xy]`.
    pub offset_net: Linear,
    /// `d → H·keys·levels`, laid out `[head][key][level]`.
    pub weight_net: Linear,
}

impl DeformableParams {
    fn check(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.keys == 0 {
            return Err(Error::Config(
                "deformable attention needs at least one key".into(),
            ));
        }
        if !(1..=4).contains(&self.levels) {
            return Err(Error::Config(format!(
                "{} pyramid levels requested, 1..=4 available",
                self.levels
            )));
        }
        let dh = self.d / self.heads;
        if self.value_proj.len() != self.heads || self.out_proj.len() != self.heads {
            return Err(Error::shape(
                "per-head projections",
                self.heads,
                self.value_proj.len(),
            ));
        }
        for (vp, op) in self.value_proj.iter().zip(&self.out_proj) {
            if vp.input_dim() != self.channels || vp.output_dim() != dh || vp.bias.is_some() {
                return Err(Error::Config(format!(
                    "value projection must be {}→{dh} without bias",
                    self.channels
                )));
            }
            if op.input_dim() != dh || op.output_dim() != self.d || op.bias.is_some() {
                return Err(Error::Config(format!(
                    "output projection must be {dh}→{} without bias",
                    self.d
                )));
            }
        }
        if self.offset_net.input_dim() != self.d
            || self.offset_net.output_dim() != self.heads * self.keys * 2
        {
            return Err(Error::shape(
                "offset net output",
                self.heads * self.keys * 2,
                self.offset_net.output_dim(),
            ));
        }
        if self.weight_net.input_dim() != self.d
            || self.weight_net.output_dim() != self.heads * self.keys * self.levels
        {
            return Err(Error::shape(
                "weight net output",
                self.heads * self.keys * self.levels,
                self.weight_net.output_dim(),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        heads: usize,
        d: usize,
        channels: usize,
        keys: usize,
        levels: usize,
        value_proj: Vec<Linear>,
        out_proj: Vec<Linear>,
        offset_net: Linear,
        weight_net: Linear,
    ) -> Result<Self> {
        let p = Self {
            heads,
            d,
            channels,
            keys,
            levels,
            value_proj,
            out_proj,
            offset_net,
            weight_net,
        };
        p.check()?;
        Ok(p)
    }

    pub fn zeros(
        d: usize,
        heads: usize,
        channels: usize,
        keys: usize,
        levels: usize,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        Self::new(
            heads,
            d,
            channels,
            keys,
            levels,
            (0..heads)
                .map(|_| Linear::zeros(channels, dh, false))
                .collect(),
            (0..heads).map(|_| Linear::zeros(dh, d, false)).collect(),
            Linear::zeros(d, heads * keys * 2, true),
            Linear::zeros(d, heads * keys * levels, true),
        )
    }

    pub fn seeded(
        d: usize,
        heads: usize,
        channels: usize,
        keys: usize,
        levels: usize,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let value_proj = (0..heads)
            .map(|_| Linear::seeded(&mut rng, channels, dh, false))
            .collect();
        let out_proj = (0..heads)
            .map(|_| Linear::seeded(&mut rng, dh, d, false))
            .collect();
        let offset_net = Linear::seeded(&mut rng, d, heads * keys * 2, true);
        let weight_net = Linear::seeded(&mut rng, d, heads * keys * levels, true);
        Self::new(
            heads, d, channels, keys, levels, value_proj, out_proj, offset_net, weight_net,
        )
    }
}

/// Aggregated features plus the per-(query, head) sum of normalised weights.
#[derive(Debug, Clone)]
pub struct DeformableOutput {
    pub output: Array2<f64>,
    pub weight_sums: Array2<f64>,
}

/// Deformable aggregation for a query set, using its stored embeddings.
pub fn deformable_attention(
    qs: &QuerySet,
    pts: &[SamplingPointSet],
    pyr: &FeaturePyramid,
    rig: &CameraRig,
    p: &DeformableParams,
) -> Result<Array2<f64>> {
    Ok(deformable_forward(qs.embedding_matrix().view(), pts, pyr, rig, p)?.output)
}

/// `Σ_h W_h Σ A_h · W′_h F(P²ᵈ + Δp)` per query.
///
/// For each head, weights are softmax-normalised over all (camera, level, key)
/// terms whose key projects visibly into the camera; queries with no visible
/// term get zero. Terms are summed in camera, level, key order.
pub fn deformable_forward(
    x: ArrayView2<f64>,
    pts: &[SamplingPointSet],
    pyr: &FeaturePyramid,
    rig: &CameraRig,
    p: &DeformableParams,
) -> Result<DeformableOutput> {
    p.check()?;
    let n = x.nrows();
    if x.ncols() != p.d {
        return Err(Error::shape("embedding width", p.d, x.ncols()));
    }
    if pts.len() != n {
        return Err(Error::shape("sampling point sets", n, pts.len()));
    }
    if pyr.channels() != p.channels {
        return Err(Error::shape("pyramid channels", p.channels, pyr.channels()));
    }
    let cams = rig
        .iter()
        .map(|c| {
            pyr.get(c.camera_id, Level::Quarter)
                .map(|_| c.camera_id)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "feature pyramid has no maps for camera {}",
                        c.camera_id
                    ))
                })
        })
        .collect::<Result<Vec<_>>>()?;

    let rows: Vec<(Array1<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|qi| {
            let set = &pts[qi];
            if set.num_points() != p.keys {
                return Err(Error::shape(
                    "sampling points per query",
                    p.keys,
                    set.num_points(),
                ));
            }
            if set.projections.len() != cams.len() {
                return Err(Error::shape(
                    "projected cameras",
                    cams.len(),
                    set.projections.len(),
                ));
            }
            let xq = x.row(qi);
            let offsets = p.offset_net.apply(xq)?;
            let logits = p.weight_net.apply(xq)?;
            let mut out = Array1::zeros(p.d);
            let mut sums = vec![0.0; p.heads];
            let mut terms: Vec<(usize, usize, usize)> = Vec::new();
            let mut weights: Vec<f64> = Vec::new();
            let mut acc = vec![0.0; p.channels];
            for h in 0..p.heads {
                terms.clear();
                weights.clear();
                for (ci, cam_pts) in set.projections.iter().enumerate() {
                    for level in 0..p.levels {
                        for key in 0..p.keys {
                            if cam_pts.points[key].visible {
                                terms.push((ci, level, key));
                                weights.push(logits[(h * p.keys + key) * p.levels + level]);
                            }
                        }
                    }
                }
                if terms.is_empty() {
                    continue;
                }
                softmax_in_place(&mut weights);
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (&(ci, level, key), &a) in terms.iter().zip(&weights) {
                    let lv = Level::ALL[level];
                    let fm = pyr.get(cams[ci], lv).expect("completeness checked");
                    let pp = &set.projections[ci].points[key];
                    let o = (h * p.keys + key) * 2;
                    let inv = 1.0 / lv.scale();
                    bilinear_accumulate(
                        fm,
                        pp.u + offsets[o] * inv,
                        pp.v + offsets[o + 1] * inv,
                        a,
                        &mut acc,
                    );
                    sums[h] += a;
                }
                let value = p.value_proj[h].apply_slice(&acc)?;
                out += &p.out_proj[h].apply(value.view())?;
            }
            Ok((out, sums))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut output = Array2::zeros((n, p.d));
    let mut weight_sums = Array2::zeros((n, p.heads));
    for (qi, (row, sums)) in rows.into_iter().enumerate() {
        output.row_mut(qi).assign(&row);
        weight_sums.row_mut(qi).assign(&ArrayView1::from(&sums));
    }
    Ok(DeformableOutput {
        output,
        weight_sums,
    })
}

/// Two-layer feed-forward block with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub first: Linear,
    pub second: Linear,
}

impl FfnWeights {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            first: Linear::zeros(d, hidden, true),
            second: Linear::zeros(hidden, d, true),
        }
    }

    pub fn seeded(d: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            first: Linear::seeded(&mut rng, d, hidden, true),
            second: Linear::seeded(&mut rng, hidden, d, true),
        }
    }

    pub fn hidden(&self) -> usize {
        self.first.output_dim()
    }
}

/// `x + W₂ relu(W₁ x + b₁) + b₂`, row-wise.
pub fn ffn(x: ArrayView2<f64>, w: &FfnWeights) -> Result<Array2<f64>> {
    if w.first.output_dim() != w.second.input_dim() || w.second.output_dim() != w.first.input_dim()
    {
        return Err(Error::shape(
            "ffn layer widths",
            w.first.output_dim(),
            w.second.input_dim(),
        ));
    }
    if x.ncols() != w.first.input_dim() {
        return Err(Error::shape(
            "ffn input width",
            w.first.input_dim(),
            x.ncols(),
        ));
    }
    let hidden = w.first.apply_rows(x)?.mapv(relu);
    Ok(&x + &w.second.apply_rows(hidden.view())?)
}
