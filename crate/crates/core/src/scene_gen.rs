//! Synthetic multi-view scenes: a ground plane and labeled boxes seen by a
//! ring of cameras on a moving ego vehicle.
//!
//! The world frame coincides with the ego frame of the last frame, so the
//! ground-truth grid and the primitives share coordinates. Each view is
//! rendered by casting one ray per pixel; the nearest hit is encoded as a
//! one-hot class plus inverse depth and projected to `feature_channels`
//! through a fixed random matrix.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, EgoPose};
use crate::numerics::checkpoint::write_atomic;
use crate::numerics::Tensor;
use crate::occ_head::{GridGeometry, OccupancyGrid};

/// Renders stop at this distance; farther hits count as background.
pub const MAX_DEPTH: f64 = 60.0;
/// Keeps boxes clear of the ego vehicle and its cameras.
const EGO_CLEARANCE: f64 = 2.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub grid: [usize; 3],
    pub voxel_size: f64,
    /// Minimum grid corner in the final ego frame.
    pub origin: [f64; 3],
    pub classes: usize,
    pub frames: usize,
    pub cameras: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub hfov_deg: f64,
    pub camera_pitch_deg: f64,
    pub camera_height: f64,
    pub feature_channels: usize,
    pub boxes: usize,
    pub moving_boxes: usize,
    /// Meters per frame.
    pub ego_speed: f64,
    /// Largest heading change per frame, degrees.
    pub ego_yaw_rate_deg: f64,
    /// Largest box speed, meters per frame.
    pub box_speed: f64,
    pub occupied_fraction: [f64; 2],
    pub feature_seed: u64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid: [32, 32, 8],
            voxel_size: 0.5,
            origin: [-8.0, -8.0, -0.5],
            classes: 6,
            frames: 8,
            cameras: 6,
            image_width: 48,
            image_height: 32,
            hfov_deg: 70.0,
            camera_pitch_deg: 10.0,
            camera_height: 1.5,
            feature_channels: 32,
            boxes: 6,
            moving_boxes: 2,
            ego_speed: 0.5,
            ego_yaw_rate_deg: 3.0,
            box_speed: 0.3,
            occupied_fraction: [0.02, 0.30],
            feature_seed: 7,
            max_retries: 64,
        }
    }
}

impl SceneConfig {
    /// Every problem found, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.grid.contains(&0) {
            out.push(format!("scene.grid {:?} has a zero extent", self.grid));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            out.push(format!("scene.voxel_size {} must be positive", self.voxel_size));
        }
        if !(3..=256).contains(&self.classes) {
            out.push(format!("scene.classes {} outside [3, 256] (free, ground and at least one box class)", self.classes));
        }
        if self.frames == 0 {
            out.push("scene.frames must be at least 1".into());
        }
        if self.cameras == 0 {
            out.push("scene.cameras must be at least 1".into());
        }
        if self.image_width < 2 || self.image_height < 2 {
            out.push(format!("scene image {}x{} must be at least 2x2", self.image_width, self.image_height));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            out.push(format!("scene.hfov_deg {} outside (0, 180)", self.hfov_deg));
        }
        if self.feature_channels == 0 {
            out.push("scene.feature_channels must be positive".into());
        }
        if self.moving_boxes > self.boxes {
            out.push(format!("scene.moving_boxes {} exceeds scene.boxes {}", self.moving_boxes, self.boxes));
        }
        let [lo, hi] = self.occupied_fraction;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            out.push(format!("scene.occupied_fraction {:?} is not an interval inside [0, 1]", self.occupied_fraction));
        }
        if self.max_retries == 0 {
            out.push("scene.max_retries must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::cubic(self.grid, self.voxel_size, self.origin)
    }

    /// Evenly spaced ring of cameras at `camera_height`, the first facing forward.
    pub fn rig(&self) -> Result<Vec<CameraModel>> {
        (0..self.cameras)
            .map(|k| {
                let yaw = std::f64::consts::TAU * k as f64 / self.cameras as f64;
                let pos = [0.3 * yaw.cos(), 0.3 * yaw.sin(), self.camera_height];
                CameraModel::mounted(
                    pos,
                    yaw,
                    self.camera_pitch_deg.to_radians(),
                    self.hfov_deg.to_radians(),
                    self.image_width,
                    self.image_height,
                )
            })
            .collect()
    }

    /// Fixed `(classes + 1) x feature_channels` encoding projection.
    pub fn feature_projection(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.feature_seed);
        (0..(self.classes + 1) * self.feature_channels).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    /// Horizontal half-space below `center[2]`.
    GroundPlane,
    /// Box with a heading, `size` = (length, width, height).
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenePrimitive {
    pub kind: PrimitiveKind,
    /// Center at the final frame, world = final ego frame.
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: u8,
    /// Meters per frame.
    pub velocity: [f64; 3],
}

impl ScenePrimitive {
    pub fn ground(top: f64) -> Self {
        ScenePrimitive {
            kind: PrimitiveKind::GroundPlane,
            center: [0.0, 0.0, top],
            size: [0.0; 3],
            yaw: 0.0,
            class: 1,
            velocity: [0.0; 3],
        }
    }

    /// Copy moved to frame `f` of a sequence whose last frame is `last`.
    pub fn at_frame(&self, f: usize, last: usize) -> Self {
        let dt = f as f64 - last as f64;
        let mut p = *self;
        for a in 0..3 {
            p.center[a] += self.velocity[a] * dt;
        }
        p
    }

    fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self.kind {
            PrimitiveKind::GroundPlane => p[2] < self.center[2],
            PrimitiveKind::Box => {
                let l = self.to_local(p);
                (0..3).all(|a| l[a].abs() <= self.size[a] / 2.0)
            }
        }
    }

    /// Distance along a unit ray to the first surface point, if any.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        match self.kind {
            PrimitiveKind::GroundPlane => {
                (dir[2] < 0.0 && origin[2] > self.center[2]).then(|| (self.center[2] - origin[2]) / dir[2])
            }
            PrimitiveKind::Box => {
                let o = self.to_local(origin);
                let (s, c) = self.yaw.sin_cos();
                let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    let h = self.size[a] / 2.0;
                    if d[a] == 0.0 {
                        if o[a].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let (ta, tb) = ((-h - o[a]) / d[a], (h - o[a]) / d[a]);
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
        }
    }

    /// Footprint radius in the ground plane.
    fn radius(&self) -> f64 {
        0.5 * (self.size[0].hypot(self.size[1]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrame {
    /// Ego → world (world = final ego frame).
    pub pose: EgoPose,
    /// One `[h, w, feature_channels]` map per camera.
    pub views: Vec<Tensor<f32>>,
}

/// Frames are in time order; the last one is the evaluated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub config: SceneConfig,
    pub seed: u64,
    pub cameras: Vec<CameraModel>,
    pub frames: Vec<SceneFrame>,
    pub primitives: Vec<ScenePrimitive>,
    pub gt: OccupancyGrid,
}

impl SceneSequence {
    pub fn current(&self) -> &SceneFrame {
        self.frames.last().expect("scenes have at least one frame")
    }

    /// Poses newest first, as used for ray queries and temporal sampling.
    pub fn poses_newest_first(&self) -> Vec<EgoPose> {
        self.frames.iter().rev().map(|f| f.pose).collect()
    }
}

/// Per-pixel nearest hit of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRaster {
    pub width: usize,
    pub height: usize,
    /// Class per pixel, row-major; 0 = background.
    pub class: Vec<u8>,
    /// Hit distance per pixel; infinite for background.
    pub depth: Vec<f64>,
}

/// Casts one ray per pixel center of `camera` mounted on an ego at `pose`.
pub fn rasterize(primitives: &[ScenePrimitive], pose: &EgoPose, camera: &CameraModel) -> ViewRaster {
    let origin = pose.apply(camera.center());
    let (w, h) = (camera.width, camera.height);
    let mut class = vec![0u8; w * h];
    let mut depth = vec![f64::INFINITY; w * h];
    for v in 0..h {
        for u in 0..w {
            let dir = pose.apply_vector(camera.pixel_ray(u as f64, v as f64));
            let i = v * w + u;
            for p in primitives {
                if let Some(t) = p.intersect(origin, dir) {
                    if t < depth[i] && t <= MAX_DEPTH {
                        depth[i] = t;
                        class[i] = p.class;
                    }
                }
            }
        }
    }
    ViewRaster { width: w, height: h, class, depth }
}

/// `[one-hot(class), 1/depth]`, with 0 inverse depth for background.
pub fn encode_pixel(class: u8, depth: f64, classes: usize) -> Vec<f64> {
    let mut e = vec![0.0; classes + 1];
    e[class as usize] = 1.0;
    e[classes] = if depth.is_finite() { 1.0 / depth } else { 0.0 };
    e
}

/// Encodes and projects a raster to `[h, w, channels]` features.
pub fn encode_view(raster: &ViewRaster, classes: usize, projection: &[f64], channels: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(raster.class.len() * channels);
    for (&c, &d) in raster.class.iter().zip(&raster.depth) {
        let e = encode_pixel(c, d, classes);
        for j in 0..channels {
            let v: f64 = e.iter().enumerate().map(|(k, x)| x * projection[k * channels + j]).sum();
            data.push(v as f32);
        }
    }
    Tensor::new(&[raster.height, raster.width, channels], data).expect("raster dims match")
}

pub fn render_view_features(
    primitives: &[ScenePrimitive],
    pose: &EgoPose,
    camera: &CameraModel,
    config: &SceneConfig,
) -> Tensor<f32> {
    let raster = rasterize(primitives, pose, camera);
    encode_view(&raster, config.classes, &config.feature_projection(), config.feature_channels)
}

/// Labels every voxel whose center lies inside a primitive; later primitives win.
pub fn voxelize(primitives: &[ScenePrimitive], geometry: GridGeometry, classes: usize) -> Result<OccupancyGrid> {
    let mut grid = OccupancyGrid::empty(geometry, classes)?;
    let [nx, ny, nz] = geometry.dims;
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let c = geometry.voxel_center(ix, iy, iz);
                if let Some(p) = primitives.iter().rev().find(|p| p.contains(c)) {
                    grid.set(ix, iy, iz, p.class);
                }
            }
        }
    }
    Ok(grid)
}

/// Ego poses in time order, ending at the identity.
fn trajectory(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<EgoPose> {
    let yaw_rate = rng.random_range(-1.0..=1.0) * cfg.ego_yaw_rate_deg.to_radians();
    let step = EgoPose::from_yaw_translation(yaw_rate, [cfg.ego_speed, 0.0, 0.0]);
    let back = step.inverse();
    let mut poses = vec![EgoPose::identity()];
    for _ in 1..cfg.frames {
        let prev = poses.last().unwrap().compose(&back);
        poses.push(prev);
    }
    poses.reverse();
    poses
}

fn place_boxes(cfg: &SceneConfig, geometry: &GridGeometry, rng: &mut ChaCha8Rng) -> Option<Vec<ScenePrimitive>> {
    let lo = geometry.origin;
    let hi = geometry.max_corner();
    let mut boxes: Vec<ScenePrimitive> = Vec::new();
    for k in 0..cfg.boxes {
        let class = rng.random_range(2..cfg.classes) as u8;
        let size = [rng.random_range(1.0..3.5), rng.random_range(0.8..2.5), rng.random_range(0.8..2.5f64).min(hi[2] - 0.25)];
        let yaw = rng.random_range(0.0..std::f64::consts::PI);
        let velocity = if k < cfg.moving_boxes {
            let (s, c) = rng.random_range(0.0..std::f64::consts::TAU).sin_cos();
            let speed = rng.random_range(0.3..1.0) * cfg.box_speed;
            [c * speed, s * speed, 0.0]
        } else {
            [0.0; 3]
        };
        let mut placed = false;
        for _ in 0..50 {
            let r = 0.5 * size[0].hypot(size[1]);
            if hi[0] - lo[0] <= 2.0 * r || hi[1] - lo[1] <= 2.0 * r {
                return None;
            }
            let center = [rng.random_range(lo[0] + r..hi[0] - r), rng.random_range(lo[1] + r..hi[1] - r), size[2] / 2.0];
            let clear_of_ego = center[0].hypot(center[1]) > EGO_CLEARANCE + r;
            let clear_of_boxes =
                boxes.iter().all(|b| (b.center[0] - center[0]).hypot(b.center[1] - center[1]) > b.radius() + r + 0.3);
            if clear_of_ego && clear_of_boxes {
                boxes.push(ScenePrimitive { kind: PrimitiveKind::Box, center, size, yaw, class, velocity });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(boxes)
}

/// Deterministic in `(seed, config)`. Retries placement until the occupied
/// fraction is in range and every ground-truth class is seen by some camera.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSequence> {
    config.validate()?;
    let geometry = config.geometry()?;
    let cameras = config.rig()?;
    let projection = config.feature_projection();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = config.frames - 1;
    for _ in 0..config.max_retries {
        let poses = trajectory(config, &mut rng);
        let Some(boxes) = place_boxes(config, &geometry, &mut rng) else { continue };
        let mut primitives = vec![ScenePrimitive::ground(0.0)];
        primitives.extend(boxes);
        let gt = voxelize(&primitives, geometry, config.classes)?;
        let frac = gt.occupied_fraction();
        if frac < config.occupied_fraction[0] || frac > config.occupied_fraction[1] {
            continue;
        }
        let mut seen = vec![false; config.classes];
        let mut frames = Vec::with_capacity(config.frames);
        for (f, pose) in poses.iter().enumerate() {
            let moved: Vec<ScenePrimitive> = primitives.iter().map(|p| p.at_frame(f, last)).collect();
            let mut views = Vec::with_capacity(cameras.len());
            for cam in &cameras {
                let raster = rasterize(&moved, pose, cam);
                for &c in &raster.class {
                    seen[c as usize] = true;
                }
                views.push(encode_view(&raster, config.classes, &projection, config.feature_channels));
            }
            frames.push(SceneFrame { pose: *pose, views });
        }
        if gt.labels.iter().any(|&l| l != 0 && !seen[l as usize]) {
            continue;
        }
        return Ok(SceneSequence { config: config.clone(), seed, cameras, frames, primitives, gt });
    }
    Err(Error::Generation(format!("no valid placement for seed {seed} after {} attempts", config.max_retries)))
}

pub const SCENE_MAGIC: &[u8; 4] = b"IBSC";
pub const SCENE_VERSION: u32 = 1;
/// Display names: free, ground, then one name per box class.
pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|c| match c {
            0 => "free".to_string(),
            1 => "ground".to_string(),
            c => format!("object{c}"),
        })
        .collect()
}

pub const GRID_MAGIC: &[u8; 4] = b"IBOG";
pub const GRID_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset: self.pos as u64, detail: detail.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64s<const N: usize>(&mut self, what: &str) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for v in &mut out {
            *v = self.f64(what)?;
        }
        Ok(out)
    }
}

/// Serializes `scene` in the layout documented in `docs/scene_format.md`.
pub fn scene_to_bytes(scene: &SceneSequence) -> Vec<u8> {
    let cfg = &scene.config;
    let g = &scene.gt.geometry;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(SCENE_MAGIC);
    w.u32(SCENE_VERSION as usize);
    w.u64(scene.seed);
    g.dims.iter().for_each(|&d| w.u32(d));
    w.f64s(&g.voxel_size);
    w.f64s(&g.origin);
    w.u32(scene.gt.classes);
    w.u32(scene.frames.len());
    w.u32(scene.cameras.len());
    w.u32(cfg.image_width);
    w.u32(cfg.image_height);
    w.u32(cfg.feature_channels);
    w.u32(scene.primitives.len());
    let text = toml::to_string(cfg).expect("scene config serializes");
    w.u32(text.len());
    w.0.extend_from_slice(text.as_bytes());
    for cam in &scene.cameras {
        w.f64s(&[cam.fx, cam.fy, cam.cx, cam.cy]);
        w.f64s(cam.extrinsics.transpose().as_slice());
    }
    for f in &scene.frames {
        f.pose.rows().iter().for_each(|r| w.f64s(r));
        for v in &f.views {
            v.data().iter().for_each(|x| w.0.extend_from_slice(&x.to_le_bytes()));
        }
    }
    w.0.extend_from_slice(&scene.gt.labels);
    for p in &scene.primitives {
        w.0.push(match p.kind {
            PrimitiveKind::GroundPlane => 0,
            PrimitiveKind::Box => 1,
        });
        w.0.push(p.class);
        w.f64s(&p.center);
        w.f64s(&p.size);
        w.f64(p.yaw);
        w.f64s(&p.velocity);
    }
    w.0
}

/// Parses bytes produced by [`scene_to_bytes`].
pub fn scene_from_bytes(bytes: &[u8], path: &Path) -> Result<SceneSequence> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != SCENE_MAGIC {
        r.pos = 0;
        return Err(r.fail("not a scene file (bad magic number)"));
    }
    let version = r.u32("version")?;
    if version != SCENE_VERSION as usize {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported scene version {version}, expected {SCENE_VERSION}")));
    }
    let seed = r.u64("seed")?;
    let dims = [r.u32("grid dims")?, r.u32("grid dims")?, r.u32("grid dims")?];
    let voxel_size = r.f64s::<3>("voxel size")?;
    let origin = r.f64s::<3>("grid origin")?;
    let classes = r.u32("class count")?;
    let n_frames = r.u32("frame count")?;
    let n_cams = r.u32("camera count")?;
    let (width, height, channels) = (r.u32("image width")?, r.u32("image height")?, r.u32("feature channels")?);
    let n_prims = r.u32("primitive count")?;
    let text_len = r.u32("config length")?;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(text_len, "config")?).map_err(|_| {
        Error::Format { path: path.to_path_buf(), offset: at as u64, detail: "config block is not UTF-8".into() }
    })?;
    let config: SceneConfig = toml::from_str(text)
        .map_err(|e| Error::Format { path: path.to_path_buf(), offset: at as u64, detail: format!("config block: {e}") })?;
    if config.grid != dims || config.classes != classes || config.frames != n_frames || config.cameras != n_cams {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: at as u64,
            detail: "config block disagrees with the header".into(),
        });
    }
    let geometry = GridGeometry { dims, voxel_size, origin };
    let voxels = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let view_len = width.checked_mul(height).and_then(|v| v.checked_mul(channels));
    let (Some(voxels), Some(view_len)) = (voxels, view_len) else {
        return Err(r.fail("header sizes overflow"));
    };
    let needed = n_cams * 160 + n_frames * (128 + n_cams * view_len * 4) + voxels + n_prims * 82;
    if bytes.len() - r.pos < needed {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            detail: format!("truncated: header promises {needed} more bytes, file has {}", bytes.len() - r.pos),
        });
    }

    let mut cameras = Vec::with_capacity(n_cams);
    for _ in 0..n_cams {
        let at = r.pos;
        let [fx, fy, cx, cy] = r.f64s::<4>("camera intrinsics")?;
        let ext = r.f64s::<16>("camera extrinsics")?;
        let m = nalgebra::Matrix4::from_row_slice(&ext);
        let cam = CameraModel::new(fx, fy, cx, cy, m, width, height).map_err(|e| {
            Error::Format { path: path.to_path_buf(), offset: at as u64, detail: format!("invalid camera: {e}") }
        })?;
        cameras.push(cam);
    }
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let at = r.pos;
        let m = r.f64s::<16>("pose")?;
        let rows = [[m[0], m[1], m[2], m[3]], [m[4], m[5], m[6], m[7]], [m[8], m[9], m[10], m[11]], [m[12], m[13], m[14], m[15]]];
        let pose = EgoPose::from_rows(rows)
            .map_err(|e| Error::Format { path: path.to_path_buf(), offset: at as u64, detail: format!("invalid pose: {e}") })?;
        let mut views = Vec::with_capacity(n_cams);
        for _ in 0..n_cams {
            let raw = r.take(view_len * 4, "view features")?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            views.push(Tensor::new(&[height, width, channels], data)?);
        }
        frames.push(SceneFrame { pose, views });
    }
    let at = r.pos;
    let labels = r.take(voxels, "labels")?.to_vec();
    let gt = OccupancyGrid::new(geometry, classes, labels)
        .map_err(|e| Error::Format { path: path.to_path_buf(), offset: at as u64, detail: e.to_string() })?;
    let mut primitives = Vec::with_capacity(n_prims);
    for _ in 0..n_prims {
        let kind = match r.take(1, "primitive kind")?[0] {
            0 => PrimitiveKind::GroundPlane,
            1 => PrimitiveKind::Box,
            k => {
                r.pos -= 1;
                return Err(r.fail(format!("unknown primitive kind {k}")));
            }
        };
        let class = r.take(1, "primitive class")?[0];
        let center = r.f64s::<3>("primitive center")?;
        let size = r.f64s::<3>("primitive size")?;
        let yaw = r.f64("primitive yaw")?;
        let velocity = r.f64s::<3>("primitive velocity")?;
        primitives.push(ScenePrimitive { kind, center, size, yaw, class, velocity });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(SceneSequence { config, seed, cameras, frames, primitives, gt })
}

pub fn save_scene(scene: &SceneSequence, path: &Path) -> Result<()> {
    write_atomic(path, &scene_to_bytes(scene))
}

pub fn load_scene(path: &Path) -> Result<SceneSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    scene_from_bytes(&bytes, path)
}

/// Loads a scene and checks its grid against `expected` dims.
pub fn load_scene_expect(path: &Path, expected: [usize; 3]) -> Result<SceneSequence> {
    let scene = load_scene(path)?;
    if scene.gt.geometry.dims != expected {
        return Err(Error::Config(format!(
            "scene {} has grid {:?} but the configuration expects {:?}",
            path.display(),
            scene.gt.geometry.dims,
            expected
        )));
    }
    Ok(scene)
}

/// A labeled grid on its own: magic, version, dims, voxel size, origin,
/// class count, then one label byte per voxel in grid index order.
pub fn grid_to_bytes(grid: &OccupancyGrid) -> Vec<u8> {
    let g = &grid.geometry;
    let mut w = Writer(Vec::with_capacity(72 + grid.labels.len()));
    w.0.extend_from_slice(GRID_MAGIC);
    w.u32(GRID_VERSION as usize);
    g.dims.iter().for_each(|&d| w.u32(d));
    w.f64s(&g.voxel_size);
    w.f64s(&g.origin);
    w.u32(grid.classes);
    w.0.extend_from_slice(&grid.labels);
    w.0
}

pub fn grid_from_bytes(bytes: &[u8], path: &Path) -> Result<OccupancyGrid> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != GRID_MAGIC {
        r.pos = 0;
        return Err(r.fail("not a grid file (bad magic number)"));
    }
    let version = r.u32("version")?;
    if version != GRID_VERSION as usize {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported grid version {version}, expected {GRID_VERSION}")));
    }
    let dims = [r.u32("grid dims")?, r.u32("grid dims")?, r.u32("grid dims")?];
    let voxel_size = r.f64s::<3>("voxel size")?;
    let origin = r.f64s::<3>("grid origin")?;
    let classes = r.u32("class count")?;
    let at = r.pos;
    let Some(n) = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)) else {
        return Err(r.fail("grid dims overflow"));
    };
    let labels = r.take(n, "labels")?.to_vec();
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let geometry = GridGeometry { dims, voxel_size, origin };
    OccupancyGrid::new(geometry, classes, labels)
        .map_err(|e| Error::Format { path: path.to_path_buf(), offset: at as u64, detail: e.to_string() })
}

pub fn save_grid(grid: &OccupancyGrid, path: &Path) -> Result<()> {
    write_atomic(path, &grid_to_bytes(grid))
}

pub fn load_grid(path: &Path) -> Result<OccupancyGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    grid_from_bytes(&bytes, path)
}
