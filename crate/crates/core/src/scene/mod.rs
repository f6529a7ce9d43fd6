//! Synthetic ground-plane worlds with box objects at known 3D positions.
//!
//! Objects are laid out in the level (gravity-aligned) camera frame: x right,
//! y down, z forward, ground at `y = EL`. A pose `A` maps level coordinates to
//! the tilted camera frame, `p_cam = A · p_level`, which is the convention of
//! [`ray_ground_intersection`].

pub mod ablation;
pub mod robustness;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Normal, StandardNormal};

use crate::camera::{project, ray_ground_intersection, CameraIntrinsics, PixelCoord, Point3D};
use crate::error::{GeometryError, SceneError};
use crate::fusion::{FeatureMap, Mat};
use crate::ground::{build_map, GroundDepthMap, GroundPlaneConfig, DEFAULT_BASELINE, DEFAULT_ELEVATION};
use crate::pose::CameraPose;

pub use ablation::{run_ablation, AblationReport, AblationSettings, BucketMae};
pub use robustness::{run_robustness, PoseSource, RobustnessReport, SigmaSummary, TrialRecord};

/// Placement attempts per object before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 200;

/// Boundary between the near and far buckets, meters.
pub const NEAR_FAR_SPLIT: f64 = 20.0;

/// Depth reported for rays that see no ground or ground beyond this range, meters.
pub const DEFAULT_MAX_DEPTH: f64 = 80.0;

/// A pinhole camera and its image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneCamera {
    pub intrinsics: CameraIntrinsics<f64>,
    pub width: usize,
    pub height: usize,
}

impl SceneCamera {
    /// Left color camera of KITTI drive 0000 (P2), 1242 × 375.
    pub fn kitti() -> Self {
        Self {
            intrinsics: CameraIntrinsics { fx: 721.5377, fy: 721.5377, cx: 609.5593, cy: 172.854 },
            width: 1242,
            height: 375,
        }
    }
}

/// Object size in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectDims {
    pub height: f64,
    pub width: f64,
    pub length: f64,
}

/// Axis-aligned box resting on the ground, level frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub center: Point3D<f64>,
    pub dims: ObjectDims,
}

impl SceneObject {
    /// Box whose bottom-front-edge midpoint touches the ground at `(x, EL, contact_z)`.
    pub fn on_ground(x: f64, contact_z: f64, dims: ObjectDims, el: f64) -> Self {
        let center = Point3D::new(x, el - dims.height / 2.0, contact_z + dims.length / 2.0);
        Self { center, dims }
    }

    /// Midpoint of the bottom face's front edge.
    pub fn contact_point(&self) -> Point3D<f64> {
        let c = self.center;
        Point3D::new(c.x, c.y + self.dims.height / 2.0, c.z - self.dims.length / 2.0)
    }

    pub fn corners(&self) -> [Point3D<f64>; 8] {
        let c = self.center;
        let (h, w, l) = (self.dims.height / 2.0, self.dims.width / 2.0, self.dims.length / 2.0);
        let mut out = [c; 8];
        for (i, p) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -w } else { w };
            let sy = if i & 2 == 0 { -h } else { h };
            let sz = if i & 4 == 0 { -l } else { l };
            *p = Point3D::new(c.x + sx, c.y + sy, c.z + sz);
        }
        out
    }

    /// Image bounding box `(u1, v1, u2, v2)` of the box seen with `pose`.
    pub fn footprint(&self, k: &CameraIntrinsics<f64>, pose: &CameraPose<f64>) -> Result<[f64; 4], GeometryError> {
        let mut bb = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in self.corners() {
            let q = project(Point3D::from_array(pose.rotate(p.to_array())), k)?;
            bb = [bb[0].min(q.u), bb[1].min(q.v), bb[2].max(q.u), bb[3].max(q.v)];
        }
        Ok(bb)
    }
}

fn overlaps(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

/// Everything an experiment needs to generate scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Standard deviation of the pitch and roll noise drawn by [`generate_scene`], degrees.
    pub pose_noise_sigma: f64,
    /// Noise levels swept by the robustness experiment, degrees.
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub objects_per_scene: usize,
    /// Range of contact depths, meters.
    pub depth_range: (f64, f64),
    pub height_range: (f64, f64),
    pub width_range: (f64, f64),
    pub length_range: (f64, f64),
    /// Build depth maps with the true pose instead of the level pose.
    pub use_pose_correction: bool,
    /// Feed real ground depth to the decoder; when off, depth queries are zero.
    pub use_fusion: bool,
    pub pose_source: PoseSource,
    pub camera: SceneCamera,
    pub ground: GroundPlaneConfig<f64>,
    pub stride: usize,
    pub channels: usize,
    /// Standard deviation of the noise on the contact feature channel.
    pub contact_noise_std: f64,
    pub max_depth: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let camera = SceneCamera::kitti();
        let kf = camera.intrinsics.downscaled(crate::ground::DEFAULT_STRIDE as f64);
        let ground = GroundPlaneConfig::with_default_stabilizer(DEFAULT_ELEVATION, DEFAULT_BASELINE, &kf)
            .expect("default ground config is valid");
        Self {
            pose_noise_sigma: 0.0,
            sigmas: vec![0.0, 1.0, 2.0, 3.0],
            trials: 100,
            seed: 0,
            objects_per_scene: 4,
            depth_range: (5.0, 50.0),
            height_range: (1.4, 1.8),
            width_range: (1.5, 1.9),
            length_range: (3.5, 4.5),
            use_pose_correction: true,
            use_fusion: true,
            pose_source: PoseSource::True,
            camera,
            ground,
            stride: crate::ground::DEFAULT_STRIDE,
            channels: 4,
            contact_noise_std: 0.1,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidConfig(m));
        let range_ok = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1 && r.1.is_finite();
        if !(self.pose_noise_sigma >= 0.0) || !self.pose_noise_sigma.is_finite() {
            return bad(format!("sigma must be non-negative, got {}", self.pose_noise_sigma));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return bad(format!("sigma must be non-negative, got {s}"));
        }
        if self.trials == 0 {
            return bad("need at least one trial".into());
        }
        if self.objects_per_scene == 0 {
            return bad("need at least one object per scene".into());
        }
        for (name, r) in [
            ("depth", self.depth_range),
            ("height", self.height_range),
            ("width", self.width_range),
            ("length", self.length_range),
        ] {
            if !range_ok(r) {
                return bad(format!("invalid {name} range {r:?}"));
            }
        }
        if self.stride == 0 || self.camera.width < self.stride || self.camera.height < self.stride {
            return bad(format!("stride {} does not fit the image", self.stride));
        }
        if self.channels < 4 || self.channels % 2 != 0 {
            return bad(format!("channels must be even and at least 4, got {}", self.channels));
        }
        if !(self.contact_noise_std >= 0.0) {
            return bad("contact noise must be non-negative".into());
        }
        if !(self.max_depth > self.depth_range.1) {
            return bad("max depth must exceed the depth range".into());
        }
        self.camera.intrinsics.validate()?;
        Ok(())
    }

    /// Feature-map size at the configured stride.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.camera.width / self.stride, self.camera.height / self.stride)
    }

    pub fn feature_intrinsics(&self) -> CameraIntrinsics<f64> {
        self.camera.intrinsics.downscaled(self.stride as f64)
    }
}

/// Independent random stream for one trial; parallel runs see the same numbers.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn uniform<R: Rng>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..r.1)
    }
}

/// Places `objects_per_scene` boxes with contact depths uniform in `depth_range`
/// and contact columns uniform over the central 80 % of the image. Footprints
/// must not overlap in the level view; a rejected object is redrawn.
pub fn sample_layout<R: Rng>(cfg: &ExperimentConfig, rng: &mut R) -> Result<Vec<SceneObject>, SceneError> {
    let k = &cfg.camera.intrinsics;
    let level = CameraPose::identity();
    let w = cfg.camera.width as f64;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(cfg.objects_per_scene);
    let mut footprints: Vec<[f64; 4]> = Vec::with_capacity(cfg.objects_per_scene);
    for i in 0..cfg.objects_per_scene {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let z = uniform(rng, cfg.depth_range);
            let u = uniform(rng, (0.1 * w, 0.9 * w));
            let dims = ObjectDims {
                height: uniform(rng, cfg.height_range),
                width: uniform(rng, cfg.width_range),
                length: uniform(rng, cfg.length_range),
            };
            let x = (u - k.cx) / k.fx * z;
            let obj = SceneObject::on_ground(x, z, dims, cfg.ground.el);
            let fp = obj.footprint(k, &level)?;
            if footprints.iter().all(|f| !overlaps(f, &fp)) {
                objects.push(obj);
                footprints.push(fp);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::PlacementFailure { object: i, attempts: MAX_PLACEMENT_ATTEMPTS });
        }
    }
    Ok(objects)
}

/// Standard-normal pitch and roll draws; scaled by σ they give the pose noise.
pub fn sample_pose_noise<R: Rng>(rng: &mut R) -> (f64, f64) {
    (rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Where an object touches the ground as seen by a posed camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactView {
    /// Contact point in the posed camera frame.
    pub point: Point3D<f64>,
    pub pixel: PixelCoord<f64>,
}

impl ContactView {
    pub fn new(obj: &SceneObject, k: &CameraIntrinsics<f64>, pose: &CameraPose<f64>) -> Result<Self, GeometryError> {
        let point = Point3D::from_array(pose.rotate(obj.contact_point().to_array()));
        let pixel = project(point, k)?;
        Ok(Self { point, pixel })
    }

    /// Camera-forward depth of the contact point.
    pub fn depth(&self) -> f64 {
        self.point.z
    }
}

/// Reads the ground-depth field at a sub-pixel position. Rays that miss the
/// ground, or meet it beyond `max_depth`, report `max_depth`.
pub fn read_ground_depth(
    p: PixelCoord<f64>,
    k: &CameraIntrinsics<f64>,
    pose: &CameraPose<f64>,
    cfg: &GroundPlaneConfig<f64>,
    max_depth: f64,
) -> Result<f64, GeometryError> {
    match ray_ground_intersection(p, k, pose, cfg) {
        Ok(z) => Ok(z.min(max_depth)),
        Err(GeometryError::RayParallelOrAbove { .. }) => Ok(max_depth),
        Err(e) => Err(e),
    }
}

/// One generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub objects: Vec<SceneObject>,
    pub pose: CameraPose<f64>,
    /// Channel [`blob_channel`]: Gaussian blob per object at the projected
    /// centroid. Channel [`contact_channel`]: 1 at each ground-contact cell plus
    /// Gaussian noise everywhere. Remaining channels are zero.
    pub features: FeatureMap<f64>,
    /// Ground-depth map at feature resolution, built with the true pose when
    /// pose correction is on and with the level pose otherwise.
    pub depth_map: GroundDepthMap<f64>,
    /// Camera-frame depth of each object's contact point, meters.
    pub targets: Vec<f64>,
    /// Full-resolution contact pixel of each object.
    pub contacts: Vec<PixelCoord<f64>>,
    /// Full-resolution contact row of each object.
    pub contact_rows: Vec<f64>,
    /// Feature cell `(col, row)` holding each object's centroid.
    pub centroid_cells: Vec<(usize, usize)>,
    /// Feature cell `(col, row)` holding each object's contact pixel.
    pub contact_cells: Vec<(usize, usize)>,
}

impl SyntheticSample {
    /// Flat feature-map index of a `(col, row)` cell.
    pub fn cell_index(&self, cell: (usize, usize)) -> usize {
        cell.1 * self.features.ws() + cell.0
    }
}

/// The blob and contact features sit on the two lowest-frequency column
/// channels of the position encoding, where it is nearly constant.
pub fn blob_channel(channels: usize) -> usize {
    channels / 2 - 2
}

pub fn contact_channel(channels: usize) -> usize {
    channels / 2 - 1
}

fn cell_of(p: PixelCoord<f64>, ws: usize, hs: usize) -> (usize, usize) {
    let clamp = |x: f64, n: usize| (x.floor().max(0.0) as usize).min(n - 1);
    (clamp(p.u, ws), clamp(p.v, hs))
}

/// Draws a layout, then pose noise with σ = `pose_noise_sigma`, then renders features.
pub fn generate_scene<R: Rng>(cfg: &ExperimentConfig, rng: &mut R) -> Result<SyntheticSample, SceneError> {
    cfg.validate()?;
    let objects = sample_layout(cfg, rng)?;
    let (xp, xr) = sample_pose_noise(rng);
    let s = cfg.pose_noise_sigma;
    let pose = CameraPose::from_degrees(s * xp, s * xr);
    render_scene(cfg, objects, pose, rng)
}

/// Renders features, depth map and targets for a fixed layout and pose.
pub fn render_scene<R: Rng>(
    cfg: &ExperimentConfig,
    objects: Vec<SceneObject>,
    pose: CameraPose<f64>,
    rng: &mut R,
) -> Result<SyntheticSample, SceneError> {
    let k = &cfg.camera.intrinsics;
    let kf = cfg.feature_intrinsics();
    let (ws, hs) = cfg.feature_size();
    let stride = cfg.stride as f64;

    let mut targets = Vec::with_capacity(objects.len());
    let mut contacts = Vec::with_capacity(objects.len());
    let mut centroid_cells = Vec::with_capacity(objects.len());
    let mut contact_cells = Vec::with_capacity(objects.len());
    let mut blobs = Vec::with_capacity(objects.len());
    for obj in &objects {
        let view = ContactView::new(obj, k, &pose)?;
        let ray_depth = ray_ground_intersection(view.pixel, k, &pose, &cfg.ground)?;
        if (ray_depth - view.depth()).abs() > 1e-9 * view.depth().max(1.0) {
            return Err(SceneError::InvalidConfig(format!(
                "contact depth {} disagrees with the ground ray {ray_depth}",
                view.depth()
            )));
        }
        targets.push(view.depth());
        contacts.push(view.pixel);
        let fp = PixelCoord::new(view.pixel.u / stride, view.pixel.v / stride);
        contact_cells.push(cell_of(fp, ws, hs));

        let c = Point3D::from_array(pose.rotate(obj.center.to_array()));
        let cp = project(c, &kf)?;
        centroid_cells.push(cell_of(cp, ws, hs));
        let spread = (kf.fy * obj.dims.height / c.z / 4.0).max(0.5);
        blobs.push((cp, spread));
    }

    let noise = Normal::new(0.0, cfg.contact_noise_std).map_err(|e| SceneError::InvalidConfig(e.to_string()))?;
    let c = cfg.channels;
    let mut data = Mat::zeros(ws * hs, c);
    for row in 0..hs {
        for col in 0..ws {
            let i = row * ws + col;
            let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
            let blob: f64 = blobs
                .iter()
                .map(|(p, s)| (-((u - p.u).powi(2) + (v - p.v).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            data.set(i, blob_channel(c), blob);
            let contact = if contact_cells.contains(&(col, row)) { 1.0 } else { 0.0 };
            data.set(i, contact_channel(c), contact + rng.sample(noise));
        }
    }
    let features = FeatureMap::new(ws, hs, data)?;

    let map_pose = if cfg.use_pose_correction { pose } else { CameraPose::identity() };
    let depth_map = build_map(ws, hs, &kf, &map_pose, &cfg.ground)?;
    let contact_rows = contacts.iter().map(|p| p.v).collect();
    Ok(SyntheticSample { objects, pose, features, depth_map, targets, contacts, contact_rows, centroid_cells, contact_cells })
}
