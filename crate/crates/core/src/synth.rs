//! Desk-scale synthetic scenes: kinematic pose sampling, pinhole projection,
//! occlusion-ordered segmentation and RGB rendering, and a perturbation model
//! that stands in for an upstream 3D pose estimator.
//!
//! Camera space is x right, y down, z forward (depth), millimetres.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::mpjpe;
use crate::math::{add3, angle_between, any_orthogonal, cross3, norm3, normalize3, rotate3, scale3};
use crate::orientation::reconstruct;
use crate::patching::{colorize_segmentation, Image, Mask, SegPalette};
use crate::skeleton::{compute_bone_stats, Keypoints2D, Pose3D, SkeletonTopology};
use crate::store::{self, Manifest, ManifestEntry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal: f64,
    pub principal: [f64; 2],
    pub image_size: [usize; 2],
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            focal: 1100.0,
            principal: [128.0, 128.0],
            image_size: [256, 256],
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::Invalid(format!("camera focal must be > 0, got {}", self.focal)));
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(Error::Invalid("camera image size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn project_point(&self, p: [f64; 3]) -> Result<[f64; 2]> {
        if p[2].is_nan() || p[2] <= 0.0 {
            return Err(Error::Invalid(format!("point depth must be > 0, got {}", p[2])));
        }
        Ok([
            self.focal * p[0] / p[2] + self.principal[0],
            self.focal * p[1] / p[2] + self.principal[1],
        ])
    }
}

/// Pinhole projection of every joint.
pub fn project(pose: &Pose3D, cam: &CameraModel) -> Result<Keypoints2D> {
    cam.validate()?;
    let points = pose
        .positions
        .iter()
        .map(|p| cam.project_point(*p))
        .collect::<Result<_>>()?;
    Ok(Keypoints2D { points })
}

/// Rest direction, sampling cone and nominal length for every limb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePrior {
    pub rest_dir: Vec<[f64; 3]>,
    pub cone_deg: Vec<f64>,
    pub base_length_mm: Vec<f64>,
    pub root_position: [f64; 3],
}

impl PosePrior {
    /// Upright, facing-camera rest pose for the bundled 17-joint skeleton.
    pub fn h36m17() -> Self {
        const DOWN: [f64; 3] = [0.0, 1.0, 0.0];
        const UP: [f64; 3] = [0.0, -1.0, 0.0];
        const LEFT: [f64; 3] = [-1.0, 0.0, 0.0];
        const RIGHT: [f64; 3] = [1.0, 0.0, 0.0];
        let table: [([f64; 3], f64, f64); 16] = [
            (LEFT, 10.0, 130.0),  // pelvis -> right hip
            (DOWN, 45.0, 450.0),  // right thigh
            (DOWN, 45.0, 440.0),  // right shin
            (RIGHT, 10.0, 130.0), // pelvis -> left hip
            (DOWN, 45.0, 450.0),
            (DOWN, 45.0, 440.0),
            (UP, 15.0, 230.0), // spine
            (UP, 15.0, 250.0), // thorax
            (UP, 20.0, 110.0), // neck
            (UP, 25.0, 115.0), // head
            (RIGHT, 15.0, 150.0), // left shoulder
            (DOWN, 60.0, 280.0),
            (DOWN, 60.0, 250.0),
            (LEFT, 15.0, 150.0), // right shoulder
            (DOWN, 60.0, 280.0),
            (DOWN, 60.0, 250.0),
        ];
        Self {
            rest_dir: table.iter().map(|t| t.0).collect(),
            cone_deg: table.iter().map(|t| t.1).collect(),
            base_length_mm: table.iter().map(|t| t.2).collect(),
            root_position: [0.0, -80.0, 9000.0],
        }
    }

    pub fn validate(&self, topo: &SkeletonTopology) -> Result<()> {
        let n = topo.limb_count();
        for (what, len) in [
            ("prior rest directions", self.rest_dir.len()),
            ("prior cone angles", self.cone_deg.len()),
            ("prior limb lengths", self.base_length_mm.len()),
        ] {
            if len != n {
                return Err(Error::Shape {
                    what,
                    expected: n,
                    got: len,
                });
            }
        }
        if self.rest_dir.iter().any(|d| (norm3(*d) - 1.0).abs() > 1e-9) {
            return Err(Error::Invalid("prior rest directions must be unit vectors".into()));
        }
        if self.cone_deg.iter().any(|c| !(0.0..=180.0).contains(c)) {
            return Err(Error::Invalid("prior cone angles must lie in [0, 180]".into()));
        }
        Ok(())
    }

    /// Same prior with every cone collapsed to its rest direction.
    pub fn rigid(&self) -> Self {
        Self {
            cone_deg: vec![0.0; self.cone_deg.len()],
            ..self.clone()
        }
    }
}

/// Unit vector uniform on the spherical cap of half-angle `cone_deg` around `axis`.
pub fn sample_in_cone<R: Rng + ?Sized>(rng: &mut R, axis: [f64; 3], cone_deg: f64) -> [f64; 3] {
    let u: f64 = rng.random();
    let phi: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let cos_max = cone_deg.to_radians().cos();
    let cos_t = 1.0 - u * (1.0 - cos_max);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let e1 = any_orthogonal(axis);
    let e2 = cross3(axis, e1);
    let (sp, cp) = phi.sin_cos();
    [
        cos_t * axis[0] + sin_t * (cp * e1[0] + sp * e2[0]),
        cos_t * axis[1] + sin_t * (cp * e1[1] + sp * e2[1]),
        cos_t * axis[2] + sin_t * (cp * e1[2] + sp * e2[2]),
    ]
}

/// Root at the prior's working position; each child at parent plus
/// `limb_lengths[k]` times a direction drawn within limb `k`'s cone.
pub fn sample_pose<R: Rng + ?Sized>(
    rng: &mut R,
    limb_lengths: &[f64],
    prior: &PosePrior,
    topo: &SkeletonTopology,
) -> Result<Pose3D> {
    prior.validate(topo)?;
    if limb_lengths.len() != topo.limb_count() {
        return Err(Error::Shape {
            what: "limb lengths",
            expected: topo.limb_count(),
            got: limb_lengths.len(),
        });
    }
    if limb_lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::Invalid("limb lengths must be positive".into()));
    }
    let mut displacements = vec![[0.0; 3]; topo.limb_count()];
    for &k in topo.visit_order() {
        let dir = sample_in_cone(rng, prior.rest_dir[k], prior.cone_deg[k]);
        displacements[k] = scale3(dir, limb_lengths[k]);
    }
    reconstruct(&displacements, prior.root_position, topo)
}

/// Stand-in for an upstream estimator's error.
///
/// Each limb direction is first pulled towards its rest direction by
/// `prior_pull` of the angle between them (an estimator biased towards
/// common poses), then rotated about a random perpendicular axis by an
/// angle drawn from `N(0, orient_noise_deg)`, and its length scaled by
/// `1 + N(0, length_noise_frac)`. The root is translated by
/// `N(0, root_noise_mm)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub orient_noise_deg: f64,
    pub length_noise_frac: f64,
    pub root_noise_mm: f64,
    pub prior_pull: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            orient_noise_deg: 8.0,
            length_noise_frac: 0.03,
            root_noise_mm: 30.0,
            prior_pull: 0.5,
        }
    }
}

impl PerturbConfig {
    pub fn zero() -> Self {
        Self {
            orient_noise_deg: 0.0,
            length_noise_frac: 0.0,
            root_noise_mm: 0.0,
            prior_pull: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.orient_noise_deg,
            self.length_noise_frac,
            self.root_noise_mm,
            self.prior_pull,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.prior_pull > 1.0 {
            return Err(Error::Invalid(format!("invalid perturbation config {self:?}")));
        }
        Ok(())
    }
}

/// Perturbed initial estimate of `gt`; deterministic given the RNG state.
pub fn perturb_initial<R: Rng + ?Sized>(
    gt: &Pose3D,
    cfg: &PerturbConfig,
    prior: &PosePrior,
    topo: &SkeletonTopology,
    rng: &mut R,
) -> Result<Pose3D> {
    cfg.validate()?;
    gt.check(topo, "ground-truth pose")?;
    prior.validate(topo)?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let limb_noise = cfg.orient_noise_deg > 0.0 || cfg.length_noise_frac > 0.0 || cfg.prior_pull > 0.0;
    let mut pose = if limb_noise {
        let mut displacements = gt.limb_displacements(topo);
        for &k in topo.visit_order() {
            let d = displacements[k];
            let len = norm3(d);
            if len == 0.0 {
                continue;
            }
            let mut dir = scale3(d, 1.0 / len);
            let to_rest = angle_between(dir, prior.rest_dir[k]);
            let axis = cross3(dir, prior.rest_dir[k]);
            if cfg.prior_pull > 0.0 && norm3(axis) > 1e-12 {
                dir = rotate3(dir, normalize3(axis), cfg.prior_pull * to_rest);
            }
            let psi: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            let angle = cfg.orient_noise_deg.to_radians() * unit.sample(rng);
            let eps = cfg.length_noise_frac * unit.sample(rng);
            let e1 = any_orthogonal(dir);
            let e2 = cross3(dir, e1);
            let rot_axis = add3(scale3(e1, psi.cos()), scale3(e2, psi.sin()));
            dir = rotate3(dir, normalize3(rot_axis), angle);
            displacements[k] = scale3(dir, len * (1.0 + eps));
        }
        reconstruct(&displacements, gt.positions[topo.root()], topo)?
    } else {
        gt.clone()
    };

    if cfg.root_noise_mm > 0.0 {
        let offset = [
            cfg.root_noise_mm * unit.sample(rng),
            cfg.root_noise_mm * unit.sample(rng),
            cfg.root_noise_mm * unit.sample(rng),
        ];
        pose = pose.translated(offset);
    }
    Ok(pose)
}

/// Root-aligned MPJPE to the nearest reference pose.
pub fn rarity_score(pose: &Pose3D, reference: &[Pose3D], topo: &SkeletonTopology) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("rarity reference set"));
    }
    let mut best = f64::INFINITY;
    for r in reference {
        best = best.min(mpjpe(pose, r, topo)?);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Pixels within this distance of a projected limb belong to its mask.
    pub limb_thickness_px: f64,
    /// Depth change (mm) along a limb over which its brightness falls by one unit.
    pub shading_depth_mm: f64,
    /// Std-dev of per-pixel RGB noise.
    pub pixel_noise: f64,
    /// Std-dev of the per-limb brightness jitter.
    pub limb_noise: f64,
    /// Weight of the background texture blended over body pixels.
    pub texture_blend: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            limb_thickness_px: 3.0,
            shading_depth_mm: 400.0,
            pixel_noise: 0.06,
            limb_noise: 0.1,
            texture_blend: 0.25,
        }
    }
}

/// Distance from `p` to segment `a`-`b` and the segment parameter of the closest point.
fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dx = ap[0] - t * ab[0];
    let dy = ap[1] - t * ab[1];
    ((dx * dx + dy * dy).sqrt(), t)
}

/// Pixels whose centre lies within `thickness` of the segment `a`-`b`.
pub fn limb_mask(a: [f64; 2], b: [f64; 2], thickness: f64, width: usize, height: usize) -> Mask {
    let mut mask = Mask::new(width, height);
    let x_lo = (a[0].min(b[0]) - thickness - 1.0).floor().max(0.0) as usize;
    let y_lo = (a[1].min(b[1]) - thickness - 1.0).floor().max(0.0) as usize;
    let x_hi = (a[0].max(b[0]) + thickness + 1.0).ceil().min(width as f64);
    let y_hi = (a[1].max(b[1]) + thickness + 1.0).ceil().min(height as f64);
    if x_hi <= 0.0 || y_hi <= 0.0 {
        return mask;
    }
    for y in y_lo..y_hi as usize {
        for x in x_lo..x_hi as usize {
            let (d, _) = segment_distance([x as f64 + 0.5, y as f64 + 0.5], a, b);
            if d <= thickness {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Limb indices sorted far-to-near by mean endpoint depth (ties by index).
pub fn painter_order(pose: &Pose3D, topo: &SkeletonTopology) -> Vec<usize> {
    let depth: Vec<f64> = topo
        .limbs()
        .iter()
        .map(|l| 0.5 * (pose.positions[l.parent][2] + pose.positions[l.child][2]))
        .collect();
    let mut order: Vec<usize> = (0..topo.limb_count()).collect();
    order.sort_by(|&a, &b| depth[b].total_cmp(&depth[a]).then(a.cmp(&b)));
    order
}

/// Renders the colour-coded segmentation and a noisier RGB view of `pose`.
///
/// RGB body pixels take the part colour of the topmost limb, shaded by depth
/// relative to the limb midpoint (the nearer end is brighter), scaled by a per-limb brightness
/// jitter and blended with a procedural background texture; every pixel gets
/// additive noise. Both images are quantized to 8-bit levels.
pub fn render_scene<R: Rng + ?Sized>(
    pose: &Pose3D,
    cam: &CameraModel,
    palette: &SegPalette,
    cfg: &RenderConfig,
    topo: &SkeletonTopology,
    rng: &mut R,
) -> Result<(Image, Image)> {
    let kps = project(pose, cam)?;
    let [w, h] = cam.image_size;
    if palette.limb_colors.len() != topo.limb_count() {
        return Err(Error::Shape {
            what: "palette limb colours",
            expected: topo.limb_count(),
            got: palette.limb_colors.len(),
        });
    }
    let order = painter_order(pose, topo);
    let masks: Vec<Mask> = topo
        .limbs()
        .iter()
        .map(|l| limb_mask(kps.points[l.parent], kps.points[l.child], cfg.limb_thickness_px, w, h))
        .collect();
    let seg = colorize_segmentation(&masks, palette, &order)?;

    // topmost limb per pixel, same painter's order as the segmentation
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    for &k in &order {
        for (o, &m) in owner.iter_mut().zip(&masks[k].data) {
            if m {
                *o = Some(k);
            }
        }
    }

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let bg_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.6));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.15),
                rng.random_range(0.02..0.15),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.15),
            )
        })
        .collect();
    let limb_jitter: Vec<f64> = (0..topo.limb_count())
        .map(|_| 1.0 + cfg.limb_noise * unit.sample(rng))
        .collect();

    let mut rgb = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let texture: f64 = waves
                .iter()
                .map(|&(ax, ay, ph, amp)| amp * (ax * fx + ay * fy + ph).sin())
                .sum();
            let bg = bg_tint.map(|c| c + texture);
            let mut color = match owner[y * w + x] {
                None => bg,
                Some(k) => {
                    let l = topo.limbs()[k];
                    let (_, t) = segment_distance([fx + 0.5, fy + 0.5], kps.points[l.parent], kps.points[l.child]);
                    let (z0, z1) = (pose.positions[l.parent][2], pose.positions[l.child][2]);
                    let z = z0 * (1.0 - t) + z1 * t;
                    let mid = 0.5 * (z0 + z1);
                    let shade = (0.75 + (mid - z) / cfg.shading_depth_mm).clamp(0.1, 1.4) * limb_jitter[k];
                    let part = palette.limb_colors[k];
                    [0, 1, 2].map(|c| (1.0 - cfg.texture_blend) * part[c] * shade + cfg.texture_blend * bg[c])
                }
            };
            for c in &mut color {
                *c += cfg.pixel_noise * unit.sample(rng);
            }
            rgb.set_pixel(x, y, color.map(|c| c.clamp(0.0, 1.0) as f32));
        }
    }
    Ok((rgb.quantized(), seg))
}

/// Which held-out role a sample plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split '{other}'"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// `floor(n * val_frac)` validation and `floor(n * test_frac)` test samples
/// at the end of the index range; the remainder (first) is training.
pub fn split_assignment(n: usize, val_frac: f64, test_frac: f64) -> Result<Vec<Split>> {
    if !(0.0..1.0).contains(&val_frac) || !(0.0..1.0).contains(&test_frac) || val_frac + test_frac >= 1.0 {
        return Err(Error::Invalid(format!(
            "split fractions val={val_frac}, test={test_frac} must be in [0,1) and sum below 1"
        )));
    }
    let n_val = (n as f64 * val_frac).floor() as usize;
    let n_test = (n as f64 * test_frac).floor() as usize;
    let n_train = n - n_val - n_test;
    Ok((0..n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect())
}

/// Everything the generator needs besides the seed and sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub camera: CameraModel,
    pub perturb: PerturbConfig,
    pub render: RenderConfig,
    pub prior: PosePrior,
    /// Per-sample subject scale is uniform in this range.
    pub subject_scale: [f64; 2],
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            camera: CameraModel::default(),
            perturb: PerturbConfig::default(),
            render: RenderConfig::default(),
            prior: PosePrior::h36m17(),
            subject_scale: [0.9, 1.1],
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneSample {
    pub id: String,
    pub gt_pose: Pose3D,
    pub initial_pose: Pose3D,
    pub keypoints: Keypoints2D,
    pub rgb: Image,
    pub seg: Image,
    pub rarity: f64,
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// Per-sample random stream derived from `(seed, index)` only.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Ground-truth pose of sample `index`, without rendering.
pub fn generate_gt(index: usize, seed: u64, cfg: &SynthConfig, topo: &SkeletonTopology) -> Result<(Pose3D, ChaCha8Rng)> {
    let mut rng = sample_rng(seed, index);
    let scale = rng.random_range(cfg.subject_scale[0]..=cfg.subject_scale[1]);
    let lengths: Vec<f64> = cfg.prior.base_length_mm.iter().map(|l| l * scale).collect();
    let gt = sample_pose(&mut rng, &lengths, &cfg.prior, topo)?;
    Ok((gt, rng))
}

/// One full scene; `rarity` is left at zero for the caller to fill.
pub fn generate_sample(
    index: usize,
    seed: u64,
    cfg: &SynthConfig,
    topo: &SkeletonTopology,
    palette: &SegPalette,
) -> Result<SceneSample> {
    let (gt, mut rng) = generate_gt(index, seed, cfg, topo)?;
    let initial = perturb_initial(&gt, &cfg.perturb, &cfg.prior, topo, &mut rng)?;
    let keypoints = project(&gt, &cfg.camera)?;
    let (rgb, seg) = render_scene(&gt, &cfg.camera, palette, &cfg.render, topo, &mut rng)?;
    Ok(SceneSample {
        id: sample_id(index),
        gt_pose: gt,
        initial_pose: initial,
        keypoints,
        rgb,
        seg,
        rarity: 0.0,
    })
}

/// Poses of `train` indices other than `skip`, nearest-neighbour distance to `pose`.
fn rarity_excluding(
    pose: &Pose3D,
    poses: &[Pose3D],
    train: &[usize],
    skip: usize,
    topo: &SkeletonTopology,
) -> Result<f64> {
    let mut best = f64::INFINITY;
    for &j in train.iter().filter(|&&j| j != skip) {
        best = best.min(mpjpe(pose, &poses[j], topo)?);
    }
    if best.is_infinite() {
        return Err(Error::Empty("rarity reference set"));
    }
    Ok(best)
}

/// Writes `n` samples plus topology, palette, training-split bone statistics
/// and `manifest.json` under `dir`.
///
/// Rarity is measured against the training split; training samples are
/// compared with every training pose but themselves. The manifest is written
/// last, so a directory with a manifest is complete.
pub fn generate_corpus(
    dir: &Path,
    n: usize,
    seed: u64,
    cfg: &SynthConfig,
    topo: &SkeletonTopology,
    palette: &SegPalette,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Invalid("corpus size must be >= 1".into()));
    }
    cfg.camera.validate()?;
    cfg.perturb.validate()?;
    cfg.prior.validate(topo)?;
    palette.validate()?;
    let splits = split_assignment(n, cfg.val_frac, cfg.test_frac)?;
    let gts: Vec<Pose3D> = (0..n)
        .into_par_iter()
        .map(|i| generate_gt(i, seed, cfg, topo).map(|(p, _)| p))
        .collect::<Result<_>>()?;
    let train: Vec<usize> = (0..n).filter(|&i| splits[i] == Split::Train).collect();
    if train.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 training samples, got {}", train.len())));
    }
    let train_poses: Vec<Pose3D> = train.iter().map(|&i| gts[i].clone()).collect();
    let stats = compute_bone_stats(&train_poses, topo)?;
    let rarity: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| rarity_excluding(&gts[i], &gts, &train, i, topo))
        .collect::<Result<_>>()?;

    let entries: Vec<ManifestEntry> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = generate_sample(i, seed, cfg, topo, palette)?;
            let rel = format!("samples/{}", s.id);
            let sub = dir.join(&rel);
            store::save_pose(&sub.join("gt.json"), &s.gt_pose)?;
            store::save_pose(&sub.join("init.json"), &s.initial_pose)?;
            store::save_keypoints(&sub.join("kp2d.json"), &s.keypoints)?;
            store::save_png(&sub.join("rgb.png"), &s.rgb)?;
            store::save_png(&sub.join("seg.png"), &s.seg)?;
            Ok(ManifestEntry {
                id: s.id,
                split: splits[i],
                rarity: rarity[i],
                gt: format!("{rel}/gt.json"),
                init: format!("{rel}/init.json"),
                kp2d: format!("{rel}/kp2d.json"),
                rgb: format!("{rel}/rgb.png"),
                seg: format!("{rel}/seg.png"),
            })
        })
        .collect::<Result<_>>()?;

    store::save_topology(&dir.join("topology.json"), topo)?;
    store::save_palette(&dir.join("palette.json"), palette)?;
    store::save_stats(&dir.join("bone_stats.json"), &stats)?;
    let manifest = Manifest {
        version: store::MANIFEST_VERSION,
        generator_seed: seed,
        config_hash: store::config_hash(cfg)?,
        config: cfg.clone(),
        topology: "topology.json".into(),
        palette: "palette.json".into(),
        bone_stats: "bone_stats.json".into(),
        samples: entries,
    };
    store::save_manifest(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
