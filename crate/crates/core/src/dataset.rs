//! Turning corpus samples into regressor inputs and targets.
//!
//! Images are dropped as soon as a sample's patch volume is built, so a
//! prepared split costs `6 * limbs * res^2` floats per sample.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::orientation::{apply_residual, residual_target, FlatResidual};
use crate::patching::{build_volume, Image, Modality, PatchConfig, PatchVolume, SegPalette};
use crate::skeleton::{BoneStats, Keypoints2D, Pose3D, SkeletonTopology};
use crate::store::{self, Checkpoint, Manifest, ManifestEntry};
use crate::synth::{generate_sample, Split};
use crate::updater::{volume_input, Regressor, TrainExample};

#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub split: Split,
    pub rarity: f64,
    pub gt: Pose3D,
    pub initial: Pose3D,
    pub example: TrainExample,
}

impl AsRef<TrainExample> for PreparedSample {
    fn as_ref(&self) -> &TrainExample {
        &self.example
    }
}

/// Raw assets of one corpus sample.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub gt: Pose3D,
    pub initial: Pose3D,
    pub keypoints: Keypoints2D,
    pub rgb: Image,
    pub seg: Image,
}

#[allow(clippy::too_many_arguments)]
pub fn prepare(
    id: String,
    split: Split,
    rarity: f64,
    raw: RawSample,
    stats: &BoneStats,
    topo: &SkeletonTopology,
    patch: &PatchConfig,
) -> Result<PreparedSample> {
    let volume = build_volume(&raw.rgb, &raw.seg, &raw.keypoints, topo, patch)?;
    let target = residual_target(&raw.gt, &raw.initial, stats, topo)?;
    Ok(PreparedSample {
        id,
        split,
        rarity,
        gt: raw.gt,
        initial: raw.initial,
        example: TrainExample { volume, target },
    })
}

/// An opened, validated corpus directory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub topology: SkeletonTopology,
    pub palette: SegPalette,
    pub stats: BoneStats,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = store::load_manifest(dir)?;
        let topology = store::load_topology(&dir.join(&manifest.topology))?;
        let palette = store::load_palette(&dir.join(&manifest.palette))?;
        let stats = store::load_stats(&dir.join(&manifest.bone_stats))?;
        if stats.mean_length.len() != topology.limb_count() {
            return Err(Error::schema(
                dir.join(&manifest.bone_stats),
                format!("expected {} limbs, found {}", topology.limb_count(), stats.mean_length.len()),
            ));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            topology,
            palette,
            stats,
        })
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.manifest
            .samples
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Invalid(format!("no sample '{id}' in {}", self.dir.display())))
    }

    pub fn load_raw(&self, entry: &ManifestEntry) -> Result<RawSample> {
        let topo = &self.topology;
        let gt = store::load_pose_for(&self.dir.join(&entry.gt), topo)?;
        let initial = store::load_pose_for(&self.dir.join(&entry.init), topo)?;
        let kp_path = self.dir.join(&entry.kp2d);
        let keypoints = store::load_keypoints(&kp_path)?;
        if keypoints.len() != topo.joint_count() {
            return Err(Error::schema(kp_path, "keypoint count does not match topology"));
        }
        let rgb = store::load_png(&self.dir.join(&entry.rgb))?;
        let seg = store::load_png(&self.dir.join(&entry.seg))?;
        Ok(RawSample {
            gt,
            initial,
            keypoints,
            rgb,
            seg,
        })
    }

    /// Prepared samples of the requested splits, in manifest order.
    pub fn prepare_splits(&self, splits: &[Split], patch: &PatchConfig) -> Result<Vec<PreparedSample>> {
        let entries: Vec<&ManifestEntry> = self
            .manifest
            .samples
            .iter()
            .filter(|e| splits.contains(&e.split))
            .collect();
        entries
            .par_iter()
            .map(|e| {
                let raw = self.load_raw(e)?;
                prepare(e.id.clone(), e.split, e.rarity, raw, &self.stats, &self.topology, patch)
            })
            .collect()
    }
}

/// Prepares samples straight from the generator, bypassing the disk.
/// Rarity is left at zero.
#[allow(clippy::too_many_arguments)]
pub fn generate_prepared(
    indices: std::ops::Range<usize>,
    splits: &[Split],
    seed: u64,
    cfg: &crate::synth::SynthConfig,
    stats: &BoneStats,
    topo: &SkeletonTopology,
    palette: &SegPalette,
    patch: &PatchConfig,
) -> Result<Vec<PreparedSample>> {
    indices
        .into_par_iter()
        .map(|i| {
            let s = generate_sample(i, seed, cfg, topo, palette)?;
            let raw = RawSample {
                gt: s.gt_pose,
                initial: s.initial_pose,
                keypoints: s.keypoints,
                rgb: s.rgb,
                seg: s.seg,
            };
            prepare(s.id, splits[i], 0.0, raw, stats, topo, patch)
        })
        .collect()
}

/// A checkpoint ready to refine poses.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub checkpoint: Checkpoint,
    net: Regressor,
}

impl Refiner {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let net = Regressor::new(&checkpoint.regressor)?;
        Ok(Self { checkpoint, net })
    }

    pub fn modality(&self) -> Modality {
        self.checkpoint.modality
    }

    pub fn patch(&self) -> &PatchConfig {
        &self.checkpoint.patch
    }

    pub fn predict(&self, volume: &PatchVolume) -> Result<FlatResidual> {
        let cfg = &self.checkpoint.regressor;
        if volume.channels() != cfg.input_channels || volume.res() != cfg.patch_res {
            return Err(Error::Invalid(format!(
                "volume is {}x{}, checkpoint expects {}x{}",
                volume.channels(),
                volume.res(),
                cfg.input_channels,
                cfg.patch_res
            )));
        }
        let out = self
            .net
            .run(&self.checkpoint.params.values, &volume_input(volume, self.checkpoint.modality))?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite residual prediction".into()));
        }
        Ok(FlatResidual(out))
    }

    /// Refined pose of one sample.
    pub fn refine(&self, sample: &PreparedSample, stats: &BoneStats, topo: &SkeletonTopology) -> Result<Pose3D> {
        let delta = self.predict(&sample.example.volume)?;
        apply_residual(&sample.initial, &delta, stats, topo)
    }
}
