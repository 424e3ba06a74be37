//! Patch-based refinement of 3D human pose estimates.
//!
//! An initial 3D pose is corrected limb by limb: for every limb, an RGB patch
//! and a part-segmentation patch are cropped around its 2D keypoints, stacked
//! into one volume, and a small convolutional regressor predicts the residual
//! between ground-truth and initial limb orientations. Adding that residual
//! back and re-walking the kinematic tree gives the refined pose.
//!
//! The crate also ships a synthetic scene generator, training loop, metrics
//! and versioned file formats so the whole pipeline runs offline.

pub mod dataset;
pub mod error;
pub mod eval;
mod math;
pub mod orientation;
pub mod patching;
pub mod skeleton;
pub mod store;
pub mod synth;
pub mod updater;

pub use error::{Error, Result, TopologyError};
pub use orientation::{apply_residual, encode, reconstruct, residual_target, unnormalize, FlatResidual, OrientationSet};
pub use patching::{build_volume, limb_box, Image, Modality, PatchConfig, PatchVolume, SegPalette};
pub use skeleton::{compute_bone_stats, root_relative, BoneStats, Keypoints2D, Pose3D, SkeletonTopology};
