//! Normalized limb-orientation encoding and tree reconstruction.
//!
//! A limb orientation is the limb's child-minus-parent displacement divided
//! by that limb's mean training-set length. Residuals between two
//! orientation sets are mapped back to a residual pose by scaling each limb
//! with its statistic and summing displacements down the tree, with the root
//! pinned.

use crate::error::{Error, Result};
use crate::math::{add3, scale3, sub3};
use crate::skeleton::{BoneStats, Pose3D, SkeletonTopology};

/// `(N - 1) x 3` normalized limb vectors in canonical limb order.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationSet {
    pub vectors: Vec<[f64; 3]>,
}

impl OrientationSet {
    pub fn zeros(limbs: usize) -> Self {
        Self {
            vectors: vec![[0.0; 3]; limbs],
        }
    }

    /// Limb-major flattening, `(x, y, z)` innermost.
    pub fn flatten(&self) -> FlatResidual {
        FlatResidual(self.vectors.iter().flatten().copied().collect())
    }

    pub fn sub(&self, other: &OrientationSet) -> OrientationSet {
        OrientationSet {
            vectors: self
                .vectors
                .iter()
                .zip(&other.vectors)
                .map(|(a, b)| sub3(*a, *b))
                .collect(),
        }
    }
}

/// Flat `3 (N - 1)` residual vector, the regressor's output layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatResidual(pub Vec<f64>);

impl FlatResidual {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Inverse of [`OrientationSet::flatten`].
    pub fn to_orientations(&self) -> Result<OrientationSet> {
        if !self.0.len().is_multiple_of(3) {
            return Err(Error::Invalid(format!(
                "residual length {} is not a multiple of 3",
                self.0.len()
            )));
        }
        Ok(OrientationSet {
            vectors: self.0.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }
}

impl std::ops::Neg for &FlatResidual {
    type Output = FlatResidual;

    fn neg(self) -> FlatResidual {
        FlatResidual(self.0.iter().map(|v| -v).collect())
    }
}

/// Orientation of every limb of `pose`, normalized by `stats`.
pub fn encode(pose: &Pose3D, stats: &BoneStats, topo: &SkeletonTopology) -> Result<OrientationSet> {
    pose.check(topo, "pose")?;
    stats.check(topo)?;
    let vectors = pose
        .limb_displacements(topo)
        .into_iter()
        .zip(&stats.mean_length)
        .map(|(d, &len)| [d[0] / len, d[1] / len, d[2] / len])
        .collect();
    Ok(OrientationSet { vectors })
}

/// Limb displacements in millimetres: each vector times its limb statistic.
pub fn unnormalize(orient: &OrientationSet, stats: &BoneStats) -> Result<Vec<[f64; 3]>> {
    stats.validate()?;
    if orient.vectors.len() != stats.mean_length.len() {
        return Err(Error::Shape {
            what: "orientation set",
            expected: stats.mean_length.len(),
            got: orient.vectors.len(),
        });
    }
    Ok(orient
        .vectors
        .iter()
        .zip(&stats.mean_length)
        .map(|(v, &len)| scale3(*v, len))
        .collect())
}

/// Places the root at `root_position` and every child at its parent plus the
/// limb displacement, walking the tree parent-first.
pub fn reconstruct(
    displacements: &[[f64; 3]],
    root_position: [f64; 3],
    topo: &SkeletonTopology,
) -> Result<Pose3D> {
    if displacements.len() != topo.limb_count() {
        return Err(Error::Shape {
            what: "limb displacements",
            expected: topo.limb_count(),
            got: displacements.len(),
        });
    }
    let mut positions = vec![[0.0; 3]; topo.joint_count()];
    positions[topo.root()] = root_position;
    for &k in topo.visit_order() {
        let limb = topo.limbs()[k];
        positions[limb.child] = add3(positions[limb.parent], displacements[k]);
    }
    Ok(Pose3D { positions })
}

/// Refined pose: `initial` plus the residual pose reconstructed from `delta`
/// with a zero root displacement, so the refined root equals the initial one.
pub fn apply_residual(
    initial: &Pose3D,
    delta: &FlatResidual,
    stats: &BoneStats,
    topo: &SkeletonTopology,
) -> Result<Pose3D> {
    initial.check(topo, "initial pose")?;
    if delta.len() != topo.residual_dim() {
        return Err(Error::Shape {
            what: "residual vector",
            expected: topo.residual_dim(),
            got: delta.len(),
        });
    }
    stats.check(topo)?;
    let displacements = unnormalize(&delta.to_orientations()?, stats)?;
    let residual = reconstruct(&displacements, [0.0; 3], topo)?;
    Ok(Pose3D {
        positions: initial
            .positions
            .iter()
            .zip(&residual.positions)
            .map(|(a, b)| add3(*a, *b))
            .collect(),
    })
}

/// Regression target `flatten(encode(gt) - encode(initial))`.
pub fn residual_target(
    gt: &Pose3D,
    initial: &Pose3D,
    stats: &BoneStats,
    topo: &SkeletonTopology,
) -> Result<FlatResidual> {
    let target = encode(gt, stats, topo)?;
    let start = encode(initial, stats, topo)?;
    Ok(target.sub(&start).flatten())
}
