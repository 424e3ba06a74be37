//! Joint tree, poses, 2D keypoints and per-limb bone-length statistics.
//!
//! Every orientation, patch and residual quantity in this crate is indexed by
//! the canonical limb order of a [`SkeletonTopology`]: limb `k` connects
//! `limbs[k].parent` to `limbs[k].child`, and that order is the order in which
//! limbs appear in the topology file.

use crate::error::{Error, Result, TopologyError};
use crate::math::{norm3, sub3};

/// One parent→child bone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limb {
    pub parent: usize,
    pub child: usize,
}

/// Validated single-rooted joint tree.
///
/// Construct through [`SkeletonTopology::new`]; the fields are only readable,
/// so a value of this type always satisfies the tree invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    joint_names: Vec<String>,
    parent: Vec<Option<usize>>,
    limbs: Vec<Limb>,
    root: usize,
    /// Limb indices ordered so every limb's parent joint is placed before it.
    visit_order: Vec<usize>,
}

impl SkeletonTopology {
    /// Validates the tree and caches a parent-before-child limb visit order.
    pub fn new(
        joint_names: Vec<String>,
        parent: Vec<Option<usize>>,
        limbs: Vec<Limb>,
    ) -> std::result::Result<Self, TopologyError> {
        let (root, visit_order) = validate_parts(&joint_names, &parent, &limbs)?;
        Ok(Self {
            joint_names,
            parent,
            limbs,
            root,
            visit_order,
        })
    }

    /// The 17-joint / 16-limb skeleton (pelvis root) shipped with the crate.
    pub fn h36m17() -> Self {
        crate::store::parse_topology(include_str!("../data/h36m_17.json"))
            .expect("bundled topology is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn limb_count(&self) -> usize {
        self.limbs.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parent(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn limbs(&self) -> &[Limb] {
        &self.limbs
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }

    /// Length of a flattened residual vector, `3 (N - 1)`.
    pub fn residual_dim(&self) -> usize {
        3 * self.limb_count()
    }

    /// Only the sub-tree of the first `n` joints, which must be closed under
    /// parents. Used to build small test skeletons from the default one.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.joint_count() {
            return Err(Error::Invalid(format!("prefix length {n} out of range")));
        }
        let parent = self.parent[..n].to_vec();
        let limbs: Vec<Limb> = self.limbs.iter().copied().filter(|l| l.child < n).collect();
        Ok(Self::new(self.joint_names[..n].to_vec(), parent, limbs)?)
    }
}

/// Checks the tree invariants of a topology and returns its limb visit order.
pub fn validate_topology(topo: &SkeletonTopology) -> std::result::Result<Vec<usize>, TopologyError> {
    validate_parts(&topo.joint_names, &topo.parent, &topo.limbs).map(|(_, order)| order)
}

fn validate_parts(
    names: &[String],
    parent: &[Option<usize>],
    limbs: &[Limb],
) -> std::result::Result<(usize, Vec<usize>), TopologyError> {
    let n = parent.len();
    if n == 0 {
        return Err(TopologyError::Empty);
    }
    if names.len() != n {
        return Err(TopologyError::NameCount {
            names: names.len(),
            parents: n,
        });
    }

    let mut root = None;
    for (joint, p) in parent.iter().enumerate() {
        match *p {
            None => {
                if let Some(first) = root {
                    return Err(TopologyError::MultipleRoots {
                        first,
                        second: joint,
                    });
                }
                root = Some(joint);
            }
            Some(p) if p >= n => return Err(TopologyError::ParentOutOfRange { joint, parent: p }),
            Some(_) => {}
        }
    }
    let root = root.ok_or(TopologyError::NoRoot)?;

    // Every joint must reach the root by following parents.
    for start in 0..n {
        let mut j = start;
        let mut steps = 0;
        while let Some(p) = parent[j] {
            j = p;
            steps += 1;
            if steps > n {
                return Err(TopologyError::Cycle { joint: start });
            }
        }
    }

    if limbs.len() != n - 1 {
        return Err(TopologyError::LimbCount {
            expected: n - 1,
            found: limbs.len(),
        });
    }
    let mut limb_of_child = vec![None; n];
    for (k, limb) in limbs.iter().enumerate() {
        if limb.child >= n || limb.parent >= n {
            return Err(TopologyError::ParentOutOfRange {
                joint: limb.child,
                parent: limb.parent,
            });
        }
        if limb.child == root {
            return Err(TopologyError::RootAsChild { joint: root });
        }
        if limb_of_child[limb.child].is_some() {
            return Err(TopologyError::DuplicateChild { joint: limb.child });
        }
        if parent[limb.child] != Some(limb.parent) {
            return Err(TopologyError::LimbParentMismatch {
                limb: k,
                parent: limb.parent,
                child: limb.child,
            });
        }
        limb_of_child[limb.child] = Some(k);
    }

    // Breadth-first from the root over the limb list.
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, limb) in limbs.iter().enumerate() {
        children[limb.parent].push(k);
    }
    let mut order = Vec::with_capacity(n - 1);
    let mut queue = std::collections::VecDeque::from([root]);
    let mut visited = 1usize;
    while let Some(j) = queue.pop_front() {
        for &k in &children[j] {
            order.push(k);
            queue.push_back(limbs[k].child);
            visited += 1;
        }
    }
    if visited != n {
        let joint = (0..n)
            .find(|&j| j != root && !order.iter().any(|&k| limbs[k].child == j))
            .unwrap_or(root);
        return Err(TopologyError::Cycle { joint });
    }
    Ok((root, order))
}

/// Joint positions in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub positions: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn new(positions: Vec<[f64; 3]>) -> Self {
        Self { positions }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().flatten().all(|v| v.is_finite())
    }

    pub(crate) fn check(&self, topo: &SkeletonTopology, what: &'static str) -> Result<()> {
        if self.len() != topo.joint_count() {
            return Err(Error::Shape {
                what,
                expected: topo.joint_count(),
                got: self.len(),
            });
        }
        if !self.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    /// Displacement of each limb, child minus parent, in canonical limb order.
    pub fn limb_displacements(&self, topo: &SkeletonTopology) -> Vec<[f64; 3]> {
        topo.limbs()
            .iter()
            .map(|l| sub3(self.positions[l.child], self.positions[l.parent]))
            .collect()
    }

    pub fn limb_lengths(&self, topo: &SkeletonTopology) -> Vec<f64> {
        self.limb_displacements(topo).iter().map(|d| norm3(*d)).collect()
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        Self {
            positions: self
                .positions
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
        }
    }
}

/// Image-space keypoints in pixels. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2D {
    pub points: Vec<[f64; 2]>,
}

impl Keypoints2D {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }
}

/// Mean limb length per limb over a training corpus, millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneStats {
    pub mean_length: Vec<f64>,
}

impl BoneStats {
    /// Rejects empty vectors and non-positive or non-finite entries.
    pub fn new(mean_length: Vec<f64>) -> Result<Self> {
        let stats = Self { mean_length };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean_length.is_empty() {
            return Err(Error::Empty("bone statistics"));
        }
        if let Some(k) = self
            .mean_length
            .iter()
            .position(|&v| !(v.is_finite() && v > 0.0))
        {
            return Err(Error::Invalid(format!(
                "bone statistic for limb {k} must be positive, got {}",
                self.mean_length[k]
            )));
        }
        Ok(())
    }

    pub(crate) fn check(&self, topo: &SkeletonTopology) -> Result<()> {
        if self.mean_length.len() != topo.limb_count() {
            return Err(Error::Shape {
                what: "bone statistics",
                expected: topo.limb_count(),
                got: self.mean_length.len(),
            });
        }
        self.validate()
    }
}

/// Per-limb arithmetic mean of limb lengths over `poses`.
pub fn compute_bone_stats(poses: &[Pose3D], topo: &SkeletonTopology) -> Result<BoneStats> {
    if poses.is_empty() {
        return Err(Error::Empty("pose list for bone statistics"));
    }
    let mut sum = vec![0.0; topo.limb_count()];
    for pose in poses {
        pose.check(topo, "pose")?;
        for (s, len) in sum.iter_mut().zip(pose.limb_lengths(topo)) {
            *s += len;
        }
    }
    let count = poses.len() as f64;
    let mean_length: Vec<f64> = sum.into_iter().map(|s| s / count).collect();
    if let Some(k) = mean_length.iter().position(|&m| m <= 0.0) {
        return Err(Error::Invalid(format!(
            "limb {k} has zero length in every pose"
        )));
    }
    BoneStats::new(mean_length)
}

/// Translates the pose so the root joint sits at the origin.
pub fn root_relative(pose: &Pose3D, topo: &SkeletonTopology) -> Pose3D {
    let r = pose.positions[topo.root()];
    pose.translated([-r[0], -r[1], -r[2]])
}
