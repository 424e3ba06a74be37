//! Pose-error metrics and initial-versus-refined reports.
//!
//! MPJPE here is root-aligned: both poses are translated so their root joints
//! coincide, with no rotation or scale alignment.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PreparedSample;
use crate::error::{Error, Result};
use crate::math::{angle_between, norm3, sub3};
use crate::orientation::{apply_residual, FlatResidual};
use crate::patching::Image;
use crate::skeleton::{BoneStats, Pose3D, SkeletonTopology};
use crate::synth::CameraModel;

pub const REPORT_VERSION: u32 = 1;
pub const ALIGNMENT: &str = "root-aligned (root joints translated to the origin); no rotation or scale alignment";

fn check_pair(pred: &Pose3D, gt: &Pose3D, topo: &SkeletonTopology) -> Result<()> {
    gt.check(topo, "ground-truth pose")?;
    pred.check(topo, "predicted pose")
}

/// Root-aligned distance of every joint, millimetres.
pub fn per_joint_errors(pred: &Pose3D, gt: &Pose3D, topo: &SkeletonTopology) -> Result<Vec<f64>> {
    check_pair(pred, gt, topo)?;
    let r = topo.root();
    let (pr, gr) = (pred.positions[r], gt.positions[r]);
    Ok(pred
        .positions
        .iter()
        .zip(&gt.positions)
        .map(|(p, g)| norm3(sub3(sub3(*p, pr), sub3(*g, gr))))
        .collect())
}

/// Mean per-joint position error after root alignment, millimetres.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D, topo: &SkeletonTopology) -> Result<f64> {
    let e = per_joint_errors(pred, gt, topo)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Angle between corresponding limb displacements, degrees.
pub fn orientation_error_deg(pred: &Pose3D, gt: &Pose3D, topo: &SkeletonTopology) -> Result<Vec<f64>> {
    check_pair(pred, gt, topo)?;
    let a = pred.limb_displacements(topo);
    let b = gt.limb_displacements(topo);
    a.iter()
        .zip(&b)
        .enumerate()
        .map(|(k, (x, y))| {
            if norm3(*x) == 0.0 || norm3(*y) == 0.0 {
                return Err(Error::Invalid(format!("limb {k} has zero length")));
            }
            Ok(angle_between(*x, *y).to_degrees())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub initial: f64,
    pub refined: f64,
}

impl MetricPair {
    /// `1 - refined / initial`; zero when `initial` is zero.
    pub fn relative_improvement(&self) -> f64 {
        if self.initial == 0.0 {
            0.0
        } else {
            1.0 - self.refined / self.initial
        }
    }
}

/// Samples with rarity in `(lower, threshold]` (the first bucket includes its lower bound).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RarityBucket {
    pub lower: f64,
    pub threshold: f64,
    pub count: usize,
    pub mpjpe: MetricPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub rarity: f64,
    pub mpjpe_initial: f64,
    pub mpjpe_refined: f64,
    pub gt: Vec<[f64; 3]>,
    pub initial: Vec<[f64; 3]>,
    pub refined: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub alignment: String,
    pub split: String,
    pub n: usize,
    pub mpjpe_initial: f64,
    pub mpjpe_refined: f64,
    pub per_joint_initial: Vec<f64>,
    pub per_joint_refined: Vec<f64>,
    pub per_limb_orient_err_deg_initial: Vec<f64>,
    pub per_limb_orient_err_deg_refined: Vec<f64>,
    pub rarity_buckets: Vec<RarityBucket>,
    pub joint_names: Vec<String>,
    pub camera: CameraModel,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn overall(&self) -> MetricPair {
        MetricPair {
            initial: self.mpjpe_initial,
            refined: self.mpjpe_refined,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))?;
        let found = value.get("version").and_then(|v| v.as_u64());
        if found != Some(REPORT_VERSION as u64) {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: REPORT_VERSION,
                found: found.unwrap_or(0) as u32,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::schema(path, e.to_string()))
    }

    /// Aligned-column text tables: summary, rarity buckets, per joint.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let o = self.overall();
        let _ = writeln!(out, "split: {}  samples: {}", self.split, self.n);
        let _ = writeln!(out, "alignment: {}", self.alignment);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<24}{:>12}{:>12}{:>12}", "", "initial", "refined", "improv.");
        let _ = writeln!(
            out,
            "{:<24}{:>12.3}{:>12.3}{:>11.2}%",
            "MPJPE (mm)",
            o.initial,
            o.refined,
            100.0 * o.relative_improvement()
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<24}{:>8}{:>12}{:>12}{:>12}", "rarity bucket (mm)", "count", "initial", "refined", "improv.");
        for b in &self.rarity_buckets {
            let label = format!("{:.1} - {:.1}", b.lower, b.threshold);
            let _ = writeln!(
                out,
                "{:<24}{:>8}{:>12.3}{:>12.3}{:>11.2}%",
                label,
                b.count,
                b.mpjpe.initial,
                b.mpjpe.refined,
                100.0 * b.mpjpe.relative_improvement()
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<24}{:>12}{:>12}", "joint", "initial", "refined");
        for (j, name) in self.joint_names.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<24}{:>12.3}{:>12.3}",
                name, self.per_joint_initial[j], self.per_joint_refined[j]
            );
        }
        out
    }
}

fn mean_columns(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = rows.len().max(1) as f64;
    acc.into_iter().map(|a| a / n).collect()
}

/// Quartile buckets by rarity (nearest-rank thresholds); empty buckets from
/// tied thresholds are dropped, so the buckets partition the samples.
pub fn rarity_buckets(rarity: &[f64], initial: &[f64], refined: &[f64]) -> Vec<RarityBucket> {
    if rarity.is_empty() {
        return Vec::new();
    }
    let mut sorted = rarity.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let thresholds: Vec<f64> = [0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|q| sorted[((q * n as f64).ceil() as usize).clamp(1, n) - 1])
        .collect();
    let mut buckets = Vec::new();
    let mut lower = sorted[0];
    for (b, &t) in thresholds.iter().enumerate() {
        let members: Vec<usize> = (0..n)
            .filter(|&i| {
                let r = rarity[i];
                r <= t && (b == 0 || r > lower)
            })
            .collect();
        if !members.is_empty() {
            let c = members.len() as f64;
            buckets.push(RarityBucket {
                lower,
                threshold: t,
                count: members.len(),
                mpjpe: MetricPair {
                    initial: members.iter().map(|&i| initial[i]).sum::<f64>() / c,
                    refined: members.iter().map(|&i| refined[i]).sum::<f64>() / c,
                },
            });
        }
        lower = t;
    }
    buckets
}

/// Refines every sample with `predict`, then aggregates metrics in sample order.
pub fn evaluate<F>(
    samples: &[PreparedSample],
    split: &str,
    stats: &BoneStats,
    topo: &SkeletonTopology,
    camera: &CameraModel,
    predict: F,
) -> Result<EvalReport>
where
    F: Fn(&PreparedSample) -> Result<FlatResidual> + Sync,
{
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    struct Row {
        refined: Pose3D,
        joint_init: Vec<f64>,
        joint_ref: Vec<f64>,
        orient_init: Vec<f64>,
        orient_ref: Vec<f64>,
    }
    let rows: Vec<Row> = samples
        .par_iter()
        .map(|s| {
            let delta = predict(s)?;
            let refined = apply_residual(&s.initial, &delta, stats, topo)?;
            if !refined.is_finite() {
                return Err(Error::Numerical(format!("non-finite refined pose for sample {}", s.id)));
            }
            Ok(Row {
                joint_init: per_joint_errors(&s.initial, &s.gt, topo)?,
                joint_ref: per_joint_errors(&refined, &s.gt, topo)?,
                orient_init: orientation_error_deg(&s.initial, &s.gt, topo)?,
                orient_ref: orientation_error_deg(&refined, &s.gt, topo)?,
                refined,
            })
        })
        .collect::<Result<_>>()?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let m_init: Vec<f64> = rows.iter().map(|r| mean(&r.joint_init)).collect();
    let m_ref: Vec<f64> = rows.iter().map(|r| mean(&r.joint_ref)).collect();
    let rarity: Vec<f64> = samples.iter().map(|s| s.rarity).collect();
    let per_joint_initial = mean_columns(&rows.iter().map(|r| r.joint_init.clone()).collect::<Vec<_>>());
    let per_joint_refined = mean_columns(&rows.iter().map(|r| r.joint_ref.clone()).collect::<Vec<_>>());
    let orient_init = mean_columns(&rows.iter().map(|r| r.orient_init.clone()).collect::<Vec<_>>());
    let orient_ref = mean_columns(&rows.iter().map(|r| r.orient_ref.clone()).collect::<Vec<_>>());

    let records = samples
        .iter()
        .zip(&rows)
        .zip(m_init.iter().zip(&m_ref))
        .map(|((s, r), (&mi, &mr))| SampleRecord {
            id: s.id.clone(),
            rarity: s.rarity,
            mpjpe_initial: mi,
            mpjpe_refined: mr,
            gt: s.gt.positions.clone(),
            initial: s.initial.positions.clone(),
            refined: r.refined.positions.clone(),
        })
        .collect();

    Ok(EvalReport {
        version: REPORT_VERSION,
        alignment: ALIGNMENT.into(),
        split: split.into(),
        n: samples.len(),
        mpjpe_initial: mean(&m_init),
        mpjpe_refined: mean(&m_ref),
        per_joint_initial,
        per_joint_refined,
        per_limb_orient_err_deg_initial: orient_init,
        per_limb_orient_err_deg_refined: orient_ref,
        rarity_buckets: rarity_buckets(&rarity, &m_init, &m_ref),
        joint_names: topo.joint_names().to_vec(),
        camera: *camera,
        samples: records,
    })
}

fn draw_line(img: &mut Image, a: [f64; 2], b: [f64; 2], color: [f32; 3]) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a[0] + t * (b[0] - a[0]);
        let y = a[1] + t * (b[1] - a[1]);
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width() && (y as usize) < img.height() {
            img.set_pixel(x as usize, y as usize, color);
        }
    }
}

pub const OVERLAY_GT: [f32; 3] = [1.0, 1.0, 1.0];
pub const OVERLAY_INITIAL: [f32; 3] = [0.0, 0.0, 1.0];
pub const OVERLAY_REFINED: [f32; 3] = [1.0, 0.0, 0.0];

/// Skeleton overlay on black: ground truth white, initial blue, refined red
/// (drawn in that order).
pub fn render_overlay(record: &SampleRecord, camera: &CameraModel, topo: &SkeletonTopology) -> Result<Image> {
    let [w, h] = camera.image_size;
    let mut img = Image::new(w, h);
    for (joints, color) in [
        (&record.gt, OVERLAY_GT),
        (&record.initial, OVERLAY_INITIAL),
        (&record.refined, OVERLAY_REFINED),
    ] {
        let kps = crate::synth::project(&Pose3D::new(joints.clone()), camera)?;
        for l in topo.limbs() {
            draw_line(&mut img, kps.points[l.parent], kps.points[l.child], color);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> SkeletonTopology {
        SkeletonTopology::h36m17()
    }

    fn pose() -> Pose3D {
        let prior = crate::synth::PosePrior::h36m17().rigid();
        crate::orientation::reconstruct(
            &prior
                .rest_dir
                .iter()
                .zip(&prior.base_length_mm)
                .map(|(d, l)| crate::math::scale3(*d, *l))
                .collect::<Vec<_>>(),
            prior.root_position,
            &topo(),
        )
        .unwrap()
    }

    #[test]
    fn mpjpe_cases() {
        let t = topo();
        let gt = pose();
        assert_eq!(mpjpe(&gt, &gt, &t).unwrap(), 0.0);
        assert!(mpjpe(&gt.translated([3.0, 4.0, 0.0]), &gt, &t).unwrap() < 1e-12);
        let mut moved = gt.clone();
        moved.positions[5][1] += 17.0;
        assert!((mpjpe(&moved, &gt, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(mpjpe(&Pose3D::zeros(3), &gt, &t).is_err());
    }

    #[test]
    fn orientation_error_cases() {
        let t = topo();
        let gt = pose();
        assert!(orientation_error_deg(&gt, &gt, &t).unwrap().iter().all(|&v| v == 0.0));
        // Right shin (limb 2) points down; rotate it 90 degrees in the image plane.
        let mut p = gt.clone();
        let knee = p.positions[2];
        let len = norm3(sub3(p.positions[3], knee));
        p.positions[3] = [knee[0] + len, knee[1], knee[2]];
        let e = orientation_error_deg(&p, &gt, &t).unwrap();
        assert!((e[2] - 90.0).abs() < 1e-9);
        assert!(e.iter().enumerate().all(|(k, v)| k == 2 || *v == 0.0));
        p.positions[3] = [knee[0], knee[1] - len, knee[2]];
        assert!((orientation_error_deg(&p, &gt, &t).unwrap()[2] - 180.0).abs() < 1e-9);
        p.positions[3] = knee;
        assert!(orientation_error_deg(&p, &gt, &t).is_err());
    }

    #[test]
    fn buckets_partition_samples() {
        let rarity = vec![5.0, 1.0, 3.0, 3.0, 3.0, 9.0, 2.0, 7.0, 3.0];
        let init: Vec<f64> = (0..9).map(|i| 10.0 + i as f64).collect();
        let refined: Vec<f64> = init.iter().map(|v| v * 0.5).collect();
        let b = rarity_buckets(&rarity, &init, &refined);
        assert_eq!(b.iter().map(|x| x.count).sum::<usize>(), 9);
        assert_eq!(b.last().unwrap().threshold, 9.0);
        for w in b.windows(2) {
            assert!(w[0].threshold < w[1].threshold);
        }
        // recompute each bucket's mean from membership
        for (i, bucket) in b.iter().enumerate() {
            let members: Vec<usize> = (0..9)
                .filter(|&j| rarity[j] <= bucket.threshold && (i == 0 || rarity[j] > bucket.lower))
                .collect();
            assert_eq!(members.len(), bucket.count);
            let m = members.iter().map(|&j| init[j]).sum::<f64>() / members.len() as f64;
            assert!((m - bucket.mpjpe.initial).abs() < 1e-12);
        }
        assert!(rarity_buckets(&[], &[], &[]).is_empty());
        let same = rarity_buckets(&[2.0; 5], &[1.0; 5], &[1.0; 5]);
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].count, 5);
    }

    #[test]
    fn overlay_colours() {
        let t = topo();
        let gt = pose();
        let rec = SampleRecord {
            id: "x".into(),
            rarity: 0.0,
            mpjpe_initial: 0.0,
            mpjpe_refined: 0.0,
            gt: gt.positions.clone(),
            initial: gt.translated([400.0, 0.0, 0.0]).positions,
            refined: gt.translated([-400.0, 0.0, 0.0]).positions,
        };
        let cam = CameraModel::default();
        let img = render_overlay(&rec, &cam, &t).unwrap();
        let mut seen = std::collections::HashSet::new();
        for y in 0..img.height() {
            for x in 0..img.width() {
                seen.insert(img.pixel(x, y).map(|v| v.to_bits()));
            }
        }
        for c in [OVERLAY_GT, OVERLAY_INITIAL, OVERLAY_REFINED, [0.0; 3]] {
            assert!(seen.contains(&c.map(|v| v.to_bits())));
        }
        assert_eq!(seen.len(), 4);
    }
}
