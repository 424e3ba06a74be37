//! On-disk formats: versioned JSON artifacts, PNG images, binary checkpoints
//! and the corpus manifest. Every writer goes through a temp file in the
//! destination directory followed by an atomic rename.
//!
//! JSON floats use the shortest representation that parses back to the same
//! `f64`, so JSON round trips are value-exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patching::{Image, Modality, PatchConfig, SegPalette};
use crate::skeleton::{BoneStats, Keypoints2D, Limb, Pose3D, SkeletonTopology};
use crate::synth::{Split, SynthConfig};
use crate::updater::{RegressorConfig, RegressorParams};

pub const TOPOLOGY_VERSION: u32 = 1;
pub const POSE_VERSION: u32 = 1;
pub const KEYPOINTS_VERSION: u32 = 1;
pub const STATS_VERSION: u32 = 1;
pub const PALETTE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

const CHECKPOINT_MAGIC: &[u8; 4] = b"PRFK";

/// Writes `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::schema(path, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn check_version(path: &Path, value: &serde_json::Value, expected: u32) -> Result<()> {
    let found = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::schema(path, "missing integer \"version\" field"))?;
    if found != expected as u64 {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected,
            found: found.min(u32::MAX as u64) as u32,
        });
    }
    Ok(())
}

fn parse_versioned<T: DeserializeOwned>(path: &Path, text: &str, expected: u32) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::schema(path, e.to_string()))?;
    check_version(path, &value, expected)?;
    serde_json::from_value(value).map_err(|e| Error::schema(path, e.to_string()))
}

fn read_versioned<T: DeserializeOwned>(path: &Path, expected: u32) -> Result<T> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::schema(path, e.to_string()))?;
    parse_versioned(path, text, expected)
}

fn reject_non_finite(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::schema(path, "non-finite number"));
    }
    Ok(())
}

// ---- topology ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    version: u32,
    joint_names: Vec<String>,
    /// -1 marks the root.
    parent: Vec<i64>,
    limbs: Vec<[usize; 2]>,
}

fn topology_from_file(path: &Path, f: TopologyFile) -> Result<SkeletonTopology> {
    let parent = f
        .parent
        .iter()
        .map(|&p| match p {
            -1 => Ok(None),
            p if p >= 0 => Ok(Some(p as usize)),
            p => Err(Error::schema(path, format!("parent index {p} is negative"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let limbs = f
        .limbs
        .iter()
        .map(|&[parent, child]| Limb { parent, child })
        .collect();
    Ok(SkeletonTopology::new(f.joint_names, parent, limbs)?)
}

pub fn parse_topology(text: &str) -> Result<SkeletonTopology> {
    let path = Path::new("<topology>");
    let f: TopologyFile = parse_versioned(path, text, TOPOLOGY_VERSION)?;
    topology_from_file(path, f)
}

pub fn save_topology(path: &Path, topo: &SkeletonTopology) -> Result<()> {
    let f = TopologyFile {
        version: TOPOLOGY_VERSION,
        joint_names: topo.joint_names().to_vec(),
        parent: topo.parent().iter().map(|p| p.map_or(-1, |v| v as i64)).collect(),
        limbs: topo.limbs().iter().map(|l| [l.parent, l.child]).collect(),
    };
    write_json(path, &f)
}

pub fn load_topology(path: &Path) -> Result<SkeletonTopology> {
    let f: TopologyFile = read_versioned(path, TOPOLOGY_VERSION)?;
    topology_from_file(path, f)
}

// ---- poses, keypoints, statistics ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    version: u32,
    unit: String,
    joints: Vec<[f64; 3]>,
}

pub fn pose_to_json(pose: &Pose3D) -> Result<String> {
    let f = PoseFile {
        version: POSE_VERSION,
        unit: "mm".into(),
        joints: pose.positions.clone(),
    };
    let mut text = serde_json::to_string_pretty(&f).map_err(|e| Error::Invalid(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn pose_from_json(path: &Path, text: &str) -> Result<Pose3D> {
    let f: PoseFile = parse_versioned(path, text, POSE_VERSION)?;
    if f.unit != "mm" {
        return Err(Error::schema(path, format!("pose unit must be \"mm\", got \"{}\"", f.unit)));
    }
    reject_non_finite(path, f.joints.iter().flatten().copied())?;
    if f.joints.is_empty() {
        return Err(Error::schema(path, "pose has no joints"));
    }
    Ok(Pose3D::new(f.joints))
}

pub fn save_pose(path: &Path, pose: &Pose3D) -> Result<()> {
    if !pose.is_finite() {
        return Err(Error::NonFinite(format!("pose written to {}", path.display())));
    }
    write_atomic(path, pose_to_json(pose)?.as_bytes())
}

pub fn load_pose(path: &Path) -> Result<Pose3D> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::schema(path, e.to_string()))?;
    pose_from_json(path, text)
}

/// Loads a pose and checks its joint count against `topo`.
pub fn load_pose_for(path: &Path, topo: &SkeletonTopology) -> Result<Pose3D> {
    let pose = load_pose(path)?;
    if pose.len() != topo.joint_count() {
        return Err(Error::schema(
            path,
            format!("expected {} joints, found {}", topo.joint_count(), pose.len()),
        ));
    }
    Ok(pose)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointsFile {
    version: u32,
    unit: String,
    points: Vec<[f64; 2]>,
}

pub fn save_keypoints(path: &Path, kps: &Keypoints2D) -> Result<()> {
    write_json(
        path,
        &KeypointsFile {
            version: KEYPOINTS_VERSION,
            unit: "px".into(),
            points: kps.points.clone(),
        },
    )
}

pub fn load_keypoints(path: &Path) -> Result<Keypoints2D> {
    let f: KeypointsFile = read_versioned(path, KEYPOINTS_VERSION)?;
    if f.unit != "px" {
        return Err(Error::schema(path, format!("keypoint unit must be \"px\", got \"{}\"", f.unit)));
    }
    reject_non_finite(path, f.points.iter().flatten().copied())?;
    Ok(Keypoints2D::new(f.points))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsFile {
    version: u32,
    mean_length_mm: Vec<f64>,
}

pub fn save_stats(path: &Path, stats: &BoneStats) -> Result<()> {
    stats.validate()?;
    write_json(
        path,
        &StatsFile {
            version: STATS_VERSION,
            mean_length_mm: stats.mean_length.clone(),
        },
    )
}

pub fn load_stats(path: &Path) -> Result<BoneStats> {
    let f: StatsFile = read_versioned(path, STATS_VERSION)?;
    BoneStats::new(f.mean_length_mm).map_err(|e| Error::schema(path, e.to_string()))
}

// ---- palette ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PaletteFile {
    version: u32,
    limb_colors: Vec<[f64; 3]>,
    background: [f64; 3],
}

fn palette_from_file(path: &Path, f: PaletteFile) -> Result<SegPalette> {
    let p = SegPalette {
        limb_colors: f.limb_colors,
        background: f.background,
    };
    p.validate().map_err(|e| Error::schema(path, e.to_string()))?;
    Ok(p)
}

pub fn parse_palette(text: &str) -> Result<SegPalette> {
    let path = Path::new("<palette>");
    let f: PaletteFile = parse_versioned(path, text, PALETTE_VERSION)?;
    palette_from_file(path, f)
}

pub fn save_palette(path: &Path, palette: &SegPalette) -> Result<()> {
    palette.validate()?;
    write_json(
        path,
        &PaletteFile {
            version: PALETTE_VERSION,
            limb_colors: palette.limb_colors.clone(),
            background: palette.background,
        },
    )
}

pub fn load_palette(path: &Path) -> Result<SegPalette> {
    let f: PaletteFile = read_versioned(path, PALETTE_VERSION)?;
    palette_from_file(path, f)
}

// ---- images ----

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(
            &img.to_rgb8(),
            img.width() as u32,
            img.height() as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Image {
            path: PathBuf::from("<memory>"),
            msg: e.to_string(),
        })?;
    Ok(out)
}

/// 8-bit RGB PNG; values are quantized on write.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let bytes = encode_png(img).map_err(|_| Error::Image {
        path: path.to_path_buf(),
        msg: "PNG encoding failed".into(),
    })?;
    write_atomic(path, &bytes)
}

pub fn load_png(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}

// ---- checkpoints ----

/// A trained regressor together with everything needed to feed it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub regressor: RegressorConfig,
    pub patch: PatchConfig,
    pub modality: Modality,
    pub params: RegressorParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    regressor: RegressorConfig,
    patch: PatchConfig,
    modality: Modality,
    param_count: usize,
    /// Hex SHA-256 of the little-endian parameter bytes.
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Layout: magic `PRFK`, u32 LE version, u32 LE header length, JSON header,
/// then `param_count` f64 LE values.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let expected = ckpt.regressor.param_count()?;
    if ckpt.params.values.len() != expected {
        return Err(Error::Shape {
            what: "checkpoint parameters",
            expected,
            got: ckpt.params.values.len(),
        });
    }
    let body: Vec<u8> = ckpt.params.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        regressor: ckpt.regressor.clone(),
        patch: ckpt.patch,
        modality: ckpt.modality,
        param_count: expected,
        sha256: sha256_hex(&body),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header.len() + body.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(ckpt)?)
}

pub fn parse_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let truncated = || Error::schema(path, "truncated checkpoint");
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::schema(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12usize.checked_add(header_len).ok_or_else(truncated)?;
    let header_bytes = bytes.get(12..header_end).ok_or_else(truncated)?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::schema(path, e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: CHECKPOINT_VERSION,
            found: header.version,
        });
    }
    let body = &bytes[header_end..];
    if body.len() != header.param_count * 8 {
        return Err(Error::schema(
            path,
            format!("expected {} parameter bytes, found {}", header.param_count * 8, body.len()),
        ));
    }
    if sha256_hex(body) != header.sha256 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    header.patch.validate().map_err(|e| Error::schema(path, e.to_string()))?;
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let params =
        RegressorParams::from_values(&header.regressor, values).map_err(|e| Error::schema(path, e.to_string()))?;
    Ok(Checkpoint {
        regressor: header.regressor,
        patch: header.patch,
        modality: header.modality,
        params,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(path, &read_bytes(path)?)
}

// ---- manifest ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Nearest-neighbour distance (mm) to the other training poses.
    pub rarity: f64,
    pub gt: String,
    pub init: String,
    pub kp2d: String,
    pub rgb: String,
    pub seg: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub generator_seed: u64,
    /// Hex SHA-256 of the compact JSON encoding of `config`.
    pub config_hash: String,
    pub config: SynthConfig,
    pub topology: String,
    pub palette: String,
    pub bone_stats: String,
    pub samples: Vec<ManifestEntry>,
}

pub fn config_hash(cfg: &SynthConfig) -> Result<String> {
    let bytes = serde_json::to_vec(cfg).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }

    fn referenced_files(&self) -> impl Iterator<Item = &String> {
        [&self.topology, &self.palette, &self.bone_stats]
            .into_iter()
            .chain(self.samples.iter().flat_map(|e| [&e.gt, &e.init, &e.kp2d, &e.rgb, &e.seg]))
    }
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_json(path, manifest)
}

/// Loads `dir/manifest.json`, then checks the config hash and that every
/// referenced file exists.
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let m: Manifest = read_versioned(&path, MANIFEST_VERSION)?;
    if config_hash(&m.config)? != m.config_hash {
        return Err(Error::Checksum(path));
    }
    if m.samples.is_empty() {
        return Err(Error::schema(&path, "manifest lists no samples"));
    }
    for rel in m.referenced_files() {
        let p = dir.join(rel);
        if !p.is_file() {
            return Err(Error::MissingFile(p));
        }
    }
    if m.samples.iter().any(|e| !(e.rarity.is_finite() && e.rarity >= 0.0)) {
        return Err(Error::schema(&path, "rarity must be finite and non-negative"));
    }
    Ok(m)
}
