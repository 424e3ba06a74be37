//! Per-limb patch cropping and the `6 (N - 1)`-channel patch volume.
//!
//! Coordinates are continuous pixel coordinates: pixel `(x, y)` covers
//! `[x, x+1) x [y, y+1)` and its centre sits at `(x + 0.5, y + 0.5)`.
//! Keypoints, box centres and projections all use this convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Keypoints2D, SkeletonTopology};

/// Three-channel image with values in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        assert!(width >= 1 && height >= 1, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid("image dimensions must be positive".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape {
                what: "image data",
                expected: width * height * 3,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Linear 8-bit mapping, `v = byte / 255`.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::from_data(width, height, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel value, or zero outside the image.
    #[inline]
    fn pixel_or_zero(&self, x: i64, y: i64) -> [f32; 3] {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            [0.0; 3]
        } else {
            self.pixel(x as usize, y as usize)
        }
    }

    /// Rounds every value to the nearest 8-bit level so a PNG round trip is exact.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = f32::from(quantize(*v)) / 255.0;
        }
        self
    }
}

/// `[0, 1]` value to the nearest byte.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }
}

/// Square crop region: centre plus side length, both in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchBox {
    pub center: [f64; 2],
    pub side: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// Cropping geometry shared by every limb.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Minimum tight-box side before scaling, pixels.
    pub min_side: f64,
    /// Context enlargement factor applied after padding.
    pub scale: f64,
    /// Output patch resolution (square).
    pub out_res: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            min_side: 28.0,
            scale: 2.3,
            out_res: 32,
        }
    }
}

impl PatchConfig {
    /// Full-resolution patches as used with a ResNet-sized backbone.
    pub fn full_resolution() -> Self {
        Self {
            out_res: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_side.is_finite() && self.min_side >= 0.0) {
            return Err(Error::Invalid(format!("min_side must be >= 0, got {}", self.min_side)));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Invalid(format!("scale must be > 0, got {}", self.scale)));
        }
        if self.out_res == 0 {
            return Err(Error::Invalid("out_res must be >= 1".into()));
        }
        Ok(())
    }
}

/// Crop box for the limb with endpoints `a` and `b`.
///
/// The tight box around both endpoints is padded to at least `min_side` in
/// each dimension, squared to the larger padded dimension, and scaled by
/// `scale` with the side rounded half-up to whole pixels. The centre stays at
/// the endpoint midpoint throughout.
pub fn limb_box(a: [f64; 2], b: [f64; 2], min_side: f64, scale: f64) -> Result<PatchBox> {
    if !a.iter().chain(&b).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("limb keypoints".into()));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Invalid(format!("box scale must be > 0, got {scale}")));
    }
    let w = (a[0] - b[0]).abs();
    let h = (a[1] - b[1]).abs();
    let center = [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5];
    let side = w.max(min_side).max(h.max(min_side));
    let side = (scale * side + 0.5).floor();
    if side <= 0.0 {
        return Err(Error::Invalid("limb box collapsed to zero size".into()));
    }
    Ok(PatchBox { center, side })
}

/// Resamples the square `bx` of `img` to `out_res x out_res`; samples outside
/// the image read as zero.
pub fn crop_resize(img: &Image, bx: &PatchBox, out_res: usize, mode: Interpolation) -> Image {
    let mut out = Image::new(out_res, out_res);
    crop_into(img, bx, out_res, mode, |x, y, rgb| out.set_pixel(x, y, rgb));
    out
}

fn crop_into(
    img: &Image,
    bx: &PatchBox,
    out_res: usize,
    mode: Interpolation,
    mut put: impl FnMut(usize, usize, [f32; 3]),
) {
    let step = bx.side / out_res as f64;
    let x0 = bx.center[0] - bx.side * 0.5;
    let y0 = bx.center[1] - bx.side * 0.5;
    for oy in 0..out_res {
        let sy = y0 + (oy as f64 + 0.5) * step;
        for ox in 0..out_res {
            let sx = x0 + (ox as f64 + 0.5) * step;
            let rgb = match mode {
                Interpolation::Nearest => img.pixel_or_zero(sx.floor() as i64, sy.floor() as i64),
                Interpolation::Bilinear => bilinear(img, sx - 0.5, sy - 0.5),
            };
            put(ox, oy, rgb);
        }
    }
}

/// Bilinear sample at index-space position `(u, v)` (pixel centres at integers).
fn bilinear(img: &Image, u: f64, v: f64) -> [f32; 3] {
    let xf = u.floor();
    let yf = v.floor();
    let fx = u - xf;
    let fy = v - yf;
    let (x, y) = (xf as i64, yf as i64);
    let p00 = img.pixel_or_zero(x, y);
    let p10 = img.pixel_or_zero(x + 1, y);
    let p01 = img.pixel_or_zero(x, y + 1);
    let p11 = img.pixel_or_zero(x + 1, y + 1);
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
        let bottom = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
        out[c] = (top * (1.0 - fy) + bottom * fy) as f32;
    }
    out
}

/// Channel-major stack of per-limb patches: for limb `k`, channels
/// `6k..6k+3` hold the RGB patch and `6k+3..6k+6` the segmentation patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchVolume {
    channels: usize,
    res: usize,
    values: Vec<f32>,
}

impl PatchVolume {
    pub fn zeros(channels: usize, res: usize) -> Self {
        Self {
            channels,
            res,
            values: vec![0.0; channels * res * res],
        }
    }

    pub fn from_values(channels: usize, res: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != channels * res * res {
            return Err(Error::Shape {
                what: "patch volume",
                expected: channels * res * res,
                got: values.len(),
            });
        }
        Ok(Self {
            channels,
            res,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.res * self.res;
        &self.values[c * plane..(c + 1) * plane]
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.res * self.res;
        &mut self.values[c * plane..(c + 1) * plane]
    }

    /// Reassembles limb `k`'s RGB (`seg == false`) or segmentation patch.
    pub fn limb_patch(&self, k: usize, seg: bool) -> Image {
        let base = 6 * k + if seg { 3 } else { 0 };
        let plane = self.res * self.res;
        let mut data = vec![0.0; plane * 3];
        for c in 0..3 {
            for (i, v) in self.channel(base + c).iter().enumerate() {
                data[i * 3 + c] = *v;
            }
        }
        Image {
            width: self.res,
            height: self.res,
            data,
        }
    }

    /// Zeroes the RGB or segmentation half of every limb block.
    pub fn apply_modality(&mut self, modality: Modality) {
        let zero_offset = match modality {
            Modality::Fused => return,
            Modality::RgbOnly => 3,
            Modality::SegOnly => 0,
        };
        for k in 0..self.channels / 6 {
            for c in 0..3 {
                self.channel_mut(6 * k + zero_offset + c).fill(0.0);
            }
        }
    }
}

/// Which halves of each limb block the regressor sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    #[default]
    Fused,
    RgbOnly,
    SegOnly,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Modality::Fused),
            "rgb-only" | "rgb" => Ok(Modality::RgbOnly),
            "seg-only" | "seg" => Ok(Modality::SegOnly),
            other => Err(Error::Invalid(format!("unknown modality '{other}'"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Fused => "fused",
            Modality::RgbOnly => "rgb-only",
            Modality::SegOnly => "seg-only",
        })
    }
}

/// Crop box of every limb, canonical order.
pub fn limb_boxes(kps: &Keypoints2D, topo: &SkeletonTopology, cfg: &PatchConfig) -> Result<Vec<PatchBox>> {
    if kps.len() != topo.joint_count() {
        return Err(Error::Shape {
            what: "keypoints",
            expected: topo.joint_count(),
            got: kps.len(),
        });
    }
    topo.limbs()
        .iter()
        .map(|l| limb_box(kps.points[l.parent], kps.points[l.child], cfg.min_side, cfg.scale))
        .collect()
}

/// Builds the patch volume: bilinear RGB crop and nearest-neighbour
/// segmentation crop of the same box for each limb.
pub fn build_volume(
    rgb: &Image,
    seg: &Image,
    kps: &Keypoints2D,
    topo: &SkeletonTopology,
    cfg: &PatchConfig,
) -> Result<PatchVolume> {
    cfg.validate()?;
    if rgb.width != seg.width || rgb.height != seg.height {
        return Err(Error::Invalid(format!(
            "rgb is {}x{} but segmentation is {}x{}",
            rgb.width, rgb.height, seg.width, seg.height
        )));
    }
    let boxes = limb_boxes(kps, topo, cfg)?;
    let res = cfg.out_res;
    let plane = res * res;
    let mut vol = PatchVolume::zeros(6 * topo.limb_count(), res);
    for (k, bx) in boxes.iter().enumerate() {
        for (offset, img, mode) in [
            (0, rgb, Interpolation::Bilinear),
            (3, seg, Interpolation::Nearest),
        ] {
            let base = (6 * k + offset) * plane;
            let values = &mut vol.values;
            crop_into(img, bx, res, mode, |x, y, px| {
                let i = y * res + x;
                values[base + i] = px[0];
                values[base + plane + i] = px[1];
                values[base + 2 * plane + i] = px[2];
            });
        }
    }
    Ok(vol)
}

/// Colour coding of body parts: one colour per limb plus background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegPalette {
    pub limb_colors: Vec<[f64; 3]>,
    pub background: [f64; 3],
}

impl SegPalette {
    /// The bundled 16-limb palette (evenly spaced hues, black background).
    pub fn default16() -> Self {
        crate::store::parse_palette(include_str!("../data/palette_16.json"))
            .expect("bundled palette is valid")
    }

    /// Rejects out-of-range values and colours that collide after 8-bit
    /// quantization.
    pub fn validate(&self) -> Result<()> {
        let all = self.limb_colors.iter().chain(std::iter::once(&self.background));
        if all.clone().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("palette values must lie in [0, 1]".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in all {
            if !seen.insert(quantize_color(*c)) {
                return Err(Error::Invalid(format!("palette colour {c:?} is not distinct")));
            }
        }
        Ok(())
    }

    pub fn limb_color_f32(&self, k: usize) -> [f32; 3] {
        to_f32(self.limb_colors[k])
    }

    pub fn background_f32(&self) -> [f32; 3] {
        to_f32(self.background)
    }

    /// Every byte triple a segmentation map may contain (palette plus the
    /// zero padding value).
    pub fn allowed_bytes(&self) -> std::collections::HashSet<[u8; 3]> {
        let mut set: std::collections::HashSet<[u8; 3]> =
            self.limb_colors.iter().map(|c| quantize_color(*c)).collect();
        set.insert(quantize_color(self.background));
        set.insert([0, 0, 0]);
        set
    }
}

fn to_f32(c: [f64; 3]) -> [f32; 3] {
    [c[0] as f32, c[1] as f32, c[2] as f32]
}

pub fn quantize_color(c: [f64; 3]) -> [u8; 3] {
    [quantize(c[0] as f32), quantize(c[1] as f32), quantize(c[2] as f32)]
}

/// Painter's-algorithm colouring: background first, then limbs in
/// `depth_order` (farthest first) so nearer limbs overwrite farther ones.
pub fn colorize_segmentation(masks: &[Mask], palette: &SegPalette, depth_order: &[usize]) -> Result<Image> {
    let first = masks.first().ok_or(Error::Empty("part masks"))?;
    let (w, h) = (first.width, first.height);
    if let Some(k) = masks.iter().position(|m| m.width != w || m.height != h) {
        return Err(Error::Invalid(format!(
            "mask {k} is {}x{}, expected {w}x{h}",
            masks[k].width, masks[k].height
        )));
    }
    if palette.limb_colors.len() != masks.len() {
        return Err(Error::Shape {
            what: "palette limb colours",
            expected: masks.len(),
            got: palette.limb_colors.len(),
        });
    }
    let mut seen = vec![false; masks.len()];
    if depth_order.len() != masks.len()
        || depth_order
            .iter()
            .any(|&k| k >= masks.len() || std::mem::replace(&mut seen[k], true))
    {
        return Err(Error::Invalid("depth order is not a permutation of limbs".into()));
    }
    let quantized = |c: [f64; 3]| {
        let q = quantize_color(c);
        [q[0] as f32 / 255.0, q[1] as f32 / 255.0, q[2] as f32 / 255.0]
    };
    let mut out = Image::filled(w, h, quantized(palette.background));
    for &k in depth_order {
        let color = quantized(palette.limb_colors[k]);
        for y in 0..h {
            for x in 0..w {
                if masks[k].get(x, y) {
                    out.set_pixel(x, y, color);
                }
            }
        }
    }
    Ok(out)
}
