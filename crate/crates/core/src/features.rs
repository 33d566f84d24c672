//! Multi-scale feature pyramids: a deterministic gradient-orientation
//! histogram extractor standing in for a learned backbone, plus binary
//! pyramid file ingestion so externally computed maps can be used instead.

use crate::preproc::{GrayImage, STANDARD_SIZE};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Magic bytes of the pyramid file format.
pub const PYRAMID_MAGIC: &[u8; 4] = b"FPYR";
/// Supported pyramid file version.
pub const PYRAMID_VERSION: u32 = 1;
/// L2 normalization floor for cell descriptors.
pub const CELL_NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("bad pyramid file: {0}")]
    Format(String),
    #[error("bad pyramid dimensions: {0}")]
    Dimension(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Extraction settings: per-scale grid sizes and the number of orientation
/// bins (= feature channels).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub scale_dims: Vec<(usize, usize)>,
    pub channels: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            scale_dims: vec![(13, 13), (26, 26), (52, 52)],
            channels: 8,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<(), PyramidError> {
        if self.scale_dims.is_empty() {
            return Err(PyramidError::Dimension("no scales configured".into()));
        }
        if self.channels == 0 {
            return Err(PyramidError::Dimension("zero channels".into()));
        }
        for &(h, w) in &self.scale_dims {
            if h < 2 || w < 2 || h > STANDARD_SIZE || w > STANDARD_SIZE {
                return Err(PyramidError::Dimension(format!(
                    "scale {h}×{w} outside [2, {STANDARD_SIZE}]"
                )));
            }
        }
        for pair in self.scale_dims.windows(2) {
            if pair[1].0 <= pair[0].0 || pair[1].1 <= pair[0].1 {
                return Err(PyramidError::Dimension(format!(
                    "scale dims must be strictly increasing: {:?} then {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> PyramidLayout {
        PyramidLayout {
            scale_dims: self
                .scale_dims
                .iter()
                .map(|&(h, w)| (h as u32, w as u32))
                .collect(),
            channels: self.channels as u32,
        }
    }
}

/// Shape fingerprint shared by every pyramid in a database.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidLayout {
    pub scale_dims: Vec<(u32, u32)>,
    pub channels: u32,
}

/// One feature map of the pyramid; `data` is row-major, channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ScaleMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ScaleMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Feature vector at spatial location `(y, x)`.
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let base = (y * self.width + x) * self.channels;
        &mut self.data[base..base + self.channels]
    }
}

/// An image represented as `S` feature maps of strictly increasing
/// resolution and a common channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub scales: Vec<ScaleMap>,
}

impl FeaturePyramid {
    pub fn channels(&self) -> usize {
        self.scales.first().map_or(0, |s| s.channels)
    }

    pub fn layout(&self) -> PyramidLayout {
        PyramidLayout {
            scale_dims: self
                .scales
                .iter()
                .map(|s| (s.height as u32, s.width as u32))
                .collect(),
            channels: self.channels() as u32,
        }
    }

    pub fn validate(&self) -> Result<(), PyramidError> {
        if self.scales.is_empty() {
            return Err(PyramidError::Dimension("pyramid has no scales".into()));
        }
        let channels = self.channels();
        for scale in &self.scales {
            if scale.channels != channels {
                return Err(PyramidError::Dimension(
                    "channel count differs across scales".into(),
                ));
            }
            if scale.height == 0 || scale.width == 0 {
                return Err(PyramidError::Dimension("empty scale".into()));
            }
            if scale.data.len() != scale.height * scale.width * scale.channels {
                return Err(PyramidError::Dimension("scale buffer size mismatch".into()));
            }
            if scale.data.iter().any(|v| !v.is_finite()) {
                return Err(PyramidError::Format("non-finite feature value".into()));
            }
        }
        for pair in self.scales.windows(2) {
            if pair[1].height <= pair[0].height || pair[1].width <= pair[0].width {
                return Err(PyramidError::Dimension(format!(
                    "scales must strictly increase: {}×{} then {}×{}",
                    pair[0].height, pair[0].width, pair[1].height, pair[1].width
                )));
            }
        }
        Ok(())
    }
}

/// Anything that turns a standardized image into a feature pyramid.
pub trait Extractor {
    fn extract(&self, img: &GrayImage) -> FeaturePyramid;
    fn config(&self) -> &ExtractorConfig;
}

/// The built-in deterministic descriptor: per cell, a magnitude-weighted
/// histogram of unsigned gradient orientations, L2-normalized.
pub struct GradientHistogramExtractor {
    cfg: ExtractorConfig,
}

impl GradientHistogramExtractor {
    pub fn new(cfg: ExtractorConfig) -> Result<Self, PyramidError> {
        cfg.validate()?;
        Ok(GradientHistogramExtractor { cfg })
    }
}

impl Extractor for GradientHistogramExtractor {
    fn extract(&self, img: &GrayImage) -> FeaturePyramid {
        extract(img, &self.cfg)
    }

    fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }
}

/// Extract a pyramid from a (locally normalized) image.
///
/// Each scale `(H, W)` partitions the image into near-equal cells whose row
/// range for cell `u` is `⌊img_h·u/H⌋ .. ⌊img_h·(u+1)/H⌋`; per cell the C-bin
/// orientation histogram of central-difference gradients is accumulated with
/// magnitude weights and L2-normalized with floor 1e-8.
pub fn extract(img: &GrayImage, cfg: &ExtractorConfig) -> FeaturePyramid {
    let (h, w) = (img.height(), img.width());
    let c = cfg.channels;

    // Gradients once per image: central differences, one-sided at borders.
    let mut mag = vec![0.0f64; h * w];
    let mut bin = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = match x {
                0 => img.get(y, 1.min(w - 1)) - img.get(y, 0),
                x if x == w - 1 => img.get(y, x) - img.get(y, x - 1),
                x => (img.get(y, x + 1) - img.get(y, x - 1)) / 2.0,
            };
            let gy = match y {
                0 => img.get(1.min(h - 1), x) - img.get(0, x),
                y if y == h - 1 => img.get(y, x) - img.get(y - 1, x),
                y => (img.get(y + 1, x) - img.get(y - 1, x)) / 2.0,
            };
            let idx = y * w + x;
            mag[idx] = (gx * gx + gy * gy).sqrt();
            // Unsigned orientation in [0, π), hard-assigned to C bins.
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += std::f64::consts::PI;
            }
            if theta >= std::f64::consts::PI {
                theta = 0.0;
            }
            bin[idx] = ((theta / std::f64::consts::PI * c as f64) as usize).min(c - 1);
        }
    }

    let scales = cfg
        .scale_dims
        .iter()
        .map(|&(sh, sw)| {
            let mut map = ScaleMap::zeros(sh, sw, c);
            for u in 0..sh {
                let y0 = h * u / sh;
                let y1 = h * (u + 1) / sh;
                for v in 0..sw {
                    let x0 = w * v / sw;
                    let x1 = w * (v + 1) / sw;
                    let mut hist = vec![0.0f64; c];
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let idx = y * w + x;
                            hist[bin[idx]] += mag[idx];
                        }
                    }
                    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let denom = norm.max(CELL_NORM_FLOOR);
                    let cell = map.at_mut(u, v);
                    for (dst, src) in cell.iter_mut().zip(&hist) {
                        *dst = (src / denom) as f32;
                    }
                }
            }
            map
        })
        .collect();

    FeaturePyramid { scales }
}

// ── Pyramid file format ───────────────────────────────────────────────────
//
// Little-endian: magic "FPYR", u32 version = 1, u32 S, u32 C, then S pairs
// (u32 H, u32 W), then S dense f32 blocks in scale order, each H×W×C
// row-major channel-fastest.

pub fn save_pyramid(pyramid: &FeaturePyramid, path: &Path) -> Result<(), PyramidError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pyramid(pyramid, &mut file)
}

pub fn write_pyramid<W: Write>(pyramid: &FeaturePyramid, out: &mut W) -> Result<(), PyramidError> {
    pyramid.validate()?;
    out.write_all(PYRAMID_MAGIC)?;
    out.write_all(&PYRAMID_VERSION.to_le_bytes())?;
    out.write_all(&(pyramid.scales.len() as u32).to_le_bytes())?;
    out.write_all(&(pyramid.channels() as u32).to_le_bytes())?;
    for scale in &pyramid.scales {
        out.write_all(&(scale.height as u32).to_le_bytes())?;
        out.write_all(&(scale.width as u32).to_le_bytes())?;
    }
    for scale in &pyramid.scales {
        write_f32_block(out, &scale.data)?;
    }
    Ok(())
}

pub fn load_pyramid(path: &Path) -> Result<FeaturePyramid, PyramidError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_pyramid(&mut file)
}

pub fn read_pyramid<R: Read>(input: &mut R) -> Result<FeaturePyramid, PyramidError> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic)?;
    if &magic != PYRAMID_MAGIC {
        return Err(PyramidError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, PYRAMID_MAGIC
        )));
    }
    let version = read_u32(input)?;
    if version != PYRAMID_VERSION {
        return Err(PyramidError::Format(format!(
            "unsupported pyramid version {version}, supported: {PYRAMID_VERSION}"
        )));
    }
    let num_scales = read_u32(input)? as usize;
    let channels = read_u32(input)? as usize;
    if num_scales == 0 || num_scales > 64 {
        return Err(PyramidError::Dimension(format!(
            "implausible scale count {num_scales}"
        )));
    }
    if channels == 0 {
        return Err(PyramidError::Dimension("zero channels".into()));
    }
    let mut dims = Vec::with_capacity(num_scales);
    for _ in 0..num_scales {
        let h = read_u32(input)? as usize;
        let w = read_u32(input)? as usize;
        dims.push((h, w));
    }
    let mut scales = Vec::with_capacity(num_scales);
    for (h, w) in dims {
        let data = read_f32_block(input, h * w * channels)?;
        scales.push(ScaleMap {
            height: h,
            width: w,
            channels,
            data,
        });
    }
    let pyramid = FeaturePyramid { scales };
    pyramid.validate()?;
    Ok(pyramid)
}

pub(crate) fn write_f32_block<W: Write>(out: &mut W, data: &[f32]) -> Result<(), PyramidError> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32_block<R: Read>(input: &mut R, len: usize) -> Result<Vec<f32>, PyramidError> {
    let mut buf = vec![0u8; len * 4];
    read_exact(input, &mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32, PyramidError> {
    let mut buf = [0u8; 4];
    read_exact(input, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<(), PyramidError> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            PyramidError::Format("truncated file".into())
        } else {
            PyramidError::Io(e)
        }
    })
}
