//! Multi-scale keypoint extraction and the R2KP keypoint file format.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::kernels::downsample_bilinear;
use crate::losses::AblationMode;
use crate::model::{DenseModel, DESCRIPTOR_DIM};
use crate::tensor::Tensor;

const KEYPOINT_MAGIC: &[u8; 4] = b"R2KP";
const KEYPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    /// Column in original-image pixels.
    pub x: f32,
    /// Row in original-image pixels.
    pub y: f32,
    /// Pyramid scale of the detection (1 = original).
    pub scale: f32,
    pub score: f32,
    pub descriptor: Vec<f32>,
}

/// Keypoints sorted by descending score, plus the source image size.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeypointSet {
    pub keypoints: Vec<Keypoint>,
    pub width: usize,
    pub height: usize,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Encodes as R2KP. The image size is not part of the format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(KEYPOINT_MAGIC);
        w.u32(KEYPOINT_VERSION);
        w.len_u32(self.keypoints.len());
        w.len_u32(DESCRIPTOR_DIM);
        for k in &self.keypoints {
            for v in [k.x, k.y, k.scale, k.score] {
                w.f32(v);
            }
            for &v in &k.descriptor {
                w.f32(v);
            }
        }
        w.buf
    }

    /// Decodes R2KP; `width`/`height` are set to 0 (unknown).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(KEYPOINT_MAGIC, "keypoint")?;
        r.expect_version(KEYPOINT_VERSION, "keypoint")?;
        let count = r.len_u32()?;
        let dim = r.len_u32()?;
        if dim == 0 {
            return Err(Error::Format("keypoint descriptor dimension is 0".into()));
        }
        let record = (4 + dim) * 4;
        if r.remaining() != count.saturating_mul(record) {
            return Err(Error::Format(format!(
                "keypoint file holds {} payload bytes, header announces {count} × {record}",
                r.remaining()
            )));
        }
        let mut keypoints = Vec::with_capacity(count);
        for _ in 0..count {
            let head = r.f32_vec(4)?;
            keypoints.push(Keypoint {
                x: head[0],
                y: head[1],
                scale: head[2],
                score: head[3],
                descriptor: r.f32_vec(dim)?,
            });
        }
        Ok(Self {
            keypoints,
            width: 0,
            height: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Keypoints kept over all scales.
    pub top_k: usize,
    /// Minimum repeatability at a detection; 0 disables.
    pub repeatability_threshold: f64,
    /// Minimum reliability at a detection; 0 disables.
    pub reliability_threshold: f64,
    /// Per-level downsampling factor.
    pub scale_factor: f64,
    /// Levels are added while their smaller side is at least this.
    pub min_size: usize,
    /// Selects the detection map and score for ablated models.
    pub mode: AblationMode,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            top_k: 5000,
            repeatability_threshold: 0.7,
            reliability_threshold: 0.7,
            scale_factor: 2f64.powf(-0.25),
            min_size: 128,
            mode: AblationMode::Full,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be >= 1".into()));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor < 1.0) {
            return Err(Error::InvalidArgument(format!("scale_factor {} outside (0, 1)", self.scale_factor)));
        }
        for (name, t) in [
            ("repeatability_threshold", self.repeatability_threshold),
            ("reliability_threshold", self.reliability_threshold),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("{name} {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One pyramid level: nominal scale and the resized image.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub scale: f64,
    pub image: Tensor<f32>,
}

/// Level sizes `round(side · factor^k)` while the smaller side stays at least
/// `min_size`; the original is always first.
pub fn pyramid_sizes(width: usize, height: usize, factor: f64, min_size: usize) -> Vec<(f64, usize, usize)> {
    let mut sizes = vec![(1.0, width, height)];
    for k in 1.. {
        let s = factor.powi(k);
        let (w, h) = ((width as f64 * s).round() as usize, (height as f64 * s).round() as usize);
        if w.min(h) < min_size || w == 0 || h == 0 {
            break;
        }
        sizes.push((s, w, h));
    }
    sizes
}

/// Bilinear pyramid; every level is resized from the original.
pub fn build_pyramid(image: &Tensor<f32>, factor: f64, min_size: usize) -> Result<Vec<PyramidLevel>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::shape("build_pyramid", format!("expected a non-empty H×W×C image, got {shape:?}")));
    }
    pyramid_sizes(shape[1], shape[0], factor, min_size)
        .into_iter()
        .map(|(scale, w, h)| {
            let image = if scale == 1.0 {
                image.clone()
            } else {
                downsample_bilinear(image, h, w)?
            };
            Ok(PyramidLevel { scale, image })
        })
        .collect()
}

/// Pixels `(x, y)` strictly greater than all 8 neighbours in `detect`, off
/// the 1-pixel border, with `s ≥ s_min` and `r ≥ r_min`.
pub fn nms_local_maxima(
    detect: &Tensor<f32>,
    s: &Tensor<f32>,
    r: &Tensor<f32>,
    s_min: f64,
    r_min: f64,
) -> Result<Vec<(usize, usize)>> {
    let [h, w] = *detect.shape() else {
        return Err(Error::shape("nms", format!("expected an H×W map, got {:?}", detect.shape())));
    };
    if s.shape() != detect.shape() || r.shape() != detect.shape() {
        return Err(Error::shape("nms", format!("maps {:?}, {:?}, {:?}", detect.shape(), s.shape(), r.shape())));
    }
    let d = detect.data();
    let mut out = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let v = d[i];
            let strict = [
                i - w - 1,
                i - w,
                i - w + 1,
                i - 1,
                i + 1,
                i + w - 1,
                i + w,
                i + w + 1,
            ]
            .iter()
            .all(|&j| v > d[j]);
            if strict && s.data()[i] as f64 >= s_min && r.data()[i] as f64 >= r_min {
                out.push((x, y));
            }
        }
    }
    Ok(out)
}

/// Dense maps of one pyramid level, kept for inspection.
#[derive(Clone, Debug)]
pub struct LevelMaps {
    pub scale: f64,
    pub repeatability: Tensor<f32>,
    pub reliability: Tensor<f32>,
}

type LevelDetections = (Vec<(f32, usize, usize, usize, Keypoint)>, LevelMaps);

fn detect_level(
    li: usize,
    level: &PyramidLevel,
    model: &dyn DenseModel,
    cfg: &ExtractConfig,
    width: usize,
    height: usize,
) -> Result<LevelDetections> {
    let mut found = Vec::new();
    let out = model.infer(&level.image)?;
    let (lh, lw) = (level.image.shape()[0], level.image.shape()[1]);
    let (sx, sy) = (lw as f64 / width as f64, lh as f64 / height as f64);
    let ones = Tensor::full([lh, lw], 1.0f32);
    let (s_thr, r_thr) = (cfg.repeatability_threshold, cfg.reliability_threshold);
    // (detection map, S factor, R factor, S threshold, R threshold)
    let (detect, s_map, r_map, s_min, r_min) = match cfg.mode {
        AblationMode::Full => (&out.repeatability, &out.repeatability, &out.reliability, s_thr, r_thr),
        AblationMode::ReliabilityOnly => (&out.reliability, &ones, &out.reliability, 0.0, r_thr),
        AblationMode::RepeatabilityOnly => (&out.repeatability, &out.repeatability, &ones, s_thr, 0.0),
    };
    let dim = out.descriptors.channels();
    for (x, y) in nms_local_maxima(detect, s_map, r_map, s_min, r_min)? {
        let i = y * lw + x;
        let score = s_map.data()[i] * r_map.data()[i];
        let raw = &out.descriptors.data()[i * dim..(i + 1) * dim];
        let norm = raw.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            continue;
        }
        let descriptor = raw.iter().map(|&v| (v as f64 / norm) as f32).collect();
        let kp = Keypoint {
            x: (x as f64 / sx) as f32,
            y: (y as f64 / sy) as f32,
            scale: level.scale as f32,
            score,
            descriptor,
        };
        found.push((score, li, y, x, kp));
    }
    let maps = LevelMaps {
        scale: level.scale,
        repeatability: out.repeatability,
        reliability: out.reliability,
    };
    Ok((found, maps))
}

/// Runs the model on every pyramid level, keeps local maxima, scores them and
/// returns the best `top_k` over all levels.
pub fn extract_keypoints(image: &Tensor<f32>, model: &dyn DenseModel, cfg: &ExtractConfig) -> Result<KeypointSet> {
    Ok(extract_keypoints_with_maps(image, model, cfg)?.0)
}

/// As [`extract_keypoints`], also returning every level's heatmaps.
pub fn extract_keypoints_with_maps(
    image: &Tensor<f32>,
    model: &dyn DenseModel,
    cfg: &ExtractConfig,
) -> Result<(KeypointSet, Vec<LevelMaps>)> {
    cfg.validate()?;
    let (height, width) = (image.shape()[0], image.shape()[1]);
    let levels = build_pyramid(image, cfg.scale_factor, cfg.min_size)?;
    let per_level = levels
        .par_iter()
        .enumerate()
        .map(|(li, level)| detect_level(li, level, model, cfg, width, height))
        .collect::<Result<Vec<_>>>()?;
    // (score, level, y, x, keypoint) for a deterministic total order.
    let mut found: Vec<(f32, usize, usize, usize, Keypoint)> = Vec::new();
    let mut maps = Vec::with_capacity(levels.len());
    for (level_found, level_maps) in per_level {
        found.extend(level_found);
        maps.push(level_maps);
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    found.truncate(cfg.top_k);
    Ok((
        KeypointSet {
            keypoints: found.into_iter().map(|f| f.4).collect(),
            width,
            height,
        },
        maps,
    ))
}
