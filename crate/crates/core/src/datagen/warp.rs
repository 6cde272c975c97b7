use crate::error::{Error, Result};
use crate::kernels::bilinear_taps;
use crate::tensor::Tensor;

use super::Homography;

/// Sentinel stored for pixels without a valid correspondence.
const SENTINEL: [f64; 2] = [-1.0, -1.0];

/// Inverse-maps every output pixel through `h⁻¹` and samples `image`
/// bilinearly. Pixels whose source falls outside the image are zero and
/// flagged `false` in the coverage mask. Output has the input's shape.
pub fn warp_image(image: &Tensor<f32>, h: &Homography) -> Result<(Tensor<f32>, Vec<bool>)> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape("warp_image", format!("expected H×W×C, got {shape:?}")));
    }
    warp_image_to(image, h, shape[1], shape[0])
}

/// As [`warp_image`] with an explicit `out_width × out_height` canvas.
pub fn warp_image_to(
    image: &Tensor<f32>,
    h: &Homography,
    out_width: usize,
    out_height: usize,
) -> Result<(Tensor<f32>, Vec<bool>)> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape("warp_image", format!("expected H×W×C, got {shape:?}")));
    }
    let (height, width, c) = (shape[0], shape[1], shape[2]);
    let inv = h.inverse()?;
    let src = image.data();
    let mut out = vec![0.0f32; out_width * out_height * c];
    let mut coverage = vec![false; out_width * out_height];
    for y in 0..out_height {
        for x in 0..out_width {
            let Some((sx, sy)) = inv.apply(x as f64, y as f64) else { continue };
            let Some(taps) = bilinear_taps(sx, sy, width, height) else { continue };
            let p = y * out_width + x;
            coverage[p] = true;
            for ch in 0..c {
                let v: f64 = taps.iter().map(|&(i, w)| w * src[i * c + ch] as f64).sum();
                out[p * c + ch] = v as f32;
            }
        }
    }
    Ok((Tensor::new([out_height, out_width, c], out)?, coverage))
}

/// Maps sub-pixel image-1 coordinates to image-2 coordinates.
pub trait PointMap {
    fn map_point(&self, x: f64, y: f64) -> Option<(f64, f64)>;
}

impl PointMap for Homography {
    fn map_point(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        self.apply(x, y)
    }
}

/// Dense ground-truth mapping from image-1 pixels to image-2 coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceField {
    width: usize,
    height: usize,
    target_width: usize,
    target_height: usize,
    targets: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

impl CorrespondenceField {
    /// Builds a field from explicit targets; entries that are flagged valid
    /// must land inside the target image.
    pub fn new(
        (width, height): (usize, usize),
        (target_width, target_height): (usize, usize),
        targets: Vec<[f64; 2]>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = width * height;
        if targets.len() != n || valid.len() != n {
            return Err(Error::shape(
                "correspondence_field",
                format!("{width}×{height} field with {} targets, {} flags", targets.len(), valid.len()),
            ));
        }
        let mut targets = targets;
        for (t, &v) in targets.iter_mut().zip(&valid) {
            if v {
                if !in_bounds(t[0], t[1], target_width, target_height) {
                    return Err(Error::InvalidArgument(format!(
                        "valid target {t:?} outside {target_width}×{target_height}"
                    )));
                }
            } else {
                *t = SENTINEL;
            }
        }
        Ok(Self {
            width,
            height,
            target_width,
            target_height,
            targets,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn target_size(&self) -> (usize, usize) {
        (self.target_width, self.target_height)
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Row-major `(x, y)` targets; invalid entries hold a sentinel.
    pub fn targets(&self) -> &[[f64; 2]] {
        &self.targets
    }

    pub fn target(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        let i = y * self.width + x;
        self.valid[i].then(|| (self.targets[i][0], self.targets[i][1]))
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len().max(1) as f64
    }

    /// Restricts validity to pixels also flagged in `mask`.
    pub fn restrict(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.valid.len() {
            return Err(Error::shape("restrict", format!("{} vs {}", mask.len(), self.valid.len())));
        }
        for ((v, t), &m) in self.valid.iter_mut().zip(&mut self.targets).zip(mask) {
            if *v && !m {
                *v = false;
                *t = SENTINEL;
            }
        }
        Ok(())
    }
}

impl PointMap for CorrespondenceField {
    /// Bilinear interpolation of the targets; requires all four taps valid.
    fn map_point(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let taps = bilinear_taps(x, y, self.width, self.height)?;
        let (mut u, mut v) = (0.0, 0.0);
        for (i, w) in taps {
            if w == 0.0 {
                continue;
            }
            if !self.valid[i] {
                return None;
            }
            u += w * self.targets[i][0];
            v += w * self.targets[i][1];
        }
        Some((u, v))
    }
}

fn in_bounds(x: f64, y: f64, w: usize, h: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

/// `U(x, y) = H(x, y)` for every image-1 pixel; valid iff inside image 2.
pub fn build_correspondences(h: &Homography, shape1: (usize, usize), shape2: (usize, usize)) -> CorrespondenceField {
    let (w1, h1) = shape1;
    let (w2, h2) = shape2;
    let mut targets = Vec::with_capacity(w1 * h1);
    let mut valid = Vec::with_capacity(w1 * h1);
    for y in 0..h1 {
        for x in 0..w1 {
            match h.apply(x as f64, y as f64) {
                Some((u, v)) if in_bounds(u, v, w2, h2) => {
                    targets.push([u, v]);
                    valid.push(true);
                }
                _ => {
                    targets.push(SENTINEL);
                    valid.push(false);
                }
            }
        }
    }
    CorrespondenceField {
        width: w1,
        height: h1,
        target_width: w2,
        target_height: h2,
        targets,
        valid,
    }
}
