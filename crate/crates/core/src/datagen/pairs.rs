use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{
    build_correspondences, color_jitter, derive_seed, load_image, make_scene, sample_homography, warp_image_to,
    CorrespondenceField, Homography, HomographyRanges, JitterRanges, SceneKind, SceneSpec, ToyAnnotations,
};

const MAX_CROP_ATTEMPTS: u64 = 50;

/// Relative sampling weights of the scene generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneMix {
    pub checkerboard_triangle: f64,
    pub random_polygons: f64,
    pub texture_noise: f64,
    pub gradient_sky: f64,
}

impl Default for SceneMix {
    fn default() -> Self {
        Self {
            checkerboard_triangle: 1.0,
            random_polygons: 1.0,
            texture_noise: 1.0,
            gradient_sky: 1.0,
        }
    }
}

impl SceneMix {
    pub fn only(kind: SceneKind) -> Self {
        let mut mix = Self {
            checkerboard_triangle: 0.0,
            random_polygons: 0.0,
            texture_noise: 0.0,
            gradient_sky: 0.0,
        };
        *mix.weight_mut(kind) = 1.0;
        mix
    }

    fn weight_mut(&mut self, kind: SceneKind) -> &mut f64 {
        match kind {
            SceneKind::CheckerboardTriangle => &mut self.checkerboard_triangle,
            SceneKind::RandomPolygons => &mut self.random_polygons,
            SceneKind::TextureNoise => &mut self.texture_noise,
            SceneKind::GradientSky => &mut self.gradient_sky,
        }
    }

    fn weights(&self) -> [f64; 4] {
        [
            self.checkerboard_triangle,
            self.random_polygons,
            self.texture_noise,
            self.gradient_sky,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(format!("invalid scene mix {self:?}")));
        }
        Ok(())
    }

    fn pick(&self, rng: &mut impl Rng) -> SceneKind {
        let w = self.weights();
        let mut t = rng.random::<f64>() * w.iter().sum::<f64>();
        for (kind, wi) in SceneKind::ALL.into_iter().zip(w) {
            if t < wi {
                return kind;
            }
            t -= wi;
        }
        // Rounding left `t` at the total: take the last non-zero weight.
        SceneKind::ALL
            .into_iter()
            .zip(w)
            .rev()
            .find(|(_, wi)| *wi > 0.0)
            .map(|(k, _)| k)
            .expect("validated mix has a positive weight")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    /// Side of the square rendered scene.
    pub scene_size: usize,
    /// Side of the square crops fed to the network.
    pub crop_size: usize,
    pub homography: HomographyRanges,
    pub jitter: JitterRanges,
    pub scene_mix: SceneMix,
    /// Minimum fraction of crop-1 pixels with a valid target in crop 2.
    pub min_valid_fraction: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            scene_size: 256,
            crop_size: 192,
            homography: HomographyRanges::default(),
            jitter: JitterRanges::default(),
            scene_mix: SceneMix::default(),
            min_valid_fraction: 0.5,
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size < crate::model::MIN_INPUT_SIZE || self.crop_size > self.scene_size {
            return Err(Error::InvalidArgument(format!(
                "crop_size {} must lie in [{}, scene_size = {}]",
                self.crop_size,
                crate::model::MIN_INPUT_SIZE,
                self.scene_size
            )));
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return Err(Error::InvalidArgument(format!(
                "min_valid_fraction {} outside [0, 1]",
                self.min_valid_fraction
            )));
        }
        self.jitter.validate()?;
        self.scene_mix.validate()
    }
}

/// Two crops related by a known homography, with the dense ground truth.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub image1: Tensor<f32>,
    pub image2: Tensor<f32>,
    pub field: CorrespondenceField,
    /// Crop-1 pixel coordinates to crop-2 pixel coordinates.
    pub homography: Homography,
    /// Top-left corner of crop 1 in the source scene.
    pub origin1: (usize, usize),
    pub kind: Option<SceneKind>,
    /// Scene annotations in source-scene coordinates.
    pub annotations: Option<ToyAnnotations>,
}

/// Renders a scene from the configured mix and turns it into a pair.
pub fn synthesize_pair(cfg: &PairConfig, seed: u64) -> Result<TrainingPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let kind = cfg.scene_mix.pick(&mut rng);
    let spec = SceneSpec {
        kind,
        width: cfg.scene_size,
        height: cfg.scene_size,
        seed: rng.random(),
        jitter: cfg.jitter.clone(),
    };
    let scene = make_scene(&spec)?;
    let mut pair = synthesize_pair_from_image(&scene.image, cfg, derive_seed(seed, &[1]))?;
    pair.kind = Some(kind);
    pair.annotations = scene.annotations;
    Ok(pair)
}

/// Warps `image` by a random homography, then takes corresponding crops so
/// that at least `min_valid_fraction` of crop 1 has a target in crop 2.
pub fn synthesize_pair_from_image(image: &Tensor<f32>, cfg: &PairConfig, seed: u64) -> Result<TrainingPair> {
    cfg.validate()?;
    let shape = image.shape();
    let c = cfg.crop_size;
    if shape.len() != 3 || shape[0] < c || shape[1] < c {
        return Err(Error::InvalidArgument(format!(
            "source image {shape:?} smaller than the {c}×{c} crop"
        )));
    }
    let (height, width) = (shape[0], shape[1]);
    let half = (c as f64 - 1.0) / 2.0;
    for attempt in 0..MAX_CROP_ATTEMPTS {
        let h = sample_homography(derive_seed(seed, &[2, attempt]), &cfg.homography, width, height)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, attempt]));
        let ox = rng.random_range(0..=width - c);
        let oy = rng.random_range(0..=height - c);
        let Some((u, v)) = h.apply(ox as f64 + half, oy as f64 + half) else { continue };
        let place = |t: f64, limit: usize| (t - half).round().clamp(0.0, (limit - c) as f64) as usize;
        let (px, py) = (place(u, width), place(v, height));
        // Scene coordinates to crop-2 coordinates, and crop 1 to crop 2.
        let to_crop2 = Homography::translation(-(px as f64), -(py as f64)).compose(&h);
        let crop_h = to_crop2.compose(&Homography::translation(ox as f64, oy as f64));
        let field = build_correspondences(&crop_h, (c, c), (c, c));
        if field.valid_fraction() < cfg.min_valid_fraction {
            continue;
        }
        let crop1 = crop(image, ox, oy, c)?;
        let (crop2, _) = warp_image_to(image, &to_crop2, c, c)?;
        let image1 = color_jitter(&crop1, &cfg.jitter, derive_seed(seed, &[4]))?;
        let image2 = color_jitter(&crop2, &cfg.jitter, derive_seed(seed, &[5]))?;
        return Ok(TrainingPair {
            image1,
            image2,
            field,
            homography: crop_h,
            origin1: (ox, oy),
            kind: None,
            annotations: None,
        });
    }
    Err(Error::UnusablePair(format!(
        "no crop reached valid fraction {} in {MAX_CROP_ATTEMPTS} attempts",
        cfg.min_valid_fraction
    )))
}

fn crop(image: &Tensor<f32>, ox: usize, oy: usize, size: usize) -> Result<Tensor<f32>> {
    let (w, c) = (image.shape()[1], image.shape()[2]);
    let mut data = Vec::with_capacity(size * size * c);
    for y in oy..oy + size {
        let row = (y * w + ox) * c;
        data.extend_from_slice(&image.data()[row..row + size * c]);
    }
    Tensor::new([size, size, c], data)
}

/// Loads every `.ppm` / `.pgm` file in `dir`, sorted by file name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| load_image(p)).collect()
}
