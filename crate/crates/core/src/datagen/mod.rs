//! Synthetic training pairs: procedural scenes, random homographies, warping,
//! photometric jitter and exact dense correspondences.

mod homography;
mod jitter;
mod pairs;
mod pnm;
mod scene;
mod warp;

pub use homography::{sample_homography, Homography, HomographyRanges};
pub use jitter::{color_jitter, JitterParams, JitterRanges};
pub use pairs::{load_image_dir, synthesize_pair, synthesize_pair_from_image, PairConfig, SceneMix, TrainingPair};
pub use pnm::{decode_pnm, encode_pgm, encode_ppm, load_image, save_pgm, save_ppm};
pub use scene::{make_scene, Rect, Scene, SceneKind, SceneSpec, ToyAnnotations};
pub use warp::{build_correspondences, warp_image, warp_image_to, CorrespondenceField, PointMap};

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a path of
/// indices, e.g. `(seed, iteration, pair)`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}
