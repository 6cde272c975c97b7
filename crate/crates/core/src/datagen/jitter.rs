use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-widths of the photometric jitter distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterRanges {
    /// Additive offset drawn from `±brightness`.
    pub brightness: f64,
    /// Contrast factor about mid-gray drawn from `1 ± contrast`.
    pub contrast: f64,
    /// Per-channel multiplicative gain drawn from `1 ± gain`.
    pub gain: f64,
}

impl Default for JitterRanges {
    fn default() -> Self {
        Self {
            brightness: 0.15,
            contrast: 0.25,
            gain: 0.1,
        }
    }
}

impl JitterRanges {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            gain: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.brightness, self.contrast, self.gain]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.contrast <= 1.0
            && self.gain <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid jitter ranges {self:?}")))
        }
    }

    pub fn sample(&self, seed: u64) -> Result<JitterParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = |r: f64| r * (2.0 * rng.random::<f64>() - 1.0);
        let brightness = sym(self.brightness);
        let contrast = 1.0 + sym(self.contrast);
        let gains = [1.0 + sym(self.gain), 1.0 + sym(self.gain), 1.0 + sym(self.gain)];
        Ok(JitterParams {
            brightness,
            contrast,
            gains,
        })
    }
}

/// One concrete draw: `out = clamp((x·c + 0.5·(1 − c) + b)·g_channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub gains: [f64; 3],
}

impl JitterParams {
    pub fn apply(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let c = image.channels();
        let offset = 0.5 - 0.5 * self.contrast + self.brightness;
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let g = self.gains[(i % c).min(2)];
            let x = (*v as f64 * self.contrast + offset) * g;
            *v = x.clamp(0.0, 1.0) as f32;
        }
        out
    }
}

/// Seeded brightness / contrast / per-channel gain jitter, clamped to `[0, 1]`.
pub fn color_jitter(image: &Tensor<f32>, ranges: &JitterRanges, seed: u64) -> Result<Tensor<f32>> {
    Ok(ranges.sample(seed)?.apply(image))
}
