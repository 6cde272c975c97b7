use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_DET: f64 = 1e-8;
const MAX_ATTEMPTS: usize = 100;

/// Projective map of the plane, normalized so that `m[2][2] == 1`.
/// Points are `(x, y)` pixel coordinates with pixel centers at integers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography([[f64; 3]; 3]);

impl Homography {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    /// Normalizes `m` and rejects singular or unnormalizable matrices.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("homography has non-finite entries".into()));
        }
        let s = m[2][2];
        if s.abs() < 1e-12 {
            return Err(Error::InvalidArgument("homography cannot be normalized (m33 = 0)".into()));
        }
        let mut n = m;
        for row in &mut n {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        n[2][2] = 1.0;
        let h = Self(n);
        if h.determinant().abs() <= MIN_DET {
            return Err(Error::InvalidArgument("homography is singular".into()));
        }
        Ok(h)
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Homogeneous image `(x', y', w)` of `(x, y, 1)`.
    pub fn apply_homogeneous(&self, x: f64, y: f64) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
            m[2][0] * x + m[2][1] * y + m[2][2],
        ]
    }

    /// Projects a point; `None` when it maps to (or behind) infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let [u, v, w] = self.apply_homogeneous(x, y);
        (w > 1e-12).then(|| (u / w, v / w))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Homography {
        let (a, b) = (&self.0, &other.0);
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        let s = m[2][2];
        for row in &mut m {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        m[2][2] = 1.0;
        Homography(m)
    }

    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.0;
        let det = self.determinant();
        if det.abs() <= MIN_DET {
            return Err(Error::InvalidArgument("homography is singular".into()));
        }
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = adj;
        for row in &mut inv {
            for v in row.iter_mut() {
                *v /= det;
            }
        }
        Homography::new(inv)
    }

    /// Parses nine whitespace-separated decimals, row-major.
    pub fn parse(text: &str) -> Result<Homography> {
        let values = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad homography entry '{t}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != 9 {
            return Err(Error::Format(format!(
                "homography needs 9 values, found {}",
                values.len()
            )));
        }
        let mut m = [[0.0; 3]; 3];
        for (i, v) in values.into_iter().enumerate() {
            m[i / 3][i % 3] = v;
        }
        Homography::new(m)
    }
}

impl fmt::Display for Homography {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.0 {
            writeln!(f, "{:e} {:e} {:e}", row[0], row[1], row[2])?;
        }
        Ok(())
    }
}

/// Sampling ranges for random viewpoint changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomographyRanges {
    /// Rotation about the image center, ± degrees.
    pub rotation_deg: f64,
    /// Per-axis scale, sampled log-uniformly in `[scale_min, scale_max]`.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Translation, ± fraction of the image side.
    pub translation_frac: f64,
    /// Bottom-row perspective entries, ± per pixel.
    pub perspective: f64,
}

impl Default for HomographyRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 25.0,
            scale_min: 0.8,
            scale_max: 1.25,
            translation_frac: 0.15,
            perspective: 0.0008,
        }
    }
}

impl HomographyRanges {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            translation_frac: 0.0,
            perspective: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = [
            self.rotation_deg,
            self.scale_min,
            self.scale_max,
            self.translation_frac,
            self.perspective,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.scale_min <= 0.0 || self.scale_max < self.scale_min {
            return Err(Error::InvalidArgument(format!("invalid homography ranges {self:?}")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Draws `T(c + t) · R · S · P · T(-c)` for a `width × height` image, where
/// `c` is the image center. Degenerate draws (tiny determinant, or an image
/// corner sent near infinity) are redrawn.
pub fn sample_homography(seed: u64, ranges: &HomographyRanges, width: usize, height: usize) -> Result<Homography> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let corners = [
        (0.0, 0.0),
        (width as f64 - 1.0, 0.0),
        (0.0, height as f64 - 1.0),
        (width as f64 - 1.0, height as f64 - 1.0),
    ];
    for _ in 0..MAX_ATTEMPTS {
        let theta = uniform(&mut rng, -ranges.rotation_deg, ranges.rotation_deg).to_radians();
        let (ls0, ls1) = (ranges.scale_min.ln(), ranges.scale_max.ln());
        let sx = uniform(&mut rng, ls0, ls1).exp();
        let sy = uniform(&mut rng, ls0, ls1).exp();
        let tx = uniform(&mut rng, -ranges.translation_frac, ranges.translation_frac) * width as f64;
        let ty = uniform(&mut rng, -ranges.translation_frac, ranges.translation_frac) * height as f64;
        let p1 = uniform(&mut rng, -ranges.perspective, ranges.perspective);
        let p2 = uniform(&mut rng, -ranges.perspective, ranges.perspective);

        let (s, c) = theta.sin_cos();
        let shift_back = [[1.0, 0.0, cx + tx], [0.0, 1.0, cy + ty], [0.0, 0.0, 1.0]];
        let rot = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let scale = [[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]];
        let persp = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [p1, p2, 1.0]];
        let center = [[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]];
        let m = matmul(matmul(matmul(matmul(shift_back, rot), scale), persp), center);
        let Ok(h) = Homography::new(m) else { continue };
        let safe = corners.iter().all(|&(x, y)| h.apply_homogeneous(x, y)[2] > 0.1);
        if safe {
            return Ok(h);
        }
    }
    Err(Error::DegenerateHomography { attempts: MAX_ATTEMPTS })
}
