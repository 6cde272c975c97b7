use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::JitterRanges;

const MIN_SCENE_SIZE: usize = 32;
/// Sub-samples per pixel axis when rasterizing shapes.
const SUPERSAMPLE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// A lone dark triangle and a checkerboard block on a flat background.
    CheckerboardTriangle,
    RandomPolygons,
    TextureNoise,
    /// Sky gradient over a skyline of buildings with window grids.
    GradientSky,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::CheckerboardTriangle,
        SceneKind::RandomPolygons,
        SceneKind::TextureNoise,
        SceneKind::GradientSky,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::CheckerboardTriangle => "checkerboard_triangle",
            SceneKind::RandomPolygons => "random_polygons",
            SceneKind::TextureNoise => "texture_noise",
            SceneKind::GradientSky => "gradient_sky",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scene kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Jitter applied when the scene is used to build a training pair.
    #[serde(default)]
    pub jitter: JitterRanges,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, width: usize, height: usize, seed: u64) -> Self {
        Self {
            kind,
            width,
            height,
            seed,
            jitter: JitterRanges::default(),
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    /// Grows by `margin` on every side, clipped to `width × height`.
    pub fn dilate(&self, margin: usize, width: usize, height: usize) -> Rect {
        Rect {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width),
            y1: (self.y1 + margin).min(height),
        }
    }

    /// Shrinks by `margin` on every side; may become empty.
    pub fn erode(&self, margin: usize) -> Rect {
        let x0 = self.x0 + margin;
        let y0 = self.y0 + margin;
        Rect {
            x0,
            y0,
            x1: self.x1.saturating_sub(margin).max(x0),
            y1: self.y1.saturating_sub(margin).max(y0),
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| (x, y)))
    }
}

/// Region annotations of a `checkerboard_triangle` scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyAnnotations {
    pub triangle: Rect,
    pub checkerboard: Rect,
    pub square_size: usize,
    /// Inner X-junctions of the board, sub-pixel `(x, y)`.
    pub checker_corners: Vec<(f64, f64)>,
    pub triangle_vertices: [(f64, f64); 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `H×W×3` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub annotations: Option<ToyAnnotations>,
}

struct Canvas {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(width: usize, height: usize, color: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![color; width * height],
        }
    }

    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let px = &mut self.data[y * self.width + x];
        for c in 0..3 {
            px[c] += alpha * (color[c] - px[c]);
        }
    }

    /// Pixel-index range touched by the span `[lo, hi]` in pixel-center units.
    fn span(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
        let a = (lo + 0.5).floor().max(0.0) as usize;
        let b = ((hi + 0.5).floor() + 1.0).clamp(0.0, n as f64) as usize;
        a.min(n)..b
    }

    /// Anti-aliased fill of any shape given an inside test and its bounds.
    fn fill_shape(&mut self, bounds: (f64, f64, f64, f64), color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
        let (x0, y0, x1, y1) = bounds;
        let step = 1.0 / SUPERSAMPLE as f64;
        let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for y in Self::span(y0, y1, self.height) {
            for x in Self::span(x0, x1, self.width) {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 - 0.5 + (sx as f64 + 0.5) * step;
                        let py = y as f64 - 0.5 + (sy as f64 + 0.5) * step;
                        hits += inside(px, py) as usize;
                    }
                }
                if hits > 0 {
                    self.blend(x, y, color, hits as f64 / total);
                }
            }
        }
    }

    fn fill_polygon(&mut self, vertices: &[(f64, f64)], color: [f64; 3]) {
        let bounds = vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
        );
        self.fill_shape(bounds, color, |x, y| point_in_polygon(vertices, x, y));
    }

    fn fill_ellipse(&mut self, center: (f64, f64), radii: (f64, f64), angle: f64, color: [f64; 3]) {
        let (cx, cy) = center;
        let r = radii.0.max(radii.1);
        let (s, c) = angle.sin_cos();
        self.fill_shape((cx - r, cy - r, cx + r, cy + r), color, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            let u = (c * dx + s * dy) / radii.0;
            let v = (-s * dx + c * dy) / radii.1;
            u * u + v * v <= 1.0
        });
    }

    /// Fills whole pixels in `rect` (no anti-aliasing needed).
    fn fill_rect(&mut self, rect: Rect, color: [f64; 3]) {
        for (x, y) in rect.pixels() {
            if x < self.width && y < self.height {
                self.data[y * self.width + x] = color;
            }
        }
    }

    fn into_image(self) -> Result<Tensor<f32>> {
        let data = self
            .data
            .iter()
            .flat_map(|px| px.map(|v| v.clamp(0.0, 1.0) as f32))
            .collect();
        Tensor::new([self.height, self.width, 3], data)
    }
}

/// Even-odd rule.
fn point_in_polygon(vertices: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = vertices.len();
    for i in 0..n {
        let (xi, yi) = vertices[i];
        let (xj, yj) = vertices[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn gray(rng: &mut impl Rng, level: f64, tint: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| level * uniform(rng, 1.0 - tint, 1.0 + tint))
}

/// Star-shaped polygon: sorted angles around a center, so never self-intersecting.
fn star_polygon(rng: &mut impl Rng, center: (f64, f64), radius: f64, sides: usize) -> Vec<(f64, f64)> {
    let mut angles: Vec<f64> = (0..sides).map(|_| uniform(rng, 0.0, 2.0 * PI)).collect();
    angles.sort_by(f64::total_cmp);
    angles
        .into_iter()
        .map(|a| {
            let r = radius * uniform(rng, 0.5, 1.0);
            (center.0 + r * a.cos(), center.1 + r * a.sin())
        })
        .collect()
}

/// Renders a scene. Identical specs give bit-identical images.
pub fn make_scene(spec: &SceneSpec) -> Result<Scene> {
    if spec.width < MIN_SCENE_SIZE || spec.height < MIN_SCENE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "scene {}×{} below minimum side {MIN_SCENE_SIZE}",
            spec.width, spec.height
        )));
    }
    spec.jitter.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    match spec.kind {
        SceneKind::CheckerboardTriangle => {
            let (canvas, ann) = checkerboard_triangle(&mut rng, w, h);
            Ok(Scene {
                image: canvas.into_image()?,
                annotations: Some(ann),
            })
        }
        SceneKind::RandomPolygons => Ok(Scene {
            image: random_polygons(&mut rng, w, h).into_image()?,
            annotations: None,
        }),
        SceneKind::TextureNoise => Ok(Scene {
            image: texture_noise(&mut rng, w, h).into_image()?,
            annotations: None,
        }),
        SceneKind::GradientSky => Ok(Scene {
            image: gradient_sky(&mut rng, w, h).into_image()?,
            annotations: None,
        }),
    }
}

fn checkerboard_triangle(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (Canvas, ToyAnnotations) {
    let bg = { let level = uniform(rng, 0.45, 0.6); gray(rng, level, 0.05) };
    let mut canvas = Canvas::new(w, h, bg);

    let half = w / 2;
    let board_left = rng.random::<bool>();
    let (board_half, tri_half) = if board_left { (0, half) } else { (half, 0) };
    let margin = 4;

    let square = (w.min(h) / 20).clamp(3, 12) + rng.random_range(0..=1usize);
    let fit = |extent: usize| ((extent as f64 * 0.75) / square as f64).floor() as usize;
    let n = fit(half).min(fit(h)).max(2);
    let side = n * square;
    let bx = board_half + margin + rng.random_range(0..=(half - 2 * margin).saturating_sub(side));
    let by = margin + rng.random_range(0..=(h - 2 * margin).saturating_sub(side));
    let light = { let level = uniform(rng, 0.9, 1.0); gray(rng, level, 0.0) };
    let dark = { let level = uniform(rng, 0.0, 0.1); gray(rng, level, 0.0) };
    for j in 0..n {
        for i in 0..n {
            let cell = Rect {
                x0: bx + i * square,
                y0: by + j * square,
                x1: bx + (i + 1) * square,
                y1: by + (j + 1) * square,
            };
            canvas.fill_rect(cell, if (i + j) % 2 == 0 { light } else { dark });
        }
    }
    let checkerboard = Rect {
        x0: bx,
        y0: by,
        x1: (bx + side).min(w),
        y1: (by + side).min(h),
    };
    let mut checker_corners = Vec::with_capacity((n - 1) * (n - 1));
    for j in 1..n {
        for i in 1..n {
            checker_corners.push(((bx + i * square) as f64 - 0.5, (by + j * square) as f64 - 0.5));
        }
    }

    // Triangle in the other half, kept clear of the midline.
    let clear = 6.0;
    let tri_w = (w - half).min(half) as f64;
    let radius = 0.3 * tri_w.min(h as f64);
    let lo_x = tri_half as f64 + radius + clear;
    let hi_x = (tri_half as f64 + tri_w - radius - clear).max(lo_x);
    let center = (
        uniform(rng, lo_x, hi_x),
        uniform(rng, radius + clear, (h as f64 - radius - clear).max(radius + clear)),
    );
    let theta0 = uniform(rng, 0.0, 2.0 * PI);
    let triangle_vertices = [0, 1, 2].map(|k| {
        let a = theta0 + 2.0 * PI * k as f64 / 3.0 + uniform(rng, -0.35, 0.35);
        let r = radius * uniform(rng, 0.75, 1.0);
        (center.0 + r * a.cos(), center.1 + r * a.sin())
    });
    let tri_color = { let level = uniform(rng, 0.0, 0.12); gray(rng, level, 0.0) };
    canvas.fill_polygon(&triangle_vertices, tri_color);
    let (mut x_lo, mut y_lo, mut x_hi, mut y_hi) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &triangle_vertices {
        x_lo = x_lo.min(x);
        y_lo = y_lo.min(y);
        x_hi = x_hi.max(x);
        y_hi = y_hi.max(y);
    }
    let xs = Canvas::span(x_lo, x_hi, w);
    let ys = Canvas::span(y_lo, y_hi, h);
    let triangle = Rect {
        x0: xs.start,
        y0: ys.start,
        x1: xs.end,
        y1: ys.end,
    };
    (
        canvas,
        ToyAnnotations {
            triangle,
            checkerboard,
            square_size: square,
            checker_corners,
            triangle_vertices,
        },
    )
}

fn random_polygons(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Canvas {
    let (c0, c1) = (random_color(rng), random_color(rng));
    let mut canvas = Canvas::new(w, h, c0);
    let vertical = rng.random::<bool>();
    for y in 0..h {
        for x in 0..w {
            let t = if vertical { y as f64 / h as f64 } else { x as f64 / w as f64 };
            canvas.data[y * w + x] = [0, 1, 2].map(|c| c0[c] + t * (c1[c] - c0[c]));
        }
    }
    let side = w.min(h) as f64;
    let count = rng.random_range(6..=12);
    for _ in 0..count {
        let color = random_color(rng);
        let center = (uniform(rng, 0.0, w as f64), uniform(rng, 0.0, h as f64));
        let radius = side * uniform(rng, 0.06, 0.25);
        match rng.random_range(0..10) {
            0..=4 => {
                let sides = rng.random_range(3..=6);
                let poly = star_polygon(rng, center, radius, sides);
                canvas.fill_polygon(&poly, color);
            }
            5..=7 => {
                let radii = (radius, radius * uniform(rng, 0.4, 1.0));
                let angle = uniform(rng, 0.0, PI);
                canvas.fill_ellipse(center, radii, angle, color);
            }
            _ => {
                let (a, b) = (radius, radius * uniform(rng, 0.3, 1.0));
                let (s, c) = uniform(rng, 0.0, PI).sin_cos();
                let corners = [(-a, -b), (a, -b), (a, b), (-a, b)]
                    .map(|(u, v)| (center.0 + c * u - s * v, center.1 + s * u + c * v));
                canvas.fill_polygon(&corners, color);
            }
        }
    }
    canvas
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn texture_noise(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Canvas {
    let mut acc = vec![[0.0f64; 3]; w * h];
    let tint = [0, 1, 2].map(|_| uniform(rng, 0.6, 1.0));
    let mut amplitude = 1.0;
    for period in [32.0, 16.0, 8.0, 4.0] {
        let gw = (w as f64 / period).ceil() as usize + 2;
        let gh = (h as f64 / period).ceil() as usize + 2;
        let lattice: Vec<[f64; 3]> = (0..gw * gh)
            .map(|_| {
                let base: f64 = rng.random();
                [0, 1, 2].map(|c| base * tint[c] + 0.3 * rng.random::<f64>())
            })
            .collect();
        for y in 0..h {
            let fy = y as f64 / period;
            let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / period;
                let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let at = |i: usize, j: usize| lattice[j * gw + i];
                let (a, b, c, d) = (at(ix, iy), at(ix + 1, iy), at(ix, iy + 1), at(ix + 1, iy + 1));
                for ch in 0..3 {
                    let top = a[ch] + tx * (b[ch] - a[ch]);
                    let bottom = c[ch] + tx * (d[ch] - c[ch]);
                    acc[y * w + x][ch] += amplitude * (top + ty * (bottom - top));
                }
            }
        }
        amplitude *= 0.5;
    }
    let (lo, hi) = acc
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let scale = if hi > lo { 0.9 / (hi - lo) } else { 0.0 };
    let data = acc.iter().map(|px| px.map(|v| 0.05 + (v - lo) * scale)).collect();
    Canvas { width: w, height: h, data }
}

fn gradient_sky(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Canvas {
    let top = [uniform(rng, 0.1, 0.4), uniform(rng, 0.3, 0.6), uniform(rng, 0.6, 1.0)];
    let horizon_color = [uniform(rng, 0.7, 1.0), uniform(rng, 0.6, 0.9), uniform(rng, 0.5, 0.9)];
    let ground = [uniform(rng, 0.2, 0.45), uniform(rng, 0.2, 0.4), uniform(rng, 0.1, 0.3)];
    let horizon = (h as f64 * uniform(rng, 0.55, 0.75)) as usize;
    let mut canvas = Canvas::new(w, h, top);
    for y in 0..h {
        let color = if y < horizon {
            let t = y as f64 / horizon as f64;
            [0, 1, 2].map(|c| top[c] + t * (horizon_color[c] - top[c]))
        } else {
            let t = (y - horizon) as f64 / (h - horizon).max(1) as f64;
            ground.map(|v| v * (1.0 - 0.4 * t))
        };
        for x in 0..w {
            canvas.data[y * w + x] = color;
        }
    }
    if rng.random::<bool>() {
        let center = (uniform(rng, 0.1, 0.9) * w as f64, uniform(rng, 0.1, 0.3) * h as f64);
        let r = uniform(rng, 0.04, 0.08) * w.min(h) as f64;
        canvas.fill_ellipse(center, (r, r), 0.0, [1.0, 0.95, uniform(rng, 0.6, 0.85)]);
    }
    let buildings = rng.random_range(2..=5);
    for _ in 0..buildings {
        let bw = (w as f64 * uniform(rng, 0.1, 0.3)) as usize + 4;
        let bh = (h as f64 * uniform(rng, 0.15, 0.5)) as usize + 4;
        let x0 = rng.random_range(0..w);
        let base = (horizon + rng.random_range(0..=(h - horizon) / 3)).min(h);
        let body = Rect {
            x0,
            y0: base.saturating_sub(bh),
            x1: (x0 + bw).min(w),
            y1: base,
        };
        let wall = { let level = uniform(rng, 0.25, 0.7); gray(rng, level, 0.1) };
        canvas.fill_rect(body, wall);
        let spacing = rng.random_range(4..=8usize);
        let pane = (spacing / 2).max(2);
        let lit = if rng.random::<bool>() {
            [uniform(rng, 0.8, 1.0), uniform(rng, 0.75, 0.95), uniform(rng, 0.3, 0.6)]
        } else {
            { let level = uniform(rng, 0.05, 0.2); gray(rng, level, 0.1) }
        };
        let mut y = body.y0 + 2;
        while y + pane + 1 < body.y1 {
            let mut x = body.x0 + 2;
            while x + pane + 1 < body.x1 {
                canvas.fill_rect(
                    Rect {
                        x0: x,
                        y0: y,
                        x1: x + pane,
                        y1: y + pane,
                    },
                    lit,
                );
                x += spacing;
            }
            y += spacing;
        }
    }
    canvas
}
