//! Parametric grayscale face renderer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Emotion;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FACE_SIZE: usize = 64;
pub const MAX_NOISE: f64 = 0.2;

const BACKGROUND: f64 = 0.12;
const INK: f64 = 0.06;
const MOUTH_CAVITY: f64 = 0.02;

/// A 64x64 grayscale raster with intensities in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    pixels: Vec<f64>,
}

impl FaceImage {
    pub fn new(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != FACE_SIZE * FACE_SIZE {
            return Err(Error::Shape {
                op: "FaceImage::new",
                expected: format!("{} pixels", FACE_SIZE * FACE_SIZE),
                actual: pixels.len().to_string(),
            });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * FACE_SIZE + col]
    }

    /// Single-channel `[1, 64, 64]` tensor for the perception network.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, FACE_SIZE, FACE_SIZE], self.pixels.clone()).expect("fixed size")
    }

    /// 8-bit binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{FACE_SIZE} {FACE_SIZE}\n255\n").into_bytes();
        out.extend(self.pixels.iter().map(|p| (p * 255.0).round() as u8));
        out
    }

    /// Parses an 8-bit binary PGM; the raster must be 64x64.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (width, height, maxval, offset) = parse_pgm_header(bytes)?;
        if width != FACE_SIZE || height != FACE_SIZE {
            return Err(Error::Shape {
                op: "FaceImage::from_pgm",
                expected: format!("{FACE_SIZE}x{FACE_SIZE}"),
                actual: format!("{width}x{height}"),
            });
        }
        let body = &bytes[offset..];
        if body.len() < width * height {
            return Err(pgm_err(format!("raster truncated: {} of {} bytes", body.len(), width * height)));
        }
        let pixels = body[..width * height]
            .iter()
            .map(|&b| (b as f64 / maxval as f64).min(1.0))
            .collect();
        Self::new(pixels)
    }
}

fn pgm_err(reason: String) -> Error {
    Error::Parse { field: "pgm", reason }
}

fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(pgm_err("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| pgm_err("malformed header".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(pgm_err("missing raster separator".into()));
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(pgm_err(format!("unsupported maxval {maxval}")));
    }
    Ok((w, h, maxval, pos + 1))
}

/// Per-person face geometry. Each ratio lies within the bound listed on
/// [`IdentityParams::BOUNDS`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    /// Face half-width as a fraction of half the image.
    pub face_width_ratio: f64,
    /// Distance between eye centers as a fraction of face width.
    pub eye_spacing: f64,
    /// Eye line position as a fraction of face height from the top.
    pub eye_height: f64,
    /// Brow stroke thickness in pixels.
    pub brow_thickness: f64,
    /// Mouth width as a fraction of face width.
    pub mouth_width: f64,
    pub skin_tone: f64,
    pub seed: u64,
}

impl IdentityParams {
    /// `(name, min, max)` for every bounded field.
    pub const BOUNDS: [(&'static str, f64, f64); 6] = [
        ("face_width_ratio", 0.62, 0.82),
        ("eye_spacing", 0.20, 0.45),
        ("eye_height", 0.35, 0.50),
        ("brow_thickness", 1.0, 2.5),
        ("mouth_width", 0.25, 0.45),
        ("skin_tone", 0.55, 0.90),
    ];

    /// Draws every field uniformly within its bound; a pure function of `seed`.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1D_E471_7135);
        let mut draw = |i: usize| {
            let (_, lo, hi) = Self::BOUNDS[i];
            rng.random_range(lo..=hi)
        };
        Self {
            face_width_ratio: draw(0),
            eye_spacing: draw(1),
            eye_height: draw(2),
            brow_thickness: draw(3),
            mouth_width: draw(4),
            skin_tone: draw(5),
            seed,
        }
    }

    /// Mid-range geometry.
    pub fn canonical() -> Self {
        let mid = |i: usize| {
            let (_, lo, hi) = Self::BOUNDS[i];
            0.5 * (lo + hi)
        };
        Self {
            face_width_ratio: mid(0),
            eye_spacing: mid(1),
            eye_height: mid(2),
            brow_thickness: mid(3),
            mouth_width: mid(4),
            skin_tone: mid(5),
            seed: 0,
        }
    }

    fn values(&self) -> [f64; 6] {
        [
            self.face_width_ratio,
            self.eye_spacing,
            self.eye_height,
            self.brow_thickness,
            self.mouth_width,
            self.skin_tone,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, lo, hi), v) in Self::BOUNDS.iter().zip(self.values()) {
            if !(*lo..=*hi).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Facial-action parameters that an emotion sets. All zero except
/// `eye_aperture = 1` is the resting face.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpressionParams {
    /// Vertical brow offset; positive raises.
    pub brow_raise: f64,
    /// Positive pulls the inner brow ends down (frown), negative lifts them.
    pub brow_slant: f64,
    pub eye_aperture: f64,
    /// Positive turns mouth corners up.
    pub mouth_curvature: f64,
    pub mouth_open: f64,
}

impl ExpressionParams {
    pub const REST: ExpressionParams = ExpressionParams {
        brow_raise: 0.0,
        brow_slant: 0.0,
        eye_aperture: 1.0,
        mouth_curvature: 0.0,
        mouth_open: 0.0,
    };

    pub fn for_emotion(emotion: Emotion) -> Self {
        let (brow_raise, brow_slant, eye_aperture, mouth_curvature, mouth_open) = match emotion {
            Emotion::Anger => (-0.6, 1.0, 0.75, -0.25, 0.0),
            Emotion::Disgust => (-0.35, 0.35, 0.45, -0.7, 0.35),
            Emotion::Fear => (0.7, -0.7, 1.35, -0.35, 0.55),
            Emotion::Happiness => (0.15, 0.0, 0.8, 1.0, 0.25),
            Emotion::Sadness => (0.1, -1.0, 0.7, -1.0, 0.0),
            Emotion::Surprise => (1.0, -0.1, 1.55, 0.0, 1.0),
            Emotion::Neutral => return Self::REST,
        };
        Self {
            brow_raise,
            brow_slant,
            eye_aperture,
            mouth_curvature,
            mouth_open,
        }
    }

    /// Moves every parameter away from rest by `factor`.
    fn intensified(self, factor: f64) -> Self {
        Self {
            brow_raise: self.brow_raise * factor,
            brow_slant: self.brow_slant * factor,
            eye_aperture: 1.0 + (self.eye_aperture - 1.0) * factor,
            mouth_curvature: self.mouth_curvature * factor,
            mouth_open: (self.mouth_open * factor).max(0.0),
        }
    }
}

/// Renders a face deterministically from `(emotion, identity, noise, rng_seed)`.
///
/// `noise` scales three perturbations, all zero at `noise = 0`: head offset,
/// expression intensity, and additive Gaussian pixel noise.
pub fn render_face(emotion: Emotion, identity: &IdentityParams, noise: f64, rng_seed: u64) -> Result<FaceImage> {
    if !(0.0..=MAX_NOISE).contains(&noise) {
        return Err(Error::InvalidArgument(format!("noise {noise} outside [0, {MAX_NOISE}]")));
    }
    identity.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (shift_x, shift_y, intensity) = if noise > 0.0 {
        let offset = Normal::new(0.0, 8.0 * noise).expect("positive std");
        let gain = Normal::new(1.0, 2.0 * noise).expect("positive std");
        (offset.sample(&mut rng), offset.sample(&mut rng), gain.sample(&mut rng))
    } else {
        (0.0, 0.0, 1.0)
    };
    let expr = ExpressionParams::for_emotion(emotion).intensified(intensity);
    let geom = Geometry::new(identity, &expr, shift_x, shift_y);

    let mut pixels = Vec::with_capacity(FACE_SIZE * FACE_SIZE);
    for row in 0..FACE_SIZE {
        for col in 0..FACE_SIZE {
            pixels.push(geom.shade(col as f64 + 0.5, row as f64 + 0.5, identity.skin_tone));
        }
    }
    if noise > 0.0 {
        let pixel_noise = Normal::new(0.0, noise).expect("positive std");
        for p in pixels.iter_mut() {
            *p = (*p + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    FaceImage::new(pixels)
}

struct Geometry {
    cx: f64,
    cy: f64,
    face_a: f64,
    face_b: f64,
    eyes: [(f64, f64); 2],
    eye_a: f64,
    eye_b: f64,
    brows: [((f64, f64), (f64, f64)); 2],
    brow_half: f64,
    mouth_y: f64,
    mouth_half_width: f64,
    mouth_curvature: f64,
    mouth_open: f64,
}

impl Geometry {
    fn new(id: &IdentityParams, expr: &ExpressionParams, shift_x: f64, shift_y: f64) -> Self {
        let half = FACE_SIZE as f64 / 2.0;
        let cx = half + shift_x;
        let cy = half + 1.0 + shift_y;
        let face_a = id.face_width_ratio * half;
        let face_b = (face_a * 1.25).min(half - 1.5);
        let eye_offset = id.eye_spacing * face_a;
        let eye_y = cy - face_b + id.eye_height * 2.0 * face_b;
        let eye_a = (0.15 * face_a).min(0.85 * eye_offset);
        let eye_b = (2.0 * expr.eye_aperture).max(0.3);

        let brow_y = eye_y - eye_b - 3.0 - 2.5 * expr.brow_raise;
        let brow_len = 1.3 * eye_a;
        let mut brows = [((0.0, 0.0), (0.0, 0.0)); 2];
        for (i, side) in [-1.0, 1.0].into_iter().enumerate() {
            let ex = cx + side * eye_offset;
            let inner = (ex - side * brow_len, brow_y + 1.8 * expr.brow_slant);
            let outer = (ex + side * brow_len, brow_y - 0.9 * expr.brow_slant);
            brows[i] = (inner, outer);
        }
        Self {
            cx,
            cy,
            face_a,
            face_b,
            eyes: [(cx - eye_offset, eye_y), (cx + eye_offset, eye_y)],
            eye_a,
            eye_b,
            brows,
            brow_half: id.brow_thickness / 2.0,
            mouth_y: cy + 0.55 * face_b,
            mouth_half_width: id.mouth_width * face_a,
            mouth_curvature: expr.mouth_curvature,
            mouth_open: expr.mouth_open,
        }
    }

    fn shade(&self, x: f64, y: f64, skin: f64) -> f64 {
        let mut v = BACKGROUND;
        v = blend(v, skin, coverage(ellipse_sd(x - self.cx, y - self.cy, self.face_a, self.face_b)));
        for &(ex, ey) in &self.eyes {
            v = blend(v, INK, coverage(ellipse_sd(x - ex, y - ey, self.eye_a, self.eye_b)));
        }
        for &(a, b) in &self.brows {
            v = blend(v, INK, coverage(segment_distance((x, y), a, b) - self.brow_half));
        }
        if self.mouth_open > 0.0 {
            let sd = ellipse_sd(
                x - self.cx,
                y - self.mouth_y,
                0.55 * self.mouth_half_width,
                (3.2 * self.mouth_open).max(0.3),
            );
            v = blend(v, MOUTH_CAVITY, coverage(sd));
        }
        v = blend(v, INK, coverage(self.mouth_distance(x, y) - 0.9));
        v.clamp(0.0, 1.0)
    }

    /// Lip line: a parabola through the mouth center whose corners rise with
    /// positive curvature. Zero curvature is a horizontal segment.
    fn mouth_y_at(&self, dx: f64) -> f64 {
        let t = dx / self.mouth_half_width;
        self.mouth_y - 2.5 * self.mouth_curvature * (t * t - 0.4)
    }

    fn mouth_distance(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        if dx.abs() <= self.mouth_half_width {
            (y - self.mouth_y_at(dx)).abs()
        } else {
            let end_x = dx.signum() * self.mouth_half_width;
            let end_y = self.mouth_y_at(end_x);
            ((dx - end_x).powi(2) + (y - end_y).powi(2)).sqrt()
        }
    }
}

fn blend(base: f64, ink: f64, cov: f64) -> f64 {
    base + (ink - base) * cov
}

/// Anti-aliased coverage of a one-pixel-wide edge from a signed distance.
fn coverage(sd: f64) -> f64 {
    (0.5 - sd).clamp(0.0, 1.0)
}

fn ellipse_sd(dx: f64, dy: f64, a: f64, b: f64) -> f64 {
    let r = ((dx / a).powi(2) + (dy / b).powi(2)).sqrt();
    (r - 1.0) * a.min(b)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * abx - p.0, a.1 + t * aby - p.1);
    (qx * qx + qy * qy).sqrt()
}
