//! Procedural moving-shapes videos with pixel-exact masks.
//!
//! Rasterization: pixel `(x, y)` is sampled at its centre `(x + 0.5, y + 0.5)`.
//! A rectangle covers `|px - cx| <= sx && |py - cy| <= sy`, a circle covers
//! `(px - cx)² + (py - cy)² <= r²`, and a triangle with apex `(cx, cy - s)` and
//! base corners `(cx ± s, cy + s)` covers points on the inner side of all
//! three edges. Shapes are painted back to front; a pixel belongs to the
//! front-most shape covering it, so target masks never overlap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub targets: usize,
    /// Chance of adding a non-target shape that copies a target's colour.
    pub distractor_prob: f64,
    /// Largest speed component, pixels per frame.
    pub max_speed: f64,
    /// Half-extent range of the shapes, pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest relative size oscillation.
    pub max_deform: f64,
    /// Zero velocity and deformation.
    pub static_scene: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            frames: 20,
            targets: 2,
            distractor_prob: 0.5,
            max_speed: 2.0,
            min_size: 6.0,
            max_size: 11.0,
            max_deform: 0.15,
            static_scene: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.targets) {
            return Err(Error::Config(format!("targets must be in 1..=3, got {}", self.targets)));
        }
        if self.frames == 0 || self.height < 16 || self.width < 16 {
            return Err(Error::Config("videos need frames and at least 16x16 pixels".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config("distractor_prob must be in [0, 1]".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::Config("need 0 < min_size <= max_size".into()));
        }
        if 2.0 * self.max_size >= self.height.min(self.width) as f64 {
            return Err(Error::Config("shapes do not fit in the frame".into()));
        }
        if self.max_speed < 0.0 || !(0.0..1.0).contains(&self.max_deform) {
            return Err(Error::Config("need max_speed >= 0 and 0 <= max_deform < 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub seed: u64,
    /// `3×H×W`, values in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// Per frame, target id per pixel (0 = background).
    pub labels: Vec<Vec<u8>>,
    pub targets: usize,
}

impl SyntheticVideo {
    pub fn size(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    pub fn mask(&self, t: usize, id: u8) -> Vec<bool> {
        self.labels[t].iter().map(|&l| l == id).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Rect { aspect: f64 },
    Circle,
    Triangle,
}

#[derive(Clone, Debug)]
struct Shape {
    kind: Kind,
    color: [f64; 3],
    pos: (f64, f64),
    vel: (f64, f64),
    size: f64,
    deform: f64,
    phase: f64,
    /// 0 for distractors.
    id: u8,
}

impl Shape {
    fn size_at(&self, t: usize) -> f64 {
        self.size * (1.0 + self.deform * (0.3 * t as f64 + self.phase).sin())
    }

    fn covers(&self, px: f64, py: f64, s: f64, (cx, cy): (f64, f64)) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self.kind {
            Kind::Rect { aspect } => dx.abs() <= s * aspect && dy.abs() <= s / aspect,
            Kind::Circle => dx * dx + dy * dy <= s * s,
            Kind::Triangle => {
                // apex (0, -s), corners (-s, s) and (s, s), relative to centre
                let left = 2.0 * s * (dx + s) - (-s) * (dy - s) >= 0.0 && dy <= s;
                let right = -2.0 * s * (dx - s) + s * (dy - s) >= 0.0;
                left && right && dy <= s
            }
        }
    }

    fn extent(&self) -> f64 {
        let s = self.size * (1.0 + self.deform);
        match self.kind {
            Kind::Rect { aspect } => s * aspect.max(1.0 / aspect),
            _ => s,
        }
    }
}

/// Reflects a coordinate into `[lo, hi]`, flipping velocity on each bounce.
fn bounce(mut x: f64, mut v: f64, lo: f64, hi: f64) -> (f64, f64) {
    if hi <= lo {
        return ((lo + hi) / 2.0, 0.0);
    }
    for _ in 0..8 {
        if x < lo {
            x = 2.0 * lo - x;
            v = -v;
        } else if x > hi {
            x = 2.0 * hi - x;
            v = -v;
        } else {
            break;
        }
    }
    (x.clamp(lo, hi), v)
}

const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.35, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
];

fn background<R: Rng>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.55));
    let (fx, fy) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
    let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let amp = rng.random_range(0.03..0.1);
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let wave = amp * ((fx * x as f64 + px).sin() + (fy * y as f64 + py).cos()) / 2.0;
            for (c, b) in base.iter().enumerate() {
                let noise = rng.random_range(-0.04..0.04);
                out[(c * h + y) * w + x] = (b + wave + noise).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn random_shape<R: Rng>(cfg: &SynthConfig, color: [f64; 3], id: u8, rng: &mut R) -> Shape {
    let kind = match rng.random_range(0..3) {
        0 => Kind::Rect {
            aspect: rng.random_range(0.7..1.4),
        },
        1 => Kind::Circle,
        _ => Kind::Triangle,
    };
    let size = rng.random_range(cfg.min_size..=cfg.max_size);
    let (vel, deform) = if cfg.static_scene {
        ((0.0, 0.0), 0.0)
    } else {
        let s = cfg.max_speed;
        (
            (rng.random_range(-s..=s), rng.random_range(-s..=s)),
            rng.random_range(0.0..=cfg.max_deform),
        )
    };
    let mut shape = Shape {
        kind,
        color,
        pos: (0.0, 0.0),
        vel,
        size,
        deform,
        phase: rng.random_range(0.0..6.3),
        id,
    };
    let e = shape.extent();
    shape.pos = (
        rng.random_range(e..=(cfg.width as f64 - e)),
        rng.random_range(e..=(cfg.height as f64 - e)),
    );
    shape
}

/// Deterministic in `(seed, cfg)`. Every target is visible in frame 0.
pub fn gen_synthetic_video(seed: u64, cfg: &SynthConfig) -> Result<SyntheticVideo> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let bg = background(h, w, &mut rng);
    let mut shapes;
    let mut attempts = 0;
    loop {
        attempts += 1;
        let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
        for i in (1..colors.len()).rev() {
            colors.swap(i, rng.random_range(0..=i));
        }
        shapes = (0..cfg.targets)
            .map(|i| random_shape(cfg, PALETTE[colors[i]], i as u8 + 1, &mut rng))
            .collect::<Vec<_>>();
        if rng.random_bool(cfg.distractor_prob) {
            let copy = PALETTE[colors[rng.random_range(0..cfg.targets)]];
            shapes.push(random_shape(cfg, copy, 0, &mut rng));
        }
        for i in (1..shapes.len()).rev() {
            shapes.swap(i, rng.random_range(0..=i));
        }
        let first = rasterize(&shapes, &bg, h, w, 0).1;
        let visible = (1..=cfg.targets as u8)
            .all(|id| first.iter().filter(|&&l| l == id).count() >= 12);
        if visible || attempts >= 64 {
            break;
        }
    }
    if attempts >= 64 {
        return Err(Error::Config("could not place visible targets".into()));
    }
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut labels = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let (img, lab) = rasterize(&shapes, &bg, h, w, t);
        frames.push(Tensor::from_parts(vec![3, h, w], img));
        labels.push(lab);
        for s in &mut shapes {
            let e = s.extent();
            let (x, vx) = bounce(s.pos.0 + s.vel.0, s.vel.0, e, w as f64 - e);
            let (y, vy) = bounce(s.pos.1 + s.vel.1, s.vel.1, e, h as f64 - e);
            s.pos = (x, y);
            s.vel = (vx, vy);
        }
    }
    Ok(SyntheticVideo {
        seed,
        frames,
        labels,
        targets: cfg.targets,
    })
}

fn rasterize(shapes: &[Shape], bg: &[f64], h: usize, w: usize, t: usize) -> (Vec<f64>, Vec<u8>) {
    let mut img = bg.to_vec();
    let mut lab = vec![0u8; h * w];
    for s in shapes {
        let size = s.size_at(t);
        for y in 0..h {
            for x in 0..w {
                if s.covers(x as f64 + 0.5, y as f64 + 0.5, size, s.pos) {
                    for c in 0..3 {
                        img[(c * h + y) * w + x] = s.color[c];
                    }
                    lab[y * w + x] = s.id;
                }
            }
        }
    }
    (img, lab)
}

/// Seed of video `index` in a dataset drawn from `base`.
pub fn video_seed(base: u64, index: usize) -> u64 {
    // splitmix64 step
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 31;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 29)
}

pub fn gen_dataset(n: usize, base_seed: u64, cfg: &SynthConfig) -> Result<Vec<SyntheticVideo>> {
    (0..n).map(|i| gen_synthetic_video(video_seed(base_seed, i), cfg)).collect()
}

/// Base seeds of the training and validation halves of a split.
pub fn split_seeds(seed: u64) -> (u64, u64) {
    (seed, seed ^ 0x5EED_0F_7A1)
}

/// The built-in two-target set: 80 training and 20 validation videos.
pub fn toy_splits(seed: u64, cfg: &SynthConfig) -> Result<(Vec<SyntheticVideo>, Vec<SyntheticVideo>)> {
    let (a, b) = split_seeds(seed);
    Ok((gen_dataset(80, a, cfg)?, gen_dataset(20, b, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_rasterization() {
        let s = Shape {
            kind: Kind::Triangle,
            color: [1.0; 3],
            pos: (0.0, 0.0),
            vel: (0.0, 0.0),
            size: 4.0,
            deform: 0.0,
            phase: 0.0,
            id: 1,
        };
        assert!(s.covers(0.0, 0.0, 4.0, (0.0, 0.0)));
        assert!(s.covers(0.0, -3.9, 4.0, (0.0, 0.0)));
        assert!(s.covers(-3.9, 3.9, 4.0, (0.0, 0.0)));
        assert!(!s.covers(-3.0, -3.0, 4.0, (0.0, 0.0)));
        assert!(!s.covers(0.0, 4.1, 4.0, (0.0, 0.0)));
    }

    #[test]
    fn bounce_reflects() {
        assert_eq!(bounce(-1.0, -2.0, 0.0, 10.0), (1.0, 2.0));
        assert_eq!(bounce(11.0, 2.0, 0.0, 10.0), (9.0, -2.0));
    }
}
