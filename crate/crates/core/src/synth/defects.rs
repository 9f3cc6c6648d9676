//! Defect injection: turns clean line art into a rough query sketch with
//! gaps, duplicated strokes, faint mesh lines and stray extra lines.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::draw::Canvas;
use crate::error::{Error, Result};
use crate::raster::{gaussian_blur, SketchRaster};

/// Intensity of mesh (tessellation) lines.
pub const MESH_INTENSITY: f64 = 0.6;
const GAP_MIN: usize = 2;
const GAP_MAX: usize = 6;
const DUPLICATE_SEGMENT: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectProfile {
    /// Expected gaps per 100 ink pixels.
    pub gap_rate: f64,
    pub duplicate_stroke_count: usize,
    /// Maximum offset of a duplicated stroke, in pixels.
    pub duplicate_jitter: f64,
    pub mesh_line_count: usize,
    pub extra_line_count: usize,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl DefectProfile {
    /// No defects at all; injection returns its input.
    pub fn identity() -> Self {
        Self {
            gap_rate: 0.0,
            duplicate_stroke_count: 0,
            duplicate_jitter: 0.0,
            mesh_line_count: 0,
            extra_line_count: 0,
            blur_sigma: 0.0,
            seed: 0,
        }
    }

    /// Moderate defects of every kind.
    pub fn moderate() -> Self {
        Self {
            gap_rate: 3.0,
            duplicate_stroke_count: 2,
            duplicate_jitter: 1.5,
            mesh_line_count: 2,
            extra_line_count: 2,
            blur_sigma: 0.0,
            seed: 0,
        }
    }

    /// Heavy clutter: many mesh and extra lines.
    pub fn severe() -> Self {
        Self {
            gap_rate: 4.0,
            duplicate_stroke_count: 4,
            duplicate_jitter: 2.0,
            mesh_line_count: 6,
            extra_line_count: 6,
            blur_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.gap_rate) || !ok(self.duplicate_jitter) || !ok(self.blur_sigma) {
            return Err(Error::arg(format!(
                "defect rates must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

fn ink_pixels(c: &Canvas) -> Vec<usize> {
    c.data
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < 0.5)
        .map(|(i, _)| i)
        .collect()
}

fn neighbours(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = ((i / w) as isize, (i % w) as isize);
    (-1isize..=1)
        .flat_map(move |dy| (-1isize..=1).map(move |dx| (dy, dx)))
        .filter(|&d| d != (0, 0))
        .filter_map(move |(dy, dx)| {
            let (ny, nx) = (y + dy, x + dx);
            (ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize)
                .then(|| ny as usize * w + nx as usize)
        })
}

/// Walks along connected ink from `start`, preferring to keep heading the
/// same way, and returns up to `len` pixels.
fn trace(c: &Canvas, start: usize, len: usize) -> Vec<usize> {
    let (h, w) = (c.height, c.width);
    let mut path = vec![start];
    let mut seen: HashSet<usize> = HashSet::from([start]);
    let mut dir: Option<(isize, isize)> = None;
    while path.len() < len {
        let cur = *path.last().unwrap();
        let (cy, cx) = ((cur / w) as isize, (cur % w) as isize);
        let next = neighbours(cur, h, w)
            .filter(|n| c.data[*n] < 0.5 && !seen.contains(n))
            .min_by_key(|&n| {
                let d = ((n / w) as isize - cy, (n % w) as isize - cx);
                // straight continuation first, then 4-neighbours
                let turn = dir.map_or(0, |p| (p.0 - d.0).abs() + (p.1 - d.1).abs());
                (turn, d.0.abs() + d.1.abs(), n)
            });
        let Some(n) = next else { break };
        dir = Some(((n / w) as isize - cy, (n % w) as isize - cx));
        seen.insert(n);
        path.push(n);
    }
    path
}

fn add_gaps(c: &mut Canvas, rate: f64, rng: &mut ChaCha8Rng) {
    let ink = ink_pixels(c);
    if ink.is_empty() || rate <= 0.0 {
        return;
    }
    let expected = rate * ink.len() as f64 / 100.0;
    let mut count = expected.floor() as usize;
    if rng.random_bool((expected - expected.floor()).clamp(0.0, 1.0)) {
        count += 1;
    }
    for _ in 0..count {
        let remaining = ink_pixels(c);
        if remaining.is_empty() {
            break;
        }
        let start = remaining[rng.random_range(0..remaining.len())];
        let len = rng.random_range(GAP_MIN..=GAP_MAX);
        for p in trace(c, start, len) {
            c.data[p] = 1.0;
        }
    }
}

fn add_duplicates(c: &mut Canvas, count: usize, jitter: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = (c.height, c.width);
    for _ in 0..count {
        let ink = ink_pixels(c);
        if ink.is_empty() {
            return;
        }
        let start = ink[rng.random_range(0..ink.len())];
        let segment = trace(c, start, DUPLICATE_SEGMENT);
        let j = jitter.round() as i64;
        let (mut dx, mut dy) = (0, 0);
        if j > 0 {
            while dx == 0 && dy == 0 {
                dx = rng.random_range(-j..=j);
                dy = rng.random_range(-j..=j);
            }
        }
        for p in segment {
            let (y, x) = ((p / w) as i64 + dy, (p % w) as i64 + dx);
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                c.stamp(x, y, 1, 0.0);
            }
        }
    }
}

fn ink_bbox(c: &Canvas) -> Option<(i64, i64, i64, i64)> {
    let ink = ink_pixels(c);
    if ink.is_empty() {
        return None;
    }
    let w = c.width;
    Some(ink.iter().fold((i64::MAX, i64::MAX, 0, 0), |(x0, y0, x1, y1), &i| {
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        (x0.min(x), y0.min(y), x1.max(x), y1.max(y))
    }))
}

fn add_mesh(c: &mut Canvas, count: usize, rng: &mut ChaCha8Rng) {
    let Some((x0, y0, x1, y1)) = ink_bbox(c) else {
        return;
    };
    for _ in 0..count {
        // chord between two different sides of the shape's bounding box
        let side = |rng: &mut ChaCha8Rng, s: u8| match s {
            0 => (rng.random_range(x0..=x1), y0),
            1 => (x1, rng.random_range(y0..=y1)),
            2 => (rng.random_range(x0..=x1), y1),
            _ => (x0, rng.random_range(y0..=y1)),
        };
        let a = rng.random_range(0..4u8);
        let b = (a + rng.random_range(1..4u8)) % 4;
        let p = side(rng, a);
        let q = side(rng, b);
        c.line(p, q, 1, MESH_INTENSITY);
    }
}

fn add_extra_lines(c: &mut Canvas, count: usize, rng: &mut ChaCha8Rng) {
    let (h, w) = (c.height as i64, c.width as i64);
    let size = h.min(w) as f64;
    for _ in 0..count {
        let ink = ink_pixels(c);
        let (sx, sy) = if ink.is_empty() {
            (rng.random_range(0..w), rng.random_range(0..h))
        } else {
            let i = ink[rng.random_range(0..ink.len())];
            ((i % c.width) as i64, (i / c.width) as i64)
        };
        let len = rng.random_range(0.15..0.35) * size;
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let ex = (sx as f64 + len * angle.cos()).round() as i64;
        let ey = (sy as f64 + len * angle.sin()).round() as i64;
        c.line((sx, sy), (ex.clamp(0, w - 1), ey.clamp(0, h - 1)), 1, 0.0);
    }
}

/// Applies gaps, duplicate strokes, mesh lines, extra lines and blur, in
/// that order. Deterministic in `(clean, profile)`.
pub fn inject_defects(clean: &SketchRaster, profile: &DefectProfile) -> Result<SketchRaster> {
    profile.validate()?;
    let (h, w) = clean.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut canvas = Canvas::from_data(h, w, clean.data().to_vec());
    add_gaps(&mut canvas, profile.gap_rate, &mut rng);
    add_duplicates(
        &mut canvas,
        profile.duplicate_stroke_count,
        profile.duplicate_jitter,
        &mut rng,
    );
    add_mesh(&mut canvas, profile.mesh_line_count, &mut rng);
    add_extra_lines(&mut canvas, profile.extra_line_count, &mut rng);
    let rough = SketchRaster::from_clamped(h, w, canvas.data)?;
    Ok(gaussian_blur(&rough, profile.blur_sigma))
}
