//! Procedural engineering-style line art: plates, gears, brackets and the
//! like, described in normalized unit-square coordinates.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::draw::Canvas;
use crate::error::{Error, Result};
use crate::raster::SketchRaster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    Polyline {
        points: Vec<(f64, f64)>,
        closed: bool,
    },
    /// Angles in radians; `sweep` may be negative.
    Arc {
        cx: f64,
        cy: f64,
        r: f64,
        start: f64,
        sweep: f64,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub primitives: Vec<Primitive>,
    /// Stroke width in pixels.
    pub stroke_width: usize,
}

impl Primitive {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Primitive::Circle { cx, cy, r } | Primitive::Arc { cx, cy, r, .. } => {
                (cx - r, cy - r, cx + r, cy + r)
            }
            Primitive::Rect { x0, y0, x1, y1 } => (x0.min(*x1), y0.min(*y1), x0.max(*x1), y0.max(*y1)),
            Primitive::Polyline { points, .. } => points.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
            ),
        }
    }

    /// Polyline approximation in normalized coordinates.
    fn path(&self, h: usize, w: usize) -> (Vec<(f64, f64)>, bool) {
        let ring = |cx: f64, cy: f64, r: f64, start: f64, sweep: f64| {
            let px = r * (h.max(w) as f64);
            let n = ((sweep.abs() * px * 1.5).ceil() as usize).max(8);
            (0..=n)
                .map(|i| {
                    let t = start + sweep * i as f64 / n as f64;
                    (cx + r * t.cos(), cy + r * t.sin())
                })
                .collect::<Vec<_>>()
        };
        match self {
            Primitive::Circle { cx, cy, r } => (ring(*cx, *cy, *r, 0.0, TAU), false),
            Primitive::Arc {
                cx,
                cy,
                r,
                start,
                sweep,
            } => (ring(*cx, *cy, *r, *start, *sweep), false),
            Primitive::Rect { x0, y0, x1, y1 } => {
                (vec![(*x0, *y0), (*x1, *y0), (*x1, *y1), (*x0, *y1)], true)
            }
            Primitive::Polyline { points, closed } => (points.clone(), *closed),
        }
    }
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        const SLACK: f64 = 1e-9;
        for p in &self.primitives {
            let (a, b, c, d) = p.bounds();
            let inside = |v: f64| (-SLACK..=1.0 + SLACK).contains(&v);
            if ![a, b, c, d].into_iter().all(inside) {
                return Err(Error::arg(format!(
                    "primitive {p:?} leaves the unit square"
                )));
            }
        }
        Ok(())
    }
}

/// Draws the spec as black strokes on a white `h` x `w` raster.
pub fn render_clean(spec: &ShapeSpec, h: usize, w: usize) -> Result<SketchRaster> {
    if h == 0 || w == 0 {
        return Err(Error::arg(format!("render size must be positive, got {h}x{w}")));
    }
    spec.validate()?;
    let mut canvas = Canvas::white(h, w);
    for prim in &spec.primitives {
        let (points, closed) = prim.path(h, w);
        for seg in points.windows(2) {
            canvas.line_norm(seg[0], seg[1], spec.stroke_width, 0.0);
        }
        if closed && points.len() > 1 {
            canvas.line_norm(points[points.len() - 1], points[0], spec.stroke_width, 0.0);
        }
        if points.len() == 1 {
            canvas.line_norm(points[0], points[0], spec.stroke_width, 0.0);
        }
    }
    SketchRaster::new(h, w, canvas.data)
}

/// Primitive families used as category labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShapeFamily {
    Plate,
    Gear,
    Bracket,
    Washer,
    Shaft,
    Flange,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Plate,
        ShapeFamily::Gear,
        ShapeFamily::Bracket,
        ShapeFamily::Washer,
        ShapeFamily::Shaft,
        ShapeFamily::Flange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Plate => "plate",
            ShapeFamily::Gear => "gear",
            ShapeFamily::Bracket => "bracket",
            ShapeFamily::Washer => "washer",
            ShapeFamily::Shaft => "shaft",
            ShapeFamily::Flange => "flange",
        }
    }

    /// A random member of the family, sized for an image of `size` pixels
    /// so that features stay resolvable on small rasters.
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R, size: usize) -> ShapeSpec {
        let stroke_width = if size >= 96 { 2 } else { 1 };
        let jitter = |rng: &mut R, v: f64, amt: f64| v + rng.random_range(-amt..=amt);
        let cx = jitter(rng, 0.5, 0.06);
        let cy = jitter(rng, 0.5, 0.06);
        let mut prims = Vec::new();
        match self {
            ShapeFamily::Plate => {
                let hw = rng.random_range(0.28..0.38);
                let hh = rng.random_range(0.18..0.28);
                prims.push(Primitive::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                });
                let hole = rng.random_range(0.05..0.08);
                for sx in [-1.0, 1.0] {
                    prims.push(Primitive::Circle {
                        cx: cx + sx * (hw - hole - 0.05),
                        cy,
                        r: hole,
                    });
                }
            }
            ShapeFamily::Gear => {
                let r = rng.random_range(0.26..0.32);
                let teeth = rng.random_range(6..=9);
                let depth = rng.random_range(0.06..0.09);
                let phase = rng.random_range(0.0..TAU);
                let n = teeth * 4;
                let points = (0..n)
                    .map(|i| {
                        let t = phase + TAU * i as f64 / n as f64;
                        let rr = if (i / 2) % 2 == 0 { r + depth } else { r };
                        (cx + rr * t.cos(), cy + rr * t.sin())
                    })
                    .collect();
                prims.push(Primitive::Polyline {
                    points,
                    closed: true,
                });
                prims.push(Primitive::Circle {
                    cx,
                    cy,
                    r: rng.random_range(0.07..0.11),
                });
            }
            ShapeFamily::Bracket => {
                let x0 = jitter(rng, 0.18, 0.04);
                let y0 = jitter(rng, 0.18, 0.04);
                let x1 = jitter(rng, 0.82, 0.04);
                let y1 = jitter(rng, 0.82, 0.04);
                let t = rng.random_range(0.2..0.28);
                prims.push(Primitive::Polyline {
                    points: vec![
                        (x0, y0),
                        (x0 + t, y0),
                        (x0 + t, y1 - t),
                        (x1, y1 - t),
                        (x1, y1),
                        (x0, y1),
                    ],
                    closed: true,
                });
                prims.push(Primitive::Arc {
                    cx: x0 + t,
                    cy: y1 - t,
                    r: t * 0.5,
                    start: PI / 2.0,
                    sweep: -PI / 2.0,
                });
            }
            ShapeFamily::Washer => {
                let r = rng.random_range(0.3..0.38);
                prims.push(Primitive::Circle { cx, cy, r });
                prims.push(Primitive::Circle {
                    cx,
                    cy,
                    r: r * rng.random_range(0.45..0.6),
                });
            }
            ShapeFamily::Shaft => {
                let steps = rng.random_range(2..=3);
                let mut x = jitter(rng, 0.12, 0.03);
                let span = 0.76 / steps as f64;
                for i in 0..steps {
                    let hh = 0.22 - 0.06 * i as f64 + rng.random_range(-0.02..0.02);
                    prims.push(Primitive::Rect {
                        x0: x,
                        y0: cy - hh,
                        x1: x + span,
                        y1: cy + hh,
                    });
                    x += span;
                }
            }
            ShapeFamily::Flange => {
                let r = rng.random_range(0.32..0.38);
                prims.push(Primitive::Circle { cx, cy, r });
                let bolts = rng.random_range(4..=6);
                let ring = r * 0.68;
                let phase = rng.random_range(0.0..TAU);
                for i in 0..bolts {
                    let t = phase + TAU * i as f64 / bolts as f64;
                    prims.push(Primitive::Circle {
                        cx: cx + ring * t.cos(),
                        cy: cy + ring * t.sin(),
                        r: 0.05,
                    });
                }
            }
        }
        for p in &mut prims {
            clamp_primitive(p);
        }
        ShapeSpec {
            primitives: prims,
            stroke_width,
        }
    }
}

fn clamp_primitive(p: &mut Primitive) {
    let c = |v: &mut f64| *v = v.clamp(0.0, 1.0);
    match p {
        Primitive::Circle { cx, cy, r } | Primitive::Arc { cx, cy, r, .. } => {
            let max_r = cx.min(*cy).min(1.0 - *cx).min(1.0 - *cy).max(0.0);
            *r = r.min(max_r);
        }
        Primitive::Rect { x0, y0, x1, y1 } => {
            c(x0);
            c(y0);
            c(x1);
            c(y1);
        }
        Primitive::Polyline { points, .. } => {
            for (x, y) in points {
                c(x);
                c(y);
            }
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown shape family {s:?}")))
    }
}
