//! Hard-edged line rasterization used by the renderer and defect injector.

/// Mutable white-background canvas. Drawing only ever darkens pixels.
#[derive(Clone, Debug)]
pub(crate) struct Canvas {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Canvas {
    pub fn white(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1.0; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Self {
        Self {
            height,
            width,
            data,
        }
    }

    /// Maps a normalized coordinate to a pixel index on an axis of `n`.
    pub fn to_px(v: f64, n: usize) -> i64 {
        ((v * n as f64).floor() as i64).clamp(0, n as i64 - 1)
    }

    fn darken(&mut self, x: i64, y: i64, value: f64) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let idx = y as usize * self.width + x as usize;
        if value < self.data[idx] {
            self.data[idx] = value;
        }
    }

    /// Square brush of side `width` centred on the pixel; width 1 is a
    /// single pixel.
    pub fn stamp(&mut self, x: i64, y: i64, width: usize, value: f64) {
        let w = width.max(1) as i64;
        let lo = -(w - 1) / 2;
        for dy in lo..lo + w {
            for dx in lo..lo + w {
                self.darken(x + dx, y + dy, value);
            }
        }
    }

    /// Bresenham segment between pixel coordinates, endpoints included.
    pub fn line(&mut self, from: (i64, i64), to: (i64, i64), width: usize, value: f64) {
        for (x, y) in bresenham(from, to) {
            self.stamp(x, y, width, value);
        }
    }

    /// Segment between normalized coordinates.
    pub fn line_norm(&mut self, a: (f64, f64), b: (f64, f64), width: usize, value: f64) {
        let p = (Self::to_px(a.0, self.width), Self::to_px(a.1, self.height));
        let q = (Self::to_px(b.0, self.width), Self::to_px(b.1, self.height));
        self.line(p, q, width, value);
    }
}

pub(crate) fn bresenham(from: (i64, i64), to: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if (x, y) == to {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}
