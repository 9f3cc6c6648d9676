//! Canny edge detection and the edge/blur blend that turns a shaded render
//! into a rough query-style sketch.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::raster::{gaussian_blur, InkMask, SketchRaster};

/// Sobel response of a unit step is 4; dividing by it puts thresholds in
/// intensity-step units.
const SOBEL_NORM: f64 = 4.0;

pub(crate) struct Gradients {
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub magnitude: Vec<f64>,
}

/// 3x3 Sobel with replicated borders, normalized so a 0-to-1 step scores 1.
pub(crate) fn sobel(img: &SketchRaster) -> Gradients {
    let (h, w) = img.shape();
    let at = |y: isize, x: isize| {
        img.get(
            y.clamp(0, h as isize - 1) as usize,
            x.clamp(0, w as isize - 1) as usize,
        )
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let dy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            gx[i] = dx / SOBEL_NORM;
            gy[i] = dy / SOBEL_NORM;
        }
    }
    let magnitude = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    Gradients { gx, gy, magnitude }
}

/// Thins gradient ridges to one pixel. Along the gradient direction a pixel
/// survives if it is strictly above its "previous" neighbour and at least
/// its "next" one, so a plateau of two equal responses keeps only the first.
pub(crate) fn non_maximum_suppression(g: &Gradients, h: usize, w: usize) -> Vec<f64> {
    let mag = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            g.magnitude[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = g.magnitude[i];
            if m == 0.0 {
                continue;
            }
            let mut angle = g.gy[i].atan2(g.gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let ((px, py), (nx, ny)) = if !(22.5..157.5).contains(&angle) {
                ((x - 1, y), (x + 1, y))
            } else if angle < 67.5 {
                ((x - 1, y - 1), (x + 1, y + 1))
            } else if angle < 112.5 {
                ((x, y - 1), (x, y + 1))
            } else {
                ((x + 1, y - 1), (x - 1, y + 1))
            };
            if m > mag(px, py) && m >= mag(nx, ny) {
                out[i] = m;
            }
        }
    }
    out
}

/// Double threshold with 8-connected hysteresis: strong pixels (>= high)
/// seed a flood through weak pixels (>= low).
pub(crate) fn hysteresis(thin: &[f64], h: usize, w: usize, low: f64, high: f64) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= high && m > 0.0 {
            out[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0 && thin[j] >= low && thin[j] > 0.0 {
                    out[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    out
}

/// Canny edges (no pre-smoothing; blur the input first if needed).
/// Thresholds are in intensity-step units.
pub fn canny(img: &SketchRaster, low: f64, high: f64) -> Result<InkMask> {
    if !(low < high) {
        return Err(Error::arg(format!(
            "canny thresholds need low < high, got {low} >= {high}"
        )));
    }
    let (h, w) = img.shape();
    let grads = sobel(img);
    let thin = non_maximum_suppression(&grads, h, w);
    let edges = hysteresis(&thin, h, w, low, high);
    let ink: Vec<f64> = edges.iter().map(|&e| 1.0 - f64::from(e)).collect();
    // ink pixels are exactly 0, so any threshold in (0, 1] recovers the mask
    Ok(SketchRaster::new(h, w, ink)?.to_ink_mask(0.5))
}

/// Blends Canny edges with a Gaussian-blurred copy of the render:
/// `ink = w_edge * edges + (1 - w_edge) * (1 - blur(img))`, returned in
/// white-background polarity.
pub fn generate_sketch_from_render(
    img: &SketchRaster,
    canny_low: f64,
    canny_high: f64,
    blur_sigma: f64,
    w_edge: f64,
) -> Result<SketchRaster> {
    if blur_sigma < 0.0 || !blur_sigma.is_finite() {
        return Err(Error::arg(format!("blur sigma must be >= 0, got {blur_sigma}")));
    }
    if !(0.0..=1.0).contains(&w_edge) {
        return Err(Error::arg(format!("edge weight must be in [0, 1], got {w_edge}")));
    }
    let edges = canny(img, canny_low, canny_high)?;
    let blurred = gaussian_blur(img, blur_sigma);
    let (h, w) = img.shape();
    let data = edges
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(&e, &b)| {
            let ink = w_edge * f64::from(e) + (1.0 - w_edge) * (1.0 - b);
            1.0 - ink.clamp(0.0, 1.0)
        })
        .collect();
    SketchRaster::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(h: usize, w: usize, col: usize) -> SketchRaster {
        let data = (0..h * w)
            .map(|i| if i % w >= col { 1.0 } else { 0.0 })
            .collect();
        SketchRaster::new(h, w, data).unwrap()
    }

    #[test]
    fn constant_input_has_no_edges() {
        let c = SketchRaster::filled(7, 7, 0.3).unwrap();
        assert_eq!(canny(&c, 0.1, 0.3).unwrap().count_ink(), 0);
        let out = generate_sketch_from_render(&c, 0.1, 0.3, 1.0, 0.0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let white = SketchRaster::blank(7, 7).unwrap();
        let out = generate_sketch_from_render(&white, 0.1, 0.3, 1.5, 0.5).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn vertical_step_gives_single_column() {
        // Hand computation on the 5x5 patch with the step at column 2:
        // normalized Sobel gx is 1 at columns 1 and 2, 0 elsewhere, gy is 0.
        // NMS keeps column 1 (1 > 0 on the left, 1 >= 1 on the right) and
        // drops column 2 (1 is not > 1 on the left).
        let img = step(5, 5, 2);
        let g = sobel(&img);
        for y in 0..5 {
            let row: Vec<f64> = (0..5).map(|x| g.gx[y * 5 + x]).collect();
            assert_eq!(row, vec![0.0, 1.0, 1.0, 0.0, 0.0]);
        }
        let edges = canny(&img, 0.2, 0.5).unwrap();
        for y in 0..5 {
            let row: Vec<u8> = (0..5).map(|x| edges.data()[y * 5 + x]).collect();
            assert_eq!(row, vec![0, 1, 0, 0, 0]);
        }
    }

    #[test]
    fn pure_edge_weight_returns_canny() {
        let img = step(6, 6, 3);
        let edges = canny(&img, 0.2, 0.5).unwrap();
        let out = generate_sketch_from_render(&img, 0.2, 0.5, 0.0, 1.0).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            assert_eq!(v, if edges.is_ink(i) { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn hysteresis_follows_weak_neighbours_only_from_strong_seeds() {
        // strong at 0, weak chain 1..3, isolated weak at 5
        let thin = [0.9, 0.3, 0.3, 0.3, 0.0, 0.3];
        assert_eq!(hysteresis(&thin, 1, 6, 0.2, 0.8), vec![1, 1, 1, 1, 0, 0]);
    }

    #[test]
    fn threshold_order_is_checked() {
        let img = step(5, 5, 2);
        assert!(canny(&img, 0.5, 0.5).is_err());
        assert!(generate_sketch_from_render(&img, 0.6, 0.2, 1.0, 0.5).is_err());
    }

    #[test]
    fn steps_of_any_position_stay_one_pixel_wide() {
        for col in 1..9 {
            let img = step(9, 10, col);
            let edges = canny(&img, 0.2, 0.5).unwrap();
            for y in 0..9 {
                let n = (0..10).filter(|&x| edges.data()[y * 10 + x] == 1).count();
                assert!(n <= 1, "col {col} row {y}: {n} pixels");
            }
        }
    }
}
