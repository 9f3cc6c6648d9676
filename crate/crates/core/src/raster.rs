//! Single-channel sketch rasters and the polarity conventions shared by the
//! rest of the crate.
//!
//! Files and [`SketchRaster`] values use the usual "white paper, dark ink"
//! convention: background is 1.0 and ink is 0.0. Network inputs and loss
//! targets use the inverse ("ink = 1"), obtained with [`SketchRaster::invert`].

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A grayscale image with every intensity in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchRaster {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Binary ink membership: 1 marks an ink (edge) pixel, 0 background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InkMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SketchRaster {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg(format!(
                "raster dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::arg(format!(
                "raster data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("raster value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds a raster from arbitrary reals, clamping into `[0, 1]`.
    /// Non-finite values map to 0.
    pub fn from_clamped(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// All-white (ink-free) raster.
    pub fn blank(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 1.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Each pixel mapped to `1 - v`.
    pub fn invert(&self) -> SketchRaster {
        SketchRaster {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> SketchRaster {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width) {
            data.extend(row.iter().rev());
        }
        SketchRaster {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Pixels darker than `threshold` (strict) are ink.
    pub fn to_ink_mask(&self, threshold: f64) -> InkMask {
        InkMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| u8::from(v < threshold)).collect(),
        }
    }

    /// Fraction of pixels darker than 0.5.
    pub fn ink_fraction(&self) -> f64 {
        self.to_ink_mask(0.5).count_ink() as f64 / self.len() as f64
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([quantize(self.get(y as usize, x as usize))])
        })
    }

    pub fn from_gray8(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        SketchRaster {
            height: h as usize,
            width: w as usize,
            data: img.pixels().map(|p| f64::from(p[0]) / 255.0).collect(),
        }
    }

    /// Encodes as an 8-bit grayscale PNG.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_gray8()
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Decodes any supported image payload (PNG or binary PGM).
    pub fn from_image_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(b"P5") {
            return read_pgm(bytes);
        }
        let img = image::load_from_memory(bytes).map_err(|e| Error::Format(e.to_string()))?;
        Ok(from_dynamic(img))
    }
}

impl InkMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_ink(&self, idx: usize) -> bool {
        self.data[idx] == 1
    }

    pub fn count_ink(&self) -> usize {
        self.data.iter().filter(|&&m| m == 1).count()
    }

    pub fn count_background(&self) -> usize {
        self.data.len() - self.count_ink()
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_dynamic(img: DynamicImage) -> SketchRaster {
    match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let g = img.to_luma16();
            let (w, h) = g.dimensions();
            SketchRaster {
                height: h as usize,
                width: w as usize,
                data: g.pixels().map(|p| f64::from(p[0]) / 65535.0).collect(),
            }
        }
        other => SketchRaster::from_gray8(&other.to_luma8()),
    }
}

fn is_pgm_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// Reads a PNG or binary PGM file. Colour inputs are reduced to luminance.
pub fn load_raster(path: impl AsRef<Path>) -> Result<SketchRaster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    SketchRaster::from_image_bytes(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes an 8-bit grayscale image; `.pgm` paths get binary PGM, everything
/// else PNG.
pub fn save_raster(r: &SketchRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_pgm_path(path) {
        write_pgm(r)
    } else {
        r.to_png_bytes()?
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(r: &SketchRaster) -> Vec<u8> {
    let mut out = Vec::with_capacity(r.len() + 32);
    // writing into a Vec cannot fail
    write!(out, "P5\n{} {}\n255\n", r.width(), r.height()).unwrap();
    out.extend(r.data().iter().map(|&v| quantize(v)));
    out
}

pub fn read_pgm(bytes: &[u8]) -> Result<SketchRaster> {
    let mut reader = BufReader::new(bytes);
    let mut fields = Vec::with_capacity(4);
    let mut line = String::new();
    while fields.len() < 4 {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated PGM header".into()));
        }
        let content = line.split('#').next().unwrap_or("");
        fields.extend(content.split_whitespace().map(str::to_owned));
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("not a binary PGM: {}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let mut pixels = vec![0u8; width * height];
    reader
        .read_exact(&mut pixels)
        .map_err(|_| Error::Format("truncated PGM pixel data".into()))?;
    let scale = maxval as f64;
    SketchRaster::new(
        height,
        width,
        pixels.iter().map(|&p| (f64::from(p) / scale).min(1.0)).collect(),
    )
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(r: &SketchRaster, new_h: usize, new_w: usize) -> Result<SketchRaster> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::arg(format!(
            "resize target must be positive, got {new_h}x{new_w}"
        )));
    }
    let (h, w) = r.shape();
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = axis(new_h, h);
    let cols = axis(new_w, w);
    let mut data = Vec::with_capacity(new_h * new_w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            // a + f(b - a) keeps constants exact
            let top = lerp(r.get(r0, c0), r.get(r0, c1), fx);
            let bottom = lerp(r.get(r1, c0), r.get(r1, c1), fx);
            data.push(lerp(top, bottom, fy).clamp(0.0, 1.0));
        }
    }
    SketchRaster::new(new_h, new_w, data)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Area-averaging resample: each output pixel is the coverage-weighted mean
/// of the input pixels under it. Thin strokes survive large reductions,
/// which bilinear sampling does not guarantee.
pub fn resize_area(r: &SketchRaster, new_h: usize, new_w: usize) -> Result<SketchRaster> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::arg(format!(
            "resize target must be positive, got {new_h}x{new_w}"
        )));
    }
    let (h, w) = r.shape();
    if new_h > h || new_w > w {
        return resize_bilinear(r, new_h, new_w);
    }
    let spans = |n_out: usize, n_in: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let start = i as f64 * scale;
                let end = start + scale;
                let mut cover = Vec::new();
                let mut p = start.floor() as usize;
                while (p as f64) < end && p < n_in {
                    let lo = start.max(p as f64);
                    let hi = end.min(p as f64 + 1.0);
                    if hi > lo {
                        cover.push((p, (hi - lo) / scale));
                    }
                    p += 1;
                }
                cover
            })
            .collect()
    };
    let rows = spans(new_h, h);
    let cols = spans(new_w, w);
    let mut data = Vec::with_capacity(new_h * new_w);
    for rs in &rows {
        for cs in &cols {
            let mut acc = 0.0;
            for &(ri, wy) in rs {
                for &(ci, wx) in cs {
                    acc += wy * wx * r.get(ri, ci);
                }
            }
            data.push(acc.clamp(0.0, 1.0));
        }
    }
    SketchRaster::new(new_h, new_w, data)
}

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable Gaussian blur with replicated borders. `sigma <= 0` is the
/// identity.
pub fn gaussian_blur(r: &SketchRaster, sigma: f64) -> SketchRaster {
    if sigma <= 0.0 {
        return r.clone();
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as isize;
    let (h, w) = r.shape();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * r.get(y, clampi(x as isize + k as isize - radius, w)))
                .sum();
        }
    }
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[clampi(y as isize + k as isize - radius, h) * w + x])
                .sum();
            data[y * w + x] = v.clamp(0.0, 1.0);
        }
    }
    SketchRaster {
        height: h,
        width: w,
        data,
    }
}
