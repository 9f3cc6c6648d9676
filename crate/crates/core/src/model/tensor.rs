use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::SketchRaster;

/// A `C x H x W` activation volume stored channel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::arg(format!(
                "feature map data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("feature map contains non-finite values"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Ink-polarity network input from a white-background raster.
    pub fn from_raster_ink(r: &SketchRaster) -> Self {
        Self {
            channels: 1,
            height: r.height(),
            width: r.width(),
            data: r.data().iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// Single-channel map holding the raster values as-is.
    pub fn from_raster(r: &SketchRaster) -> Self {
        Self {
            channels: 1,
            height: r.height(),
            width: r.width(),
            data: r.data().to_vec(),
        }
    }

    /// White-background raster from an ink-polarity single-channel map.
    pub fn to_raster_ink(&self) -> Result<SketchRaster> {
        if self.channels != 1 {
            return Err(Error::arg(format!(
                "expected a single-channel map, got {} channels",
                self.channels
            )));
        }
        SketchRaster::from_clamped(
            self.height,
            self.width,
            self.data.iter().map(|v| 1.0 - v).collect(),
        )
    }

    pub(crate) fn from_parts_unchecked(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}
