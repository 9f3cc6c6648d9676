//! Image-in, image-out helpers shared by the CLI and the service so both
//! produce identical bytes.

use sketchclean::model::Network;
use sketchclean::raster::SketchRaster;
use sketchclean::retrieval::{embed, query, Hit, RetrievalIndex};
use sketchclean::train::clean_raster;
use sketchclean::{Error, Result};

pub fn decode(bytes: &[u8]) -> Result<SketchRaster> {
    if bytes.is_empty() {
        return Err(Error::Format("empty image payload".into()));
    }
    SketchRaster::from_image_bytes(bytes)
}

/// Decodes an image, resizes it to the model input, cleans it and encodes
/// the result as PNG.
pub fn clean_png(net: &Network, bytes: &[u8]) -> Result<Vec<u8>> {
    clean_raster(net, &decode(bytes)?)?.to_png_bytes()
}

/// Cleans a query image and ranks the index against it.
pub fn retrieve(
    net: Option<&Network>,
    index: &RetrievalIndex,
    bytes: &[u8],
    k: usize,
) -> Result<Vec<Hit>> {
    let raster = decode(bytes)?;
    let raster = match net {
        Some(n) => clean_raster(n, &raster)?,
        None => raster,
    };
    query(index, &embed(&raster), k)
}
