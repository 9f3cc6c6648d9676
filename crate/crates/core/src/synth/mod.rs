//! Synthetic (rough, clean) sketch pairs.
//!
//! Clean targets are procedurally rendered engineering shapes; rough inputs
//! are the same drawings with injected defects. Everything is a pure
//! function of its inputs and seed.

mod canny;
mod defects;
mod draw;
mod shapes;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use canny::{canny, generate_sketch_from_render};
pub use defects::{inject_defects, DefectProfile, MESH_INTENSITY};
pub use shapes::{render_clean, Primitive, ShapeFamily, ShapeSpec};

use crate::error::{Error, Result};
use crate::raster::{load_raster, save_raster, SketchRaster};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub id: String,
    pub rough: SketchRaster,
    pub clean: SketchRaster,
    pub category: Option<String>,
}

/// Seed for pair `i` of a dataset generated with `seed`.
pub fn pair_seed(seed: u64, i: usize) -> u64 {
    seed ^ i as u64
}

/// Generates `n` pairs of `h` x `w` rasters. Categories cycle through
/// [`ShapeFamily::ALL`] so classes stay balanced.
pub fn make_dataset(
    n: usize,
    h: usize,
    w: usize,
    profile: &DefectProfile,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if n == 0 {
        return Err(Error::arg("dataset size must be positive"));
    }
    if h == 0 || w == 0 {
        return Err(Error::arg(format!("pair size must be positive, got {h}x{w}")));
    }
    profile.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = pair_seed(seed, i);
            let family = ShapeFamily::ALL[i % ShapeFamily::ALL.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let spec = family.sample(&mut rng, h.min(w));
            let clean = render_clean(&spec, h, w)?;
            let rough = inject_defects(&clean, &profile.clone().with_seed(profile.seed ^ s))?;
            Ok(TrainingPair {
                id: format!("{i:05}"),
                rough,
                clean,
                category: Some(family.name().to_string()),
            })
        })
        .collect()
}

/// Writes `<root>/rough/<id>.png`, `<root>/clean/<id>.png` and
/// `<root>/labels.csv`.
pub fn write_dataset(pairs: &[TrainingPair], root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for sub in ["rough", "clean"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut labels = String::from("id,category\n");
    for p in pairs {
        if p.id.contains([',', '/', '\\', '\n']) {
            return Err(Error::arg(format!("pair id {:?} is not file-safe", p.id)));
        }
        save_raster(&p.rough, root.join("rough").join(format!("{}.png", p.id)))?;
        save_raster(&p.clean, root.join("clean").join(format!("{}.png", p.id)))?;
        labels.push_str(&format!(
            "{},{}\n",
            p.id,
            p.category.as_deref().unwrap_or("")
        ));
    }
    let path = root.join("labels.csv");
    fs::write(&path, labels).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset directory written by [`write_dataset`]. Pairs come back in
/// `labels.csv` order; a missing label file falls back to sorted file names
/// with no categories.
pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<TrainingPair>> {
    let root = root.as_ref();
    let labels_path = root.join("labels.csv");
    let entries: Vec<(String, Option<String>)> = if labels_path.exists() {
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "id,category" => {}
            other => {
                return Err(Error::Format(format!(
                    "{}: unexpected header {other:?}",
                    labels_path.display()
                )))
            }
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (id, cat) = l.split_once(',').ok_or_else(|| {
                    Error::Format(format!("{}: bad row {l:?}", labels_path.display()))
                })?;
                let cat = cat.trim();
                Ok((id.trim().to_string(), (!cat.is_empty()).then(|| cat.to_string())))
            })
            .collect::<Result<_>>()?
    } else {
        let dir = root.join("rough");
        let mut ids: Vec<String> = match fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let p = e.path();
                    (p.extension().and_then(|x| x.to_str()) == Some("png"))
                        .then(|| p.file_stem()?.to_str().map(str::to_owned))
                        .flatten()
                })
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        ids.sort();
        ids.into_iter().map(|id| (id, None)).collect()
    };
    entries
        .into_iter()
        .map(|(id, category)| {
            let rough = load_raster(root.join("rough").join(format!("{id}.png")))?;
            let clean = load_raster(root.join("clean").join(format!("{id}.png")))?;
            if rough.shape() != clean.shape() {
                log::debug!("pair {id}: rough {:?} vs clean {:?}", rough.shape(), clean.shape());
            }
            Ok(TrainingPair {
                id,
                rough,
                clean,
                category,
            })
        })
        .collect()
}
