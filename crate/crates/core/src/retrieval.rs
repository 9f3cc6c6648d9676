//! Exact cosine-similarity retrieval over fixed downsample descriptors, and
//! the scoring used to compare defective and cleaned queries.
//!
//! Index file layout (little-endian):
//!
//! ```text
//! "SCI1", u32 descriptor length, u32 item count
//! per item: u32 id length, id bytes, u32 label length, label bytes,
//!           f32 descriptor values
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{resize_area, SketchRaster};

pub const DESCRIPTOR_SIDE: usize = 16;
pub const DESCRIPTOR_LEN: usize = DESCRIPTOR_SIDE * DESCRIPTOR_SIDE;
pub const INDEX_MAGIC: &[u8; 4] = b"SCI1";

/// Unit-norm (or all-zero) ink vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copy with every component rounded to `f32`, as stored on disk.
    pub fn to_f32_precision(&self) -> Descriptor {
        Descriptor(self.0.iter().map(|&v| f64::from(v as f32)).collect())
    }
}

/// Area-downsamples to 16x16, switches to ink polarity and L2-normalizes.
/// A raster with no ink maps to the zero vector.
pub fn embed(r: &SketchRaster) -> Descriptor {
    let small = resize_area(r, DESCRIPTOR_SIDE, DESCRIPTOR_SIDE)
        .expect("descriptor size is positive");
    let ink: Vec<f64> = small.data().iter().map(|v| 1.0 - v).collect();
    let norm = ink.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Descriptor(ink);
    }
    Descriptor(ink.into_iter().map(|v| v / norm).collect())
}

pub fn cosine_similarity(a: &Descriptor, b: &Descriptor) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexItem {
    pub id: String,
    pub label: String,
    pub descriptor: Descriptor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    items: Vec<IndexItem>,
    ids: HashSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub label: String,
    pub similarity: f64,
}

impl RetrievalIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            items: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[IndexItem] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&IndexItem> {
        self.items.iter().find(|it| it.id == id)
    }

    /// Adds an item. Descriptors are stored at `f32` precision so a saved
    /// index reloads exactly.
    pub fn insert(&mut self, id: impl Into<String>, label: impl Into<String>, d: &Descriptor) -> Result<()> {
        let id = id.into();
        if d.len() != self.dim {
            return Err(Error::arg(format!(
                "descriptor for {id} has length {}, index expects {}",
                d.len(),
                self.dim
            )));
        }
        if d.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg(format!("descriptor for {id} is not finite")));
        }
        if !self.ids.insert(id.clone()) {
            return Err(Error::arg(format!("duplicate index id {id}")));
        }
        self.items.push(IndexItem {
            id,
            label: label.into(),
            descriptor: d.to_f32_precision(),
        });
        Ok(())
    }

    /// Index over `(id, label, raster)` triples using [`embed`].
    pub fn from_rasters<'a>(
        entries: impl IntoIterator<Item = (&'a str, &'a str, &'a SketchRaster)>,
    ) -> Result<Self> {
        let mut index = Self::new(DESCRIPTOR_LEN);
        for (id, label, r) in entries {
            index.insert(id, label, &embed(r))?;
        }
        Ok(index)
    }

    pub fn class_sizes(&self) -> HashMap<&str, usize> {
        let mut out = HashMap::new();
        for it in &self.items {
            *out.entry(it.label.as_str()).or_insert(0) += 1;
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.items.len() as u32).to_le_bytes());
        for it in &self.items {
            for s in [&it.id, &it.label] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            for &v in &it.descriptor.0 {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::Format("not an index file (bad magic)".into()));
        }
        let dim = r.u32()?;
        let count = r.u32()?;
        let mut index = Self::new(dim);
        for _ in 0..count {
            let id = r.text()?;
            let label = r.text()?;
            let values = r
                .take(4 * dim)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            index
                .insert(id, label, &Descriptor(values))
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after index".into()));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .pos
            .checked_add(n)
            .and_then(|end| self.buf.get(self.pos..end))
            .ok_or_else(|| Error::Format("truncated index file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("index string is not UTF-8".into()))
    }
}

/// The `k` most similar items, best first, ties by ascending id.
pub fn query(index: &RetrievalIndex, q: &Descriptor, k: usize) -> Result<Vec<Hit>> {
    if index.is_empty() {
        return Err(Error::arg("index is empty"));
    }
    if k == 0 || k > index.len() {
        return Err(Error::arg(format!(
            "k must be in 1..={}, got {k}",
            index.len()
        )));
    }
    if q.len() != index.dim() {
        return Err(Error::arg(format!(
            "query descriptor has length {}, index expects {}",
            q.len(),
            index.dim()
        )));
    }
    let mut scored: Vec<(f64, &IndexItem)> = index
        .items()
        .iter()
        .map(|it| (cosine_similarity(q, &it.descriptor), it))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(s, it)| Hit {
            id: it.id.clone(),
            label: it.label.clone(),
            similarity: s,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Percent of the top `k` results sharing the query's class, averaged.
    pub top_k_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// Seconds per query.
    pub mean_retrieval_time: f64,
    pub k: usize,
    pub n_queries: usize,
}

pub fn score_retrieval(
    index: &RetrievalIndex,
    queries: &[(Descriptor, String)],
    k: usize,
) -> Result<RetrievalReport> {
    if queries.is_empty() {
        return Err(Error::arg("no queries to score"));
    }
    let sizes = index.class_sizes();
    let (mut precision, mut recall, mut seconds) = (0.0, 0.0, 0.0);
    for (q, label) in queries {
        let start = Instant::now();
        let hits = query(index, q, k)?;
        seconds += start.elapsed().as_secs_f64();
        let same = hits.iter().filter(|h| &h.label == label).count() as f64;
        precision += same / k as f64;
        match sizes.get(label.as_str()) {
            Some(&n) => recall += same / n as f64,
            None => log::warn!("query label {label} is not in the index; recall counts as 0"),
        }
    }
    let n = queries.len() as f64;
    Ok(RetrievalReport {
        top_k_accuracy: 100.0 * precision / n,
        precision: precision / n,
        recall: recall / n,
        mean_retrieval_time: seconds / n,
        k,
        n_queries: queries.len(),
    })
}

/// Reports for defective queries and for their cleaned versions against
/// the same index.
pub fn ab_compare(
    defective: &[SketchRaster],
    cleaned: &[SketchRaster],
    labels: &[String],
    index: &RetrievalIndex,
    k: usize,
) -> Result<(RetrievalReport, RetrievalReport)> {
    if defective.len() != cleaned.len() || defective.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} defective, {} cleaned and {} labels",
            defective.len(),
            cleaned.len(),
            labels.len()
        )));
    }
    let queries = |rs: &[SketchRaster]| -> Vec<(Descriptor, String)> {
        rs.iter().zip(labels).map(|(r, l)| (embed(r), l.clone())).collect()
    };
    Ok((
        score_retrieval(index, &queries(defective), k)?,
        score_retrieval(index, &queries(cleaned), k)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_descriptor(rng: &mut ChaCha8Rng, dim: usize) -> Descriptor {
        Descriptor((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Brute force: similarity of every item, then pick the best k by
    /// repeated selection of the maximum (smallest id on ties).
    fn oracle(index: &RetrievalIndex, q: &Descriptor, k: usize) -> Vec<String> {
        let mut left: Vec<(String, f64)> = index
            .items()
            .iter()
            .map(|it| {
                let dot: f64 = it.descriptor.0.iter().zip(&q.0).map(|(a, b)| a * b).sum();
                (it.id.clone(), dot / (it.descriptor.norm() * q.norm()))
            })
            .collect();
        let mut out = Vec::new();
        for _ in 0..k {
            let mut best = 0;
            for i in 1..left.len() {
                let (ref id, s) = left[i];
                let (ref bid, bs) = left[best];
                if s > bs || (s == bs && id < bid) {
                    best = i;
                }
            }
            out.push(left.remove(best).0);
        }
        out
    }

    fn prototype_index() -> (RetrievalIndex, Vec<Descriptor>) {
        // three orthogonal class prototypes, four noisy items each
        let dim = 12;
        let protos: Vec<Descriptor> = (0..3)
            .map(|c| Descriptor((0..dim).map(|i| f64::from(u8::from(i / 4 == c))).collect()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut index = RetrievalIndex::new(dim);
        for (c, p) in protos.iter().enumerate() {
            for j in 0..4 {
                let d = Descriptor(p.0.iter().map(|v| v + rng.random_range(0.0..0.2)).collect());
                index.insert(format!("{c}-{j}"), format!("class{c}"), &d).unwrap();
            }
        }
        (index, protos)
    }

    #[test]
    fn embed_contract() {
        let blank = SketchRaster::blank(40, 40).unwrap();
        assert!(embed(&blank).0.iter().all(|&v| v == 0.0));
        let mut data = vec![1.0; 40 * 40];
        for i in 0..40 {
            data[i * 40 + i] = 0.0;
        }
        let r = SketchRaster::new(40, 40, data).unwrap();
        let d = embed(&r);
        assert_eq!(d.len(), DESCRIPTOR_LEN);
        assert!((d.norm() - 1.0).abs() < 1e-9);
        assert_eq!(d, embed(&r.clone()));
    }

    #[test]
    fn self_query_ranks_first_and_full_k_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut index = RetrievalIndex::new(8);
        for i in 0..20 {
            index.insert(format!("{i:02}"), "x", &random_descriptor(&mut rng, 8)).unwrap();
        }
        let target = index.items()[7].descriptor.clone();
        assert_eq!(query(&index, &target, 3).unwrap()[0].id, "07");
        let mut all: Vec<_> = query(&index, &target, 20).unwrap().into_iter().map(|h| h.id).collect();
        all.sort();
        assert_eq!(all, (0..20).map(|i| format!("{i:02}")).collect::<Vec<_>>());
    }

    #[test]
    fn query_errors() {
        let empty = RetrievalIndex::new(4);
        let q = Descriptor(vec![1.0, 0.0, 0.0, 0.0]);
        assert!(query(&empty, &q, 1).is_err());
        let mut index = RetrievalIndex::new(4);
        index.insert("a", "x", &q).unwrap();
        assert!(query(&index, &q, 2).is_err());
        assert!(query(&index, &q, 0).is_err());
        assert!(query(&index, &Descriptor(vec![1.0]), 1).is_err());
        assert!(index.insert("a", "y", &q).is_err());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let mut index = RetrievalIndex::new(2);
        let d = Descriptor(vec![1.0, 0.0]);
        for id in ["c", "a", "b"] {
            index.insert(id, "x", &d).unwrap();
        }
        let ids: Vec<_> = query(&index, &d, 3).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn prototype_classes_are_separated() {
        let (index, protos) = prototype_index();
        for (c, p) in protos.iter().enumerate() {
            let hits = query(&index, p, 4).unwrap();
            assert!(hits.iter().all(|h| h.label == format!("class{c}")));
            assert!(hits.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        }
    }

    #[test]
    fn score_matches_hand_computed_oracle() {
        let (index, protos) = prototype_index();
        // class 0 query is clean; class 1 query is pulled toward class 2
        let mixed = Descriptor(
            protos[1].0.iter().zip(&protos[2].0).map(|(a, b)| 0.45 * a + 0.55 * b).collect(),
        );
        let queries = vec![
            (protos[0].clone(), "class0".to_string()),
            (mixed.clone(), "class1".to_string()),
        ];
        let k = 4;
        let r = score_retrieval(&index, &queries, k).unwrap();
        let mut prec = 0.0;
        let mut rec = 0.0;
        for (q, label) in &queries {
            let same = oracle(&index, q, k)
                .iter()
                .filter(|id| &index.get(id).unwrap().label == label)
                .count() as f64;
            prec += same / k as f64;
            rec += same / 4.0;
        }
        assert!((r.precision - prec / 2.0).abs() < 1e-12);
        assert!((r.recall - rec / 2.0).abs() < 1e-12);
        assert!((r.top_k_accuracy - 100.0 * prec / 2.0).abs() < 1e-9);
        assert!(r.precision < 1.0);
    }

    #[test]
    fn single_class_and_full_recall() {
        let (index, protos) = prototype_index();
        let r = score_retrieval(&index, &[(protos[2].clone(), "class2".into())], 4).unwrap();
        assert_eq!((r.precision, r.recall, r.top_k_accuracy), (1.0, 1.0, 100.0));

        let mut one = RetrievalIndex::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..5 {
            one.insert(i.to_string(), "only", &random_descriptor(&mut rng, 3)).unwrap();
        }
        let r = score_retrieval(&one, &[(random_descriptor(&mut rng, 3), "only".into())], 3).unwrap();
        assert_eq!((r.precision, r.top_k_accuracy), (1.0, 100.0));
    }

    #[test]
    fn unknown_label_counts_zero_recall() {
        let (index, protos) = prototype_index();
        let r = score_retrieval(&index, &[(protos[0].clone(), "nope".into())], 2).unwrap();
        assert_eq!((r.precision, r.recall), (0.0, 0.0));
        assert!(score_retrieval(&index, &[], 2).is_err());
    }

    #[test]
    fn index_file_round_trip() {
        let (index, _) = prototype_index();
        let bytes = index.encode();
        assert_eq!(&bytes[..4], b"SCI1");
        assert_eq!(&bytes[4..8], &12u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &12u32.to_le_bytes());
        assert_eq!(RetrievalIndex::decode(&bytes).unwrap(), index);
        assert!(RetrievalIndex::decode(&bytes[..bytes.len() - 2]).is_err());
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(RetrievalIndex::decode(&extra).is_err());
    }

    #[test]
    fn ab_compare_contract() {
        let rasters: Vec<SketchRaster> = (0..3)
            .map(|i| {
                let mut data = vec![1.0; 32 * 32];
                for j in 0..32 {
                    data[(8 * i + 4) * 32 + j] = 0.0;
                }
                SketchRaster::new(32, 32, data).unwrap()
            })
            .collect();
        let labels: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let index = RetrievalIndex::from_rasters(
            rasters.iter().zip(&labels).map(|(r, l)| (l.as_str(), l.as_str(), r)),
        )
        .unwrap();
        let (a, b) = ab_compare(&rasters, &rasters, &labels, &index, 1).unwrap();
        assert_eq!((a.top_k_accuracy, a.precision, a.recall), (b.top_k_accuracy, b.precision, b.recall));
        assert!(ab_compare(&rasters, &rasters[..2], &labels, &index, 1).is_err());
    }

    proptest! {
        #[test]
        fn query_equals_brute_force(seed in 0u64..500, n in 1usize..25, k_frac in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut index = RetrievalIndex::new(6);
            for i in 0..n {
                // coarse values make exact ties likely
                let d = Descriptor((0..6).map(|_| f64::from(rng.random_range(0u8..3))).collect());
                if d.norm() == 0.0 { continue; }
                index.insert(format!("{:03}", (i * 7) % 101), "x", &d).unwrap();
            }
            prop_assume!(!index.is_empty());
            let q = Descriptor((0..6).map(|_| rng.random_range(0.1..1.0)).collect());
            let k = 1 + (k_frac * (index.len() - 1) as f64) as usize;
            let got: Vec<_> = query(&index, &q, k).unwrap().into_iter().map(|h| h.id).collect();
            prop_assert_eq!(got, oracle(&index, &q, k));
        }

        #[test]
        fn ranking_ignores_descriptor_scale(seed in 0u64..200, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<Descriptor> = (0..15).map(|_| random_descriptor(&mut rng, 5)).collect();
            let q = random_descriptor(&mut rng, 5);
            let mut a = RetrievalIndex::new(5);
            let mut b = RetrievalIndex::new(5);
            for (i, d) in raw.iter().enumerate() {
                a.insert(i.to_string(), "x", d).unwrap();
                // powers of two keep f32 rounding scale-free
                let s = 2f64.powi(scale.log2().round() as i32);
                b.insert(i.to_string(), "x", &Descriptor(d.0.iter().map(|v| v * s).collect())).unwrap();
            }
            let ids = |ix: &RetrievalIndex| query(ix, &q, 15).unwrap().into_iter().map(|h| h.id).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
        }

        #[test]
        fn report_rates_in_range(seed in 0u64..200, k in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut index = RetrievalIndex::new(4);
            for i in 0..12 {
                index.insert(i.to_string(), format!("c{}", i % 3), &random_descriptor(&mut rng, 4)).unwrap();
            }
            let queries: Vec<_> = (0..5).map(|i| (random_descriptor(&mut rng, 4), format!("c{}", i % 4))).collect();
            let r = score_retrieval(&index, &queries, k).unwrap();
            prop_assert!((0.0..=100.0).contains(&r.top_k_accuracy));
            prop_assert!((0.0..=1.0).contains(&r.precision));
            prop_assert!((0.0..=1.0).contains(&r.recall));
        }
    }
}
