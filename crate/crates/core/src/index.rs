//! Searchable index: packed global codes, cached local feature maps and the
//! manifest they were built from.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::dataset::{LoadedSet, Manifest};
use crate::error::{domain_err, Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::retrieval::{
    local_rerank, map_box_to_feature, pack_code, sliding_window_match, top_k_global, BoundingBox, FeatureBox,
    PackedCodeSet, RetrievalResult, WindowQuery,
};

pub const FMAP_MAGIC: &[u8; 8] = b"HMARFMAP";

const ENCODE_CHUNK: usize = 64;

/// Local feature maps `[C, h, w]` keyed by image id, stored as f64 so cached
/// and freshly computed maps hash identically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureCache {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    ids: Vec<u64>,
    maps: Vec<Vec<f64>>,
    rows: HashMap<u64, usize>,
}

impl FeatureCache {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        FeatureCache {
            channels,
            height,
            width,
            ..FeatureCache::default()
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u64, map: Vec<f64>) -> Result<()> {
        if map.len() != self.channels * self.height * self.width {
            return Err(Error::Shape(format!("feature map for {id} has {} values", map.len())));
        }
        if self.rows.contains_key(&id) {
            return domain_err(format!("duplicate image id {id} in feature cache"));
        }
        self.rows.insert(id, self.ids.len());
        self.ids.push(id);
        self.maps.push(map);
        Ok(())
    }

    /// Map of `id` as a `[1, C, h, w]` tensor.
    pub fn get(&self, id: u64) -> Result<Tensor> {
        let row = *self
            .rows
            .get(&id)
            .ok_or_else(|| Error::NotFound(format!("no cached feature map for image {id}")))?;
        Tensor::new(vec![1, self.channels, self.height, self.width], self.maps[row].clone())
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        w.write_all(FMAP_MAGIC)?;
        for d in [self.channels, self.height, self.width] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for (id, map) in self.ids.iter().zip(&self.maps) {
            w.write_all(&id.to_le_bytes())?;
            for v in map {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(r).read_to_end(&mut bytes)?;
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let out = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Format("truncated feature cache".into()))?;
            pos += n;
            Ok(out)
        };
        if take(8)? != FMAP_MAGIC {
            return Err(Error::Format("not a feature cache (bad magic)".into()));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        }
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut cache = FeatureCache::new(dims[0], dims[1], dims[2]);
        let per = dims.iter().product::<usize>();
        for _ in 0..n {
            let id = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let raw = take(per * 8)?;
            let map = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            cache.push(id, map)?;
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after feature cache".into()));
        }
        Ok(cache)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(fs::File::open(path)?)
    }
}

/// Feature-cache file stored next to a code database.
pub fn fmap_path(code_db: &Path) -> PathBuf {
    let mut name = code_db.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".fmaps");
    code_db.with_file_name(name)
}

/// Binarized global codes for a batch of images `[N, C, H, W]`.
pub fn encode_global(model: &Model, images: &Tensor) -> Result<Vec<Vec<u64>>> {
    let h = model.global_codes(images)?;
    Ok(h.data().chunks(model.bits()).map(pack_code).collect())
}

/// Global codes for every image of a loaded set, as a code database.
pub fn encode_set(model: &Model, set: &LoadedSet) -> Result<PackedCodeSet> {
    let mut db = PackedCodeSet::new(model.bits())?;
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(ENCODE_CHUNK) {
        for (&r, code) in chunk.iter().zip(encode_global(model, &set.batch(chunk)?)?) {
            db.push_packed(set.entries[r].id, &code)?;
        }
    }
    Ok(db)
}

#[derive(Clone, Debug)]
pub struct Index {
    pub codes: PackedCodeSet,
    pub fmaps: FeatureCache,
    pub manifest: Manifest,
    /// Gate weight the local maps were extracted with.
    pub alpha: f64,
}

impl Index {
    /// Encodes every manifest image: one global code each plus its local map.
    pub fn build(model: &Model, manifest: &Manifest, alpha: f64) -> Result<Index> {
        let b = &model.config().backbone;
        let side = b.shallow_size();
        let mut fmaps = FeatureCache::new(b.shallow_channels, side, side);
        let mut codes = PackedCodeSet::new(model.bits())?;
        for chunk in manifest.entries.chunks(ENCODE_CHUNK) {
            let sub = Manifest::new(chunk.to_vec(), manifest.base_dir.clone())?;
            let set = LoadedSet::load(&sub)?;
            if set.side != b.input_size {
                return Err(Error::Shape(format!(
                    "images are {}px but the model expects {}px",
                    set.side, b.input_size
                )));
            }
            let rows: Vec<usize> = (0..set.len()).collect();
            let images = set.batch(&rows)?;
            for (e, code) in chunk.iter().zip(encode_global(model, &images)?) {
                codes.push_packed(e.id, &code)?;
            }
            let maps = model.extract_local_feature_map(&images, alpha)?;
            let per = maps.numel() / chunk.len();
            for (e, m) in chunk.iter().zip(maps.data().chunks(per)) {
                fmaps.push(e.id, m.to_vec())?;
            }
        }
        Ok(Index {
            codes,
            fmaps,
            manifest: manifest.clone(),
            alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Writes the code database and its feature cache beside it.
    pub fn save(&self, code_db: impl AsRef<Path>) -> Result<()> {
        let code_db = code_db.as_ref();
        self.codes.save(code_db)?;
        self.fmaps.save(fmap_path(code_db))
    }

    pub fn load(code_db: impl AsRef<Path>, manifest: Manifest, alpha: f64) -> Result<Index> {
        let code_db = code_db.as_ref();
        let codes = PackedCodeSet::load(code_db)?;
        let fmaps = FeatureCache::load(fmap_path(code_db))?;
        if fmaps.len() != codes.len() || codes.ids().iter().any(|&id| fmaps.get(id).is_err()) {
            return Err(Error::Format("feature cache does not match the code database".into()));
        }
        Ok(Index {
            codes,
            fmaps,
            manifest,
            alpha,
        })
    }

    fn check_image(model: &Model, image: &Tensor) -> Result<Tensor> {
        let b = &model.config().backbone;
        let s = image.shape();
        if s.len() != 3 || s[0] != b.in_channels || s[1] != b.input_size || s[2] != b.input_size {
            return Err(Error::Shape(format!(
                "query image must be [{}, {}, {}], got {s:?}",
                b.in_channels, b.input_size, b.input_size
            )));
        }
        image.reshape(&[1, s[0], s[1], s[2]])
    }

    /// Whole-image search: global code, then the `k` nearest database codes.
    pub fn query_global(&self, model: &Model, image: &Tensor, k: usize) -> Result<RetrievalResult> {
        let batch = Self::check_image(model, image)?;
        let code = encode_global(model, &batch)?.remove(0);
        top_k_global(&code, &self.codes, k)
    }

    /// Box search: global top-`k` candidates, then each candidate's best
    /// same-sized window against the query box, keeping the best `n ≤ k`.
    pub fn query_local(
        &self,
        model: &Model,
        image: &Tensor,
        bbox: BoundingBox,
        k: usize,
        n: usize,
    ) -> Result<RetrievalResult> {
        let batch = Self::check_image(model, image)?;
        let s = image.shape();
        bbox.check_within(s[2], s[1])?;
        let fmap = model.extract_local_feature_map(&batch, self.alpha)?;
        self.query_local_with_map(model, &batch, &fmap, bbox, k, n)
    }

    /// As [`Index::query_local`] for an image already in the index, reusing its cached map.
    pub fn query_local_by_id(&self, model: &Model, id: u64, bbox: BoundingBox, k: usize, n: usize) -> Result<RetrievalResult> {
        let entry = self
            .manifest
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("image {id} is not in the index")))?;
        let image = crate::dataset::load_image(self.manifest.resolve(entry))?;
        let batch = Self::check_image(model, &image)?;
        let s = image.shape();
        bbox.check_within(s[2], s[1])?;
        let fmap = self.fmaps.get(id)?;
        self.query_local_with_map(model, &batch, &fmap, bbox, k, n)
    }

    fn query_local_with_map(
        &self,
        model: &Model,
        batch: &Tensor,
        fmap: &Tensor,
        bbox: BoundingBox,
        k: usize,
        n: usize,
    ) -> Result<RetrievalResult> {
        if n == 0 {
            return domain_err("n must be at least 1");
        }
        let factor = model.config().backbone.downsample_factor_shallow;
        let window = map_box_to_feature(&bbox, factor)?;
        let qcode = pack_code(model.window_codes(fmap, &[window])?.data());
        let gcode = encode_global(model, batch)?.remove(0);
        let candidates = top_k_global(&gcode, &self.codes, k)?;
        let query = WindowQuery::for_box(&qcode, bbox, factor)?;
        let map = (self.fmaps.height, self.fmaps.width);
        let mut matches = Vec::with_capacity(candidates.results.len());
        for c in &candidates.results {
            let cmap = self.fmaps.get(c.id)?;
            let hash = |wins: &[FeatureBox]| -> Result<Vec<Vec<u64>>> {
                let h = model.window_codes(&cmap, wins)?;
                Ok(h.data().chunks(model.bits()).map(pack_code).collect())
            };
            matches.push(sliding_window_match(&query, c.id, map, hash)?);
        }
        local_rerank(matches, n.min(candidates.results.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SyntheticSpec};
    use crate::model::{BackboneConfig, ModelConfig};

    fn small_model() -> Model {
        let backbone = BackboneConfig {
            input_size: 32,
            shallow_channels: 8,
            deep_channels: 8,
            ..BackboneConfig::default()
        };
        Model::new(ModelConfig::new(backbone, 16), 3).unwrap()
    }

    fn small_data(dir: &Path, n: usize) -> Manifest {
        let spec = SyntheticSpec {
            images_per_class: n,
            image_size: 32,
            motif_min: 8,
            motif_max: 14,
            ..SyntheticSpec::default()
        };
        generate(&spec, 4, dir).unwrap()
    }

    #[test]
    fn feature_cache_round_trip_and_rejections() {
        let mut c = FeatureCache::new(2, 1, 2);
        c.push(7, vec![1.0, -2.5, 3.0, 0.125]).unwrap();
        c.push(3, vec![0.0; 4]).unwrap();
        assert!(c.push(7, vec![0.0; 4]).is_err());
        assert!(c.push(8, vec![0.0; 3]).is_err());
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let back = FeatureCache::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get(7).unwrap().data(), &[1.0, -2.5, 3.0, 0.125]);
        assert!(matches!(back.get(9), Err(Error::NotFound(_))));
        assert!(FeatureCache::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(FeatureCache::read_from(extra.as_slice()).is_err());
        bytes[0] = b'X';
        assert!(FeatureCache::read_from(bytes.as_slice()).is_err());
        assert_eq!(fmap_path(Path::new("/a/codes.db")), PathBuf::from("/a/codes.db.fmaps"));
    }

    #[test]
    fn window_codes_match_single_window_path() {
        let model = small_model();
        let d = tempfile::tempdir().unwrap();
        let m = small_data(d.path(), 1);
        let set = LoadedSet::load(&m).unwrap();
        let fmap = model.extract_local_feature_map(&set.batch(&[0]).unwrap(), 0.0).unwrap();
        let wins = [
            FeatureBox { row: 0, col: 0, height: 3, width: 2 },
            FeatureBox { row: 5, col: 6, height: 3, width: 2 },
        ];
        let batched = model.window_codes(&fmap, &wins).unwrap();
        for (i, w) in wins.iter().enumerate() {
            let single = model.local_window_codes(&fmap, *w).unwrap();
            assert_eq!(&batched.data()[i * 16..(i + 1) * 16], single.data());
        }
        let mixed = [wins[0], FeatureBox { row: 0, col: 0, height: 2, width: 2 }];
        assert!(model.window_codes(&fmap, &mixed).is_err());
        assert!(model.window_codes(&fmap, &[]).is_err());
    }

    #[test]
    fn build_save_load_and_query() {
        let model = small_model();
        let d = tempfile::tempdir().unwrap();
        let m = small_data(d.path(), 2);
        let index = Index::build(&model, &m, 0.0).unwrap();
        assert_eq!(index.len(), 16);
        let db = d.path().join("codes.db");
        index.save(&db).unwrap();
        let again = Index::build(&model, &m, 0.0).unwrap();
        again.save(d.path().join("codes2.db")).unwrap();
        assert_eq!(fs::read(&db).unwrap(), fs::read(d.path().join("codes2.db")).unwrap());
        let loaded = Index::load(&db, m.clone(), 0.0).unwrap();
        assert_eq!(loaded.codes, index.codes);
        assert_eq!(loaded.fmaps, index.fmaps);

        let set = LoadedSet::load(&m).unwrap();
        assert_eq!(encode_set(&model, &set).unwrap(), index.codes);
        for row in [0usize, 5, 11] {
            let img = Tensor::new(vec![1, 32, 32], set.pixels(row).to_vec()).unwrap();
            let id = set.entries[row].id;
            let g = loaded.query_global(&model, &img, 3).unwrap();
            assert_eq!(g.results.len(), 3);
            assert_eq!(g.results[0].distance, 0);
            assert!(g.results.iter().any(|r| r.id == id && r.distance == 0));

            let bbox = set.entries[row].r#box.unwrap();
            let l = loaded.query_local(&model, &img, bbox, 16, 5).unwrap();
            assert_eq!(l.results.len(), 5);
            let own = l.results.iter().find(|r| r.id == id).expect("self among local results");
            assert_eq!(own.distance, 0);
            // earlier origins may tie at 0 on an untrained model
            let win = own.window.unwrap();
            assert_eq!((win.pixel_box.width(), win.pixel_box.height()), (bbox.width(), bbox.height()));
            assert!(win.origin <= (bbox.y1 / 4, bbox.x1 / 4));
            assert!(l.results.windows(2).all(|w| (w[0].distance, w[0].id) < (w[1].distance, w[1].id)));
            for r in &l.results {
                r.window.unwrap().pixel_box.check_within(32, 32).unwrap();
            }
            let by_id = loaded.query_local_by_id(&model, id, bbox, 16, 5).unwrap();
            assert_eq!(by_id, l);
        }
        let img = Tensor::new(vec![1, 32, 32], set.pixels(0).to_vec()).unwrap();
        let clamped = loaded.query_local(&model, &img, BoundingBox::full(32, 32), 4, 10).unwrap();
        assert_eq!(clamped.results.len(), 4);
        assert!(clamped.results.iter().all(|r| r.window.unwrap().origin == (0, 0)));
        assert!(loaded.query_global(&model, &Tensor::zeros(&[1, 16, 16]), 3).is_err());
        assert!(loaded.query_local(&model, &img, BoundingBox::new(0, 0, 40, 8).unwrap(), 3, 1).is_err());
        assert!(matches!(loaded.query_local_by_id(&model, 999, BoundingBox::full(8, 8), 3, 1), Err(Error::NotFound(_))));
    }

    #[test]
    fn empty_manifest_gives_empty_index() {
        let model = small_model();
        let m = Manifest::new(Vec::new(), "").unwrap();
        let index = Index::build(&model, &m, 0.0).unwrap();
        assert!(index.is_empty());
        let img = Tensor::zeros(&[1, 32, 32]);
        assert!(index.query_global(&model, &img, 1).is_err());
    }
}
