//! Synthetic planted-motif images, JSON-lines manifests and stratified splits.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};
use crate::numerics::Tensor;
use crate::retrieval::BoundingBox;

pub const MOTIFS: [&str; 8] = [
    "disk",
    "ring",
    "cross",
    "bar",
    "blob",
    "corner-wedge",
    "double-dot",
    "grid-patch",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub motif_min: usize,
    pub motif_max: usize,
    pub motif_amplitude: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            images_per_class: 200,
            image_size: 64,
            noise_sigma: 0.04,
            motif_min: 14,
            motif_max: 24,
            motif_amplitude: 0.6,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MOTIFS.len() {
            return domain_err(format!("num_classes must be in 1..={}", MOTIFS.len()));
        }
        if self.motif_min < 4 || self.motif_min > self.motif_max || self.motif_max > self.image_size {
            return domain_err(format!(
                "motif size range {}..={} invalid for {} px images",
                self.motif_min, self.motif_max, self.image_size
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.motif_amplitude > 0.0) {
            return domain_err("noise sigma must be ≥ 0 and amplitude > 0");
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.num_classes * self.images_per_class
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub label: usize,
    pub r#box: Option<BoundingBox>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id) {
                return domain_err(format!("duplicate image id {}", e.id));
            }
        }
        Ok(Manifest {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn get(&self, id: u64) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path)
            .map_err(|e| Error::NotFound(format!("manifest {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|err| Error::Format(format!("{} line {}: {err}", path.display(), n + 1)))?;
            entries.push(e);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(entries, base)
    }

    /// Writes one JSON object per line; paths are written as stored.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    /// Same entries with paths rewritten relative to `new_base` when possible.
    pub fn rebased(&self, new_base: &Path) -> Manifest {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let abs = self.resolve(e);
                let path = abs
                    .strip_prefix(new_base)
                    .map(|p| p.to_string_lossy().into_owned())
                    .unwrap_or_else(|_| abs.to_string_lossy().into_owned());
                ManifestEntry { path, ..e.clone() }
            })
            .collect();
        Manifest {
            entries,
            base_dir: new_base.to_path_buf(),
        }
    }
}

/// Smooth background: a mean level plus a few low-frequency cosines.
fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let level = rng.random_range(0.2..0.3);
    let s = size as f64;
    let mut out = vec![level; size * size];
    for y in 0..size {
        for x in 0..size {
            for &(fx, fy, ph, amp) in &waves {
                let t = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / s + ph;
                out[y * size + x] += amp * t.cos();
            }
        }
    }
    out
}

/// Coverage of motif `class` at local coordinates `(u, v) ∈ [0, 1)²`.
fn motif_mask(class: usize, u: f64, v: f64) -> f64 {
    let (du, dv) = (u - 0.5, v - 0.5);
    let r = (du * du + dv * dv).sqrt();
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    match class {
        0 => on(r < 0.5),
        1 => on((0.3..0.5).contains(&r)),
        2 => on(du.abs() < 0.15 || dv.abs() < 0.15),
        3 => on(dv.abs() < 0.2),
        4 => (-(r * r) / 0.06).exp(),
        5 => on(u + v < 1.0),
        6 => {
            let d1 = ((u - 0.27).powi(2) + (v - 0.27).powi(2)).sqrt();
            let d2 = ((u - 0.73).powi(2) + (v - 0.73).powi(2)).sqrt();
            on(d1 < 0.22 || d2 < 0.22)
        }
        _ => on(((u * 4.0) as usize + (v * 4.0) as usize) % 2 == 0),
    }
}

/// One synthetic image: pixel values in `[0, 1]` and its motif box.
pub fn render(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, BoundingBox) {
    let n = spec.image_size;
    let mut px = background(rng, n);
    let side = rng.random_range(spec.motif_min..=spec.motif_max);
    let x1 = rng.random_range(0..=n - side);
    let y1 = rng.random_range(0..=n - side);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = ((x as f64 + 0.5) / side as f64, (y as f64 + 0.5) / side as f64);
            px[(y1 + y) * n + x1 + x] += spec.motif_amplitude * motif_mask(class, u, v);
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        px.iter_mut().for_each(|p| *p += noise.sample(rng));
    }
    px.iter_mut().for_each(|p| *p = (*p * 255.0).round().clamp(0.0, 255.0) / 255.0);
    let bbox = BoundingBox::new(x1, y1, x1 + side, y1 + side).expect("motif fits the image");
    (px, bbox)
}

/// Per-image generator stream, independent of generation order.
pub fn image_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn to_gray_image(px: &[f64], side: usize) -> GrayImage {
    GrayImage::from_fn(side as u32, side as u32, |x, y| {
        Luma([(px[y as usize * side + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

/// Writes `images/NNNNN.png` and `manifest.jsonl` under `out_dir`; labels cycle
/// through the classes so counts are exactly balanced.
pub fn generate(spec: &SyntheticSpec, seed: u64, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("images"))?;
    let mut entries = Vec::with_capacity(spec.total());
    for id in 0..spec.total() as u64 {
        let label = id as usize % spec.num_classes;
        let mut rng = image_rng(seed, id);
        let (px, bbox) = render(spec, label, &mut rng);
        let rel = format!("images/{id:05}.png");
        to_gray_image(&px, spec.image_size).save(out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            id,
            path: rel,
            label,
            r#box: Some(bbox),
        });
    }
    let manifest = Manifest::new(entries, out_dir)?;
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Stratified split by class into (train, val, test); per-class counts are
/// rounded, the test split takes the remainder. Entries keep ascending id order.
pub fn split(manifest: &Manifest, ratios: (f64, f64, f64), seed: u64) -> Result<(Manifest, Manifest, Manifest)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return domain_err(format!("split ratios {ratios:?} must be non-negative and sum to 1"));
    }
    let mut by_class: BTreeMap<usize, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        by_class.entry(e.label).or_default().push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (_, mut group) in by_class {
        group.sort_by_key(|e| e.id);
        group.shuffle(&mut rng);
        let n = group.len() as f64;
        let n_tr = (a * n).round() as usize;
        let n_va = ((b * n).round() as usize).min(group.len() - n_tr);
        for (k, e) in group.into_iter().enumerate() {
            let dst = if k < n_tr {
                &mut tr
            } else if k < n_tr + n_va {
                &mut va
            } else {
                &mut te
            };
            dst.push(e.clone());
        }
    }
    let finish = |mut v: Vec<ManifestEntry>| {
        v.sort_by_key(|e| e.id);
        Manifest::new(v, manifest.base_dir.clone())
    };
    Ok((finish(tr)?, finish(va)?, finish(te)?))
}

/// Grayscale image as `[1, H, W]` with values in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Tensor::new(vec![1, h as usize, w as usize], data)
}

/// Decoded grayscale image from in-memory bytes, `[1, H, W]` in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Tensor::new(vec![1, h as usize, w as usize], data)
}

/// Manifest entries with their decoded pixels held in memory.
#[derive(Clone, Debug)]
pub struct LoadedSet {
    pub entries: Vec<ManifestEntry>,
    pub side: usize,
    pixels: Vec<Vec<f64>>,
}

impl LoadedSet {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let mut pixels = Vec::with_capacity(manifest.len());
        let mut side = 0;
        for e in &manifest.entries {
            let t = load_image(manifest.resolve(e))?;
            let s = t.shape();
            if s[1] != s[2] || (side != 0 && s[1] != side) {
                return Err(Error::Shape(format!(
                    "image {} is {}x{}; all images must share one square size",
                    e.id, s[2], s[1]
                )));
            }
            side = s[1];
            pixels.push(t.into_data());
        }
        Ok(LoadedSet {
            entries: manifest.entries.clone(),
            side,
            pixels,
        })
    }

    pub fn from_parts(entries: Vec<ManifestEntry>, side: usize, pixels: Vec<Vec<f64>>) -> Result<Self> {
        if entries.len() != pixels.len() || pixels.iter().any(|p| p.len() != side * side) {
            return Err(Error::Shape("entries and pixel rasters disagree".into()));
        }
        Ok(LoadedSet { entries, side, pixels })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        &self.pixels[i]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// `[N, 1, side, side]` batch of the given rows.
    pub fn batch(&self, rows: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.side * self.side);
        for &r in rows {
            data.extend_from_slice(&self.pixels[r]);
        }
        Tensor::new(vec![rows.len(), 1, self.side, self.side], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::visual_similarity;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            images_per_class: 4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = generate(&small_spec(), 7, d1.path()).unwrap();
        generate(&small_spec(), 7, d2.path()).unwrap();
        assert_eq!(
            fs::read(d1.path().join("manifest.jsonl")).unwrap(),
            fs::read(d2.path().join("manifest.jsonl")).unwrap()
        );
        for e in &m1.entries {
            assert_eq!(fs::read(d1.path().join(&e.path)).unwrap(), fs::read(d2.path().join(&e.path)).unwrap());
            let b = e.r#box.unwrap();
            b.check_within(64, 64).unwrap();
        }
        let mut counts = [0; 8];
        m1.entries.iter().for_each(|e| counts[e.label] += 1);
        assert!(counts.iter().all(|&c| c == 4));

        let d3 = tempfile::tempdir().unwrap();
        generate(&small_spec(), 8, d3.path()).unwrap();
        assert_ne!(
            fs::read(d1.path().join("images/00000.png")).unwrap(),
            fs::read(d3.path().join("images/00000.png")).unwrap()
        );
    }

    #[test]
    fn manifest_round_trip_and_relative_paths() {
        let d = tempfile::tempdir().unwrap();
        let m = generate(&small_spec(), 1, d.path()).unwrap();
        let loaded = Manifest::load(d.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.entries, m.entries);
        let line = fs::read_to_string(d.path().join("manifest.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(first["path"], "images/00000.png");
        assert!(first["box"].is_array());
        assert!(loaded.resolve(&loaded.entries[0]).exists());

        fs::write(d.path().join("dup.jsonl"), format!("{}\n{}\n", line.lines().next().unwrap(), line.lines().next().unwrap())).unwrap();
        assert!(Manifest::load(d.path().join("dup.jsonl")).is_err());
        fs::write(d.path().join("bad.jsonl"), "{\"id\": 1}\n").unwrap();
        assert!(matches!(Manifest::load(d.path().join("bad.jsonl")), Err(Error::Format(_))));
    }

    #[test]
    fn motif_contrast_exceeds_three_sigma() {
        let spec = SyntheticSpec::default();
        let mut total = 0.0;
        let n = 80;
        for id in 0..n {
            let (px, b) = render(&spec, id as usize % 8, &mut image_rng(3, id));
            let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
            for y in 0..64 {
                for x in 0..64 {
                    if (b.x1..b.x2).contains(&x) && (b.y1..b.y2).contains(&y) {
                        inside += px[y * 64 + x];
                        ni += 1;
                    } else {
                        outside += px[y * 64 + x];
                        no += 1;
                    }
                }
            }
            total += inside / ni as f64 - outside / no as f64;
        }
        let mean_diff = total / n as f64;
        assert!(mean_diff >= 3.0 * spec.noise_sigma, "mean contrast {mean_diff}");
    }

    fn entries(n: usize, classes: usize) -> Manifest {
        let e = (0..n as u64)
            .map(|id| ManifestEntry {
                id,
                path: format!("{id}.png"),
                label: id as usize % classes,
                r#box: None,
            })
            .collect();
        Manifest::new(e, "").unwrap()
    }

    #[test]
    fn split_properties() {
        let m = entries(100, 4);
        let (tr, va, te) = split(&m, (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (100, 0, 0));

        let (tr, va, te) = split(&m, (0.7, 0.2, 0.1), 1).unwrap();
        let mut all: Vec<u64> = tr.entries.iter().chain(&va.entries).chain(&te.entries).map(|e| e.id).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for (part, ratio) in [(&tr, 0.7), (&va, 0.2), (&te, 0.1)] {
            for class in 0..4 {
                let c = part.entries.iter().filter(|e| e.label == class).count() as f64;
                assert!((c - 25.0 * ratio).abs() <= 1.0, "class {class}: {c} vs {}", 25.0 * ratio);
            }
        }
        assert_eq!(split(&m, (0.7, 0.2, 0.1), 1).unwrap().0, tr);
        assert!(split(&m, (0.7, 0.2, 0.2), 1).is_err());
    }

    #[test]
    fn load_image_values() {
        let d = tempfile::tempdir().unwrap();
        let black = d.path().join("black.png");
        GrayImage::from_pixel(3, 2, Luma([0])).save(&black).unwrap();
        assert!(load_image(&black).unwrap().data().iter().all(|&v| v == 0.0));
        let white = d.path().join("white.png");
        GrayImage::from_pixel(3, 2, Luma([255])).save(&white).unwrap();
        let w = load_image(&white).unwrap();
        assert_eq!(w.shape(), &[1, 2, 3]);
        assert!(w.data().iter().all(|&v| v == 1.0));
        let hand = d.path().join("hand.png");
        GrayImage::from_raw(2, 2, vec![0, 51, 102, 255]).unwrap().save(&hand).unwrap();
        assert_eq!(load_image(&hand).unwrap().data(), &[0.0, 0.2, 0.4, 1.0]);
        assert!(load_image(d.path().join("missing.png")).is_err());
    }

    #[test]
    fn similarity_separates_classes() {
        let spec = SyntheticSpec::default();
        let imgs: Vec<(Vec<f64>, usize)> = (0..50u64)
            .map(|id| (render(&spec, id as usize % 8, &mut image_rng(11, id)).0, id as usize % 8))
            .collect();
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                let s = visual_similarity(&imgs[i].0, &imgs[j].0, 64).unwrap();
                if imgs[i].1 == imgs[j].1 {
                    within += s;
                    nw += 1;
                } else {
                    between += s;
                    nb += 1;
                }
            }
        }
        let (w, b) = (within / nw as f64, between / nb as f64);
        assert!(w > b, "within {w} between {b}");
    }
}
