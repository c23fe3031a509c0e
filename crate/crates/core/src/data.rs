//! Datasets: CIFAR binary files, synthetic glyphs and tensor files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Bytes per record: label byte(s) then the three colour planes.
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    /// Standard file names inside the extracted archive.
    fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarVariant::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (CifarVariant::Cifar100, Split::Train) => vec!["train.bin"],
            (CifarVariant::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }

    fn archive_dir(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar-10-batches-bin",
            CifarVariant::Cifar100 => "cifar-100-binary",
        }
    }
}

impl FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            _ => Err(Error::invalid(format!("unknown CIFAR variant '{s}'"))),
        }
    }
}

/// One undecoded CIFAR record. `pixels` holds the R, G and B planes, each
/// 32×32 row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub coarse: Option<u8>,
    pub label: u8,
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    pub fn decode(bytes: &[u8], variant: CifarVariant) -> Result<Self> {
        if bytes.len() != variant.record_len() {
            return Err(Error::invalid(format!(
                "record of {} bytes, {variant:?} needs {}",
                bytes.len(),
                variant.record_len()
            )));
        }
        let (coarse, label, pixels) = match variant {
            CifarVariant::Cifar10 => (None, bytes[0], &bytes[1..]),
            CifarVariant::Cifar100 => (Some(bytes[0]), bytes[1], &bytes[2..]),
        };
        Ok(CifarRecord {
            coarse,
            label,
            pixels: pixels.to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + self.pixels.len());
        out.extend(self.coarse);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Interleaves the planes into HWC order, scaled to [0, 1].
    pub fn to_hwc(&self) -> Vec<f32> {
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        let mut out = vec![0.0; CIFAR_PIXELS];
        for p in 0..plane {
            for c in 0..3 {
                out[p * 3 + c] = self.pixels[c * plane + p] as f32 / 255.0;
            }
        }
        out
    }

    /// Inverse of [`to_hwc`](Self::to_hwc) for values on the 1/255 lattice.
    pub fn from_hwc(coarse: Option<u8>, label: u8, hwc: &[f32]) -> Self {
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        let mut pixels = vec![0u8; CIFAR_PIXELS];
        for p in 0..plane {
            for c in 0..3 {
                pixels[c * plane + p] = (hwc[p * 3 + c] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        CifarRecord {
            coarse,
            label,
            pixels,
        }
    }
}

/// Number of records in a CIFAR file, from its size alone.
pub fn count_cifar_records(path: &Path, variant: CifarVariant) -> Result<usize> {
    let len = fs::metadata(path)?.len() as usize;
    let rec = variant.record_len();
    if !len.is_multiple_of(rec) {
        return Err(Error::format(
            path,
            format!("truncated: {len} bytes is not a multiple of the {rec}-byte record"),
        ));
    }
    Ok(len / rec)
}

/// Parses every record in `bytes`, checking label ranges.
pub fn decode_cifar_bytes(bytes: &[u8], variant: CifarVariant, origin: &Path) -> Result<Vec<CifarRecord>> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::format(
            origin,
            format!(
                "truncated: {} bytes is not a multiple of the {rec}-byte record",
                bytes.len()
            ),
        ));
    }
    bytes
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, chunk)| {
            let r = CifarRecord::decode(chunk, variant)?;
            if r.label as usize >= variant.num_classes() {
                return Err(Error::format(
                    origin,
                    format!("record {i}: label {} out of range", r.label),
                ));
            }
            if r.coarse.is_some_and(|c| c >= 20) {
                return Err(Error::format(
                    origin,
                    format!("record {i}: coarse label {} out of range", r.coarse.unwrap_or(0)),
                ));
            }
            Ok(r)
        })
        .collect()
}

fn cifar_files(path: &Path, variant: CifarVariant, split: Split) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let nested = path.join(variant.archive_dir());
    let root = if nested.is_dir() { nested } else { path.to_path_buf() };
    let files: Vec<PathBuf> = variant.files(split).iter().map(|f| root.join(f)).collect();
    if let Some(missing) = files.iter().find(|f| !f.is_file()) {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}: CIFAR file not found", missing.display()),
        )));
    }
    Ok(files)
}

/// Loads a CIFAR split. `path` is either one binary file or a directory
/// holding the standard file names (optionally inside the archive folder).
pub fn load_cifar(path: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in cifar_files(path, variant, split)? {
        let bytes = fs::read(&file)?;
        for r in decode_cifar_bytes(&bytes, variant, &file)? {
            images.extend(r.to_hwc());
            labels.push(r.label as usize);
        }
    }
    let dims = Dims::new(labels.len(), CIFAR_SIDE, CIFAR_SIDE, 3);
    Dataset::new(Tensor4::from_vec(dims, images)?, labels, variant.num_classes(), split)
}

/// Per-channel affine normalization `(v − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population statistics per channel; near-constant channels get std 1.
    pub fn compute(images: &Tensor4) -> Self {
        let c = images.dims().channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for px in images.data().chunks_exact(c.max(1)) {
            for (k, &v) in px.iter().enumerate() {
                sum[k] += v as f64;
                sq[k] += v as f64 * v as f64;
            }
        }
        let n = (images.len() / c.max(1)).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n - m * m).max(0.0).sqrt();
                if s < 1e-6 {
                    1.0
                } else {
                    s as f32
                }
            })
            .collect();
        Normalization {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, x: &mut Tensor4) {
        let c = self.mean.len();
        for px in x.data_mut().chunks_exact_mut(c) {
            for (k, v) in px.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
    }
}

/// Images in [0, 1] with integer labels. Normalization is applied per batch
/// so augmentation sees raw pixels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

impl Dataset {
    /// Validates labels and finiteness and computes normalization from the
    /// images themselves.
    pub fn new(images: Tensor4, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if labels.len() != images.dims().rows {
            return Err(Error::invalid(format!(
                "{} labels for {} images",
                labels.len(),
                images.dims().rows
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !images.is_finite() {
            return Err(Error::NonFinite { op: "dataset" });
        }
        let normalization = Normalization::compute(&images);
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
            normalization,
        })
    }

    pub fn with_normalization(mut self, n: Normalization) -> Self {
        self.normalization = n;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(height, width, channels)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let d = self.images.dims();
        (d.height, d.width, d.channels)
    }

    /// Raw images and labels at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.len();
        let c = self.images.dims().channels;
        let labels = Tensor4::from_vec(
            Dims::new(n, 1, 1, 1),
            self.labels.iter().map(|&l| l as f32).collect(),
        )?;
        let meta = Tensor4::from_vec(
            Dims::new(1, 1, 1, 2),
            vec![
                self.num_classes as f32,
                match self.split {
                    Split::Train => 0.0,
                    Split::Test => 1.0,
                },
            ],
        )?;
        let mean = Tensor4::from_vec(Dims::new(1, 1, 1, c), self.normalization.mean.clone())?;
        let std = Tensor4::from_vec(Dims::new(1, 1, 1, c), self.normalization.std.clone())?;
        checkpoint::write_tensors(
            path,
            [
                ("images", &self.images),
                ("labels", &labels),
                ("meta", &meta),
                ("norm_mean", &mean),
                ("norm_std", &std),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut records = checkpoint::read_tensors(path)?;
        let mut take = |name: &str| -> Result<Tensor4> {
            let i = records
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::format(path, format!("missing tensor '{name}'")))?;
            Ok(records.swap_remove(i).1)
        };
        let images = take("images")?;
        let labels = take("labels")?;
        let meta = take("meta")?;
        let mean = take("norm_mean")?;
        let std = take("norm_std")?;
        if meta.len() != 2 || labels.len() != images.dims().rows {
            return Err(Error::format(path, "inconsistent dataset metadata"));
        }
        let labels = labels
            .data()
            .iter()
            .map(|&l| {
                if l >= 0.0 && l.fract() == 0.0 {
                    Ok(l as usize)
                } else {
                    Err(Error::format(path, format!("label {l} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let split = if meta.data()[1] == 0.0 { Split::Train } else { Split::Test };
        let ds = Dataset::new(images, labels, meta.data()[0] as usize, split)?;
        Ok(ds.with_normalization(Normalization {
            mean: mean.into_data(),
            std: std.into_data(),
        }))
    }
}

/// Loads `dir/<split>.brnet`, the stand-in for pre-decoded image folders.
pub fn load_tensor_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let mut ds = Dataset::load(&dir.join(format!("{split}.brnet")))?;
    ds.split = split;
    Ok(ds)
}

/// Class-balanced subsample of `per_class` images per class, in original
/// order. Normalization is recomputed for the subset.
pub fn subset(ds: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(per_class * ds.num_classes);
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < per_class {
            return Err(Error::invalid(format!(
                "class {class} has {} images, {per_class} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..per_class]);
    }
    keep.sort_unstable();
    let (images, labels) = ds.batch(&keep);
    Dataset::new(images, labels, ds.num_classes, ds.split)
}

/// Glyph placement and colours for one synthetic image, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphParams {
    pub center_x: f64,
    pub center_y: f64,
    pub extent: f64,
    pub foreground: [f32; 3],
    pub background: [f32; 3],
}

impl GlyphParams {
    fn random(size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        let extent = s * rng.random_range(0.55..0.8);
        let slack = (s - extent) / 2.0;
        let mut colour = |lo: f32, hi: f32| -> [f32; 3] { std::array::from_fn(|_| rng.random_range(lo..hi)) };
        let foreground = colour(0.55, 1.0);
        let background = colour(0.0, 0.35);
        GlyphParams {
            center_x: s / 2.0 + rng.random_range(-slack..=slack),
            center_y: s / 2.0 + rng.random_range(-slack..=slack),
            extent,
            foreground,
            background,
        }
    }

    /// The same glyph placement reflected about the vertical image axis.
    pub fn mirrored(&self, size: usize) -> Self {
        GlyphParams {
            center_x: size as f64 - self.center_x,
            ..*self
        }
    }
}

/// Shape membership in glyph coordinates, `u` rightwards and `v` downwards
/// in [0, 1]. Every shape differs from its own mirror image.
fn glyph_contains(shape: usize, u: f64, v: f64) -> bool {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return false;
    }
    match shape {
        // L
        0 => (0.1..=0.35).contains(&u) || (v >= 0.7 && (0.1..=0.9).contains(&u) && v <= 0.95),
        // Triangle pointing right.
        1 => (0.1..=0.9).contains(&u) && (v - 0.5).abs() <= 0.45 * (0.9 - u) / 0.8,
        // Flag on a pole.
        2 => (0.1..=0.28).contains(&u) || (u > 0.28 && u <= 0.88 && v <= 0.5),
        // Rising diagonal stroke.
        _ => ((u + v) - 1.0).abs() <= 0.18 && (0.05..=0.95).contains(&u),
    }
}

const SUPERSAMPLE: usize = 4;

/// Renders class `class` as an anti-aliased `size×size×3` HWC image. Class
/// `2j + 1` is the mirror of class `2j`.
pub fn render_glyph(class: usize, p: &GlyphParams, size: usize) -> Vec<f32> {
    let shape = class / 2;
    let mirror = class % 2 == 1;
    let mut out = vec![0.0f32; size * size * 3];
    let k = SUPERSAMPLE as f64;
    for row in 0..size {
        for col in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = col as f64 + (sx as f64 + 0.5) / k;
                    let y = row as f64 + (sy as f64 + 0.5) / k;
                    let mut u = (x - p.center_x) / p.extent + 0.5;
                    let v = (y - p.center_y) / p.extent + 0.5;
                    if mirror {
                        u = 1.0 - u;
                    }
                    hits += glyph_contains(shape, u, v) as usize;
                }
            }
            let cover = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            for c in 0..3 {
                out[(row * size + col) * 3 + c] = p.background[c] + cover * (p.foreground[c] - p.background[c]);
            }
        }
    }
    out
}

/// `n` glyph images with labels cycling through `num_classes` (≤ 8).
pub fn synth_shapes(n: usize, size: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || num_classes > 8 {
        return Err(Error::invalid(format!(
            "synthetic shapes support 1 to 8 classes, got {num_classes}"
        )));
    }
    if size < 4 {
        return Err(Error::invalid(format!("image size {size} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * size * size * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let params = GlyphParams::random(size, &mut rng);
        images.extend(render_glyph(class, &params, size));
        labels.push(class);
    }
    let images = Tensor4::from_vec(Dims::new(n, size, size, 3), images)?;
    Dataset::new(images, labels, num_classes, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::flip_tensor;

    fn fake_cifar(variant: CifarVariant, n: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for _ in 0..n {
            if variant == CifarVariant::Cifar100 {
                out.push(rng.random_range(0..20));
            }
            out.push(rng.random_range(0..variant.num_classes() as u8));
            out.extend((0..CIFAR_PIXELS).map(|_| rng.random::<u8>()));
        }
        out
    }

    #[test]
    fn record_round_trip() {
        for variant in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
            let bytes = fake_cifar(variant, 3, 1);
            let recs = decode_cifar_bytes(&bytes, variant, Path::new("mem")).unwrap();
            assert_eq!(recs.len(), 3);
            let first = &bytes[..variant.record_len()];
            assert_eq!(recs[0].encode(), first);
            let hwc = recs[0].to_hwc();
            assert_eq!(CifarRecord::from_hwc(recs[0].coarse, recs[0].label, &hwc).encode(), first);
        }
    }

    #[test]
    fn plane_order() {
        let mut pixels = vec![0u8; CIFAR_PIXELS];
        pixels[0] = 255; // R at (0, 0)
        pixels[1024 + 33] = 51; // G at (1, 1)
        let r = CifarRecord {
            coarse: None,
            label: 3,
            pixels,
        };
        let hwc = r.to_hwc();
        assert_eq!(hwc[0], 1.0);
        assert_eq!(hwc[(32 + 1) * 3 + 1], 0.2);
    }

    #[test]
    fn loads_files_and_checks_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        fs::write(&path, fake_cifar(CifarVariant::Cifar100, 5, 2)).unwrap();
        let ds = load_cifar(dir.path(), CifarVariant::Cifar100, Split::Train).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.images.dims(), Dims::new(5, 32, 32, 3));
        assert!(ds.labels.iter().all(|&l| l < 100));
        assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(count_cifar_records(&path, CifarVariant::Cifar100).unwrap(), 5);

        let mut bytes = fake_cifar(CifarVariant::Cifar10, 2, 3);
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        let err = load_cifar(&path, CifarVariant::Cifar10, Split::Train).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut bytes = fake_cifar(CifarVariant::Cifar10, 2, 3);
        bytes[CifarVariant::Cifar10.record_len()] = 10;
        fs::write(&path, &bytes).unwrap();
        let err = load_cifar(&path, CifarVariant::Cifar10, Split::Train).unwrap_err();
        assert!(err.to_string().contains("record 1: label 10"), "{err}");

        assert!(load_cifar(dir.path(), CifarVariant::Cifar10, Split::Test).is_err());
    }

    #[test]
    fn full_cifar100_train_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        let f = fs::File::create(&path).unwrap();
        f.set_len(50_000 * 3074).unwrap();
        assert_eq!(count_cifar_records(&path, CifarVariant::Cifar100).unwrap(), 50_000);
        f.set_len(50_000 * 3074 - 1).unwrap();
        assert!(count_cifar_records(&path, CifarVariant::Cifar100).is_err());
    }

    #[test]
    fn normalization_standardizes_train_split() {
        let ds = synth_shapes(64, 12, 8, 5).unwrap();
        let mut x = ds.images.clone();
        ds.normalization.apply(&mut x);
        let back = Normalization::compute(&x);
        for c in 0..3 {
            assert!(back.mean[c].abs() < 1e-3, "{:?}", back.mean);
            assert!((back.std[c] - 1.0).abs() < 1e-2, "{:?}", back.std);
        }
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        let a = synth_shapes(20, 16, 8, 9).unwrap();
        let b = synth_shapes(20, 16, 8, 9).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.images, synth_shapes(20, 16, 8, 10).unwrap().images);
        assert_eq!(a.class_counts(), vec![3, 3, 3, 3, 2, 2, 2, 2]);
        assert!(synth_shapes(4, 16, 9, 0).is_err());
    }

    #[test]
    fn mirror_pairs() {
        let size = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for j in 0..4 {
            let p = GlyphParams::random(size, &mut rng);
            let img = Tensor4::from_vec(Dims::new(1, size, size, 3), render_glyph(2 * j, &p, size)).unwrap();
            let flipped = flip_tensor(&img);
            let q = p.mirrored(size);
            let dist = |class: usize| {
                let other = Tensor4::from_vec(Dims::new(1, size, size, 3), render_glyph(class, &q, size)).unwrap();
                flipped.max_abs_diff(&other)
            };
            assert!(dist(2 * j + 1) < 1e-6, "glyph {j}: {}", dist(2 * j + 1));
            assert!(dist(2 * j) > 0.1, "glyph {j} is mirror symmetric");
        }
    }

    #[test]
    fn subset_is_balanced_and_seeded() {
        let ds = synth_shapes(80, 8, 8, 1).unwrap();
        let s = subset(&ds, 6, 3).unwrap();
        assert_eq!(s.len(), 48);
        assert_eq!(s.class_counts(), vec![6; 8]);
        assert_eq!(s.images, subset(&ds, 6, 3).unwrap().images);
        let full = subset(&ds, 10, 7).unwrap();
        assert_eq!((full.images, full.labels), (ds.images.clone(), ds.labels.clone()));
        assert!(subset(&ds, 11, 0).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = synth_shapes(10, 8, 4, 2).unwrap();
        ds.split = Split::Test;
        ds.save(&dir.path().join("test.brnet")).unwrap();
        let back = load_tensor_dir(dir.path(), Split::Test).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.num_classes, 4);
        assert_eq!(back.normalization, ds.normalization);
    }
}
