//! Images, masks, labelled datasets and transfer sets, with their on-disk
//! layouts.
//!
//! A dataset directory holds `images/<id>.png` and `masks/<id>.png`. Masks are
//! 8-bit single-channel images whose pixel values are class indices (0 is
//! background). Images are normalised to `[0, 1]` on load.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng;

/// Height × width × channels image, row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(CoreError::Shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Values clamped to `[0,1]` and quantised to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_u8();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => GrayImage::from_raw(w, h, bytes).map(|b| b.save(path)),
            3 => RgbImage::from_raw(w, h, bytes).map(|b| b.save(path)),
            c => {
                return Err(CoreError::Shape(format!(
                    "cannot write {c}-channel image as png"
                )))
            }
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(CoreError::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            }),
            None => Err(CoreError::Shape("image buffer size mismatch".into())),
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = open_image(path)?;
        match img {
            DynamicImage::ImageLuma8(b) => {
                let (w, h) = b.dimensions();
                Self::from_u8(h as usize, w as usize, 1, b.as_raw())
            }
            other => {
                let b = other.to_rgb8();
                let (w, h) = b.dimensions();
                Self::from_u8(h as usize, w as usize, 3, b.as_raw())
            }
        }
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| CoreError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Class-index mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn max_value(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Binary mask of one class.
    pub fn class_mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .ok_or_else(|| CoreError::Shape("mask buffer size mismatch".into()))?;
        buf.save(path).map_err(|e| CoreError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = open_image(path)?;
        let DynamicImage::ImageLuma8(b) = img else {
            return Err(CoreError::Dataset(format!(
                "mask {} is not an 8-bit single-channel png",
                path.display()
            )));
        };
        let (w, h) = b.dimensions();
        Self::new(h as usize, w as usize, b.into_raw())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Image, mask: Mask) -> Result<Self> {
        if image.height != mask.height || image.width != mask.width {
            return Err(CoreError::Shape(format!(
                "image {}x{} vs mask {}x{}",
                image.height, image.width, mask.height, mask.width
            )));
        }
        if !image.is_finite() {
            return Err(CoreError::Dataset(
                "image contains non-finite values".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<SegmentationSample>,
    class_count: usize,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    /// Builds a dataset, sorting samples by id and validating mask ranges.
    pub fn new(mut samples: Vec<SegmentationSample>, class_count: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::Dataset("dataset is empty".into()));
        }
        if class_count == 0 || class_count > 256 {
            return Err(CoreError::Dataset(format!(
                "invalid class count {class_count}"
            )));
        }
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = BTreeSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(CoreError::Dataset(format!("duplicate sample id {}", s.id)));
            }
            let m = s.mask.max_value() as usize;
            if m >= class_count {
                return Err(CoreError::Dataset(format!(
                    "mask of {} contains value {m} but class count is {class_count}",
                    s.id
                )));
            }
        }
        let class_names = (0..class_count)
            .map(|c| {
                if c == 0 {
                    "background".to_string()
                } else {
                    format!("class{c}")
                }
            })
            .collect();
        Ok(Self {
            samples,
            class_count,
            class_names,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.class_count {
            return Err(CoreError::Dataset(format!(
                "{} class names for {} classes",
                names.len(),
                self.class_count
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn samples(&self) -> &[SegmentationSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn images(&self) -> Vec<Image> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    /// Writes the dataset in the `images/` + `masks/` layout.
    pub fn save(&self, root: &Path) -> Result<()> {
        let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
        for d in [&img_dir, &mask_dir] {
            fs::create_dir_all(d).map_err(|e| CoreError::io(d, e))?;
        }
        for s in &self.samples {
            s.image.save_png(&img_dir.join(format!("{}.png", s.id)))?;
            s.mask.save_png(&mask_dir.join(format!("{}.png", s.id)))?;
        }
        Ok(())
    }
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut out = BTreeSet::new();
    for e in entries {
        let e = e.map_err(|e| CoreError::io(dir, e))?;
        let p = e.path();
        if p.extension().and_then(|s| s.to_str()) == Some("png") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Loads `<root>/images/<id>.png` + `<root>/masks/<id>.png` pairs.
pub fn load_dataset(root: &Path, class_count: usize) -> Result<LabeledDataset> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    let images = png_stems(&img_dir)?;
    let masks = png_stems(&mask_dir)?;
    if let Some(orphan) = images.difference(&masks).next() {
        return Err(CoreError::Dataset(format!(
            "image {} has no mask at {}",
            img_dir.join(format!("{orphan}.png")).display(),
            mask_dir.join(format!("{orphan}.png")).display()
        )));
    }
    if let Some(orphan) = masks.difference(&images).next() {
        return Err(CoreError::Dataset(format!(
            "mask {} has no image",
            mask_dir.join(format!("{orphan}.png")).display()
        )));
    }
    let mut samples = Vec::with_capacity(images.len());
    for id in &images {
        let mask_path = mask_dir.join(format!("{id}.png"));
        let image = Image::load_png(&img_dir.join(format!("{id}.png")))?;
        let mask = Mask::load_png(&mask_path)?;
        let m = mask.max_value() as usize;
        if m >= class_count {
            return Err(CoreError::Dataset(format!(
                "mask {} contains value {m} >= class count {class_count}",
                mask_path.display()
            )));
        }
        samples.push(SegmentationSample::new(id.clone(), image, mask)?);
    }
    LabeledDataset::new(samples, class_count)
}

/// Deterministic label subset: seeded shuffle of the id-sorted samples,
/// then a prefix of length `budget`. Smaller budgets are prefixes of larger
/// ones under the same seed.
pub fn subset_labels(ds: &LabeledDataset, budget: usize, seed: u64) -> Result<LabeledDataset> {
    if budget == 0 || budget > ds.len() {
        return Err(CoreError::Config(format!(
            "label budget {budget} outside 1..={}",
            ds.len()
        )));
    }
    if budget == ds.len() {
        return Ok(ds.clone());
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(seed, "label-subset"));
    let samples = order[..budget]
        .iter()
        .map(|&i| ds.samples[i].clone())
        .collect();
    let mut out = LabeledDataset::new(samples, ds.class_count)?;
    out.class_names = ds.class_names.clone();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Augmented,
    DiffusionSampled,
    /// Concatenation of sets with different provenance.
    Mixed,
}

/// Unlabelled images used for distillation and self-supervised pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSet {
    pub images: Vec<Image>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferManifest {
    pub count: usize,
    pub provenance: Provenance,
    pub seed: u64,
    pub schedule_hash: Option<String>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub files: Vec<String>,
}

impl TransferSet {
    pub fn new(images: Vec<Image>, provenance: Provenance) -> Result<Self> {
        if let Some(first) = images.first() {
            if images.iter().any(|i| !i.same_shape(first)) {
                return Err(CoreError::Shape("transfer images differ in shape".into()));
            }
        }
        Ok(Self { images, provenance })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Concatenates sets in order.
    pub fn combine(parts: Vec<TransferSet>) -> Result<Self> {
        let provs: BTreeSet<_> = parts
            .iter()
            .filter(|p| !p.is_empty())
            .map(|p| format!("{:?}", p.provenance))
            .collect();
        let provenance = match (provs.len(), parts.iter().find(|p| !p.is_empty())) {
            (1, Some(p)) => p.provenance,
            (0, _) => parts
                .first()
                .map_or(Provenance::Augmented, |p| p.provenance),
            _ => Provenance::Mixed,
        };
        Self::new(
            parts.into_iter().flat_map(|p| p.images).collect(),
            provenance,
        )
    }

    /// Returns the first `n` images.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            images: self.images[..n.min(self.images.len())].to_vec(),
            provenance: self.provenance,
        }
    }

    /// Writes `00000.png, 00001.png, …` and `manifest.json` into `dir`.
    pub fn save(
        &self,
        dir: &Path,
        seed: u64,
        schedule_hash: Option<String>,
    ) -> Result<TransferManifest> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let mut files = Vec::with_capacity(self.len());
        for (i, img) in self.images.iter().enumerate() {
            let name = format!("{i:05}.png");
            img.save_png(&dir.join(&name))?;
            files.push(name);
        }
        let (h, w, c) = self.images.first().map_or((0, 0, 0), Image::shape);
        let manifest = TransferManifest {
            count: self.len(),
            provenance: self.provenance,
            seed,
            schedule_hash,
            height: h,
            width: w,
            channels: c,
            files,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, TransferManifest)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let manifest: TransferManifest = serde_json::from_str(&text)
            .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
        let images = manifest
            .files
            .iter()
            .map(|f| Image::load_png(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        if images.len() != manifest.count {
            return Err(CoreError::Dataset(format!(
                "manifest lists {} images, count says {}",
                images.len(),
                manifest.count
            )));
        }
        Ok((Self::new(images, manifest.provenance)?, manifest))
    }
}

/// Path helper for the dataset layout.
pub fn sample_paths(root: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        root.join("images").join(format!("{id}.png")),
        root.join("masks").join(format!("{id}.png")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, v: u8) -> SegmentationSample {
        let image = Image::new(2, 2, 1, vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let mask = Mask::new(2, 2, vec![0, v, 0, 1]).unwrap();
        SegmentationSample::new(id, image, mask).unwrap()
    }

    #[test]
    fn dataset_sorts_and_validates() {
        let ds = LabeledDataset::new(vec![sample("b", 1), sample("a", 1)], 2).unwrap();
        assert_eq!(ds.ids(), vec!["a", "b"]);
        let err = LabeledDataset::new(vec![sample("a", 5)], 4).unwrap_err();
        assert!(err.to_string().contains("value 5"), "{err}");
        assert!(LabeledDataset::new(vec![], 2).is_err());
    }

    #[test]
    fn mismatched_sample_dims_rejected() {
        let image = Image::zeros(2, 3, 1);
        let mask = Mask::zeros(2, 2);
        assert!(SegmentationSample::new("x", image, mask).is_err());
    }

    #[test]
    fn subset_is_prefix_monotone() {
        let samples = (0..10).map(|i| sample(&format!("s{i}"), 1)).collect();
        let ds = LabeledDataset::new(samples, 2).unwrap();
        let a = subset_labels(&ds, 3, 11).unwrap();
        let b = subset_labels(&ds, 4, 11).unwrap();
        for id in a.ids() {
            assert!(b.ids().contains(&id));
        }
        assert!(subset_labels(&ds, 0, 1).is_err());
        assert!(subset_labels(&ds, 11, 1).is_err());
    }

    #[test]
    fn combine_marks_mixed() {
        let img = Image::zeros(2, 2, 1);
        let a = TransferSet::new(vec![img.clone()], Provenance::Augmented).unwrap();
        let b = TransferSet::new(vec![img.clone()], Provenance::DiffusionSampled).unwrap();
        let c = TransferSet::combine(vec![a.clone(), b]).unwrap();
        assert_eq!(c.provenance, Provenance::Mixed);
        assert_eq!(c.len(), 2);
        let d = TransferSet::combine(vec![a.clone(), a]).unwrap();
        assert_eq!(d.provenance, Provenance::Augmented);
    }
}
