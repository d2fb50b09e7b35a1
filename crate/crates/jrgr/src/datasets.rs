//! Dataset ingestion and batch sampling: paired rainy/clean collections,
//! unpaired rainy collections, uniform-with-replacement batch draws with
//! shared crop windows for pairs, and the discriminator history pool.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::imaging::{crop_at, draw_crop_offsets, load_image, ImageTensor};
use crate::rainsynth::{DatasetManifest, MANIFEST_NAME};

// ---------------------------------------------------------------------------
// Samples and collections
// ---------------------------------------------------------------------------

/// A rainy image with its pixel-aligned clean counterpart.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub rainy: ImageTensor,
    pub clean: ImageTensor,
    pub id: String,
}

/// A rainy image without a usable clean counterpart.
#[derive(Debug, Clone)]
pub struct UnpairedSample {
    pub rainy: ImageTensor,
    pub id: String,
}

/// In-memory paired split; sampling draws fresh crops each time.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    samples: Vec<PairedSample>,
    crop: usize,
}

/// In-memory unpaired split.
#[derive(Debug, Clone)]
pub struct UnpairedDataset {
    samples: Vec<UnpairedSample>,
    crop: usize,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    /// Full-resolution samples in load order.
    pub fn samples(&self) -> &[PairedSample] {
        &self.samples
    }

    /// One aligned (rainy, clean) crop pair drawn from sample `index`.
    pub fn crop_pair(&self, index: usize, rng: &mut impl Rng) -> Result<(ImageTensor, ImageTensor)> {
        let s = &self.samples[index];
        let (oy, ox) = draw_crop_offsets(&s.rainy, self.crop, rng)?;
        let rainy = crop_at(&s.rainy, self.crop, self.crop, oy, ox)?;
        let clean = crop_at(&s.clean, self.crop, self.crop, oy, ox)?;
        Ok((rainy, clean))
    }
}

impl UnpairedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Full-resolution samples in load order.
    pub fn samples(&self) -> &[UnpairedSample] {
        &self.samples
    }

    /// One crop drawn from sample `index`.
    pub fn crop_one(&self, index: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
        let s = &self.samples[index];
        let (oy, ox) = draw_crop_offsets(&s.rainy, self.crop, rng)?;
        crop_at(&s.rainy, self.crop, self.crop, oy, ox)
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

fn load_checked(root: &Path, rel: &str) -> Result<ImageTensor> {
    let path = root.join(rel);
    if !path.exists() {
        return Err(Error::Data(format!(
            "dataset references missing file {}",
            path.display()
        )));
    }
    load_image(&path)
}

fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Loads the training splits of a dataset manifest. All images are read
/// eagerly; crops are drawn at sampling time.
pub fn load_dataset(
    manifest_path: impl AsRef<Path>,
    crop: usize,
) -> Result<(PairedDataset, UnpairedDataset)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);

    let mut paired = Vec::with_capacity(manifest.paired.len());
    for entry in &manifest.paired {
        let rainy = load_checked(&root, &entry.rainy)?;
        let clean = load_checked(&root, &entry.clean)?;
        if rainy.shape() != clean.shape() {
            return Err(Error::Data(format!(
                "pair {} has mismatched shapes {:?} vs {:?}",
                entry.id,
                rainy.shape(),
                clean.shape()
            )));
        }
        paired.push(PairedSample {
            rainy,
            clean,
            id: entry.id.clone(),
        });
    }
    let mut unpaired = Vec::with_capacity(manifest.unpaired.len());
    for entry in &manifest.unpaired {
        unpaired.push(UnpairedSample {
            rainy: load_checked(&root, &entry.rainy)?,
            id: entry.id.clone(),
        });
    }
    validate_splits(&paired, &unpaired, crop)?;
    Ok((
        PairedDataset {
            samples: paired,
            crop,
        },
        UnpairedDataset {
            samples: unpaired,
            crop,
        },
    ))
}

/// Loads training splits from a bare directory tree laid out like the dataset
/// builder's output (`paired/{rainy,clean}`, `unpaired/rainy`), pairing files
/// by identical names. Useful for user-supplied data without a manifest.
pub fn load_dataset_dir(
    root: impl AsRef<Path>,
    crop: usize,
) -> Result<(PairedDataset, UnpairedDataset)> {
    let root = root.as_ref();
    let list = |sub: &str| -> Result<Vec<PathBuf>> {
        let dir = root.join(sub);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(dir.clone(), e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        files.sort();
        Ok(files)
    };

    let mut paired = Vec::new();
    for rainy_path in list("paired/rainy")? {
        let name = rainy_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let clean_path = root.join("paired/clean").join(&name);
        if !clean_path.exists() {
            return Err(Error::Data(format!(
                "paired rainy image {} has no clean counterpart {}",
                rainy_path.display(),
                clean_path.display()
            )));
        }
        let rainy = load_image(&rainy_path)?;
        let clean = load_image(&clean_path)?;
        if rainy.shape() != clean.shape() {
            return Err(Error::Data(format!(
                "pair {name} has mismatched shapes {:?} vs {:?}",
                rainy.shape(),
                clean.shape()
            )));
        }
        paired.push(PairedSample {
            rainy,
            clean,
            id: name,
        });
    }
    let mut unpaired = Vec::new();
    for rainy_path in list("unpaired/rainy")? {
        let name = rainy_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        unpaired.push(UnpairedSample {
            rainy: load_image(&rainy_path)?,
            id: name,
        });
    }
    validate_splits(&paired, &unpaired, crop)?;
    Ok((
        PairedDataset {
            samples: paired,
            crop,
        },
        UnpairedDataset {
            samples: unpaired,
            crop,
        },
    ))
}

fn validate_splits(
    paired: &[PairedSample],
    unpaired: &[UnpairedSample],
    crop: usize,
) -> Result<()> {
    if paired.is_empty() {
        return Err(Error::Data("paired split is empty".into()));
    }
    if unpaired.is_empty() {
        return Err(Error::Data("unpaired split is empty".into()));
    }
    if crop == 0 {
        return Err(Error::Validation("crop size must be positive".into()));
    }
    for s in paired {
        if s.rainy.height() < crop || s.rainy.width() < crop {
            return Err(Error::Data(format!(
                "paired sample {} is smaller than crop {crop}",
                s.id
            )));
        }
    }
    for s in unpaired {
        if s.rainy.height() < crop || s.rainy.width() < crop {
            return Err(Error::Data(format!(
                "unpaired sample {} is smaller than crop {crop}",
                s.id
            )));
        }
    }
    Ok(())
}

/// Loads the held-out test pairs of a manifest (full images, no cropping).
pub fn load_test_pairs(manifest_path: impl AsRef<Path>) -> Result<Vec<PairedSample>> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    manifest
        .test
        .iter()
        .map(|entry| {
            Ok(PairedSample {
                rainy: load_checked(&root, &entry.rainy)?,
                clean: load_checked(&root, &entry.clean)?,
                id: entry.id.clone(),
            })
        })
        .collect()
}

/// Loads the unpaired split together with its withheld clean counterparts —
/// evaluation-only ground truth that training never sees.
pub fn load_unpaired_eval_pairs(manifest_path: impl AsRef<Path>) -> Result<Vec<PairedSample>> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    manifest
        .unpaired
        .iter()
        .map(|entry| {
            Ok(PairedSample {
                rainy: load_checked(&root, &entry.rainy)?,
                clean: load_checked(&root, &entry.clean_heldout)?,
                id: entry.id.clone(),
            })
        })
        .collect()
}

/// Convenience: path of the manifest inside a dataset directory.
pub fn manifest_path_in(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(MANIFEST_NAME)
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

/// One training batch: index-aligned synthetic rainy/clean crops plus
/// independent real rainy crops.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub o_s: Vec<ImageTensor>,
    pub b: Vec<ImageTensor>,
    pub o_r: Vec<ImageTensor>,
}

/// Draws `batch` samples uniformly with replacement from each collection.
/// Rainy/clean entries of a pair share one crop window.
pub fn sample_training_batch(
    paired: &PairedDataset,
    unpaired: &UnpairedDataset,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<TrainingBatch> {
    if paired.is_empty() || unpaired.is_empty() {
        return Err(Error::Data("cannot sample from an empty collection".into()));
    }
    if batch == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    let mut o_s = Vec::with_capacity(batch);
    let mut b = Vec::with_capacity(batch);
    let mut o_r = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pi = rng.random_range(0..paired.len());
        let (rainy, clean) = paired.crop_pair(pi, rng)?;
        o_s.push(rainy);
        b.push(clean);
        let ui = rng.random_range(0..unpaired.len());
        o_r.push(unpaired.crop_one(ui, rng)?);
    }
    Ok(TrainingBatch { o_s, b, o_r })
}

// ---------------------------------------------------------------------------
// Discriminator history pool
// ---------------------------------------------------------------------------

pub const POOL_CAPACITY: usize = 50;
pub const POOL_SWAP_PROBABILITY: f64 = 0.5;

/// History pool of previously generated images. While filling it returns the
/// fresh image; at capacity it returns the fresh image with probability 1/2,
/// otherwise a uniformly chosen stored image which the fresh one replaces.
#[derive(Debug, Clone)]
pub struct ImagePool {
    capacity: usize,
    swap_probability: f64,
    buffer: Vec<ImageTensor>,
    rng: ChaCha12Rng,
}

impl ImagePool {
    pub fn new(capacity: usize, rng: ChaCha12Rng) -> Self {
        Self {
            capacity,
            swap_probability: POOL_SWAP_PROBABILITY,
            buffer: Vec::with_capacity(capacity),
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Offers a fresh image; returns the image the discriminator should see.
    pub fn query(&mut self, fresh: ImageTensor) -> ImageTensor {
        if self.capacity == 0 {
            return fresh;
        }
        if self.buffer.len() < self.capacity {
            self.buffer.push(fresh.clone());
            return fresh;
        }
        if self.rng.random::<f64>() < self.swap_probability {
            fresh
        } else {
            let slot = self.rng.random_range(0..self.buffer.len());
            std::mem::replace(&mut self.buffer[slot], fresh)
        }
    }

    /// Queries a whole batch image-by-image.
    pub fn query_batch(&mut self, fresh: Vec<ImageTensor>) -> Vec<ImageTensor> {
        fresh.into_iter().map(|img| self.query(img)).collect()
    }
}

// ---------------------------------------------------------------------------
