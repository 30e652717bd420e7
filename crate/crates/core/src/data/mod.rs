//! Dataset ingestion, in-memory image sets and augmentation pipelines.

pub mod augment;
pub mod image;
pub mod manifest;
pub mod synth;

pub use augment::{supervised_augment, two_view_augment, AugmentMode, AugmentationPolicy};
pub use image::{load_image, Image};
pub use manifest::{load_manifest, ChannelStats, DatasetManifest, ManifestEntry};

use crate::error::{Error, Result};

/// Decoded images with their labels stripped. Phase-1 pre-training only
/// ever receives this type.
#[derive(Debug, Clone)]
pub struct UnlabeledImages {
    images: Vec<Image>,
    stats: ChannelStats,
}

impl UnlabeledImages {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let images: Vec<Image> = manifest.decode().into_iter().map(|(img, _)| img).collect();
        Self::new(images, manifest.stats)
    }

    pub fn new(images: Vec<Image>, stats: ChannelStats) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Validation("no decodable images".into()));
        }
        Ok(Self { images, stats })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Decoded images with class labels.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    images: Vec<Image>,
    labels: Vec<usize>,
    classes: usize,
    stats: ChannelStats,
}

impl LabeledImages {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let (images, labels) = manifest.decode().into_iter().unzip();
        Self::new(images, labels, manifest.class_count(), manifest.stats)
    }

    pub fn new(images: Vec<Image>, labels: Vec<usize>, classes: usize, stats: ChannelStats) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Validation("no decodable images".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            stats,
        })
    }

    /// Uses another split's normalization statistics (typically the training split's).
    pub fn with_stats(mut self, stats: ChannelStats) -> Self {
        self.stats = stats;
        self
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The same images without labels.
    pub fn unlabeled(&self) -> UnlabeledImages {
        UnlabeledImages {
            images: self.images.clone(),
            stats: self.stats,
        }
    }
}
