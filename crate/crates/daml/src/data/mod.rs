//! Dataset model: sample metadata, Market-style ingestion, synthetic
//! two-domain generation, identity-balanced batch sampling, augmentation.

mod augment;
mod image_buf;
mod market;
mod sampler;
mod synthetic;

pub use augment::{augment, erase_random_rect, flip_horizontal, pad_random_crop, AugmentPolicy};
pub use image_buf::Image;
pub use market::{load_market_root, parse_market_filename, MarketSplits};
pub use sampler::{pk_sample, ClassAssignment, PkSampler};
pub use synthetic::{
    generate_benchmark, generate_synthetic_domains, load_dataset_dir, save_dataset_dir,
    SyntheticSpec, TwoDomainBenchmark,
};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the adaptation the sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// Where the pixels of a sample come from.
#[derive(Debug, Clone)]
pub enum ImageRef {
    Path(PathBuf),
    Buffer(Arc<Image>),
}

/// One sample: identity, camera, domain and an image reference.
///
/// `person_id == -1` marks a distractor. For the unlabeled target split the
/// person id is retained only as hidden ground truth for test oracles; the
/// training loop never reads it.
#[derive(Debug, Clone)]
pub struct SampleMeta {
    pub sample_id: usize,
    pub person_id: i32,
    pub camera_id: u32,
    pub domain: Domain,
    pub image: ImageRef,
}

impl SampleMeta {
    pub fn is_distractor(&self) -> bool {
        self.person_id == -1
    }
}

/// An ordered, immutable collection of samples with an identity index over
/// the non-distractor entries.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<SampleMeta>,
    identity_index: BTreeMap<i32, Vec<usize>>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<SampleMeta>) -> Self {
        let mut identity_index: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if !s.is_distractor() {
                identity_index.entry(s.person_id).or_default().push(i);
            }
        }
        Self {
            samples,
            identity_index,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[SampleMeta] {
        &self.samples
    }

    pub fn get(&self, idx: usize) -> &SampleMeta {
        &self.samples[idx]
    }

    /// Map person_id -> sample indices, non-distractors only.
    pub fn identity_index(&self) -> &BTreeMap<i32, Vec<usize>> {
        &self.identity_index
    }

    /// Sorted distinct non-distractor person ids.
    pub fn person_ids(&self) -> Vec<i32> {
        self.identity_index.keys().copied().collect()
    }

    pub fn num_identities(&self) -> usize {
        self.identity_index.len()
    }

    /// Decode (or copy) the image of sample `idx` at the requested size.
    pub fn load_image(&self, idx: usize, size: (usize, usize)) -> Result<Image> {
        match &self.samples[idx].image {
            ImageRef::Buffer(img) => Ok(img.resized(size)),
            ImageRef::Path(p) => {
                let img = Image::open(p)?;
                Ok(img.resized(size))
            }
        }
    }

    /// Decode every image once at `size`, returning a dataset backed by
    /// in-memory buffers. Order and metadata are preserved.
    pub fn materialize(&self, size: (usize, usize)) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(SampleMeta {
                    image: ImageRef::Buffer(Arc::new(self.load_image(i, size)?)),
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::from_samples(samples))
    }

    /// Ground-truth class assignment: sorted person ids map to classes
    /// 0..C-1; distractors stay unlabeled.
    pub fn ground_truth_assignment(&self) -> ClassAssignment {
        let pids = self.person_ids();
        let pid_to_class: BTreeMap<i32, usize> =
            pids.iter().enumerate().map(|(c, &p)| (p, c)).collect();
        let labels = self
            .samples
            .iter()
            .map(|s| {
                if s.is_distractor() {
                    None
                } else {
                    Some(pid_to_class[&s.person_id])
                }
            })
            .collect();
        ClassAssignment::new(labels, pids.len())
    }

    /// Indices of every non-distractor sample.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| !self.samples[i].is_distractor())
            .collect()
    }
}

/// Reject non-positive counts on user-provided dataset configuration.
pub(crate) fn require_positive(value: usize, what: &str) -> Result<()> {
    if value == 0 {
        return Err(Error::InvalidConfig(format!("{what} must be positive")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: usize, pid: i32, cam: u32) -> SampleMeta {
        SampleMeta {
            sample_id: id,
            person_id: pid,
            camera_id: cam,
            domain: Domain::Source,
            image: ImageRef::Buffer(Arc::new(Image::zeros((4, 4)))),
        }
    }

    #[test]
    fn identity_index_covers_exactly_non_distractors() {
        let ds = Dataset::from_samples(vec![
            meta(0, 5, 1),
            meta(1, -1, 2),
            meta(2, 5, 3),
            meta(3, 7, 1),
        ]);
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.num_identities(), 2);
        assert_eq!(ds.identity_index()[&5], vec![0, 2]);
        assert_eq!(ds.identity_index()[&7], vec![3]);
        assert!(!ds.identity_index().contains_key(&-1));
        assert_eq!(ds.trainable_indices(), vec![0, 2, 3]);
    }

    #[test]
    fn ground_truth_assignment_orders_by_person_id() {
        let ds = Dataset::from_samples(vec![meta(0, 9, 1), meta(1, 3, 1), meta(2, -1, 1)]);
        let assign = ds.ground_truth_assignment();
        assert_eq!(assign.num_classes, 2);
        assert_eq!(assign.labels, vec![Some(1), Some(0), None]);
    }
}
