//! Labeled image datasets with disjoint base and novel label spaces.

mod crop;
mod dirload;
mod episode;
mod netpbm;
mod synth;

pub use crop::{random_crop, CROP_FRACTION};
pub use dirload::{load_image_dir, write_image_dir};
pub use episode::{sample_episode, Episode};
pub use netpbm::{emit_netpbm, parse_netpbm, NetpbmError};
pub use synth::{synth_generate, MotifFamily, SynthSpec, ARCHETYPE_POOL};

use std::collections::BTreeSet;
use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Netpbm {
        path: PathBuf,
        #[source]
        source: NetpbmError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing split directory {0}")]
    MissingSplit(PathBuf),
    #[error("split directory {0} contains no images")]
    EmptySplit(PathBuf),
    #[error("requested {requested} classes but only {available} archetypes exist")]
    ArchetypeExhausted { requested: usize, available: usize },
    #[error("novel class `{class}` has {available} pool samples, {needed} needed")]
    InsufficientPool {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Base,
    Novel,
}

/// Images shaped `[C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub label_space: Vec<String>,
    pub role: Role,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_space.len()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Stacks the selected images into an `[N, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let refs: Vec<&Tensor> = indices.iter().map(|&i| &self.images[i]).collect();
        Tensor::stack(&refs).expect("dataset images share a shape")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Sample indices grouped by label.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.label_space.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    fn check(&self, name: &str) -> Result<(), DataError> {
        if self.images.len() != self.labels.len() {
            return Err(DataError::Inconsistent(format!("{name}: image and label counts differ")));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.label_space.len()) {
            return Err(DataError::Inconsistent(format!(
                "{name}: label {bad} outside label space of {}",
                self.label_space.len()
            )));
        }
        if let Some(first) = self.images.first() {
            if self.images.iter().any(|im| im.shape() != first.shape()) {
                return Err(DataError::Inconsistent(format!("{name}: mixed image shapes")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    pub base_train: LabeledDataset,
    pub base_test: LabeledDataset,
    pub novel_train_pool: LabeledDataset,
    pub novel_test: LabeledDataset,
}

impl DatasetPair {
    /// Checks label ranges, shared label spaces per role and base/novel
    /// disjointness.
    pub fn validate(&self) -> Result<(), DataError> {
        self.base_train.check("base/train")?;
        self.base_test.check("base/test")?;
        self.novel_train_pool.check("novel/train")?;
        self.novel_test.check("novel/test")?;
        if self.base_train.label_space != self.base_test.label_space {
            return Err(DataError::Inconsistent("base train/test label spaces differ".into()));
        }
        if self.novel_train_pool.label_space != self.novel_test.label_space {
            return Err(DataError::Inconsistent("novel train/test label spaces differ".into()));
        }
        let base: BTreeSet<_> = self.base_train.label_space.iter().collect();
        if let Some(shared) = self.novel_train_pool.label_space.iter().find(|c| base.contains(c)) {
            return Err(DataError::Inconsistent(format!("class `{shared}` is both base and novel")));
        }
        let shape = self.base_train.image_shape();
        for d in [&self.base_test, &self.novel_train_pool, &self.novel_test] {
            if d.image_shape() != shape {
                return Err(DataError::Inconsistent("image shapes differ across splits".into()));
            }
        }
        Ok(())
    }
}
