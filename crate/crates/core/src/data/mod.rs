//! Image datasets split by class into base and novel groups.

pub mod augment;
pub mod folder;
pub mod synthetic;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{FlatError, Result};
use crate::seed::Rng;
use crate::tensor::Tensor;

pub use augment::{augment, augment_with, sample_crop_flip, CropFlip};
pub use folder::{load_image_folder, save_image_folder, SplitSpec};
pub use synthetic::{generate_synthetic, SyntheticShapesConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    BaseTrain,
    BaseTest,
    NovelTrain,
    NovelTest,
}

impl SplitTag {
    pub fn is_base(self) -> bool {
        matches!(self, SplitTag::BaseTrain | SplitTag::BaseTest)
    }

    pub fn is_train(self) -> bool {
        matches!(self, SplitTag::BaseTrain | SplitTag::NovelTrain)
    }
}

/// Immutable collection of equally sized images in `[0, 1]`.
///
/// Classes `0..n_base` are base classes, the rest are novel. Labels are
/// dense within each group: a novel example of class `n_base + j` has
/// label `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    channels: usize,
    height: usize,
    width: usize,
    images: Vec<Vec<f32>>,
    classes: Vec<usize>,
    splits: Vec<SplitTag>,
    class_names: Vec<String>,
    n_base: usize,
}

impl ImageDataset {
    pub fn new(
        geometry: [usize; 3],
        images: Vec<Vec<f32>>,
        classes: Vec<usize>,
        splits: Vec<SplitTag>,
        class_names: Vec<String>,
        n_base: usize,
    ) -> Result<Self> {
        let [channels, height, width] = geometry;
        let len = channels * height * width;
        if images.len() != classes.len() || images.len() != splits.len() {
            return Err(FlatError::Data("images, classes and split tags differ in length".into()));
        }
        if n_base > class_names.len() {
            return Err(FlatError::Data("more base classes than class names".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &class_names {
            if !seen.insert(name) {
                return Err(FlatError::Data(format!("class `{name}` appears more than once")));
            }
        }
        for (i, ((img, &c), &tag)) in images.iter().zip(&classes).zip(&splits).enumerate() {
            if img.len() != len {
                return Err(FlatError::Data(format!("image {i} has {} values, expected {len}", img.len())));
            }
            if c >= class_names.len() {
                return Err(FlatError::Data(format!("image {i} has unknown class {c}")));
            }
            if tag.is_base() != (c < n_base) {
                return Err(FlatError::Data(format!(
                    "image {i} of class `{}` is tagged {tag:?}",
                    class_names[c]
                )));
            }
            if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(FlatError::Data(format!("image {i} has values outside [0, 1]")));
            }
        }
        Ok(ImageDataset { channels, height, width, images, classes, splits, class_names, n_base })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn geometry(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn n_novel(&self) -> usize {
        self.class_names.len() - self.n_base
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.classes[i]
    }

    pub fn split_of(&self, i: usize) -> SplitTag {
        self.splits[i]
    }

    /// Label within the example's own group.
    pub fn label(&self, i: usize) -> usize {
        let c = self.classes[i];
        if c < self.n_base {
            c
        } else {
            c - self.n_base
        }
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::new(&self.geometry(), self.images[i].clone()).expect("validated geometry")
    }

    /// Stacks the given examples into a `B×C×H×W` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let data = indices.iter().flat_map(|&i| self.images[i].iter().copied()).collect();
        let [c, h, w] = self.geometry();
        Tensor::new(&[indices.len(), c, h, w], data).expect("validated geometry")
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == tag).collect()
    }

    /// Examples of novel class `j` (label `j`) carrying one of `tags`.
    pub fn novel_class_indices(&self, j: usize, tags: &[SplitTag]) -> Vec<usize> {
        let c = self.n_base + j;
        (0..self.len()).filter(|&i| self.classes[i] == c && tags.contains(&self.splits[i])).collect()
    }
}

/// Support draw for every novel class plus the unused novel training pool.
#[derive(Debug, Clone, PartialEq)]
pub struct KShot {
    pub k: usize,
    /// `support[j]` holds the dataset indices for novel label `j`.
    pub support: Vec<Vec<usize>>,
    pub remainder: Vec<usize>,
}

impl KShot {
    pub fn flat_support(&self) -> Vec<(usize, usize)> {
        self.support.iter().enumerate().flat_map(|(j, ix)| ix.iter().map(move |&i| (i, j))).collect()
    }
}

/// Draws `k` training examples per novel class without replacement.
pub fn sample_k_shot(dataset: &ImageDataset, k: usize, rng: &mut Rng) -> Result<KShot> {
    if k == 0 {
        return Err(FlatError::config("finetune.k_shot", "must be at least 1"));
    }
    let mut support = Vec::with_capacity(dataset.n_novel());
    let mut remainder = Vec::new();
    for j in 0..dataset.n_novel() {
        let mut pool = dataset.novel_class_indices(j, &[SplitTag::NovelTrain]);
        if pool.len() < k {
            return Err(FlatError::Data(format!(
                "novel class `{}` has {} training examples, {k} requested",
                dataset.class_names()[dataset.n_base() + j],
                pool.len()
            )));
        }
        pool.shuffle(rng);
        let rest = pool.split_off(k);
        pool.sort_unstable();
        support.push(pool);
        remainder.extend(rest);
    }
    remainder.sort_unstable();
    Ok(KShot { k, support, remainder })
}
