//! Multi-label emotion datasets with gender attributes.
//!
//! Samples are immutable and shared through [`Arc`], so filtering and
//! resampling produce new [`Dataset`] values without copying features.

mod io;
mod resample;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_manifest, read_features, write_features, write_manifest, FEATURE_MAGIC};
pub use resample::{
    amplify_bias, compute_reweights, dominant_filter, downsample_balance, ReweightMode,
};
pub use synth::{synth_generate, SynthConfig};

/// Tolerance on the sum of a distributional label.
pub const LABEL_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::F, Gender::M];

    pub fn index(self) -> usize {
        match self {
            Gender::F => 0,
            Gender::M => 1,
        }
    }

    pub fn other(self) -> Gender {
        match self {
            Gender::F => Gender::M,
            Gender::M => Gender::F,
        }
    }

    /// Binary target used by gender predictors: `M` is the positive class.
    pub fn target(self) -> f64 {
        match self {
            Gender::F => 0.0,
            Gender::M => 1.0,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::F => "F",
            Gender::M => "M",
        })
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "F" => Ok(Gender::F),
            "M" => Ok(Gender::M),
            other => Err(Error::Validation(format!("unknown gender tag {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Probability distribution over the emotion categories.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionLabel {
    probs: Vec<f64>,
}

impl EmotionLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Validation(format!(
                "label needs at least 2 categories, got {}",
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Validation(format!(
                "label entry {bad} is not a probability"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > LABEL_SUM_TOL {
            return Err(Error::Validation(format!(
                "label sums to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Category whose mass strictly exceeds 0.5, if any.
    pub fn dominant(&self) -> Option<usize> {
        self.probs.iter().position(|&p| p > 0.5)
    }
}

/// `L × D` block of frozen features for one sample, stored as in the feature
/// file (layer-major, dim-minor).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    layers: usize,
    dims: usize,
    values: Vec<f32>,
}

impl FeatureBlock {
    pub fn new(layers: usize, dims: usize, values: Vec<f32>) -> Result<Self> {
        if layers == 0 || dims == 0 {
            return Err(Error::Shape(format!(
                "feature block {layers}x{dims} is empty"
            )));
        }
        if values.len() != layers * dims {
            return Err(Error::Shape(format!(
                "{} feature values for a {layers}x{dims} block",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        Ok(Self {
            layers,
            dims,
            values,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn layer(&self, l: usize) -> &[f32] {
        &self.values[l * self.dims..(l + 1) * self.dims]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: FeatureBlock,
    pub label: EmotionLabel,
    pub gender: Gender,
    pub split: Split,
}

impl Sample {
    pub fn dominant(&self) -> Option<usize> {
        self.label.dominant()
    }
}

/// Effective counts: label mass per (category, gender, split).
#[derive(Clone, Debug, PartialEq)]
pub struct Counts {
    categories: usize,
    mass: Vec<f64>,
}

impl Counts {
    fn compute(categories: usize, samples: &[Arc<Sample>]) -> Self {
        let mut mass = vec![0.0; categories * 2 * 3];
        for s in samples {
            for (c, &p) in s.label.probs().iter().enumerate() {
                mass[(c * 2 + s.gender.index()) * 3 + s.split.index()] += p;
            }
        }
        Self { categories, mass }
    }

    pub fn get(&self, category: usize, gender: Gender, split: Split) -> f64 {
        self.mass[(category * 2 + gender.index()) * 3 + split.index()]
    }

    /// Label mass of a category in one split, both genders.
    pub fn category_mass(&self, category: usize, split: Split) -> f64 {
        Gender::ALL
            .iter()
            .map(|&g| self.get(category, g, split))
            .sum()
    }

    pub fn categories(&self) -> usize {
        self.categories
    }
}

/// Ordered collection of samples over a fixed category vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    categories: Vec<String>,
    layers: usize,
    dims: usize,
    samples: Vec<Arc<Sample>>,
    counts: Counts,
}

impl Dataset {
    pub fn new(
        categories: Vec<String>,
        layers: usize,
        dims: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        Self::from_shared(
            categories,
            layers,
            dims,
            samples.into_iter().map(Arc::new).collect(),
        )
    }

    pub(crate) fn from_shared(
        categories: Vec<String>,
        layers: usize,
        dims: usize,
        samples: Vec<Arc<Sample>>,
    ) -> Result<Self> {
        if categories.len() < 2 {
            return Err(Error::Validation(
                "a dataset needs at least 2 categories".into(),
            ));
        }
        if layers == 0 || dims == 0 {
            return Err(Error::Shape(format!("feature shape {layers}x{dims}")));
        }
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id {:?}", s.id)));
            }
            if s.features.layers() != layers || s.features.dims() != dims {
                return Err(Error::Shape(format!(
                    "sample {:?} has features {}x{}, dataset expects {layers}x{dims}",
                    s.id,
                    s.features.layers(),
                    s.features.dims()
                )));
            }
            if s.label.len() != categories.len() {
                return Err(Error::Validation(format!(
                    "sample {:?} has {} label entries for {} categories",
                    s.id,
                    s.label.len(),
                    categories.len()
                )));
            }
        }
        let counts = Counts::compute(categories.len(), &samples);
        Ok(Self {
            categories,
            layers,
            dims,
            samples,
            counts,
        })
    }

    /// Same vocabulary and shape, different sample list.
    pub(crate) fn with_samples(&self, samples: Vec<Arc<Sample>>) -> Self {
        let counts = Counts::compute(self.categories.len(), &samples);
        Self {
            categories: self.categories.clone(),
            layers: self.layers,
            dims: self.dims,
            samples,
            counts,
        }
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn samples(&self) -> &[Arc<Sample>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> &Counts {
        &self.counts
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Arc<Sample>> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Hard sample counts per (dominant category, gender) within a split.
    /// Samples without a dominant category are ignored.
    pub fn dominant_counts(&self, split: Split) -> Vec<[usize; 2]> {
        let mut out = vec![[0usize; 2]; self.categories.len()];
        for s in self.split(split) {
            if let Some(c) = s.dominant() {
                out[c][s.gender.index()] += 1;
            }
        }
        out
    }

    /// Label mass per category over the train split.
    pub fn train_label_mass(&self) -> Vec<f64> {
        (0..self.categories.len())
            .map(|c| self.counts.category_mass(c, Split::Train))
            .collect()
    }
}

/// Target imbalance for [`amplify_bias`]: minority:majority = 1:`ratio`
/// within each dominant category, with the majority gender per category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioSpec {
    pub ratio: u32,
    pub direction: Vec<Gender>,
}

impl RatioSpec {
    pub const DEFAULT_RATIOS: [u32; 5] = [1, 5, 10, 20, 40];

    pub fn new(ratio: u32, direction: Vec<Gender>) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config("ratio must be a positive integer".into()));
        }
        Ok(Self { ratio, direction })
    }

    /// Majority gender alternates M, F, M, ... across categories.
    pub fn alternating(ratio: u32, categories: usize) -> Result<Self> {
        let direction = (0..categories)
            .map(|c| if c % 2 == 0 { Gender::M } else { Gender::F })
            .collect();
        Self::new(ratio, direction)
    }

    /// Majority gender per category as observed in the train split
    /// (ties go to `M`).
    pub fn observed(ratio: u32, ds: &Dataset) -> Result<Self> {
        let direction = ds
            .dominant_counts(Split::Train)
            .iter()
            .map(|c| if c[0] > c[1] { Gender::F } else { Gender::M })
            .collect();
        Self::new(ratio, direction)
    }

    pub fn with_ratio(&self, ratio: u32) -> Result<Self> {
        Self::new(ratio, self.direction.clone())
    }
}
