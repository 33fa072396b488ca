//! Skeleton and feature ingestion, preprocessing and a synthetic generator.

mod format;
mod ntu;
mod preprocess;
mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use format::{
    decode_features, decode_skeleton, encode_features, encode_skeleton, load_feature_file, load_skeleton_file,
    save_feature_file, save_skeleton_file, FEATURE_MAGIC, SKELETON_MAGIC,
};
pub use ntu::{load_ntu_skeleton, ntu_label_from_name, parse_ntu_skeleton};
pub use preprocess::{normalize_spine, preprocess_pose, sample_feature_rows, sample_frames};
pub use synthetic::{generate_synthetic, SyntheticSample, SyntheticSpec};

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::model::{Branch, ModelInput, RGB_FEATURE_DIM};
use crate::streams::PoseTensor;
use crate::tensor::Tensor;

/// Joints per subject in the NTU layout.
pub const NTU_JOINTS: usize = 25;
/// "Middle of spine" in the NTU joint order.
pub const NTU_SPINE_INDEX: usize = 1;

/// One recorded skeleton sequence in sensor coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSkeletonSample {
    pub frames: usize,
    pub joints: usize,
    pub subjects: usize,
    pub spine_index: usize,
    pub label: usize,
    /// Row-major `[frames, subjects, joints, 3]`.
    pub coords: Vec<f64>,
}

impl RawSkeletonSample {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::EmptySequence);
        }
        if !(1..=2).contains(&self.subjects) {
            return Err(Error::contract(format!("subjects must be 1 or 2, got {}", self.subjects)));
        }
        if self.spine_index >= self.joints {
            return Err(Error::contract(format!(
                "spine index {} out of range for {} joints",
                self.spine_index, self.joints
            )));
        }
        let expect = self.frames * self.subjects * self.joints * 3;
        if self.coords.len() != expect {
            return Err(Error::dim("skeleton", "coordinate count", expect, self.coords.len()));
        }
        if self.coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("skeleton has non-finite coordinates"));
        }
        Ok(())
    }
}

/// Per-frame appearance features from a frozen image backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatureSequence {
    /// `[T_raw, 1536]`.
    pub features: Tensor,
    pub label: usize,
}

impl FrameFeatureSequence {
    pub fn new(features: Tensor, label: usize) -> Result<Self> {
        match *features.shape() {
            [_, RGB_FEATURE_DIM] => {}
            [_, w] => return Err(Error::dim("frame features", "width", RGB_FEATURE_DIM, w)),
            ref s => return Err(Error::dim("frame features", "rank", 2, s.len())),
        }
        if !features.is_finite() {
            return Err(Error::contract("frame features contain non-finite values"));
        }
        Ok(FrameFeatureSequence { features, label })
    }

    pub fn frames(&self) -> usize {
        self.features.dim(0)
    }
}

/// A preprocessed example ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub pose: Option<PoseTensor>,
    /// `[T, 1536]` sampled feature rows.
    pub features: Option<Tensor>,
    pub label: usize,
}

impl Example {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            pose: self.pose.as_ref(),
            features: self.features.as_ref(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize) -> Result<Self> {
        if let Some(e) = examples.iter().find(|e| e.label >= num_classes) {
            return Err(Error::contract(format!(
                "label {} out of range for {num_classes} classes",
                e.label
            )));
        }
        Ok(Dataset { examples, num_classes })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// `(joints, frames)` of the pose tensors, if any.
    pub fn pose_shape(&self) -> Option<(usize, usize)> {
        self.examples
            .iter()
            .find_map(|e| e.pose.as_ref())
            .map(|p| (p.joints(), p.frames()))
    }

    /// Stratified split: `round(holdout * n_c)` examples of every class go
    /// to the second half, chosen by a seeded shuffle. Order within each
    /// half follows the original order.
    pub fn split(&self, holdout: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&holdout) {
            return Err(Error::Config(format!("holdout must be in [0, 1), got {holdout}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut held = vec![false; self.len()];
        for class in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.examples[i].label == class).collect();
            idx.shuffle(&mut rng);
            let n = (holdout * idx.len() as f64).round() as usize;
            for &i in &idx[..n] {
                held[i] = true;
            }
        }
        let pick = |want: bool| {
            let examples = self
                .examples
                .iter()
                .zip(&held)
                .filter(|(_, &h)| h == want)
                .map(|(e, _)| e.clone())
                .collect();
            Dataset {
                examples,
                num_classes: self.num_classes,
            }
        };
        Ok((pick(false), pick(true)))
    }
}

/// Preprocesses raw pairs into examples. Pose tensors are padded to the
/// largest subject count present.
pub fn build_dataset(
    skeletons: &[RawSkeletonSample],
    features: &[FrameFeatureSequence],
    branch: Branch,
    frames: usize,
    num_classes: usize,
) -> Result<Dataset> {
    let n = skeletons.len().max(features.len());
    if branch.uses_pose() && skeletons.len() != n {
        return Err(Error::contract("pose modality missing for some samples"));
    }
    if branch.uses_rgb() && features.len() != n {
        return Err(Error::contract("rgb modality missing for some samples"));
    }
    let subjects = skeletons.iter().map(|s| s.subjects).max().unwrap_or(1);
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let label = if branch.uses_pose() { skeletons[i].label } else { features[i].label };
        if branch.uses_pose() && branch.uses_rgb() && skeletons[i].label != features[i].label {
            return Err(Error::contract(format!(
                "sample {i}: skeleton label {} differs from feature label {}",
                skeletons[i].label, features[i].label
            )));
        }
        let pose = if branch.uses_pose() {
            Some(preprocess_pose(&skeletons[i], frames, subjects)?)
        } else {
            None
        };
        let feats = if branch.uses_rgb() {
            Some(sample_feature_rows(&features[i].features, frames)?)
        } else {
            None
        };
        examples.push(Example {
            pose,
            features: feats,
            label,
        });
    }
    Dataset::new(examples, num_classes)
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SKELETON_EXT: &str = "skl";
pub const FEATURE_EXT: &str = "ftr";
pub const NTU_EXT: &str = "skeleton";

/// Loads every sample in `dir` that `branch` needs.
///
/// Samples are keyed by file stem; pose comes from `<stem>.skl` or an NTU
/// `<stem>.skeleton`, features from `<stem>.ftr`. The class count is read
/// from `manifest.txt` when present, otherwise one past the largest label.
pub fn load_dataset_dir(dir: impl AsRef<Path>, branch: Branch, frames: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut pose_files: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut feature_files: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        let stem = stem.to_string_lossy().into_owned();
        match ext.to_str() {
            Some(SKELETON_EXT) | Some(NTU_EXT) => {
                pose_files.insert(stem, path);
            }
            Some(FEATURE_EXT) => {
                feature_files.insert(stem, path);
            }
            _ => {}
        }
    }
    let stems: Vec<String> = if branch.uses_pose() {
        pose_files.keys().cloned().collect()
    } else {
        feature_files.keys().cloned().collect()
    };
    if stems.is_empty() {
        let what = if branch.uses_pose() { "pose (.skl or .skeleton)" } else { "rgb (.ftr)" };
        return Err(Error::contract(format!("no {what} files in {}", dir.display())));
    }
    let mut skeletons = Vec::new();
    let mut features = Vec::new();
    for stem in &stems {
        if branch.uses_pose() {
            let path = &pose_files[stem];
            let sample = if path.extension().and_then(|e| e.to_str()) == Some(NTU_EXT) {
                load_ntu_skeleton(path)?
            } else {
                load_skeleton_file(path)?
            };
            skeletons.push(sample);
        }
        if branch.uses_rgb() {
            let path = feature_files.get(stem).ok_or_else(|| {
                Error::contract(format!("rgb modality missing: no {stem}.{FEATURE_EXT} in {}", dir.display()))
            })?;
            features.push(load_feature_file(path)?);
        }
    }
    let max_label = skeletons
        .iter()
        .map(|s| s.label)
        .chain(features.iter().map(|f| f.label))
        .max()
        .unwrap_or(0);
    let manifest_path = dir.join(MANIFEST_FILE);
    let num_classes = if manifest_path.exists() {
        KvMap::parse(&fs::read_to_string(&manifest_path)?)?
            .parsed::<usize>("num_classes")?
            .unwrap_or(max_label + 1)
    } else {
        max_label + 1
    };
    build_dataset(&skeletons, &features, branch, frames, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(label: usize) -> Example {
        Example {
            pose: None,
            features: None,
            label,
        }
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let ds = Dataset::new((0..40).map(|i| example(i % 4)).collect(), 4).unwrap();
        let (train, test) = ds.split(0.2, 3).unwrap();
        assert_eq!(train.class_counts(), vec![8; 4]);
        assert_eq!(test.class_counts(), vec![2; 4]);
        assert_eq!(ds.split(0.2, 3).unwrap(), (train, test));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        assert!(Dataset::new(vec![example(3)], 3).is_err());
    }
}
