use std::path::Path;

use avm_autodiff::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::avmd::{self, AvmdError, Container};
use crate::metrics::{TrialKind, TrialTensor};
use crate::rng::stream;
use crate::{CoreError, Result};

pub const DATASET_KIND: &str = "dataset";

/// Image indices per split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Holds out `round(val_fraction · n_train)` (at least one) training
    /// images for validation, chosen by `seed`; test images follow the
    /// training images.
    pub fn draw(n_train: usize, n_test: usize, val_fraction: f64, seed: u64) -> Self {
        let mut ids: Vec<usize> = (0..n_train).collect();
        ids.shuffle(&mut stream(seed, "split", 0));
        let n_val = ((val_fraction * n_train as f64).round() as usize).clamp(1, n_train - 1);
        let mut val = ids[..n_val].to_vec();
        let mut train = ids[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Self {
            train,
            val,
            test: (n_train..n_train + n_test).collect(),
        }
    }
}

/// Stimuli, behavior and responses with their repeat structure.
///
/// Trials are grouped by image in increasing image order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    /// `[n_img×H×W]`.
    pub stimuli: Tensor,
    /// `[n_trials×behavior_dim]`.
    pub behavior: Tensor,
    /// `[n_trials×num_neurons]`.
    pub responses: Tensor,
    /// Image index of every trial.
    pub trial_image: Vec<usize>,
    pub splits: Splits,
    pub test_repeats: usize,
    /// Hash of the generating world configuration.
    pub provenance: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    trial_image: Vec<usize>,
    splits: Splits,
    test_repeats: usize,
    provenance: String,
}

impl DatasetBundle {
    pub fn num_images(&self) -> usize {
        self.stimuli.shape()[0]
    }

    pub fn num_trials(&self) -> usize {
        self.trial_image.len()
    }

    pub fn num_neurons(&self) -> usize {
        self.responses.shape()[1]
    }

    pub fn behavior_dim(&self) -> usize {
        self.behavior.shape()[1]
    }

    /// `(H, W)`.
    pub fn image_shape(&self) -> (usize, usize) {
        (self.stimuli.shape()[1], self.stimuli.shape()[2])
    }

    pub fn image(&self, i: usize) -> Tensor {
        let (h, w) = self.image_shape();
        let data = self.stimuli.data()[i * h * w..(i + 1) * h * w].to_vec();
        Tensor::new(&[h, w], data).expect("image slice matches shape")
    }

    pub fn behavior_row(&self, trial: usize) -> Tensor {
        let d = self.behavior_dim();
        Tensor::new(&[d], self.behavior.data()[trial * d..(trial + 1) * d].to_vec()).expect("row matches shape")
    }

    pub fn response_row(&self, trial: usize) -> &[f64] {
        let n = self.num_neurons();
        &self.responses.data()[trial * n..(trial + 1) * n]
    }

    /// Trials of the listed images, grouped per image in list order.
    pub fn trials_for(&self, images: &[usize]) -> Vec<usize> {
        let starts = self.image_starts();
        images.iter().flat_map(|&i| starts[i]..starts[i + 1]).collect()
    }

    pub fn repeats_for(&self, images: &[usize]) -> Vec<usize> {
        let starts = self.image_starts();
        images.iter().map(|&i| starts[i + 1] - starts[i]).collect()
    }

    /// Prefix offsets: trials of image `i` are `starts[i]..starts[i+1]`.
    fn image_starts(&self) -> Vec<usize> {
        let mut starts = vec![0; self.num_images() + 1];
        for &i in &self.trial_image {
            starts[i + 1] += 1;
        }
        for i in 0..self.num_images() {
            starts[i + 1] += starts[i];
        }
        starts
    }

    /// Recorded responses of the listed images as a trial tensor.
    pub fn response_tensor(&self, images: &[usize]) -> Result<TrialTensor> {
        let values = self
            .trials_for(images)
            .into_iter()
            .flat_map(|t| self.response_row(t).iter().copied())
            .collect();
        TrialTensor::new(self.repeats_for(images), self.num_neurons(), values, TrialKind::Response)
    }

    /// Bundle restricted to `images` (renumbered in the given order); each
    /// split keeps the images it shares with the subset.
    pub fn subset(&self, images: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.num_images()];
        for (new, &old) in images.iter().enumerate() {
            if old >= self.num_images() || remap[old] != usize::MAX {
                return Err(CoreError::Contract(format!("subset image {old} is out of range or repeated")));
            }
            remap[old] = new;
        }
        let (h, w) = self.image_shape();
        let mut stimuli = Vec::with_capacity(images.len() * h * w);
        for &i in images {
            stimuli.extend_from_slice(&self.stimuli.data()[i * h * w..(i + 1) * h * w]);
        }
        let trials = self.trials_for(images);
        let (bd, n) = (self.behavior_dim(), self.num_neurons());
        let rows = |src: &Tensor, width: usize| -> Vec<f64> {
            trials
                .iter()
                .flat_map(|&t| src.data()[t * width..(t + 1) * width].iter().copied())
                .collect()
        };
        let keep = |ids: &[usize]| -> Vec<usize> {
            let mut v: Vec<usize> = ids.iter().map(|&i| remap[i]).filter(|&i| i != usize::MAX).collect();
            v.sort_unstable();
            v
        };
        let out = Self {
            stimuli: Tensor::new(&[images.len(), h, w], stimuli)?,
            behavior: Tensor::new(&[trials.len(), bd], rows(&self.behavior, bd))?,
            responses: Tensor::new(&[trials.len(), n], rows(&self.responses, n))?,
            trial_image: trials.iter().map(|&t| remap[self.trial_image[t]]).collect(),
            splits: Splits {
                train: keep(&self.splits.train),
                val: keep(&self.splits.val),
                test: keep(&self.splits.test),
            },
            test_repeats: self.test_repeats,
            provenance: self.provenance.clone(),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Contract(m));
        if self.stimuli.shape().len() != 3 || self.behavior.shape().len() != 2 || self.responses.shape().len() != 2 {
            return fail("bundle tensors have the wrong rank".into());
        }
        let t = self.num_trials();
        if self.behavior.shape()[0] != t || self.responses.shape()[0] != t {
            return fail(format!("{t} trials but behavior/response rows disagree"));
        }
        if self.trial_image.windows(2).any(|p| p[0] > p[1]) {
            return fail("trials are not grouped by image".into());
        }
        if self.trial_image.iter().any(|&i| i >= self.num_images()) {
            return fail("trial refers to a missing image".into());
        }
        let mut seen = vec![false; self.num_images()];
        for &i in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if i >= seen.len() || seen[i] {
                return fail(format!("split image {i} is out of range or in two splits"));
            }
            seen[i] = true;
        }
        let starts = self.image_starts();
        let reps = |i: usize| starts[i + 1] - starts[i];
        if let Some(&i) = self.splits.test.iter().find(|&&i| reps(i) < 2) {
            return fail(format!("test image {i} has fewer than 2 repeats"));
        }
        if let Some(&i) = self.splits.train.iter().chain(&self.splits.val).find(|&&i| reps(i) != 1) {
            return fail(format!("training image {i} has {} repeats, expected 1", reps(i)));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let meta = BundleMeta {
            trial_image: self.trial_image.clone(),
            splits: self.splits.clone(),
            test_repeats: self.test_repeats,
            provenance: self.provenance.clone(),
        };
        let mut c = Container::new(DATASET_KIND, serde_json::to_value(meta).expect("meta serializes"));
        c.push("stimuli", self.stimuli.clone());
        c.push("behavior", self.behavior.clone());
        c.push("responses", self.responses.clone());
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind(DATASET_KIND)?;
        let meta: BundleMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| AvmdError::Manifest(format!("dataset meta: {e}")))?;
        let bundle = Self {
            stimuli: c.take("stimuli")?,
            behavior: c.take("behavior")?,
            responses: c.take("responses")?,
            trial_image: meta.trial_image,
            splits: meta.splits,
            test_repeats: meta.test_repeats,
            provenance: meta.provenance,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

pub fn write_dataset(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    Ok(avmd::write(path, &bundle.to_container())?)
}

pub fn read_dataset(path: &Path) -> Result<DatasetBundle> {
    DatasetBundle::from_container(avmd::read(path)?)
}
