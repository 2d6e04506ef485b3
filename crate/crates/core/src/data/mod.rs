//! Datasets, the RTDS image format, checkpoints and weight import.

mod bin;
pub mod checkpoint;
pub mod rtds;
pub mod synth;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{
    identity_map, import_weights, load_checkpoint, load_state, read_checkpoint, save_checkpoint, write_checkpoint,
    Checkpoint,
    DType, ImportReport, NamedTensor,
};
pub use rtds::{load_binary_dataset, save_binary_dataset};
pub use synth::{synth_dataset, SynthTask};

/// Labelled images stored as `f32` in `[0, 1]`, `C×H×W` per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<usize>,
    pixels: Vec<f32>,
}

impl Dataset {
    pub fn new(
        shape: [usize; 3],
        num_classes: usize,
        labels: Vec<usize>,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let [channels, height, width] = shape;
        let per = channels * height * width;
        if per == 0 || num_classes == 0 {
            return Err(Error::invalid("dataset", "image shape and class count must be non-zero"));
        }
        if pixels.len() != labels.len() * per {
            return Err(Error::invalid(
                "dataset",
                format!("{} pixels for {} samples of {per}", pixels.len(), labels.len()),
            ));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::invalid("dataset", format!("sample {i} has label {l} ≥ {num_classes} classes")));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            num_classes,
            labels,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `[indices.len(), C, H, W]` images plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("batch", format!("index {i} out of {}", self.len())));
            }
            data.extend(self.image(i).iter().map(|&v| v as f64));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new([indices.len(), self.channels, self.height, self.width], data)?;
        Ok((t, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            pixels,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            labels: Vec::new(),
            pixels: Vec::new(),
        }
    }

    /// Seeded shuffle, then the first `round(train_fraction·len)` samples form
    /// the training split and the rest the test split.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    File,
}

fn default_noise() -> f64 {
    0.05
}

/// Where the data comes from and how it is split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default)]
    pub source: DataSource,
    /// RTDS file, for `source = "file"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub num_classes: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub image_size: usize,
    pub size: usize,
    pub train_fraction: f64,
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub task: SynthTask,
    /// Std of the per-pixel Gaussian noise of synthetic images.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_channels() -> usize {
    3
}

impl DatasetSpec {
    pub fn synthetic(num_classes: usize, image_size: usize, size: usize, seed: u64) -> Self {
        DatasetSpec {
            source: DataSource::Synthetic,
            path: None,
            num_classes,
            channels: 3,
            image_size,
            size,
            train_fraction: 0.8,
            test_fraction: 0.2,
            seed,
            task: SynthTask::A,
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return fail("data.num_classes must be ≥ 1".into());
        }
        if self.source == DataSource::Synthetic && self.size < self.num_classes {
            return fail(format!("data.size {} < num_classes {}", self.size, self.num_classes));
        }
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train_fraction)
            || !ok(self.test_fraction)
            || (self.train_fraction + self.test_fraction - 1.0).abs() > 1e-9
        {
            return fail(format!(
                "data split fractions {} + {} must sum to 1",
                self.train_fraction, self.test_fraction
            ));
        }
        if self.source == DataSource::File && self.path.is_none() {
            return fail("data.path is required when source = \"file\"".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("data.noise {} must be ≥ 0", self.noise));
        }
        Ok(())
    }

    /// Generate or load, then split into `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let all = match self.source {
            DataSource::Synthetic => synth_dataset(self)?,
            DataSource::File => load_binary_dataset(self.path.as_ref().unwrap())?,
        };
        if all.num_classes() != self.num_classes {
            return Err(Error::Config(format!(
                "data.num_classes is {} but the file declares {}",
                self.num_classes,
                all.num_classes()
            )));
        }
        Ok(all.split(self.train_fraction, self.seed ^ 0x5EED))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new([1, 1, 2], 3, vec![0, 2, 1], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap()
    }

    #[test]
    fn batch_and_subset() {
        let d = tiny();
        let (x, y) = d.batch(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 1, 2]);
        assert_eq!(y, [1, 0]);
        assert_eq!(x.data()[0], 0.4f32 as f64);
        let s = d.subset(&[1]);
        assert_eq!(s.labels(), [2]);
        assert_eq!(s.image(0), [0.2, 0.3]);
    }

    #[test]
    fn rejects_bad_labels_and_sizes() {
        assert!(Dataset::new([1, 1, 1], 2, vec![2], vec![0.0]).is_err());
        assert!(Dataset::new([1, 1, 2], 2, vec![0], vec![0.0]).is_err());
    }

    #[test]
    fn split_partitions_samples() {
        let d = tiny();
        let (a, b) = d.split(0.67, 1);
        assert_eq!(a.len() + b.len(), 3);
        assert_eq!(a.len(), 2);
        let mut all: Vec<usize> = a.labels().iter().chain(b.labels()).copied().collect();
        all.sort();
        assert_eq!(all, [0, 1, 2]);
    }

    #[test]
    fn spec_validation() {
        let mut s = DatasetSpec::synthetic(4, 8, 40, 0);
        assert!(s.validate().is_ok());
        s.test_fraction = 0.3;
        assert!(s.validate().unwrap_err().to_string().contains("sum to 1"));
        let mut s = DatasetSpec::synthetic(4, 8, 3, 0);
        assert!(s.validate().is_err());
        s.size = 4;
        s.source = DataSource::File;
        assert!(s.validate().unwrap_err().to_string().contains("data.path"));
    }
}
