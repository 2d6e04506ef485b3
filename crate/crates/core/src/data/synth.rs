//! Class-conditional Gaussian-blob images.
//!
//! Each image is a dim background plus one Gaussian blob. The blob sits on a
//! circle around the image centre at an angle set by the class.
//!
//! * Task `a`: angle `2πc/K`, and the blob colour also follows the class
//!   around a colour wheel, so classes differ in both position and colour.
//! * Task `b`: angles rotated by half a class step, and the colour is drawn
//!   at random per image, so only position identifies the class.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    #[default]
    A,
    B,
}

const BACKGROUND: f64 = 0.1;
const RADIUS: f64 = 0.3;
const WIDTH: f64 = 0.25;
const JITTER: f64 = 0.04;

fn render<R: Rng>(spec: &DatasetSpec, label: usize, rng: &mut R, out: &mut Vec<f32>) {
    let k = spec.num_classes as f64;
    let s = spec.image_size as f64;
    let c = label as f64;
    let angle = 2.0 * PI * c / k + if spec.task == SynthTask::B { PI / k } else { 0.0 };
    let jitter = Normal::new(0.0, JITTER * s).unwrap();
    let cy = s / 2.0 - 0.5 + RADIUS * s * angle.sin() + jitter.sample(rng);
    let cx = s / 2.0 - 0.5 + RADIUS * s * angle.cos() + jitter.sample(rng);
    let amps: Vec<f64> = (0..spec.channels)
        .map(|ch| match spec.task {
            SynthTask::A => {
                let hue = 2.0 * PI * (c / k - ch as f64 / spec.channels as f64);
                0.5 + 0.4 * hue.cos()
            }
            SynthTask::B => rng.random_range(0.3..0.9),
        })
        .collect();
    let w2 = 2.0 * (WIDTH * s).powi(2);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).unwrap();
    for amp in amps {
        for y in 0..spec.image_size {
            for x in 0..spec.image_size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                let v = BACKGROUND + n + amp * (-d2 / w2).exp();
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
}

/// Deterministic in `spec`; labels are balanced to within one per class.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::Config("synthetic data needs ≥ 1 class, channel and pixel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.size).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let per = spec.channels * spec.image_size * spec.image_size;
    let mut pixels = Vec::with_capacity(spec.size * per);
    for &l in &labels {
        render(spec, l, &mut rng, &mut pixels);
    }
    Dataset::new(
        [spec.channels, spec.image_size, spec.image_size],
        spec.num_classes,
        labels,
        pixels,
    )
}
