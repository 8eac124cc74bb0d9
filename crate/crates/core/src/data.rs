//! Skeleton-sequence datasets: the on-disk container and a synthetic
//! generator with separable classes.
//!
//! Container layout: `manifest.json` plus one little-endian f32 file per
//! sample holding a row-major `(T, V, C)` array.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_f32, encode_f32};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};
use crate::topology::SkeletonDef;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SKELETON_FILE: &str = "skeleton.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(T, V, C)`
    pub data: Tensor,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub joints: usize,
    pub frames: usize,
    pub channels: usize,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    pub skeleton: Option<SkeletonDef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestSample {
    file: String,
    label: usize,
    split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    #[serde(rename = "V")]
    joints: usize,
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "C")]
    channels: usize,
    classes: Vec<String>,
    samples: Vec<ManifestSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn in_split(&self, splits: &[Split]) -> Vec<&Sample> {
        self.samples.iter().filter(|s| splits.contains(&s.split)).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = [self.frames, self.joints, self.channels];
        for (i, s) in self.samples.iter().enumerate() {
            if s.data.shape() != shape {
                return Err(Error::Dataset(format!("sample {i} has shape {:?}, expected {shape:?}", s.data.shape())));
            }
            if s.label >= self.classes.len() {
                return Err(Error::Dataset(format!("sample {i} has label {} but only {} classes", s.label, self.classes.len())));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let mut samples = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let file = format!("sample_{i:05}.bin");
            fs::write(dir.join(&file), encode_f32(s.data.data()))?;
            samples.push(ManifestSample {
                file,
                label: s.label,
                split: s.split,
            });
        }
        let manifest = Manifest {
            joints: self.joints,
            frames: self.frames,
            channels: self.channels,
            classes: self.classes.clone(),
            samples,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        if let Some(sk) = &self.skeleton {
            fs::write(dir.join(SKELETON_FILE), serde_json::to_string_pretty(sk)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let shape = [manifest.frames, manifest.joints, manifest.channels];
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            let bytes = fs::read(dir.join(&s.file)).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", s.file)))?;
            let data = decode_f32(&bytes)?;
            if data.len() != shape.iter().product::<usize>() {
                return Err(Error::Dataset(format!("{} holds {} values, expected {shape:?}", s.file, data.len())));
            }
            samples.push(Sample {
                data: Tensor::new(&shape, data)?,
                label: s.label,
                split: s.split,
            });
        }
        let skeleton_path = dir.join(SKELETON_FILE);
        let skeleton = skeleton_path.exists().then(|| SkeletonDef::load(&skeleton_path)).transpose()?;
        let ds = Self {
            joints: manifest.joints,
            frames: manifest.frames,
            channels: manifest.channels,
            classes: manifest.classes,
            samples,
            skeleton,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Train/val/test sizes for `n` samples of one class: 70/15/15, rounded.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = ((n as f64) * 0.70).round() as usize;
    let val = ((n as f64) * 0.15).round() as usize;
    let train = train.min(n);
    let val = val.min(n - train);
    (train, val, n - train - val)
}

/// Deterministic synthetic dataset of 3-D joint trajectories.
///
/// Every class shares one rest pose. A class moves its joints along a
/// class-specific direction pattern with its own frequency and phase.
/// Samples vary the amplitude, add a phase jitter and Gaussian noise.
/// Splits are stratified 70/15/15 per class.
pub fn synth_dataset(classes: usize, per_class: usize, joints: usize, frames: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || joints == 0 || frames == 0 {
        return Err(Error::Dataset("classes, samples per class, joints and frames must be positive".into()));
    }
    const C: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);
    let rest: Vec<f64> = (0..joints * C).map(|_| unit(&mut rng)).collect();
    let patterns: Vec<(Vec<f64>, f64, f64)> = (0..classes)
        .map(|k| {
            let dirs = (0..joints * C).map(|_| 0.5 * unit(&mut rng)).collect();
            let cycles = 1.0 + (k % 2) as f64;
            let phase = TAU * k as f64 / classes as f64;
            (dirs, cycles, phase)
        })
        .collect();
    let noise = Normal::new(0.0, 0.05).expect("valid std");

    let mut samples = Vec::with_capacity(classes * per_class);
    for (label, (dirs, cycles, phase)) in patterns.iter().enumerate() {
        let (n_train, n_val, _) = split_sizes(per_class);
        let mut order: Vec<usize> = (0..per_class).collect();
        order.shuffle(&mut rng);
        let mut split_of = vec![Split::Test; per_class];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for split in split_of {
            let amplitude = rng.random_range(0.8..1.2);
            let jitter = rng.random_range(-0.3..0.3);
            let mut data = Vec::with_capacity(frames * joints * C);
            for t in 0..frames {
                let wave = (TAU * cycles * t as f64 / frames as f64 + phase + jitter).sin();
                for j in 0..joints * C {
                    data.push(rest[j] + amplitude * dirs[j] * wave + noise.sample(&mut rng));
                }
            }
            Precision::F32.round_slice(&mut data);
            samples.push(Sample {
                data: Tensor::new(&[frames, joints, C], data)?,
                label,
                split,
            });
        }
    }
    Ok(Dataset {
        joints,
        frames,
        channels: C,
        classes: (0..classes).map(|k| format!("class{k}")).collect(),
        samples,
        skeleton: Some(SkeletonDef::default_for(joints)),
    })
}
