//! Dataset sources: a seeded synthetic pattern task and the CIFAR-10 binary
//! batch format.
//!
//! Pixels are brought to `[0, 1]` and then standardized per channel with
//! fixed constants, `(v - MEAN[c]) / STD[c]`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use amd_core::{LabeledImages, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Channel means used for synthetic images (the generator is centered at 0.5).
pub const SYNTH_MEAN: [f64; 3] = [0.5, 0.5, 0.5];
pub const SYNTH_STD: [f64; 3] = [0.25, 0.25, 0.25];
/// CIFAR-10 training-set channel statistics.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Mixed into the run seed so split order is independent of sample generation.
const SPLIT_SALT: u64 = 0x5151_7e57;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic { seed: u64 },
    Files { sha256: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub set: LabeledImages,
    pub provenance: Provenance,
}

/// Parameters of the synthetic task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of per-pixel Gaussian noise, in `[0, 1]` pixel units.
    pub noise: f64,
    /// Amplitude of the class grating.
    pub grating: f64,
    /// Amplitude of the class color tint.
    pub tint: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_classes: 10,
            image_size: 8,
            channels: 3,
            noise: 0.3,
            grating: 0.25,
            tint: 0.05,
        }
    }
}

/// Spatial frequency (cycles per image) and orientation of class `k`.
pub fn class_pattern(k: usize) -> (f64, f64) {
    let freq = 1.0 + (k % 3) as f64;
    let theta = PI / 4.0 * ((k / 3) % 4) as f64 + PI / 16.0 * (k / 12) as f64;
    (freq, theta)
}

/// Per-channel tint direction of class `k` out of `n`.
pub fn class_tint(k: usize, n: usize, channel: usize) -> f64 {
    (2.0 * PI * (k as f64 / n as f64 + channel as f64 / 3.0)).cos()
}

/// Generates `num_samples` images: class `k` is a sinusoidal grating with
/// its own frequency and orientation at a random phase, plus a weak color
/// tint and Gaussian pixel noise, clamped to `[0, 1]`. Labels cycle through
/// the classes.
pub fn gen_synth(seed: u64, num_samples: usize, params: &SynthParams) -> Result<Dataset> {
    let p = params;
    if p.num_classes < 2 {
        return Err(HarnessError::Config("synthetic data needs at least 2 classes".into()));
    }
    if p.channels == 0 || p.channels > 3 || p.image_size == 0 || num_samples == 0 {
        return Err(HarnessError::Config(
            "synthetic data needs 1..=3 channels, a positive size and at least one sample".into(),
        ));
    }
    if !(p.noise >= 0.0) {
        return Err(HarnessError::Config(format!("noise must be non-negative, got {}", p.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let size = p.image_size;
    let plane = size * size;
    let mut data = Vec::with_capacity(num_samples * p.channels * plane);
    let mut labels = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let k = i % p.num_classes;
        let (freq, theta) = class_pattern(k);
        let phase = rng.random_range(0.0..2.0 * PI);
        let (c, s) = (theta.cos(), theta.sin());
        for ch in 0..p.channels {
            let tint = p.tint * class_tint(k, p.num_classes, ch);
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * c + y as f64 * s) / size as f64;
                    let wave = (2.0 * PI * freq * u + phase).sin();
                    let mut v = 0.5 + p.grating * wave + tint;
                    if p.noise > 0.0 {
                        v += p.noise * normal.sample(&mut rng);
                    }
                    data.push((v.clamp(0.0, 1.0) - SYNTH_MEAN[ch]) / SYNTH_STD[ch]);
                }
            }
        }
        labels.push(k);
    }
    let images = Tensor::new(&[num_samples, p.channels, size, size], data).expect("consistent shape");
    let set = LabeledImages::new(images, labels, p.num_classes).expect("labels in range");
    Ok(Dataset {
        set,
        provenance: Provenance::Synthetic { seed },
    })
}

/// Parses CIFAR-10 binary records: a label byte in `0..=9` followed by
/// 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32×32.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledImages> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(HarnessError::Format(format!(
            "CIFAR-10 data length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(HarnessError::Format(format!("record {i}: label byte {label} exceeds 9")));
        }
        labels.push(label as usize);
        for (ch, plane) in rec[1..].chunks_exact(1024).enumerate() {
            data.extend(plane.iter().map(|&b| (b as f64 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]));
        }
    }
    let images = Tensor::new(&[n, 3, 32, 32], data).expect("consistent shape");
    Ok(LabeledImages::new(images, labels, 10).expect("labels checked"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads one batch file.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let set = parse_cifar10(&bytes)?;
    Ok(Dataset {
        set,
        provenance: Provenance::Files {
            sha256: vec![sha256_hex(&bytes)],
        },
    })
}

/// Reads `data_batch_1..5.bin` and `test_batch.bin` from a directory, or a
/// single batch file used as training data.
pub fn load_cifar10_dir(path: &Path) -> Result<(Dataset, Option<Dataset>)> {
    if path.is_file() {
        return Ok((load_cifar10(path)?, None));
    }
    let mut bytes = Vec::new();
    let mut digests = Vec::new();
    for i in 1..=5 {
        let p = path.join(format!("data_batch_{i}.bin"));
        let b = fs::read(&p).map_err(|e| HarnessError::io(&p, e))?;
        digests.push(sha256_hex(&b));
        bytes.extend_from_slice(&b);
    }
    let train = Dataset {
        set: parse_cifar10(&bytes)?,
        provenance: Provenance::Files { sha256: digests },
    };
    let test_path = path.join("test_batch.bin");
    let test = if test_path.exists() {
        Some(load_cifar10(&test_path)?)
    } else {
        None
    };
    Ok((train, test))
}

/// Seed-derived split of `set` into `(train, held_out)` with
/// `round(fraction · N)` held-out samples (at least one of each).
pub fn split_off(set: &LabeledImages, fraction: f64, seed: u64) -> Result<(LabeledImages, LabeledImages)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(HarnessError::Config(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let n = set.len();
    let held = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 {
        return Err(HarnessError::Config("need at least two samples to split".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let (h, t) = order.split_at(held);
    let mut h = h.to_vec();
    let mut t = t.to_vec();
    h.sort_unstable();
    t.sort_unstable();
    let core = |e: amd_core::Error| HarnessError::Format(e.to_string());
    Ok((set.subset(&t).map_err(core)?, set.subset(&h).map_err(core)?))
}
