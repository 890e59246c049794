#![allow(dead_code)]

use std::path::Path;

use amd::checkpoint::Checkpoint;
use amd::config::RunConfig;
use amd::metrics::MetricRow;
use amd_core::{ModelConfig, ParameterStore, StructuralMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const RECORD: usize = 3073;

/// A CIFAR-10 style batch of `n` records with labels `i % 10` and seeded
/// pixel bytes.
pub fn cifar_batch(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0u8; n * RECORD];
    for (i, rec) in out.chunks_exact_mut(RECORD).enumerate() {
        rec[0] = (i % 10) as u8;
        rng.fill(&mut rec[1..]);
    }
    out
}

/// Digest of one record decoded without the library parser: planes in
/// R, G, B order, each value `(byte/255 − mean)/std`, as little-endian f64.
pub fn reference_digest(record: &[u8]) -> String {
    let mean = [0.4914, 0.4822, 0.4465];
    let std = [0.2470, 0.2435, 0.2616];
    let mut h = Sha256::new();
    for c in 0..3 {
        for p in 0..1024 {
            let v = (record[1 + c * 1024 + p] as f64 / 255.0 - mean[c]) / std[c];
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn values_digest(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sample_checkpoint(seed: u64) -> Checkpoint {
    let config = ModelConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParameterStore::init(&config, &mut rng).unwrap();
    let mut ck = Checkpoint::new(config, store);
    let mut half = StructuralMask::full(&config);
    for l in 0..config.num_layers {
        for h in 0..config.num_heads / 2 {
            half.layers[l].heads[h] = false;
        }
        for u in (0..config.mlp_hidden).step_by(3) {
            half.layers[l].units[u] = false;
        }
    }
    ck.masks = vec![
        ("full".into(), StructuralMask::full(&config)),
        ("half".into(), half),
        ("minimal".into(), StructuralMask::minimal(&config)),
    ];
    ck.meta.insert("stage".into(), "test".into());
    ck
}

pub fn sample_rows() -> Vec<MetricRow> {
    let row = |stage: &str, epoch, candidate, scale, metric: &str, value| MetricRow {
        stage: stage.into(),
        epoch,
        candidate,
        candidate_scale: scale,
        metric: metric.into(),
        value,
        seed: 3,
    };
    vec![
        row("joint", Some(1), Some(1), Some(0.2), "val_accuracy", 0.125),
        row("joint", Some(0), Some(0), Some(0.1), "train_loss", 2.5),
        row("joint", Some(0), Some(1), Some(0.2), "train_loss", 1.0 / 3.0),
        row("summary", None, None, None, "training_passes", 22.0),
        row("joint", None, None, None, "teacher_forward", 6.0),
    ]
}

/// A minimal but complete run: desk model, small data, few epochs.
pub fn small_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.data.train_samples = 240;
    cfg.data.test_samples = 80;
    cfg.teacher.epochs = 2;
    cfg.teacher.importance_batches = 2;
    cfg.distill.epochs = 2;
    cfg.distill.warmup_epochs = 1;
    cfg
}
