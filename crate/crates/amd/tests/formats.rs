mod common;

use amd::checkpoint::{decode, encode, load_checkpoint, read_header, save_checkpoint, MAGIC, PREAMBLE};
use amd::data::{parse_cifar10, CIFAR_BATCH_RECORDS};
use amd::error::{exit, HarnessError};
use amd::metrics::{export_metrics, to_csv, HEADER};
use common::*;

#[test]
fn checkpoint_file_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/ck.amdc");
    let ck = sample_checkpoint(11);
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert!(ck.bit_eq(&back));
    assert_eq!(back.meta, ck.meta);
    assert_eq!(encode(&back), std::fs::read(&path).unwrap());
}

#[test]
fn checkpoint_size_matches_directory() {
    let ck = sample_checkpoint(2);
    let bytes = encode(&ck);
    let (header, start) = read_header(&bytes).unwrap();
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    assert_eq!(start, PREAMBLE + header_len);
    let tensors: u64 = header.tensors.iter().map(|t| t.length).sum();
    let masks: u64 = header.masks.iter().map(|m| m.length).sum();
    let c = ck.config;
    let mask_bytes = (c.num_layers * (c.num_heads + c.mlp_hidden)).div_ceil(8) as u64;
    assert_eq!(masks, 3 * mask_bytes);
    assert_eq!(tensors, 8 * ck.store.num_params() as u64);
    assert_eq!(bytes.len() as u64, start as u64 + tensors + masks);
}

#[test]
fn checkpoint_mask_bits_follow_layout() {
    let ck = sample_checkpoint(5);
    let bytes = encode(&ck);
    let (header, start) = read_header(&bytes).unwrap();
    let c = ck.config;
    for (entry, (_, mask)) in header.masks.iter().zip(&ck.masks) {
        let raw = &bytes[start + entry.offset as usize..][..entry.length as usize];
        let mut k = 0;
        for l in 0..c.num_layers {
            for &on in mask.layers[l].heads.iter().chain(&mask.layers[l].units) {
                assert_eq!(raw[k / 8] >> (k % 8) & 1 == 1, on);
                k += 1;
            }
        }
        assert!((k..raw.len() * 8).all(|b| raw[b / 8] >> (b % 8) & 1 == 0));
    }
}

#[test]
fn checkpoint_damage_is_classified() {
    let bytes = encode(&sample_checkpoint(1));
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"AMDX");
    assert!(matches!(decode(&bad), Err(HarnessError::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(decode(&bad), Err(HarnessError::Format(_))));
    assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(HarnessError::Corrupt(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode(&long), Err(HarnessError::Corrupt(_))));
    assert_eq!(&bytes[..4], MAGIC);
    let e = decode(&long).unwrap_err();
    assert_eq!(e.exit_code(), exit::DATA_FORMAT);
}

#[test]
fn cifar_full_batch_parses() {
    let bytes = cifar_batch(CIFAR_BATCH_RECORDS, 7);
    assert_eq!(bytes.len(), 30_730_000);
    let set = parse_cifar10(&bytes).unwrap();
    assert_eq!(set.len(), 10_000);
    assert_eq!(set.image_len(), 3072);
    assert_eq!(set.labels[..12], [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1]);
    assert_eq!(values_digest(set.image(0)), reference_digest(&bytes[..RECORD]));
    assert_eq!(values_digest(set.image(9_999)), reference_digest(&bytes[9_999 * RECORD..]));
}

#[test]
fn cifar_malformed_inputs_are_rejected() {
    let e = parse_cifar10(&vec![0u8; 3072]).unwrap_err();
    assert!(matches!(&e, HarnessError::Format(m) if m.contains("3072")), "{e}");
    let e = parse_cifar10(&cifar_batch(2, 1)[..RECORD + 5]).unwrap_err();
    assert!(matches!(&e, HarnessError::Format(m) if m.contains(&(RECORD + 5).to_string())), "{e}");
    let mut bytes = cifar_batch(6, 1);
    bytes[4 * RECORD] = 10;
    let e = parse_cifar10(&bytes).unwrap_err();
    assert!(matches!(&e, HarnessError::Format(m) if m.contains("record 4")), "{e}");
    assert_eq!(e.exit_code(), exit::DATA_FORMAT);
}

#[test]
fn metrics_reexport_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let rows = sample_rows();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    export_metrics(&rows, &a).unwrap();
    export_metrics(&rows, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), rows.len() + 1);
    assert_eq!(text.lines().next(), Some(HEADER));
    assert!(text.contains("joint,0,0.2,train_loss,0.333333333,3"));
}

#[test]
fn empty_metrics_is_header_only() {
    assert_eq!(to_csv(&[]), format!("{HEADER}\n"));
}

#[test]
fn unwritable_metrics_path_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    std::fs::write(&file, b"x").unwrap();
    let e = export_metrics(&sample_rows(), &file.join("m.csv")).unwrap_err();
    assert_eq!(e.exit_code(), exit::IO);
}
