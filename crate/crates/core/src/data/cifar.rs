//! CIFAR binary records: label byte(s) followed by 32×32 R, G and B planes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

use super::{find_file, read_maybe_gz, Dataset, DatasetKind, Split};

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const CIFAR10_RECORD: usize = 1 + PIXELS;
pub const CIFAR100_RECORD: usize = 2 + PIXELS;

fn layout(kind: DatasetKind) -> Result<(usize, usize, usize)> {
    // (record length, label offset, classes)
    match kind {
        DatasetKind::Cifar10Bin => Ok((CIFAR10_RECORD, 0, 10)),
        // Coarse label first, then the fine label that is used.
        DatasetKind::Cifar100Bin => Ok((CIFAR100_RECORD, 1, 100)),
        _ => Err(Error::config("not a CIFAR dataset kind")),
    }
}

pub fn parse_records(kind: DatasetKind, bytes: &[u8]) -> Result<Dataset> {
    let (rec, label_at, classes) = layout(kind)?;
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::format(format!("{} bytes is not a whole number of {rec}-byte records", bytes.len())));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for r in bytes.chunks_exact(rec) {
        let l = r[label_at] as usize;
        if l >= classes {
            return Err(Error::format(format!("label {l} out of range for {classes} classes")));
        }
        labels.push(l);
        data.extend(r[rec - PIXELS..].iter().map(|&p| p as f32 / 255.0));
    }
    Dataset::new(Tensor4::from_vec([n, 3, SIDE, SIDE], data)?, labels, classes)
}

/// Encodes records; for CIFAR-100 the coarse label is written as `fine / 5`.
pub fn encode_records(kind: DatasetKind, labels: &[u8], pixels: &[u8]) -> Result<Vec<u8>> {
    let (rec, _, _) = layout(kind)?;
    if pixels.len() != labels.len() * PIXELS {
        return Err(Error::shape("pixel buffer does not match the label count"));
    }
    let mut out = Vec::with_capacity(labels.len() * rec);
    for (l, px) in labels.iter().zip(pixels.chunks_exact(PIXELS)) {
        if kind == DatasetKind::Cifar100Bin {
            out.push(l / 5);
        }
        out.push(*l);
        out.extend_from_slice(px);
    }
    Ok(out)
}

fn concat(kind: DatasetKind, parts: Vec<Dataset>) -> Result<Dataset> {
    let n: usize = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        data.extend_from_slice(p.images.data());
        labels.extend(p.labels);
    }
    Dataset::new(Tensor4::from_vec([n, 3, SIDE, SIDE], data)?, labels, kind.num_classes())
}

/// Reads the standard batch files from `root` or its
/// `cifar-10-batches-bin` / `cifar-100-binary` subdirectory.
pub fn load_cifar(kind: DatasetKind, root: &Path, split: Split) -> Result<Dataset> {
    let (sub, files): (&str, Vec<String>) = match (kind, split) {
        (DatasetKind::Cifar10Bin, Split::Train) => {
            ("cifar-10-batches-bin", (1..=5).map(|i| format!("data_batch_{i}.bin")).collect())
        }
        (DatasetKind::Cifar10Bin, Split::Test) => ("cifar-10-batches-bin", vec!["test_batch.bin".into()]),
        (DatasetKind::Cifar100Bin, Split::Train) => ("cifar-100-binary", vec!["train.bin".into()]),
        (DatasetKind::Cifar100Bin, Split::Test) => ("cifar-100-binary", vec!["test.bin".into()]),
        _ => return Err(Error::config("not a CIFAR dataset kind")),
    };
    let dir = if root.join(sub).is_dir() { root.join(sub) } else { root.to_path_buf() };
    let mut parts = Vec::new();
    for f in &files {
        let path = find_file(&dir, &[f])?;
        parts.push(parse_records(kind, &read_maybe_gz(&path)?)?);
    }
    concat(kind, parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_arithmetic() {
        assert_eq!(CIFAR10_RECORD, 3073);
        assert_eq!(CIFAR100_RECORD, 3074);
        assert_eq!(10_000 * CIFAR10_RECORD, 30_730_000);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let px: Vec<u8> = (0..2 * PIXELS).map(|i| (i * 7 % 256) as u8).collect();
        for (kind, labels) in [(DatasetKind::Cifar10Bin, vec![3u8, 9]), (DatasetKind::Cifar100Bin, vec![42u8, 99])] {
            let bytes = encode_records(kind, &labels, &px).unwrap();
            let d = parse_records(kind, &bytes).unwrap();
            assert_eq!(d.labels, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
            let back: Vec<u8> = d.images.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
            assert_eq!(back, px);
            // Channel planes are R, G, B in order.
            assert_eq!(d.images.at(0, 1, 0, 0), px[SIDE * SIDE] as f32 / 255.0);
        }
    }

    #[test]
    fn bad_sizes_and_labels() {
        assert!(parse_records(DatasetKind::Cifar10Bin, &[0u8; 3074]).is_err());
        let mut rec = vec![0u8; CIFAR10_RECORD];
        rec[0] = 10;
        assert!(parse_records(DatasetKind::Cifar10Bin, &rec).is_err());
    }
}
