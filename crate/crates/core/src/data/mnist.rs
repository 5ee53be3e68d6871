//! IDX files: big-endian headers, `u8` payloads.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

use super::{find_file, read_maybe_gz, Dataset, Split};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    if bytes.len() < 16 {
        return Err(Error::format("IDX image file shorter than its 16-byte header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(Error::format(format!("IDX image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let (n, r, c) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let expect = n.checked_mul(r).and_then(|v| v.checked_mul(c)).and_then(|v| v.checked_add(16));
    if expect != Some(bytes.len()) {
        return Err(Error::format(format!(
            "IDX image file is {} bytes; header {n}x{r}x{c} needs {}",
            bytes.len(),
            expect.map_or("an overflowing size".into(), |e| e.to_string())
        )));
    }
    Ok((n, r, c, &bytes[16..]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 8 {
        return Err(Error::format("IDX label file shorter than its 8-byte header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(Error::format(format!("IDX label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::format(format!("IDX label file is {} bytes; header count {n} needs {}", bytes.len(), 8 + n)));
    }
    Ok(&bytes[8..])
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, r, c, px) = parse_idx_images(images)?;
    let lb = parse_idx_labels(labels)?;
    if lb.len() != n {
        return Err(Error::format(format!("{n} images but {} labels", lb.len())));
    }
    let data = px.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor4::from_vec([n, 1, r, c], data)?;
    Dataset::new(images, lb.iter().map(|&l| l as usize).collect(), 10)
}

/// Reads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from `root`, or
/// from its `mnist` subdirectory when there is one.
pub fn load_mnist(root: &Path, split: Split) -> Result<Dataset> {
    let sub = root.join("mnist");
    let root = if sub.is_dir() { sub.as_path() } else { root };
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img = find_file(root, &[&format!("{prefix}-images-idx3-ubyte"), &format!("{prefix}-images.idx3-ubyte")])?;
    let lbl = find_file(root, &[&format!("{prefix}-labels-idx1-ubyte"), &format!("{prefix}-labels.idx1-ubyte")])?;
    dataset_from_idx(&read_maybe_gz(&img)?, &read_maybe_gz(&lbl)?)
}
