//! IDX and CIFAR-10 binary readers. Pixels are scaled to `[0,1]`.

use std::fs;
use std::path::{Path, PathBuf};

use l2tww_autodiff::Tensor;

use crate::data::{Dataset, Stats};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        what: path.display().to_string(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))
}

/// Parses an unsigned-byte IDX file with the given magic; returns dims and payload.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(format_err(path, 0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        dims.push(be_u32(bytes, 4 + 4 * k, path)? as usize);
    }
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() < len {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: {} of {len} bytes", payload.len()),
        ));
    }
    if payload.len() > len {
        return Err(format_err(path, start + len, "trailing bytes after payload"));
    }
    Ok((dims, payload))
}

/// Grayscale IDX images as `[N,1,H,W]` in `[0,1]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let (dims, payload) = parse_idx(&bytes, IDX_IMAGES_MAGIC, path)?;
    if dims[0] == 0 {
        return Err(format_err(path, 4, "zero images"));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(&[dims[0], 1, dims[1], dims[2]], data)?)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read(path)?;
    let (_, payload) = parse_idx(&bytes, IDX_LABELS_MAGIC, path)?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// An IDX image/label file pair.
pub fn load_idx(images: &Path, labels: &Path, classes: usize, split: &str, stats: Option<Stats>) -> Result<Dataset> {
    let x = read_idx_images(images)?;
    let y = read_idx_labels(labels)?;
    let header = 8;
    if let Some(i) = y.iter().position(|&l| l >= classes) {
        return Err(format_err(labels, header + i, format!("label {} not below {classes}", y[i])));
    }
    if y.len() != x.shape()[0] {
        return Err(Error::Dataset(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            x.shape()[0],
            labels.display(),
            y.len()
        )));
    }
    Dataset::from_unit(x, y, classes, split, stats)
}

/// One CIFAR-10 binary file: records of a label byte and 3×32×32 pixels.
pub fn read_cifar_file(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(format_err(
            path,
            whole,
            format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(format_err(path, i * CIFAR_RECORD, format!("label {} not below 10", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((Tensor::new(&[n, 3, 32, 32], data)?, labels))
}

/// The files of a split: `data_batch_*.bin` for `train`, `test_batch.bin` for `test`.
pub fn cifar_split_files(dir: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            match split {
                "test" => name == "test_batch.bin",
                _ => name.starts_with("data_batch_") && name.ends_with(".bin"),
            }
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no CIFAR {split} files in {}", dir.display())));
    }
    Ok(files)
}

pub fn load_cifar_binary(dir: &Path, split: &str, stats: Option<Stats>) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for f in cifar_split_files(dir, split)? {
        let (x, y) = read_cifar_file(&f)?;
        data.extend(x.into_data());
        labels.extend(y);
    }
    let n = labels.len();
    Dataset::from_unit(Tensor::new(&[n, 3, 32, 32], data)?, labels, 10, split, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n, h, w] {
            b.extend(d.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn four_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (xi, yl) = (dir.path().join("x.idx"), dir.path().join("y.idx"));
        let pixels: Vec<u8> = (0..16).map(|i| (i * 17) as u8).collect();
        fs::write(&xi, idx_images(4, 2, 2, &pixels)).unwrap();
        fs::write(&yl, idx_labels(&[0, 1, 2, 1])).unwrap();
        let ds = load_idx(&xi, &yl, 3, "train", Some(Stats::identity(1))).unwrap();
        assert_eq!(ds.images.shape(), &[4, 1, 2, 2]);
        assert_eq!(ds.images.data()[15], 1.0);
        assert_eq!(ds.labels, vec![0, 1, 2, 1]);
    }

    #[test]
    fn malformed_idx_rejected_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.idx");
        fs::write(&p, b"").unwrap();
        assert!(read_idx_images(&p).is_err());

        let mut b = idx_images(1, 2, 2, &[1, 2, 3, 4]);
        b[3] = 0x01;
        fs::write(&p, &b).unwrap();
        assert!(matches!(read_idx_images(&p), Err(Error::Format { offset: 0, .. })));

        fs::write(&p, idx_images(2, 2, 2, &[1, 2, 3])).unwrap();
        assert!(matches!(read_idx_images(&p), Err(Error::Format { offset: 19, .. })));
    }

    #[test]
    fn label_above_class_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (xi, yl) = (dir.path().join("x.idx"), dir.path().join("y.idx"));
        fs::write(&xi, idx_images(2, 1, 1, &[0, 255])).unwrap();
        fs::write(&yl, idx_labels(&[0, 5])).unwrap();
        match load_idx(&xi, &yl, 5, "train", None) {
            Err(Error::Format { offset: 9, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    fn cifar_record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat(fill).take(CIFAR_RECORD - 1));
        r
    }

    #[test]
    fn two_record_cifar_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = cifar_record(9, 255);
        bytes.extend(cifar_record(3, 0));
        fs::write(dir.path().join("data_batch_1.bin"), &bytes).unwrap();
        let (x, y) = read_cifar_file(&dir.path().join("data_batch_1.bin")).unwrap();
        assert_eq!(y, vec![9, 3]);
        assert_eq!(x.data()[0], 1.0);
        let ds = load_cifar_binary(dir.path(), "train", None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        // recorded stats map pixel 255 back to 1.0
        assert!((ds.stats.destandardize(&ds.images).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cifar_bad_length_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        let mut bytes = cifar_record(1, 7);
        bytes.push(0);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_cifar_file(&p), Err(Error::Format { offset: 3073, .. })));
    }
}
