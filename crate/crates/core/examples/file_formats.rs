//! Reads IDX and CIFAR-10 binary files. Writes a tiny dataset of each kind
//! into a temporary directory first, then loads it through the same paths
//! as `task = idx` and `task = cifar-binary`.
//!
//!     cargo run --release -p l2tww --example file_formats

use std::path::Path;

use l2tww::data::formats::{IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
use l2tww::data::{load_cifar_binary, load_idx, Checkpoint};

fn write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    std::fs::write(path, bytes)
}

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend(d.to_be_bytes());
    }
    b.extend(payload);
    b
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("l2tww-formats-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    let n = 6u32;
    let pixels: Vec<u8> = (0..n * 28 * 28).map(|i| (i % 251) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
    write(&dir.join("x.idx"), &idx(IDX_IMAGES_MAGIC, &[n, 28, 28], &pixels))?;
    write(&dir.join("y.idx"), &idx(IDX_LABELS_MAGIC, &[n], &labels))?;
    let ds = load_idx(&dir.join("x.idx"), &dir.join("y.idx"), 3, "train", None)?;
    println!("idx: {:?}, class counts {:?}", ds.images.shape(), ds.class_counts());

    let record = |label: u8| -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3 * 32 * 32).map(|i| (i * 7 % 256) as u8));
        r
    };
    let batch = |labels: &[u8]| labels.iter().flat_map(|&l| record(l)).collect::<Vec<u8>>();
    write(&dir.join("data_batch_1.bin"), &batch(&[0, 1, 2]))?;
    write(&dir.join("data_batch_2.bin"), &batch(&[3, 4]))?;
    write(&dir.join("test_batch.bin"), &batch(&[9]))?;
    let train = load_cifar_binary(&dir, "train", None)?;
    let test = load_cifar_binary(&dir, "test", Some(train.stats.clone()))?;
    println!("cifar: train {:?} labels {:?}, test {:?}", train.images.shape(), train.labels, test.images.shape());

    write(&dir.join("broken.idx"), &idx(IDX_IMAGES_MAGIC, &[n, 28, 28], &pixels[..100]))?;
    match load_idx(&dir.join("broken.idx"), &dir.join("y.idx"), 3, "train", None) {
        Err(e) => println!("truncated idx rejected: {e}"),
        Ok(_) => println!("truncated idx unexpectedly accepted"),
    }
    match Checkpoint::from_bytes(b"not a checkpoint", "memory") {
        Err(e) => println!("bad checkpoint rejected: {e}"),
        Ok(_) => println!("bad checkpoint unexpectedly accepted"),
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
