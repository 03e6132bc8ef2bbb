use std::path::Path;

use super::{Dataset, Pixels, Split};
use crate::error::{Error, Result};

pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
/// One label byte plus three 32x32 channel planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * PLANE;
const RECORDS_PER_FILE: usize = 10_000;

fn read_file(path: &Path, pixels: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = RECORDS_PER_FILE * CIFAR_RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        if rec[0] > 9 {
            return Err(Error::format(
                path.display().to_string(),
                format!("label byte {} outside [0, 9]", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        let planes = &rec[1..];
        for p in 0..PLANE {
            pixels.extend_from_slice(&[planes[p], planes[PLANE + p], planes[2 * PLANE + p]]);
        }
    }
    Ok(())
}

fn load(dir: &Path, files: &[&str], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::with_capacity(files.len() * RECORDS_PER_FILE * 3 * PLANE);
    let mut labels = Vec::with_capacity(files.len() * RECORDS_PER_FILE);
    for f in files {
        read_file(&dir.join(f), &mut pixels, &mut labels)?;
    }
    Dataset::new(
        "cifar10",
        split,
        (SIDE, SIDE, 3),
        10,
        Pixels::U8(pixels),
        labels,
    )
}

/// Reads the five training batches and the test batch from `dir`.
///
/// Channel-planar records are reassembled into interleaved `H x W x C`.
pub fn load_cifar10_binary(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load(dir, &CIFAR_TRAIN_FILES, Split::Train)?;
    let test = load(dir, &[CIFAR_TEST_FILE], Split::Test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_file_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        std::fs::write(&path, vec![0u8; CIFAR_RECORD_BYTES * 3]).unwrap();
        let err = read_file(&path, &mut Vec::new(), &mut Vec::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("30730000") && msg.contains("9219"), "{msg}");
    }

    #[test]
    fn planar_records_become_interleaved() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let mut bytes = vec![0u8; RECORDS_PER_FILE * CIFAR_RECORD_BYTES];
        bytes[0] = 7;
        bytes[1] = 10; // red (0, 0)
        bytes[1 + PLANE] = 20; // green (0, 0)
        bytes[1 + 2 * PLANE + 1] = 30; // blue (0, 1)
        std::fs::write(&path, bytes).unwrap();
        let (mut px, mut labels) = (Vec::new(), Vec::new());
        read_file(&path, &mut px, &mut labels).unwrap();
        assert_eq!(labels[0], 7);
        assert_eq!(&px[..6], &[10, 20, 0, 0, 0, 30]);
    }
}
