use std::fs;
use std::path::Path;

use super::{DataError, Dataset, IMAGE_BYTES};

/// One label byte followed by 1024 R, 1024 G and 1024 B bytes.
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
pub const CLASSES: usize = 10;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Parse binary records; `path` only labels errors.
pub fn parse_records(bytes: &[u8], path: &Path) -> Result<Dataset, DataError> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        let offset = (bytes.len() / RECORD_BYTES * RECORD_BYTES) as u64;
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            offset,
            len: bytes.len() as u64,
            record: RECORD_BYTES,
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    for (index, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(DataError::BadLabel {
                path: path.to_path_buf(),
                index,
                label: rec[0],
                classes: CLASSES,
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::new(pixels, labels, CLASSES)
}

/// Serialize to the binary record layout.
pub fn write_records(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * RECORD_BYTES);
    for i in 0..data.len() {
        out.push(data.labels()[i]);
        out.extend_from_slice(data.image_bytes(i));
    }
    out
}

/// Read one binary batch file.
pub fn read_records(path: &Path) -> Result<Dataset, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_records(&bytes, path)
}

/// Load only the test batch of a CIFAR-10 directory.
pub fn load_cifar10_test(dir: &Path) -> Result<Dataset, DataError> {
    read_records(&dir.join(TEST_FILE))
}

/// Load `(train, test)` from a directory of CIFAR-10 binary batches.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    if !dir.is_dir() {
        return Err(DataError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        });
    }
    let parts = TRAIN_FILES
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| p.exists())
        .map(|p| read_records(&p))
        .collect::<Result<Vec<_>, _>>()?;
    if parts.is_empty() {
        return Err(DataError::Missing(dir.to_path_buf()));
    }
    let train = Dataset::concat(parts)?;
    let test = read_records(&dir.join(TEST_FILE))?;
    Ok((train, test))
}
