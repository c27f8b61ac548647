//! CIFAR-10 binary format: records of one label byte followed by 3072
//! pixel bytes (R, G and B planes of 32x32, row-major).

use std::path::Path;

use super::{Dataset, Image, Sample};
use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const RECORD: usize = 1 + 3 * SIDE * SIDE;
pub const CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

pub fn parse(bytes: &[u8]) -> Result<Vec<Sample>> {
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Format {
            offset: (bytes.len() / RECORD * RECORD) as u64,
            reason: format!(
                "truncated record: file length {} is not a multiple of {RECORD}",
                bytes.len()
            ),
        });
    }
    let plane = SIDE * SIDE;
    bytes
        .chunks_exact(RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CLASSES {
                return Err(Error::Format {
                    offset: (i * RECORD) as u64,
                    reason: format!("label {label} > 9"),
                });
            }
            let px = &rec[1..];
            let mut data = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                data.extend([px[p] as f32, px[plane + p] as f32, px[2 * plane + p] as f32]);
            }
            Ok(Sample {
                image: Image {
                    height: SIDE,
                    width: SIDE,
                    data,
                },
                label,
            })
        })
        .collect()
}

/// Encodes 32x32 samples with integral pixel values back into records.
pub fn encode(samples: &[Sample]) -> Result<Vec<u8>> {
    let plane = SIDE * SIDE;
    let mut out = Vec::with_capacity(samples.len() * RECORD);
    for s in samples {
        if s.image.height != SIDE || s.image.width != SIDE || s.label >= CLASSES {
            return Err(Error::InvalidArgument(
                "CIFAR-10 records are 32x32 with labels 0..=9".into(),
            ));
        }
        out.push(s.label as u8);
        for c in 0..3 {
            for p in 0..plane {
                out.push(s.image.data[p * 3 + c].round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

pub fn load_file(path: &Path) -> Result<Vec<Sample>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

/// Loads `(train, test)` from a directory holding the standard batch files.
pub fn load_dir(root: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = Vec::new();
    for f in TRAIN_FILES {
        train.extend(load_file(&root.join(f))?);
    }
    let test = load_file(&root.join(TEST_FILE))?;
    Ok((Dataset::new(train, CLASSES)?, Dataset::new(test, CLASSES)?))
}

pub fn is_cifar_dir(root: &Path) -> bool {
    root.join(TEST_FILE).is_file() && TRAIN_FILES.iter().all(|f| root.join(f).is_file())
}
