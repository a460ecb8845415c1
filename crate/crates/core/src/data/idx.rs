//! Big-endian IDX image/label files (the MNIST/EMNIST distribution format).

use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use ndarray::Array2;

use crate::domain::Shard;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 * (dims + 1);
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    let found = BigEndian::read_u32(&bytes[..4]);
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    Ok((0..dims)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]) as usize)
        .collect())
}

/// Parses an image file into a `count x (rows * cols)` matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    let dims = header(bytes, IDX_IMAGES_MAGIC, 3)?;
    let (count, pixels) = (dims[0], dims[1] * dims[2]);
    let body = &bytes[16..];
    if body.len() < count * pixels {
        return Err(Error::Truncated {
            expected: 16 + count * pixels,
            found: bytes.len(),
        });
    }
    Ok(Array2::from_shape_fn((count, pixels), |(i, j)| {
        f64::from(body[i * pixels + j]) / 255.0
    }))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let dims = header(bytes, IDX_LABELS_MAGIC, 1)?;
    let body = &bytes[8..];
    if body.len() < dims[0] {
        return Err(Error::Truncated {
            expected: 8 + dims[0],
            found: bytes.len(),
        });
    }
    Ok(body[..dims[0]].iter().map(|&b| usize::from(b)).collect())
}

/// Reads an image file and its label file into one sample set.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Shard> {
    let x = parse_idx_images(&std::fs::read(images_path)?)?;
    let y = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if x.nrows() != y.len() {
        return Err(Error::CountMismatch {
            images: x.nrows(),
            labels: y.len(),
        });
    }
    Ok(Shard { x, y })
}

/// Keeps samples whose label is in `keep` and relabels them to their
/// position in `keep` (e.g. lowercase letters of EMNIST to `0..26`).
pub fn filter_labels(samples: &Shard, keep: &[usize]) -> Shard {
    let rows: Vec<usize> = (0..samples.len())
        .filter(|&i| keep.contains(&samples.y[i]))
        .collect();
    Shard {
        x: samples.x.select(ndarray::Axis(0), &rows),
        y: rows
            .iter()
            .map(|&i| keep.iter().position(|&k| k == samples.y[i]).expect("filtered"))
            .collect(),
    }
}
