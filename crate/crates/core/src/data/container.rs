//! Binary container for generated datasets.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic     4 bytes  "FEDS"
//! version   u32      1
//! features  u32
//! classes   u32
//! clients   u32
//! total     u64      training rows plus test rows
//! counts    u64 x clients, then u64 for the test pool
//! blocks    per shard in client order, then the test pool:
//!           f64 x (rows * features) row-major, then u32 x rows labels
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::domain::{FederatedDataset, Shard};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: [u8; 4] = *b"FEDS";
pub const CONTAINER_VERSION: u32 = 1;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn write_dataset<W: Write>(ds: &FederatedDataset, mut out: W) -> Result<()> {
    ds.validate()?;
    out.write_all(&CONTAINER_MAGIC)?;
    out.write_u32::<LittleEndian>(CONTAINER_VERSION)?;
    out.write_u32::<LittleEndian>(to_u32(ds.features, "feature count")?)?;
    out.write_u32::<LittleEndian>(to_u32(ds.classes, "class count")?)?;
    out.write_u32::<LittleEndian>(to_u32(ds.num_clients(), "client count")?)?;
    out.write_u64::<LittleEndian>(ds.total_samples as u64)?;
    let blocks: Vec<&Shard> = ds.shards.iter().chain(std::iter::once(&ds.test)).collect();
    for s in &blocks {
        out.write_u64::<LittleEndian>(s.len() as u64)?;
    }
    for s in blocks {
        for &v in s.x.iter() {
            out.write_f64::<LittleEndian>(v)?;
        }
        for &y in &s.y {
            out.write_u32::<LittleEndian>(to_u32(y, "label")?)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_block<R: Read>(input: &mut R, rows: usize, features: usize) -> Result<Shard> {
    let mut flat = vec![0.0; rows * features];
    input.read_f64_into::<LittleEndian>(&mut flat)?;
    let mut labels = vec![0u32; rows];
    input.read_u32_into::<LittleEndian>(&mut labels)?;
    let x = Array2::from_shape_vec((rows, features), flat).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Shard {
        x,
        y: labels.into_iter().map(|l| l as usize).collect(),
    })
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<FederatedDataset> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != CONTAINER_MAGIC {
        return Err(Error::BadMagic {
            expected: u32::from_le_bytes(CONTAINER_MAGIC),
            found: u32::from_le_bytes(magic),
        });
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let features = input.read_u32::<LittleEndian>()? as usize;
    let classes = input.read_u32::<LittleEndian>()? as usize;
    let clients = input.read_u32::<LittleEndian>()? as usize;
    let total = input.read_u64::<LittleEndian>()? as usize;
    let counts = (0..=clients)
        .map(|_| input.read_u64::<LittleEndian>().map(|c| c as usize))
        .collect::<std::io::Result<Vec<usize>>>()?;
    if counts.iter().sum::<usize>() != total {
        return Err(Error::Format(format!(
            "block counts sum to {}, header declares {total}",
            counts.iter().sum::<usize>()
        )));
    }
    let mut blocks = counts
        .iter()
        .map(|&rows| read_block(&mut input, rows, features))
        .collect::<Result<Vec<Shard>>>()?;
    let test = blocks.pop().expect("test block present");
    FederatedDataset::new(blocks, test, classes, features)
}

pub fn write_dataset_file(ds: &FederatedDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(ds, std::io::BufWriter::new(file))
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<FederatedDataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticParams};

    fn small() -> FederatedDataset {
        gen_synthetic(&SyntheticParams {
            clients: 3,
            dim: 4,
            classes: 3,
            total_samples: 90,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = small();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let header = 4 + 4 * 4 + 8 + 8 * 4;
        assert_eq!(buf.len(), header + 90 * (4 * 8 + 4));
        assert_eq!(&buf[..4], b"FEDS");
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn rejects_damage() {
        let mut buf = Vec::new();
        write_dataset(&small(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(bad.as_slice()), Err(Error::BadMagic { .. })));
        assert!(matches!(read_dataset(&buf[..buf.len() - 3]), Err(Error::Io(_))));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_dataset(bad.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.feds");
        write_dataset_file(&small(), &path).unwrap();
        assert_eq!(read_dataset_file(&path).unwrap(), small());
    }
}
