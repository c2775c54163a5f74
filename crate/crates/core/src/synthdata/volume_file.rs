//! `FVX1` volume files.
//!
//! Layout, little-endian: magic `FVX1`, `u32` edge length `D`, `u8` class
//! count `K`, 7 reserved zero bytes, `D³` `f64` intensities, `D³` `u8` labels.

use std::fs;
use std::path::{Path, PathBuf};

use super::VolumeSample;
use crate::tensor::Tensor;

pub const FVX_MAGIC: [u8; 4] = *b"FVX1";
pub const FVX_HEADER_LEN: usize = 16;
/// Largest edge length a reader accepts.
pub const MAX_VOLUME_DIM: u32 = 1024;

#[derive(Debug, thiserror::Error)]
pub enum VolumeFileError {
    #[error("bad magic {0:?}, expected FVX1")]
    BadMagic([u8; 4]),
    #[error("volume dimension {0} is zero or exceeds {MAX_VOLUME_DIM}")]
    DimensionOverflow(u32),
    #[error("truncated volume file: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after volume data")]
    TrailingBytes(usize),
    #[error("label {label} at voxel {index} is not below class count {classes}")]
    InvalidLabel { index: usize, label: u8, classes: u8 },
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeFileError + '_ {
    move |source| VolumeFileError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_volume(sample: &VolumeSample) -> Result<Vec<u8>, VolumeFileError> {
    let shape = sample.volume.shape();
    let d = shape[2];
    if shape.len() != 5 || shape[..2] != [1, 1] || shape[3] != d || shape[4] != d {
        return Err(VolumeFileError::InvalidSample(format!("volume shape {shape:?} is not 1x1xDxDxD")));
    }
    if sample.labels.len() != d * d * d {
        return Err(VolumeFileError::InvalidSample(format!(
            "{} labels for {d}^3 voxels",
            sample.labels.len()
        )));
    }
    let mut out = Vec::with_capacity(FVX_HEADER_LEN + 9 * d * d * d);
    out.extend_from_slice(&FVX_MAGIC);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(sample.num_classes);
    out.extend_from_slice(&[0u8; 7]);
    for v in sample.volume.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&sample.labels);
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeSample, VolumeFileError> {
    if bytes.len() < FVX_HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != FVX_MAGIC {
            return Err(VolumeFileError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(VolumeFileError::Truncated {
            expected: FVX_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FVX_MAGIC {
        return Err(VolumeFileError::BadMagic(magic));
    }
    let d32 = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if d32 == 0 || d32 > MAX_VOLUME_DIM {
        return Err(VolumeFileError::DimensionOverflow(d32));
    }
    let k = bytes[8];
    let d = d32 as usize;
    let voxels = d * d * d;
    let expected = FVX_HEADER_LEN + 9 * voxels;
    if bytes.len() < expected {
        return Err(VolumeFileError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(VolumeFileError::TrailingBytes(bytes.len() - expected));
    }
    let body = &bytes[FVX_HEADER_LEN..];
    let data: Vec<f64> = body[..8 * voxels]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = body[8 * voxels..].to_vec();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(VolumeFileError::InvalidLabel { index, label, classes: k });
    }
    let volume = Tensor::new(vec![1, 1, d, d, d], data).expect("shape matches voxel count");
    Ok(VolumeSample {
        volume,
        labels,
        num_classes: k,
    })
}

pub fn write_volume(path: &Path, sample: &VolumeSample) -> Result<(), VolumeFileError> {
    fs::write(path, encode_volume(sample)?).map_err(io_err(path))
}

pub fn read_volume(path: &Path) -> Result<VolumeSample, VolumeFileError> {
    decode_volume(&fs::read(path).map_err(io_err(path))?)
}

/// Writes `client_<id>/sample_<k>.fvx` for every shard and `heldout/sample_<k>.fvx`.
pub fn write_dataset(dir: &Path, shards: &[Vec<VolumeSample>], heldout: &[VolumeSample]) -> Result<(), VolumeFileError> {
    let write_all = |sub: PathBuf, samples: &[VolumeSample]| -> Result<(), VolumeFileError> {
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        for (k, s) in samples.iter().enumerate() {
            write_volume(&sub.join(format!("sample_{k}.fvx")), s)?;
        }
        Ok(())
    };
    for (id, shard) in shards.iter().enumerate() {
        write_all(dir.join(format!("client_{id}")), shard)?;
    }
    write_all(dir.join("heldout"), heldout)
}

/// Indexed entries `<prefix><n><suffix>` of a directory in numeric order.
fn indexed_entries(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<PathBuf>, VolumeFileError> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let Some(idx) = name
            .to_str()
            .and_then(|n| n.strip_prefix(prefix))
            .and_then(|n| n.strip_suffix(suffix))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        found.push((idx, entry.path()));
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// All `sample_<k>.fvx` files of one directory in index order.
pub fn read_volumes_in(dir: &Path) -> Result<Vec<VolumeSample>, VolumeFileError> {
    indexed_entries(dir, "sample_", ".fvx")?
        .iter()
        .map(|p| read_volume(p))
        .collect()
}

/// Client shards in client order plus the held-out set (empty if absent).
pub fn read_dataset(dir: &Path) -> Result<(Vec<Vec<VolumeSample>>, Vec<VolumeSample>), VolumeFileError> {
    let shards = indexed_entries(dir, "client_", "")?
        .iter()
        .map(|p| read_volumes_in(p))
        .collect::<Result<Vec<_>, _>>()?;
    let heldout_dir = dir.join("heldout");
    let heldout = if heldout_dir.is_dir() {
        read_volumes_in(&heldout_dir)?
    } else {
        Vec::new()
    };
    Ok((shards, heldout))
}
