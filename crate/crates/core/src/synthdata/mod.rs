//! Deterministic synthetic non-IID volumes.
//!
//! Each client draws ellipsoidal objects on a dark background; clients differ
//! by intensity gain, intensity bias, noise level and object size.

mod generate;
mod volume_file;

pub use generate::{
    flip_axes, generate_sample, generate_shard, make_partition, random_flip, ClientShift, VolumeSample,
    CLASS_BASE_VALUES,
};
pub use volume_file::{
    decode_volume, encode_volume, read_dataset, read_volume, read_volumes_in, write_dataset, write_volume,
    VolumeFileError, FVX_HEADER_LEN, FVX_MAGIC, MAX_VOLUME_DIM,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("invalid data request: {0}")]
    Invalid(String),
}
