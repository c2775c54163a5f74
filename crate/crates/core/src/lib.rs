//! Federated 3D segmentation with vicinal feature-statistics augmentation.

pub mod expcli;
pub mod federation;
pub mod rng;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
pub mod vfda;
