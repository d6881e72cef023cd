//! Central-difference graph convolution for skeleton graphs.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod network;
pub mod ops;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{PartitionedAdjacency, SkeletonGraph, Subset};
pub use ops::CdgcLayerParams;
pub use tensor::{FeatureMap, Matrix, Shape};
