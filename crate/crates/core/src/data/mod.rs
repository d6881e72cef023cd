//! Clip files, derived input streams and the synthetic training set.

mod clip;
mod stream;
mod synth;

pub use clip::{load_clip, load_manifest, parse_manifest, save_clip, ManifestEntry, SkeletonClip};
pub use stream::{bone_sources, derive_stream, StreamKind};
pub use synth::{
    class_patterns, designated_pairs, pair_count, rest_pose, synth_dataset, synth_dataset_with, ClassPattern,
    SynthParams,
};

use crate::error::Result;
use crate::graph::SkeletonGraph;
use crate::tensor::FeatureMap;

/// A network input with its class.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: FeatureMap,
    pub label: usize,
}

/// Derives one stream for every clip.
pub fn examples_from_clips(clips: &[SkeletonClip], kind: StreamKind, graph: &SkeletonGraph) -> Result<Vec<Example>> {
    clips
        .iter()
        .map(|c| {
            Ok(Example {
                features: derive_stream(c, kind, graph)?,
                label: c.label,
            })
        })
        .collect()
}
