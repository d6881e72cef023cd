use std::fmt;
use std::str::FromStr;

use crate::data::SkeletonClip;
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::tensor::{FeatureMap, Shape};

/// Input modality derived from raw joint coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamKind {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl StreamKind {
    pub const ALL: [StreamKind; 4] = [
        StreamKind::Joint,
        StreamKind::Bone,
        StreamKind::JointMotion,
        StreamKind::BoneMotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Joint => "joint",
            StreamKind::Bone => "bone",
            StreamKind::JointMotion => "joint_motion",
            StreamKind::BoneMotion => "bone_motion",
        }
    }

    fn uses_bones(self) -> bool {
        matches!(self, StreamKind::Bone | StreamKind::BoneMotion)
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StreamKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown stream kind `{s}`")))
    }
}

/// Source joint of every bone: for each non-root vertex, its lowest-index
/// neighbor one hop closer to the center. The root maps to `None`.
pub fn bone_sources(graph: &SkeletonGraph) -> Result<Vec<Option<usize>>> {
    let hops = graph.center_hops()?;
    Ok((0..graph.num_vertices())
        .map(|v| graph.neighbors(v).find(|&u| hops[u] + 1 == hops[v]))
        .collect())
}

/// Builds a `(1, 3, frames, joints)` feature map from a clip. Channels are
/// x, y, z. Bones are stored at their target (farther) joint with the root
/// carrying zeros; motion streams are forward frame differences with the
/// last frame zero.
pub fn derive_stream(clip: &SkeletonClip, kind: StreamKind, graph: &SkeletonGraph) -> Result<FeatureMap> {
    let (frames, joints) = (clip.frames(), clip.joints());
    if joints != graph.num_vertices() {
        return Err(Error::dim("derive_stream joints", joints, graph.num_vertices()));
    }
    if kind.uses_bones() && graph.edges().is_empty() {
        return Err(Error::arg(format!("{kind} stream needs a graph with edges")));
    }
    let shape = Shape::new(1, 3, frames, joints);
    let joint = FeatureMap::from_fn(shape, |_, c, t, v| clip.point(t, v)[c]);
    let base = if kind.uses_bones() {
        let sources = bone_sources(graph)?;
        FeatureMap::from_fn(shape, |_, c, t, v| match sources[v] {
            Some(src) => joint.get(0, c, t, v) - joint.get(0, c, t, src),
            None => 0.0,
        })
    } else {
        joint
    };
    Ok(match kind {
        StreamKind::Joint | StreamKind::Bone => base,
        StreamKind::JointMotion | StreamKind::BoneMotion => FeatureMap::from_fn(shape, |_, c, t, v| {
            if t + 1 < frames {
                base.get(0, c, t + 1, v) - base.get(0, c, t, v)
            } else {
                0.0
            }
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_joint_clip(target: [f64; 3]) -> SkeletonClip {
        SkeletonClip::new(1, 2, vec![[0.0, 0.0, 0.0], target], 0).unwrap()
    }

    #[test]
    fn bone_at_target_slot() {
        let g = SkeletonGraph::new(2, &[(0, 1)], 0).unwrap();
        let bone = derive_stream(&two_joint_clip([1.0, 0.0, 0.0]), StreamKind::Bone, &g).unwrap();
        assert_eq!((bone.get(0, 0, 0, 1), bone.get(0, 1, 0, 1), bone.get(0, 2, 0, 1)), (1.0, 0.0, 0.0));
        assert_eq!((bone.get(0, 0, 0, 0), bone.get(0, 1, 0, 0), bone.get(0, 2, 0, 0)), (0.0, 0.0, 0.0));
    }

    #[test]
    fn static_clip_has_no_motion() {
        let g = SkeletonGraph::ntu();
        let frame: Vec<[f64; 3]> = (0..25).map(|v| [v as f64, 1.0, -(v as f64)]).collect();
        let points = frame.iter().cycle().take(25 * 4).copied().collect();
        let clip = SkeletonClip::new(4, 25, points, 0).unwrap();
        for kind in [StreamKind::JointMotion, StreamKind::BoneMotion] {
            assert_eq!(derive_stream(&clip, kind, &g).unwrap().max_abs(), 0.0);
        }
    }

    #[test]
    fn joint_stream_is_coordinates() {
        let g = SkeletonGraph::new(2, &[(0, 1)], 0).unwrap();
        let clip = two_joint_clip([0.5, -2.0, 3.0]);
        let j = derive_stream(&clip, StreamKind::Joint, &g).unwrap();
        assert_eq!(j.as_slice(), &[0.0, 0.5, 0.0, -2.0, 0.0, 3.0]);
    }

    #[test]
    fn bones_need_edges() {
        let g = SkeletonGraph::new(1, &[], 0).unwrap();
        let clip = SkeletonClip::new(1, 1, vec![[1.0, 2.0, 3.0]], 0).unwrap();
        assert!(matches!(derive_stream(&clip, StreamKind::Bone, &g), Err(Error::Argument(_))));
        assert!(derive_stream(&clip, StreamKind::Joint, &g).is_ok());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in StreamKind::ALL {
            assert_eq!(k.name().parse::<StreamKind>().unwrap(), k);
        }
        assert!("bones".parse::<StreamKind>().is_err());
    }
}
