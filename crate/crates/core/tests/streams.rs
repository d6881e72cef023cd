use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cdgc::data::{derive_stream, load_clip, load_manifest, save_clip, synth_dataset, SkeletonClip, StreamKind};
use cdgc::SkeletonGraph;

fn random_clip(seed: u64, frames: usize) -> SkeletonClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..frames * 25)
        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    SkeletonClip::new(frames, 25, points, seed as usize % 5).unwrap()
}

fn translated(clip: &SkeletonClip, d: [f64; 3]) -> SkeletonClip {
    let points = clip.points().iter().map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]]).collect();
    SkeletonClip::new(clip.frames(), clip.joints(), points, clip.label).unwrap()
}

#[test]
fn bone_streams_ignore_global_translation() {
    let g = SkeletonGraph::ntu();
    for seed in 0..10 {
        let clip = random_clip(seed, 6);
        let moved = translated(&clip, [0.7, -1.3, 2.25]);
        for kind in [StreamKind::Bone, StreamKind::BoneMotion, StreamKind::JointMotion] {
            let a = derive_stream(&clip, kind, &g).unwrap();
            let b = derive_stream(&moved, kind, &g).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12, "{kind} seed {seed}");
        }
        let a = derive_stream(&clip, StreamKind::Joint, &g).unwrap();
        let b = derive_stream(&moved, StreamKind::Joint, &g).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1.0);
    }
}

#[test]
fn single_frame_motion_streams_are_zero() {
    let g = SkeletonGraph::ntu();
    let clip = random_clip(3, 1);
    for kind in [StreamKind::JointMotion, StreamKind::BoneMotion] {
        let m = derive_stream(&clip, kind, &g).unwrap();
        assert_eq!(m.shape().frames, 1);
        assert_eq!(m.max_abs(), 0.0, "{kind}");
    }
}

#[test]
fn joint_stream_embeds_coordinates_unchanged() {
    let g = SkeletonGraph::ntu();
    let clip = random_clip(4, 5);
    let j = derive_stream(&clip, StreamKind::Joint, &g).unwrap();
    for t in 0..5 {
        for v in 0..25 {
            let p = clip.point(t, v);
            for c in 0..3 {
                assert_eq!(j.get(0, c, t, v).to_bits(), p[c].to_bits());
            }
        }
    }
}

#[test]
fn motion_is_forward_difference_of_base_stream() {
    let g = SkeletonGraph::ntu();
    let clip = random_clip(6, 4);
    for (base, motion) in [(StreamKind::Joint, StreamKind::JointMotion), (StreamKind::Bone, StreamKind::BoneMotion)] {
        let b = derive_stream(&clip, base, &g).unwrap();
        let m = derive_stream(&clip, motion, &g).unwrap();
        for c in 0..3 {
            for v in 0..25 {
                for t in 0..3 {
                    assert_eq!(m.get(0, c, t, v), b.get(0, c, t + 1, v) - b.get(0, c, t, v));
                }
                assert_eq!(m.get(0, c, 3, v), 0.0);
            }
        }
    }
}

#[test]
fn hundred_clips_survive_save_and_load() {
    let g = SkeletonGraph::ntu();
    let clips = synth_dataset(5, 20, 6, &g, 21).unwrap();
    assert_eq!(clips.len(), 100);
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::new();
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip{i:03}.txt");
        save_clip(clip, dir.path().join(&name)).unwrap();
        manifest.push_str(&format!("{name} {}\n", clip.label));
    }
    let manifest_path = dir.path().join("manifest.txt");
    std::fs::write(&manifest_path, manifest).unwrap();
    let entries = load_manifest(&manifest_path).unwrap();
    assert_eq!(entries.len(), 100);
    for (entry, clip) in entries.iter().zip(&clips) {
        let loaded = load_clip(&entry.path).unwrap();
        assert_eq!(&loaded, clip);
        assert_eq!(entry.label, clip.label);
        for kind in StreamKind::ALL {
            assert_eq!(derive_stream(&loaded, kind, &g).unwrap(), derive_stream(clip, kind, &g).unwrap());
        }
    }
}

#[test]
fn malformed_clip_is_rejected_with_line() {
    let err = SkeletonClip::parse("T 2 V 1 label 0\n1 2 3\n1 2\n").unwrap_err();
    assert!(matches!(&err, cdgc::Error::Format(m) if m.contains("line 3")), "{err}");
}
