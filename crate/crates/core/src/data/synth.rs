//! Synthetic relational action classes.
//!
//! Every clip is a rest pose with a random global offset, a slow common-mode
//! sway and sensor noise. One designated joint pair per class oscillates
//! along a random direction; classes differ in which pair moves and in
//! whether its two joints move in phase or in anti-phase. Because the start
//! phase is uniform, class means of raw coordinates carry no signal: telling
//! classes apart takes the amplitude of the pair's relative motion.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::data::SkeletonClip;
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;

/// Generator constants, meters and cycles per clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub offset_range: f64,
    pub sway_max: f64,
    pub noise_std: f64,
    pub amplitude: (f64, f64),
    pub cycles: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            offset_range: 0.5,
            sway_max: 0.05,
            noise_std: 0.01,
            amplitude: (0.15, 0.25),
            cycles: (1.5, 2.5),
        }
    }
}

/// How a class is realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassPattern {
    pub pair: (usize, usize),
    pub anti_phase: bool,
}

/// Number of designated pairs for a class count: half the classes use
/// in-phase motion and half anti-phase, with at least two pairs.
pub fn pair_count(num_classes: usize) -> usize {
    num_classes.div_ceil(2).max(2)
}

/// Designated joint pairs: edges spread over the edge list, preferring pairs
/// that share no joint.
pub fn designated_pairs(graph: &SkeletonGraph, count: usize) -> Result<Vec<(usize, usize)>> {
    let edges = graph.edges();
    if edges.len() < count {
        return Err(Error::arg(format!(
            "graph has {} edges, need {count} designated pairs",
            edges.len()
        )));
    }
    let stride = edges.len() / count;
    let mut order: Vec<usize> = (0..edges.len()).map(|i| (i * stride) % edges.len()).collect();
    order.extend(0..edges.len());
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut used = vec![false; graph.num_vertices()];
    for &i in &order {
        let (a, b) = edges[i];
        if chosen.len() < count && !used[a] && !used[b] && !chosen.contains(&(a, b)) {
            used[a] = true;
            used[b] = true;
            chosen.push((a, b));
        }
    }
    for &e in edges {
        if chosen.len() < count && !chosen.contains(&e) {
            chosen.push(e);
        }
    }
    Ok(chosen)
}

pub fn class_patterns(graph: &SkeletonGraph, num_classes: usize) -> Result<Vec<ClassPattern>> {
    if num_classes < 2 {
        return Err(Error::arg("need at least two classes"));
    }
    let p = pair_count(num_classes);
    let pairs = designated_pairs(graph, p)?;
    Ok((0..num_classes)
        .map(|c| ClassPattern {
            pair: pairs[c % p],
            anti_phase: (c / p) % 2 == 1,
        })
        .collect())
}

/// Rest pose: vertices on a ring, radius growing with hop distance to the center.
pub fn rest_pose(graph: &SkeletonGraph) -> Result<Vec<[f64; 3]>> {
    let hops = graph.center_hops()?;
    let n = graph.num_vertices() as f64;
    Ok(hops
        .iter()
        .enumerate()
        .map(|(v, &h)| {
            let angle = TAU * v as f64 / n;
            let r = 0.1 * (1 + h) as f64;
            [r * angle.cos(), r * angle.sin(), 0.05 * h as f64]
        })
        .collect())
}

/// Deterministic labeled clips, class-major order.
pub fn synth_dataset(
    num_classes: usize,
    clips_per_class: usize,
    frames: usize,
    graph: &SkeletonGraph,
    seed: u64,
) -> Result<Vec<SkeletonClip>> {
    synth_dataset_with(num_classes, clips_per_class, frames, graph, seed, &SynthParams::default())
}

pub fn synth_dataset_with(
    num_classes: usize,
    clips_per_class: usize,
    frames: usize,
    graph: &SkeletonGraph,
    seed: u64,
    params: &SynthParams,
) -> Result<Vec<SkeletonClip>> {
    if frames == 0 {
        return Err(Error::arg("clips need at least one frame"));
    }
    let patterns = class_patterns(graph, num_classes)?;
    let rest = rest_pose(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise_std).map_err(|e| Error::arg(e.to_string()))?;
    let mut clips = Vec::with_capacity(num_classes * clips_per_class);
    for (label, pattern) in patterns.iter().enumerate() {
        for _ in 0..clips_per_class {
            clips.push(one_clip(&mut rng, &rest, *pattern, label, frames, params, &noise));
        }
    }
    Ok(clips)
}

fn unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    UnitSphere.sample(rng)
}

fn one_clip(
    rng: &mut ChaCha8Rng,
    rest: &[[f64; 3]],
    pattern: ClassPattern,
    label: usize,
    frames: usize,
    params: &SynthParams,
    noise: &Normal<f64>,
) -> SkeletonClip {
    let joints = rest.len();
    let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(-params.offset_range..=params.offset_range));
    let sway_dir = unit(rng);
    let sway_amp = rng.random_range(0.0..=params.sway_max);
    let sway_freq = rng.random_range(0.5..1.5) * TAU / frames as f64;
    let sway_phase = rng.random_range(0.0..TAU);
    let dir = unit(rng);
    let amp = rng.random_range(params.amplitude.0..params.amplitude.1);
    let freq = rng.random_range(params.cycles.0..params.cycles.1) * TAU / frames as f64;
    let phase = rng.random_range(0.0..TAU);
    let lag = if pattern.anti_phase { std::f64::consts::PI } else { 0.0 };
    let (a, b) = pattern.pair;
    let mut points = Vec::with_capacity(frames * joints);
    for t in 0..frames {
        let tf = t as f64;
        let sway = sway_amp * (sway_freq * tf + sway_phase).sin();
        let osc_a = amp * (freq * tf + phase).sin();
        let osc_b = amp * (freq * tf + phase + lag).sin();
        for (v, r) in rest.iter().enumerate() {
            let osc = if v == a {
                osc_a
            } else if v == b {
                osc_b
            } else {
                0.0
            };
            points.push(std::array::from_fn(|c| {
                r[c] + offset[c] + sway * sway_dir[c] + osc * dir[c] + noise.sample(rng)
            }));
        }
    }
    SkeletonClip::new(frames, joints, points, label).expect("generated clip is well formed")
}
