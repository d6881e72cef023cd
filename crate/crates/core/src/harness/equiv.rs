use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, partition, SkeletonGraph};
use crate::harness::random::{random_connected_graph, random_map, random_matrix};
use crate::network::parse_key_values;
use crate::ops::{cdgc_matrix, cdgc_naive, CdgcLayerParams};
use crate::tensor::{FeatureMap, Shape};

/// Largest accepted relative deviation between the two forms.
pub const EQUIV_TOLERANCE: f64 = 1e-10;

const ALPHAS: [f64; 4] = [0.0, 0.3, 0.7, 1.0];

#[derive(Clone, Debug, Default)]
pub struct EquivOptions {
    pub trials: usize,
    pub seed: u64,
    /// Perturbs the matrix form so the harness must report a failure.
    pub inject_fault: bool,
}

/// One randomized comparison, fully determined by its seed.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivInstance {
    pub instance_seed: u64,
    pub graph: SkeletonGraph,
    pub alpha: f64,
    pub shape: Shape,
    pub out_channels: usize,
    pub x: FeatureMap,
    pub params: CdgcLayerParams,
}

impl EquivInstance {
    /// Up to 25 vertices and 8 channels, alpha from {0, 0.3, 0.7, 1}.
    pub fn generate(instance_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
        let v = rng.random_range(1..=25);
        let graph = random_connected_graph(&mut rng, v);
        let alpha = ALPHAS[rng.random_range(0..ALPHAS.len())];
        let shape = Shape::new(
            rng.random_range(1..=2),
            rng.random_range(1..=8),
            rng.random_range(1..=3),
            v,
        );
        let out_channels = rng.random_range(1..=8);
        let x = random_map(&mut rng, shape);
        let weights = (0..3)
            .map(|_| random_matrix(&mut rng, shape.channels, out_channels))
            .collect();
        Self {
            instance_seed,
            graph,
            alpha,
            shape,
            out_channels,
            x,
            params: CdgcLayerParams::graph(weights, alpha),
        }
    }

    /// `max |matrix - naive| / max(max |naive|, 1e-8)`.
    pub fn relative_error(&self, inject_fault: bool) -> Result<f64> {
        let labeling = partition(&self.graph)?;
        let adj = normalized_adjacency(&self.graph, &labeling)?;
        let naive = cdgc_naive(&self.x, &self.graph, &labeling, &self.params)?;
        let mut matrix = cdgc_matrix(&self.x, &adj, &self.params)?;
        if inject_fault {
            matrix.as_mut_slice()[0] += 1e-6 * (1.0 + naive.max_abs());
        }
        Ok(matrix.max_abs_diff(&naive)? / naive.max_abs().max(1e-8))
    }

    /// Replay artifact: the instance seed plus a readable description.
    pub fn to_text(&self) -> String {
        let mut s = format!("instance_seed={}\n", self.instance_seed);
        let _ = writeln!(s, "alpha={:?}", self.alpha);
        let _ = writeln!(
            s,
            "shape={} {} {} {}",
            self.shape.batch, self.shape.channels, self.shape.frames, self.shape.vertices
        );
        let _ = writeln!(s, "out_channels={}", self.out_channels);
        for line in self.graph.to_text().lines() {
            let _ = writeln!(s, "# graph: {line}");
        }
        s
    }
}

/// Regenerates the instance named by a replay artifact.
pub fn replay_instance(text: &str) -> Result<EquivInstance> {
    let map = parse_key_values(text)?;
    let seed = map
        .get("instance_seed")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Config {
            key: "instance_seed".into(),
            msg: "missing or not an integer".into(),
        })?;
    Ok(EquivInstance::generate(seed))
}

#[derive(Clone, Debug)]
pub struct EquivReport {
    pub trials: usize,
    pub max_relative_error: f64,
    pub worst: Option<EquivInstance>,
    pub alphas_seen: Vec<f64>,
}

impl EquivReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < EQUIV_TOLERANCE
    }
}

fn instance_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(trial as u64)
}

/// Compares the per-node reference against the matrix form on random
/// instances. Zero trials is a vacuous pass.
pub fn equivcheck(options: &EquivOptions) -> Result<EquivReport> {
    let mut report = EquivReport {
        trials: options.trials,
        max_relative_error: 0.0,
        worst: None,
        alphas_seen: Vec::new(),
    };
    for trial in 0..options.trials {
        let inst = EquivInstance::generate(instance_seed(options.seed, trial));
        let err = inst.relative_error(options.inject_fault)?;
        if !report.alphas_seen.contains(&inst.alpha) {
            report.alphas_seen.push(inst.alpha);
        }
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some(inst);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_reproduces_instance() {
        let inst = EquivInstance::generate(42);
        let again = replay_instance(&inst.to_text()).unwrap();
        assert_eq!(again, inst);
    }

    #[test]
    fn fault_is_detected() {
        let opts = EquivOptions {
            trials: 3,
            seed: 1,
            inject_fault: true,
        };
        assert!(!equivcheck(&opts).unwrap().passed());
    }

    #[test]
    fn zero_trials_is_vacuous() {
        let r = equivcheck(&EquivOptions::default()).unwrap();
        assert!(r.passed() && r.worst.is_none());
    }
}
