use rand::seq::SliceRandom;
use rand::Rng;

use crate::graph::SkeletonGraph;
use crate::tensor::{FeatureMap, Matrix, Shape};

/// Random connected graph: a random spanning tree plus up to `v / 4` extra
/// edges, with a random center.
pub fn random_connected_graph<R: Rng>(rng: &mut R, vertices: usize) -> SkeletonGraph {
    let mut order: Vec<usize> = (0..vertices).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    for k in 1..vertices {
        let parent = order[rng.random_range(0..k)];
        edges.push((parent, order[k]));
    }
    if vertices > 2 {
        for _ in 0..rng.random_range(0..=vertices / 4) {
            let (a, b) = (rng.random_range(0..vertices), rng.random_range(0..vertices));
            if a != b {
                edges.push((a, b));
            }
        }
    }
    let center = rng.random_range(0..vertices);
    SkeletonGraph::new(vertices, &edges, center).expect("valid random graph")
}

/// Entries uniform in `[-1, 1]`.
pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Matrix::new(rows, cols, data).expect("sized buffer")
}

/// Entries uniform in `[-1, 1]`.
pub fn random_map<R: Rng>(rng: &mut R, shape: Shape) -> FeatureMap {
    FeatureMap::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..=1.0))
}
