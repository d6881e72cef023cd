use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cdgc::autodiff::{GradBundle, GradientTape, Value, Var};
use cdgc::graph::adjacency;
use cdgc::harness::{gradcheck, random_connected_graph, random_map, random_matrix, GradScope};
use cdgc::{FeatureMap, Matrix, PartitionedAdjacency, Shape, SkeletonGraph};

struct Case {
    adj: Arc<PartitionedAdjacency>,
    x: FeatureMap,
    weights: Vec<Matrix>,
    probe: FeatureMap,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_connected_graph(&mut rng, 9);
    let adj = Arc::new(adjacency(&g).unwrap());
    let x = random_map(&mut rng, Shape::new(2, 3, 2, 9));
    let weights = (0..3).map(|_| random_matrix(&mut rng, 3, 4)).collect();
    let probe = random_map(&mut rng, Shape::new(2, 4, 2, 9));
    Case { adj, x, weights, probe }
}

enum Op {
    Vanilla,
    Matrix(f64),
}

/// Gradients of `<probe, op(x)>` with respect to x, the weights and (for the
/// matrix form) alpha, in that order.
fn grads(c: &Case, op: &Op, probes: &[&FeatureMap]) -> GradBundle {
    let mut tape = GradientTape::new();
    let x = tape.leaf(c.x.clone());
    let ws: Vec<Var> = c.weights.iter().map(|w| tape.leaf(w.clone())).collect();
    let alpha_value = Value::Scalar(match op {
        Op::Vanilla => 0.0,
        Op::Matrix(a) => *a,
    });
    let alpha = tape.leaf(alpha_value.clone());
    let y = match op {
        Op::Vanilla => tape.vanilla_gconv(x, &ws, &c.adj).unwrap(),
        Op::Matrix(_) => tape.cdgc_matrix(x, &ws, alpha, &c.adj).unwrap(),
    };
    let mut loss = tape.dot(y, Value::Map(probes[0].clone())).unwrap();
    for p in &probes[1..] {
        let term = tape.dot(y, Value::Map((*p).clone())).unwrap();
        loss = tape.add(loss, term).unwrap();
    }
    let g = tape.backward(loss).unwrap();
    let xv = Value::Map(c.x.clone());
    let wv: Vec<Value> = c.weights.iter().map(|w| Value::Mat(w.clone())).collect();
    let mut triples = vec![("x", x, &xv)];
    for ((name, var), v) in ["w0", "w1", "w2"].into_iter().zip(&ws).zip(&wv) {
        triples.push((name, *var, v));
    }
    triples.push(("alpha", alpha, &alpha_value));
    GradBundle::collect(&g, triples)
}

#[test]
fn operator_scope_passes_over_twenty_seeds() {
    let report = gradcheck(GradScope::Operator, 0, 20).unwrap();
    assert!(report.max_relative_error() < 1e-6, "{:e}", report.max_relative_error());
    assert!(report.entries.iter().any(|e| e.name.ends_with("alpha")));
}

#[test]
fn block_scope_passes() {
    let report = gradcheck(GradScope::Block, 0, 2).unwrap();
    assert!(report.passed(), "{:e}", report.max_relative_error());
}

#[test]
fn model_scope_passes_over_five_seeds() {
    let report = gradcheck(GradScope::Model, 0, 5).unwrap();
    assert!(report.max_relative_error() < 1e-5, "{:e}", report.max_relative_error());
}

#[test]
fn fixed_seed_reruns_are_bitwise_identical() {
    assert_eq!(gradcheck(GradScope::Operator, 3, 2).unwrap(), gradcheck(GradScope::Operator, 3, 2).unwrap());
    let (a, b) = (case(5), case(5));
    let g1 = grads(&a, &Op::Matrix(0.3), &[&a.probe]).flatten();
    let g2 = grads(&b, &Op::Matrix(0.3), &[&b.probe]).flatten();
    assert!(g1.iter().zip(&g2).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn weight_gradients_at_alpha_zero_match_vanilla_bitwise() {
    for seed in 0..10 {
        let c = case(seed);
        let cd = grads(&c, &Op::Matrix(0.0), &[&c.probe]);
        let va = grads(&c, &Op::Vanilla, &[&c.probe]);
        for name in ["x", "w0", "w1", "w2"] {
            assert_eq!(cd.get(name), va.get(name), "seed {seed} {name}");
        }
    }
}

#[test]
fn gradient_of_a_sum_is_the_sum_of_gradients() {
    for seed in 0..10 {
        let c = case(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let other = random_map(&mut rng, c.probe.shape());
        let op = Op::Matrix(0.7);
        let joint = grads(&c, &op, &[&c.probe, &other]).flatten();
        let split = grads(&c, &op, &[&c.probe]).add(&grads(&c, &op, &[&other])).unwrap().flatten();
        let scale = split.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in joint.iter().zip(&split) {
            assert!((a - b).abs() <= 1e-12 * scale, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn alpha_gradient_at_vertex_constant_input() {
    // A vertex-constant map has zero central differences, so the output is
    // (1 - alpha) times the plain aggregation and d/dalpha is minus that.
    let g = SkeletonGraph::ntu();
    let adj = Arc::new(adjacency(&g).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = random_map(&mut rng, Shape::new(2, 3, 2, 1));
    let x = FeatureMap::from_fn(Shape::new(2, 3, 2, 25), |n, c, t, _| base.get(n, c, t, 0));
    let weights: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 3, 5)).collect();
    let probe = random_map(&mut rng, Shape::new(2, 5, 2, 25));
    let c = Case { adj, x, weights, probe };
    let plain = {
        let mut tape = GradientTape::new();
        let x = tape.leaf(c.x.clone());
        let ws: Vec<Var> = c.weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let y = tape.vanilla_gconv(x, &ws, &c.adj).unwrap();
        let f = tape.dot(y, Value::Map(c.probe.clone())).unwrap();
        tape.scalar(f).unwrap()
    };
    for alpha in [0.0, 0.3, 1.0] {
        let d = grads(&c, &Op::Matrix(alpha), &[&c.probe]).get("alpha").unwrap().as_scalar().unwrap();
        assert!((d + plain).abs() <= 1e-12 * plain.abs().max(1.0), "alpha {alpha}: {d} vs {}", -plain);
    }
}
