use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cdgc::autodiff::Value;
use cdgc::data::{examples_from_clips, synth_dataset, Example, StreamKind};
use cdgc::harness::random_map;
use cdgc::network::{
    load_checkpoint, save_checkpoint, train, AlphaMode, BackboneConfig, BasicBlockConfig, Mode, Model, NesterovSgd,
    SpatialOp, TemporalOp, TrainConfig,
};
use cdgc::{Error, FeatureMap, Shape, SkeletonGraph};

const SMALL: [usize; 3] = [4, 4, 8];

fn small(op: SpatialOp, alpha: AlphaMode) -> BackboneConfig {
    BackboneConfig::from_schedule(op, &SMALL, 3, 25, 4, alpha)
}

fn data(clips_per_class: usize, seed: u64) -> Vec<Example> {
    let g = SkeletonGraph::ntu();
    let clips = synth_dataset(4, clips_per_class, 8, &g, seed).unwrap();
    examples_from_clips(&clips, StreamKind::JointMotion, &g).unwrap()
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn params_equal(a: &Model, b: &Model) -> bool {
    a.params().len() == b.params().len()
        && a
            .params()
            .iter()
            .zip(b.params())
            .all(|(p, q)| p.name == q.name && same_bits(p.value.as_slice(), q.value.as_slice()))
}

#[test]
fn zeroed_block_with_residual_is_identity() {
    let g = SkeletonGraph::ntu();
    for (op, temporal) in [
        (SpatialOp::CdgcMatrix, TemporalOp::Conv { kernel: 9 }),
        (SpatialOp::AcceleratedCdgc, TemporalOp::Shift),
        (SpatialOp::Vanilla, TemporalOp::Conv { kernel: 3 }),
    ] {
        let block = BasicBlockConfig {
            in_channels: 6,
            out_channels: 6,
            spatial_op: op,
            temporal_op: temporal,
            temporal_stride: 1,
            residual: true,
        };
        let config = BackboneConfig {
            in_channels: 6,
            num_vertices: 25,
            num_classes: 2,
            blocks: vec![block],
            alpha: AlphaMode::Fixed(0.3),
        };
        let mut model = Model::new(config, &g, 1).unwrap();
        for p in model.params_mut() {
            let is_weight = p.name.ends_with(".w") || p.name.contains(".spatial.w") || p.name.ends_with(".mask");
            if p.name.starts_with("blocks.0.") && is_weight {
                p.value.as_mut_slice().fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_map(&mut rng, Shape::new(2, 6, 5, 25)).map(f64::abs);
        for mode in [Mode::Eval, Mode::Train] {
            let y = model.block_output(0, &x, mode).unwrap();
            assert_eq!(y, x, "{op:?} {mode:?}");
        }
    }
}

#[test]
fn one_small_step_lowers_single_sample_loss() {
    let g = SkeletonGraph::ntu();
    let ex = &data(1, 3)[2];
    for op in [SpatialOp::CdgcMatrix, SpatialOp::AcceleratedCdgc] {
        for lr in [1e-3, 1e-4] {
            let mut model = Model::new(small(op, AlphaMode::Learnable(0.3)), &g, 4).unwrap();
            let labels = [ex.label];
            let (before, grads, _, _) = model.loss_and_grads(&ex.features, &labels).unwrap();
            NesterovSgd::new(0.9).step(model.params_mut(), &grads, lr).unwrap();
            let (after, _, _, _) = model.loss_and_grads(&ex.features, &labels).unwrap();
            assert!(after < before, "{op:?} lr {lr}: {before} -> {after}");
        }
    }
}

#[test]
fn learnable_alpha_is_kept_in_unit_interval() {
    let g = SkeletonGraph::ntu();
    let examples = data(2, 5);
    let (x, labels) = cdgc::network::make_batch(&examples, &[0, 2, 4, 6]).unwrap();
    for op in [SpatialOp::CdgcMatrix, SpatialOp::AcceleratedCdgc] {
        let mut model = Model::new(small(op, AlphaMode::Learnable(0.5)), &g, 6).unwrap();
        let (_, grads, _, _) = model.loss_and_grads(&x, &labels).unwrap();
        NesterovSgd::new(0.9).step(model.params_mut(), &grads, 1e6).unwrap();
        model.clamp_alphas();
        let alphas = model.alphas();
        assert_eq!(alphas.len(), SMALL.len());
        assert!(alphas.iter().all(|a| (0.0..=1.0).contains(a)), "{alphas:?}");
        assert!(alphas.iter().any(|&a| a == 0.0 || a == 1.0), "{op:?}: no bound reached {alphas:?}");
    }
}

#[test]
fn eval_rows_are_independent_of_batch_neighbors() {
    let g = SkeletonGraph::ntu();
    let model = Model::new(small(SpatialOp::CdgcMatrix, AlphaMode::Fixed(0.3)), &g, 7).unwrap();
    let examples = data(1, 8);
    let maps: Vec<FeatureMap> = examples.iter().map(|e| e.features.clone()).collect();
    let batch = FeatureMap::stack(&maps).unwrap();
    let scores = model.forward(&batch).unwrap();

    let dup = FeatureMap::stack(&[maps[1].clone(), maps[1].clone()]).unwrap();
    let dup_scores = model.forward(&dup).unwrap();
    assert!(same_bits(dup_scores.row(0), dup_scores.row(1)));
    assert!(same_bits(dup_scores.row(0), scores.row(1)));

    let perm = [2, 0, 3, 1];
    let permuted = FeatureMap::stack(&perm.map(|i| maps[i].clone())).unwrap();
    let p_scores = model.forward(&permuted).unwrap();
    for (r, &i) in perm.iter().enumerate() {
        assert!(same_bits(p_scores.row(r), scores.row(i)), "row {r}");
        assert!((scores.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn same_seed_training_is_bitwise_deterministic() {
    let g = SkeletonGraph::ntu();
    let examples = data(4, 9);
    let config = TrainConfig::scaled(2, 4, 10);
    let run = || {
        let mut model = Model::new(small(SpatialOp::AcceleratedCdgc, AlphaMode::Learnable(0.3)), &g, 11).unwrap();
        let log = train(&mut model, &examples, &config).unwrap();
        (model, log.epochs.iter().map(|r| r.loss).collect::<Vec<_>>())
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert!(same_bits(&l1, &l2));
    assert!(params_equal(&m1, &m2));
    assert_eq!(m1.running_stats(), m2.running_stats());
}

#[test]
fn vanilla_and_alpha_zero_matrix_train_identically() {
    let g = SkeletonGraph::ntu();
    let examples = data(4, 12);
    let config = TrainConfig::scaled(2, 4, 13);
    let mut vanilla = Model::new(small(SpatialOp::Vanilla, AlphaMode::Fixed(0.0)), &g, 14).unwrap();
    let mut matrix = Model::new(small(SpatialOp::CdgcMatrix, AlphaMode::Fixed(0.0)), &g, 14).unwrap();
    assert!(params_equal(&vanilla, &matrix));
    let lv = train(&mut vanilla, &examples, &config).unwrap();
    let lm = train(&mut matrix, &examples, &config).unwrap();
    assert_eq!(lv.epochs.len(), lm.epochs.len());
    for (a, b) in lv.epochs.iter().zip(&lm.epochs) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.accuracy, b.accuracy);
    }
    assert!(params_equal(&vanilla, &matrix));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let g = SkeletonGraph::ntu();
    let examples = data(2, 15);
    let mut model = Model::new(small(SpatialOp::CdgcMatrix, AlphaMode::Learnable(0.3)), &g, 16).unwrap();
    train(&mut model, &examples, &TrainConfig::scaled(1, 4, 17)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &g, &path).unwrap();
    let (loaded, g2) = load_checkpoint(&path).unwrap();
    assert_eq!(g2, g);
    assert_eq!(loaded.config(), model.config());
    assert!(params_equal(&loaded, &model));
    let x = examples[0].features.clone();
    assert_eq!(loaded.forward(&x).unwrap(), model.forward(&x).unwrap());
}

#[test]
fn wider_schedules_have_more_parameters() {
    let g = SkeletonGraph::ntu();
    let count = |op, channels: &[usize]| {
        let config = BackboneConfig::from_schedule(op, channels, 3, 25, 10, AlphaMode::Fixed(0.3));
        Model::new(config, &g, 0).unwrap().param_count()
    };
    let schedules: [&[usize]; 4] = [&[4], &[4, 4], &[8, 8], &[8, 8, 16, 16]];
    for op in [SpatialOp::Vanilla, SpatialOp::CdgcMatrix, SpatialOp::AcceleratedCdgc] {
        let counts: Vec<usize> = schedules.iter().map(|s| count(op, s)).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{op:?} {counts:?}");
    }
    for s in schedules {
        assert!(count(SpatialOp::AcceleratedCdgc, s) < count(SpatialOp::CdgcMatrix, s));
        assert_eq!(count(SpatialOp::Vanilla, s), count(SpatialOp::CdgcMatrix, s));
    }
}

#[test]
fn non_finite_input_reports_epoch_and_batch() {
    let g = SkeletonGraph::ntu();
    let mut examples = data(2, 18);
    examples[3].features.as_mut_slice()[5] = f64::NAN;
    let mut model = Model::new(small(SpatialOp::CdgcMatrix, AlphaMode::Fixed(0.3)), &g, 19).unwrap();
    let err = train(&mut model, &examples, &TrainConfig::scaled(1, 4, 20)).unwrap_err();
    let Error::Numeric(msg) = &err else {
        panic!("expected a numeric error, got {err}");
    };
    assert!(msg.contains("epoch 1 batch"), "{msg}");
}

#[test]
fn learnable_alpha_parameters_exist_only_for_difference_operators() {
    let g = SkeletonGraph::ntu();
    let names = |op| {
        Model::new(small(op, AlphaMode::Learnable(0.2)), &g, 0)
            .unwrap()
            .params()
            .iter()
            .filter(|p| p.name.ends_with("alpha"))
            .map(|p| p.value.clone())
            .collect::<Vec<_>>()
    };
    assert!(names(SpatialOp::Vanilla).is_empty());
    assert_eq!(names(SpatialOp::CdgcMatrix), vec![Value::Scalar(0.2); SMALL.len()]);
}
