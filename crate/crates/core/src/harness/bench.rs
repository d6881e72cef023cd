use std::fmt::Write as _;

use crate::data::{examples_from_clips, synth_dataset, Example, StreamKind};
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::network::{evaluate, AlphaMode, BackboneConfig, Model, SpatialOp, TrainConfig, Trainer, DESK_CHANNELS};

/// Synthetic-task training setup shared by the benchmark and the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOptions {
    pub classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub batch_size: usize,
    pub channels: Vec<usize>,
    pub stream: StreamKind,
    pub graph: SkeletonGraph,
}

impl Default for TaskOptions {
    /// 600 clips of 32 frames on the NTU skeleton in batches of 16, joint
    /// motion input.
    fn default() -> Self {
        Self {
            classes: 6,
            clips_per_class: 100,
            frames: 32,
            batch_size: 16,
            channels: DESK_CHANNELS.to_vec(),
            stream: StreamKind::JointMotion,
            graph: SkeletonGraph::ntu(),
        }
    }
}

impl TaskOptions {
    pub fn dataset(&self, seed: u64) -> Result<Vec<Example>> {
        let clips = synth_dataset(self.classes, self.clips_per_class, self.frames, &self.graph, seed)?;
        examples_from_clips(&clips, self.stream, &self.graph)
    }

    pub fn backbone(&self, op: SpatialOp, alpha: AlphaMode) -> BackboneConfig {
        BackboneConfig::from_schedule(op, &self.channels, 3, self.graph.num_vertices(), self.classes, alpha)
    }

    pub fn model(&self, op: SpatialOp, alpha: AlphaMode, seed: u64) -> Result<Model> {
        Model::new(self.backbone(op, alpha), &self.graph, seed)
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub variants: Vec<SpatialOp>,
    pub task: TaskOptions,
    /// Upper bound on training epochs per variant.
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub timed_epochs: usize,
    /// Train accuracy that counts as converged.
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            variants: vec![SpatialOp::CdgcMatrix, SpatialOp::AcceleratedCdgc],
            task: TaskOptions::default(),
            epochs: 30,
            warmup_epochs: 1,
            timed_epochs: 3,
            target_accuracy: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub variant: SpatialOp,
    /// Median wall time of the timed epochs.
    pub seconds_per_epoch: f64,
    pub param_count: usize,
    /// First epoch whose train accuracy reached the target.
    pub epochs_to_target: Option<usize>,
    pub epochs_run: usize,
    pub final_accuracy: f64,
    pub seed: u64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Trains every variant on the same synthetic set with the same seed.
/// A variant stops once it has both reached the target and finished its
/// timed epochs, or at `epochs`. Dataset generation is outside the timing.
pub fn bench(options: &BenchOptions) -> Result<Vec<BenchReport>> {
    if options.variants.is_empty() {
        return Err(Error::arg("no benchmark variants"));
    }
    if let Some(v) = options.variants.iter().find(|v| **v == SpatialOp::Vanilla) {
        return Err(Error::arg(format!("benchmark variants are cdgc_matrix and accelerated_cdgc, got {v}")));
    }
    let timing_end = options.warmup_epochs + options.timed_epochs;
    if options.timed_epochs == 0 || options.epochs < timing_end {
        return Err(Error::arg(format!(
            "need at least {timing_end} epochs for {} warmup and {} timed epochs",
            options.warmup_epochs, options.timed_epochs
        )));
    }
    let data = options.task.dataset(options.seed)?;
    let train_cfg = TrainConfig::scaled(options.epochs, options.task.batch_size, options.seed);
    let mut reports = Vec::new();
    for &variant in &options.variants {
        let mut model = options
            .task
            .model(variant, AlphaMode::Fixed(AlphaMode::DEFAULT_ALPHA), options.seed)?;
        let mut trainer = Trainer::new(train_cfg.clone())?;
        let mut times = Vec::new();
        let mut reached = None;
        let mut last = 0.0;
        let mut run = 0;
        while run < options.epochs && (reached.is_none() || run < timing_end) {
            let rec = trainer.run_epoch(&mut model, &data)?;
            run = rec.epoch;
            if rec.epoch > options.warmup_epochs && rec.epoch <= timing_end {
                times.push(rec.seconds);
            }
            if reached.is_none() && rec.accuracy >= options.target_accuracy {
                reached = Some(rec.epoch);
            }
            last = rec.accuracy;
        }
        reports.push(BenchReport {
            variant,
            seconds_per_epoch: median(&mut times),
            param_count: model.param_count(),
            epochs_to_target: reached,
            epochs_run: run,
            final_accuracy: last,
            seed: options.seed,
        });
    }
    Ok(reports)
}

/// Header `variant,seconds_per_epoch,params,epochs_to_target,epochs_run,final_accuracy,seed`;
/// an unreached target is left empty.
pub fn bench_reports_csv(reports: &[BenchReport]) -> String {
    let mut s = String::from("variant,seconds_per_epoch,params,epochs_to_target,epochs_run,final_accuracy,seed\n");
    for r in reports {
        let target = r.epochs_to_target.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{:?},{},{},{},{:?},{}",
            r.variant, r.seconds_per_epoch, r.param_count, target, r.epochs_run, r.final_accuracy, r.seed
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub alphas: Vec<f64>,
    pub variant: SpatialOp,
    pub task: TaskOptions,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 0.3, 1.0],
            variant: SpatialOp::CdgcMatrix,
            task: TaskOptions::default(),
            epochs: 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    /// Evaluation-mode accuracy on the training set after training.
    pub train_accuracy: f64,
    /// Evaluation-mode accuracy on a held-out set drawn with another seed.
    pub test_accuracy: f64,
}

/// Held-out data seed paired with a run seed.
pub fn heldout_seed(seed: u64) -> u64 {
    seed ^ 0xA5A5_0000_0000_0001
}

/// Trains the synthetic task once per alpha with the same seed.
pub fn alpha_sweep(options: &SweepOptions) -> Result<Vec<SweepRow>> {
    if let Some(a) = options.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::arg(format!("alpha {a} outside [0, 1]")));
    }
    let train = options.task.dataset(options.seed)?;
    let mut heldout_task = options.task.clone();
    heldout_task.clips_per_class = (options.task.clips_per_class / 3).max(1);
    let test = heldout_task.dataset(heldout_seed(options.seed))?;
    let train_cfg = TrainConfig::scaled(options.epochs, options.task.batch_size, options.seed);
    options
        .alphas
        .iter()
        .map(|&alpha| {
            let mut model = options.task.model(options.variant, AlphaMode::Fixed(alpha), options.seed)?;
            crate::network::train(&mut model, &train, &train_cfg)?;
            Ok(SweepRow {
                alpha,
                seed: options.seed,
                train_accuracy: evaluate(&model, &train, 64)?,
                test_accuracy: evaluate(&model, &test, 64)?,
            })
        })
        .collect()
}

/// Header `alpha,seed,train_accuracy,test_accuracy`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("alpha,seed,train_accuracy,test_accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{:?},{},{:?},{:?}", r.alpha, r.seed, r.train_accuracy, r.test_accuracy);
    }
    s
}
