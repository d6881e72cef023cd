use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::GradBundle;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::network::config::TrainConfig;
use crate::network::model::{Model, Parameter};
use crate::tensor::{FeatureMap, Matrix};

/// SGD with Nesterov momentum:
///
/// ```text
/// v <- mu v + g
/// p <- p - lr (g + mu v)
/// ```
#[derive(Clone, Debug)]
pub struct NesterovSgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl NesterovSgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Parameter], grads: &GradBundle, lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim("NesterovSgd::step", params.len(), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.as_slice().len()]).collect();
        }
        let mu = self.momentum;
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.at(i).as_slice();
            let v = &mut self.velocity[i];
            let w = p.value.as_mut_slice();
            if g.len() != w.len() {
                return Err(Error::dim("NesterovSgd::step", w.len(), g.len()));
            }
            for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *w -= lr * (g + mu * *v);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of training samples classified correctly during the epoch.
    pub accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,accuracy,lr,seconds\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:?},{:?},{:?},{:?}", r.epoch, r.loss, r.accuracy, r.lr, r.seconds);
        }
        s
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.accuracy)
    }

    /// First epoch (one-based) whose train accuracy reaches `target`.
    pub fn epochs_to_target(&self, target: f64) -> Option<usize> {
        self.epochs.iter().find(|r| r.accuracy >= target).map(|r| r.epoch)
    }
}

/// Stacks the features of `examples[indices]` into one batch.
pub fn make_batch(examples: &[Example], indices: &[usize]) -> Result<(FeatureMap, Vec<usize>)> {
    let maps: Vec<FeatureMap> = indices.iter().map(|&i| examples[i].features.clone()).collect();
    let labels = indices.iter().map(|&i| examples[i].label).collect();
    Ok((FeatureMap::stack(&maps)?, labels))
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Argmax of every row.
pub fn predictions(scores: &Matrix) -> Vec<usize> {
    (0..scores.rows()).map(|r| argmax(scores.row(r))).collect()
}

fn check_dataset(model: &Model, data: &[Example]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::arg("dataset is empty"));
    }
    let k = model.config().num_classes;
    if let Some(e) = data.iter().find(|e| e.label >= k) {
        return Err(Error::arg(format!("label {} out of range for {k} classes", e.label)));
    }
    Ok(())
}

/// Trainer state that survives between epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    optimizer: NesterovSgd,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = NesterovSgd::new(config.momentum);
        Ok(Self {
            config,
            optimizer,
            epoch: 0,
        })
    }

    /// Zero-based index of the next epoch.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Runs one epoch. The sample order is a shuffle seeded by the run seed
    /// and the epoch index; the wall time covers the batch loop only.
    pub fn run_epoch(&mut self, model: &mut Model, data: &[Example]) -> Result<EpochRecord> {
        check_dataset(model, data)?;
        let e = self.epoch;
        let lr = self.config.lr_at(e);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(e as u64)));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let start = Instant::now();
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let (x, labels) = make_batch(data, chunk)?;
            let (loss, grads, stats, logits) = model.loss_and_grads(&x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss is {loss} at epoch {} batch {}", e + 1, b + 1)));
            }
            if let Some(name) = grads.first_non_finite() {
                return Err(Error::Numeric(format!(
                    "gradient of {name} is non-finite at epoch {} batch {}",
                    e + 1,
                    b + 1
                )));
            }
            self.optimizer.step(model.params_mut(), &grads, lr)?;
            model.clamp_alphas();
            let counts = model.bn_counts(chunk.len(), x.shape().frames);
            model.update_running_stats(&stats, &counts)?;
            loss_sum += loss * chunk.len() as f64;
            correct += predictions(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let seconds = start.elapsed().as_secs_f64();
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: e + 1,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            lr,
            seconds,
        })
    }
}

/// Trains for `config.epochs` epochs.
pub fn train(model: &mut Model, data: &[Example], config: &TrainConfig) -> Result<TrainLog> {
    train_with(model, data, config, |_| {})
}

/// Trains and calls `on_epoch` after every epoch.
pub fn train_with(
    model: &mut Model,
    data: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut log = TrainLog::default();
    for _ in 0..config.epochs {
        let rec = trainer.run_epoch(model, data)?;
        on_epoch(&rec);
        log.epochs.push(rec);
    }
    Ok(log)
}

/// Class probabilities for every example in evaluation mode, in order.
pub fn predict_scores(model: &Model, data: &[Example], batch_size: usize) -> Result<Matrix> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let k = model.config().num_classes;
    let mut out = Vec::with_capacity(data.len() * k);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, _) = make_batch(data, chunk)?;
        out.extend_from_slice(model.forward(&x)?.as_slice());
    }
    Matrix::new(data.len(), k, out)
}

/// Evaluation-mode accuracy.
pub fn evaluate(model: &Model, data: &[Example], batch_size: usize) -> Result<f64> {
    check_dataset(model, data)?;
    let scores = predict_scores(model, data, batch_size)?;
    let hits = predictions(&scores)
        .iter()
        .zip(data)
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}
