use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, GradBundle, GradientTape, Value, Var};
use crate::error::{Error, Result};
use crate::graph::{adjacency, PartitionedAdjacency, SkeletonGraph};
use crate::network::config::{AlphaMode, BackboneConfig, BasicBlockConfig, SpatialOp, TemporalOp};
use crate::tensor::{FeatureMap, Matrix};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Value,
}

/// Running statistics of one batch norm, used in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub stats: BatchStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics and is differentiable.
    Train,
    /// Batch norm uses running statistics; no gradient path.
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
enum Spatial {
    Graph { weights: Vec<usize> },
    Shift { weight: usize, mask: usize },
}

#[derive(Clone, Debug)]
enum Skip {
    None,
    Identity,
    Project { weight: usize, bn: Bn },
}

#[derive(Clone, Debug)]
struct Block {
    cfg: BasicBlockConfig,
    spatial: Spatial,
    alpha: Option<usize>,
    spatial_bn: Bn,
    down: Skip,
    temporal: usize,
    temporal_bn: Bn,
    residual: Skip,
}

/// The assembled network: input batch norm, basic blocks, global average
/// pooling and a linear classifier.
///
/// Each basic block is
///
/// ```text
/// s = relu(bn(spatial(x)) + down(x))
/// y = relu(bn(subsample(temporal(s))) + residual(x))
/// ```
///
/// where `down` is the identity at equal widths and a 1x1 projection with
/// batch norm otherwise, and `residual` is absent, the (subsampled)
/// identity, or a projection with batch norm when the width changes.
#[derive(Clone, Debug)]
pub struct Model {
    config: BackboneConfig,
    adjacency: Arc<PartitionedAdjacency>,
    params: Vec<Parameter>,
    running: Vec<RunningStats>,
    input_bn: Bn,
    blocks: Vec<Block>,
    fc_weight: usize,
    fc_bias: usize,
}

/// One recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: GradientTape,
    pub logits: Var,
    /// Tape handle of every parameter, in declaration order.
    pub params: Vec<Var>,
    /// Batch statistics per batch norm (train mode only, else empty).
    pub batch_stats: Vec<BatchStats>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Parameter>,
    running: Vec<RunningStats>,
}

impl Builder {
    fn push(&mut self, name: String, value: impl Into<Value>) -> usize {
        self.params.push(Parameter {
            name,
            value: value.into(),
        });
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> usize {
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.push(name, Matrix::new(rows, cols, data).expect("sized buffer"))
    }

    fn kaiming(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> usize {
        self.uniform(name, rows, cols, (6.0 / fan_in as f64).sqrt())
    }

    fn bn(&mut self, prefix: String, channels: usize) -> Bn {
        let gamma = self.push(format!("{prefix}.gamma"), Matrix::ones(1, channels));
        let beta = self.push(format!("{prefix}.beta"), Matrix::zeros(1, channels));
        self.running.push(RunningStats {
            name: prefix,
            stats: BatchStats {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            },
        });
        Bn {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }

    fn projection(&mut self, prefix: &str, cin: usize, cout: usize) -> Skip {
        let weight = self.kaiming(format!("{prefix}.w"), cin, cout, cin);
        let bn = self.bn(format!("{prefix}.bn"), cout);
        Skip::Project { weight, bn }
    }
}

impl Model {
    /// Builds the network with parameters drawn from `seed`. Two configs
    /// that differ only in the graph operator get identical parameters.
    pub fn new(config: BackboneConfig, graph: &SkeletonGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        if graph.num_vertices() != config.num_vertices {
            return Err(Error::Config {
                key: "num_vertices".into(),
                msg: format!("config has {} vertices, graph has {}", config.num_vertices, graph.num_vertices()),
            });
        }
        let adjacency = Arc::new(adjacency(graph)?);
        let v = config.num_vertices;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            running: Vec::new(),
        };
        let input_bn = b.bn("input_bn".into(), config.in_channels);
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for (i, cfg) in config.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            let (cin, cout) = (cfg.in_channels, cfg.out_channels);
            let spatial = match cfg.spatial_op {
                SpatialOp::Vanilla | SpatialOp::CdgcMatrix => Spatial::Graph {
                    weights: (0..adjacency.num_subsets())
                        .map(|k| b.kaiming(format!("{p}.spatial.w{k}"), cin, cout, cin))
                        .collect(),
                },
                SpatialOp::AcceleratedCdgc => {
                    let mask = b.push(format!("{p}.spatial.mask"), Matrix::ones(v, cin));
                    let weight = b.kaiming(format!("{p}.spatial.w"), cin, cout, cin);
                    Spatial::Shift { weight, mask }
                }
            };
            let alpha = match (cfg.spatial_op, config.alpha) {
                (SpatialOp::Vanilla, _) | (_, AlphaMode::Fixed(_)) => None,
                (_, AlphaMode::Learnable(a)) => Some(b.push(format!("{p}.spatial.alpha"), a)),
            };
            let spatial_bn = b.bn(format!("{p}.spatial.bn"), cout);
            let down = if cin == cout {
                Skip::Identity
            } else {
                b.projection(&format!("{p}.down"), cin, cout)
            };
            let temporal = match cfg.temporal_op {
                TemporalOp::Shift => b.kaiming(format!("{p}.temporal.w"), cout, cout, cout),
                TemporalOp::Conv { kernel } => {
                    b.kaiming(format!("{p}.temporal.w"), kernel * cout, cout, kernel * cout)
                }
            };
            let temporal_bn = b.bn(format!("{p}.temporal.bn"), cout);
            let residual = match (cfg.residual, cin == cout) {
                (false, _) => Skip::None,
                (true, true) => Skip::Identity,
                (true, false) => b.projection(&format!("{p}.residual"), cin, cout),
            };
            blocks.push(Block {
                cfg: cfg.clone(),
                spatial,
                alpha,
                spatial_bn,
                down,
                temporal,
                temporal_bn,
                residual,
            });
        }
        let width = config.final_channels();
        let fc_weight = b.uniform("fc.w".into(), width, config.num_classes, 1.0 / (width as f64).sqrt());
        let fc_bias = b.push("fc.b".into(), Matrix::zeros(1, config.num_classes));
        Ok(Self {
            config,
            adjacency,
            params: b.params,
            running: b.running,
            input_bn,
            blocks,
            fc_weight,
            fc_bias,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn adjacency(&self) -> &PartitionedAdjacency {
        &self.adjacency
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Value> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Value> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.as_slice().len()).sum()
    }

    /// Current value of every learnable alpha, block order.
    pub fn alphas(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .filter_map(|b| b.alpha)
            .map(|i| self.params[i].value.as_scalar().unwrap_or(f64::NAN))
            .collect()
    }

    /// Projects every learnable alpha back into `[0, 1]`.
    pub fn clamp_alphas(&mut self) {
        for i in self.blocks.iter().filter_map(|b| b.alpha) {
            if let Value::Scalar(a) = &mut self.params[i].value {
                *a = a.clamp(0.0, 1.0);
            }
        }
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        let s = x.shape();
        if s.channels != self.config.in_channels || s.vertices != self.config.num_vertices {
            return Err(Error::dim(
                "model input",
                s,
                format!("(_, {}, _, {})", self.config.in_channels, self.config.num_vertices),
            ));
        }
        Ok(())
    }

    /// Records a forward pass on a fresh tape.
    pub fn record(&self, x: &FeatureMap, mode: Mode) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut tape = GradientTape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let mut stats: Vec<Option<BatchStats>> = vec![None; self.running.len()];
        let mut ctx = Ctx {
            model: self,
            tape: &mut tape,
            params: &params,
            mode,
            stats: &mut stats,
        };
        let input = ctx.tape.leaf(x.clone());
        let mut h = ctx.bn(input, self.input_bn)?;
        for block in &self.blocks {
            h = ctx.block(block, h)?;
        }
        let pooled = ctx.tape.global_pool(h)?;
        let logits = ctx.tape.linear(pooled, params[self.fc_weight], params[self.fc_bias])?;
        let batch_stats = match mode {
            Mode::Train => stats.into_iter().map(|s| s.expect("every batch norm ran")).collect(),
            Mode::Eval => Vec::new(),
        };
        Ok(ForwardPass {
            tape,
            logits,
            params,
            batch_stats,
        })
    }

    /// Output of block `index` applied on its own to `x`, skipping the
    /// input batch norm and the classifier.
    pub fn block_output(&self, index: usize, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::arg(format!("block {index} out of range for {} blocks", self.blocks.len())))?;
        let s = x.shape();
        if s.channels != block.cfg.in_channels || s.vertices != self.config.num_vertices {
            return Err(Error::dim(
                "block input",
                s,
                format!("(_, {}, _, {})", block.cfg.in_channels, self.config.num_vertices),
            ));
        }
        let mut tape = GradientTape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let mut stats: Vec<Option<BatchStats>> = vec![None; self.running.len()];
        let mut ctx = Ctx {
            model: self,
            tape: &mut tape,
            params: &params,
            mode,
            stats: &mut stats,
        };
        let input = ctx.tape.leaf(x.clone());
        let y = ctx.block(block, input)?;
        Ok(tape.map(y)?.clone())
    }

    /// Class logits, `N x num_classes`.
    pub fn logits(&self, x: &FeatureMap, mode: Mode) -> Result<Matrix> {
        let pass = self.record(x, mode)?;
        Ok(pass.tape.mat(pass.logits)?.clone())
    }

    /// Class probabilities in evaluation mode; each row sums to one.
    pub fn forward(&self, x: &FeatureMap) -> Result<Matrix> {
        Ok(crate::autodiff::softmax_rows(&self.logits(x, Mode::Eval)?))
    }

    /// Mean cross-entropy of a training-mode pass and the gradient of every
    /// parameter. Also returns the batch statistics of the pass.
    pub fn loss_and_grads(&self, x: &FeatureMap, labels: &[usize]) -> Result<(f64, GradBundle, Vec<BatchStats>, Matrix)> {
        let mut pass = self.record(x, Mode::Train)?;
        let loss = pass.tape.cross_entropy(pass.logits, labels)?;
        let value = pass.tape.scalar(loss)?;
        let grads = pass.tape.backward(loss)?;
        let bundle = GradBundle::collect(
            &grads,
            self.params
                .iter()
                .zip(&pass.params)
                .map(|(p, &v)| (p.name.as_str(), v, &p.value)),
        );
        let logits = pass.tape.mat(pass.logits)?.clone();
        Ok((value, bundle, pass.batch_stats, logits))
    }

    /// Folds batch statistics into the running statistics. `counts` holds
    /// the number of values each norm saw (see [`Model::bn_counts`]);
    /// variances are stored unbiased.
    pub fn update_running_stats(&mut self, batch: &[BatchStats], counts: &[usize]) -> Result<()> {
        if batch.len() != self.running.len() || counts.len() != self.running.len() {
            return Err(Error::dim("update_running_stats", self.running.len(), (batch.len(), counts.len())));
        }
        let m = BN_MOMENTUM;
        for ((run, bs), &n) in self.running.iter_mut().zip(batch).zip(counts) {
            let n = n.max(2) as f64;
            for c in 0..run.stats.mean.len() {
                run.stats.mean[c] = (1.0 - m) * run.stats.mean[c] + m * bs.mean[c];
                run.stats.var[c] = (1.0 - m) * run.stats.var[c] + m * bs.var[c] * n / (n - 1.0);
            }
        }
        Ok(())
    }

    /// Number of values each batch norm sees for an input of this shape,
    /// block order (input batch norm first).
    pub fn bn_counts(&self, batch: usize, frames: usize) -> Vec<usize> {
        let v = self.config.num_vertices;
        let mut out = vec![0; self.running.len()];
        out[self.input_bn.stats] = batch * frames * v;
        let mut t = frames;
        for b in &self.blocks {
            out[b.spatial_bn.stats] = batch * t * v;
            if let Skip::Project { bn, .. } = b.down {
                out[bn.stats] = batch * t * v;
            }
            t = t.div_ceil(b.cfg.temporal_stride);
            out[b.temporal_bn.stats] = batch * t * v;
            if let Skip::Project { bn, .. } = b.residual {
                out[bn.stats] = batch * t * v;
            }
        }
        out
    }
}

struct Ctx<'a> {
    model: &'a Model,
    tape: &'a mut GradientTape,
    params: &'a [Var],
    mode: Mode,
    stats: &'a mut Vec<Option<BatchStats>>,
}

impl Ctx<'_> {
    fn bn(&mut self, x: Var, bn: Bn) -> Result<Var> {
        match self.mode {
            Mode::Train => {
                let (y, s) = self.tape.batch_norm(x, self.params[bn.gamma], self.params[bn.beta], BN_EPS)?;
                self.stats[bn.stats] = Some(s);
                Ok(y)
            }
            Mode::Eval => {
                let p = &self.model.params;
                self.tape.batch_norm_frozen(
                    x,
                    p[bn.gamma].value.as_slice(),
                    p[bn.beta].value.as_slice(),
                    &self.model.running[bn.stats].stats,
                    BN_EPS,
                )
            }
        }
    }

    fn skip(&mut self, skip: &Skip, x: Var, stride: usize) -> Result<Option<Var>> {
        match *skip {
            Skip::None => Ok(None),
            Skip::Identity => Ok(Some(self.tape.subsample(x, stride)?)),
            Skip::Project { weight, bn } => {
                let y = self.tape.subsample(x, stride)?;
                let y = self.tape.mix_channels(y, self.params[weight])?;
                Ok(Some(self.bn(y, bn)?))
            }
        }
    }

    fn alpha(&mut self, block: &Block) -> Var {
        match block.alpha {
            Some(i) => self.params[i],
            None => self.tape.leaf(self.model.config.alpha.initial()),
        }
    }

    fn block(&mut self, block: &Block, x: Var) -> Result<Var> {
        let adj = &self.model.adjacency;
        let s = match &block.spatial {
            Spatial::Graph { weights } => {
                let ws: Vec<Var> = weights.iter().map(|&i| self.params[i]).collect();
                if block.cfg.spatial_op == SpatialOp::Vanilla {
                    self.tape.vanilla_gconv(x, &ws, adj)?
                } else {
                    let alpha = self.alpha(block);
                    self.tape.cdgc_matrix(x, &ws, alpha, adj)?
                }
            }
            Spatial::Shift { weight, mask } => {
                let alpha = self.alpha(block);
                self.tape
                    .accelerated_cdgc(x, self.params[*weight], self.params[*mask], alpha)?
            }
        };
        let s = self.bn(s, block.spatial_bn)?;
        let s = match self.skip(&block.down, x, 1)? {
            Some(d) => self.tape.add(s, d)?,
            None => s,
        };
        let s = self.tape.relu(s)?;
        let t = match block.cfg.temporal_op {
            TemporalOp::Shift => {
                let shifted = self.tape.temporal_shift(s)?;
                self.tape.mix_channels(shifted, self.params[block.temporal])?
            }
            TemporalOp::Conv { kernel } => self.tape.temporal_conv(s, self.params[block.temporal], kernel)?,
        };
        let t = self.tape.subsample(t, block.cfg.temporal_stride)?;
        let t = self.bn(t, block.temporal_bn)?;
        let out = match self.skip(&block.residual, x, block.cfg.temporal_stride)? {
            Some(r) => self.tape.add(t, r)?,
            None => t,
        };
        self.tape.relu(out)
    }
}
