use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    finite_difference_check, CheckReport, GradientTape, Value, Var, DEFAULT_STEP, PASS_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::graph::adjacency;
use crate::harness::random::{random_connected_graph, random_map, random_matrix};
use crate::network::{AlphaMode, BackboneConfig, BasicBlockConfig, Model, SpatialOp};
use crate::tensor::{Matrix, Shape};

/// Tolerance for whole-model checks, where batch norm and several layers
/// compound rounding.
pub const MODEL_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    /// Each spatial operator on its own, every input and parameter.
    Operator,
    /// One strided, width-changing basic block under a classifier head.
    Block,
    /// A two-block network.
    Model,
}

impl GradScope {
    pub fn tolerance(self) -> f64 {
        match self {
            GradScope::Operator | GradScope::Block => PASS_TOLERANCE,
            GradScope::Model => MODEL_TOLERANCE,
        }
    }

    pub fn default_seeds(self) -> usize {
        match self {
            GradScope::Operator => 20,
            GradScope::Block | GradScope::Model => 5,
        }
    }
}

impl fmt::Display for GradScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradScope::Operator => "operator",
            GradScope::Block => "block",
            GradScope::Model => "model",
        })
    }
}

impl FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "operator" => Ok(GradScope::Operator),
            "block" => Ok(GradScope::Block),
            "model" => Ok(GradScope::Model),
            _ => Err(Error::arg(format!("unknown gradcheck scope `{s}` (operator, block, model)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    /// `<case>.<leaf>`, e.g. `cdgc_matrix.w1`.
    pub name: String,
    pub seed: u64,
    pub report: CheckReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub scope: GradScope,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.report.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries
            .iter()
            .fold(None, |best: Option<&GradcheckEntry>, e| match best {
                Some(b) if b.report.max_relative_error >= e.report.max_relative_error => Some(b),
                _ => Some(e),
            })
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() < self.scope.tolerance()
    }

    /// Entries above the scope tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &GradcheckEntry> {
        let tol = self.scope.tolerance();
        self.entries.iter().filter(move |e| e.report.max_relative_error >= tol)
    }
}

/// Checks the analytic gradient of every leaf of a scalar function built on
/// a tape against central differences.
fn check_leaves<F>(case: &str, seed: u64, leaves: &[(String, Value)], build: F) -> Result<Vec<GradcheckEntry>>
where
    F: Fn(&mut GradientTape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Value]| -> Result<(GradientTape, Vec<Var>, Var)> {
        let mut tape = GradientTape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let values: Vec<Value> = leaves.iter().map(|(_, v)| v.clone()).collect();
    let (tape, vars, loss) = eval(&values)?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::with_capacity(leaves.len());
    for (i, (name, primal)) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zero(vars[i], primal);
        let report = finite_difference_check(
            |p| {
                let mut vals = values.clone();
                vals[i].as_mut_slice().copy_from_slice(p);
                let (tape, _, loss) = eval(&vals)?;
                tape.scalar(loss)
            },
            primal.as_slice(),
            analytic.as_slice(),
            DEFAULT_STEP,
        )?;
        out.push(GradcheckEntry {
            name: format!("{case}.{name}"),
            seed,
            report,
        });
    }
    Ok(out)
}

fn operator_cases(seed: u64) -> Result<Vec<GradcheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = rng.random_range(3..=7);
    let graph = random_connected_graph(&mut rng, v);
    let adj = Arc::new(adjacency(&graph)?);
    let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let shape = Shape::new(2, cin, 2, v);
    let x = random_map(&mut rng, shape);
    let alpha: f64 = rng.random_range(0.05..0.95);
    let ws: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, cin, cout)).collect();
    let mask = random_matrix(&mut rng, v, cin);
    let probe = Value::Map(random_map(&mut rng, shape.with_channels(cout)));

    let mut graph_leaves: Vec<(String, Value)> = vec![("x".into(), x.clone().into())];
    graph_leaves.extend(ws.iter().enumerate().map(|(k, w)| (format!("w{k}"), w.clone().into())));
    let mut out = check_leaves("vanilla", seed, &graph_leaves, |t, v| {
        let y = t.vanilla_gconv(v[0], &v[1..4], &adj)?;
        t.dot(y, probe.clone())
    })?;

    graph_leaves.push(("alpha".into(), alpha.into()));
    out.extend(check_leaves("cdgc_matrix", seed, &graph_leaves, |t, v| {
        let y = t.cdgc_matrix(v[0], &v[1..4], v[4], &adj)?;
        t.dot(y, probe.clone())
    })?);

    let shift_leaves: Vec<(String, Value)> = vec![
        ("x".into(), x.into()),
        ("w".into(), ws[0].clone().into()),
        ("mask".into(), mask.into()),
        ("alpha".into(), alpha.into()),
    ];
    out.extend(check_leaves("accelerated_cdgc", seed, &shift_leaves, |t, v| {
        let y = t.accelerated_cdgc(v[0], v[1], v[2], v[3])?;
        t.dot(y, probe.clone())
    })?);
    Ok(out)
}

/// Checks every parameter of `model` under a training-mode cross-entropy.
fn model_case(case: &str, seed: u64, model: &Model, batch: usize, frames: usize) -> Result<Vec<GradcheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let cfg = model.config();
    let x = random_map(&mut rng, Shape::new(batch, cfg.in_channels, frames, cfg.num_vertices));
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let (_, grads, _, _) = model.loss_and_grads(&x, &labels)?;
    let mut out = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        let report = finite_difference_check(
            |vals| {
                let mut m = model.clone();
                m.params_mut()[i].value.as_mut_slice().copy_from_slice(vals);
                let mut pass = m.record(&x, crate::network::Mode::Train)?;
                let loss = pass.tape.cross_entropy(pass.logits, &labels)?;
                pass.tape.scalar(loss)
            },
            p.value.as_slice(),
            grads.at(i).as_slice(),
            DEFAULT_STEP,
        )?;
        out.push(GradcheckEntry {
            name: format!("{case}.{}", p.name),
            seed,
            report,
        });
    }
    Ok(out)
}

fn perturb(model: &mut Model, rng: &mut ChaCha8Rng) {
    // Move batch norm affines and masks off their neutral start and widen
    // the classifier so interior gradients sit well above the
    // central-difference noise floor of an order-one loss.
    for p in model.params_mut() {
        let values = p.value.as_mut_slice();
        if p.name.ends_with("gamma") {
            values.iter_mut().for_each(|v| *v = rng.random_range(1.0..2.0));
        } else if p.name.ends_with("beta") {
            values.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        } else if p.name.ends_with("mask") {
            values.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        } else if p.name == "fc.w" {
            values.iter_mut().for_each(|v| *v *= 4.0);
        }
    }
}

fn network_cases(scope: GradScope, seed: u64) -> Result<Vec<GradcheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = rng.random_range(3..=6);
    let graph = random_connected_graph(&mut rng, v);
    let mut out = Vec::new();
    for op in [SpatialOp::CdgcMatrix, SpatialOp::AcceleratedCdgc] {
        let alpha = AlphaMode::Learnable(rng.random_range(0.1..0.9));
        let mut config = match scope {
            GradScope::Block => BackboneConfig {
                in_channels: 3,
                num_vertices: v,
                num_classes: 3,
                blocks: vec![BasicBlockConfig {
                    in_channels: 3,
                    out_channels: 4,
                    spatial_op: op,
                    temporal_op: op.default_temporal(),
                    temporal_stride: 2,
                    residual: true,
                }],
                alpha,
            },
            _ => BackboneConfig::from_schedule(op, &[4, 6], 3, v, 3, alpha),
        };
        if op == SpatialOp::CdgcMatrix {
            for b in &mut config.blocks {
                b.temporal_op = crate::network::TemporalOp::Conv { kernel: 3 };
            }
        }
        let mut model = Model::new(config, &graph, seed)?;
        perturb(&mut model, &mut rng);
        out.extend(model_case(&format!("{scope}.{op}"), seed, &model, 3, 4)?);
    }
    Ok(out)
}

/// Runs `seeds` consecutive seeds starting at `seed`.
pub fn gradcheck(scope: GradScope, seed: u64, seeds: usize) -> Result<GradcheckReport> {
    let mut entries = Vec::new();
    for s in (0..seeds as u64).map(|k| seed.wrapping_add(k)) {
        entries.extend(match scope {
            GradScope::Operator => operator_cases(s)?,
            GradScope::Block | GradScope::Model => network_cases(scope, s)?,
        });
    }
    Ok(GradcheckReport { scope, entries })
}
