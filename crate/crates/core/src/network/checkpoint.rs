//! Model checkpoint container.
//!
//! ```text
//! cdgc-checkpoint 1
//! config <n>              followed by n lines of canonical backbone config
//! graph <n>               followed by n lines of graph text
//! param <name> <rows> <cols>     (or `param <name> scalar`), declaration order
//! stats <name> <channels>        batch norm running statistics
//! data
//! <little-endian f64: every parameter in order, then mean and var of every stats entry>
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Value;
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::network::config::BackboneConfig;
use crate::network::model::Model;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "cdgc-checkpoint";

fn dims(v: &Value) -> String {
    match v {
        Value::Scalar(_) => "scalar".into(),
        Value::Mat(m) => format!("{} {}", m.rows(), m.cols()),
        Value::Map(m) => {
            let s = m.shape();
            format!("{} {} {} {}", s.batch, s.channels, s.frames, s.vertices)
        }
    }
}

pub fn checkpoint_bytes(model: &Model, graph: &SkeletonGraph) -> Vec<u8> {
    let config = model.config().to_text();
    let graph_text = graph.to_text();
    let mut header = format!("{MAGIC} {CHECKPOINT_VERSION}\n");
    header += &format!("config {}\n{config}", config.lines().count());
    header += &format!("graph {}\n{graph_text}", graph_text.lines().count());
    for p in model.params() {
        header += &format!("param {} {}\n", p.name, dims(&p.value));
    }
    for s in model.running_stats() {
        header += &format!("stats {} {}\n", s.name, s.stats.mean.len());
    }
    header += "data\n";
    let mut out = header.into_bytes();
    let values = model
        .params()
        .iter()
        .flat_map(|p| p.value.as_slice().iter())
        .chain(
            model
                .running_stats()
                .iter()
                .flat_map(|s| s.stats.mean.iter().chain(&s.stats.var)),
        );
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(model: &Model, graph: &SkeletonGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model, graph)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, SkeletonGraph)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

struct Lines<'a> {
    text: &'a str,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let (line, rest) = self.text.split_once('\n').ok_or(Error::Parse {
            line: self.line + 1,
            msg: "unexpected end of checkpoint header".into(),
        })?;
        self.text = rest;
        self.line += 1;
        Ok(line)
    }

    fn block(&mut self, key: &str) -> Result<String> {
        let line = self.next()?;
        let n: usize = line
            .strip_prefix(key)
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| self.err(format!("expected `{key} <lines>`, got `{line}`")))?;
        let mut out = String::new();
        for _ in 0..n {
            out += self.next()?;
            out.push('\n');
        }
        Ok(out)
    }

    fn err(&self, msg: String) -> Error {
        Error::Parse { line: self.line, msg }
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Model, SkeletonGraph)> {
    let marker = b"\ndata\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Format("checkpoint has no data section".into()))?;
    let header = std::str::from_utf8(&bytes[..split + 1]).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let payload = &bytes[split + marker.len()..];
    let mut lines = Lines { text: header, line: 0 };
    let first = lines.next()?;
    if first != format!("{MAGIC} {CHECKPOINT_VERSION}") {
        return Err(Error::Format(format!("unsupported checkpoint header `{first}`")));
    }
    let config = BackboneConfig::parse(&lines.block("config")?)?;
    let graph = SkeletonGraph::parse(&lines.block("graph")?)?;
    let mut model = Model::new(config, &graph, 0)?;
    let n_params = model.params().len();
    for i in 0..n_params {
        let line = lines.next()?;
        let p = &model.params()[i];
        let expected = format!("param {} {}", p.name, dims(&p.value));
        if line != expected {
            return Err(lines.err(format!("expected `{expected}`, got `{line}`")));
        }
    }
    for i in 0..model.running_stats().len() {
        let line = lines.next()?;
        let s = &model.running_stats()[i];
        let expected = format!("stats {} {}", s.name, s.stats.mean.len());
        if line != expected {
            return Err(lines.err(format!("expected `{expected}`, got `{line}`")));
        }
    }
    if !lines.text.is_empty() {
        return Err(lines.err("unexpected header content before data".into()));
    }
    let total = model.param_count()
        + model.running_stats().iter().map(|s| 2 * s.stats.mean.len()).sum::<usize>();
    if payload.len() != total * 8 {
        return Err(Error::Format(format!(
            "checkpoint data holds {} bytes, header describes {}",
            payload.len(),
            total * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for p in model.params_mut() {
        for v in p.value.as_mut_slice() {
            *v = values.next().expect("length checked");
        }
    }
    for s in model.running_stats_mut() {
        for v in s.stats.mean.iter_mut().chain(s.stats.var.iter_mut()) {
            *v = values.next().expect("length checked");
        }
    }
    Ok((model, graph))
}
