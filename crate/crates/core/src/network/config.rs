use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Spatial operator of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpatialOp {
    Vanilla,
    CdgcMatrix,
    AcceleratedCdgc,
}

impl SpatialOp {
    pub const ALL: [SpatialOp; 3] = [SpatialOp::Vanilla, SpatialOp::CdgcMatrix, SpatialOp::AcceleratedCdgc];

    pub fn name(self) -> &'static str {
        match self {
            SpatialOp::Vanilla => "vanilla",
            SpatialOp::CdgcMatrix => "cdgc_matrix",
            SpatialOp::AcceleratedCdgc => "accelerated_cdgc",
        }
    }

    /// Temporal operator of the backbone this spatial operator ships in:
    /// the shift backbone pairs with the temporal shift, the adjacency
    /// backbones with a 9-tap temporal convolution.
    pub fn default_temporal(self) -> TemporalOp {
        match self {
            SpatialOp::AcceleratedCdgc => TemporalOp::Shift,
            SpatialOp::Vanilla | SpatialOp::CdgcMatrix => TemporalOp::Conv { kernel: 9 },
        }
    }
}

impl fmt::Display for SpatialOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpatialOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SpatialOp::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown spatial operator `{s}`")))
    }
}

/// Temporal operator of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemporalOp {
    /// Channel-grouped shift by -1/0/+1 frames, then a pointwise channel map.
    Shift,
    /// Zero-padded temporal convolution with an odd kernel.
    Conv { kernel: usize },
}

impl fmt::Display for TemporalOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemporalOp::Shift => f.write_str("shift"),
            TemporalOp::Conv { kernel } => write!(f, "conv{kernel}"),
        }
    }
}

impl FromStr for TemporalOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "shift" {
            return Ok(TemporalOp::Shift);
        }
        s.strip_prefix("conv")
            .and_then(|k| k.parse().ok())
            .filter(|k: &usize| k % 2 == 1)
            .map(|kernel| TemporalOp::Conv { kernel })
            .ok_or_else(|| Error::arg(format!("unknown temporal operator `{s}` (expected shift or conv<odd>)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaMode {
    Fixed(f64),
    /// Learned per layer, starting from the given value and kept in `[0, 1]`.
    Learnable(f64),
}

impl AlphaMode {
    pub const DEFAULT_ALPHA: f64 = 0.3;

    pub fn initial(self) -> f64 {
        match self {
            AlphaMode::Fixed(a) | AlphaMode::Learnable(a) => a,
        }
    }

    pub fn is_learnable(self) -> bool {
        matches!(self, AlphaMode::Learnable(_))
    }
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaMode::Fixed(a) => write!(f, "{a:?}"),
            AlphaMode::Learnable(a) => write!(f, "learnable:{a:?}"),
        }
    }
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |v: &str| {
            v.parse::<f64>()
                .ok()
                .filter(|a| (0.0..=1.0).contains(a))
                .ok_or_else(|| Error::arg(format!("alpha `{v}` is not a number in [0, 1]")))
        };
        if s == "learnable" {
            Ok(AlphaMode::Learnable(Self::DEFAULT_ALPHA))
        } else if let Some(v) = s.strip_prefix("learnable:") {
            Ok(AlphaMode::Learnable(parse(v)?))
        } else {
            Ok(AlphaMode::Fixed(parse(s)?))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub spatial_op: SpatialOp,
    pub temporal_op: TemporalOp,
    pub temporal_stride: usize,
    pub residual: bool,
}

impl BasicBlockConfig {
    fn to_text(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.in_channels,
            self.out_channels,
            self.temporal_stride,
            u8::from(self.residual),
            self.spatial_op,
            self.temporal_op
        )
    }

    fn parse(key: &str, s: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config {
            key: key.to_string(),
            msg,
        };
        let tokens: Vec<_> = s.split_ascii_whitespace().collect();
        let [cin, cout, stride, residual, spatial, temporal] = tokens.as_slice() else {
            return Err(bad("expected `<in> <out> <stride> <residual 0|1> <spatial_op> <temporal_op>`".into()));
        };
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("`{v}` is not an integer")));
        Ok(Self {
            in_channels: num(cin)?,
            out_channels: num(cout)?,
            temporal_stride: num(stride)?,
            residual: match *residual {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("residual must be 0 or 1, got `{other}`"))),
            },
            spatial_op: spatial.parse().map_err(|e: Error| bad(e.to_string()))?,
            temporal_op: temporal.parse().map_err(|e: Error| bad(e.to_string()))?,
        })
    }
}

/// Network layout: an input batch norm, the block stack, global average
/// pooling and a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_vertices: usize,
    pub num_classes: usize,
    pub blocks: Vec<BasicBlockConfig>,
    pub alpha: AlphaMode,
}

/// Channel schedule of the full-size backbone: input block plus nine blocks.
pub const FULL_CHANNELS: [usize; 10] = [64, 64, 64, 64, 128, 128, 128, 256, 256, 256];

/// Desk-scale schedule used for the synthetic task and the benchmark.
pub const DESK_CHANNELS: [usize; 4] = [8, 8, 16, 16];

impl BackboneConfig {
    /// Blocks for a channel schedule: the first block is the input block
    /// (no residual); every width change halves the frame rate.
    pub fn from_schedule(
        spatial_op: SpatialOp,
        channels: &[usize],
        in_channels: usize,
        num_vertices: usize,
        num_classes: usize,
        alpha: AlphaMode,
    ) -> Self {
        let temporal_op = spatial_op.default_temporal();
        let mut blocks = Vec::with_capacity(channels.len());
        let mut prev = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i > 0 && c != prev { 2 } else { 1 };
            blocks.push(BasicBlockConfig {
                in_channels: prev,
                out_channels: c,
                spatial_op,
                temporal_op,
                temporal_stride: stride,
                residual: i > 0,
            });
            prev = c;
        }
        Self {
            in_channels,
            num_vertices,
            num_classes,
            blocks,
            alpha,
        }
    }

    pub fn full(spatial_op: SpatialOp, num_vertices: usize, num_classes: usize) -> Self {
        Self::from_schedule(
            spatial_op,
            &FULL_CHANNELS,
            3,
            num_vertices,
            num_classes,
            AlphaMode::Fixed(AlphaMode::DEFAULT_ALPHA),
        )
    }

    pub fn desk(spatial_op: SpatialOp, num_vertices: usize, num_classes: usize) -> Self {
        Self::from_schedule(
            spatial_op,
            &DESK_CHANNELS,
            3,
            num_vertices,
            num_classes,
            AlphaMode::Fixed(AlphaMode::DEFAULT_ALPHA),
        )
    }

    pub fn with_alpha(mut self, alpha: AlphaMode) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_spatial_op(mut self, op: SpatialOp) -> Self {
        for b in &mut self.blocks {
            b.spatial_op = op;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.num_classes < 2 {
            return cfg("num_classes", format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_vertices == 0 || self.in_channels == 0 {
            return cfg("num_vertices", "vertex and input channel counts must be positive".into());
        }
        if self.blocks.is_empty() {
            return cfg("block", "backbone needs at least one block".into());
        }
        if !(0.0..=1.0).contains(&self.alpha.initial()) {
            return cfg("alpha", format!("{} outside [0, 1]", self.alpha.initial()));
        }
        let mut prev = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            let key = format!("block.{i}");
            if b.in_channels != prev {
                return cfg(&key, format!("input width {} does not follow previous width {prev}", b.in_channels));
            }
            if b.out_channels == 0 || b.temporal_stride == 0 {
                return cfg(&key, "widths and strides must be positive".into());
            }
            if let TemporalOp::Conv { kernel } = b.temporal_op {
                if kernel % 2 == 0 {
                    return cfg(&key, format!("temporal kernel {kernel} must be odd"));
                }
            }
            prev = b.out_channels;
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    /// Canonical `key=value` text; [`BackboneConfig::parse`] reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "num_vertices={}", self.num_vertices);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "alpha={}", self.alpha);
        for (i, b) in self.blocks.iter().enumerate() {
            let _ = writeln!(s, "block.{i}={}", b.to_text());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_key_values(text)?;
        Self::from_map(&map)
    }

    /// Builds a backbone from already parsed `key=value` pairs.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| {
            map.get(key).ok_or_else(|| Error::Config {
                key: key.into(),
                msg: "missing".into(),
            })
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Config {
                key: key.into(),
                msg: "not an integer".into(),
            })
        };
        let mut blocks = Vec::new();
        while let Some(v) = map.get(&format!("block.{}", blocks.len())) {
            blocks.push(BasicBlockConfig::parse(&format!("block.{}", blocks.len()), v)?);
        }
        for key in map.keys() {
            let known = matches!(key.as_str(), "in_channels" | "num_vertices" | "num_classes" | "alpha")
                || key
                    .strip_prefix("block.")
                    .and_then(|i| i.parse::<usize>().ok())
                    .is_some_and(|i| i < blocks.len());
            if !known {
                return Err(Error::Config {
                    key: key.clone(),
                    msg: "unknown key".into(),
                });
            }
        }
        let cfg = Self {
            in_channels: num("in_channels")?,
            num_vertices: num("num_vertices")?,
            num_classes: num("num_classes")?,
            alpha: get("alpha")?.parse().map_err(|e: Error| Error::Config {
                key: "alpha".into(),
                msg: e.to_string(),
            })?,
            blocks,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(Error::Parse {
            line: idx + 1,
            msg: format!("expected `key=value`, got `{line}`"),
        })?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config {
                key: k.trim().into(),
                msg: format!("duplicate key on line {}", idx + 1),
            });
        }
    }
    Ok(map)
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Zero-based epoch indices at which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Full-length schedule: 140 epochs, decays at 60, 80 and 100.
pub const FULL_EPOCHS: usize = 140;
pub const FULL_DECAY_EPOCHS: [usize; 3] = [60, 80, 100];

impl TrainConfig {
    /// Full schedule compressed to `epochs`: each milestone is scaled by
    /// `epochs / 140` and rounded up; milestones that collide are merged.
    pub fn scaled(epochs: usize, batch_size: usize, seed: u64) -> Self {
        let mut decay: Vec<usize> = FULL_DECAY_EPOCHS
            .iter()
            .map(|&m| (m * epochs).div_ceil(FULL_EPOCHS).clamp(1, epochs.max(1)))
            .collect();
        decay.dedup();
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            epochs,
            decay_epochs: decay,
            decay_factor: 0.1,
            batch_size,
            seed,
        }
    }

    /// Rate for zero-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        let mut lr = self.learning_rate;
        for _ in 0..steps {
            lr *= self.decay_factor;
        }
        lr
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.epochs == 0 {
            return cfg("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return cfg("batch_size", "must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return cfg("learning_rate", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return cfg("momentum", "must be in [0, 1)".into());
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1])
            || self.decay_epochs.iter().any(|&d| d < 1 || d > self.epochs)
        {
            return cfg(
                "decay_epochs",
                format!("{:?} must be strictly increasing within [1, {}]", self.decay_epochs, self.epochs),
            );
        }
        Ok(())
    }
}
