use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cdgc::data::{derive_stream, examples_from_clips, load_clip, load_manifest, Example, StreamKind};
use cdgc::harness::{
    alpha_sweep, bench, bench_reports_csv, equivcheck, gradcheck, replay_instance, sweep_csv, BenchOptions,
    EquivOptions, GradScope, SweepOptions, TaskOptions, EQUIV_TOLERANCE,
};
use cdgc::network::{
    fuse_scores, load_checkpoint, parse_key_values, save_checkpoint, scores_from_csv, scores_to_csv, train_with,
    AlphaMode, BackboneConfig, Model, SpatialOp, TrainConfig, DESK_CHANNELS, FULL_CHANNELS,
};
use cdgc::tensor::FeatureMap;
use cdgc::{Error, SkeletonGraph};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "cdgc", version, about = "Central-difference graph convolution: checks, training and benchmarks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. They override keys from `--config`,
/// which override the built-in defaults.
#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Skeleton graph file; the 25-joint NTU skeleton when absent.
    #[arg(long, global = true)]
    graph: Option<PathBuf>,
    /// A fixed value in [0, 1], `learnable` or `learnable:<init>`. A comma
    /// separated list for `alpha-sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    alpha: Vec<String>,
    /// vanilla, cdgc_matrix or accelerated_cdgc. A comma separated list for `bench`.
    #[arg(long, global = true, value_delimiter = ',')]
    variant: Vec<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    classes: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compares the per-node reference against the matrix form on random instances.
    Equivcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Re-runs the instance described by a replay artifact.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Checks analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value = "operator")]
        scope: String,
        /// Number of consecutive seeds; 20 for operator scope, 5 otherwise.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Times matrix and accelerated training on the synthetic task.
    Bench {
        #[arg(long)]
        clips_per_class: Option<usize>,
        /// Train accuracy that counts as converged.
        #[arg(long, default_value_t = 0.9)]
        target: f64,
    },
    /// Trains the synthetic task once per alpha.
    AlphaSweep {
        #[arg(long)]
        clips_per_class: Option<usize>,
    },
    /// Class probabilities for clip files, as CSV.
    Forward {
        /// Trained model; a freshly initialized one from the settings otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Manifest of clips to score, in addition to CLIPS.
        #[arg(long)]
        manifest: Option<PathBuf>,
        clips: Vec<PathBuf>,
    },
    /// Prints the trainable parameter count.
    Params {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Trains a model and writes a checkpoint to `--out`.
    Train {
        /// Clip manifest; the synthetic task when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Per-epoch CSV log; stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        clips_per_class: Option<usize>,
    },
    /// Weighted average of score CSVs.
    Fuse {
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        /// One weight per file; equal weights when absent.
        #[arg(long, value_delimiter = ',')]
        weights: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

impl Preset {
    fn channels(self) -> &'static [usize] {
        match self {
            Preset::Desk => &DESK_CHANNELS,
            Preset::Full => &FULL_CHANNELS,
        }
    }
}

/// Failure classes and their exit codes.
enum Failure {
    /// A check ran and did not pass.
    Check(String),
    /// Bad flags, settings or input files.
    Usage(String),
    /// Anything else that went wrong while running.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) | Error::Dimension { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

const RUN_KEYS: [&str; 10] = [
    "seed",
    "epochs",
    "classes",
    "batch_size",
    "clips_per_class",
    "frames",
    "stream",
    "variant",
    "preset",
    "learning_rate",
];

/// Resolved settings: defaults, then config file, then flags.
#[derive(Clone, Debug)]
struct Settings {
    seed: u64,
    epochs: usize,
    classes: Option<usize>,
    batch_size: usize,
    clips_per_class: usize,
    frames: usize,
    stream: StreamKind,
    variants: Vec<SpatialOp>,
    alphas: Vec<String>,
    preset: Preset,
    learning_rate: Option<f64>,
    backbone: Option<BackboneConfig>,
    graph: SkeletonGraph,
}

fn config_value<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| Failure::Usage(format!("config error for key `{key}`: cannot parse `{value}`")))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

impl Settings {
    fn load(common: &Common) -> CliResult<Self> {
        let task = TaskOptions::default();
        let mut s = Settings {
            seed: 0,
            epochs: 30,
            classes: None,
            batch_size: task.batch_size,
            clips_per_class: task.clips_per_class,
            frames: task.frames,
            stream: task.stream,
            variants: Vec::new(),
            alphas: Vec::new(),
            preset: Preset::Desk,
            learning_rate: None,
            backbone: None,
            graph: SkeletonGraph::ntu(),
        };
        if let Some(path) = &common.config {
            let mut map = parse_key_values(&read_text(path)?)?;
            s.apply_run_keys(&mut map)?;
            if let Some(a) = map.get("alpha") {
                s.alphas = vec![a.clone()];
            }
            if map.keys().any(|k| k != "alpha") {
                s.backbone = Some(BackboneConfig::from_map(&map)?);
            }
        }
        if let Some(seed) = common.seed {
            s.seed = seed;
        }
        if let Some(e) = common.epochs {
            s.epochs = e;
        }
        if let Some(c) = common.classes {
            s.classes = Some(c);
        }
        if !common.variant.is_empty() {
            s.variants = common.variant.iter().map(|v| v.parse()).collect::<Result<_, Error>>()?;
        }
        if !common.alpha.is_empty() {
            s.alphas = common.alpha.clone();
        }
        if let Some(path) = &common.graph {
            s.graph = SkeletonGraph::parse(&read_text(path)?)?;
        }
        Ok(s)
    }

    fn apply_run_keys(&mut self, map: &mut BTreeMap<String, String>) -> CliResult<()> {
        for key in RUN_KEYS {
            let Some(v) = map.remove(key) else { continue };
            match key {
                "seed" => self.seed = config_value(key, &v)?,
                "epochs" => self.epochs = config_value(key, &v)?,
                "classes" => self.classes = Some(config_value(key, &v)?),
                "batch_size" => self.batch_size = config_value(key, &v)?,
                "clips_per_class" => self.clips_per_class = config_value(key, &v)?,
                "frames" => self.frames = config_value(key, &v)?,
                "stream" => self.stream = config_value(key, &v)?,
                "variant" => self.variants = vec![config_value(key, &v)?],
                "preset" => {
                    self.preset = Preset::from_str(&v, true)
                        .map_err(|_| Failure::Usage(format!("config error for key `preset`: unknown preset `{v}`")))?
                }
                "learning_rate" => self.learning_rate = Some(config_value(key, &v)?),
                _ => unreachable!(),
            }
        }
        Ok(())
    }

    fn variant(&self, default: SpatialOp) -> CliResult<SpatialOp> {
        match self.variants.as_slice() {
            [] => Ok(default),
            [v] => Ok(*v),
            _ => Err(Failure::Usage("this command takes a single --variant".into())),
        }
    }

    fn alpha(&self) -> CliResult<Option<AlphaMode>> {
        match self.alphas.as_slice() {
            [] => Ok(None),
            [a] => Ok(Some(a.parse()?)),
            _ => Err(Failure::Usage("this command takes a single --alpha".into())),
        }
    }

    fn num_classes(&self) -> usize {
        self.classes.unwrap_or(TaskOptions::default().classes)
    }

    /// Config-file backbone with flag overrides, or the preset schedule.
    fn backbone(&self) -> CliResult<BackboneConfig> {
        let cfg = match &self.backbone {
            Some(b) => {
                let mut b = b.clone();
                if let Some(v) = self.variants.first() {
                    b = b.with_spatial_op(*v);
                }
                if let Some(a) = self.alpha()? {
                    b = b.with_alpha(a);
                }
                if let Some(c) = self.classes {
                    b.num_classes = c;
                }
                b
            }
            None => BackboneConfig::from_schedule(
                self.variant(SpatialOp::AcceleratedCdgc)?,
                self.preset.channels(),
                3,
                self.graph.num_vertices(),
                self.num_classes(),
                self.alpha()?.unwrap_or(AlphaMode::Fixed(AlphaMode::DEFAULT_ALPHA)),
            ),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn task(&self) -> TaskOptions {
        let channels = match &self.backbone {
            Some(b) => b.blocks.iter().map(|b| b.out_channels).collect(),
            None => self.preset.channels().to_vec(),
        };
        TaskOptions {
            classes: self.num_classes(),
            clips_per_class: self.clips_per_class,
            frames: self.frames,
            batch_size: self.batch_size,
            channels,
            stream: self.stream,
            graph: self.graph.clone(),
        }
    }

    fn train_config(&self) -> CliResult<TrainConfig> {
        let mut cfg = TrainConfig::scaled(self.epochs, self.batch_size, self.seed);
        if let Some(lr) = self.learning_rate {
            cfg.learning_rate = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Runtime(e.to_string())),
    }
}

fn check_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("CDGC_THREADS") else {
        return Ok(());
    };
    match raw.trim().parse::<usize>() {
        Ok(1) => Ok(()),
        Ok(n) if n > 1 => {
            eprintln!("note: CDGC_THREADS={n} requested; all kernels run on one thread");
            Ok(())
        }
        _ => Err(Failure::Usage(format!("CDGC_THREADS must be a positive integer, got `{raw}`"))),
    }
}

fn cmd_equivcheck(s: &Settings, out: &Option<PathBuf>, trials: usize, replay: &Option<PathBuf>, fault: bool) -> CliResult<()> {
    if let Some(path) = replay {
        let inst = replay_instance(&read_text(path)?)?;
        let err = inst.relative_error(fault)?;
        let verdict = if err < EQUIV_TOLERANCE { "pass" } else { "fail" };
        emit(out, &format!("instance_seed={} relative_error={err:e} {verdict}\n", inst.instance_seed))?;
        return if err < EQUIV_TOLERANCE {
            Ok(())
        } else {
            Err(Failure::Check(format!("replayed instance diverges: {err:e}")))
        };
    }
    if trials == 0 {
        eprintln!("warning: zero trials, nothing was compared");
    }
    let report = equivcheck(&EquivOptions {
        trials,
        seed: s.seed,
        inject_fault: fault,
    })?;
    let alphas: Vec<String> = report.alphas_seen.iter().map(|a| a.to_string()).collect();
    let summary = format!(
        "trials={} max_relative_error={:e} tolerance={:e} alphas={} {}\n",
        report.trials,
        report.max_relative_error,
        EQUIV_TOLERANCE,
        alphas.join(","),
        if report.passed() { "pass" } else { "fail" }
    );
    if report.passed() {
        return emit(out, &summary);
    }
    let worst = report.worst.as_ref().expect("a failing report has a worst instance");
    emit(out, &format!("{summary}{}", worst.to_text()))?;
    Err(Failure::Check(format!(
        "cdgc_matrix diverges from cdgc_naive on instance {}",
        worst.instance_seed
    )))
}

fn cmd_gradcheck(s: &Settings, out: &Option<PathBuf>, scope: &str, seeds: Option<usize>) -> CliResult<()> {
    let scope: GradScope = scope.parse()?;
    let report = gradcheck(scope, s.seed, seeds.unwrap_or(scope.default_seeds()))?;
    let mut csv = String::from("name,seed,max_relative_error\n");
    for e in &report.entries {
        csv.push_str(&format!("{},{},{:e}\n", e.name, e.seed, e.report.max_relative_error));
    }
    emit(out, &csv)?;
    eprintln!(
        "gradcheck {scope}: max relative error {:e}, tolerance {:e}",
        report.max_relative_error(),
        scope.tolerance()
    );
    let failed: Vec<String> = report.failures().map(|e| format!("{} (seed {})", e.name, e.seed)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn cmd_bench(s: &Settings, out: &Option<PathBuf>, clips: Option<usize>, target: f64) -> CliResult<()> {
    let mut task = s.task();
    if let Some(c) = clips {
        task.clips_per_class = c;
    }
    let defaults = BenchOptions::default();
    let opts = BenchOptions {
        variants: if s.variants.is_empty() { defaults.variants.clone() } else { s.variants.clone() },
        task,
        epochs: s.epochs,
        target_accuracy: target,
        seed: s.seed,
        ..defaults
    };
    let reports = bench(&opts)?;
    emit(out, &bench_reports_csv(&reports))?;
    let time = |op| reports.iter().find(|r| r.variant == op).map(|r| r.seconds_per_epoch);
    if let (Some(m), Some(a)) = (time(SpatialOp::CdgcMatrix), time(SpatialOp::AcceleratedCdgc)) {
        eprintln!("speedup accelerated over matrix: {:.2}x", m / a);
    }
    Ok(())
}

fn cmd_alpha_sweep(s: &Settings, out: &Option<PathBuf>, clips: Option<usize>) -> CliResult<()> {
    let mut task = s.task();
    if let Some(c) = clips {
        task.clips_per_class = c;
    }
    let defaults = SweepOptions::default();
    let alphas = if s.alphas.is_empty() {
        defaults.alphas.clone()
    } else {
        s.alphas
            .iter()
            .map(|a| a.trim().parse::<f64>().map_err(|_| Failure::Usage(format!("alpha `{a}` is not a number"))))
            .collect::<CliResult<_>>()?
    };
    let rows = alpha_sweep(&SweepOptions {
        alphas,
        variant: s.variant(defaults.variant)?,
        task,
        epochs: s.epochs,
        seed: s.seed,
    })?;
    emit(out, &sweep_csv(&rows))
}

fn load_inputs(clips: &[PathBuf], manifest: &Option<PathBuf>) -> CliResult<Vec<PathBuf>> {
    let mut paths = clips.to_vec();
    if let Some(m) = manifest {
        paths.extend(load_manifest(m)?.into_iter().map(|e| e.path));
    }
    if paths.is_empty() {
        return Err(Failure::Usage("no clips given".into()));
    }
    Ok(paths)
}

fn cmd_forward(
    s: &Settings,
    out: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    manifest: &Option<PathBuf>,
    clips: &[PathBuf],
) -> CliResult<()> {
    let (model, graph) = match checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => (Model::new(s.backbone()?, &s.graph, s.seed)?, s.graph.clone()),
    };
    let maps = load_inputs(clips, manifest)?
        .iter()
        .map(|p| Ok(derive_stream(&load_clip(p)?, s.stream, &graph)?))
        .collect::<CliResult<Vec<FeatureMap>>>()?;
    let probs = model.forward(&FeatureMap::stack(&maps)?)?;
    emit(out, &scores_to_csv(&probs))
}

fn cmd_params(s: &Settings, preset: Option<Preset>) -> CliResult<()> {
    let mut s = s.clone();
    if let Some(p) = preset {
        s.preset = p;
        s.backbone = None;
    }
    let model = Model::new(s.backbone()?, &s.graph, s.seed)?;
    emit(&None, &format!("{}\n", model.param_count()))
}

fn cmd_train(s: &Settings, out: &Option<PathBuf>, data: &Option<PathBuf>, log: &Option<PathBuf>, clips: Option<usize>) -> CliResult<()> {
    let Some(checkpoint) = out else {
        return Err(Failure::Usage("train needs --out for the checkpoint".into()));
    };
    let examples: Vec<Example> = match data {
        Some(path) => {
            let clips = load_manifest(path)?
                .into_iter()
                .map(|e| {
                    let mut clip = load_clip(&e.path)?;
                    clip.label = e.label;
                    Ok(clip)
                })
                .collect::<Result<Vec<_>, Error>>()?;
            examples_from_clips(&clips, s.stream, &s.graph)?
        }
        None => {
            let mut task = s.task();
            if let Some(c) = clips {
                task.clips_per_class = c;
            }
            task.dataset(s.seed)?
        }
    };
    let mut model = Model::new(s.backbone()?, &s.graph, s.seed)?;
    let cfg = s.train_config()?;
    let record = train_with(&mut model, &examples, &cfg, |r| {
        eprintln!("epoch {} loss {:.4} accuracy {:.4}", r.epoch, r.loss, r.accuracy)
    })?;
    save_checkpoint(&model, &s.graph, checkpoint)?;
    emit(log, &record.to_csv())
}

fn cmd_fuse(out: &Option<PathBuf>, files: &[PathBuf], weights: &[f64]) -> CliResult<()> {
    let sets = files
        .iter()
        .map(|p| Ok(scores_from_csv(&read_text(p)?)?))
        .collect::<CliResult<Vec<_>>>()?;
    let weights = if weights.is_empty() { vec![1.0; sets.len()] } else { weights.to_vec() };
    if weights.len() != sets.len() {
        return Err(Failure::Usage(format!("{} weights for {} score files", weights.len(), sets.len())));
    }
    emit(out, &scores_to_csv(&fuse_scores(&sets, &weights)?))
}

fn run(cli: Cli) -> CliResult<()> {
    check_threads()?;
    let s = Settings::load(&cli.common)?;
    let out = &cli.common.out;
    match &cli.command {
        Command::Equivcheck {
            trials,
            replay,
            inject_fault,
        } => cmd_equivcheck(&s, out, *trials, replay, *inject_fault),
        Command::Gradcheck { scope, seeds } => cmd_gradcheck(&s, out, scope, *seeds),
        Command::Bench { clips_per_class, target } => cmd_bench(&s, out, *clips_per_class, *target),
        Command::AlphaSweep { clips_per_class } => cmd_alpha_sweep(&s, out, *clips_per_class),
        Command::Forward {
            checkpoint,
            manifest,
            clips,
        } => cmd_forward(&s, out, checkpoint, manifest, clips),
        Command::Params { preset } => cmd_params(&s, *preset),
        Command::Train {
            data,
            log,
            clips_per_class,
        } => cmd_train(&s, out, data, log, *clips_per_class),
        Command::Fuse { scores, weights } => cmd_fuse(out, scores, weights),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
