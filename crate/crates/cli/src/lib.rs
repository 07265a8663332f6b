//! Command-line experiments: data generation, training, streaming evaluation,
//! scheduler simulation and plotting.

pub mod viz;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use stmg::backbone::Backbone;
use stmg::checkpoint;
use stmg::config::ExperimentConfig;
use stmg::maskgen::{MaskGenerator, Polarity};
use stmg::pipeline::{pearson, run_stream, simulate, train, AggregationMode, Policy, StreamResult, StreamSummary, DEFAULT_GAMMA1, DEFAULT_GAMMA2};
use stmg::synthdata::{teacher_distortion_map, write_sequence, LabelOracle};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "stmg", version, about = "Spatial-temporal mask generation experiments on synthetic video")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run directory; overrides `output_dir` from the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Root that relative run directories resolve against.
    #[arg(long, global = true, env = "STMG_OUT_ROOT", value_name = "DIR", default_value = ".")]
    pub out_root: PathBuf,
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Inference policy.
    #[arg(long, global = true, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Key-frame interval for `--policy fixed`.
    #[arg(long, global = true)]
    pub interval: Option<usize>,
    /// Distortion bias on the block gates.
    #[arg(long = "dbb-bias", global = true, value_enum)]
    pub dbb_bias: Option<Toggle>,
    /// Feature aggregation: stmg, fixed:V, uniform, uniform_avg or random.
    #[arg(long, global = true, value_name = "MODE")]
    pub agg: Option<AggregationMode>,
    /// Whether the gate probability means keep or prune.
    #[arg(long = "phi-polarity", global = true, value_enum)]
    pub phi_polarity: Option<PolarityArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    /// Distortion-aware scheduling.
    Da,
    /// Fixed key-frame interval.
    Fixed,
    /// Full network on every frame.
    Full,
    /// Per-frame pruning without feature reuse.
    Pfp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolarityArg {
    Keep,
    Prune,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the training and held-out sequences to <run>/data.
    Gendata,
    /// Train backbone and mask generator; writes the checkpoint and a JSON-lines log.
    Train,
    /// Stream the held-out sequence through a checkpoint and write metrics.
    Eval {
        /// Defaults to <run>/model.safetensors.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Number of non-key frames whose masks are written as PNG.
        #[arg(long, default_value_t = 4)]
        dump_masks: usize,
    },
    /// Replay the key-frame scheduler on a text file of magnitudes.
    Simulate {
        /// Whitespace-separated magnitudes; `#` starts a comment.
        trace: PathBuf,
        /// Print JSON lines instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Scatter mIoU against FLOPs for evaluated runs.
    Plot {
        /// Eval directories or summary files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// A problem with the configuration or the command line.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || matches!(cause.downcast_ref::<stmg::Error>(), Some(stmg::Error::Config { .. })) {
            return EXIT_CONFIG;
        }
    }
    EXIT_RUNTIME
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

impl CommonArgs {
    /// Loads the config file (or defaults) and applies command-line overrides.
    pub fn resolve_config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
                ExperimentConfig::from_json(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(p) = self.policy {
            config.policy = self.policy_for(p, &config.policy)?;
        } else if let Some(interval) = self.interval {
            match &mut config.policy {
                Policy::Fixed { interval: i } => *i = interval,
                _ => return Err(config_error("--interval only applies to --policy fixed")),
            }
        }
        if let Some(t) = self.dbb_bias {
            config.maskgen.distortion_bias = t == Toggle::On;
        }
        if let Some(agg) = self.agg {
            config.aggregation = agg;
        }
        if let Some(p) = self.phi_polarity {
            config.maskgen.polarity = match p {
                PolarityArg::Keep => Polarity::Keep,
                PolarityArg::Prune => Polarity::Prune,
            };
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }

    fn policy_for(&self, arg: PolicyArg, current: &Policy) -> anyhow::Result<Policy> {
        if self.interval.is_some() && arg != PolicyArg::Fixed {
            return Err(config_error("--interval only applies to --policy fixed"));
        }
        Ok(match arg {
            PolicyArg::Da => match *current {
                p @ Policy::DistortionAware { .. } => p,
                _ => Policy::default(),
            },
            PolicyArg::Fixed => Policy::Fixed {
                interval: self.interval.unwrap_or(match *current {
                    Policy::Fixed { interval } => interval,
                    _ => 2,
                }),
            },
            PolicyArg::Full => Policy::AlwaysFull,
            PolicyArg::Pfp => Policy::PerFramePruning,
        })
    }

    pub fn run_dir(&self, config: &ExperimentConfig) -> PathBuf {
        if config.output_dir.is_absolute() {
            config.output_dir.clone()
        } else {
            self.out_root.join(&config.output_dir)
        }
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Simulate { trace, json } => {
            let config = cli.common.resolve_config()?;
            let out = std::io::stdout();
            cmd_simulate(&config, trace, *json, &mut out.lock())
        }
        Command::Plot { runs } => {
            let config = cli.common.resolve_config()?;
            let dir = cli.common.run_dir(&config);
            let path = cmd_plot(runs, &dir)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Gendata => {
            let config = cli.common.resolve_config()?;
            let dir = cli.common.run_dir(&config);
            cmd_gendata(&config, &dir)?;
            println!("{}", dir.join("data").display());
            Ok(())
        }
        Command::Train => {
            let config = cli.common.resolve_config()?;
            let dir = cli.common.run_dir(&config);
            let summary = cmd_train(&config, &dir, |line| eprintln!("{line}"))?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(())
        }
        Command::Eval { checkpoint, dump_masks } => {
            let config = cli.common.resolve_config()?;
            let dir = cli.common.run_dir(&config);
            let ckpt = checkpoint.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
            let report = cmd_eval(&config, &ckpt, &dir, *dump_masks)?;
            println!("{}", serde_json::to_string(&report.summary)?);
            Ok(())
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes `data/train/seq_NNN` and `data/eval` under `dir`.
pub fn cmd_gendata(config: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    let data = dir.join("data");
    for (i, seq) in config.training_sequences()?.iter().enumerate() {
        write_sequence(seq, &data.join("train").join(format!("seq_{i:03}")))?;
    }
    write_sequence(&config.eval_sequence()?, &data.join("eval"))?;
    write_json(&data.join("config.json"), config)?;
    Ok(())
}

/// Trains from scratch; writes `config.json`, `train_log.jsonl`, the checkpoint and `train_summary.json`.
pub fn cmd_train(
    config: &ExperimentConfig,
    dir: &Path,
    mut progress: impl FnMut(&str),
) -> anyhow::Result<stmg::pipeline::TrainSummary> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("config.json"), config)?;
    let data = config.training_sequences()?;
    let mut backbone = Backbone::new(config.backbone.clone(), config.seed)?;
    let mut generator = MaskGenerator::new(config.maskgen.clone(), &config.backbone, config.seed.wrapping_add(1))?;
    let mut log = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
    let summary = train(
        &mut backbone,
        &mut generator,
        &data,
        &config.train,
        &config.loss,
        config.seed.wrapping_add(2),
        |step| {
            let line = serde_json::to_string(step).expect("step log serializes");
            writeln!(log, "{line}")?;
            progress(&line);
            Ok(())
        },
    )?;
    log.flush()?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), config, &backbone, &generator)?;
    write_json(&dir.join("train_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: StreamSummary,
    /// Correlation of spatial-mask magnitude with the executed block fraction
    /// over frames that ran a pruned network.
    pub magnitude_keep_correlation: Option<f64>,
    /// Per-trial mIoU when aggregation is random; `summary.miou` is their mean.
    pub random_trial_miou: Option<Vec<f64>>,
    pub checkpoint: PathBuf,
    pub config: ExperimentConfig,
}

/// Correlation between mask magnitude and keep ratio over pruned frames.
pub fn magnitude_keep_correlation(result: &StreamResult) -> Option<f64> {
    let (mags, keeps): (Vec<f64>, Vec<f64>) = result
        .frames
        .iter()
        .filter_map(|f| Some((f.mask_magnitude?, f.block_mask.as_ref()?.keep_ratio())))
        .unzip();
    pearson(&mags, &keeps)
}

/// Applies the inference-time generator settings of `config` to a loaded generator.
pub fn apply_inference_settings(generator: &mut MaskGenerator, config: &ExperimentConfig) {
    let g = generator.config_mut();
    g.distortion_bias = config.maskgen.distortion_bias;
    g.polarity = config.maskgen.polarity;
}

/// Runs the configured policy and aggregation on the held-out sequence.
/// Random aggregation is repeated `eval.random_trials` times and averaged.
pub fn evaluate(config: &ExperimentConfig, backbone: &Backbone, generator: &MaskGenerator) -> anyhow::Result<(StreamResult, Option<Vec<f64>>)> {
    let seq = config.eval_sequence()?;
    let options = config.stream_options();
    let mut result = run_stream(backbone, Some(generator), &seq, &options)?;
    let trials = if config.aggregation == AggregationMode::Random {
        let mut mious = vec![result.summary.miou];
        for t in 1..config.eval.random_trials as u64 {
            let mut o = options;
            o.seed = options.seed.wrapping_add(t);
            mious.push(run_stream(backbone, Some(generator), &seq, &o)?.summary.miou);
        }
        result.summary.miou = mious.iter().sum::<f64>() / mious.len() as f64;
        Some(mious)
    } else {
        None
    };
    Ok((result, trials))
}

/// Writes `eval/<policy>_<aggregation>/{frames.jsonl, summary.json, masks/}` under `dir`.
pub fn cmd_eval(config: &ExperimentConfig, ckpt_path: &Path, dir: &Path, dump_masks: usize) -> anyhow::Result<EvalReport> {
    let ckpt = checkpoint::load_matching(ckpt_path, config).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let backbone = ckpt.backbone;
    let mut generator = ckpt.generator;
    apply_inference_settings(&mut generator, config);
    let (result, trials) = evaluate(config, &backbone, &generator)?;

    let name = format!("{}_{}", config.policy.label(), config.aggregation).replace([':', '.'], "-");
    let out = dir.join("eval").join(name);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut frames = BufWriter::new(File::create(out.join("frames.jsonl"))?);
    for r in &result.records {
        writeln!(frames, "{}", serde_json::to_string(r)?)?;
    }
    frames.flush()?;

    if dump_masks > 0 {
        dump_mask_images(config, &result, &out.join("masks"), dump_masks)?;
    }

    let report = EvalReport {
        summary: result.summary.clone(),
        magnitude_keep_correlation: magnitude_keep_correlation(&result),
        random_trial_miou: trials,
        checkpoint: ckpt_path.to_path_buf(),
        config: config.clone(),
    };
    write_json(&out.join(SUMMARY_FILE), &report)?;
    Ok(report)
}

fn dump_mask_images(config: &ExperimentConfig, result: &StreamResult, dir: &Path, limit: usize) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let seq = config.eval_sequence()?;
    let resolution = config.train.target_pooling.resolution(config.backbone.feature_stride);
    let scale = config.backbone.feature_stride as u32;
    let classes = config.backbone.num_classes.max(2) - 1;
    for f in result.frames.iter().filter(|f| f.spatial_mask.is_some()).take(limit) {
        let mask = &f.spatial_mask.as_ref().expect("filtered").values;
        let target = teacher_distortion_map(&LabelOracle, &seq, f.index, resolution)?.mapv(f64::from);
        viz::side_by_side(mask, &target, scale).save(dir.join(format!("mask_{:03}.png", f.index)))?;
        let pred: Array2<f64> = f.predicted.classes.mapv(|c| c as f64 / classes as f64);
        viz::mask_image(&pred, 1).save(dir.join(format!("pred_{:03}.png", f.index)))?;
    }
    Ok(())
}

/// Parses whitespace-separated magnitudes; `#` starts a comment.
pub fn parse_trace(text: &str) -> anyhow::Result<Vec<f64>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
            let v: f64 = tok
                .parse()
                .map_err(|_| config_error(format!("line {}: `{tok}` is not a number", n + 1)))?;
            out.push(v);
        }
    }
    if out.is_empty() {
        bail!(config_error("trace contains no magnitudes"));
    }
    Ok(out)
}

pub fn cmd_simulate(config: &ExperimentConfig, trace: &Path, json: bool, out: &mut impl Write) -> anyhow::Result<()> {
    let text = fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
    let mags = parse_trace(&text)?;
    let (g1, g2) = match config.policy {
        Policy::DistortionAware { gamma1, gamma2 } => (gamma1, gamma2),
        _ => (DEFAULT_GAMMA1, DEFAULT_GAMMA2),
    };
    let steps = simulate(&mags, g1, g2)?;
    if !json {
        writeln!(out, "step\tmagnitude\trole\tthreshold")?;
    }
    for s in &steps {
        if json {
            writeln!(out, "{}", serde_json::to_string(s)?)?;
        } else {
            writeln!(out, "{}\t{}\t{}\t{}", s.frame_index, s.magnitude, s.role.as_str(), s.threshold)?;
        }
    }
    Ok(())
}

/// Reads eval summaries and writes `flops_miou.svg` under `dir`.
pub fn cmd_plot(runs: &[PathBuf], dir: &Path) -> anyhow::Result<PathBuf> {
    let mut points = Vec::new();
    for run in runs {
        let path = if run.is_dir() { run.join(SUMMARY_FILE) } else { run.clone() };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        points.push(viz::ScatterPoint {
            label: format!("{}/{}", report.summary.policy, report.summary.aggregation),
            flops_ratio: report.summary.flops_ratio,
            miou: report.summary.miou,
        });
    }
    fs::create_dir_all(dir)?;
    let path = dir.join("flops_miou.svg");
    fs::write(&path, viz::scatter_svg(&points))?;
    Ok(path)
}
