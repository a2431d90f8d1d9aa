//! `dspnet`: generate synthetic scenes, train, evaluate, inspect view
//! weights, time inference and run the gradient suite.
//!
//! Each command writes one JSON record (to `--report`, or stdout) and a
//! short plain-text summary to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dspnet::config::TaskMode;
use dspnet::gradsuite::{run_suite, TOLERANCE};
use dspnet::runner::{self, Split};
use dspnet::scenegen::io::{read_split, write_dataset};
use dspnet::scenegen::{generate_scene, samples_of, SceneSample};
use dspnet::{Checkpoint, Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "dspnet", version, about = "Dual-vision 3D question answering on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, val and test splits into a directory.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory; the train split is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        report: ReportArg,
    },
    /// EM@k, mean losses and per-type accuracy of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, value_delimiter = ',', default_value = "1,10")]
        k: Vec<usize>,
        #[command(flatten)]
        report: ReportArg,
    },
    /// Per-view logits and weights for one question.
    InspectViews {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Position of the question within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[command(flatten)]
        report: ReportArg,
    },
    /// Inference wall time against the number of views.
    BenchLatency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,15,20")]
        views: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        /// Seed of the scene that is answered.
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        #[command(flatten)]
        report: ReportArg,
    },
    /// Finite-difference check of every differentiable path.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[command(flatten)]
        report: ReportArg,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct ReportArg {
    /// Write the JSON record here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// A configuration file plus overrides of its most used fields.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML or JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small smoke-test extents.
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    questions_per_scene: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    stop_at_em1: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    sqa: bool,
    #[arg(long)]
    no_tgmf: bool,
    #[arg(long)]
    no_advp: bool,
    #[arg(long)]
    no_mcgr: bool,
    #[arg(long)]
    no_images: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None if self.tiny => RunConfig::tiny(),
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set! {
            scenes => c.data.scenes,
            questions_per_scene => c.data.questions_per_scene,
            base_seed => c.data.base_seed,
            views => c.dims.m,
            layers => c.dims.l,
            epochs => c.train.epochs,
            seed => c.train.seed,
            batch_size => c.optim.batch_size,
            peak_lr => c.optim.peak_lr,
            lambda1 => c.loss.lambda1,
            lambda2 => c.loss.lambda2,
        }
        if self.stop_at_em1.is_some() {
            c.train.stop_at_em1 = self.stop_at_em1;
        }
        if self.sqa {
            c.task = TaskMode::Sqa;
            c.dims.max_tokens = c.dims.max_tokens.max(dspnet::scenegen::vocab::MAX_QUESTION_LEN + dspnet::scenegen::vocab::SITUATION_LEN);
        }
        c.toggles.tgmf &= !self.no_tgmf;
        c.toggles.advp &= !self.no_advp;
        c.toggles.mcgr &= !self.no_mcgr;
        c.toggles.use_images &= !self.no_images;
        c.validate()?;
        Ok(c)
    }
}

fn emit<T: Serialize>(record: &T, target: &ReportArg) -> Result<()> {
    let text = serde_json::to_string_pretty(record).map_err(|e| Error::Format(e.to_string()))?;
    match &target.report {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.run_config()?;
    Ok((ckpt, config))
}

fn samples(data: Option<&Path>, split: Split, config: &RunConfig) -> Result<Vec<SceneSample>> {
    match data {
        Some(dir) => Ok(read_split(dir, split.name())?.0),
        None => runner::generate_split(config, split),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let c = config.resolve()?;
            let splits = Split::ALL.iter().map(|&s| Ok((s, runner::generate_split(&c, s)?))).collect::<Result<Vec<_>>>()?;
            let named: Vec<(&str, &[SceneSample])> = splits.iter().map(|(s, v)| (s.name(), v.as_slice())).collect();
            write_dataset(&out, &c, &named)?;
            for (s, v) in &splits {
                eprintln!("{}: {} questions", s.name(), v.len());
            }
            eprintln!("wrote {}", out.display());
        }
        Command::Train { config, data, checkpoint, report } => {
            let c = config.resolve()?;
            let train = samples(data.as_deref(), Split::Train, &c)?;
            let (ckpt, record) = runner::train(&c, &train)?;
            ckpt.save(&checkpoint)?;
            for e in &record.epochs {
                let em = e.train_em1.map_or(String::new(), |v| format!(" train EM@1 {v:.4}"));
                eprintln!(
                    "epoch {:>3}  loss {:.4}  running EM@1 {:.4}{em}  lr {:.2e}  {:.1}s",
                    e.epoch, e.mean_loss, e.running_em1, e.lr, e.seconds
                );
            }
            eprintln!("checkpoint {} after {:.1}s", checkpoint.display(), record.seconds);
            emit(&record, &report)?;
        }
        Command::Evaluate { checkpoint, data, split, k, report } => {
            let (ckpt, c) = load_checkpoint(&checkpoint)?;
            let split = Split::from(split);
            let set = samples(data.as_deref(), split, &c)?;
            let params = runner::params_for(&ckpt, &c)?;
            let metrics = runner::evaluate(&params, &c, &set, &k)?;
            for e in &metrics.em {
                eprintln!("EM@{:<3} {:.4} ({}/{})", e.k, e.rate, e.hits, metrics.questions);
            }
            for (name, t) in &metrics.by_type {
                eprintln!("  {name:<6} EM@1 {:.4} over {}", t.em1, t.questions);
            }
            eprintln!("mean loss {:.4}", metrics.mean_loss);
            emit(&runner::MetricsReport { config: c, split: split.name().into(), metrics }, &report)?;
        }
        Command::InspectViews { checkpoint, data, split, index, report } => {
            let (ckpt, c) = load_checkpoint(&checkpoint)?;
            let set = samples(data.as_deref(), split.into(), &c)?;
            let Some(sample) = set.get(index) else {
                return Err(Error::Argument(format!("index {index} outside a split of {}", set.len())));
            };
            let r = runner::inspect_views(&runner::params_for(&ckpt, &c)?, &c, sample)?;
            eprintln!("{}", r.text);
            for (v, w) in r.weights.iter().enumerate() {
                let mark = if v == r.argmax_view { " *" } else { "" };
                eprintln!("  view {v:>2}  weight {w:.4}  valid points {}{mark}", r.valid_points_per_view[v]);
            }
            emit(&r, &report)?;
        }
        Command::BenchLatency { checkpoint, views, repetitions, scene_seed, report } => {
            let (ckpt, c) = load_checkpoint(&checkpoint)?;
            let params = runner::params_for(&ckpt, &c)?;
            let mut scene_config = c.clone();
            scene_config.dims.m = views.iter().copied().max().unwrap_or(c.dims.m).max(c.dims.m);
            let sample = samples_of(generate_scene(scene_seed, &scene_config)?).swap_remove(0);
            let r = runner::bench_latency(&params, &c, &sample, &views, repetitions)?;
            for e in &r.entries {
                eprintln!("{:>3} views  {:8.2} ms ± {:.2}", e.views, e.mean_ms, e.std_ms);
            }
            emit(&r, &report)?;
        }
        Command::GradCheck { seeds, report } => {
            let entries = run_suite(seeds)?;
            for e in &entries {
                let verdict = if e.pass { "PASS" } else { "FAIL" };
                eprintln!("{verdict} {:<22} max rel error {:.2e} (seed {})  {:.1}s", e.case, e.max_rel_error, e.worst_seed, e.seconds);
            }
            let failed = entries.iter().filter(|e| !e.pass).count();
            emit(&serde_json::json!({ "tolerance": TOLERANCE, "seeds": seeds, "cases": entries }), &report)?;
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradient cases above {TOLERANCE:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
