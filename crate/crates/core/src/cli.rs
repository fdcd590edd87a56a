//! The `actcaps` command line.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data, parse or I/O
//! errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::config::{DatasetKind, RunConfig};
use crate::error::{Error, Result};
use crate::flops::{flop_count, REPORTED_NTU_GFLOPS};
use crate::introspect::{consistency_map, coupling_matrix, export_coupling, joint_labels, render_heatmap, CapsuleSelector};
use crate::model::{ActionCapsNet, CapsulePath, ModelConfig};
use crate::skeleton::{
    load_dataset, parse_ntu_filename, parse_ntu_skeleton, parse_nucla_json, preprocess, save_dataset, split_protocol,
    synth_dataset, Protocol, SkeletonTensor,
};
use crate::train::{evaluate, train, TrainOutput};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "actcaps", version, about = "Skeleton action recognition with capsule routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert raw recordings into cached tensors.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic dataset of cached tensors.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Export per-iteration coupling coefficients of one sample.
    InspectRouting(InspectArgs),
    /// Per-class mean coupling rows over a dataset.
    Consistency(ConsistencyArgs),
    /// Final coupling coefficients of two samples side by side.
    CompareClasses(CompareArgs),
    /// Per-layer FLOP table of a model configuration.
    Flops(FlopsArgs),
}

/// Flags shared by every subcommand; each overrides its config key.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Capsule stages (1..=4).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=4))]
    stages: Option<u64>,
    /// Routing iterations.
    #[arg(long, visible_alias = "r")]
    routing_iters: Option<usize>,
    /// Log-prior update weight in [0, 1].
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// xsub, xview or nucla-cam.
    #[arg(long)]
    protocol: Option<Protocol>,
    /// Directory of cached tensors; synthetic data is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg.model);
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(d) = self.dataset {
            cfg.dataset = d;
        }
        if let Some(p) = self.protocol {
            cfg.protocol = Some(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, model: &mut ModelConfig) {
        if let Some(s) = self.stages {
            model.stages = s as usize;
        }
        if let Some(r) = self.routing_iters {
            model.routing_iters = r;
        }
        if let Some(a) = self.alpha {
            model.alpha = a;
        }
    }

    /// Cached tensors from `--data`, or the configured synthetic dataset.
    fn samples(&self, cfg: &RunConfig) -> Result<Vec<SkeletonTensor>> {
        match &self.data {
            Some(dir) => load_dataset(dir),
            None if cfg.dataset == DatasetKind::Synth => synth_dataset(&cfg.synth, cfg.data_seed),
            None => Err(Error::contract("--data is required for ntu and nucla datasets")),
        }
    }

    /// Checkpoint with routing flags applied to its model configuration.
    fn checkpoint(&self, path: &Path) -> Result<Checkpoint> {
        let mut ckpt = load_checkpoint(path)?;
        if self.stages.is_some() {
            return Err(Error::contract("--stages cannot change the stage count of a trained checkpoint"));
        }
        self.apply(&mut ckpt.net.config);
        ckpt.net.config.validate()?;
        Ok(ckpt)
    }
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of raw files (`*.skeleton` or `*.json`).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated generator names, one per class.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output directory for checkpoints, metrics.jsonl and config.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write the evaluation as JSON into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Which routing pass to read.
#[derive(Args, Debug)]
struct SelectorArgs {
    /// Capsule stage, 1-based.
    #[arg(long, default_value_t = 4)]
    stage: usize,
    /// Use the personalized path of `--body` instead of the global path.
    #[arg(long)]
    personalized: bool,
    #[arg(long, default_value_t = 0)]
    body: usize,
}

impl SelectorArgs {
    /// Stage numbers count the model's capsule stages from 1; larger values
    /// are clamped to the last stage.
    fn selector(&self, cfg: &ModelConfig) -> Result<CapsuleSelector> {
        if self.stage == 0 {
            return Err(Error::contract("--stage counts from 1"));
        }
        Ok(CapsuleSelector {
            stage: self.stage.min(cfg.stages) - 1,
            path: if self.personalized {
                CapsulePath::Personalized
            } else {
                CapsulePath::Global
            },
            body: self.body,
        })
    }
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    selector: SelectorArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index of the sample in the dataset.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConsistencyArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    selector: SelectorArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    selector: SelectorArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Two comma-separated sample indices.
    #[arg(long, value_delimiter = ',', required = true)]
    samples: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[command(flatten)]
    common: Common,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_DATA
        }
    }
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn dispatch(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::Preprocess(a) => cmd_preprocess(a, stdout),
        Command::Synth(a) => cmd_synth(a, stdout),
        Command::Train(a) => cmd_train(a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::InspectRouting(a) => cmd_inspect(a, stdout),
        Command::Consistency(a) => cmd_consistency(a, stdout),
        Command::CompareClasses(a) => cmd_compare(a, stdout),
        Command::Flops(a) => cmd_flops(a, stdout),
    }
}

fn sorted_files(dir: &Path, extension: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == extension) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn cmd_preprocess(a: PreprocessArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = a.common.run_config()?;
    let extension = match cfg.dataset {
        DatasetKind::Ntu => "skeleton",
        DatasetKind::Nucla => "json",
        DatasetKind::Synth => return Err(Error::contract("synthetic data is generated with `synth`, not preprocessed")),
    };
    let mut samples = Vec::new();
    for path in sorted_files(&a.input, extension)? {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let at_file = |e: Error| match e {
            Error::Parse { line, message } => Error::Format {
                path: path.clone(),
                message: format!("line {line}: {message}"),
            },
            other => other,
        };
        let raw = match cfg.dataset {
            DatasetKind::Ntu => {
                let mut raw = parse_ntu_skeleton(&text).map_err(at_file)?;
                let (meta, label) = parse_ntu_filename(&path.to_string_lossy())?;
                raw.meta = meta;
                raw.label = label;
                raw
            }
            _ => parse_nucla_json(&text).map_err(at_file)?,
        };
        samples.push(preprocess(&raw, &cfg.preprocess)?);
    }
    if samples.is_empty() {
        return Err(Error::contract(format!("no .{extension} files in {}", a.input.display())));
    }
    save_dataset(&a.out, &samples)?;
    writeln!(stdout, "wrote {} samples to {}", samples.len(), a.out.display()).map_err(out_err)
}

fn cmd_synth(a: SynthArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = a.common.run_config()?;
    if let Some(classes) = a.classes {
        cfg.synth.classes = classes;
    }
    if let Some(n) = a.samples_per_class {
        cfg.synth.samples_per_class = n;
    }
    if let Some(s) = a.data_seed {
        cfg.data_seed = s;
    }
    let samples = synth_dataset(&cfg.synth, cfg.data_seed)?;
    save_dataset(&a.out, &samples)?;
    writeln!(stdout, "wrote {} samples to {}", samples.len(), a.out.display()).map_err(out_err)
}

/// `(train, test)`; without a protocol both are the whole dataset.
fn split(cfg: &RunConfig, samples: Vec<SkeletonTensor>) -> Result<(Vec<SkeletonTensor>, Vec<SkeletonTensor>)> {
    match cfg.protocol {
        Some(p) => split_protocol(samples, p),
        None => Ok((samples.clone(), samples)),
    }
}

fn check_labels(samples: &[SkeletonTensor], classes: usize) -> Result<()> {
    match samples.iter().find(|s| s.label >= classes) {
        Some(s) => Err(Error::contract(format!("label {} but the model has {classes} classes", s.label))),
        None => Ok(()),
    }
}

fn cmd_train(a: TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = a.common.run_config()?;
    if let Some(e) = a.epochs {
        cfg.train.total_epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.validate()?;
    let (train_set, test_set) = split(&cfg, a.common.samples(&cfg)?)?;
    check_labels(&train_set, cfg.model.classes)?;
    create_dir(&a.out)?;
    cfg.save(&a.out.join("config.json"))?;
    let mut net = ActionCapsNet::new(cfg.model.clone(), cfg.train.seed)?;
    let output = TrainOutput { dir: a.out.clone() };
    let history = train(&mut net, &cfg.train, &train_set, Some(&output))?;
    let last = history.last().expect("at least one epoch");
    let test = evaluate(&net, &test_set, cfg.eval_batch_size)?;
    writeln!(
        stdout,
        "epochs {} train_loss {:.6} train_acc {:.4} test_top1 {:.4}",
        history.len(),
        last.train_loss,
        last.train_acc,
        test.top1
    )
    .map_err(out_err)?;
    writeln!(stdout, "checkpoint {}", output.last_checkpoint_path().display()).map_err(out_err)
}

fn cmd_eval(a: EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = a.common.run_config()?;
    let ckpt = a.common.checkpoint(&a.checkpoint)?;
    let (_, test_set) = split(&cfg, a.common.samples(&cfg)?)?;
    check_labels(&test_set, ckpt.net.config.classes)?;
    let result = evaluate(&ckpt.net, &test_set, cfg.eval_batch_size)?;
    let json = serde_json::to_string_pretty(&result).map_err(|e| Error::Json {
        context: "evaluation".into(),
        source: e,
    })? + "\n";
    if let Some(dir) = a.out {
        create_dir(&dir)?;
        let path = dir.join("eval.json");
        fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
    }
    write!(stdout, "{json}").map_err(out_err)
}

fn pick<'a>(samples: &'a [SkeletonTensor], index: usize) -> Result<&'a SkeletonTensor> {
    samples
        .get(index)
        .ok_or_else(|| Error::contract(format!("sample {index} out of range 0..{}", samples.len())))
}

fn cmd_inspect(a: InspectArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = a.common.run_config()?;
    let ckpt = a.common.checkpoint(&a.checkpoint)?;
    let samples = a.common.samples(&cfg)?;
    let sample = pick(&samples, a.sample)?;
    let selector = a.selector.selector(&ckpt.net.config)?;
    let (_, out) = ckpt.net.run(&[sample])?;
    let state = out.stages[selector.stage]
        .routing(selector.path, selector.body)
        .ok_or_else(|| Error::contract(format!("body {} out of range", selector.body)))?;
    let labels = joint_labels(&ckpt.net.config, selector.path);
    create_dir(&a.out)?;
    for it in 0..state.trace.len() {
        let csv = a.out.join(format!("coupling-iter{}.csv", it + 1));
        let matrix = export_coupling(state, it, 0, &labels, &csv)?;
        let pgm = csv.with_extension("pgm");
        render_heatmap(&matrix, &pgm)?;
        writeln!(stdout, "{}\n{}", csv.display(), pgm.display()).map_err(out_err)?;
    }
    Ok(())
}

fn cmd_consistency(a: ConsistencyArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = a.common.run_config()?;
    let ckpt = a.common.checkpoint(&a.checkpoint)?;
    let samples = a.common.samples(&cfg)?;
    check_labels(&samples, ckpt.net.config.classes)?;
    let selector = a.selector.selector(&ckpt.net.config)?;
    let map = consistency_map(&ckpt.net, &samples, selector, cfg.eval_batch_size)?;
    create_dir(&a.out)?;
    let csv = a.out.join("consistency.csv");
    fs::write(&csv, map.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let pgm = a.out.join("consistency.pgm");
    render_heatmap(&map.matrix(0.0), &pgm)?;
    for (k, &n) in map.counts().iter().enumerate() {
        if n == 0 {
            writeln!(stdout, "class{k}: no samples, row left empty").map_err(out_err)?;
        }
    }
    writeln!(stdout, "{}\n{}", csv.display(), pgm.display()).map_err(out_err)
}

fn cmd_compare(a: CompareArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = a.common.run_config()?;
    let ckpt = a.common.checkpoint(&a.checkpoint)?;
    let samples = a.common.samples(&cfg)?;
    if a.samples.len() != 2 {
        return Err(Error::contract(format!("--samples takes two indices, got {}", a.samples.len())));
    }
    let selector = a.selector.selector(&ckpt.net.config)?;
    let labels = joint_labels(&ckpt.net.config, selector.path);
    create_dir(&a.out)?;
    for &index in &a.samples {
        let sample = pick(&samples, index)?;
        let (_, out) = ckpt.net.run(&[sample])?;
        let state = out.stages[selector.stage]
            .routing(selector.path, selector.body)
            .ok_or_else(|| Error::contract(format!("body {} out of range", selector.body)))?;
        let last = state.trace.len() - 1;
        let csv = a.out.join(format!("sample{index}-class{}.csv", sample.label));
        export_coupling(state, last, 0, &labels, &csv)?;
        let pgm = csv.with_extension("pgm");
        render_heatmap(&coupling_matrix(state, last, 0)?, &pgm)?;
        writeln!(stdout, "{}\n{}", csv.display(), pgm.display()).map_err(out_err)?;
    }
    Ok(())
}

fn cmd_flops(a: FlopsArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = a.common.run_config()?;
    let report = flop_count(&cfg.model)?;
    writeln!(stdout, "{report}").map_err(out_err)?;
    if cfg.model == ModelConfig::default() {
        writeln!(
            stdout,
            "published NTU figures: {} GFLOPs (table), {} GFLOPs (text)",
            REPORTED_NTU_GFLOPS[0], REPORTED_NTU_GFLOPS[1]
        )
        .map_err(out_err)?;
    }
    Ok(())
}
