//! `sleepfuse` command line. Exit codes: 0 success, 1 usage or configuration
//! error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sleepfuse::config::RunConfig;
use sleepfuse::data::container::read_preprocessed;
use sleepfuse::data::synth::write_dataset;
use sleepfuse::data::{preprocess, read_container, write_container, ContainerRecording, Manifest, Split};
use sleepfuse::eval::{confusion_svg, evaluate};
use sleepfuse::gradcheck::{run_suite, GradCheckOptions, TOLERANCE};
use sleepfuse::model::{KindSet, Model};
use sleepfuse::tensor::OpKind;
use sleepfuse::train::{train_loop, Checkpoint, ContainerFiles, Start, BEST_CHECKPOINT};
use sleepfuse::{Error, ErrorCategory, Result};

#[derive(Parser)]
#[command(name = "sleepfuse", version, about = "Multi-modal sleep staging toolkit")]
struct Cli {
    /// Worker threads for numeric kernels (results do not depend on it).
    #[arg(long, global = true, env = "SLEEPFUSE_THREADS")]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of containers plus manifest.json.
    Synth(SynthArgs),
    /// Resample, normalise and pad/truncate every recording of a manifest.
    Preprocess(PreprocessArgs),
    /// Train a model; writes best.ckpt, last.ckpt and train_log.jsonl.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Stage one recording; writes per-epoch stage and probabilities as CSV.
    Infer(InferArgs),
    /// Finite-difference gradient checks of every primitive.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: default, desk or tiny.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, env = "SLEEPFUSE_OUT_DIR")]
    out: PathBuf,
    /// Also preprocess onto the configured model grid.
    #[arg(long)]
    preprocess: bool,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, env = "SLEEPFUSE_OUT_DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Manifest with train and validation splits.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, env = "SLEEPFUSE_OUT_DIR")]
    out: PathBuf,
    /// Start from another checkpoint's weights (fine-tuning).
    #[arg(long, conflicts_with = "resume")]
    init_from: Option<PathBuf>,
    /// With --init-from, continue that run's learning-rate schedule.
    #[arg(long, requires = "init_from")]
    resume_schedule: bool,
    /// Continue an interrupted run from its last.ckpt.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated signal kinds, e.g. ECG,THX. Default: all four.
    #[arg(long)]
    modalities: Option<String>,
    /// Group key for sub-reports, e.g. age_band.
    #[arg(long)]
    group_by: Option<String>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a confusion-matrix heatmap.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Preprocessed container.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    modalities: Option<String>,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Also check the end-to-end tiny model (T = 8, k = 16, d = 8).
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only run checks whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
    /// Corrupt the backward pass of one primitive (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Usage => 1,
        ErrorCategory::Data => 2,
        ErrorCategory::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess_cmd(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.category()))
        }
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let c = a.config.load()?;
    let sizes = c.data.split_sizes()?;
    let mut synth = c.data.synth.clone();
    synth.seed = c.seed;
    let grid = a.preprocess.then_some(&c.model);
    let manifest = write_dataset(&synth, sizes, &a.out, grid)?;
    println!(
        "wrote {} recordings ({} train, {} validation, {} test) and {}",
        sizes.train + sizes.validation + sizes.test,
        sizes.train,
        sizes.validation,
        sizes.test,
        manifest.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn preprocess_cmd(a: PreprocessArgs) -> Result<ExitCode> {
    let c = a.config.load()?;
    let input = Manifest::load(&a.manifest)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut out = Manifest::new(&a.out);
    let mut already = 0;
    for entry in &input.recordings {
        let src = input.resolve(entry);
        let name = src
            .file_name()
            .map(PathBuf::from)
            .ok_or_else(|| Error::InvalidArgument(format!("{}: not a file path", src.display())))?;
        let rec = match read_container(&src)? {
            ContainerRecording::Raw(raw) => ContainerRecording::Preprocessed(preprocess(&raw, &c.model)?),
            ContainerRecording::Preprocessed(p) => {
                p.check_grid(&c.model)?;
                already += 1;
                ContainerRecording::Preprocessed(p)
            }
        };
        write_container(&a.out.join(&name), &rec)?;
        out.push(name, entry.split, entry.group_keys.clone());
    }
    out.save(&a.out.join("manifest.json"))?;
    if already > 0 {
        eprintln!("notice: {already} recording(s) were already preprocessed and were copied unchanged");
    }
    println!(
        "preprocessed {} recordings into {}",
        input.recordings.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let c = a.config.load()?;
    let manifest = Manifest::load(&a.manifest)?;
    let train_set = ContainerFiles(manifest.paths(Split::Train));
    let val_set = ContainerFiles(manifest.paths(Split::Validation));
    if val_set.0.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: no validation recordings",
            a.manifest.display()
        )));
    }
    let start = match (&a.init_from, &a.resume) {
        (Some(path), _) => Start::InitFrom {
            checkpoint: Box::new(Checkpoint::load(path)?),
            resume_schedule: a.resume_schedule,
        },
        (None, Some(path)) => Start::Resume(Box::new(Checkpoint::load(path)?)),
        (None, None) => Start::Fresh,
    };
    let outcome = train_loop(&c.run_spec(), &train_set, &val_set, start, Some(&a.out))?;
    println!(
        "{} epochs, {} steps; best validation loss {:.5} at epoch {}{}; checkpoint {}",
        outcome.epochs_run,
        outcome.steps,
        outcome.best_val_loss,
        outcome.best_epoch,
        if outcome.stopped_early { " (early stop)" } else { "" },
        a.out.join(BEST_CHECKPOINT).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn subset_arg(arg: Option<&str>) -> Result<KindSet> {
    match arg {
        None => Ok(KindSet::all()),
        Some(s) => KindSet::parse_list(s),
    }
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let ckpt = Checkpoint::load(path)?;
    Model::from_params(ckpt.model.clone(), ckpt.inference_params().clone())
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let subset = subset_arg(a.modalities.as_deref())?;
    let split: Split = a.split.parse()?;
    let model = load_model(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let source = ContainerFiles(manifest.paths(split));
    let report = evaluate(&model, &source, subset, a.group_by.as_deref())?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_output(a.out.as_deref(), &text)?;
    if let Some(svg) = &a.svg {
        let title = format!(
            "{subset}: κ = {:.3}, accuracy = {:.3}",
            report.kappa_total, report.accuracy_total
        );
        std::fs::write(svg, confusion_svg(&report.confusion, &title)).map_err(|e| Error::io(svg, e))?;
    }
    eprintln!(
        "{subset}: κ_T = {:.4}, accuracy = {:.4} over {} recordings ({} skipped)",
        report.kappa_total, report.accuracy_total, report.n_recordings, report.skipped_recordings
    );
    Ok(ExitCode::SUCCESS)
}

fn infer(a: InferArgs) -> Result<ExitCode> {
    let model = load_model(&a.checkpoint)?;
    let rec = read_preprocessed(&a.input)?;
    let subset = subset_arg(a.modalities.as_deref())?;
    let pred = model.predict(&rec, subset)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(["epoch", "stage", "p_wake", "p_light", "p_deep", "p_rem"])
        .map_err(csv_err)?;
    for (epoch, (stage, p)) in pred
        .stages
        .iter()
        .zip(pred.probabilities.values().chunks(4))
        .enumerate()
    {
        let mut row = vec![epoch.to_string(), stage.name().to_string()];
        row.extend(p.iter().map(|v| format!("{v:.9}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    write_output(a.out.as_deref(), &String::from_utf8(bytes).expect("ascii csv"))?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let fault = match &a.inject_fault {
        None => None,
        Some(name) => {
            Some(OpKind::from_name(name).ok_or_else(|| Error::InvalidArgument(format!("unknown primitive `{name}`")))?)
        }
    };
    let opts = GradCheckOptions {
        trials: a.trials,
        seed: a.seed,
        fault,
        filter: a.filter,
        model: a.tiny,
    };
    let start = std::time::Instant::now();
    let reports = run_suite(&opts)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{:<28} {} max relative error {:.3e} over {} trials",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.trials
        );
        failed += usize::from(!r.passed);
    }
    println!(
        "{} checks, {failed} failed (tolerance {TOLERANCE:e}) in {:.1} s",
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}
