use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fvalign::config::{EmbeddingSpace, RunConfig};
use fvalign::container::{read_dataset, write_dataset};
use fvalign::eval::{embed_test_set, export_embeddings, full_report, write_report};
use fvalign::experiment::{ablation_table, run_ablation, variant_means};
use fvalign::synth::{generate_dataset, split_samples, Split, TripletSample};
use fvalign::trainer::{load_checkpoint, save_checkpoint, Trainer, METRICS_HEADER};
use fvalign::Error;

#[derive(Parser, Debug)]
#[command(name = "fvalign", version, about = "Synthetic fMRI/video/text alignment: data, training, retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its manifest
    GenerateData(Common),
    /// Train and write a checkpoint plus a per-step metrics log
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split and write a report
    Eval(EvalArgs),
    /// Write test-split embeddings as CSV
    ExportEmbeddings(EvalArgs),
    /// Train the full model and each single-component ablation, then compare
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Space {
    Quantized,
    Continuous,
}

#[derive(Args, Debug)]
struct Common {
    /// key = value configuration file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed override (dataset seed for generate-data, training seed otherwise)
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output path
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Align fMRI to stimulus time when generating data
    #[arg(long)]
    pre_shift_hrf: bool,
    /// Embeddings used for retrieval
    #[arg(long, value_enum, value_name = "SPACE")]
    embedding_space: Option<Space>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file (generated from the config when omitted)
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Metrics CSV path (default: <out>.metrics.csv)
    #[arg(long, value_name = "PATH")]
    metrics: Option<PathBuf>,
    /// Continue from a checkpoint
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Stop once this many steps are done (the schedule still spans the configured total)
    #[arg(long, value_name = "STEP")]
    until: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Comma-separated training seeds (default: the --seed value or the configured seed)
    #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
    seeds: Vec<u64>,
}

enum CliError {
    Core(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Usage(_) => "usage",
        }
    }

    fn code(&self) -> u8 {
        match self.category() {
            "usage" => 2,
            "config" => 3,
            "io" => 4,
            "format" => 5,
            "non-finite" => 6,
            _ => 1,
        }
    }

    fn message(&self) -> String {
        let m = match self {
            CliError::Core(e) => e.to_string(),
            CliError::Usage(m) => m.clone(),
        };
        m.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if common.pre_shift_hrf {
        cfg.synth.pre_shift = true;
    }
    if let Some(s) = common.embedding_space {
        cfg.embedding_space = match s {
            Space::Quantized => EmbeddingSpace::Quantized,
            Space::Continuous => EmbeddingSpace::Continuous,
        };
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfig, path: Option<&Path>) -> CliResult<Vec<TripletSample>> {
    Ok(match path {
        Some(p) => read_dataset(p)?,
        None => generate_dataset(&cfg.synth)?,
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn generate(args: Common) -> CliResult<()> {
    let mut cfg = load_config(&args)?;
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
    }
    cfg.synth.validate()?;
    let out = args.out.unwrap_or_else(|| PathBuf::from("dataset.bin"));
    let data = generate_dataset(&cfg.synth)?;
    write_dataset(&data, &out)?;
    let manifest = with_suffix(&out, ".manifest");
    std::fs::write(&manifest, cfg.synth_manifest())?;
    println!("samples = {}", data.len());
    println!("dataset = {}", out.display());
    println!("manifest = {}", manifest.display());
    Ok(())
}

fn train(args: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(seed) = args.common.seed {
        cfg.train.seed = seed;
    }
    let out = args
        .common
        .out
        .clone()
        .or_else(|| cfg.train.checkpoint_path.clone())
        .unwrap_or_else(|| PathBuf::from("checkpoint.bin"));
    let metrics_path = args.metrics.clone().unwrap_or_else(|| with_suffix(&out, ".metrics.csv"));
    let data = load_data(&cfg, args.data.as_deref())?;
    let test = split_samples(&data, Split::Test);
    let trainer = Trainer::new(cfg.clone(), split_samples(&data, Split::Train))?;
    let mut state = match &args.resume {
        Some(p) => load_checkpoint(p)?,
        None => trainer.init_state()?,
    };

    let file = if args.resume.is_some() && metrics_path.exists() {
        OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };
    let mut log = BufWriter::new(file);
    let every = cfg.train.eval_every;
    let stop = args.until.map_or(cfg.train.total_steps, |u| u.min(cfg.train.total_steps));
    while (state.step as usize) < stop {
        let m = trainer.train_step(&mut state)?;
        writeln!(log, "{}", m.csv_row())?;
        if every > 0 && state.step as usize % every == 0 {
            let r = full_report(&state, &cfg, &test)?;
            println!("step = {} f_to_v_r5 = {:.4} total = {:.6}", state.step, r.f_to_v_r5(), m.loss.total);
            if let Some(p) = &cfg.train.checkpoint_path {
                save_checkpoint(&state, p)?;
            }
        }
    }
    log.flush()?;
    save_checkpoint(&state, &out)?;
    println!("steps = {}", state.step);
    println!("checkpoint = {}", out.display());
    println!("metrics = {}", metrics_path.display());
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    let state = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&cfg, args.data.as_deref())?;
    let report = full_report(&state, &cfg, &split_samples(&data, Split::Test))?;
    let out = args.common.out.unwrap_or_else(|| PathBuf::from("report.txt"));
    write_report(&report, &out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn export(args: EvalArgs) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    let state = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&cfg, args.data.as_deref())?;
    let e = embed_test_set(&state, &cfg, &split_samples(&data, Split::Test), cfg.embedding_space)?;
    let out = args.common.out.unwrap_or_else(|| PathBuf::from("embeddings.csv"));
    export_embeddings(&e, &out)?;
    println!("rows = {}", 3 * e.pair_ids.len());
    println!("embeddings = {}", out.display());
    Ok(())
}

fn ablate(args: AblateArgs) -> CliResult<()> {
    let cfg = load_config(&args.common)?;
    let seeds = if !args.seeds.is_empty() {
        args.seeds.clone()
    } else {
        vec![args.common.seed.unwrap_or(cfg.train.seed)]
    };
    let data = load_data(&cfg, args.data.as_deref())?;
    let rows = run_ablation(&cfg, &data, &seeds)?;
    let table = ablation_table(&rows);
    if let Some(out) = &args.common.out {
        std::fs::write(out, &table)?;
    }
    print!("{table}");
    let means = variant_means(&rows);
    let full = means[0].1;
    let ordered = means[1..].iter().all(|(_, m)| full >= *m);
    println!("full_model_at_least_each_ablation = {ordered}");
    Ok(())
}

fn run() -> CliResult<()> {
    let cli = Cli::try_parse().map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            let _ = e.print();
            std::process::exit(0);
        }
        _ => CliError::Usage(e.to_string()),
    })?;
    match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportEmbeddings(a) => export(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.message());
            ExitCode::from(e.code())
        }
    }
}
