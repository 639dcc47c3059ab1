mod config;
mod report;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use inrpack::data::{raw_size_bytes, read_dataset, synthesize, write_csv, write_mcds, DataFormat};
use inrpack::evaluate::{evaluate, write_error_map, ErrorMap, ErrorMapFormat};
use inrpack::store::compression_ratio_from_sizes;
use inrpack::trainer::run_pipeline;
use inrpack::{decode, EncodedModel, FieldKind, HeadMode};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "inrpack", version, about = "Encode point-sampled fields into clustered sine networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model for a dataset.
    Encode(EncodeArgs),
    /// Predict values at query coordinates.
    Decode(DecodeArgs),
    /// Score a model against a dataset.
    Eval(EvalArgs),
    /// Summarize a model file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Config file whose `synth.*` keys provide defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    timesteps: Option<usize>,
    /// Comma-separated field kinds: trig, bump, discontinuity, contrast.
    #[arg(long, value_delimiter = ',')]
    fields: Option<Vec<FieldKind>>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Concentrate most points in a few blobs.
    #[arg(long)]
    clustered: bool,
    /// Output path; `.csv` writes CSV, anything else MCDS.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    /// Dataset (MCDS, or CSV by extension).
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model output path. The config echo and run report are written next to it.
    #[arg(short, long)]
    output: PathBuf,
    /// Random initialization instead of meta-learning.
    #[arg(long)]
    no_meta: bool,
    /// Never split clusters.
    #[arg(long)]
    no_recluster: bool,
    /// One branch and head shared by all variables.
    #[arg(long)]
    shared_head: bool,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DecodeArgs {
    model: PathBuf,
    /// CSV with header `x,y,z,t`.
    queries: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    model: PathBuf,
    data: PathBuf,
    /// Write per-record absolute errors.
    #[arg(long)]
    error_map: Option<PathBuf>,
    /// `csv` or `mcds-delta`.
    #[arg(long, default_value = "csv")]
    error_map_format: ErrorMapFormat,
    /// Also write the metrics as `key = value` lines.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    model: PathBuf,
}

fn sidecar(model: &Path, suffix: &str) -> PathBuf {
    let mut name = model.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

fn load_dataset(path: &Path) -> Result<inrpack::Dataset> {
    read_dataset(path, DataFormat::from_path(path)).with_context(|| format!("reading {}", path.display()))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let spec = &mut cfg.synth;
    if let Some(v) = args.points {
        spec.point_count = v;
    }
    if let Some(v) = args.timesteps {
        spec.timesteps = v;
    }
    if let Some(v) = args.fields {
        spec.fields = v;
    }
    if let Some(v) = args.noise {
        spec.noise = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    spec.clustered |= args.clustered;
    let ds = synthesize(spec)?;
    match DataFormat::from_path(&args.output) {
        DataFormat::Csv => {
            let file = File::create(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
            write_csv(&ds, BufWriter::new(file))?;
        }
        DataFormat::Native => {
            write_mcds(&ds, &args.output)?;
        }
    }
    println!("synth {spec}");
    println!("wrote {} ({})", args.output.display(), ds.fingerprint());
    Ok(())
}

fn cmd_encode(args: EncodeArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects key=value, got '{kv}'"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let train = &mut cfg.pipeline.train;
    if args.no_meta {
        train.use_meta = false;
    }
    if args.no_recluster {
        train.recluster = false;
    }
    if let Some(v) = args.k {
        train.k = v;
    }
    if let Some(v) = args.tau {
        train.residual_threshold = v;
    }
    if let Some(v) = args.workers {
        train.worker_count = v;
    }
    if let Some(v) = args.seed {
        train.seed = v;
    }
    if let Some(v) = args.max_epochs {
        train.max_epochs = Some(v);
    }
    if let Some(v) = args.width {
        cfg.pipeline.width = v;
    }
    if args.shared_head {
        cfg.pipeline.head_mode = HeadMode::Shared;
    }
    cfg.data = Some(args.data.clone());
    cfg.model = Some(args.output.clone());

    let ds = load_dataset(&args.data)?;
    log::info!("encoding {}", ds.fingerprint());
    let start = Instant::now();
    let run = run_pipeline(&ds, &cfg.pipeline).context("encoding failed")?;
    let seconds = start.elapsed().as_secs_f64();
    let model_bytes = run.model.save(&args.output)?;
    let cr = compression_ratio_from_sizes(raw_size_bytes(&ds), model_bytes);

    let echo_path = sidecar(&args.output, ".config");
    std::fs::write(&echo_path, cfg.echo()).with_context(|| format!("writing {}", echo_path.display()))?;
    let report_path = sidecar(&args.output, ".report");
    std::fs::write(&report_path, report::run_summary(&run, &cr, seconds))
        .with_context(|| format!("writing {}", report_path.display()))?;
    print!("{}", report::run_report(&run, &cr, seconds));
    println!();
    println!("wrote {} ({model_bytes} bytes)", args.output.display());
    println!("config echo {}", echo_path.display());
    println!("run report {}", report_path.display());
    Ok(())
}

/// Reads `x,y,z,t` rows. An empty file yields no queries.
fn read_queries(path: &Path) -> Result<Vec<[f64; 4]>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut queries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && fields == ["x", "y", "z", "t"] {
            continue;
        }
        let row = (fields.len() == 4)
            .then(|| fields.iter().map(|f| f.parse::<f64>()).collect::<Result<Vec<_>, _>>().ok())
            .flatten()
            .filter(|r| r.iter().all(|v| v.is_finite()));
        match row {
            Some(r) => queries.push([r[0], r[1], r[2], r[3]]),
            None => bail!("{}: line {}: expected four finite numbers x,y,z,t, got '{line}'", path.display(), i + 1),
        }
    }
    Ok(queries)
}

fn cmd_decode(args: DecodeArgs) -> Result<()> {
    let model = EncodedModel::load(&args.model)?;
    let queries = read_queries(&args.queries)?;
    let file = File::create(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let mut w = BufWriter::new(file);
    if queries.is_empty() {
        w.flush()?;
        println!("no queries");
        return Ok(());
    }
    let decoded = decode(&model, &queries)?;
    write!(w, "x,y,z,t")?;
    for name in &model.fingerprint.variable_names {
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    for (q, query) in queries.iter().enumerate() {
        write!(w, "{},{},{},{}", query[0], query[1], query[2], query[3])?;
        for v in decoded.row(q) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    println!("decoded {} queries ({} out of bounds)", queries.len(), decoded.out_of_bounds_count());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = EncodedModel::load(&args.model)?;
    let ds = load_dataset(&args.data)?;
    let (report, decoded) = evaluate(&model, &ds)?;
    print!("{report}");
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_key_values()).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.error_map {
        let map = ErrorMap::new(&ds, &decoded)?;
        write_error_map(&ds, &map, path, args.error_map_format)?;
        println!("error map {} (max {})", path.display(), map.max());
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let model = EncodedModel::load(&args.model)?;
    let size = std::fs::metadata(&args.model)?.len();
    print!("{}", report::inspect(&model, size));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
