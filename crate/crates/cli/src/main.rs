//! `latentloop train|sweep|report`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latentloop::data::{read_records, write_records, AggregateOptions, MetricRecord};
use latentloop::harness::{run_report, run_sweep, run_train, RunConfig};
use latentloop::{Error, Scalar};

#[derive(Parser)]
#[command(name = "latentloop", version, about = "Latent chain-of-thought experiments on structured data")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; writes weights, history and metrics.
    Train(Common),
    /// Train every compared method and write metric records.
    Sweep(Common),
    /// Aggregate metric records into report.json and a text table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's out_dir, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Comma-separated seeds; falls back to LATENTLOOP_SEED, then the config.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Args)]
struct ReportArgs {
    /// Records JSONL file(s); defaults to OUT/records.jsonl.
    #[arg(long, value_delimiter = ',')]
    records: Vec<PathBuf>,
    /// Optional sweep config whose grid defines the required cells.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Schema(_) | Error::Load { .. } | Error::Input(_) | Error::Csv(_) | Error::Json(_) => 2,
        e if e.is_numeric() => 3,
        Error::IncompleteSweep(_) | Error::Pairing(_) => 4,
        _ => 1,
    }
}

fn load_config(path: &Path, seeds: &[u64]) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if !seeds.is_empty() {
        cfg.seeds = seeds.to_vec();
    } else if let Ok(v) = std::env::var("LATENTLOOP_SEED") {
        let parsed: Result<Vec<u64>, _> = v.split(',').map(|s| s.trim().parse::<u64>()).collect();
        cfg.seeds = parsed.map_err(|_| Error::Config { field: "LATENTLOOP_SEED".into(), reason: format!("cannot parse {v:?}") })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(flag: &Option<PathBuf>, cfg: Option<&RunConfig>) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.as_ref().map(PathBuf::from)))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn train<T: Scalar>(args: &Common) -> Result<(), Error> {
    let cfg = load_config(&args.config, &args.seed)?;
    let out = out_dir(&args.out, Some(&cfg));
    let multi = cfg.seeds.len() > 1;
    for &seed in &cfg.seeds {
        let dir = if multi { out.join(format!("seed{seed}")) } else { out.clone() };
        let a = run_train::<T>(&cfg, &dir, seed)?;
        println!("seed {seed}: best validation {:.6}; wrote {}", a.best_val, dir.display());
    }
    Ok(())
}

fn sweep<T: Scalar>(args: &Common) -> Result<(), Error> {
    let cfg = load_config(&args.config, &args.seed)?;
    let out = out_dir(&args.out, Some(&cfg));
    std::fs::create_dir_all(&out)?;
    let results = run_sweep::<T>(&cfg, args.jobs)?;
    let records: Vec<MetricRecord> = results.into_iter().flat_map(|r| r.records).collect();
    let path = out.join("records.jsonl");
    write_records(&path, &records)?;
    let mut resolved = serde_json::to_value(&cfg)?;
    resolved["config_hash"] = serde_json::Value::String(cfg.config_hash());
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&resolved)? + "\n")?;
    println!("{} records -> {}", records.len(), path.display());
    Ok(())
}

fn report(args: &ReportArgs) -> Result<(), Error> {
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let out = out_dir(&args.out, cfg.as_ref());
    let paths = if args.records.is_empty() { vec![out.join("records.jsonl")] } else { args.records.clone() };
    let mut records = Vec::new();
    for p in &paths {
        records.extend(read_records(p)?);
    }
    let opts = cfg
        .map(|c| AggregateOptions {
            r_train: Some(c.sweep.r_train.iter().copied().filter(|&r| r > 0).collect()),
            r_eval: Some(c.sweep.r_eval.clone()),
            looped: Some(c.sweep.looped.clone()),
        })
        .unwrap_or_default();
    let files = run_report(&records, &opts, &out)?;
    print!("{}", files.report.to_table());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Train(a) => match a.precision {
            Precision::F32 => train::<f32>(a),
            Precision::F64 => train::<f64>(a),
        },
        Command::Sweep(a) => match a.precision {
            Precision::F32 => sweep::<f32>(a),
            Precision::F64 => sweep::<f64>(a),
        },
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
