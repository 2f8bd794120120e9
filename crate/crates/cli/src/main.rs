use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use damex::harness::{checkpoint, evaluate, load_data, run_gradsuite, train, GradSuiteConfig, Preset, PresetOptions, RunConfig};
use damex::tokens::TokenBatch;
use damex::Error;

mod report;
mod svg;

#[derive(Parser)]
#[command(name = "damex", version, about = "Dataset-aware mixture-of-experts experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.txt, metrics.csv and config.resolved.
    Train(TrainArgs),
    /// Print accuracy, routing purity and collapse of a checkpoint on a data file.
    Eval(EvalArgs),
    /// Like eval, and also write the per-layer utilization matrix.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every loss and of the full model objective.
    Gradcheck(GradcheckArgs),
    /// Write train.csv and eval.csv for a built-in preset.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the configured mapping by a random one with the same set sizes.
    #[arg(long, value_name = "SEED")]
    random_mapping: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Token CSV (`dataset_id,foreground,label,f0..`).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// The utilization CSV goes to this path with a `.csv` extension; a
    /// `.svg` path also gets the heatmap.
    #[arg(long)]
    heatmap_out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Perturb the analytic gradient of one check (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Minority foreground training tokens (limited preset).
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
}

/// Verification failure (exit 1) or a library error.
enum Failure {
    Verification(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } | Error::Evaluation(_) | Error::DegenerateBatch(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_analyze(&a, None),
        Command::Analyze(a) => cmd_analyze(&a.eval, a.heatmap_out.as_deref()),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::GenData(a) => cmd_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(seed) = a.random_mapping {
        let m = cfg
            .mapping
            .as_ref()
            .ok_or_else(|| Error::Config {
                line: None,
                message: "--random-mapping needs a configured mapping to randomize".into(),
            })?;
        cfg.mapping = Some(m.randomized(seed));
    }
    cfg.validate()?;
    let data = load_data::<f64>(&cfg)?;
    create_dir(&a.out)?;
    let outcome = train(&cfg, &data, Some(&a.out))?;
    checkpoint::save(&a.out.join("checkpoint.txt"), &outcome.model, &cfg)?;
    write(&a.out.join("metrics.csv"), &outcome.metrics.to_csv())?;
    write(&a.out.join("config.resolved"), &cfg.to_text())?;
    if let Some((_, last)) = outcome.metrics.steps.last() {
        println!(
            "trained {} steps: task {:.4}, load_balancing {:.4}, damex {:.4}, total {:.4}",
            cfg.train.steps, last.task, last.load_balancing, last.damex, last.total
        );
    }
    if let Some(r) = outcome.metrics.last_eval() {
        print!("{}", report::summary(r));
    }
    Ok(())
}

fn cmd_analyze(a: &EvalArgs, heatmap: Option<&Path>) -> Result<(), Failure> {
    let (model, cfg) = checkpoint::load::<f64>(&a.checkpoint)?;
    let data = TokenBatch::<f64>::read_csv(&a.data)?;
    let mapping = cfg.mapping.as_ref().ok_or_else(|| {
        Error::Mapping(format!(
            "{} has no dataset -> expert mapping; datasets {:?} are unmapped",
            a.checkpoint.display(),
            data.datasets()
        ))
    })?;
    mapping.check_covers(data.datasets())?;
    let r = evaluate(&model, &data, Some(mapping), cfg.train.batch)?;
    print!("{}", report::summary(&r));
    if let Some(path) = heatmap {
        let csv = path.with_extension("csv");
        write(&csv, &report::utilization_csv(&r.utilization))?;
        println!("utilization: {}", csv.display());
        if path.extension().is_some_and(|e| e == "svg") {
            write(path, &svg::heatmap(&r.utilization))?;
            println!("heatmap: {}", path.display());
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let cfg = GradSuiteConfig {
        seed: a.seed,
        instances: a.instances,
        eps: a.eps,
        corrupt: a.corrupt,
        ..GradSuiteConfig::default()
    };
    println!(
        "gradcheck seed={} instances={} eps={:e} tolerance={:e}",
        cfg.seed, cfg.instances, cfg.eps, cfg.tolerance
    );
    let report = run_gradsuite(&cfg)?;
    for c in &report.checks {
        println!(
            "{:<15} max_rel_error={:.3e} worst_seed={} {}",
            c.name,
            c.max_rel_error,
            c.worst_seed,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!("{:.2}s", report.seconds);
    let failing = report.failing();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed for: {}", failing.join(", "))))
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let preset: Preset = a.preset.parse()?;
    let mut opts = PresetOptions::default();
    if let Some(s) = a.shots {
        opts.shots = s;
    }
    if let Some(d) = a.dim {
        opts.dim = d;
    }
    let mix = preset.generate::<f64>(&opts, a.seed)?;
    create_dir(&a.out)?;
    let train = a.out.join("train.csv");
    let eval = a.out.join("eval.csv");
    write(&train, &mix.train.to_csv())?;
    write(&eval, &mix.eval.to_csv())?;
    println!("wrote {} ({} tokens) and {} ({} tokens)", train.display(), mix.train.len(), eval.display(), mix.eval.len());
    Ok(())
}
