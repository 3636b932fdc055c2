//! Verification, ablation and benchmark commands for msdeform.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use msdeform::schedule::TrainPolicy;
use msdeform::verify::{
    run_bench, run_equivalence, run_gradcheck, run_points, run_train_toy, BenchConfig,
    GradcheckConfig, PointsRequest, Report,
};

#[derive(Parser)]
#[command(
    name = "msdeform",
    version,
    about = "Checks and benchmarks for multi-scale deformable attention"
)]
struct Cli {
    /// Seed for every random input
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Key/value config file for the chosen command
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Write the JSON report here
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Write the JSON-lines training log here (train-toy only)
    #[arg(long, global = true)]
    jsonl: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference checks of the sampling and attention backward passes
    Gradcheck,
    /// Sampling-point totals for a preset or an explicit per-level list
    Points {
        /// Point sum per query and head: 12, 9, 6 or 3
        #[arg(long, conflicts_with = "points")]
        preset: Option<usize>,
        /// Comma-separated points per level, e.g. 4,3,2
        #[arg(long, value_delimiter = ',')]
        points: Option<Vec<usize>>,
    },
    /// Bilinear against discrete sampling: pixel centers, convergence, linearity
    Equivalence,
    /// Time bilinear against discrete sampling
    Bench {
        /// Pyramids separated by ';', levels by ',', e.g. "80x80,40x40,20x20;40x40,20x20,10x10"
        #[arg(long)]
        shapes: Option<String>,
        /// Timed iterations per operator (at least 30)
        #[arg(long)]
        iterations: Option<usize>,
        /// Untimed warmup iterations
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Two-phase training of the toy decoder
    TrainToy,
}

fn read_config(path: &Option<PathBuf>) -> Result<Option<String>> {
    path.as_ref()
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
}

fn reject(flag: Option<&PathBuf>, name: &str, command: &str) -> Result<()> {
    if flag.is_some() {
        bail!("{command} does not take --{name}");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<Report> {
    let config = read_config(&cli.config)?;
    if !matches!(cli.command, Command::TrainToy) {
        reject(cli.jsonl.as_ref(), "jsonl", "only train-toy")?;
    }
    match &cli.command {
        Command::Gradcheck => {
            let cfg = match config {
                Some(text) => GradcheckConfig::parse(&text).context("parsing gradcheck config")?,
                None => GradcheckConfig::default(),
            };
            Ok(run_gradcheck(cli.seed, &cfg)?)
        }
        Command::Points { preset, points } => {
            reject(cli.config.as_ref(), "config", "points")?;
            let request = match (preset, points) {
                (Some(p), _) => PointsRequest::Preset(*p),
                (None, Some(list)) => PointsRequest::Explicit(list.clone()),
                (None, None) => PointsRequest::All,
            };
            Ok(run_points(&request)?)
        }
        Command::Equivalence => {
            reject(cli.config.as_ref(), "config", "equivalence")?;
            Ok(run_equivalence(cli.seed)?)
        }
        Command::Bench {
            shapes,
            iterations,
            warmup,
        } => {
            let mut cfg = match config {
                Some(text) => BenchConfig::parse(&text).context("parsing bench config")?,
                None => BenchConfig::default(),
            };
            if let Some(s) = shapes {
                cfg.pyramids = BenchConfig::parse_pyramids(s)?;
            }
            if let Some(n) = iterations {
                cfg.iterations = *n;
            }
            if let Some(n) = warmup {
                cfg.warmup = *n;
            }
            Ok(run_bench(cli.seed, &cfg)?)
        }
        Command::TrainToy => {
            let policy = match config {
                Some(text) => TrainPolicy::parse(&text).context("parsing policy file")?,
                None => TrainPolicy::default(),
            };
            let (report, log) = run_train_toy(cli.seed, &policy)?;
            if let Some(path) = &cli.jsonl {
                write(path, &log.to_jsonl())?;
            }
            Ok(report)
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn print_summary(report: &Report) {
    for case in &report.cases {
        let status = if case.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<48} expected {:<12.6e} actual {:<12.6e} tol {:.1e}",
            case.name, case.expected, case.actual, case.tolerance
        );
    }
    for b in &report.bench {
        println!(
            "     {:<9} {:<20} points [{}] median {:.3e} s  p10 {:.3e}  p90 {:.3e}  speedup {:.2}x",
            b.mode.as_str(),
            b.pyramid,
            b.points_per_level
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(","),
            b.median_s,
            b.p10_s,
            b.p90_s,
            b.speedup_discrete_over_bilinear
        );
    }
    let failed = report.failures().count();
    println!(
        "{}: {} ({} cases, {failed} failed)",
        report.suite,
        if report.pass { "pass" } else { "FAIL" },
        report.cases.len()
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let report = match run(&cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    print_summary(&report);
    if let Some(path) = &cli.out {
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        if let Err(e) = write(path, &json) {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    }
    if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
