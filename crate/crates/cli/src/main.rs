use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use semifscil::exec::Execution;
use semifscil::harness::experiment::{load_report, RunPaths};
use semifscil::harness::golden::{round2, verify_tables};
use semifscil::harness::metrics::pct;
use semifscil::harness::report::{accuracy_svg, read_metrics_csv, render_table, write_text};
use semifscil::harness::{build_stream, run_experiment_with, Ablation, ExperimentConfig, RunOptions, ENV_OUT, ENV_SEED};

#[derive(Parser)]
#[command(
    name = "semifscil",
    version,
    about = "Semi-supervised few-shot class-incremental experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every session of an experiment.
    Run {
        /// TOML experiment config.
        config: PathBuf,
        #[arg(long, env = ENV_SEED)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, env = ENV_OUT)]
        out: Option<PathBuf>,
        /// Ablation switch; may be repeated.
        #[arg(long = "ablation", value_name = "NAME")]
        ablations: Vec<Ablation>,
        /// Continue after the session stored in a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Disable data-parallel inference.
        #[arg(long)]
        sequential: bool,
    },
    /// Print the session table of a finished run and redraw its plot.
    Report {
        /// Run directory holding report.json or metrics.csv.
        run_dir: PathBuf,
    },
    /// Recompute PD and average accuracy of the reference accuracy tables.
    Verify {
        /// Restrict to one dataset (cub, cifar100, mini-imagenet).
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Write the session split of a config as a JSON index.
    ExportStream {
        config: PathBuf,
        #[arg(long, env = ENV_SEED)]
        seed: Option<u64>,
        /// Destination file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a preset config (desk, cifar100, mini-imagenet, cub200) as TOML.
    Preset { name: String },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    ablations: Vec<Ablation>,
    resume: Option<PathBuf>,
    sequential: bool,
) -> Result<()> {
    let mut config = load_config(config, seed)?;
    if let Some(out) = out {
        config.output_dir = out;
    }
    for a in ablations {
        config = config.with_ablation(a);
    }
    let exec = if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let report = run_experiment_with(
        &config,
        &RunOptions {
            exec,
            resume,
            in_memory: false,
        },
    )?;
    print!("{}", render_table(&report));
    println!("artifacts in {}", config.output_dir.display());
    Ok(())
}

fn report(run_dir: &Path) -> Result<()> {
    let paths = RunPaths::new(run_dir);
    if paths.report().exists() {
        let report = load_report(&paths.report())?;
        print!("{}", render_table(&report));
        write_text(
            &paths.plot(),
            &accuracy_svg(&format!("seed {}", report.config.seed), &report.sessions),
        )?;
        return Ok(());
    }
    let rows =
        read_metrics_csv(&paths.metrics()).with_context(|| format!("no report.json or metrics.csv in {}", run_dir.display()))?;
    if rows.is_empty() {
        bail!("{} has no sessions", paths.metrics().display());
    }
    println!("{:>7} {:>8} {:>8} {:>8}", "session", "overall", "base", "novel");
    for r in &rows {
        let novel = r.novel.map(pct).unwrap_or_else(|| "-".into());
        println!("{:>7} {:>8} {:>8} {:>8}", r.session_index, pct(r.overall), pct(r.base), novel);
    }
    let accs: Vec<f64> = rows.iter().map(|r| r.overall).collect();
    let pd = semifscil::harness::performance_drop(accs[0], accs[accs.len() - 1]);
    println!(
        "PD {}  average {} (partial run)",
        pct(pd),
        pct(semifscil::harness::average_accuracy(&accs)?)
    );
    Ok(())
}

fn verify(dataset: Option<&str>) -> Result<bool> {
    let mut mismatches = 0;
    let mut total = 0;
    for c in verify_tables().iter().filter(|c| dataset.is_none_or(|d| c.row.dataset == d)) {
        total += 1;
        let status = if c.ok() { "ok" } else { "MISMATCH" };
        println!(
            "{status:>8}  {:<13} {:<10} {:<12} PD {:>6} (table {:>6})  avg {:>6} (table {:>6})",
            c.row.dataset,
            c.row.task,
            c.row.method,
            pct(round2(c.computed_pd)),
            pct(c.row.pd),
            pct(round2(c.computed_average)),
            pct(c.row.average)
        );
        mismatches += usize::from(!c.ok());
    }
    if total == 0 {
        bail!("no rows for dataset {:?}", dataset.unwrap_or_default());
    }
    println!("{} of {total} rows consistent", total - mismatches);
    Ok(mismatches == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            ablations,
            resume,
            sequential,
        } => run(&config, seed, out, ablations, resume, sequential).map(|_| true),
        Command::Report { run_dir } => report(&run_dir).map(|_| true),
        Command::Verify { dataset } => verify(dataset.as_deref()),
        Command::ExportStream { config, seed, out } => load_config(&config, seed)
            .and_then(|c| Ok(build_stream(&c)?.write_index(&out)?))
            .map(|_| true),
        Command::Preset { name } => match ExperimentConfig::preset(&name) {
            Some(c) => c.to_toml().map(|t| print!("{t}")).map(|_| true).map_err(Into::into),
            None => Err(anyhow::anyhow!("unknown preset '{name}'")),
        },
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
