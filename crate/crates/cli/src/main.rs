use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use stepstone::config::ConfigError;
use stepstone::engine::events::read_log;
use stepstone::engine::{Engine, EngineError, ResumeNotice, EVENTS_FILE};
use stepstone::metrics::export::{self, ImpAtKRow, TransferRow};
use stepstone::metrics::{
    bootstrap_ci, improvement_at_k, progress_from_events, reconstruct, transfer_select,
    validation_selected_improvement, BootstrapParams, GrowthScoreParams, Reconstruction,
};
use stepstone::{Exec, Mode, RunConfig, SelectionPolicy};

#[derive(Parser)]
#[command(name = "stepstone", version, about = "Archive-based open-ended self-improvement runs")]
struct Cli {
    /// More log output; repeat for debug level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run.
    Run(RunArgs),
    /// Continue an interrupted run from its state directory.
    Resume(ResumeArgs),
    /// Export metrics from one or more finished runs.
    Analyze(AnalyzeArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, required_unless_present = "demo", conflicts_with = "demo")]
    config: Option<PathBuf>,
    /// Use the built-in surrogate configuration.
    #[arg(long)]
    demo: bool,
    /// State directory; overrides `paths.state_dir`.
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// full, no-self-improve, no-open-ended, dgm-fixed-instruction or modifiable-selection.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Parent selection: score-child-prop, uniform-random, softmax or ucb.
    #[arg(long)]
    selection: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    midpoint_pool: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    exploration_weight: Option<f64>,
    #[arg(long)]
    stagnation: bool,
}

#[derive(clap::Args)]
struct ResumeArgs {
    #[arg(long)]
    state: PathBuf,
    /// Refuse to resume unless this configuration matches the stored one.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    /// Per-iteration best and mean scores, plus a lineage CSV alongside.
    Progress,
    /// Graphviz DOT of the agent tree.
    Tree,
    /// Every agent ever archived, as JSON.
    Archive,
    /// improvement@k per run.
    Impk,
    /// Transfer-agent choice by growth score per run.
    Transfer,
    /// Bootstrap interval of a per-run statistic across runs.
    Ci,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Statistic {
    /// Best selection score in each run's final archive.
    BestScore,
    /// improvement@k of each run.
    ImpAtK,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// State directory of a run; repeat for impk, transfer and ci.
    #[arg(long, required = true)]
    state: Vec<PathBuf>,
    #[arg(long, value_enum)]
    metric: Metric,
    #[arg(long)]
    out: PathBuf,
    /// Generation attempts counted by improvement@k; all when omitted.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = GrowthScoreParams::default().gamma)]
    gamma: f64,
    #[arg(long, default_value_t = GrowthScoreParams::default().min_descendants)]
    min_descendants: usize,
    #[arg(long, value_enum, default_value_t = Statistic::BestScore)]
    statistic: Statistic,
    #[arg(long, default_value_t = BootstrapParams::default().resamples)]
    resamples: usize,
    #[arg(long, default_value_t = BootstrapParams::default().level)]
    level: f64,
    #[arg(long, default_value_t = BootstrapParams::default().seed)]
    seed: u64,
}

fn invalid(key: &str, message: impl Into<String>) -> anyhow::Error {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
    .into()
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| invalid(key, format!("--selection needs --{}", key.replace('_', "-"))))
}

fn selection_from_flags(args: &RunArgs, current: SelectionPolicy) -> Result<SelectionPolicy> {
    let Some(variant) = args.selection.as_deref() else {
        return Ok(current);
    };
    Ok(match variant {
        "score-child-prop" => {
            let defaults = SelectionPolicy::default();
            let SelectionPolicy::ScoreChildProp { lambda, midpoint_pool } = defaults else {
                unreachable!("default policy is score-child-prop")
            };
            SelectionPolicy::ScoreChildProp {
                lambda: args.lambda.unwrap_or(lambda),
                midpoint_pool: args.midpoint_pool.unwrap_or(midpoint_pool),
            }
        }
        "uniform-random" => SelectionPolicy::UniformRandom,
        "softmax" => SelectionPolicy::Softmax {
            temperature: required(args.temperature, "temperature")?,
        },
        "ucb" => SelectionPolicy::Ucb {
            exploration_weight: required(args.exploration_weight, "exploration_weight")?,
            stagnation: args.stagnation,
        },
        other => return Err(invalid("selection", format!("unknown selection variant `{other}`"))),
    })
}

fn effective_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::demo(),
    };
    if let Some(mode) = &args.mode {
        cfg.mode = mode.parse::<Mode>().map_err(|e| invalid("mode", e.to_string()))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(t) = args.iterations {
        cfg.iterations = t;
    }
    if let Some(c) = args.concurrency {
        cfg.concurrency = c;
    }
    cfg.selection = selection_from_flags(args, cfg.selection)?;
    cfg.validate()?;
    Ok(cfg)
}

fn report(engine: &Engine) {
    let archive = engine.archive();
    let best = archive.best_by_selection().expect("archive has a root");
    println!(
        "{}: {} iterations, archive size {}, best agent {} (selection score {:.4})",
        engine.state().run_id,
        engine.state().iteration,
        archive.len(),
        best.id,
        best.selection_score()
    );
    println!("state: {}", engine.dir().display());
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = effective_config(&args)?;
    let dir = args
        .state
        .clone()
        .or_else(|| cfg.paths.state_dir.clone())
        .ok_or_else(|| invalid("paths.state_dir", "no state directory; pass --state or set paths.state_dir"))?;
    info!("mode {}, {} iterations, seed {}", cfg.mode, cfg.iterations, cfg.seed);
    let mut engine = Engine::create(cfg, &dir)?;
    engine.run()?;
    report(&engine);
    Ok(())
}

fn cmd_resume(args: ResumeArgs) -> Result<()> {
    if let Some(path) = &args.config {
        let given = RunConfig::load(path)?;
        let stored = Engine::stored_config(&args.state)?;
        if given.hash() != stored.hash() {
            return Err(EngineError::ConfigMismatch {
                expected: stored.hash(),
                found: given.hash(),
            }
            .into());
        }
    }
    let (mut engine, notice) = Engine::resume(&args.state)?;
    match notice {
        ResumeNotice::AlreadyComplete => {
            println!("run is already complete; nothing to do");
        }
        ResumeNotice::Continuing { completed } => {
            println!("resuming after iteration {completed}");
            engine.run()?;
        }
    }
    report(&engine);
    Ok(())
}

fn load_run(dir: &Path) -> Result<Reconstruction> {
    let path = dir.join(EVENTS_FILE);
    let events = read_log(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(reconstruct(&events)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn lineage_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("progress");
    out.with_file_name(format!("{stem}_lineage.csv"))
}

fn single(states: &[PathBuf], metric: &str) -> Result<PathBuf> {
    match states {
        [one] => Ok(one.clone()),
        _ => Err(invalid("state", format!("{metric} takes exactly one --state"))),
    }
}

fn impk_row(rec: &Reconstruction, k: Option<usize>) -> ImpAtKRow {
    let k = k.unwrap_or(rec.attempts.len());
    let initial = rec.tree.get(0).map(|n| n.selection_score()).unwrap_or(0.0);
    let selected = validation_selected_improvement(&rec.tree);
    ImpAtKRow {
        run_id: rec.run_id.clone(),
        k,
        initial,
        imp_at_k: improvement_at_k(initial, &rec.scores_within(k), k),
        validation_selected_node: selected.map(|s| s.0),
        validation_selected_test_delta: selected.map(|s| s.1),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    match args.metric {
        Metric::Progress => {
            let dir = single(&args.state, "progress")?;
            let path = dir.join(EVENTS_FILE);
            let events = read_log(&path).with_context(|| format!("reading {}", path.display()))?;
            let series = progress_from_events(&events)?;
            export::progress_csv(create(&args.out)?, &series)?;
            let lineage = lineage_path(&args.out);
            export::lineage_csv(create(&lineage)?, &series)?;
            println!("wrote {} and {}", args.out.display(), lineage.display());
        }
        Metric::Tree => {
            let rec = load_run(&single(&args.state, "tree")?)?;
            std::fs::write(&args.out, export::tree_dot(&rec.tree))
                .with_context(|| format!("writing {}", args.out.display()))?;
            println!("wrote {} ({} agents)", args.out.display(), rec.tree.len());
        }
        Metric::Archive => {
            let rec = load_run(&single(&args.state, "archive")?)?;
            let doc = json!({
                "run_id": rec.run_id,
                "mode": rec.mode,
                "nodes": rec.tree.nodes(),
            });
            serde_json::to_writer_pretty(create(&args.out)?, &doc)?;
            println!("wrote {} ({} agents)", args.out.display(), rec.tree.len());
        }
        Metric::Impk => {
            let mut rows = Vec::new();
            for dir in &args.state {
                rows.push(impk_row(&load_run(dir)?, args.k));
            }
            export::impk_csv(create(&args.out)?, &rows)?;
            println!("wrote {} ({} runs)", args.out.display(), rows.len());
        }
        Metric::Transfer => {
            let params = GrowthScoreParams {
                gamma: args.gamma,
                min_descendants: args.min_descendants,
            };
            let mut rows = Vec::new();
            for dir in &args.state {
                let rec = load_run(dir)?;
                let (node, growth_score) = transfer_select(&rec.tree, &params)
                    .with_context(|| format!("transfer selection for {}", dir.display()))?;
                rows.push(TransferRow {
                    run_id: rec.run_id.clone(),
                    gamma: params.gamma,
                    min_descendants: params.min_descendants,
                    node,
                    growth_score,
                    descendants: rec.tree.descendants(node)?.len(),
                });
            }
            export::transfer_csv(create(&args.out)?, &rows)?;
            println!("wrote {} ({} runs)", args.out.display(), rows.len());
        }
        Metric::Ci => {
            let mut values = Vec::new();
            for dir in &args.state {
                let rec = load_run(dir)?;
                values.push(match args.statistic {
                    Statistic::BestScore => rec
                        .archive
                        .best_by_selection()
                        .map(|n| n.selection_score())
                        .unwrap_or(0.0),
                    Statistic::ImpAtK => impk_row(&rec, args.k).imp_at_k,
                });
            }
            let params = BootstrapParams {
                resamples: args.resamples,
                level: args.level,
                seed: args.seed,
            };
            let ci = bootstrap_ci(&values, &params, Exec::default())?;
            let name = match args.statistic {
                Statistic::BestScore => "best-score",
                Statistic::ImpAtK => "imp-at-k",
            };
            export::ci_csv(create(&args.out)?, name, values.len(), &params, &ci)?;
            println!(
                "{name} median {:.4}, {:.0}% interval [{:.4}, {:.4}] over {} runs",
                ci.median,
                params.level * 100.0,
                ci.lower,
                ci.upper,
                values.len()
            );
        }
    }
    Ok(())
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        cause.downcast_ref::<ConfigError>().is_some()
            || matches!(cause.downcast_ref::<EngineError>(), Some(EngineError::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Resume(args) => cmd_resume(args),
        Command::Analyze(args) => cmd_analyze(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lineage_sits_next_to_progress() {
        assert_eq!(lineage_path(Path::new("/tmp/out/p.csv")), PathBuf::from("/tmp/out/p_lineage.csv"));
    }

    #[test]
    fn bad_mode_is_a_config_error() {
        let cli = Cli::parse_from(["stepstone", "run", "--demo", "--mode", "sideways", "--state", "/x"]);
        let Command::Run(args) = cli.command else { panic!() };
        let err = effective_config(&args).unwrap_err();
        assert!(is_config_error(&err));
        assert!(err.to_string().contains("`mode`"));
    }

    #[test]
    fn softmax_without_temperature_names_the_key() {
        let cli = Cli::parse_from(["stepstone", "run", "--demo", "--selection", "softmax"]);
        let Command::Run(args) = cli.command else { panic!() };
        let err = effective_config(&args).unwrap_err();
        assert!(err.to_string().contains("`temperature`"));
    }
}
