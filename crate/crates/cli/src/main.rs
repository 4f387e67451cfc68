use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use plastinet::budget::{solve_method_dims, verify_schedule, BudgetReport};
use plastinet::cl::{run_cl, ClConfig};
use plastinet::config::{load_config, BudgetConfig, ExperimentConfig};
use plastinet::data::{gen_synthetic_chunks, save_dataset, DataConfig};
use plastinet::rl::{collect_episodes, router_trace, run_rl, write_trace_csv, RlConfig};
use plastinet::telemetry::{plot_data, write_agg_csv};
use plastinet::verify::preservation_checks;
use plastinet::Error;

#[derive(Parser, Debug)]
#[command(name = "plastinet", version, about = "Dynamic MoE growth and network-expansion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Runs each seed in turn, e.g. `0,1,2`
    #[arg(long, global = true, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Vec<u64>,
    /// Output directory [default: $PLASTINET_OUT or .]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Continual-learning run over a chunked stream
    RunCl,
    /// PPO run on the staged gridworld
    RunRl {
        /// Also record router weights over this many evaluation episodes
        #[arg(long, default_value_t = 0)]
        trace_episodes: usize,
    },
    /// Solve and verify growth schedules for a parameter budget
    Budget,
    /// Generate a synthetic chunked dataset
    GenData,
    /// Aggregate per-seed logs into mean/std per method and step
    PlotData {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Metric column [default: train_accuracy or return]
        #[arg(long)]
        metric: Option<String>,
        /// Bucket width for steps (for episode-indexed logs)
        #[arg(long)]
        bin: Option<u64>,
        #[arg(long, default_value = "plot_data.csv")]
        output: String,
    },
    /// Budget verification and preservation self-checks
    Verify,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InfeasibleBudget(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn out_dir(cli: &Cli) -> CliResult<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("PLASTINET_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Loads the config, requiring `kind`; falls back to defaults without `--config`.
fn experiment(cli: &Cli, kind: &str, default: ExperimentConfig) -> CliResult<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(p) => load_config(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => default,
    };
    if cfg.kind() != kind {
        return Err(Failure::Config(format!("config kind `{}` does not fit this subcommand (needs `{kind}`)", cfg.kind())));
    }
    Ok(cfg)
}

fn seeds(cli: &Cli, cfg: &ExperimentConfig) -> Vec<u64> {
    if !cli.seeds.is_empty() {
        cli.seeds.clone()
    } else {
        vec![cli.seed.unwrap_or(cfg.seed())]
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::RunCl => {
            let cfg = experiment(cli, "cl", ExperimentConfig::Cl(ClConfig::default()))?;
            let out = out_dir(cli)?;
            for s in seeds(cli, &cfg) {
                let ExperimentConfig::Cl(mut c) = cfg.clone() else { unreachable!() };
                c.seed = s;
                let log = run_cl(&c)?;
                let path = out.join(format!("cl_{}_seed{s}.csv", c.method.label()));
                log.write_csv(create(&path)?)?;
                let last = log.rows.last().expect("at least one row");
                println!("{}: final train_accuracy {:.4}, active_params {}", path.display(), last.train_accuracy, last.active_params);
            }
        }
        Command::RunRl { trace_episodes } => {
            let cfg = experiment(cli, "rl", ExperimentConfig::Rl(RlConfig::default()))?;
            let out = out_dir(cli)?;
            for s in seeds(cli, &cfg) {
                let ExperimentConfig::Rl(mut c) = cfg.clone() else { unreachable!() };
                c.seed = s;
                let res = run_rl(&c)?;
                let stem = format!("rl_{}_seed{s}", c.variant.label());
                let path = out.join(format!("{stem}.csv"));
                res.log.write_csv(create(&path)?)?;
                let tail = res.log.mean_return_after(c.total_steps * 9 / 10);
                println!("{}: {} episodes, final-10% mean return {:?}", path.display(), res.log.rows.len(), tail);
                if *trace_episodes > 0 && res.agent.expert_counts().is_some() {
                    let eps = collect_episodes(&res.agent, &res.store, &c.env, *trace_episodes, s ^ 0x7ace)?;
                    let steps: Vec<_> = eps.into_iter().flatten().collect();
                    let rows = router_trace(&res.agent, &res.store, &steps)?;
                    let tpath = out.join(format!("{stem}_router_trace.csv"));
                    write_trace_csv(&rows, create(&tpath)?)?;
                    println!("{}: {} rows", tpath.display(), rows.len());
                }
            }
        }
        Command::Budget => {
            let cfg = experiment(cli, "budget", ExperimentConfig::Budget(BudgetConfig::default()))?;
            let ExperimentConfig::Budget(b) = cfg else { unreachable!() };
            let report = budget_report(&b, cli.seed.unwrap_or(b.seed))?;
            let path = out_dir(cli)?.join("budget_report.csv");
            report.write_csv(create(&path)?)?;
            println!("{}: {} rows, {} violations", path.display(), report.rows.len(), report.violations());
            if report.violations() > 0 {
                return Err(Failure::Runtime(format!("{} budget violations", report.violations())));
            }
        }
        Command::GenData => {
            let cfg = experiment(cli, "gen-data", ExperimentConfig::GenData(DataConfig::default()))?;
            let ExperimentConfig::GenData(mut d) = cfg else { unreachable!() };
            if let Some(s) = cli.seed {
                d.seed = s;
            }
            let ds = gen_synthetic_chunks(&d)?;
            let out = out_dir(cli)?;
            save_dataset(&ds, &out)?;
            println!("{}: {} chunks, {} classes", out.display(), ds.chunks.len(), ds.num_classes);
        }
        Command::PlotData { logs, metric, bin, output } => {
            let rows = plot_data(logs, metric.as_deref(), *bin)?;
            let path = out_dir(cli)?.join(output);
            write_agg_csv(&rows, create(&path)?)?;
            println!("{}: {} rows", path.display(), rows.len());
        }
        Command::Verify => {
            let b = match &cli.config {
                Some(_) => match experiment(cli, "budget", ExperimentConfig::Budget(BudgetConfig::default()))? {
                    ExperimentConfig::Budget(b) => b,
                    _ => unreachable!(),
                },
                None => BudgetConfig::default(),
            };
            let seed = cli.seed.unwrap_or(b.seed);
            let report = budget_report(&b, seed)?;
            let mut failed = 0;
            for m in &b.methods {
                let label = m.label();
                let rows: Vec<_> = report.rows.iter().filter(|r| r.method == label).collect();
                let bad = rows.iter().any(|r| r.violation);
                failed += bad as usize;
                let last = rows.last().map_or(0, |r| r.params);
                println!("{} budget {label}: final {last} of {}", if bad { "FAIL" } else { "PASS" }, b.budget);
            }
            for c in preservation_checks(seed)? {
                failed += !c.passed as usize;
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} checks failed")));
            }
        }
    }
    Ok(())
}

fn budget_report(b: &BudgetConfig, seed: u64) -> CliResult<BudgetReport> {
    let mut report = BudgetReport::default();
    for m in &b.methods {
        let sched = solve_method_dims(*m, b.d, b.budget, b.stages)?;
        report.rows.extend(verify_schedule(&sched, seed)?.rows);
    }
    Ok(report)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{}", e.render());
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
