//! `helix`: run, resume and inspect quality-diversity searches.
//!
//! Exit codes: 0 success, 1 invalid solution (`validate`), 2 fault.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use helix_core::config::{self, EngineConfig};
use helix_core::engine::{Engine, IterationSummary};
use helix_core::persistence::{self, Event, RunDir};
use helix_core::selection::nondominated_sort;
use helix_core::tasks::{self, TaskConfig};

#[derive(Parser)]
#[command(name = "helix", version, about = "Quality-diversity evolutionary search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; must be absent or empty.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Continue a run from its latest checkpoint.
    Resume {
        #[arg(long)]
        run: PathBuf,
        /// Raise or lower the iteration target recorded in the snapshot.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Summarize a run or write its report.csv.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Summary)]
        format: ReportFormat,
    },
    /// Score one solution file against a task.
    Validate {
        /// A task table (e.g. `[circle-packing]`) or a full run config.
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Print the Pareto fronts of the dataset as of an iteration.
    Pareto {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        iteration: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Summary,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, iterations, seed } => cmd_run(&config, &out, iterations, seed),
        Command::Resume { run, iterations } => cmd_resume(&run, iterations),
        Command::Report { run, format } => cmd_report(&run, format),
        Command::Validate { task, solution } => cmd_validate(&task, &solution),
        Command::Pareto { run, iteration } => cmd_pareto(&run, iteration),
    };
    match result {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn print_summary(s: &IterationSummary) {
    println!(
        "iteration {:>5}  best {:.8}  mean {:.6}  valid {:.3}  population {}  ({:.2}s)",
        s.iteration,
        s.best_reward_so_far,
        s.mean_reward,
        s.validity_rate,
        s.population_ids.len(),
        s.wall_time
    );
}

fn drive(engine: &mut Engine, dir: &RunDir) -> Result<ExitCode, String> {
    while engine.state.iteration < engine.config.iterations {
        let s = engine.run_iteration().map_err(|e| e.to_string())?;
        print_summary(&s);
    }
    let best = engine.state.best_reward();
    println!("finished at iteration {}; best reward {best:.8}", engine.state.iteration);
    if engine.state.best_valid.is_some() {
        println!("best solution: {}", dir.best().display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(config: &Path, out: &Path, iterations: Option<u64>, seed: Option<u64>) -> Result<ExitCode, String> {
    let mut config = EngineConfig::load(config).map_err(|e| e.to_string())?;
    if let Some(n) = iterations {
        config.iterations = n;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    let dir = RunDir::new(out);
    let mut engine = persistence::start_run(&dir, config).map_err(|e| e.to_string())?;
    if let Some(s) = engine.summary() {
        print_summary(s);
    }
    drive(&mut engine, &dir)
}

fn cmd_resume(run: &Path, iterations: Option<u64>) -> Result<ExitCode, String> {
    let dir = RunDir::new(run);
    let mut engine = persistence::resume(&dir, iterations).map_err(|e| e.to_string())?;
    if engine.state.iteration >= engine.config.iterations {
        println!("run already complete at iteration {}; nothing to do", engine.state.iteration);
        return Ok(ExitCode::SUCCESS);
    }
    println!("resuming from iteration {}", engine.state.iteration);
    drive(&mut engine, &dir)
}

fn cmd_report(run: &Path, format: ReportFormat) -> Result<ExitCode, String> {
    let dir = RunDir::new(run);
    match format {
        ReportFormat::Csv => {
            let path = persistence::write_report(&dir).map_err(|e| e.to_string())?;
            println!("{}", path.display());
        }
        ReportFormat::Summary => {
            let rows = persistence::build_report(&dir).map_err(|e| e.to_string())?;
            let events = dir.read_events().map_err(|e| e.to_string())?;
            let best = events
                .iter()
                .filter_map(|e| match e {
                    Event::Solution(r) => Some(r.reward),
                    _ => None,
                })
                .fold(0.0, f64::max);
            println!("iterations: {}", rows.len());
            println!("best reward: {best:.8}");
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                let mean = rows.iter().map(|r| r.validity_rate).sum::<f64>() / rows.len() as f64;
                println!(
                    "validity rate: first {:.3}, last {:.3}, mean {mean:.3}",
                    first.validity_rate, last.validity_rate
                );
                println!("mean reward: first {:.6}, last {:.6}", first.mean_reward, last.mean_reward);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_task(path: &Path) -> Result<TaskConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let expanded = config::expand(&text).map_err(|e| e.to_string())?;
    let table: toml::Table = toml::from_str(&expanded).map_err(|e| format!("{}: {e}", path.display()))?;
    if table.contains_key("task") {
        return EngineConfig::from_toml_str(&text, path.parent()).map(|c| c.task).map_err(|e| e.to_string());
    }
    toml::from_str(&expanded).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_validate(task: &Path, solution: &Path) -> Result<ExitCode, String> {
    let task = load_task(task)?.build().map_err(|e| e.to_string())?;
    let content = std::fs::read_to_string(solution).map_err(|e| format!("{}: {e}", solution.display()))?;
    let result = tasks::evaluate(&*task, &content).map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string_pretty(&result).map_err(|e| e.to_string())?);
    Ok(if result.valid { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_pareto(run: &Path, iteration: u64) -> Result<ExitCode, String> {
    let dir = RunDir::new(run);
    let config = dir.load_snapshot().map_err(|e| e.to_string())?;
    let state = persistence::restore_state(&dir, &config, iteration).map_err(|e| e.to_string())?;
    let fronts = nondominated_sort(&state.objective_points()).map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string_pretty(&fronts).map_err(|e| e.to_string())?);
    Ok(ExitCode::SUCCESS)
}
