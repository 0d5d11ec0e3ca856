//! Task evaluators and the configuration that selects one.

pub mod circle;
pub mod expr;
pub mod external;
pub mod fit;
pub mod functions;
pub mod metrics;
pub mod symreg;

use std::path::PathBuf;
use std::time::Duration;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mutators::{EditMode, MutatorHints};
use crate::prompting::PromptTemplate;
use crate::sr_datasets::{BuiltinDataset, DatasetSpec};

use circle::{CirclePackingInstance, Domain, eval_circle_packing};
use fit::FitConfig;
use functions::{BenchmarkFunction, FunctionName, eval_function_min_task};
use symreg::SymbolicRegressionTask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("task misconfigured: {0}")]
    Misconfigured(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("targets are constant; NMSE is undefined")]
    DegenerateTargets,
    #[error("ground truth of dataset {0} is non-finite over its input ranges")]
    NonFiniteGroundTruth(String),
    #[error("could not spawn evaluator: {0}")]
    SpawnFailure(String),
}

impl TaskError {
    /// Faults that stop a run; the rest score the candidate 0.
    pub fn is_fatal(&self) -> bool {
        matches!(self, TaskError::Misconfigured(_) | TaskError::NonFiniteGroundTruth(_) | TaskError::SpawnFailure(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub reward: f64,
    pub valid: bool,
    pub feedback: String,
    /// Seconds.
    pub wall_time: f64,
}

impl EvalResult {
    pub fn invalid(feedback: String, elapsed: Duration) -> Self {
        Self { reward: 0.0, valid: false, feedback, wall_time: elapsed.as_secs_f64() }
    }

    /// A valid result; negative or non-finite rewards are clamped to 0.
    pub fn scored(reward: f64, feedback: String, elapsed: Duration) -> Self {
        let reward = if reward.is_finite() { reward.max(0.0) } else { 0.0 };
        Self { reward, valid: true, feedback, wall_time: elapsed.as_secs_f64() }
    }
}

pub trait Task: Send + Sync {
    fn name(&self) -> String;
    fn initial_solutions(&self, rng: &mut ChaCha8Rng) -> Vec<String>;
    /// Scores one candidate. `Err` is reserved for configuration faults.
    fn evaluate_content(&self, content: &str) -> Result<EvalResult, TaskError>;
    fn time_limit(&self) -> Duration;
    fn fence_language(&self) -> &str;
    fn preferred_mode(&self) -> EditMode;
    fn default_template(&self) -> PromptTemplate;
    fn mutator_hints(&self) -> MutatorHints {
        MutatorHints::default()
    }
}

/// Evaluates and enforces the task's time limit and the reward contract.
pub fn evaluate(task: &dyn Task, content: &str) -> Result<EvalResult, TaskError> {
    let mut r = task.evaluate_content(content)?;
    let limit = task.time_limit();
    if r.wall_time > limit.as_secs_f64() {
        return Ok(EvalResult::invalid("timeout".into(), Duration::from_secs_f64(r.wall_time)));
    }
    if !r.valid || !r.reward.is_finite() || r.reward < 0.0 {
        r.reward = 0.0;
    }
    Ok(r)
}

pub const DEFAULT_OPTIMIZATION_LIMIT: Duration = Duration::from_secs(120);
pub const DEFAULT_GEOMETRY_LIMIT: Duration = Duration::from_secs(60);

fn limit(secs: Option<f64>, default: Duration) -> Result<Duration, TaskError> {
    match secs {
        None => Ok(default),
        Some(s) if s > 0.0 && s.is_finite() => Ok(Duration::from_secs_f64(s)),
        Some(s) => Err(TaskError::Misconfigured(format!("time limit must be positive, got {s}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CirclePackingConfig {
    #[serde(default = "default_circles")]
    pub n: usize,
    #[serde(default = "default_domain")]
    pub domain: Domain,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub time_limit_secs: Option<f64>,
}

fn default_circles() -> usize {
    26
}
fn default_domain() -> Domain {
    Domain::UnitSquare
}
fn default_tolerance() -> f64 {
    circle::DEFAULT_TOLERANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionMinConfig {
    pub function: FunctionName,
    #[serde(default)]
    pub dimension: Option<usize>,
    /// Number of uniformly random starting points.
    #[serde(default = "default_restart_seeds")]
    pub restart_seeds: usize,
    #[serde(default)]
    pub time_limit_secs: Option<f64>,
}

fn default_restart_seeds() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolicRegressionConfig {
    #[serde(default)]
    pub builtin: Vec<BuiltinDataset>,
    #[serde(default)]
    pub specs: Vec<DatasetSpec>,
    /// Starting genome; defaults to a linear model in all inputs.
    #[serde(default)]
    pub initial: Option<String>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    #[serde(default)]
    pub time_limit_secs: Option<f64>,
}

fn default_max_depth() -> usize {
    expr::DEFAULT_MAX_DEPTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    pub command: Vec<String>,
    #[serde(default)]
    pub initial_solutions: Vec<String>,
    #[serde(default)]
    pub initial_files: Vec<PathBuf>,
    #[serde(default = "default_fence")]
    pub fence_language: String,
    #[serde(default)]
    pub mode: EditMode,
    pub problem_description: String,
    #[serde(default)]
    pub time_limit_secs: Option<f64>,
}

fn default_fence() -> String {
    "python".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskConfig {
    CirclePacking(CirclePackingConfig),
    FunctionMin(FunctionMinConfig),
    SymbolicRegression(SymbolicRegressionConfig),
    External(ExternalConfig),
}

impl TaskConfig {
    pub fn build(&self) -> Result<Box<dyn Task>, TaskError> {
        Ok(match self {
            TaskConfig::CirclePacking(c) => {
                let instance = CirclePackingInstance { n: c.n, domain: c.domain, tolerance: c.tolerance };
                instance.validate()?;
                Box::new(CirclePackingTask { instance, time_limit: limit(c.time_limit_secs, DEFAULT_GEOMETRY_LIMIT)? })
            }
            TaskConfig::FunctionMin(c) => {
                if c.restart_seeds == 0 {
                    return Err(TaskError::Misconfigured("restart_seeds must be positive".into()));
                }
                Box::new(FunctionMinTask {
                    function: BenchmarkFunction::by_name(c.function, c.dimension)?,
                    restart_seeds: c.restart_seeds,
                    time_limit: limit(c.time_limit_secs, DEFAULT_OPTIMIZATION_LIMIT)?,
                })
            }
            TaskConfig::SymbolicRegression(c) => Box::new(SymbolicRegressionTask::from_config(
                c,
                limit(c.time_limit_secs, DEFAULT_GEOMETRY_LIMIT)?,
            )?),
            TaskConfig::External(c) => {
                if c.command.is_empty() {
                    return Err(TaskError::Misconfigured("external command is empty".into()));
                }
                let mut initial = c.initial_solutions.clone();
                for path in &c.initial_files {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| TaskError::Misconfigured(format!("{}: {e}", path.display())))?;
                    initial.push(text);
                }
                if initial.is_empty() {
                    return Err(TaskError::Misconfigured("external task needs initial solutions".into()));
                }
                Box::new(ExternalTask {
                    config: c.clone(),
                    initial,
                    time_limit: limit(c.time_limit_secs, DEFAULT_OPTIMIZATION_LIMIT)?,
                })
            }
        })
    }
}

pub struct CirclePackingTask {
    pub instance: CirclePackingInstance,
    pub time_limit: Duration,
}

impl Task for CirclePackingTask {
    fn name(&self) -> String {
        format!("circle-packing-{}", self.instance.n)
    }

    fn initial_solutions(&self, _rng: &mut ChaCha8Rng) -> Vec<String> {
        vec![self.instance.initial_solution()]
    }

    fn evaluate_content(&self, content: &str) -> Result<EvalResult, TaskError> {
        Ok(eval_circle_packing(&self.instance, content))
    }

    fn time_limit(&self) -> Duration {
        self.time_limit
    }

    fn fence_language(&self) -> &str {
        "json"
    }

    fn preferred_mode(&self) -> EditMode {
        EditMode::Diff
    }

    fn default_template(&self) -> PromptTemplate {
        PromptTemplate::circle_packing(self.instance.n, self.instance.domain.describe())
    }

    fn mutator_hints(&self) -> MutatorHints {
        MutatorHints { domain: Some(self.instance.domain), ..Default::default() }
    }
}

pub struct FunctionMinTask {
    pub function: BenchmarkFunction,
    pub restart_seeds: usize,
    pub time_limit: Duration,
}

impl Task for FunctionMinTask {
    fn name(&self) -> String {
        let name = serde_json::to_value(self.function.name).ok().and_then(|v| v.as_str().map(String::from));
        name.unwrap_or_default()
    }

    fn initial_solutions(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        self.function.restart_seeds(self.restart_seeds, rng)
    }

    fn evaluate_content(&self, content: &str) -> Result<EvalResult, TaskError> {
        Ok(eval_function_min_task(&self.function, content))
    }

    fn time_limit(&self) -> Duration {
        self.time_limit
    }

    fn fence_language(&self) -> &str {
        "json"
    }

    fn preferred_mode(&self) -> EditMode {
        EditMode::Diff
    }

    fn default_template(&self) -> PromptTemplate {
        PromptTemplate::function_minimization(
            self.function.dimension,
            self.function.formula(),
            &self.function.describe_constraints(),
        )
    }

    fn mutator_hints(&self) -> MutatorHints {
        MutatorHints { bounds: Some(self.function.bounds.clone()), ..Default::default() }
    }
}

pub struct ExternalTask {
    pub config: ExternalConfig,
    pub initial: Vec<String>,
    pub time_limit: Duration,
}

impl Task for ExternalTask {
    fn name(&self) -> String {
        format!("external:{}", self.config.command[0])
    }

    fn initial_solutions(&self, _rng: &mut ChaCha8Rng) -> Vec<String> {
        self.initial.clone()
    }

    fn evaluate_content(&self, content: &str) -> Result<EvalResult, TaskError> {
        external::external_evaluate(&self.config.command, content, self.time_limit)
    }

    /// The subprocess is killed at the limit itself.
    fn time_limit(&self) -> Duration {
        self.time_limit + Duration::from_secs(1)
    }

    fn fence_language(&self) -> &str {
        &self.config.fence_language
    }

    fn preferred_mode(&self) -> EditMode {
        self.config.mode
    }

    fn default_template(&self) -> PromptTemplate {
        PromptTemplate::new(self.config.problem_description.clone())
    }
}
