//! Symbolic regression: fit a candidate expression on each case's training
//! split and score the median held-out NMSE.

use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;

use super::expr::Expr;
use super::fit::{FitConfig, fit_params};
use super::metrics::{median, nmse, sr_category_reward};
use super::{EvalResult, SymbolicRegressionConfig, Task, TaskError};
use crate::model::content_hash;
use crate::mutators::{EditMode, MutatorHints};
use crate::prompting::PromptTemplate;
use crate::sr_datasets::{BuiltinDataset, DatasetSpec, GeneratedDataset};

pub struct SrCase {
    pub spec: DatasetSpec,
    pub data: GeneratedDataset,
}

pub struct SymbolicRegressionTask {
    pub cases: Vec<SrCase>,
    pub initial: Expr,
    pub fit: FitConfig,
    pub max_depth: usize,
    pub time_limit: Duration,
    target: String,
    variables: Vec<String>,
}

impl SymbolicRegressionTask {
    pub fn from_config(c: &SymbolicRegressionConfig, time_limit: Duration) -> Result<Self, TaskError> {
        let mut specs: Vec<DatasetSpec> = c.builtin.iter().map(|b| b.spec()).collect();
        specs.extend(c.specs.iter().cloned());
        if specs.is_empty() {
            return Err(TaskError::Misconfigured("symbolic regression needs at least one dataset".into()));
        }
        let n_vars = specs[0].input_ranges.len();
        if specs.iter().any(|s| s.input_ranges.len() != n_vars) {
            return Err(TaskError::Misconfigured("all cases must share the same input columns".into()));
        }
        let mut cases = Vec::with_capacity(specs.len());
        for spec in specs {
            let data = spec.generate()?;
            cases.push(SrCase { spec, data });
        }
        let initial = match &c.initial {
            Some(text) => Expr::parse_with_depth(text, c.max_depth)
                .map_err(|e| TaskError::Misconfigured(format!("initial genome: {e}")))?,
            None => Expr::linear(n_vars),
        };
        let (target, variables) = match c.builtin.first() {
            Some(b) if c.specs.is_empty() => {
                (b.target().to_string(), b.variables().iter().map(|v| v.to_string()).collect())
            }
            _ => ("y".to_string(), (0..n_vars).map(|i| format!("x{i}")).collect()),
        };
        Ok(Self { cases, initial, fit: c.fit, max_depth: c.max_depth, time_limit, target, variables })
    }

    pub fn builtin(dataset: BuiltinDataset) -> Result<Self, TaskError> {
        let cfg = SymbolicRegressionConfig {
            builtin: vec![dataset],
            specs: Vec::new(),
            initial: None,
            fit: FitConfig::default(),
            max_depth: super::expr::DEFAULT_MAX_DEPTH,
            time_limit_secs: None,
        };
        Self::from_config(&cfg, super::DEFAULT_GEOMETRY_LIMIT)
    }

    /// Held-out NMSE per case after fitting; `None` marks a numerical failure.
    pub fn case_nmses(&self, ast: &Expr) -> Vec<(Option<f64>, Vec<f64>)> {
        let seed = content_hash(&ast.to_string());
        self.cases
            .iter()
            .enumerate()
            .map(|(i, case)| {
                let fit = fit_params(ast, &case.data.train, self.fit.restarts, self.fit.iters, seed ^ i as u64);
                if !fit.train_mse.is_finite() {
                    return (None, fit.params);
                }
                let pred = super::expr::eval_expression(ast, &case.data.test.inputs, &fit.params);
                if pred.iter().any(|p| !p.is_finite()) {
                    return (None, fit.params);
                }
                (nmse(&pred, &case.data.test.targets).ok(), fit.params)
            })
            .collect()
    }
}

fn format_params(params: &[f64]) -> String {
    let cells: Vec<String> = params.iter().map(|p| format!("{p:.6}")).collect();
    format!("[{}]", cells.join(", "))
}

impl Task for SymbolicRegressionTask {
    fn name(&self) -> String {
        let names: Vec<&str> = self.cases.iter().map(|c| c.spec.name.as_str()).collect();
        format!("symbolic-regression:{}", names.join("+"))
    }

    fn initial_solutions(&self, _rng: &mut ChaCha8Rng) -> Vec<String> {
        vec![self.initial.to_string()]
    }

    fn evaluate_content(&self, content: &str) -> Result<EvalResult, TaskError> {
        let start = Instant::now();
        let ast = match Expr::parse_with_depth(content.trim(), self.max_depth) {
            Ok(a) => a,
            Err(e) => return Ok(EvalResult::invalid(format!("unparseable expression: {e}"), start.elapsed())),
        };
        let n_vars = self.variables.len();
        if let Some(v) = ast.max_var().filter(|&v| v >= n_vars) {
            return Ok(EvalResult::invalid(
                format!("expression reads (var {v}) but only {n_vars} input column(s) exist"),
                start.elapsed(),
            ));
        }
        let results = self.case_nmses(&ast);
        let mut lines = Vec::new();
        let mut values = Vec::new();
        for (case, (value, params)) in self.cases.iter().zip(&results) {
            match value {
                Some(v) => {
                    lines.push(format!("{}: test NMSE {v:.6e}, fitted params {}", case.spec.name, format_params(params)));
                    values.push(*v);
                }
                None => lines.push(format!("{}: numerical error (non-finite prediction)", case.spec.name)),
            }
        }
        if values.len() < self.cases.len() {
            return Ok(EvalResult::invalid(lines.join("\n"), start.elapsed()));
        }
        let reward = sr_category_reward(&values)?;
        lines.insert(0, format!("median test NMSE {:.6e}", median(&values)));
        Ok(EvalResult::scored(reward, lines.join("\n"), start.elapsed()))
    }

    fn time_limit(&self) -> Duration {
        self.time_limit
    }

    fn fence_language(&self) -> &str {
        "sexp"
    }

    fn preferred_mode(&self) -> EditMode {
        EditMode::Full
    }

    fn default_template(&self) -> PromptTemplate {
        let vars: Vec<&str> = self.variables.iter().map(String::as_str).collect();
        PromptTemplate::symbolic_regression(&self.target, &vars)
    }

    fn mutator_hints(&self) -> MutatorHints {
        MutatorHints { n_vars: Some(self.variables.len()), max_depth: Some(self.max_depth), ..Default::default() }
    }
}
