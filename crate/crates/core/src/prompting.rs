//! Mutation prompts built from a sampled solution and its lineage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LineageStore, ModelError, SolutionId, SolutionRecord};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("prompt budget of {budget} chars cannot hold the current solution block ({needed} chars)")]
    BudgetTooSmall { budget: usize, needed: usize },
    #[error("template problem description is empty")]
    EmptyProblem,
    #[error("cannot read template {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse template {path}: {message}")]
    Parse { path: String, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptLayout {
    /// Current solution followed by its ancestors, each with reward and feedback.
    #[default]
    Lineage,
    /// Current solution only.
    CurrentOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    #[serde(default)]
    pub system_preamble: String,
    pub problem_description: String,
    /// Placeholders: `{status}`, `{content}`, `{reward}`, `{feedback}`.
    #[serde(default = "default_entry_format")]
    pub entry_format: String,
    #[serde(default = "default_current_marker")]
    pub current_marker: String,
    /// May contain `{k}`, the distance to the ancestor (1 = parent).
    #[serde(default = "default_ancestor_marker")]
    pub ancestor_marker: String,
    /// Appended after the solution blocks.
    #[serde(default)]
    pub task_instructions: String,
    #[serde(default)]
    pub layout: PromptLayout,
}

fn default_entry_format() -> String {
    "Status: {status}\n```\n{content}\n```\nFeedback:\n{feedback}".to_string()
}

fn default_current_marker() -> String {
    "## Current Program".to_string()
}

fn default_ancestor_marker() -> String {
    "## Previous Version {k}".to_string()
}

const ANSWER_FORMAT: &str = "Respond in the following format: <think>\n...\n</think>\n<answer>\n...\n</answer>.";

const CODE_EDIT_PREAMBLE: &str = "You are an expert software developer tasked with iteratively improving a solution.\n\
Analyze the current solution together with the feedback from earlier attempts and propose targeted changes that raise its score.";

const DIFF_INSTRUCTIONS: &str = "## Task\n\
Suggest improvements that will lead to a higher score.\n\n\
You MUST use the exact SEARCH/REPLACE diff format shown below to indicate changes:\n\n\
<<<<<<< SEARCH\n\
# Original text to find and replace (must match exactly)\n\
=======\n\
# New replacement text\n\
>>>>>>> REPLACE\n\n\
You can suggest multiple changes. Each SEARCH section must exactly match text in the current solution.";

impl PromptTemplate {
    pub fn new(problem_description: impl Into<String>) -> Self {
        Self {
            system_preamble: String::new(),
            problem_description: problem_description.into(),
            entry_format: default_entry_format(),
            current_marker: default_current_marker(),
            ancestor_marker: default_ancestor_marker(),
            task_instructions: String::new(),
            layout: PromptLayout::Lineage,
        }
    }

    /// Loads a TOML template file.
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io { path: display.clone(), source })?;
        let t: Self = toml::from_str(&text).map_err(|e| PromptError::Parse { path: display, message: e.to_string() })?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.problem_description.trim().is_empty() {
            return Err(PromptError::EmptyProblem);
        }
        Ok(())
    }

    pub fn circle_packing(n: usize, domain: &str) -> Self {
        let problem = format!(
            "# Problem Description\n\n\
You are an expert mathematician working on circle packing. Place {n} non-overlapping circles inside the {domain} \
so that the sum of their radii is as large as possible. Every circle must lie entirely inside the domain.\n\n\
A solution is a JSON array of {n} triples [x, y, r] giving each circle's center and radius. \
Invalid configurations receive a reward of 0."
        );
        Self {
            system_preamble: format!("{CODE_EDIT_PREAMBLE}\n{ANSWER_FORMAT}"),
            entry_format: "Status: {status}\n```json\n{content}\n```\nFeedback:\n{feedback}".into(),
            task_instructions: DIFF_INSTRUCTIONS.into(),
            ..Self::new(problem)
        }
    }

    pub fn function_minimization(dimension: usize, formula: &str, constraints: &str) -> Self {
        let problem = format!(
            "# Problem Description\n\n\
You are an expert in optimization. Find the global minimum of a non-convex function with many local minima. \
The function is defined in {dimension}-dimensional space as:\n```\n{formula}\n```\n\
Constraints: {constraints}\n\n\
A solution is a JSON array of {dimension} coordinates. The reward is \
|f*| / (|f*| + |f(x) - f*|) where f* is the global minimum value; infeasible points score 0."
        );
        Self {
            system_preamble: format!("{CODE_EDIT_PREAMBLE}\n{ANSWER_FORMAT}"),
            entry_format: "Status: {status}\n```json\n{content}\n```\nFeedback:\n{feedback}".into(),
            task_instructions: DIFF_INSTRUCTIONS.into(),
            ..Self::new(problem)
        }
    }

    pub fn symbolic_regression(target: &str, variables: &[&str]) -> Self {
        let cols = variables
            .iter()
            .enumerate()
            .map(|(i, v)| format!("(var {i}) = {v}"))
            .collect::<Vec<_>>()
            .join(", ");
        let problem = format!(
            "# Problem Description\n\n\
Model {target} from the input columns {cols}.\n\
Write the model as a prefix s-expression over the operators + - * / pow exp log sin cos sqrt abs, \
numeric constants, input columns (var i) and up to 10 free parameters p0 ... p9. Parameters are fitted \
to the training data starting from random values in [0, 1], so keep their scales similar. \
Avoid numerically unsafe operations such as log of non-positive values or division by zero.\n\
The reward is -log10 of the median normalized mean squared error on held-out data."
        );
        Self {
            system_preamble: format!(
                "You are an expert scientist. Improve the model below using the feedback from earlier attempts.\n\
Write the complete new expression in exactly this format:\n```sexp\n(your expression)\n```\n{ANSWER_FORMAT}"
            ),
            entry_format: "Status: {status}\n```sexp\n{content}\n```\nFeedback:\n{feedback}".into(),
            ..Self::new(problem)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub text: String,
    /// Sampled solution first, then ancestors nearest first.
    pub included_ids: Vec<SolutionId>,
    pub char_count: usize,
}

/// Formats with 6 significant digits.
pub fn format_reward(value: f64) -> String {
    if value == 0.0 {
        return "0.00000".to_string();
    }
    if !value.is_finite() {
        return value.to_string();
    }
    let mut exp = value.abs().log10().floor() as i32;
    // Rounding can carry into the next decade (9.999996 -> 10.0000).
    let scaled = value.abs() / 10f64.powi(exp);
    if (scaled * 1e5).round() >= 1e6 {
        exp += 1;
    }
    if !(-5..6).contains(&exp) {
        return format!("{value:.5e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    format!("{value:.decimals$}")
}

pub fn render_status(record: &SolutionRecord) -> String {
    if record.is_root() {
        "Initial Program".to_string()
    } else {
        format!("Reward: {}, Valid: {}", format_reward(record.reward), if record.valid { "yes" } else { "no" })
    }
}

/// Single-pass placeholder substitution, so placeholder-like text inside the
/// substituted values is left alone.
fn fill(format: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(format.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = format;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let hit = values.iter().find(|(key, _)| {
            tail.len() > key.len() + 1 && tail[1..].starts_with(key) && tail[1 + key.len()..].starts_with('}')
        });
        match hit {
            Some((key, value)) => {
                out.push_str(value);
                rest = &tail[key.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn render_entry(template: &PromptTemplate, marker: &str, record: &SolutionRecord, feedback: &str) -> String {
    let status = render_status(record);
    let reward = format_reward(record.reward);
    let body = fill(
        &template.entry_format,
        &[("status", &status), ("content", &record.content), ("reward", &reward), ("feedback", feedback)],
    );
    format!("{marker}\n{body}")
}

fn assemble(template: &PromptTemplate, current: &str, ancestors: &[String]) -> String {
    let mut sections: Vec<&str> = Vec::new();
    if !template.system_preamble.is_empty() {
        sections.push(&template.system_preamble);
    }
    sections.push(&template.problem_description);
    sections.push(current);
    sections.extend(ancestors.iter().map(String::as_str));
    if !template.task_instructions.is_empty() {
        sections.push(&template.task_instructions);
    }
    sections.join("\n\n")
}

const FEEDBACK_CUT_MARKER: &str = " [...]";

/// Renders the prompt for `solution_id`. Over budget, the farthest ancestors
/// are dropped first, then the current solution's feedback is cut; its
/// content is always kept whole.
pub fn construct_prompt(
    template: &PromptTemplate,
    store: &LineageStore,
    solution_id: SolutionId,
    n_ancestors: usize,
    char_budget: usize,
) -> Result<PromptBundle, PromptError> {
    template.validate()?;
    let current = store.get(solution_id)?;
    let n = match template.layout {
        PromptLayout::Lineage => n_ancestors,
        PromptLayout::CurrentOnly => 0,
    };
    let ancestors = store.ancestor_chain(solution_id, n)?;
    let ancestor_blocks: Vec<String> = ancestors
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let marker = fill(&template.ancestor_marker, &[("k", &(i + 1).to_string())]);
            render_entry(template, &marker, rec, &rec.feedback)
        })
        .collect();
    let current_block = render_entry(template, &template.current_marker, current, &current.feedback);

    let fits = |text: &str| text.chars().count() <= char_budget;
    for keep in (0..=ancestor_blocks.len()).rev() {
        let text = assemble(template, &current_block, &ancestor_blocks[..keep]);
        if fits(&text) {
            let mut included_ids = vec![solution_id];
            included_ids.extend(ancestors[..keep].iter().map(|r| r.id));
            return Ok(bundle(text, included_ids));
        }
    }

    // Only the current block is left and it is still too long: cut feedback.
    let feedback: Vec<char> = current.feedback.chars().collect();
    let with_feedback = |len: usize| -> String {
        let cut: String = if len < feedback.len() {
            feedback[..len].iter().collect::<String>() + FEEDBACK_CUT_MARKER
        } else {
            current.feedback.clone()
        };
        assemble(template, &render_entry(template, &template.current_marker, current, &cut), &[])
    };
    let bare = assemble(template, &render_entry(template, &template.current_marker, current, ""), &[]);
    if !fits(&bare) {
        return Err(PromptError::BudgetTooSmall { budget: char_budget, needed: bare.chars().count() });
    }
    // Largest feedback prefix that fits; fall back to no feedback at all.
    let (mut lo, mut hi) = (0usize, feedback.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(&with_feedback(mid)) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let candidate = with_feedback(lo);
    let text = if fits(&candidate) { candidate } else { bare };
    Ok(bundle(text, vec![solution_id]))
}

fn bundle(text: String, included_ids: Vec<SolutionId>) -> PromptBundle {
    let char_count = text.chars().count();
    PromptBundle { text, included_ids, char_count }
}
