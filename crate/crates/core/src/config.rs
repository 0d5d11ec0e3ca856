//! Run configuration: a single TOML file mirroring [`EngineConfig`].
//!
//! String values may reference environment variables as `${NAME}`; the
//! snapshot written to a run directory replaces endpoints and keys with a
//! redaction marker.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diversity::{DiversityConfig, EmbeddingProviderSpec};
use crate::grpo::GrpoConfig;
use crate::model::content_hash;
use crate::mutators::MutatorConfig;
use crate::mutators::llm::REDACTED;
use crate::selection::SelectionMode;
use crate::tasks::TaskConfig;

pub const DEFAULT_CAPACITY: usize = 64;
pub const DEFAULT_ANCESTORS: usize = 2;
pub const DEFAULT_CHAR_BUDGET: usize = 64_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("environment variable {0} referenced by the config is not set")]
    MissingEnv(String),
    #[error("unterminated ${{...}} reference in {0:?}")]
    BadInterpolation(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Parents sampled per iteration (B).
    pub batch_size: usize,
    /// Rollouts per parent (G).
    pub group_size: usize,
    #[serde(default = "default_capacity")]
    pub population_capacity: usize,
    #[serde(default = "default_ancestors")]
    pub n_ancestors: usize,
    pub iterations: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub selection: SelectionMode,
    /// Parent sampling weight is `exp(alpha * reward)`; 0 samples uniformly.
    #[serde(default)]
    pub sampling_alpha: f64,
    #[serde(default = "default_char_budget")]
    pub char_budget: usize,
    /// TOML prompt template; the task's built-in template when absent.
    #[serde(default)]
    pub template: Option<PathBuf>,
    /// Worker threads for mutation and evaluation; rayon's default when absent.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub diversity: DiversityConfig,
    #[serde(default)]
    pub embedding: EmbeddingProviderSpec,
    #[serde(default)]
    pub grpo: GrpoConfig,
    pub mutator: MutatorConfig,
    pub task: TaskConfig,
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}
fn default_ancestors() -> usize {
    DEFAULT_ANCESTORS
}
fn default_char_budget() -> usize {
    DEFAULT_CHAR_BUDGET
}

impl EngineConfig {
    pub fn new(batch_size: usize, group_size: usize, iterations: u64, mutator: MutatorConfig, task: TaskConfig) -> Self {
        Self {
            batch_size,
            group_size,
            population_capacity: DEFAULT_CAPACITY,
            n_ancestors: DEFAULT_ANCESTORS,
            iterations,
            seed: 0,
            selection: SelectionMode::default(),
            sampling_alpha: 0.0,
            char_budget: DEFAULT_CHAR_BUDGET,
            template: None,
            workers: None,
            diversity: DiversityConfig::default(),
            embedding: EmbeddingProviderSpec::default(),
            grpo: GrpoConfig { group_size, ..GrpoConfig::default() },
            mutator,
            task,
        }
    }

    /// Parses TOML text. Relative template paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        interpolate(&mut value)?;
        // The GRPO group size defaults to the engine's `group_size`.
        if let Some(table) = value.as_table_mut() {
            if let Some(g) = table.get("group_size").cloned() {
                let grpo = table.entry("grpo").or_insert_with(|| toml::Value::Table(Default::default()));
                if let Some(grpo) = grpo.as_table_mut() {
                    grpo.entry("group_size").or_insert(g);
                }
            }
        }
        let mut config: Self = value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if let (Some(base), Some(t)) = (base_dir, config.template.as_mut()) {
            if t.is_relative() {
                *t = base.join(&*t);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.population_capacity < self.batch_size {
            return bad("population_capacity must be at least batch_size");
        }
        if self.diversity.k == 0 {
            return bad("diversity.k must be positive");
        }
        if self.char_budget == 0 {
            return bad("char_budget must be positive");
        }
        if self.workers == Some(0) {
            return bad("workers must be positive");
        }
        if !self.sampling_alpha.is_finite() {
            return bad("sampling_alpha must be finite");
        }
        if self.grpo.group_size != self.group_size {
            return bad("grpo.group_size disagrees with group_size");
        }
        self.grpo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Copy with endpoints and keys replaced by the redaction marker.
    pub fn redacted(&self) -> Self {
        Self { mutator: self.mutator.redacted(), embedding: self.embedding.redacted(), ..self.clone() }
    }

    /// Inverse of [`EngineConfig::redacted`] for resuming: redacted values
    /// are dropped so they fall back to the environment.
    pub fn unredacted(mut self) -> Self {
        let clear = |v: &mut Option<String>| {
            if v.as_deref() == Some(REDACTED) {
                *v = None;
            }
        };
        if let MutatorConfig::Llm(c) = &mut self.mutator {
            clear(&mut c.endpoint);
            clear(&mut c.api_key);
        }
        clear(&mut self.embedding.endpoint);
        self
    }

    /// Identity of a run for resume checks. Ignores `iterations` so a run
    /// can be extended, and secrets so they can rotate.
    pub fn config_hash(&self) -> u64 {
        let mut c = self.redacted();
        c.iterations = 0;
        content_hash(&serde_json::to_string(&c).expect("config serializes"))
    }
}

fn interpolate(value: &mut toml::Value) -> Result<(), ConfigError> {
    match value {
        toml::Value::String(s) => *s = expand(s)?,
        toml::Value::Array(items) => items.iter_mut().try_for_each(interpolate)?,
        toml::Value::Table(t) => t.iter_mut().try_for_each(|(_, v)| interpolate(v))?,
        _ => {}
    }
    Ok(())
}

/// Replaces every `${NAME}` with the variable's value; `$$` escapes a dollar.
pub fn expand(text: &str) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('$') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos + 1..];
        if let Some(after) = tail.strip_prefix('$') {
            out.push('$');
            rest = after;
        } else if let Some(body) = tail.strip_prefix('{') {
            let end = body.find('}').ok_or_else(|| ConfigError::BadInterpolation(text.to_string()))?;
            let name = &body[..end];
            let v = std::env::var(name).map_err(|_| ConfigError::MissingEnv(name.to_string()))?;
            out.push_str(&v);
            rest = &body[end + 1..];
        } else {
            out.push('$');
            rest = tail;
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
batch_size = 2
group_size = 4
iterations = 3
seed = 7

[mutator.circle-refine]

[task.circle-packing]
n = 5
"#;

    #[test]
    fn parses_minimal_config() {
        let c = EngineConfig::from_toml_str(BASE, None).unwrap();
        assert_eq!((c.batch_size, c.group_size, c.population_capacity), (2, 4, 64));
        assert_eq!(c.grpo.group_size, 4);
        assert_eq!(c.n_ancestors, 2);
        assert_eq!(c.diversity.k, 5);
    }

    #[test]
    fn rejects_unknown_keys_by_name() {
        let text = format!("batch_sise = 3\n{BASE}");
        let err = EngineConfig::from_toml_str(&text, None).unwrap_err().to_string();
        assert!(err.contains("batch_sise"), "{err}");
        let nested = BASE.replace("n = 5", "n = 5\nradius = 1");
        let err = EngineConfig::from_toml_str(&nested, None).unwrap_err().to_string();
        assert!(err.contains("radius"), "{err}");
    }

    #[test]
    fn invariants_are_checked() {
        for (from, to) in [("group_size = 4", "group_size = 1"), ("batch_size = 2", "batch_size = 0")] {
            assert!(EngineConfig::from_toml_str(&BASE.replace(from, to), None).is_err());
        }
        let small = format!("population_capacity = 1\n{BASE}");
        assert!(EngineConfig::from_toml_str(&small, None).is_err());
    }

    #[test]
    fn env_interpolation() {
        // SAFETY: tests in this module use a variable name unique to this test.
        unsafe { std::env::set_var("HELIX_TEST_MODEL_NAME", "tiny") };
        assert_eq!(expand("m-${HELIX_TEST_MODEL_NAME}-$$1").unwrap(), "m-tiny-$1");
        assert!(matches!(expand("${HELIX_TEST_SURELY_UNSET}"), Err(ConfigError::MissingEnv(_))));
        assert!(matches!(expand("${OPEN"), Err(ConfigError::BadInterpolation(_))));
        let text = BASE.replace("[mutator.circle-refine]", "[mutator.llm]\nmodel = \"${HELIX_TEST_MODEL_NAME}\"");
        let c = EngineConfig::from_toml_str(&text, None).unwrap();
        assert!(matches!(c.mutator, MutatorConfig::Llm(ref l) if l.model == "tiny"));
    }

    #[test]
    fn snapshot_redacts_secrets() {
        let text = BASE.replace(
            "[mutator.circle-refine]",
            "[mutator.llm]\nmodel = \"m\"\nendpoint = \"http://secret\"\napi_key = \"sk-123\"",
        );
        let c = EngineConfig::from_toml_str(&text, None).unwrap();
        let snap = serde_json::to_string(&c.redacted()).unwrap();
        assert!(!snap.contains("sk-123") && !snap.contains("secret"));
        assert!(snap.contains(REDACTED));
        let back: EngineConfig = serde_json::from_str(&snap).unwrap();
        assert_eq!(back.config_hash(), c.config_hash());
        assert!(matches!(back.unredacted().mutator, MutatorConfig::Llm(ref l) if l.api_key.is_none()));
    }

    #[test]
    fn hash_ignores_iterations_only() {
        let a = EngineConfig::from_toml_str(BASE, None).unwrap();
        let more = EngineConfig { iterations: 99, ..a.clone() };
        let reseeded = EngineConfig { seed: 8, ..a.clone() };
        assert_eq!(a.config_hash(), more.config_hash());
        assert_ne!(a.config_hash(), reseeded.config_hash());
    }

    #[test]
    fn template_path_resolves_against_config_dir() {
        let text = format!("template = \"prompt.toml\"\n{BASE}");
        let c = EngineConfig::from_toml_str(&text, Some(Path::new("/runs/cfg"))).unwrap();
        assert_eq!(c.template.unwrap(), PathBuf::from("/runs/cfg/prompt.toml"));
    }
}
