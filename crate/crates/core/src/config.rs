//! Run configuration, read from one TOML file.
//!
//! ```toml
//! mode = "full"
//! iterations = 100
//! parents_per_iteration = 1
//! seed = 7
//! concurrency = 4
//!
//! [selection]
//! variant = "score-child-prop"
//! lambda = 10.0
//! midpoint_pool = 3
//!
//! [limits]
//! timeout_secs = 60.0
//!
//! [backend]
//! kind = "simulated"
//!
//! [[domains]]
//! name = "landscape"
//! tasks = 10
//! subset_size = 3
//! gate = { kind = "min-successes", k = 1 }
//! evaluator = { kind = "synthetic" }
//!
//! [paths]
//! state_dir = "runs/demo"
//! ```
//!
//! Unknown keys are rejected and errors name the offending key. Relative
//! paths are resolved against the directory holding the config file.

use crate::evaluation::{
    CommandEvaluator, Domain, DomainSpec, GatePolicy, StagedEvalPolicy, SyntheticEvaluator,
    SyntheticOutcome, TaskEvaluator,
};
use crate::generation::sandbox::SandboxLimits;
use crate::generation::{
    ExternalProcessBackend, GenerationBackend, Landscape, ModelClientBackend, SimulatedBackend,
    SimulatedParams,
};
use crate::mode::Mode;
use crate::selection::SelectionPolicy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config error at `{key}`: {message}")]
    Parse { key: String, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ConfigError {
    /// Dotted path of the offending key, when known.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Parse { key, .. } | ConfigError::Invalid { key, .. } => Some(key),
            ConfigError::Io { .. } => None,
        }
    }

    fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }
}

/// Tasks given either as an explicit id list or as a count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskList {
    Count(usize),
    Ids(Vec<String>),
}

impl TaskList {
    fn ids(&self, prefix: &str) -> Vec<String> {
        match self {
            TaskList::Count(n) => (0..*n).map(|i| format!("{prefix}{i}")).collect(),
            TaskList::Ids(ids) => ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EvaluatorConfig {
    /// Scores a simulated genome; uses the backend landscape unless given.
    Synthetic {
        #[serde(default)]
        outcome: SyntheticOutcome,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        landscape: Option<Landscape>,
    },
    /// Runs a command per task.
    Command { command: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    pub tasks: TaskList,
    #[serde(default)]
    pub validation_tasks: Option<TaskList>,
    #[serde(default)]
    pub test_tasks: Option<TaskList>,
    /// Defaults to all training tasks (no staging).
    #[serde(default)]
    pub subset_size: Option<usize>,
    /// Defaults to a gate that always passes.
    #[serde(default)]
    pub gate: Option<GatePolicy>,
    pub evaluator: EvaluatorConfig,
}

impl DomainConfig {
    pub fn spec(&self) -> DomainSpec {
        let task_ids = self.tasks.ids(&format!("{}-train-", self.name));
        let n = task_ids.len();
        DomainSpec {
            name: self.name.clone(),
            staged: StagedEvalPolicy {
                subset_size: self.subset_size.unwrap_or(n),
                gate: self.gate.unwrap_or(GatePolicy::MinSuccesses { k: 0 }),
                full_size: n,
            },
            task_ids,
            validation_task_ids: self
                .validation_tasks
                .as_ref()
                .map_or_else(Vec::new, |t| t.ids(&format!("{}-val-", self.name))),
            test_task_ids: self
                .test_tasks
                .as_ref()
                .map_or_else(Vec::new, |t| t.ids(&format!("{}-test-", self.name))),
        }
    }
}

fn default_token_env() -> String {
    "STEPSTONE_MODEL_TOKEN".into()
}

fn default_request_timeout() -> f64 {
    300.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendConfig {
    Simulated {
        #[serde(default)]
        params: SimulatedParams,
        #[serde(default)]
        landscape: Landscape,
    },
    External {
        command: Vec<String>,
        smoke_command: Vec<String>,
        initial_payload: PathBuf,
    },
    ModelClient {
        url: String,
        #[serde(default = "default_token_env")]
        token_env: String,
        #[serde(default = "default_request_timeout")]
        timeout_secs: f64,
        smoke_command: Vec<String>,
        initial_payload: PathBuf,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Simulated {
            params: SimulatedParams::default(),
            landscape: Landscape::two_peak(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default)]
    pub state_dir: Option<PathBuf>,
    /// Where agent payloads live; defaults to `<state_dir>/payloads`.
    #[serde(default)]
    pub payload_dir: Option<PathBuf>,
    /// Instruction template for the fixed-instruction mode.
    #[serde(default)]
    pub instruction_template: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub iterations: u64,
    #[serde(default = "one")]
    pub parents_per_iteration: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub selection: SelectionPolicy,
    #[serde(default)]
    pub limits: SandboxLimits,
    #[serde(default)]
    pub backend: BackendConfig,
    pub domains: Vec<DomainConfig>,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Simulated backend on the two-peak landscape, 20 iterations.
    pub fn demo() -> Self {
        Self {
            mode: Mode::Full,
            iterations: 20,
            parents_per_iteration: 1,
            seed: 0,
            concurrency: default_concurrency(),
            selection: SelectionPolicy::default(),
            limits: SandboxLimits::default(),
            backend: BackendConfig::default(),
            domains: vec![DomainConfig {
                name: "landscape".into(),
                tasks: TaskList::Count(6),
                validation_tasks: None,
                test_tasks: Some(TaskList::Count(2)),
                subset_size: Some(2),
                gate: Some(GatePolicy::MinSuccesses { k: 1 }),
                evaluator: EvaluatorConfig::Synthetic {
                    outcome: SyntheticOutcome::Continuous,
                    noise: 0.0,
                    landscape: None,
                },
            }],
            paths: PathsConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
            key: "<document>".into(),
            message: e.to_string(),
        })?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            self.paths.state_dir.as_mut(),
            self.paths.payload_dir.as_mut(),
            self.paths.instruction_template.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        match &mut self.backend {
            BackendConfig::External { initial_payload, .. }
            | BackendConfig::ModelClient { initial_payload, .. } => fix(initial_payload),
            BackendConfig::Simulated { .. } => {}
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.iterations < 1 {
            return Err(ConfigError::invalid("iterations", "must be at least 1"));
        }
        if self.parents_per_iteration < 1 {
            return Err(ConfigError::invalid("parents_per_iteration", "must be at least 1"));
        }
        if self.mode == Mode::NoOpenEnded && self.parents_per_iteration != 1 {
            return Err(ConfigError::invalid(
                "parents_per_iteration",
                "the no-open-ended mode keeps one agent and takes exactly one parent per iteration",
            ));
        }
        if self.concurrency < 1 {
            return Err(ConfigError::invalid("concurrency", "must be at least 1"));
        }
        self.selection
            .validate()
            .map_err(|e| ConfigError::invalid("selection", e.to_string()))?;
        self.limits
            .validate()
            .map_err(|e| ConfigError::invalid("limits", e.to_string()))?;
        match &self.backend {
            BackendConfig::Simulated { params, landscape } => {
                landscape
                    .validate()
                    .map_err(|e| ConfigError::invalid("backend.landscape", e))?;
                params
                    .initial
                    .validate()
                    .map_err(|e| ConfigError::invalid("backend.params.initial", e))?;
                if params.initial.task_skill.len() != landscape.dims() {
                    return Err(ConfigError::invalid(
                        "backend.params.initial.task_skill",
                        "dimension does not match the landscape",
                    ));
                }
            }
            BackendConfig::External {
                command,
                smoke_command,
                ..
            } => {
                if command.is_empty() {
                    return Err(ConfigError::invalid("backend.command", "must not be empty"));
                }
                if smoke_command.is_empty() {
                    return Err(ConfigError::invalid("backend.smoke_command", "must not be empty"));
                }
            }
            BackendConfig::ModelClient {
                url,
                timeout_secs,
                smoke_command,
                ..
            } => {
                if !(url.starts_with("https://") || url.starts_with("http://")) {
                    return Err(ConfigError::invalid("backend.url", "must be an http(s) URL"));
                }
                if !(*timeout_secs > 0.0) {
                    return Err(ConfigError::invalid("backend.timeout_secs", "must be positive"));
                }
                if smoke_command.is_empty() {
                    return Err(ConfigError::invalid("backend.smoke_command", "must not be empty"));
                }
            }
        }
        if self.domains.is_empty() {
            return Err(ConfigError::invalid("domains", "at least one domain is required"));
        }
        let mut names = BTreeSet::new();
        for (i, d) in self.domains.iter().enumerate() {
            let key = |field: &str| format!("domains[{i}].{field}");
            if !names.insert(d.name.as_str()) {
                return Err(ConfigError::invalid(key("name"), format!("duplicate domain `{}`", d.name)));
            }
            d.spec().validate().map_err(|e| ConfigError::invalid(key("tasks"), e.to_string()))?;
            match &d.evaluator {
                EvaluatorConfig::Command { command } if command.is_empty() => {
                    return Err(ConfigError::invalid(key("evaluator.command"), "must not be empty"));
                }
                EvaluatorConfig::Synthetic { noise, .. } if !(*noise >= 0.0) => {
                    return Err(ConfigError::invalid(key("evaluator.noise"), "must be non-negative"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the `paths` section removed, so a
    /// run can move between directories.
    pub fn hash(&self) -> String {
        let mut stripped = self.clone();
        stripped.paths = PathsConfig::default();
        let bytes = serde_json::to_vec(&stripped).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn domain_specs(&self) -> Vec<DomainSpec> {
        self.domains.iter().map(DomainConfig::spec).collect()
    }

    pub fn build_backend(&self) -> Arc<dyn GenerationBackend> {
        match &self.backend {
            BackendConfig::Simulated { params, landscape } => {
                Arc::new(SimulatedBackend::new(params.clone(), landscape.clone()))
            }
            BackendConfig::External {
                command,
                smoke_command,
                initial_payload,
            } => Arc::new(ExternalProcessBackend {
                command: command.clone(),
                smoke_command: smoke_command.clone(),
                initial_payload: initial_payload.clone(),
            }),
            BackendConfig::ModelClient {
                url,
                token_env,
                timeout_secs,
                smoke_command,
                initial_payload,
            } => Arc::new(ModelClientBackend {
                url: url.clone(),
                token_env: token_env.clone(),
                timeout: Duration::from_secs_f64(*timeout_secs),
                smoke_command: smoke_command.clone(),
                initial_payload: initial_payload.clone(),
            }),
        }
    }

    pub fn build_domains(&self) -> Vec<Domain> {
        let backend_landscape = match &self.backend {
            BackendConfig::Simulated { landscape, .. } => landscape.clone(),
            _ => Landscape::two_peak(),
        };
        self.domains
            .iter()
            .map(|d| {
                let evaluator: Arc<dyn TaskEvaluator> = match &d.evaluator {
                    EvaluatorConfig::Synthetic {
                        outcome,
                        noise,
                        landscape,
                    } => Arc::new(SyntheticEvaluator {
                        landscape: landscape.clone().unwrap_or_else(|| backend_landscape.clone()),
                        outcome: *outcome,
                        noise: *noise,
                    }),
                    EvaluatorConfig::Command { command } => Arc::new(CommandEvaluator {
                        command: command.clone(),
                    }),
                };
                Domain::new(d.spec(), evaluator)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
mode = "no-open-ended"
iterations = 5

[[domains]]
name = "d"
tasks = ["a", "b", "c"]
subset_size = 1
gate = { kind = "min-fraction", fraction = 0.4, strict = true }
evaluator = { kind = "synthetic", outcome = "bernoulli" }
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.mode, Mode::NoOpenEnded);
        assert_eq!(cfg.parents_per_iteration, 1);
        assert_eq!(cfg.selection, SelectionPolicy::default());
        let spec = &cfg.domain_specs()[0];
        assert_eq!(spec.task_ids, vec!["a", "b", "c"]);
        assert_eq!(spec.staged.full_size, 3);
    }

    #[test]
    fn errors_name_the_key() {
        let bad_mode = MINIMAL.replace("no-open-ended", "sideways");
        let e = RunConfig::from_toml_str(&bad_mode).unwrap_err();
        assert_eq!(e.key(), Some("mode"), "{e}");

        let unknown = format!("{MINIMAL}\n[limits]\ntimeout = 3\n");
        let e = RunConfig::from_toml_str(&unknown).unwrap_err();
        assert!(e.key().unwrap().starts_with("limits"), "{e}");
        assert!(e.to_string().contains("timeout"), "{e}");

        let zero = MINIMAL.replace("iterations = 5", "iterations = 0");
        assert_eq!(RunConfig::from_toml_str(&zero).unwrap_err().key(), Some("iterations"));

        let big_subset = MINIMAL.replace("subset_size = 1", "subset_size = 9");
        assert_eq!(
            RunConfig::from_toml_str(&big_subset).unwrap_err().key(),
            Some("domains[0].tasks")
        );
    }

    #[test]
    fn toml_round_trip_and_hash_ignores_paths() {
        let mut cfg = RunConfig::demo();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        let h = cfg.hash();
        cfg.paths.state_dir = Some("/elsewhere".into());
        assert_eq!(cfg.hash(), h);
        cfg.seed += 1;
        assert_ne!(cfg.hash(), h);
    }

    #[test]
    fn task_counts_expand() {
        let spec = RunConfig::demo().domain_specs().remove(0);
        assert_eq!(spec.task_ids.len(), 6);
        assert_eq!(spec.task_ids[0], "landscape-train-0");
        assert_eq!(spec.test_task_ids, vec!["landscape-test-0", "landscape-test-1"]);
    }
}
