//! Turning a selected parent into a candidate child.
//!
//! A [`GenerationBackend`] writes the child payload into a fresh directory;
//! [`generate_child`] then runs the backend's validity check and records the
//! verdict. The compiled flag of a [`GenerationResult`] is always the
//! validity check's verdict.

pub mod external;
pub mod model_client;
pub mod sandbox;
pub mod simulated;
pub mod template;

use crate::archive::NodeId;
use crate::rng::StreamId;
use crate::selection::SelectionPolicy;
use sandbox::SandboxLimits;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub use external::ExternalProcessBackend;
pub use model_client::ModelClientBackend;
pub use simulated::{Landscape, SimulatedAgentGenome, SimulatedBackend, SimulatedParams};

/// File an agent payload may carry to describe its own selection routine.
pub const SELECTION_FILE: &str = "selection.json";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("payload error at {path}: {reason}")]
    Payload { path: PathBuf, reason: String },
    #[error("backend failure: {0}")]
    Backend(String),
    #[error(transparent)]
    Sandbox(#[from] sandbox::SandboxError),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

impl GenerationError {
    pub(crate) fn payload(path: &Path, e: std::io::Error) -> Self {
        GenerationError::Payload {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    }
}

/// Short record of an archived agent's evaluation, shared with modifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub node_id: NodeId,
    pub selection_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub parent_id: NodeId,
    pub parent_payload_ref: String,
    /// Agent performing the modification: the parent itself, or the root
    /// when self-improvement is disabled.
    pub modifier_id: NodeId,
    pub modifier_payload_ref: String,
    pub child_payload_ref: String,
    /// Locator of prior evaluation records (the run's event log).
    pub eval_results_ref: String,
    pub evaluation_summaries: Vec<EvaluationSummary>,
    pub iterations_left: u64,
    pub total_iterations: u64,
    pub stream: StreamId,
    pub master_seed: u64,
    pub self_improve: bool,
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub child_payload_ref: String,
    pub compiled: bool,
    /// Path of the validity log, relative to the run's log root.
    pub validity_log: String,
    pub wall_time: f64,
    pub cause: Option<String>,
}

/// Verdict of a validity check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Validity {
    pub ok: bool,
    pub cause: Option<String>,
}

impl Validity {
    pub fn valid() -> Self {
        Self {
            ok: true,
            cause: None,
        }
    }

    pub fn invalid(cause: impl Into<String>) -> Self {
        Self {
            ok: false,
            cause: Some(cause.into()),
        }
    }
}

/// Directories a backend may read from and write to.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub payload_root: PathBuf,
    pub log_root: PathBuf,
}

impl Workspace {
    pub fn payload(&self, payload_ref: &str) -> PathBuf {
        self.payload_root.join(payload_ref)
    }
}

pub trait GenerationBackend: Send + Sync {
    fn name(&self) -> &'static str;

    /// Materializes the initial agent into `dir`.
    fn write_initial(&self, dir: &Path) -> Result<(), GenerationError>;

    /// Writes the child payload into the empty directory `child_dir`.
    /// Returns backend log text.
    fn generate(
        &self,
        req: &GenerationRequest,
        parent_dir: &Path,
        modifier_dir: &Path,
        child_dir: &Path,
        limits: &SandboxLimits,
    ) -> Result<String, GenerationError>;

    /// True iff the payload loads and answers one smoke task within limits.
    fn validate(&self, payload_dir: &Path, limits: &SandboxLimits) -> Validity;

    /// The agent's own parent-selection routine.
    fn selection_routine(&self, payload_dir: &Path) -> Result<SelectionPolicy, GenerationError> {
        let path = payload_dir.join(SELECTION_FILE);
        let bytes = fs::read(&path).map_err(|e| GenerationError::payload(&path, e))?;
        let policy: SelectionPolicy =
            serde_json::from_slice(&bytes).map_err(|e| GenerationError::Payload {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        policy
            .validate()
            .map_err(|e| GenerationError::Backend(e.to_string()))?;
        Ok(policy)
    }

    /// Produces the instruction for a fixed-instruction modification from the
    /// rendered template. The default uses the rendered text as is.
    fn instruction(
        &self,
        _req: &GenerationRequest,
        rendered_template: &str,
    ) -> Result<String, GenerationError> {
        Ok(rendered_template.to_string())
    }
}

/// Checks a payload with the backend's smoke task.
pub fn validate_child(
    backend: &dyn GenerationBackend,
    payload_dir: &Path,
    limits: &SandboxLimits,
) -> Validity {
    if !payload_dir.exists() {
        return Validity::invalid("payload missing");
    }
    backend.validate(payload_dir, limits)
}

/// Generates and validates one child.
pub fn generate_child(
    backend: &dyn GenerationBackend,
    req: &GenerationRequest,
    ws: &Workspace,
    limits: &SandboxLimits,
) -> GenerationResult {
    let start = Instant::now();
    let child_dir = ws.payload(&req.child_payload_ref);
    let prepared = (|| -> Result<(), GenerationError> {
        if child_dir.exists() {
            fs::remove_dir_all(&child_dir).map_err(|e| GenerationError::payload(&child_dir, e))?;
        }
        fs::create_dir_all(&child_dir).map_err(|e| GenerationError::payload(&child_dir, e))
    })();
    let generated = prepared.and_then(|()| {
        backend.generate(
            req,
            &ws.payload(&req.parent_payload_ref),
            &ws.payload(&req.modifier_payload_ref),
            &child_dir,
            limits,
        )
    });
    let (log, verdict) = match generated {
        Ok(log) => (log, validate_child(backend, &child_dir, limits)),
        Err(e) => (String::new(), Validity::invalid(e.to_string())),
    };
    let wall_time = start.elapsed().as_secs_f64();

    let validity_log = format!("{}.validity.log", req.child_payload_ref);
    let log_path = ws.log_root.join(&validity_log);
    let text = format!(
        "backend: {}\nparent: {}\nmodifier: {}\nverdict: {}\ncause: {}\n{}\n",
        backend.name(),
        req.parent_payload_ref,
        req.modifier_payload_ref,
        if verdict.ok { "valid" } else { "invalid" },
        verdict.cause.as_deref().unwrap_or("-"),
        log
    );
    if let Some(parent) = log_path.parent() {
        let _ = fs::create_dir_all(parent);
    }
    if let Err(e) = fs::write(&log_path, text) {
        log::warn!("could not write validity log {}: {e}", log_path.display());
    }

    GenerationResult {
        child_payload_ref: req.child_payload_ref.clone(),
        compiled: verdict.ok,
        validity_log,
        wall_time,
        cause: verdict.cause,
    }
}

/// Recursive copy of `src` into `dst`.
pub(crate) fn copy_dir(src: &Path, dst: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dst)?;
    let mut entries: Vec<_> = fs::read_dir(src)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let from = entry.path();
        let to = dst.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&from, &to)?;
        } else {
            fs::copy(&from, &to)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamId;

    fn request(child: &str) -> GenerationRequest {
        GenerationRequest {
            parent_id: 0,
            parent_payload_ref: "root".into(),
            modifier_id: 0,
            modifier_payload_ref: "root".into(),
            child_payload_ref: child.into(),
            eval_results_ref: "events.jsonl".into(),
            evaluation_summaries: vec![],
            iterations_left: 3,
            total_iterations: 3,
            stream: StreamId::new("gen", 1, 0),
            master_seed: 11,
            self_improve: true,
            instruction: None,
        }
    }

    fn workspace(dir: &Path) -> Workspace {
        Workspace {
            payload_root: dir.join("payloads"),
            log_root: dir.join("logs"),
        }
    }

    #[test]
    fn simulated_replay_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ws = workspace(dir.path());
        let backend = SimulatedBackend::new(SimulatedParams::default(), Landscape::two_peak());
        backend.write_initial(&ws.payload("root")).unwrap();
        let limits = SandboxLimits::default();
        let a = generate_child(&backend, &request("a"), &ws, &limits);
        let b = generate_child(&backend, &request("b"), &ws, &limits);
        assert_eq!(a.compiled, b.compiled);
        let x = fs::read(ws.payload("a").join(simulated::GENOME_FILE)).unwrap();
        let y = fs::read(ws.payload("b").join(simulated::GENOME_FILE)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn compiled_flag_agrees_with_validation() {
        let dir = tempfile::tempdir().unwrap();
        let ws = workspace(dir.path());
        let mut params = SimulatedParams::default();
        params.initial.compile_probability = 0.5;
        let backend = SimulatedBackend::new(params, Landscape::two_peak());
        backend.write_initial(&ws.payload("root")).unwrap();
        let limits = SandboxLimits::default();
        let mut seen = [false; 2];
        for i in 0..40 {
            let mut req = request(&format!("c{i}"));
            req.stream = StreamId::new("gen", i, 0);
            let r = generate_child(&backend, &req, &ws, &limits);
            let verdict = validate_child(&backend, &ws.payload(&r.child_payload_ref), &limits);
            assert_eq!(r.compiled, verdict.ok);
            seen[r.compiled as usize] = true;
            assert!(ws.log_root.join(&r.validity_log).exists());
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn initial_agent_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let backend = SimulatedBackend::new(SimulatedParams::default(), Landscape::two_peak());
        backend.write_initial(dir.path()).unwrap();
        assert!(validate_child(&backend, dir.path(), &SandboxLimits::default()).ok);
        assert!(!validate_child(&backend, &dir.path().join("nope"), &SandboxLimits::default()).ok);
    }
}
