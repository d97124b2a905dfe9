//! Backend that asks a remote model service for modifications.
//!
//! Wire contract (JSON over a single POST endpoint, bearer token taken from a
//! configured environment variable):
//!
//! ```text
//! request  = { "schema": "stepstone.model-request/1",
//!              "kind": "modify" | "instruction",
//!              "parent": { "payload_ref": str, "bundle": { "files": { path: text } } },
//!              "evaluation_summaries": [ { "node_id": int, "selection_score": float } ],
//!              "iterations_left": int,
//!              "instruction": str | null }
//! response = { "schema": "stepstone.model-response/1",
//!              "bundle": { "files": { path: text } } | null,
//!              "patch": str | null,             (unified diff, applied with -p1)
//!              "instruction": str | null,       (for kind = "instruction")
//!              "logs": str }
//! ```
//!
//! A bundle overwrites files in a copy of the parent payload; a patch is
//! applied to that copy inside the sandbox.

use super::external::smoke_check;
use super::sandbox::{sandbox_execute, SandboxCommand, SandboxLimits};
use super::{copy_dir, GenerationBackend, GenerationError, GenerationRequest, Validity, EvaluationSummary};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::Duration;

pub const REQUEST_SCHEMA: &str = "stepstone.model-request/1";
pub const RESPONSE_SCHEMA: &str = "stepstone.model-response/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Bundle {
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentRef {
    pub payload_ref: String,
    pub bundle: Bundle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestKind {
    Modify,
    Instruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRequest {
    pub schema: String,
    pub kind: RequestKind,
    pub parent: ParentRef,
    pub evaluation_summaries: Vec<EvaluationSummary>,
    pub iterations_left: u64,
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelResponse {
    pub schema: String,
    #[serde(default)]
    pub bundle: Option<Bundle>,
    #[serde(default)]
    pub patch: Option<String>,
    #[serde(default)]
    pub instruction: Option<String>,
    #[serde(default)]
    pub logs: String,
}

#[derive(Debug, Clone)]
pub struct ModelClientBackend {
    pub url: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout: Duration,
    pub smoke_command: Vec<String>,
    pub initial_payload: PathBuf,
}

/// Reads every file under `dir` as UTF-8 text, keyed by relative path.
pub fn read_bundle(dir: &Path) -> Result<Bundle, GenerationError> {
    fn walk(root: &Path, dir: &Path, files: &mut BTreeMap<String, String>) -> Result<(), GenerationError> {
        let entries = fs::read_dir(dir).map_err(|e| GenerationError::payload(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| GenerationError::payload(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, files)?;
            } else {
                let text = fs::read_to_string(&path).map_err(|e| GenerationError::payload(&path, e))?;
                let rel = path.strip_prefix(root).expect("under root");
                files.insert(rel.to_string_lossy().replace('\\', "/"), text);
            }
        }
        Ok(())
    }
    let mut files = BTreeMap::new();
    walk(dir, dir, &mut files)?;
    Ok(Bundle { files })
}

fn safe_relative(path: &str) -> Option<PathBuf> {
    let p = Path::new(path);
    if p.components().all(|c| matches!(c, Component::Normal(_))) && !path.is_empty() {
        Some(p.to_path_buf())
    } else {
        None
    }
}

/// Writes `bundle` over the contents of `dir`. Paths escaping `dir` are rejected.
pub fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<(), GenerationError> {
    for (name, text) in &bundle.files {
        let rel = safe_relative(name)
            .ok_or_else(|| GenerationError::Protocol(format!("unsafe bundle path `{name}`")))?;
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| GenerationError::payload(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| GenerationError::payload(&path, e))?;
    }
    Ok(())
}

impl ModelClientBackend {
    pub fn build_request(
        &self,
        kind: RequestKind,
        req: &GenerationRequest,
        parent_dir: &Path,
    ) -> Result<ModelRequest, GenerationError> {
        Ok(ModelRequest {
            schema: REQUEST_SCHEMA.to_string(),
            kind,
            parent: ParentRef {
                payload_ref: req.parent_payload_ref.clone(),
                bundle: read_bundle(parent_dir)?,
            },
            evaluation_summaries: req.evaluation_summaries.clone(),
            iterations_left: req.iterations_left,
            instruction: req.instruction.clone(),
        })
    }

    fn post(&self, body: &ModelRequest) -> Result<ModelResponse, GenerationError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut call = agent.post(&self.url).header("Content-Type", "application/json");
        if let Ok(token) = std::env::var(&self.token_env) {
            call = call.header("Authorization", format!("Bearer {token}"));
        }
        let payload = serde_json::to_vec(body).expect("request serializes");
        let mut resp = call
            .send(&payload[..])
            .map_err(|e| GenerationError::Transport(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GenerationError::Transport(e.to_string()))?;
        let parsed: ModelResponse =
            serde_json::from_str(&text).map_err(|e| GenerationError::Protocol(e.to_string()))?;
        if parsed.schema != RESPONSE_SCHEMA {
            return Err(GenerationError::Protocol(format!(
                "unexpected schema `{}`",
                parsed.schema
            )));
        }
        Ok(parsed)
    }
}

impl GenerationBackend for ModelClientBackend {
    fn name(&self) -> &'static str {
        "model-client"
    }

    fn write_initial(&self, dir: &Path) -> Result<(), GenerationError> {
        copy_dir(&self.initial_payload, dir).map_err(|e| GenerationError::payload(&self.initial_payload, e))
    }

    fn generate(
        &self,
        req: &GenerationRequest,
        parent_dir: &Path,
        _modifier_dir: &Path,
        child_dir: &Path,
        limits: &SandboxLimits,
    ) -> Result<String, GenerationError> {
        let body = self.build_request(RequestKind::Modify, req, parent_dir)?;
        let resp = self.post(&body)?;
        copy_dir(parent_dir, child_dir).map_err(|e| GenerationError::payload(parent_dir, e))?;
        match (&resp.bundle, &resp.patch) {
            (Some(bundle), None) => write_bundle(child_dir, bundle)?,
            (None, Some(patch)) => {
                let cmd = SandboxCommand::new(["patch", "-p1", "--batch", "--forward"])
                    .cwd(child_dir)
                    .stdin(patch.as_bytes());
                let out = sandbox_execute(&cmd, limits)?;
                if let Some(cause) = out.failure_cause() {
                    return Err(GenerationError::Backend(format!(
                        "patch did not apply ({cause}): {}",
                        String::from_utf8_lossy(&out.stdout)
                    )));
                }
            }
            _ => {
                return Err(GenerationError::Protocol(
                    "response must carry exactly one of bundle or patch".into(),
                ))
            }
        }
        Ok(resp.logs)
    }

    fn validate(&self, payload_dir: &Path, limits: &SandboxLimits) -> Validity {
        smoke_check(&self.smoke_command, payload_dir, limits)
    }

    fn instruction(
        &self,
        req: &GenerationRequest,
        rendered_template: &str,
    ) -> Result<String, GenerationError> {
        let mut with_template = req.clone();
        with_template.instruction = Some(rendered_template.to_string());
        // the parent bundle is resolved relative to the request's own payload root;
        // the caller passes it through the instruction field instead
        let body = ModelRequest {
            schema: REQUEST_SCHEMA.to_string(),
            kind: RequestKind::Instruction,
            parent: ParentRef {
                payload_ref: req.parent_payload_ref.clone(),
                bundle: Bundle::default(),
            },
            evaluation_summaries: req.evaluation_summaries.clone(),
            iterations_left: req.iterations_left,
            instruction: with_template.instruction,
        };
        let resp = self.post(&body)?;
        resp.instruction
            .ok_or_else(|| GenerationError::Protocol("instruction response without instruction".into()))
    }
}
