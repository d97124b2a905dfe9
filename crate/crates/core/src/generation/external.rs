//! Backend that delegates modification to a configured command.
//!
//! The child directory starts as a copy of the parent payload. The command
//! runs inside the sandbox with the child directory as its working directory
//! and receives the [`GenerationRequest`] as JSON on standard input;
//! `STEPSTONE_PARENT_DIR`, `STEPSTONE_MODIFIER_DIR` and `STEPSTONE_CHILD_DIR`
//! point at the relevant payloads.
//!
//! Validity is checked by running the smoke command in the child directory
//! with `{"task_id":"smoke"}` on standard input: the child is valid iff it
//! exits 0 within limits and prints one well-formed JSON value.

use super::sandbox::{sandbox_execute, SandboxCommand, SandboxLimits};
use super::{copy_dir, GenerationBackend, GenerationError, GenerationRequest, Validity};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ExternalProcessBackend {
    pub command: Vec<String>,
    pub smoke_command: Vec<String>,
    pub initial_payload: PathBuf,
}

/// Runs the smoke task for the payload in `dir`.
pub fn smoke_check(smoke_command: &[String], dir: &Path, limits: &SandboxLimits) -> Validity {
    let cmd = SandboxCommand::new(smoke_command.iter().cloned())
        .cwd(dir)
        .stdin(&br#"{"task_id":"smoke"}"#[..])
        .env("STEPSTONE_PAYLOAD_DIR", dir.to_string_lossy());
    match sandbox_execute(&cmd, limits) {
        Err(e) => Validity::invalid(e.to_string()),
        Ok(out) => {
            if let Some(cause) = out.failure_cause() {
                return Validity::invalid(cause);
            }
            if out.stdout_truncated {
                return Validity::invalid("output limit");
            }
            match serde_json::from_slice::<serde_json::Value>(&out.stdout) {
                Ok(_) => Validity::valid(),
                Err(e) => Validity::invalid(format!("malformed answer: {e}")),
            }
        }
    }
}

impl GenerationBackend for ExternalProcessBackend {
    fn name(&self) -> &'static str {
        "external-process"
    }

    fn write_initial(&self, dir: &Path) -> Result<(), GenerationError> {
        copy_dir(&self.initial_payload, dir).map_err(|e| GenerationError::payload(&self.initial_payload, e))
    }

    fn generate(
        &self,
        req: &GenerationRequest,
        parent_dir: &Path,
        modifier_dir: &Path,
        child_dir: &Path,
        limits: &SandboxLimits,
    ) -> Result<String, GenerationError> {
        copy_dir(parent_dir, child_dir).map_err(|e| GenerationError::payload(parent_dir, e))?;
        let input = serde_json::to_vec(req).expect("request serializes");
        let cmd = SandboxCommand::new(self.command.iter().cloned())
            .cwd(child_dir)
            .stdin(input)
            .env("STEPSTONE_PARENT_DIR", parent_dir.to_string_lossy())
            .env("STEPSTONE_MODIFIER_DIR", modifier_dir.to_string_lossy())
            .env("STEPSTONE_CHILD_DIR", child_dir.to_string_lossy());
        let out = sandbox_execute(&cmd, limits)?;
        let log = format!(
            "{}{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        match out.failure_cause() {
            Some(cause) => Err(GenerationError::Backend(format!("{cause}; log: {log}"))),
            None => Ok(log),
        }
    }

    fn validate(&self, payload_dir: &Path, limits: &SandboxLimits) -> Validity {
        smoke_check(&self.smoke_command, payload_dir, limits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{generate_child, validate_child, Workspace};
    use crate::rng::StreamId;
    use std::fs;

    fn limits(timeout: f64) -> SandboxLimits {
        SandboxLimits {
            timeout_secs: timeout,
            ..SandboxLimits::default()
        }
    }

    fn payload(dir: &Path, script: &str) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("agent.sh"), script).unwrap();
    }

    fn smoke() -> Vec<String> {
        vec!["/bin/sh".into(), "agent.sh".into()]
    }

    #[test]
    fn smoke_verdicts() {
        let root = tempfile::tempdir().unwrap();
        let good = root.path().join("good");
        payload(&good, "echo '{\"answer\": 1}'\n");
        assert!(smoke_check(&smoke(), &good, &limits(5.0)).ok);

        let crash = root.path().join("crash");
        payload(&crash, "exit 1\n");
        let v = smoke_check(&smoke(), &crash, &limits(5.0));
        assert!(!v.ok);
        assert_eq!(v.cause.as_deref(), Some("exit status 1"));

        let sleepy = root.path().join("sleepy");
        payload(&sleepy, "sleep 30\n");
        let v = smoke_check(&smoke(), &sleepy, &limits(0.3));
        assert_eq!(v, Validity::invalid("timeout"));

        let garbled = root.path().join("garbled");
        payload(&garbled, "echo 'not json {'\n");
        assert!(!smoke_check(&smoke(), &garbled, &limits(5.0)).ok);
    }

    #[test]
    fn external_generation_copies_and_runs() {
        let root = tempfile::tempdir().unwrap();
        let initial = root.path().join("initial");
        payload(&initial, "echo '{\"answer\": 0}'\n");
        fs::write(initial.join("notes.txt"), "v0").unwrap();
        let backend = ExternalProcessBackend {
            // the modifier appends to notes and echoes the iterations left
            command: vec![
                "/bin/sh".into(),
                "-c".into(),
                "cat > request.json; echo modified >> notes.txt".into(),
            ],
            smoke_command: smoke(),
            initial_payload: initial,
        };
        let ws = Workspace {
            payload_root: root.path().join("payloads"),
            log_root: root.path().join("logs"),
        };
        backend.write_initial(&ws.payload("root")).unwrap();
        let req = GenerationRequest {
            parent_id: 0,
            parent_payload_ref: "root".into(),
            modifier_id: 0,
            modifier_payload_ref: "root".into(),
            child_payload_ref: "c1".into(),
            eval_results_ref: "events.jsonl".into(),
            evaluation_summaries: vec![],
            iterations_left: 4,
            total_iterations: 5,
            stream: StreamId::new("gen", 1, 0),
            master_seed: 0,
            self_improve: true,
            instruction: None,
        };
        let r = generate_child(&backend, &req, &ws, &limits(5.0));
        assert!(r.compiled, "{:?}", r.cause);
        let notes = fs::read_to_string(ws.payload("c1").join("notes.txt")).unwrap();
        assert_eq!(notes, "v0modified\n");
        let sent: GenerationRequest =
            serde_json::from_slice(&fs::read(ws.payload("c1").join("request.json")).unwrap()).unwrap();
        assert_eq!(sent.iterations_left, 4);
        // the parent is untouched
        assert_eq!(fs::read_to_string(ws.payload("root").join("notes.txt")).unwrap(), "v0");
        assert!(validate_child(&backend, &ws.payload("root"), &limits(5.0)).ok);
    }

    #[test]
    fn modifier_timeout_is_named() {
        let root = tempfile::tempdir().unwrap();
        let initial = root.path().join("initial");
        payload(&initial, "echo 1\n");
        let backend = ExternalProcessBackend {
            command: vec!["/bin/sh".into(), "-c".into(), "sleep 30".into()],
            smoke_command: smoke(),
            initial_payload: initial,
        };
        let ws = Workspace {
            payload_root: root.path().join("payloads"),
            log_root: root.path().join("logs"),
        };
        backend.write_initial(&ws.payload("root")).unwrap();
        let req = GenerationRequest {
            parent_id: 0,
            parent_payload_ref: "root".into(),
            modifier_id: 0,
            modifier_payload_ref: "root".into(),
            child_payload_ref: "c1".into(),
            eval_results_ref: String::new(),
            evaluation_summaries: vec![],
            iterations_left: 1,
            total_iterations: 1,
            stream: StreamId::new("gen", 1, 0),
            master_seed: 0,
            self_improve: true,
            instruction: None,
        };
        let r = generate_child(&backend, &req, &ws, &limits(0.3));
        assert!(!r.compiled);
        assert!(r.cause.unwrap().contains("timeout"));
    }
}
