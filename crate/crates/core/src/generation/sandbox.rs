//! Resource-limited execution of untrusted commands.
//!
//! Each command runs as the leader of a fresh process group inside its own
//! network namespace, with an `RLIMIT_CPU` cap. The whole group is killed when
//! the wall-clock timeout fires and again after the leader exits, so nothing
//! the command spawned outlives the call. Captured output is cut at the byte
//! cap and a marker is appended.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::{Duration, Instant};
use thiserror::Error;

pub const TRUNCATION_MARKER: &[u8] = b"\n[stepstone: output truncated]\n";

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("failed to spawn `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("network isolation is unavailable on this host")]
    IsolationUnavailable,
    #[error("invalid sandbox limits: {0}")]
    InvalidLimits(String),
    #[error("empty command line")]
    EmptyCommand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Network {
    #[default]
    Disabled,
}

/// Limits applied to every sandboxed command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SandboxLimits {
    pub timeout_secs: f64,
    pub cpu_secs: u64,
    pub max_output_bytes: usize,
    pub network: Network,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        Self {
            timeout_secs: 60.0,
            cpu_secs: 60,
            max_output_bytes: 1 << 20,
            network: Network::Disabled,
        }
    }
}

impl SandboxLimits {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(SandboxError::InvalidLimits("timeout_secs must be positive".into()));
        }
        if self.cpu_secs == 0 {
            return Err(SandboxError::InvalidLimits("cpu_secs must be positive".into()));
        }
        if self.max_output_bytes == 0 {
            return Err(SandboxError::InvalidLimits("max_output_bytes must be positive".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

/// A command line plus its working directory, input and extra environment.
#[derive(Debug, Clone, Default)]
pub struct SandboxCommand {
    pub argv: Vec<String>,
    pub cwd: Option<PathBuf>,
    pub stdin: Vec<u8>,
    pub env: Vec<(String, String)>,
}

impl SandboxCommand {
    pub fn new<I, S>(argv: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            argv: argv.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    /// `sh -c <script>`.
    pub fn shell(script: &str) -> Self {
        Self::new(["/bin/sh", "-c", script])
    }

    pub fn cwd(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cwd = Some(dir.into());
        self
    }

    pub fn stdin(mut self, bytes: impl Into<Vec<u8>>) -> Self {
        self.stdin = bytes.into();
        self
    }

    pub fn env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env.push((key.into(), value.into()));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitState {
    Exited(i32),
    Signaled(i32),
}

#[derive(Debug, Clone)]
pub struct SandboxOutcome {
    pub status: ExitState,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    pub elapsed: Duration,
    pub timed_out: bool,
    pub cpu_limit_hit: bool,
    /// Process group id; no member of it is alive once the outcome returns.
    pub process_group: i32,
}

impl SandboxOutcome {
    pub fn success(&self) -> bool {
        self.status == ExitState::Exited(0) && !self.timed_out
    }

    pub fn limit_fired(&self) -> bool {
        self.timed_out || self.cpu_limit_hit || self.stdout_truncated || self.stderr_truncated
    }

    /// Short human-readable cause for a failed run.
    pub fn failure_cause(&self) -> Option<String> {
        if self.timed_out {
            Some("timeout".into())
        } else if self.cpu_limit_hit {
            Some("cpu limit".into())
        } else if self.stdout_truncated || self.stderr_truncated {
            Some("output limit".into())
        } else {
            match self.status {
                ExitState::Exited(0) => None,
                ExitState::Exited(code) => Some(format!("exit status {code}")),
                ExitState::Signaled(sig) => Some(format!("killed by signal {sig}")),
            }
        }
    }
}

unsafe fn isolate_network() -> std::io::Result<()> {
    if libc::unshare(libc::CLONE_NEWNET) == 0 {
        return Ok(());
    }
    if libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET) == 0 {
        return Ok(());
    }
    Err(std::io::Error::last_os_error())
}

/// Whether this host lets us place children in a private network namespace.
pub fn network_isolation_available() -> bool {
    static AVAILABLE: OnceLock<bool> = OnceLock::new();
    *AVAILABLE.get_or_init(|| {
        let mut cmd = Command::new("/bin/sh");
        cmd.args(["-c", "exit 0"])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null());
        unsafe {
            cmd.pre_exec(|| isolate_network());
        }
        cmd.status().map(|s| s.success()).unwrap_or(false)
    })
}

fn spawn_reader<R: Read + Send + 'static>(
    mut src: R,
    cap: usize,
    overflow: Arc<AtomicBool>,
) -> thread::JoinHandle<(Vec<u8>, bool)> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 8192];
        loop {
            match src.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    if n > room {
                        truncated = true;
                        overflow.store(true, Ordering::Relaxed);
                    }
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
        if truncated {
            kept.extend_from_slice(TRUNCATION_MARKER);
        }
        (kept, truncated)
    })
}

fn kill_group(pgid: i32) {
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

/// Whether any process of group `pgid` is still running. Zombies awaiting
/// reaping by init do not count.
pub fn process_group_alive(pgid: i32) -> bool {
    if unsafe { libc::killpg(pgid, 0) } != 0 {
        return false;
    }
    let Ok(entries) = std::fs::read_dir("/proc") else {
        return true;
    };
    entries.flatten().any(|entry| {
        let Ok(stat) = std::fs::read_to_string(entry.path().join("stat")) else {
            return false;
        };
        // after the parenthesized name: state ppid pgrp ...
        let Some((_, rest)) = stat.rsplit_once(") ") else {
            return false;
        };
        let fields: Vec<&str> = rest.split_whitespace().take(3).collect();
        fields.len() == 3 && fields[0] != "Z" && fields[2].parse() == Ok(pgid)
    })
}

/// Runs `command` under `limits`.
pub fn sandbox_execute(
    command: &SandboxCommand,
    limits: &SandboxLimits,
) -> Result<SandboxOutcome, SandboxError> {
    limits.validate()?;
    let program = command.argv.first().ok_or(SandboxError::EmptyCommand)?;
    if !network_isolation_available() {
        return Err(SandboxError::IsolationUnavailable);
    }

    let mut cmd = Command::new(program);
    cmd.args(&command.argv[1..])
        .env_clear()
        .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/bin:/bin".into()))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Ok(home) = std::env::var("HOME") {
        cmd.env("HOME", home);
    }
    for (k, v) in &command.env {
        cmd.env(k, v);
    }
    if let Some(dir) = &command.cwd {
        cmd.current_dir(dir);
    }
    let cpu = limits.cpu_secs as libc::rlim_t;
    unsafe {
        cmd.pre_exec(move || {
            if libc::setsid() < 0 {
                return Err(std::io::Error::last_os_error());
            }
            // soft limit raises SIGXCPU, hard limit one second later SIGKILL
            let rl = libc::rlimit {
                rlim_cur: cpu,
                rlim_max: cpu + 1,
            };
            if libc::setrlimit(libc::RLIMIT_CPU, &rl) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            isolate_network()
        });
    }

    let start = Instant::now();
    let mut child = cmd.spawn().map_err(|source| SandboxError::Spawn {
        program: program.clone(),
        source,
    })?;
    let pgid = child.id() as i32;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let input = command.stdin.clone();
    let writer = thread::spawn(move || {
        // a child that ignores its input closes the pipe early; that is not an error
        let _ = stdin.write_all(&input);
    });
    let overflow = Arc::new(AtomicBool::new(false));
    let out = spawn_reader(
        child.stdout.take().expect("piped stdout"),
        limits.max_output_bytes,
        overflow.clone(),
    );
    let err = spawn_reader(
        child.stderr.take().expect("piped stderr"),
        limits.max_output_bytes,
        overflow.clone(),
    );

    let deadline = limits.timeout();
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {}
            Err(_) => {
                kill_group(pgid);
                break child.wait().expect("child reaped");
            }
        }
        if overflow.load(Ordering::Relaxed) {
            kill_group(pgid);
            break child.wait().expect("child reaped");
        }
        if start.elapsed() >= deadline {
            timed_out = true;
            kill_group(pgid);
            break child.wait().expect("child reaped");
        }
        thread::sleep(Duration::from_millis(5));
    };
    // anything the command left behind in its group goes too
    kill_group(pgid);
    let elapsed = start.elapsed();

    let _ = writer.join();
    let (stdout, stdout_truncated) = out.join().unwrap_or_default();
    let (stderr, stderr_truncated) = err.join().unwrap_or_default();

    let exit = match (status.code(), status.signal()) {
        (Some(code), _) => ExitState::Exited(code),
        (None, Some(sig)) => ExitState::Signaled(sig),
        (None, None) => ExitState::Signaled(0),
    };
    let cpu_limit_hit = !timed_out
        && !stdout_truncated
        && !stderr_truncated
        && matches!(exit, ExitState::Signaled(s) if s == libc::SIGXCPU || s == libc::SIGKILL);

    // wait for the group to drain so callers can rely on no survivors
    let drain_start = Instant::now();
    while process_group_alive(pgid) && drain_start.elapsed() < Duration::from_secs(2) {
        kill_group(pgid);
        thread::sleep(Duration::from_millis(2));
    }

    Ok(SandboxOutcome {
        status: exit,
        stdout,
        stderr,
        stdout_truncated,
        stderr_truncated,
        elapsed,
        timed_out,
        cpu_limit_hit,
        process_group: pgid,
    })
}
