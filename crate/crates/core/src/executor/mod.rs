//! Supervised process execution.
//!
//! An [`Executor`] launches a fully resolved [`CommandSpec`] under a set of
//! [`ExecutionLimits`] and reports everything the process does through an
//! [`EventSink`]. Every run ends with exactly one terminal event: `exit` with
//! the process's code, or a `killed: <limit>` notice followed by `exit 137`.

mod mock;
mod process;
#[cfg(target_os = "linux")]
mod procfs;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::{oneshot, watch};

use crate::clock::Millis;
use crate::model::{EventBody, JobId, KILLED_EXIT_CODE, KILLED_NOTICE_PREFIX};

pub use mock::{MockExecutor, MockStep};
pub use process::ProcessExecutor;
pub(crate) use process::dir_size;

/// Upper bound on the payload of a single stdout/stderr event.
pub const MAX_CHUNK_BYTES: usize = 64 * 1024;

/// Names used in `killed` notices and audit records.
pub mod limit {
    pub const WALL_CLOCK: &str = "wall-clock";
    pub const CPU_TIME: &str = "cpu-time";
    pub const MEMORY: &str = "memory";
    pub const OUTPUT: &str = "output-limit";
    pub const CONTEXT_SIZE: &str = "context-size";
    pub const PROCESSES: &str = "process-limit";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CommandSpec {
    pub argv: Vec<String>,
    pub working_dir: PathBuf,
    /// The complete child environment. Nothing is inherited.
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub stdin: Vec<u8>,
    /// Host account to run as, when the backend scopes jobs to host users.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_as: Option<String>,
}

impl CommandSpec {
    pub fn new(argv: Vec<String>, working_dir: impl Into<PathBuf>) -> Self {
        Self {
            argv,
            working_dir: working_dir.into(),
            env: BTreeMap::new(),
            stdin: Vec::new(),
            run_as: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ExecutionLimits {
    #[serde(rename = "wallClockTtlSecs", with = "secs")]
    pub wall_clock_ttl: Duration,
    #[serde(rename = "cpuTimeSecs", with = "secs")]
    pub cpu_time: Duration,
    pub memory_bytes: u64,
    pub max_output_bytes: u64,
    pub max_context_bytes: u64,
    pub max_processes: u32,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        Self {
            wall_clock_ttl: Duration::from_secs(60),
            cpu_time: Duration::from_secs(30),
            memory_bytes: 512 * 1024 * 1024,
            max_output_bytes: 4 * 1024 * 1024,
            max_context_bytes: 64 * 1024 * 1024,
            max_processes: 64,
        }
    }
}

impl ExecutionLimits {
    pub fn validate(&self) -> Result<(), String> {
        if self.wall_clock_ttl < Duration::from_secs(1) {
            return Err("wall-clock TTL must be at least 1 s".into());
        }
        if self.cpu_time.is_zero()
            || self.memory_bytes == 0
            || self.max_output_bytes == 0
            || self.max_context_bytes == 0
            || self.max_processes == 0
        {
            return Err("all limits must be strictly positive".into());
        }
        Ok(())
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecState {
    Running,
    Exited(i32),
    Killed(String),
}

impl ExecState {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, ExecState::Running)
    }
}

impl fmt::Display for ExecState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecState::Running => write!(f, "running"),
            ExecState::Exited(c) => write!(f, "exited({c})"),
            ExecState::Killed(r) => write!(f, "killed({r})"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("spawn failed: {0}")]
    SpawnFailed(String),
    #[error("working directory {0} does not exist")]
    ContextMissing(PathBuf),
    #[error("invalid command: {0}")]
    InvalidSpec(String),
}

/// Receives the events of one run, in order.
pub trait EventSink: Send + Sync {
    fn emit(&self, body: EventBody);

    /// Called once with the final state, after the handle has transitioned
    /// and before the terminal events are emitted.
    fn terminated(&self, _state: &ExecState) {}
}

pub trait Executor: Send + Sync {
    fn spawn(
        &self,
        spec: CommandSpec,
        limits: &ExecutionLimits,
        job_id: &JobId,
        sink: Arc<dyn EventSink>,
    ) -> Result<ExecutionHandle, ExecError>;
}

/// Shared view of one run. Clones refer to the same run.
#[derive(Clone)]
pub struct ExecutionHandle {
    inner: Arc<HandleInner>,
}

struct HandleInner {
    job_id: JobId,
    started_at: Millis,
    state: watch::Sender<ExecState>,
    kill_tx: Mutex<Option<oneshot::Sender<String>>>,
}

impl fmt::Debug for ExecutionHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExecutionHandle")
            .field("job_id", &self.inner.job_id)
            .field("started_at", &self.inner.started_at)
            .field("state", &self.state())
            .finish()
    }
}

impl ExecutionHandle {
    pub(crate) fn new(job_id: JobId, started_at: Millis) -> (Self, oneshot::Receiver<String>) {
        let (tx, rx) = oneshot::channel();
        let handle = Self {
            inner: Arc::new(HandleInner {
                job_id,
                started_at,
                state: watch::Sender::new(ExecState::Running),
                kill_tx: Mutex::new(Some(tx)),
            }),
        };
        (handle, rx)
    }

    pub fn job_id(&self) -> &JobId {
        &self.inner.job_id
    }

    pub fn started_at(&self) -> Millis {
        self.inner.started_at
    }

    pub fn state(&self) -> ExecState {
        self.inner.state.borrow().clone()
    }

    pub fn is_running(&self) -> bool {
        !self.state().is_terminal()
    }

    /// Waits for the run to reach a terminal state.
    pub async fn wait(&self) -> ExecState {
        let mut rx = self.inner.state.subscribe();
        let state = rx
            .wait_for(ExecState::is_terminal)
            .await
            .map(|s| s.clone());
        // The sender lives in `inner`, which we hold, so this cannot fail.
        state.unwrap_or_else(|_| self.state())
    }

    /// Requests termination. Idempotent: only the first request against a
    /// running process has any effect. Returns whether this call delivered it.
    pub fn kill(&self, reason: &str) -> bool {
        let tx = self.inner.kill_tx.lock().unwrap().take();
        match tx {
            Some(tx) => tx.send(reason.to_owned()).is_ok(),
            None => false,
        }
    }

    /// Moves to a terminal state; later kill requests become no-ops.
    pub(crate) fn finish(&self, state: ExecState) {
        self.inner.kill_tx.lock().unwrap().take();
        self.inner.state.send_replace(state);
    }
}

/// Terminates `handle`'s run if it is still going.
pub fn kill(handle: &ExecutionHandle, reason: &str) -> bool {
    handle.kill(reason)
}

/// Records the final state on the handle, notifies the sink, and emits the
/// terminal events for it.
pub(crate) fn conclude(handle: &ExecutionHandle, sink: &dyn EventSink, state: ExecState) {
    handle.finish(state.clone());
    sink.terminated(&state);
    match state {
        ExecState::Exited(code) => sink.emit(EventBody::Exit(code)),
        ExecState::Killed(reason) => {
            sink.emit(EventBody::Notice(format!("{KILLED_NOTICE_PREFIX}{reason}")));
            sink.emit(EventBody::Exit(KILLED_EXIT_CODE));
        }
        ExecState::Running => unreachable!("conclude called with a running state"),
    }
}
