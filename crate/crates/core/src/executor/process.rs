use std::fs;
use std::path::{Path, PathBuf};
use std::process::{ExitStatus, Stdio};
use std::sync::Arc;
use std::time::Duration;

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWriteExt};
use tokio::process::{Child, Command};
use tokio::sync::{mpsc, oneshot};
use tokio::time::{interval, sleep_until, timeout, Instant, MissedTickBehavior};

use super::{
    conclude, limit, CommandSpec, EventSink, ExecError, ExecState, ExecutionHandle,
    ExecutionLimits, Executor, MAX_CHUNK_BYTES,
};
use crate::clock::{Clock, SystemClock};
use crate::model::{EventBody, JobId};

/// Runs commands as real child processes in their own process group, with
/// kernel resource limits plus periodic sampling of the group.
///
/// Must be used from within a Tokio runtime.
pub struct ProcessExecutor {
    clock: Arc<dyn Clock>,
    poll_interval: Duration,
    kill_grace: Duration,
}

impl Default for ProcessExecutor {
    fn default() -> Self {
        Self::new(Arc::new(SystemClock))
    }
}

impl ProcessExecutor {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            poll_interval: Duration::from_millis(200),
            kill_grace: Duration::from_millis(500),
        }
    }

    pub fn with_poll_interval(mut self, every: Duration) -> Self {
        self.poll_interval = every;
        self
    }
}

impl Executor for ProcessExecutor {
    fn spawn(
        &self,
        spec: CommandSpec,
        limits: &ExecutionLimits,
        job_id: &JobId,
        sink: Arc<dyn EventSink>,
    ) -> Result<ExecutionHandle, ExecError> {
        let program = spec
            .argv
            .first()
            .filter(|a| !a.is_empty())
            .ok_or_else(|| ExecError::InvalidSpec("argv[0] must be non-empty".into()))?;
        limits.validate().map_err(ExecError::InvalidSpec)?;
        if !spec.working_dir.is_dir() {
            return Err(ExecError::ContextMissing(spec.working_dir.clone()));
        }

        let mut cmd = Command::new(program);
        cmd.args(&spec.argv[1..])
            .env_clear()
            .envs(&spec.env)
            .current_dir(&spec.working_dir)
            .stdin(if spec.stdin.is_empty() {
                Stdio::null()
            } else {
                Stdio::piped()
            })
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0)
            .kill_on_drop(true);

        if let Some(user) = &spec.run_as {
            let (uid, gid) = lookup_user(user)
                .ok_or_else(|| ExecError::SpawnFailed(format!("unknown host user {user}")))?;
            std::os::unix::fs::chown(&spec.working_dir, Some(uid), Some(gid))
                .map_err(|e| ExecError::SpawnFailed(format!("chown context: {e}")))?;
            cmd.uid(uid).gid(gid);
        }

        let rlimits = RLimits::from(limits);
        // SAFETY: the closure only calls async-signal-safe setrlimit.
        unsafe {
            cmd.pre_exec(move || rlimits.apply());
        }

        let mut child = cmd
            .spawn()
            .map_err(|e| ExecError::SpawnFailed(format!("{program}: {e}")))?;
        let pgid = child.id().map(|p| p as i32).unwrap_or(0);

        let (tx, rx) = mpsc::channel(16);
        if let Some(out) = child.stdout.take() {
            tokio::spawn(pump(out, false, tx.clone()));
        }
        if let Some(err) = child.stderr.take() {
            tokio::spawn(pump(err, true, tx));
        }
        if let Some(mut stdin) = child.stdin.take() {
            let bytes = spec.stdin.clone();
            tokio::spawn(async move {
                let _ = stdin.write_all(&bytes).await;
            });
        }

        let (handle, kill_rx) = ExecutionHandle::new(job_id.clone(), self.clock.now_ms());
        let run = Supervised {
            child,
            pgid,
            handle: handle.clone(),
            sink,
            limits: *limits,
            work_dir: spec.working_dir,
            poll_interval: self.poll_interval,
            kill_grace: self.kill_grace,
        };
        tokio::spawn(run.supervise(rx, kill_rx));
        Ok(handle)
    }
}

type Chunk = (bool, Vec<u8>);

async fn pump(mut from: impl AsyncRead + Unpin, is_stderr: bool, to: mpsc::Sender<Chunk>) {
    let mut buf = vec![0u8; MAX_CHUNK_BYTES];
    loop {
        match from.read(&mut buf).await {
            Ok(0) | Err(_) => return,
            Ok(n) => {
                if to.send((is_stderr, buf[..n].to_vec())).await.is_err() {
                    return;
                }
            }
        }
    }
}

struct Supervised {
    child: Child,
    pgid: i32,
    handle: ExecutionHandle,
    sink: Arc<dyn EventSink>,
    limits: ExecutionLimits,
    work_dir: PathBuf,
    poll_interval: Duration,
    kill_grace: Duration,
}

impl Supervised {
    async fn supervise(
        mut self,
        mut output: mpsc::Receiver<Chunk>,
        mut kill_rx: oneshot::Receiver<String>,
    ) {
        let deadline = Instant::now() + self.limits.wall_clock_ttl;
        let mut ticker = interval(self.poll_interval);
        ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
        let mut delivered: u64 = 0;
        let mut status: Option<ExitStatus> = None;
        let mut streams_open = true;

        let breach = loop {
            if status.is_some() && !streams_open {
                break None;
            }
            tokio::select! {
                biased;
                reason = &mut kill_rx => match reason {
                    Ok(reason) => break Some(reason),
                    // Unreachable while the handle is alive; treat as a kill.
                    Err(_) => break Some("cancelled".to_owned()),
                },
                _ = sleep_until(deadline) => break Some(limit::WALL_CLOCK.to_owned()),
                chunk = output.recv(), if streams_open => match chunk {
                    Some((is_stderr, mut data)) => {
                        let room = self.limits.max_output_bytes.saturating_sub(delivered);
                        let over = data.len() as u64 > room;
                        data.truncate(room as usize);
                        delivered += data.len() as u64;
                        if !data.is_empty() {
                            self.sink.emit(if is_stderr {
                                EventBody::Stderr(data)
                            } else {
                                EventBody::Stdout(data)
                            });
                        }
                        if over {
                            break Some(limit::OUTPUT.to_owned());
                        }
                    }
                    None => streams_open = false,
                },
                st = self.child.wait(), if status.is_none() => match st {
                    Ok(st) => {
                        status = Some(st);
                        // Reap anything the job left behind so its pipes close.
                        kill_group(self.pgid);
                    }
                    Err(_) => break Some("supervisor-error".to_owned()),
                },
                _ = ticker.tick(), if status.is_none() => {
                    if let Some(reason) = self.check_usage() {
                        break Some(reason.to_owned());
                    }
                }
            }
        };

        let state = match breach {
            Some(reason) => {
                kill_group(self.pgid);
                let _ = self.child.start_kill();
                let _ = timeout(self.kill_grace, self.child.wait()).await;
                ExecState::Killed(reason)
            }
            None => classify(status.expect("loop exits normally only after wait")),
        };
        conclude(&self.handle, self.sink.as_ref(), state);
    }

    fn check_usage(&self) -> Option<&'static str> {
        #[cfg(target_os = "linux")]
        {
            let usage = super::procfs::group_usage(self.pgid);
            if usage.processes > self.limits.max_processes {
                return Some(limit::PROCESSES);
            }
            if usage.rss_bytes > self.limits.memory_bytes {
                return Some(limit::MEMORY);
            }
            if usage.cpu > self.limits.cpu_time {
                return Some(limit::CPU_TIME);
            }
        }
        if dir_size(&self.work_dir) > self.limits.max_context_bytes {
            return Some(limit::CONTEXT_SIZE);
        }
        None
    }
}

fn classify(status: ExitStatus) -> ExecState {
    use std::os::unix::process::ExitStatusExt;
    if let Some(code) = status.code() {
        return ExecState::Exited(code);
    }
    match status.signal() {
        Some(libc::SIGXCPU) => ExecState::Killed(limit::CPU_TIME.to_owned()),
        Some(libc::SIGXFSZ) => ExecState::Killed(limit::CONTEXT_SIZE.to_owned()),
        Some(sig) => ExecState::Exited(128 + sig),
        None => ExecState::Exited(-1),
    }
}

fn kill_group(pgid: i32) {
    if pgid > 0 {
        // SAFETY: plain syscall; a stale or empty group just yields ESRCH.
        unsafe {
            libc::killpg(pgid, libc::SIGKILL);
        }
    }
}

/// Total size of regular files under `root`, not following symlinks.
pub(crate) fn dir_size(root: &Path) -> u64 {
    let mut total = 0;
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else {
            continue;
        };
        for entry in entries.flatten() {
            let Ok(meta) = entry.path().symlink_metadata() else {
                continue;
            };
            if meta.is_dir() {
                stack.push(entry.path());
            } else if meta.is_file() {
                total += meta.len();
            }
        }
    }
    total
}

#[derive(Clone, Copy)]
struct RLimits {
    cpu_secs: u64,
    data_bytes: u64,
    fsize_bytes: u64,
}

impl From<&ExecutionLimits> for RLimits {
    fn from(l: &ExecutionLimits) -> Self {
        Self {
            cpu_secs: l.cpu_time.as_secs().max(1),
            data_bytes: l.memory_bytes,
            fsize_bytes: l.max_context_bytes,
        }
    }
}

impl RLimits {
    fn apply(self) -> std::io::Result<()> {
        set(libc::RLIMIT_CPU, self.cpu_secs, self.cpu_secs + 1)?;
        set(libc::RLIMIT_DATA, self.data_bytes, self.data_bytes)?;
        set(libc::RLIMIT_FSIZE, self.fsize_bytes, self.fsize_bytes)?;
        set(libc::RLIMIT_CORE, 0, 0)?;
        Ok(())
    }
}

#[cfg(target_os = "linux")]
type Resource = libc::__rlimit_resource_t;
#[cfg(not(target_os = "linux"))]
type Resource = libc::c_int;

fn set(resource: Resource, soft: u64, hard: u64) -> std::io::Result<()> {
    let lim = libc::rlimit {
        rlim_cur: soft as libc::rlim_t,
        rlim_max: hard as libc::rlim_t,
    };
    // SAFETY: `lim` is a valid rlimit for the duration of the call.
    if unsafe { libc::setrlimit(resource, &lim) } == 0 {
        Ok(())
    } else {
        Err(std::io::Error::last_os_error())
    }
}

fn lookup_user(name: &str) -> Option<(u32, u32)> {
    let cname = std::ffi::CString::new(name).ok()?;
    // SAFETY: getpwnam returns null or a pointer to static storage, which we
    // read immediately.
    unsafe {
        let pw = libc::getpwnam(cname.as_ptr());
        if pw.is_null() {
            None
        } else {
            Some(((*pw).pw_uid, (*pw).pw_gid))
        }
    }
}
