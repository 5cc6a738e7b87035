use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use super::{
    conclude, CommandSpec, EventSink, ExecError, ExecState, ExecutionHandle, ExecutionLimits,
    Executor,
};
use crate::clock::{Clock, SystemClock};
use crate::model::{EventBody, JobId};

/// One scripted action replayed by [`MockExecutor`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockStep {
    Stdout(Vec<u8>),
    Stderr(Vec<u8>),
    Notice(String),
    /// Ends the run with this code.
    Exit(i32),
    /// Stays running until killed.
    Hold,
}

impl MockStep {
    pub fn stdout(s: impl AsRef<[u8]>) -> Self {
        MockStep::Stdout(s.as_ref().to_vec())
    }
}

/// Executor that never starts a process: it records each [`CommandSpec`] and
/// replays a script into the sink.
///
/// Scripts queued with [`MockExecutor::push_script`] are used once each, in
/// order; afterwards every spawn replays the default script. A script that
/// ends without `Exit` or `Hold` exits with 0.
pub struct MockExecutor {
    clock: Arc<dyn Clock>,
    recorded: Mutex<Vec<CommandSpec>>,
    queued: Mutex<VecDeque<Vec<MockStep>>>,
    default_script: Mutex<Vec<MockStep>>,
}

impl Default for MockExecutor {
    fn default() -> Self {
        Self::new()
    }
}

impl MockExecutor {
    pub fn new() -> Self {
        Self {
            clock: Arc::new(SystemClock),
            recorded: Mutex::new(Vec::new()),
            queued: Mutex::new(VecDeque::new()),
            default_script: Mutex::new(vec![MockStep::Exit(0)]),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_script(self, script: Vec<MockStep>) -> Self {
        *self.default_script.lock().unwrap() = script;
        self
    }

    pub fn set_default_script(&self, script: Vec<MockStep>) {
        *self.default_script.lock().unwrap() = script;
    }

    pub fn push_script(&self, script: Vec<MockStep>) {
        self.queued.lock().unwrap().push_back(script);
    }

    /// Every spec passed to `spawn`, in call order.
    pub fn recorded(&self) -> Vec<CommandSpec> {
        self.recorded.lock().unwrap().clone()
    }

    pub fn last_argv(&self) -> Option<Vec<String>> {
        self.recorded.lock().unwrap().last().map(|s| s.argv.clone())
    }
}

impl Executor for MockExecutor {
    fn spawn(
        &self,
        spec: CommandSpec,
        _limits: &ExecutionLimits,
        job_id: &JobId,
        sink: Arc<dyn EventSink>,
    ) -> Result<ExecutionHandle, ExecError> {
        if spec.argv.first().is_none_or(|a| a.is_empty()) {
            return Err(ExecError::InvalidSpec("argv[0] must be non-empty".into()));
        }
        self.recorded.lock().unwrap().push(spec);
        let script = self
            .queued
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| self.default_script.lock().unwrap().clone());

        let (handle, mut kill_rx) = ExecutionHandle::new(job_id.clone(), self.clock.now_ms());
        let h = handle.clone();
        tokio::spawn(async move {
            for step in script {
                if let Ok(reason) = kill_rx.try_recv() {
                    conclude(&h, sink.as_ref(), ExecState::Killed(reason));
                    return;
                }
                match step {
                    MockStep::Stdout(b) => sink.emit(EventBody::Stdout(b)),
                    MockStep::Stderr(b) => sink.emit(EventBody::Stderr(b)),
                    MockStep::Notice(n) => sink.emit(EventBody::Notice(n)),
                    MockStep::Exit(code) => {
                        conclude(&h, sink.as_ref(), ExecState::Exited(code));
                        return;
                    }
                    MockStep::Hold => {
                        let reason = (&mut kill_rx)
                            .await
                            .unwrap_or_else(|_| "cancelled".to_owned());
                        conclude(&h, sink.as_ref(), ExecState::Killed(reason));
                        return;
                    }
                }
                tokio::task::yield_now().await;
            }
            conclude(&h, sink.as_ref(), ExecState::Exited(0));
        });
        Ok(handle)
    }
}
