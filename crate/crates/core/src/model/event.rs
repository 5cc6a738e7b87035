use std::fmt;

use serde::{Deserialize, Serialize};

use super::JobId;
use crate::clock::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Stdout,
    Stderr,
    Exit,
    Notice,
    Error,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Stdout => "stdout",
            EventKind::Stderr => "stderr",
            EventKind::Exit => "exit",
            EventKind::Notice => "notice",
            EventKind::Error => "error",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Payload of one job event, before it is sequenced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventBody {
    Stdout(Vec<u8>),
    Stderr(Vec<u8>),
    Exit(i32),
    Notice(String),
    /// Terminal failure where no exit code exists (e.g. spawn failure).
    Error(String),
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::Stdout(_) => EventKind::Stdout,
            EventBody::Stderr(_) => EventKind::Stderr,
            EventBody::Exit(_) => EventKind::Exit,
            EventBody::Notice(_) => EventKind::Notice,
            EventBody::Error(_) => EventKind::Error,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, EventBody::Exit(_) | EventBody::Error(_))
    }
}

/// A sequenced, timestamped element of a job's output stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobEvent {
    pub job_id: JobId,
    pub seq: u64,
    pub body: EventBody,
    pub timestamp: Millis,
}

impl JobEvent {
    pub fn kind(&self) -> EventKind {
        self.body.kind()
    }

    pub fn is_terminal(&self) -> bool {
        self.body.is_terminal()
    }
}

/// Prefix of the notice emitted when a run is killed.
pub const KILLED_NOTICE_PREFIX: &str = "killed: ";

/// Exit code reported for runs that were killed.
pub const KILLED_EXIT_CODE: i32 = 137;
