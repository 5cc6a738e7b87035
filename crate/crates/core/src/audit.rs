//! Job-keyed audit trail.
//!
//! Records are appended as JSON lines by a single writer thread fed through a
//! bounded channel. The active file rotates to `<name>.1 … <name>.N` once it
//! would exceed the configured size.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::model::JobId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warn,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuditEvent {
    #[serde(rename = "job.created")]
    JobCreated,
    #[serde(rename = "job.spawned")]
    JobSpawned,
    #[serde(rename = "job.exited")]
    JobExited,
    #[serde(rename = "job.killed")]
    JobKilled,
    #[serde(rename = "gc.context")]
    GcContext,
    #[serde(rename = "gc.container")]
    GcContainer,
    #[serde(rename = "gc.user")]
    GcUser,
    #[serde(rename = "site.disabled")]
    SiteDisabled,
    #[serde(rename = "auth.rejected")]
    AuthRejected,
    #[serde(rename = "internal.error")]
    InternalError,
}

impl AuditEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            AuditEvent::JobCreated => "job.created",
            AuditEvent::JobSpawned => "job.spawned",
            AuditEvent::JobExited => "job.exited",
            AuditEvent::JobKilled => "job.killed",
            AuditEvent::GcContext => "gc.context",
            AuditEvent::GcContainer => "gc.container",
            AuditEvent::GcUser => "gc.user",
            AuditEvent::SiteDisabled => "site.disabled",
            AuditEvent::AuthRejected => "auth.rejected",
            AuditEvent::InternalError => "internal.error",
        }
    }

    pub fn is_job_event(self) -> bool {
        self.as_str().starts_with("job.")
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, AuditEvent::JobExited | AuditEvent::JobKilled)
    }
}

impl fmt::Display for AuditEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditRecord {
    pub timestamp: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<JobId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_id: Option<String>,
    pub severity: Severity,
    pub event: AuditEvent,
    #[serde(default)]
    pub detail: BTreeMap<String, String>,
}

impl AuditRecord {
    pub fn new(event: AuditEvent, timestamp: Millis) -> Self {
        let severity = match event {
            AuditEvent::JobKilled | AuditEvent::SiteDisabled | AuditEvent::AuthRejected => {
                Severity::Warn
            }
            AuditEvent::InternalError => Severity::Error,
            _ => Severity::Info,
        };
        Self {
            timestamp,
            job_id: None,
            site_id: None,
            severity,
            event,
            detail: BTreeMap::new(),
        }
    }

    pub fn job(mut self, id: &JobId) -> Self {
        self.job_id = Some(id.clone());
        self
    }

    pub fn site(mut self, site: impl Into<String>) -> Self {
        self.site_id = Some(site.into());
        self
    }

    pub fn severity(mut self, s: Severity) -> Self {
        self.severity = s;
        self
    }

    pub fn detail(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.detail.insert(key.into(), value.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditConfig {
    pub path: PathBuf,
    /// Rotate when the active file would grow past this size.
    pub max_bytes: u64,
    /// Number of rotated files kept.
    pub max_files: usize,
    /// Records buffered before `record` starts to wait for the writer.
    pub buffer: usize,
}

impl AuditConfig {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            max_bytes: 16 * 1024 * 1024,
            max_files: 5,
            buffer: 8192,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuditError {
    #[error("no audit records for job {0}")]
    UnknownJob(JobId),
    #[error("audit log unreadable: {0}")]
    Io(String),
}

enum Msg {
    Record(AuditRecord),
    Flush(mpsc::Sender<()>),
}

#[derive(Default)]
struct Counters {
    written: AtomicU64,
    failed: AtomicU64,
}

pub struct AuditLog {
    tx: Mutex<Option<SyncSender<Msg>>>,
    writer: Mutex<Option<JoinHandle<()>>>,
    config: AuditConfig,
    counters: Arc<Counters>,
}

impl AuditLog {
    pub fn open(config: AuditConfig) -> io::Result<Self> {
        if let Some(dir) = config.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = Writer::open(&config)?;
        let (tx, rx) = mpsc::sync_channel(config.buffer.max(1));
        let counters = Arc::new(Counters::default());
        let c = counters.clone();
        let writer = std::thread::Builder::new()
            .name("audit-writer".into())
            .spawn(move || file.run(rx, &c))?;
        Ok(Self {
            tx: Mutex::new(Some(tx)),
            writer: Mutex::new(Some(writer)),
            config,
            counters,
        })
    }

    pub fn path(&self) -> &Path {
        &self.config.path
    }

    /// Queues a record. Waits only while the buffer is full. Malformed
    /// records (a `job.*` event without a job id) are counted and dropped.
    pub fn record(&self, r: AuditRecord) {
        if r.event.is_job_event() && r.job_id.is_none() {
            tracing::error!(event = %r.event, "audit record without job id");
            self.counters.failed.fetch_add(1, Ordering::Relaxed);
            return;
        }
        let tx = self.tx.lock().unwrap().clone();
        let sent = tx.is_some_and(|tx| tx.send(Msg::Record(r)).is_ok());
        if !sent {
            self.counters.failed.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Returns once every record queued before the call has been written.
    pub fn flush(&self) {
        let tx = self.tx.lock().unwrap().clone();
        let Some(tx) = tx else { return };
        let (done_tx, done_rx) = mpsc::channel();
        if tx.send(Msg::Flush(done_tx)).is_ok() {
            let _ = done_rx.recv();
        }
    }

    pub fn records_written(&self) -> u64 {
        self.counters.written.load(Ordering::Relaxed)
    }

    /// Records that could not be queued or written.
    pub fn failures(&self) -> u64 {
        self.counters.failed.load(Ordering::Relaxed)
    }

    /// Every record for `job`, oldest first.
    pub fn query(&self, job: &JobId) -> Result<Vec<AuditRecord>, AuditError> {
        let mut out: Vec<AuditRecord> = self
            .read_all()?
            .into_iter()
            .filter(|r| r.job_id.as_ref() == Some(job))
            .collect();
        if out.is_empty() {
            return Err(AuditError::UnknownJob(job.clone()));
        }
        out.sort_by_key(|r| r.timestamp);
        Ok(out)
    }

    /// All retained records, oldest file first. Unparseable lines are skipped.
    pub fn read_all(&self) -> Result<Vec<AuditRecord>, AuditError> {
        self.flush();
        let mut files: Vec<PathBuf> = (1..=self.config.max_files)
            .rev()
            .map(|i| rotated(&self.config.path, i))
            .collect();
        files.push(self.config.path.clone());
        let mut out = Vec::new();
        for path in files {
            let f = match File::open(&path) {
                Ok(f) => f,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(AuditError::Io(e.to_string())),
            };
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| AuditError::Io(e.to_string()))?;
                if let Ok(r) = serde_json::from_str(&line) {
                    out.push(r);
                }
            }
        }
        Ok(out)
    }

    /// Drains the buffer and stops the writer. Later records count as failures.
    pub fn close(&self) {
        self.tx.lock().unwrap().take();
        if let Some(w) = self.writer.lock().unwrap().take() {
            let _ = w.join();
        }
    }
}

impl Drop for AuditLog {
    fn drop(&mut self) {
        self.close();
    }
}

fn rotated(path: &Path, i: usize) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".{i}"));
    PathBuf::from(s)
}

struct Writer {
    path: PathBuf,
    max_bytes: u64,
    max_files: usize,
    out: BufWriter<File>,
    size: u64,
}

impl Writer {
    fn open(config: &AuditConfig) -> io::Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&config.path)?;
        let size = file.metadata()?.len();
        Ok(Self {
            path: config.path.clone(),
            max_bytes: config.max_bytes,
            max_files: config.max_files,
            out: BufWriter::new(file),
            size,
        })
    }

    fn run(mut self, rx: Receiver<Msg>, counters: &Counters) {
        while let Ok(first) = rx.recv() {
            let mut next = Some(first);
            let mut waiters = Vec::new();
            while let Some(msg) = next {
                match msg {
                    Msg::Record(r) => match self.write(&r) {
                        Ok(()) => {
                            counters.written.fetch_add(1, Ordering::Relaxed);
                        }
                        Err(e) => {
                            counters.failed.fetch_add(1, Ordering::Relaxed);
                            tracing::error!(error = %e, "audit write failed");
                        }
                    },
                    Msg::Flush(done) => waiters.push(done),
                }
                next = rx.try_recv().ok();
            }
            if let Err(e) = self.out.flush() {
                tracing::error!(error = %e, "audit flush failed");
            }
            for w in waiters {
                let _ = w.send(());
            }
        }
        let _ = self.out.flush();
    }

    fn write(&mut self, r: &AuditRecord) -> io::Result<()> {
        let mut line = serde_json::to_vec(r).map_err(io::Error::other)?;
        line.push(b'\n');
        let len = line.len() as u64;
        if self.size > 0 && self.size + len > self.max_bytes {
            self.rotate()?;
        }
        self.out.write_all(&line)?;
        self.size += len;
        Ok(())
    }

    fn rotate(&mut self) -> io::Result<()> {
        self.out.flush()?;
        if self.max_files == 0 {
            fs::remove_file(&self.path)?;
        } else {
            for i in (1..self.max_files).rev() {
                let from = rotated(&self.path, i);
                if from.exists() {
                    fs::rename(&from, rotated(&self.path, i + 1))?;
                }
            }
            fs::rename(&self.path, rotated(&self.path, 1))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        self.out = BufWriter::new(file);
        self.size = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(n: u128) -> JobId {
        JobId::from_parts(1_700_000_000_000, n)
    }

    fn open(dir: &Path) -> AuditLog {
        AuditLog::open(AuditConfig::new(dir.join("audit.log"))).unwrap()
    }

    #[test]
    fn job_record_line_contains_id() {
        let dir = tempfile::tempdir().unwrap();
        let log = open(dir.path());
        let j = id(1);
        log.record(
            AuditRecord::new(AuditEvent::JobCreated, 5)
                .job(&j)
                .site("cvw")
                .detail("contextPath", "/tmp/ccrs/cvw/x"),
        );
        log.flush();
        let text = fs::read_to_string(log.path()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains(j.as_str()));
        assert!(text.contains("\"event\":\"job.created\""));
    }

    #[test]
    fn non_job_event_without_id() {
        let dir = tempfile::tempdir().unwrap();
        let log = open(dir.path());
        log.record(AuditRecord::new(AuditEvent::InternalError, 1).detail("msg", "x"));
        assert_eq!(log.read_all().unwrap().len(), 1);
        assert_eq!(log.failures(), 0);

        log.record(AuditRecord::new(AuditEvent::JobSpawned, 2));
        assert_eq!(log.failures(), 1);
        assert_eq!(log.read_all().unwrap().len(), 1);
    }

    #[test]
    fn query_orders_by_timestamp_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let log = open(dir.path());
        let (a, b) = (id(1), id(2));
        log.record(AuditRecord::new(AuditEvent::JobExited, 30).job(&a));
        log.record(AuditRecord::new(AuditEvent::JobCreated, 10).job(&a));
        log.record(AuditRecord::new(AuditEvent::JobCreated, 20).job(&b));
        log.record(AuditRecord::new(AuditEvent::JobSpawned, 20).job(&a));
        let events: Vec<_> = log.query(&a).unwrap().iter().map(|r| r.event).collect();
        assert_eq!(
            events,
            [
                AuditEvent::JobCreated,
                AuditEvent::JobSpawned,
                AuditEvent::JobExited
            ]
        );
        assert_eq!(log.query(&id(9)), Err(AuditError::UnknownJob(id(9))));
    }

    #[test]
    fn ten_thousand_concurrent_records() {
        let dir = tempfile::tempdir().unwrap();
        let log = Arc::new(
            AuditLog::open(AuditConfig {
                buffer: 64,
                ..AuditConfig::new(dir.path().join("audit.log"))
            })
            .unwrap(),
        );
        let threads: Vec<_> = (0..10)
            .map(|t| {
                let log = log.clone();
                std::thread::spawn(move || {
                    for i in 0..1000u128 {
                        log.record(
                            AuditRecord::new(AuditEvent::JobCreated, i as u64)
                                .job(&id(t * 1000 + i)),
                        );
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        log.flush();
        let text = fs::read_to_string(log.path()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10_000);
        for l in lines {
            serde_json::from_str::<serde_json::Value>(l).unwrap();
        }
        assert_eq!(log.records_written(), 10_000);
        assert_eq!(log.failures(), 0);
    }

    #[test]
    fn rotation_keeps_queryable_history() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        let log = AuditLog::open(AuditConfig {
            max_bytes: 1024,
            max_files: 50,
            ..AuditConfig::new(&path)
        })
        .unwrap();
        let j = id(7);
        for t in 0..100 {
            log.record(AuditRecord::new(AuditEvent::JobSpawned, t).job(&j));
        }
        log.flush();
        assert!(rotated(&path, 1).exists());
        assert!(fs::metadata(&path).unwrap().len() <= 1024);
        let ts: Vec<_> = log.query(&j).unwrap().iter().map(|r| r.timestamp).collect();
        assert_eq!(ts, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn rotation_drops_oldest_beyond_max_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        let log = AuditLog::open(AuditConfig {
            max_bytes: 200,
            max_files: 2,
            ..AuditConfig::new(&path)
        })
        .unwrap();
        for t in 0..50 {
            log.record(AuditRecord::new(AuditEvent::GcContext, t).job(&id(1)));
        }
        log.flush();
        assert!(rotated(&path, 2).exists());
        assert!(!rotated(&path, 3).exists());
        let kept = log.read_all().unwrap();
        assert!(kept.len() < 50);
        assert_eq!(kept.last().unwrap().timestamp, 49);
    }

    #[test]
    fn record_after_close_is_counted() {
        let dir = tempfile::tempdir().unwrap();
        let log = open(dir.path());
        log.close();
        log.record(AuditRecord::new(AuditEvent::InternalError, 0));
        assert_eq!(log.failures(), 1);
    }

    #[test]
    fn wire_names() {
        let r = AuditRecord::new(AuditEvent::GcUser, 3).site("cvw");
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["event"], "gc.user");
        assert_eq!(v["severity"], "info");
        assert!(v.get("jobId").is_none());
    }
}
