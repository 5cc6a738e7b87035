#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use ccrs_core::audit::{AuditConfig, AuditLog};
use ccrs_core::backends::{BackendConfig, Backends, RecordingProvisioner};
use ccrs_core::clock::{Clock, ManualClock, SystemClock};
use ccrs_core::executor::{Executor, MockExecutor, ProcessExecutor};
use ccrs_core::jobs::{JobConfig, JobManager};
use ccrs_core::model::{ContainerType, ServerPolicy, WireCodec};
use ccrs_core::sites::{SiteRegistration, SiteRegistry};
use ccrs_server::{router, AppState};
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

pub const CVW_KEY: &str = "cvw-site-secret";
pub const OTHER_KEY: &str = "other-site-secret";
pub const ADMIN_KEY: &str = "admin-secret";
pub const CVW_ORIGIN: &str = "https://cvw.example.edu";
pub const OTHER_ORIGIN: &str = "https://other.example.org";

pub fn testdata(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../testdata").join(rel)
}

pub fn canonical_meta_text() -> String {
    std::fs::read_to_string(testdata("sysjobmetadata-paper.json")).unwrap()
}

pub struct TestServer {
    pub app: Router,
    pub state: AppState,
    pub mock: Option<Arc<MockExecutor>>,
    pub clock: Option<Arc<ManualClock>>,
    pub dir: TempDir,
}

impl TestServer {
    pub fn spool(&self) -> PathBuf {
        self.state.jobs.config().spool_root.clone()
    }

    pub fn mock(&self) -> &MockExecutor {
        self.mock.as_deref().expect("mock executor")
    }
}

pub struct Options {
    pub job: Box<dyn FnOnce(&mut JobConfig)>,
    pub max_upload_bytes: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            job: Box::new(|_| {}),
            max_upload_bytes: 8 * 1024 * 1024,
        }
    }
}

fn register(sites: &SiteRegistry) {
    for (id, prefix, key, origin) in [
        ("cvw", "cvw", CVW_KEY, CVW_ORIGIN),
        ("other", "oth", OTHER_KEY, OTHER_ORIGIN),
    ] {
        sites
            .register_site(SiteRegistration {
                site_id: id.into(),
                api_key: key.into(),
                user_prefix: prefix.into(),
                enabled: true,
                origin_allow_list: vec![origin.into()],
                limit_overrides: None,
                image_allow_list: Vec::new(),
            })
            .unwrap();
    }
}

fn build(exec: Arc<dyn Executor>, clock: Arc<dyn Clock>, opts: Options) -> (AppState, TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let audit = Arc::new(AuditLog::open(AuditConfig::new(dir.path().join("audit.log"))).unwrap());
    let mut cfg = JobConfig {
        spool_root: dir.path().join("spool"),
        policy: ServerPolicy {
            enabled_backends: [ContainerType::LocalSandbox, ContainerType::ImagePerJob]
                .into_iter()
                .collect(),
            ..ServerPolicy::default()
        },
        ..JobConfig::default()
    };
    (opts.job)(&mut cfg);
    let backends = Backends::standard(Arc::new(RecordingProvisioner::new()), BackendConfig::default());
    let jobs = JobManager::new(cfg, backends, exec, audit, clock).unwrap();
    let sites = Arc::new(SiteRegistry::in_memory());
    register(&sites);
    let state = AppState::new(jobs, sites, WireCodec::default())
        .with_admin_key(ADMIN_KEY)
        .with_max_upload_bytes(opts.max_upload_bytes);
    (state, dir)
}

/// Mock executor and a manual clock: deterministic output and timestamps.
pub fn mock_server_with(opts: Options) -> TestServer {
    let clock = Arc::new(ManualClock::new(1_700_000_000_000));
    let mock = Arc::new(MockExecutor::new().with_clock(clock.clone()));
    let (state, dir) = build(mock.clone(), clock.clone(), opts);
    TestServer {
        app: router(state.clone()),
        state,
        mock: Some(mock),
        clock: Some(clock),
        dir,
    }
}

pub fn mock_server() -> TestServer {
    mock_server_with(Options::default())
}

/// Real processes under the local sandbox.
pub fn process_server_with(opts: Options) -> TestServer {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let exec = Arc::new(ProcessExecutor::new(clock.clone()));
    let (state, dir) = build(exec, clock, opts);
    TestServer {
        app: router(state.clone()),
        state,
        mock: None,
        clock: None,
        dir,
    }
}

pub fn process_server() -> TestServer {
    process_server_with(Options::default())
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    pub fn job_id(&self) -> String {
        self.json()["jobId"].as_str().expect("jobId").to_owned()
    }
}

pub async fn send(app: &Router, req: Request<Body>) -> Reply {
    let res = tokio::time::timeout(Duration::from_secs(20), app.clone().oneshot(req))
        .await
        .expect("request timed out")
        .unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let body = tokio::time::timeout(Duration::from_secs(20), res.into_body().collect())
        .await
        .expect("body timed out")
        .unwrap()
        .to_bytes();
    Reply {
        status,
        headers,
        body,
    }
}

/// Status and body prefix only; for streams that may stay open.
pub async fn send_head(app: &Router, req: Request<Body>) -> Reply {
    let res = tokio::time::timeout(Duration::from_secs(20), app.clone().oneshot(req))
        .await
        .expect("request timed out")
        .unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let mut body = res.into_body();
    let mut first = Vec::new();
    if let Ok(Some(Ok(frame))) = tokio::time::timeout(Duration::from_millis(50), body.frame()).await {
        if let Some(data) = frame.data_ref() {
            first.extend_from_slice(data);
        }
    }
    Reply {
        status,
        headers,
        body: first.into(),
    }
}

/// Request builder with the usual credential headers.
pub struct Call {
    builder: axum::http::request::Builder,
}

impl Call {
    pub fn new(method: Method, uri: &str) -> Self {
        Self {
            builder: Request::builder().method(method).uri(uri),
        }
    }

    pub fn get(uri: &str) -> Self {
        Self::new(Method::GET, uri)
    }

    pub fn post(uri: &str) -> Self {
        Self::new(Method::POST, uri)
    }

    pub fn put(uri: &str) -> Self {
        Self::new(Method::PUT, uri)
    }

    pub fn header(mut self, k: &str, v: &str) -> Self {
        self.builder = self.builder.header(k, v);
        self
    }

    pub fn key(self, k: &str) -> Self {
        self.header("x-site-key", k)
    }

    pub fn user(self, u: &str) -> Self {
        self.header("x-site-user", u)
    }

    pub fn json(self, v: &Value) -> Request<Body> {
        self.header("content-type", "application/json")
            .builder
            .body(Body::from(v.to_string()))
            .unwrap()
    }

    pub fn raw(self, body: impl Into<Body>) -> Request<Body> {
        self.builder.body(body.into()).unwrap()
    }

    pub fn empty(self) -> Request<Body> {
        self.builder.body(Body::empty()).unwrap()
    }
}

pub fn local_meta(user: &str) -> Value {
    serde_json::json!({
        "$type": "ccrs.model.SysJobMetaData",
        "shell": ["bash"],
        "containerType": {"$type": "ccrs.model.LocalSandbox"},
        "containerId": [],
        "image": [],
        "binds": [],
        "overlay": [],
        "user": user,
        "address": [],
        "hostname": [],
        "url": []
    })
}

pub async fn one_shot(app: &Router, key: &str, user: &str, command: &str) -> Reply {
    let body = serde_json::json!({ "meta": local_meta(user), "command": command });
    send(app, Call::post("/api/v1/one-shot").key(key).json(&body)).await
}

#[derive(Debug, Clone, PartialEq)]
pub struct SseEvent {
    pub event: String,
    pub id: u64,
    pub data: Value,
}

impl SseEvent {
    pub fn bytes(&self) -> Vec<u8> {
        use base64::Engine;
        let s = self.data["payload"].as_str().unwrap_or_default();
        base64::engine::general_purpose::STANDARD.decode(s).unwrap()
    }
}

/// Parses an SSE body; comment lines (keep-alives) are skipped.
pub fn parse_sse(text: &str) -> Vec<SseEvent> {
    let mut out = Vec::new();
    for block in text.split("\n\n").filter(|b| !b.trim().is_empty()) {
        let (mut event, mut id, mut data) = (None, None, String::new());
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                event = Some(v.trim().to_owned());
            } else if let Some(v) = line.strip_prefix("id:") {
                id = Some(v.trim().parse().unwrap());
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push_str(v.trim_start());
            }
        }
        if let (Some(event), Some(id)) = (event, id) {
            out.push(SseEvent {
                event,
                id,
                data: serde_json::from_str(&data).unwrap(),
            });
        }
    }
    out
}

pub async fn events(app: &Router, key: &str, user: &str, job: &str, from: u64) -> (StatusCode, Vec<SseEvent>) {
    let r = send(
        app,
        Call::get(&format!("/api/v1/jobs/{job}/events?from={from}"))
            .key(key)
            .user(user)
            .empty(),
    )
    .await;
    (r.status, parse_sse(&r.text()))
}
