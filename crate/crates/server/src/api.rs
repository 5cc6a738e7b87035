use std::collections::BTreeMap;
use std::convert::Infallible;
use std::net::SocketAddr;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{ConnectInfo, Path, Query, State};
use axum::http::{header, Extensions, HeaderMap, StatusCode, Uri};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ccrs_core::audit::{AuditEvent, AuditRecord, Severity};
use ccrs_core::jobs::{ActionSet, Caller, Started};
use ccrs_core::model::{EventBody, JobEvent, JobId, JobMetadata};
use ccrs_core::sites::{Site, SiteError, SiteUser};
use futures::{Stream, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::{AppState, SITE_KEY_HEADER, SITE_USER_HEADER};

/// Credential sources. Query parameters exist for `EventSource`, which
/// cannot set headers.
#[derive(Debug, Default, Deserialize)]
pub(crate) struct AuthQuery {
    key: Option<String>,
    user: Option<String>,
    from: Option<u64>,
}

fn header_str<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok())
}

fn reject(state: &AppState, site: Option<&Site>, route: &str, err: &SiteError) {
    let mut r = AuditRecord::new(AuditEvent::AuthRejected, state.jobs.now())
        .severity(Severity::Warn)
        .detail("route", route)
        .detail("reason", err);
    if let Some(site) = site {
        r = r.site(&site.site_id);
    }
    state.jobs.audit().record(r);
}

fn unauthorized(state: &AppState, route: &str, what: &str) -> ApiError {
    state.jobs.audit().record(
        AuditRecord::new(AuditEvent::AuthRejected, state.jobs.now())
            .severity(Severity::Warn)
            .detail("route", route)
            .detail("reason", format!("missing {what}")),
    );
    ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", format!("missing {what}"))
}

/// Resolves the site key before the body is looked at, so a bad key is a 401
/// even when the body is also malformed.
fn site_key<'a>(
    state: &AppState,
    headers: &'a HeaderMap,
    query: Option<&'a AuthQuery>,
    route: &str,
) -> Result<&'a str, ApiError> {
    let key = header_str(headers, SITE_KEY_HEADER)
        .or_else(|| query.and_then(|q| q.key.as_deref()))
        .filter(|k| !k.is_empty())
        .ok_or_else(|| unauthorized(state, route, "site key"))?;
    let origin = header_str(headers, header::ORIGIN.as_str());
    let site = state.sites.site_for_key(key).map_err(|e| {
        reject(state, None, route, &e);
        ApiError::from(e)
    })?;
    let early = if !site.enabled {
        Some(SiteError::SiteDisabled)
    } else if origin.is_some_and(|o| !site.origin_allowed(o)) {
        Some(SiteError::OriginRejected)
    } else {
        None
    };
    if let Some(e) = early {
        reject(state, Some(&site), route, &e);
        return Err(e.into());
    }
    Ok(key)
}

fn authenticate(
    state: &AppState,
    headers: &HeaderMap,
    key: &str,
    login: &str,
    route: &str,
) -> Result<SiteUser, ApiError> {
    let origin = header_str(headers, header::ORIGIN.as_str());
    state.sites.authenticate(key, login, origin).map_err(|e| {
        reject(state, state.sites.site_for_key(key).ok().as_deref(), route, &e);
        ApiError::from(e)
    })
}

/// Key plus login from `X-Site-User` or `?user=`.
fn caller_from_headers(
    state: &AppState,
    headers: &HeaderMap,
    query: Option<&AuthQuery>,
    route: &str,
) -> Result<Caller, ApiError> {
    let key = site_key(state, headers, query, route)?;
    let login = header_str(headers, SITE_USER_HEADER)
        .or_else(|| query.and_then(|q| q.user.as_deref()))
        .ok_or_else(|| unauthorized(state, route, "site user"))?;
    let user = authenticate(state, headers, key, login, route)?;
    Ok(Caller::from(&user))
}

fn parse_job_id(raw: &str) -> Result<JobId, ApiError> {
    JobId::parse(raw).map_err(|_| ApiError::no_such_job())
}

pub(crate) fn json_body<T: serde::de::DeserializeOwned>(body: Result<Bytes, BytesRejection>) -> Result<T, ApiError> {
    let bytes = body.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::payload_too_large(e.body_text())
        } else {
            ApiError::bad_request(e.body_text())
        }
    })?;
    let value: Value =
        serde_json::from_slice(&bytes).map_err(|e| ApiError::bad_request(format!("invalid JSON: {e}")))?;
    serde_json::from_value(value).map_err(|e| ApiError::validation(e.to_string()))
}

/// Accepts the metadata either as a JSON object or as a string holding one.
fn decode_meta(state: &AppState, meta: &Value) -> Result<JobMetadata, ApiError> {
    Ok(match meta {
        Value::String(text) => state.codec.parse(text)?,
        other => state.codec.from_value(other)?,
    })
}

/// Overwrites the client-supplied address and hostname with what the
/// connection shows.
fn fill_connection(state: &AppState, headers: &HeaderMap, ext: &Extensions, m: &mut JobMetadata) {
    let forwarded = state
        .trust_forwarded_for
        .then(|| header_str(headers, "x-forwarded-for"))
        .flatten()
        .and_then(|v| v.split(',').next())
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty());
    let peer = ext.get::<ConnectInfo<SocketAddr>>().map(|c| c.0.ip().to_string());
    m.address = forwarded.or(peer);
    m.hostname = header_str(headers, header::ORIGIN.as_str())
        .and_then(|o| o.parse::<Uri>().ok())
        .and_then(|u| u.host().map(str::to_owned));
}

fn started(s: Started, status: StatusCode) -> Response {
    (status, Json(json!({ "jobId": s.job_id, "fromSeq": s.from_seq }))).into_response()
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub(crate) struct OneShotRequest {
    meta: Value,
    command: String,
    #[serde(default)]
    job_id: Option<String>,
}

pub(crate) async fn one_shot(
    State(state): State<AppState>,
    headers: HeaderMap,
    ext: Extensions,
    body: Result<Bytes, BytesRejection>,
) -> Result<Response, ApiError> {
    const ROUTE: &str = "one-shot";
    let key = site_key(&state, &headers, None, ROUTE)?;
    let req: OneShotRequest = json_body(body)?;
    let mut meta = decode_meta(&state, &req.meta)?;
    let user = authenticate(&state, &headers, key, &meta.user, ROUTE)?;
    fill_connection(&state, &headers, &ext, &mut meta);
    let existing = req.job_id.as_deref().map(parse_job_id).transpose()?;
    let s = state
        .jobs
        .run_one_shot(&Caller::from(&user), &meta, &req.command, existing.as_ref())?;
    Ok(started(s, StatusCode::OK))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub(crate) struct SessionRequest {
    meta: Value,
    #[serde(default)]
    actions: ActionSet,
    #[serde(default)]
    main: Option<String>,
}

pub(crate) async fn create_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    ext: Extensions,
    body: Result<Bytes, BytesRejection>,
) -> Result<Response, ApiError> {
    const ROUTE: &str = "sessions";
    let key = site_key(&state, &headers, None, ROUTE)?;
    let req: SessionRequest = json_body(body)?;
    let mut meta = decode_meta(&state, &req.meta)?;
    let user = authenticate(&state, &headers, key, &meta.user, ROUTE)?;
    fill_connection(&state, &headers, &ext, &mut meta);
    let id = state
        .jobs
        .create_session(&Caller::from(&user), &meta, req.actions, req.main)?;
    Ok(Json(json!({ "jobId": id })).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct FilesRequest {
    files: BTreeMap<String, String>,
}

pub(crate) async fn stage_files(
    State(state): State<AppState>,
    Path(job_id): Path<String>,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> Result<StatusCode, ApiError> {
    let caller = caller_from_headers(&state, &headers, None, "files")?;
    let id = parse_job_id(&job_id)?;
    let req: FilesRequest = json_body(body)?;
    let mut files = BTreeMap::new();
    for (name, data) in req.files {
        let bytes = B64
            .decode(data.as_bytes())
            .map_err(|e| ApiError::validation(format!("file {name:?} is not base64: {e}")))?;
        files.insert(name, bytes);
    }
    let jobs = state.jobs.clone();
    tokio::task::spawn_blocking(move || jobs.stage_files(&caller, &id, &files))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(StatusCode::NO_CONTENT)
}

pub(crate) async fn run_action(
    State(state): State<AppState>,
    Path((job_id, name)): Path<(String, String)>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let caller = caller_from_headers(&state, &headers, None, "actions")?;
    let id = parse_job_id(&job_id)?;
    let s = state.jobs.run_action(&caller, &id, &name)?;
    Ok(started(s, StatusCode::ACCEPTED))
}

/// SSE `data:` payload for one event.
pub fn event_data(e: &JobEvent) -> Value {
    let payload = match &e.body {
        EventBody::Stdout(b) | EventBody::Stderr(b) => Value::String(B64.encode(b)),
        EventBody::Exit(code) => json!(code),
        EventBody::Notice(s) | EventBody::Error(s) => Value::String(s.clone()),
    };
    json!({ "payload": payload, "timestamp": e.timestamp })
}

fn sse_event(e: &JobEvent) -> Event {
    Event::default()
        .event(e.kind().as_str())
        .id(e.seq.to_string())
        .data(event_data(e).to_string())
}

pub(crate) async fn events(
    State(state): State<AppState>,
    Path(job_id): Path<String>,
    Query(query): Query<AuthQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let caller = caller_from_headers(&state, &headers, Some(&query), "events")?;
    let id = parse_job_id(&job_id)?;
    let resume = header_str(&headers, "last-event-id")
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(|last| last + 1);
    let from = resume.or(query.from).unwrap_or(0);
    let stream = state.jobs.subscribe(&caller, &id, from)?;
    Ok(Sse::new(stream.map(|e| Ok(sse_event(&e)))).keep_alive(KeepAlive::default()))
}

pub(crate) async fn healthz(State(state): State<AppState>) -> Response {
    let report = state.health.check();
    let status = if report.healthy() {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    (status, Json(report)).into_response()
}
