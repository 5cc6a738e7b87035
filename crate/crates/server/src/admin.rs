use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::Json;
use ccrs_core::audit::{AuditError, AuditEvent, AuditRecord, Severity};
use ccrs_core::model::JobId;
use ccrs_core::sites::SiteRegistration;
use serde::Deserialize;
use serde_json::{json, Value};
use subtle::ConstantTimeEq;

use crate::api::json_body;
use crate::error::ApiError;
use crate::{AppState, ADMIN_KEY_HEADER};

fn require_admin(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(given) = headers.get(ADMIN_KEY_HEADER) else {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing admin key"));
    };
    let ok = state
        .admin_key
        .as_deref()
        .is_some_and(|k| bool::from(k.as_bytes().ct_eq(given.as_bytes())));
    if ok {
        return Ok(());
    }
    state.jobs.audit().record(
        AuditRecord::new(AuditEvent::AuthRejected, state.jobs.now())
            .severity(Severity::Warn)
            .detail("route", "admin")
            .detail("reason", "wrong admin key"),
    );
    Err(ApiError::new(StatusCode::FORBIDDEN, "forbidden", "admin key rejected"))
}

pub(crate) async fn register_site(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<Value>, ApiError> {
    require_admin(&state, &headers)?;
    let reg: SiteRegistration = json_body(body)?;
    let site_id = reg.site_id.clone();
    let sites = state.sites.clone();
    tokio::task::spawn_blocking(move || sites.register_site(reg))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let site = state.sites.get(&site_id).ok_or_else(|| ApiError::internal("site vanished"))?;
    Ok(Json(json!({
        "siteId": site.site_id,
        "userPrefix": site.user_prefix,
        "enabled": site.enabled,
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct EnabledRequest {
    enabled: bool,
}

pub(crate) async fn set_enabled(
    State(state): State<AppState>,
    Path(site_id): Path<String>,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<Value>, ApiError> {
    require_admin(&state, &headers)?;
    let req: EnabledRequest = json_body(body)?;
    let sites = state.sites.clone();
    let id = site_id.clone();
    tokio::task::spawn_blocking(move || sites.set_enabled(&id, req.enabled))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let killed = if req.enabled {
        0
    } else {
        state.jobs.site_disabled(&site_id)
    };
    Ok(Json(json!({
        "siteId": site_id,
        "enabled": req.enabled,
        "killedJobs": killed,
    })))
}

pub(crate) async fn job_audit(
    State(state): State<AppState>,
    Path(job_id): Path<String>,
    headers: HeaderMap,
) -> Result<Json<Value>, ApiError> {
    require_admin(&state, &headers)?;
    let id = JobId::parse(&job_id).map_err(|_| ApiError::no_such_job())?;
    let jobs = state.jobs.clone();
    let q = id.clone();
    let records = tokio::task::spawn_blocking(move || {
        jobs.audit().flush();
        jobs.audit().query(&q)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;
    match records {
        Ok(records) => Ok(Json(json!({ "jobId": id, "records": records }))),
        Err(AuditError::UnknownJob(_)) => Err(ApiError::no_such_job()),
        Err(e) => Err(ApiError::internal(e.to_string())),
    }
}
