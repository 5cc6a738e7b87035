mod common;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;

use axum::extract::ConnectInfo;
use axum::http::StatusCode;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ccrs_core::executor::MockStep;
use ccrs_core::model::{ContainerType, JobId};
use ccrs_server::{router, HealthProbe};
use common::*;
use serde_json::{json, Value};

fn golden_argv(name: &str, ctx: &str) -> Vec<String> {
    std::fs::read_to_string(testdata(&format!("argv/{name}.golden")))
        .unwrap()
        .lines()
        .map(|l| l.replace("{context}", ctx))
        .collect()
}

#[tokio::test]
async fn canonical_listing_one_shot() {
    let s = mock_server();
    let body = json!({ "meta": serde_json::from_str::<Value>(&canonical_meta_text()).unwrap(), "command": "pwd" });
    let r = send(&s.app, Call::post("/api/v1/one-shot").key(CVW_KEY).json(&body)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    let id = r.job_id();
    assert_eq!(id.len(), 26);
    let ctx = s.spool().join("cvw").join(&id);
    assert_eq!(s.mock().last_argv().unwrap(), golden_argv("image-per-job-pwd", ctx.to_str().unwrap()));
}

#[tokio::test]
async fn meta_may_be_sent_as_a_string() {
    let s = mock_server();
    let body = json!({ "meta": canonical_meta_text(), "command": "pwd" });
    let r = send(&s.app, Call::post("/api/v1/one-shot").key(CVW_KEY).json(&body)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
}

#[tokio::test]
async fn one_shot_errors() {
    let s = mock_server();
    let body = json!({ "meta": local_meta("alice"), "command": "ls" });

    let r = send(&s.app, Call::post("/api/v1/one-shot").json(&body)).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    assert_eq!(r.json()["error"], "unauthorized");

    let r = send(&s.app, Call::post("/api/v1/one-shot").key("nope").json(&body)).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);

    let r = one_shot(&s.app, CVW_KEY, "alice", "").await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let r = one_shot(&s.app, CVW_KEY, "Bad User", "ls").await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let r = send(&s.app, Call::post("/api/v1/one-shot").key(CVW_KEY).raw("{not json")).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    let r = send(&s.app, Call::post("/api/v1/one-shot").key(CVW_KEY).json(&json!({"command": "ls"}))).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let mut meta = local_meta("alice");
    meta["$type"] = json!("com.example.SysJobMetaData");
    let r = send(
        &s.app,
        Call::post("/api/v1/one-shot").key(CVW_KEY).json(&json!({"meta": meta, "command": "ls"})),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let r = send(
        &s.app,
        Call::post("/api/v1/one-shot")
            .key(CVW_KEY)
            .header("origin", OTHER_ORIGIN)
            .json(&body),
    )
    .await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);

    let r = send(
        &s.app,
        Call::post("/api/v1/one-shot")
            .key(CVW_KEY)
            .header("origin", CVW_ORIGIN)
            .json(&body),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
}

#[tokio::test]
async fn running_quota_is_429() {
    let s = mock_server_with(Options {
        job: Box::new(|c| c.max_running_per_user = 2),
        ..Options::default()
    });
    s.mock().set_default_script(vec![MockStep::Hold]);
    for _ in 0..2 {
        assert_eq!(one_shot(&s.app, CVW_KEY, "alice", "sleep").await.status, StatusCode::OK);
    }
    let r = one_shot(&s.app, CVW_KEY, "alice", "sleep").await;
    assert_eq!(r.status, StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(one_shot(&s.app, CVW_KEY, "bob", "sleep").await.status, StatusCode::OK);
}

#[tokio::test]
async fn server_fills_address_and_hostname() {
    let s = mock_server();
    let mut meta = local_meta("alice");
    meta["address"] = json!(["6.6.6.6"]);
    meta["hostname"] = json!(["spoofed"]);
    let mut req = Call::post("/api/v1/one-shot")
        .key(CVW_KEY)
        .header("origin", CVW_ORIGIN)
        .json(&json!({"meta": meta, "command": "ls"}));
    let peer: SocketAddr = "10.1.2.3:5555".parse().unwrap();
    req.extensions_mut().insert(ConnectInfo(peer));
    let r = send(&s.app, req).await;
    assert_eq!(r.status, StatusCode::OK);
    let id = JobId::parse(&r.job_id()).unwrap();
    s.state.jobs.audit().flush();
    let created = &s.state.jobs.audit().query(&id).unwrap()[0];
    assert_eq!(created.detail["clientAddress"], "10.1.2.3");
    assert_eq!(created.detail["clientHostname"], "cvw.example.edu");
}

#[tokio::test]
async fn rerun_in_existing_context() {
    let s = mock_server();
    let id = one_shot(&s.app, CVW_KEY, "alice", "touch a").await.job_id();
    let _ = events(&s.app, CVW_KEY, "alice", &id, 0).await;
    let body = json!({ "meta": local_meta("alice"), "command": "ls", "jobId": id });
    let r = send(&s.app, Call::post("/api/v1/one-shot").key(CVW_KEY).json(&body)).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.job_id(), id);
    let specs = s.mock().recorded();
    assert_eq!(specs[0].working_dir, specs[1].working_dir);

    let foreign = json!({ "meta": local_meta("mallory"), "command": "ls", "jobId": id });
    let r = send(&s.app, Call::post("/api/v1/one-shot").key(OTHER_KEY).json(&foreign)).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

async fn create_session(app: &axum::Router, actions: Value) -> String {
    let body = json!({ "meta": local_meta("alice"), "actions": actions });
    let r = send(app, Call::post("/api/v1/sessions").key(CVW_KEY).json(&body)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    r.job_id()
}

fn files(pairs: &[(&str, &[u8])]) -> Value {
    let m: BTreeMap<&str, String> = pairs.iter().map(|(n, b)| (*n, B64.encode(b))).collect();
    json!({ "files": m })
}

async fn put_files(app: &axum::Router, id: &str, body: &Value) -> Reply {
    send(
        app,
        Call::put(&format!("/api/v1/sessions/{id}/files"))
            .key(CVW_KEY)
            .user("alice")
            .json(body),
    )
    .await
}

async fn act(app: &axum::Router, id: &str, name: &str) -> Reply {
    send(
        app,
        Call::post(&format!("/api/v1/sessions/{id}/actions/{name}"))
            .key(CVW_KEY)
            .user("alice")
            .empty(),
    )
    .await
}

#[tokio::test]
async fn session_endpoints() {
    let s = mock_server();
    let id = create_session(&s.app, json!({"run": "python {main}"})).await;

    let mut meta = local_meta("alice");
    meta["containerId"] = json!([id]);
    let r = send(
        &s.app,
        Call::post("/api/v1/sessions").key(CVW_KEY).json(&json!({"meta": meta, "actions": {}})),
    )
    .await;
    assert_eq!(r.job_id(), id);

    let r = send(
        &s.app,
        Call::post("/api/v1/sessions")
            .key(CVW_KEY)
            .json(&json!({"meta": local_meta("alice"), "actions": {"run": "cat {bogus}"}})),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    assert_eq!(put_files(&s.app, &id, &files(&[("hello.py", b"print(1)")])).await.status, StatusCode::NO_CONTENT);
    let r = put_files(&s.app, &id, &files(&[("../x", b"x")])).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["error"], "path_escape");
    let r = put_files(&s.app, &id, &json!({"files": {"a": "!!not base64!!"}})).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let ctx = s.spool().join("cvw").join(&id);
    assert_eq!(std::fs::read(ctx.join("hello.py")).unwrap(), b"print(1)");

    let r = act(&s.app, &id, "run").await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    assert_eq!(r.job_id(), id);
    assert_eq!(s.mock().last_argv().unwrap().last().unwrap(), "python hello.py");

    assert_eq!(act(&s.app, &id, "deploy").await.status, StatusCode::NOT_FOUND);

    let r = send(
        &s.app,
        Call::post(&format!("/api/v1/sessions/{id}/actions/run")).key(CVW_KEY).empty(),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn busy_session_is_409() {
    let s = mock_server();
    s.mock().set_default_script(vec![MockStep::Hold]);
    let id = create_session(&s.app, json!({"run": "sleep 100"})).await;
    assert_eq!(act(&s.app, &id, "run").await.status, StatusCode::ACCEPTED);
    let r = act(&s.app, &id, "run").await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["error"], "busy");
    assert_eq!(put_files(&s.app, &id, &files(&[("a", b"1")])).await.status, StatusCode::CONFLICT);
}

/// The body limit oracle: a request is refused with 413 exactly when its
/// encoded size exceeds the configured limit.
#[tokio::test]
async fn upload_size_threshold() {
    let limit = 4096;
    let s = mock_server_with(Options {
        max_upload_bytes: limit,
        ..Options::default()
    });
    let id = create_session(&s.app, json!({"run": "cat {main}"})).await;
    let body_for = |n: usize| files(&[("f.txt", &vec![b'a'; n])]).to_string();
    let mut n = 0;
    while body_for(n + 1).len() <= limit {
        n += 1;
    }
    for size in [0, n / 2, n, n + 1, n + 3, 3 * n] {
        let body = body_for(size);
        let expected_ok = body.len() <= limit;
        let r = send(
            &s.app,
            Call::put(&format!("/api/v1/sessions/{id}/files"))
                .key(CVW_KEY)
                .user("alice")
                .header("content-type", "application/json")
                .raw(body.clone()),
        )
        .await;
        let expected = if expected_ok {
            StatusCode::NO_CONTENT
        } else {
            StatusCode::PAYLOAD_TOO_LARGE
        };
        assert_eq!(r.status, expected, "body of {} bytes, limit {limit}", body.len());
    }
}

#[tokio::test]
async fn context_quota_is_413() {
    let s = mock_server_with(Options {
        job: Box::new(|c| c.default_limits.max_context_bytes = 100),
        ..Options::default()
    });
    let id = create_session(&s.app, json!({"run": "ls"})).await;
    assert_eq!(put_files(&s.app, &id, &files(&[("a", &[0; 100])])).await.status, StatusCode::NO_CONTENT);
    let r = put_files(&s.app, &id, &files(&[("b", &[0; 1])])).await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(put_files(&s.app, &id, &files(&[("a", &[0; 50]), ("b", &[0; 50])])).await.status, StatusCode::NO_CONTENT);
}

#[tokio::test]
async fn completed_job_replays_to_exit() {
    let s = mock_server();
    s.mock().set_default_script(vec![
        MockStep::stdout("out\n"),
        MockStep::Stderr(b"err\n".to_vec()),
        MockStep::Exit(3),
    ]);
    let id = one_shot(&s.app, CVW_KEY, "alice", "x").await.job_id();
    let (status, ev) = events(&s.app, CVW_KEY, "alice", &id, 0).await;
    assert_eq!(status, StatusCode::OK);
    let kinds: Vec<&str> = ev.iter().map(|e| e.event.as_str()).collect();
    assert_eq!(kinds, ["stdout", "stderr", "exit"]);
    assert_eq!(ev[0].bytes(), b"out\n");
    assert_eq!(ev[1].bytes(), b"err\n");
    assert_eq!(ev[2].data["payload"], 3);
    assert_eq!(ev[2].data["timestamp"], 1_700_000_000_000u64);
    assert_eq!(ev.iter().map(|e| e.id).collect::<Vec<_>>(), [0, 1, 2]);

    let (_, tail) = events(&s.app, CVW_KEY, "alice", &id, 2).await;
    assert_eq!(tail, ev[2..]);
}

#[tokio::test]
async fn sse_headers_and_query_auth() {
    let s = mock_server();
    let id = one_shot(&s.app, CVW_KEY, "alice", "x").await.job_id();
    let r = send(
        &s.app,
        Call::get(&format!("/api/v1/jobs/{id}/events?from=0&key={CVW_KEY}&user=alice")).empty(),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers["content-type"], "text/event-stream");
    assert_eq!(parse_sse(&r.text()).last().unwrap().event, "exit");
}

/// Sequence-diff oracle: for every resume point, the events received before
/// the break plus those after reconnecting equal the uninterrupted stream.
#[tokio::test]
async fn last_event_id_resume_has_no_gaps_or_duplicates() {
    let s = mock_server();
    let script: Vec<MockStep> = (0..40)
        .map(|i| {
            if i % 3 == 0 {
                MockStep::Stderr(format!("e{i}\n").into_bytes())
            } else {
                MockStep::stdout(format!("o{i}\n"))
            }
        })
        .chain([MockStep::Exit(0)])
        .collect();
    s.mock().set_default_script(script);
    let id = one_shot(&s.app, CVW_KEY, "alice", "x").await.job_id();
    let (_, full) = events(&s.app, CVW_KEY, "alice", &id, 0).await;
    assert_eq!(full.len(), 41);
    for cut in 0..full.len() {
        let before = &full[..=cut];
        let r = send(
            &s.app,
            Call::get(&format!("/api/v1/jobs/{id}/events?from=0"))
                .key(CVW_KEY)
                .user("alice")
                .header("last-event-id", &before.last().unwrap().id.to_string())
                .empty(),
        )
        .await;
        let after = parse_sse(&r.text());
        let joined: Vec<u64> = before.iter().chain(&after).map(|e| e.id).collect();
        let expected: Vec<u64> = full.iter().map(|e| e.id).collect();
        assert_eq!(joined, expected, "cut after {cut}");
        assert_eq!([before, &after[..]].concat(), full);
    }
}

#[tokio::test]
async fn live_stream_resumes_mid_run() {
    let s = process_server();
    let cmd = "for i in $(seq 1 20); do echo line$i; sleep 0.02; done";
    let id = one_shot(&s.app, CVW_KEY, "alice", cmd).await.job_id();
    tokio::time::sleep(Duration::from_millis(150)).await;
    let (_, early) = events(&s.app, CVW_KEY, "alice", &id, 0).await;
    let (_, full) = events(&s.app, CVW_KEY, "alice", &id, 0).await;
    assert_eq!(early, full);
    let lines: String = full
        .iter()
        .filter(|e| e.event == "stdout")
        .map(|e| String::from_utf8(e.bytes()).unwrap())
        .collect();
    let expected: String = (1..=20).map(|i| format!("line{i}\n")).collect();
    assert_eq!(lines, expected);
}

#[tokio::test]
async fn unknown_and_foreign_jobs_are_404() {
    let s = mock_server();
    let id = one_shot(&s.app, CVW_KEY, "alice", "x").await.job_id();
    let unknown = JobId::from_parts(1, 1).to_string();
    for (key, user, job) in [
        (CVW_KEY, "alice", unknown.as_str()),
        (CVW_KEY, "alice", "not-an-id"),
        (CVW_KEY, "bob", id.as_str()),
        (OTHER_KEY, "alice", id.as_str()),
    ] {
        let (status, ev) = events(&s.app, key, user, job, 0).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{key} {user} {job}");
        assert!(ev.is_empty());
    }
}

#[tokio::test]
async fn first_sse_byte_within_a_second() {
    let s = process_server();
    let started = std::time::Instant::now();
    let id = one_shot(&s.app, CVW_KEY, "alice", "echo hi").await.job_id();
    let req = Call::get(&format!("/api/v1/jobs/{id}/events"))
        .key(CVW_KEY)
        .user("alice")
        .empty();
    use http_body_util::BodyExt;
    use tower::ServiceExt;
    let res = s.app.clone().oneshot(req).await.unwrap();
    let mut body = res.into_body();
    let frame = tokio::time::timeout(Duration::from_secs(1), body.frame())
        .await
        .expect("no SSE byte within 1 s");
    assert!(frame.is_some());
    assert!(started.elapsed() < Duration::from_secs(1));
}

#[tokio::test]
async fn cors_headers_only_for_known_origins() {
    let s = mock_server();
    let r = send(&s.app, Call::get("/healthz").header("origin", CVW_ORIGIN).empty()).await;
    assert_eq!(r.headers["access-control-allow-origin"], CVW_ORIGIN);
    let r = send(&s.app, Call::get("/healthz").header("origin", "https://evil.example").empty()).await;
    assert!(r.headers.get("access-control-allow-origin").is_none());

    let preflight = Call::new(axum::http::Method::OPTIONS, "/api/v1/one-shot")
        .header("origin", OTHER_ORIGIN)
        .header("access-control-request-method", "POST")
        .header("access-control-request-headers", "x-site-key,content-type")
        .empty();
    let r = send(&s.app, preflight).await;
    assert_eq!(r.headers["access-control-allow-origin"], OTHER_ORIGIN);
    let allowed = r.headers["access-control-allow-headers"].to_str().unwrap().to_owned();
    assert!(allowed.contains("x-site-key"), "{allowed}");

    s.state.sites.set_enabled("other", false).unwrap();
    let r = send(&s.app, Call::get("/healthz").header("origin", OTHER_ORIGIN).empty()).await;
    assert!(r.headers.get("access-control-allow-origin").is_none());
}

#[tokio::test]
async fn healthz() {
    let s = mock_server();
    let spool = s.spool();
    let state = s.state.clone().with_health(HealthProbe::new(vec![ContainerType::LocalSandbox], "/usr/bin:/bin", &spool));
    let r = send(&router(state), Call::get("/healthz").empty()).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    assert_eq!(r.json()["status"], "ok");
    assert_eq!(r.json()["backends"][0]["name"], "LocalSandbox");

    let broken = s
        .state
        .clone()
        .with_health(HealthProbe::new(vec![ContainerType::ImagePerJob], "/usr/bin:/bin", &spool));
    let r = send(&router(broken), Call::get("/healthz").empty()).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
    let body = r.json();
    assert_eq!(body["status"], "degraded");
    assert_eq!(body["backends"][0]["ok"], false);
}

#[tokio::test]
async fn static_assets_are_served() {
    let s = mock_server();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ccrs-client.js"), "console.log(1)").unwrap();
    let mut state = s.state.clone();
    state.static_dir = Some(dir.path().to_path_buf());
    let r = send(&router(state), Call::get("/static/ccrs-client.js").empty()).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.text(), "console.log(1)");
}

fn admin(call: Call) -> Call {
    call.header("x-admin-key", ADMIN_KEY)
}

#[tokio::test]
async fn admin_auth() {
    let s = mock_server();
    let reg = json!({"siteId": "new", "apiKey": "k", "userPrefix": "nw"});
    let r = send(&s.app, Call::post("/admin/sites").json(&reg)).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    let r = send(&s.app, Call::post("/admin/sites").header("x-admin-key", CVW_KEY).json(&reg)).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    let r = send(&s.app, admin(Call::post("/admin/sites")).json(&reg)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    assert_eq!(r.json()["siteId"], "new");
    let r = send(&s.app, admin(Call::post("/admin/sites")).json(&reg)).await;
    assert_eq!(r.status, StatusCode::OK);

    let clash = json!({"siteId": "new2", "apiKey": "k2", "userPrefix": "nw"});
    assert_eq!(send(&s.app, admin(Call::post("/admin/sites")).json(&clash)).await.status, StatusCode::CONFLICT);
    let bad = json!({"siteId": "x", "apiKey": "k3", "userPrefix": "9bad"});
    assert_eq!(send(&s.app, admin(Call::post("/admin/sites")).json(&bad)).await.status, StatusCode::UNPROCESSABLE_ENTITY);

    assert_eq!(one_shot(&s.app, "k", "alice", "ls").await.status, StatusCode::OK);
}

#[tokio::test]
async fn disabling_a_site_kills_and_locks_out() {
    let s = mock_server();
    s.mock().set_default_script(vec![MockStep::Hold]);
    let id = one_shot(&s.app, CVW_KEY, "alice", "sleep").await.job_id();
    let other = one_shot(&s.app, OTHER_KEY, "alice", "sleep").await.job_id();

    let r = send(
        &s.app,
        admin(Call::post("/admin/sites/cvw/enabled")).json(&json!({"enabled": false})),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["killedJobs"], 1);

    assert_eq!(one_shot(&s.app, CVW_KEY, "alice", "ls").await.status, StatusCode::UNAUTHORIZED);
    let (_, ev) = events(&s.app, OTHER_KEY, "alice", &id, 0).await;
    assert!(ev.is_empty());
    let jid = JobId::parse(&id).unwrap();
    let deadline = std::time::Instant::now() + Duration::from_secs(2);
    let state = loop {
        let state = s.state.jobs.info_any(&jid).unwrap().state;
        if state != ccrs_core::jobs::JobState::Running || std::time::Instant::now() > deadline {
            break state;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    };
    assert_eq!(state, ccrs_core::jobs::JobState::Failed { reason: "killed: site-disabled".into() });
    let other_info = s.state.jobs.info_any(&JobId::parse(&other).unwrap()).unwrap();
    assert_eq!(other_info.state, ccrs_core::jobs::JobState::Running);

    let r = send(
        &s.app,
        admin(Call::post("/admin/sites/cvw/enabled")).json(&json!({"enabled": true})),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(one_shot(&s.app, CVW_KEY, "alice", "ls").await.status, StatusCode::OK);

    let r = send(
        &s.app,
        admin(Call::post("/admin/sites/nosuch/enabled")).json(&json!({"enabled": false})),
    )
    .await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn admin_audit_of_finished_job() {
    let s = mock_server();
    let id = one_shot(&s.app, CVW_KEY, "alice", "echo").await.job_id();
    let _ = events(&s.app, CVW_KEY, "alice", &id, 0).await;
    let r = send(&s.app, admin(Call::get(&format!("/admin/jobs/{id}/audit"))).empty()).await;
    assert_eq!(r.status, StatusCode::OK);
    let records = r.json()["records"].as_array().unwrap().clone();
    assert!(records.len() >= 3, "{records:?}");
    let names: Vec<&str> = records.iter().map(|r| r["event"].as_str().unwrap()).collect();
    assert_eq!(names, ["job.created", "job.spawned", "job.exited"]);

    let unknown = JobId::from_parts(5, 5);
    let r = send(&s.app, admin(Call::get(&format!("/admin/jobs/{unknown}/audit"))).empty()).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = send(&s.app, Call::get(&format!("/admin/jobs/{id}/audit")).key(CVW_KEY).empty()).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn rejected_auth_is_audited() {
    let s = mock_server();
    let _ = one_shot(&s.app, "wrong", "alice", "ls").await;
    let _ = send(
        &s.app,
        Call::post("/api/v1/one-shot")
            .key(CVW_KEY)
            .header("origin", "https://evil.example")
            .json(&json!({"meta": local_meta("alice"), "command": "ls"})),
    )
    .await;
    s.state.jobs.audit().flush();
    let all = s.state.jobs.audit().read_all().unwrap();
    let rejected: Vec<_> = all.iter().filter(|r| r.event.as_str() == "auth.rejected").collect();
    assert_eq!(rejected.len(), 2);
    assert_eq!(rejected[1].site_id.as_deref(), Some("cvw"));
}
