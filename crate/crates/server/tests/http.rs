use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use codelkt::data::Language;
use codelkt::llm::StubLlm;
use codelkt::service::{Judge, JudgeUnavailable, Problem, ProblemBank, ReferencePredicate, Service};

const CORRECTNESS_ANSWER: &str = "1. Positive feedback:\nGood.\n\n2. Analysis about the answer:\nFine.\n\n\
3. Correction of the answer / Tips for improvement:\nNone.\n\n4. Next challenge:\nTry p1.\n\n\
5. comments for cheering up:\nKeep going!";
const HINT_ANSWER: &str = "1. Positive feedback:\nNice.\n\n2. Related past history:\nNone yet.\n\n\
3. Similar problems:\nCounting.\n\n4. Key notions of the problem:\nLoops.";

fn bank() -> ProblemBank {
    let p = |i: usize, r: &str| Problem {
        question_id: format!("p{i}"),
        kc_id: "loops".into(),
        kc_text: "for loops".into(),
        question_text: format!("Exercise {i}"),
        language: Language::Python,
        reference: ReferencePredicate::Contains(r.into()),
    };
    ProblemBank::new(vec![p(0, "for"), p(1, "while")]).unwrap()
}

fn stub() -> StubLlm {
    StubLlm::new().with_rule("Analysis about the answer", CORRECTNESS_ANSWER).with_default(HINT_ANSWER)
}

fn app(dir: &std::path::Path) -> Router {
    let service = Service::builder(bank(), Box::new(stub())).open(dir).unwrap();
    codelkt_server::router(Arc::new(service), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn session_lifecycle_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());

    let (status, problems) = call(&app, "GET", "/problems", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(problems.as_array().unwrap().len(), 2);
    assert!(problems[0].get("reference").is_none());

    let (status, s) = call(&app, "POST", "/sessions", Some(json!({"student_id": "amy"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = s["session_id"].as_str().unwrap().to_string();
    assert_eq!(s["current_problem"]["question_id"], "p0");

    let (_, h) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    assert_eq!(h["interactions"].as_array().unwrap().len(), 0);
    assert_eq!(h["events"][0]["event_type"], "session_created");

    let (status, hint) = call(&app, "POST", &format!("/sessions/{id}/hint"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(hint["feedback"]["components"].as_object().unwrap().len(), 4);

    let (status, r) = call(&app, "POST", &format!("/sessions/{id}/submit"), Some(json!({"code": "for i in x: pass"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(r["correct"], true);
    assert!(r["feedback"]["components"].get("Next challenge").is_some());
    assert_eq!(r["next_problem"]["question_id"], "p1");

    let (_, h) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    assert_eq!(h["interactions"].as_array().unwrap().len(), 1);
    let types: Vec<&str> = h["events"].as_array().unwrap().iter().map(|e| e["event_type"].as_str().unwrap()).collect();
    assert!(types.contains(&"submitted") && types.contains(&"feedback_returned"));

    let (_, s) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s["current_problem"]["question_id"], "p1");
}

#[tokio::test]
async fn errors_use_the_common_body() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());

    let (status, e) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(e["code"], "session_not_found");
    assert!(e["message"].is_string());
    assert!(e.get("detail").is_some());

    let (status, e) = call(&app, "POST", "/sessions", Some(json!({"name": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e["code"], "invalid_request");

    let (_, s) = call(&app, "POST", "/sessions", Some(json!({"student_id": "bo"}))).await;
    let id = s["session_id"].as_str().unwrap();
    let (status, e) = call(&app, "POST", &format!("/sessions/{id}/submit"), Some(json!({"code": "  "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e["code"], "invalid_request");

    call(&app, "POST", &format!("/sessions/{id}/submit"), Some(json!({"code": "nope"}))).await;
    let (status, e) = call(&app, "POST", &format!("/sessions/{id}/hint"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(e["code"], "hint_after_submission");
}

struct Offline;
impl Judge for Offline {
    fn judge(&self, _: &Problem, _: &str) -> Result<bool, JudgeUnavailable> {
        Err(JudgeUnavailable("grader offline".into()))
    }
}

#[tokio::test]
async fn judge_outage_is_503() {
    let dir = tempfile::tempdir().unwrap();
    let service = Service::builder(bank(), Box::new(stub())).judge(Offline).open(dir.path()).unwrap();
    let app = codelkt_server::router(Arc::new(service), None);
    let (_, s) = call(&app, "POST", "/sessions", Some(json!({"student_id": "cy"}))).await;
    let id = s["session_id"].as_str().unwrap();
    let (status, e) = call(&app, "POST", &format!("/sessions/{id}/submit"), Some(json!({"code": "for"}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(e["code"], "judge_unavailable");
    let (_, h) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    assert_eq!(h["events"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn concurrent_duplicate_submits_record_once() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (_, s) = call(&app, "POST", "/sessions", Some(json!({"student_id": "di"}))).await;
    let id = s["session_id"].as_str().unwrap().to_string();
    let mut tasks = Vec::new();
    for _ in 0..8 {
        let app = app.clone();
        let uri = format!("/sessions/{id}/submit");
        tasks.push(tokio::spawn(async move {
            call(&app, "POST", &uri, Some(json!({"code": "x = 1", "question_id": "p0"}))).await
        }));
    }
    let mut fresh = 0;
    for t in tasks {
        let (status, r) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        if r["replayed"] == false {
            fresh += 1;
        }
    }
    assert_eq!(fresh, 1);
    let (_, h) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    assert_eq!(h["interactions"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn static_assets_under_app() {
    let dir = tempfile::tempdir().unwrap();
    let assets = tempfile::tempdir().unwrap();
    std::fs::write(assets.path().join("index.html"), "<html></html>").unwrap();
    let service = Service::builder(bank(), Box::new(stub())).open(dir.path()).unwrap();
    let app = codelkt_server::router(Arc::new(service), Some(assets.path().to_path_buf()));
    let resp = app.clone().oneshot(Request::get("/app/").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let resp = app.oneshot(Request::get("/app/../secret").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
}
