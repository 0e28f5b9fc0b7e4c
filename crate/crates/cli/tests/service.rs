use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use strata::config::ExperimentConfig;
use strata::pipeline::{run_training, Models};
use strata_cli::server::router;
use tower::ServiceExt;

fn models() -> Arc<Models> {
    static MODELS: OnceLock<(tempfile::TempDir, Arc<Models>)> = OnceLock::new();
    MODELS
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let mut c = ExperimentConfig::smoke();
            c.output_dir = dir.path().to_path_buf();
            let m = run_training(&c).unwrap();
            (dir, Arc::new(m))
        })
        .1
        .clone()
}

fn app() -> Router {
    router(models())
}

async fn call(app: Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v, bytes)
}

const FIG1: &str = "a person walks forward, turns around, and then walks back to the starting position.";

#[tokio::test]
async fn health_reports_checkpoint_hashes() {
    let (s, v, _) = call(app(), "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let ck = v["checkpoints"].as_object().unwrap();
    assert!(ck.contains_key("diffusion/denoiser.ckpt"));
    assert_eq!(ck.len(), 4);
}

#[tokio::test]
async fn parse_returns_the_graph() {
    let (s, v, _) = call(app(), "POST", "/parse", Some(json!({ "text": FIG1 }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let actions = v["graph"]["nodes"].as_array().unwrap().iter().filter(|n| n["level"] == "action").count();
    assert_eq!(actions, 3);
}

#[tokio::test]
async fn schema_violations_are_400() {
    let (s, v, _) = call(app(), "POST", "/parse", Some(json!({ "txt": "a person walks." }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "bad_request");
    let (s, _, _) = call(app(), "POST", "/generate", Some(json!({ "seed": 1 }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _, _) = call(app(), "POST", "/generate", Some(json!({ "text": "a person walks.", "sampler": { "steps": [0, 1, 1] } }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _, _) = call(app(), "POST", "/parse", Some(json!({ "text": "" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn generate_is_deterministic_and_inlines_frames() {
    let body = json!({ "text": "a person walks to the left.", "seed": 3 });
    let (s, a, _) = call(app(), "POST", "/generate", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK, "{a}");
    let (_, b, _) = call(app(), "POST", "/generate", Some(body)).await;
    assert_eq!(a["motion"], b["motion"]);
    assert_eq!(a["levels"], b["levels"]);
    assert_eq!(a["seed"], 3);
    let frames = a["motion"]["frames"].as_array().unwrap();
    assert_eq!(frames.len(), ExperimentConfig::smoke().protocol.frames_per_action);
    assert_eq!(a["motion"]["trajectory"].as_array().unwrap().len(), frames.len() + 1);
    assert_eq!(a["graph"]["nodes"][0]["text"], "a person walks to the left.");
}

#[tokio::test]
async fn no_op_refine_reproduces_generate() {
    let (_, parsed, _) = call(app(), "POST", "/parse", Some(json!({ "text": "a person walks to the left." }))).await;
    let graph = parsed["graph"].clone();
    let (_, gen, _) = call(app(), "POST", "/generate", Some(json!({ "graph": graph, "seed": 9 }))).await;
    let edge = graph["edges"].as_array().unwrap().iter().find(|e| e["relation"] == "ARGM-DIR").unwrap().clone();
    let edit = json!({ "kind": "set_edge_weight", "src": edge["src"], "dst": edge["dst"], "weight": 1.0 });
    let (s, refined, _) = call(app(), "POST", "/refine", Some(json!({ "graph": graph, "edits": [edit], "seed": 9 }))).await;
    assert_eq!(s, StatusCode::OK, "{refined}");
    assert_eq!(
        serde_json::to_vec(&gen["motion"]).unwrap(),
        serde_json::to_vec(&refined["motion"]).unwrap()
    );
}

#[tokio::test]
async fn refine_returns_the_edited_graph() {
    let (_, parsed, _) = call(app(), "POST", "/parse", Some(json!({ "text": "a person walks to the left." }))).await;
    let graph = parsed["graph"].clone();
    let edge = graph["edges"].as_array().unwrap().iter().find(|e| e["relation"] == "ARGM-DIR").unwrap().clone();
    let edit = json!({ "kind": "set_edge_weight", "src": edge["src"], "dst": edge["dst"], "weight": 2.0 });
    let (s, v, _) = call(app(), "POST", "/refine", Some(json!({ "graph": graph, "edits": [edit] }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let used = v["graph"]["edges"].as_array().unwrap().iter().find(|e| e["dst"] == edge["dst"]).unwrap().clone();
    assert_eq!(used["weight"], 2.0);
    let bad = json!({ "kind": "set_edge_weight", "src": "nope", "dst": edge["dst"], "weight": 2.0 });
    let (s, _, _) = call(app(), "POST", "/refine", Some(json!({ "graph": graph, "edits": [bad] }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn checkpoint_mismatch_is_409() {
    let body = json!({ "text": "a person jumps.", "checkpoints": { "diffusion/denoiser.ckpt": "00" } });
    let (s, v, _) = call(app(), "POST", "/generate", Some(body)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "checkpoint_mismatch");
    let (_, h, _) = call(app(), "GET", "/health", None).await;
    let body = json!({ "text": "a person jumps.", "checkpoints": h["checkpoints"] });
    let (s, _, _) = call(app(), "POST", "/generate", Some(body)).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn health_is_constant_across_requests() {
    let (_, before, _) = call(app(), "GET", "/health", None).await;
    call(app(), "POST", "/generate", Some(json!({ "text": "a person waves.", "seed": 1 }))).await;
    let (_, after, _) = call(app(), "GET", "/health", None).await;
    assert_eq!(before, after);
}
