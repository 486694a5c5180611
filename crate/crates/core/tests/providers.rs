use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use gretel_core::corpus::ToolKey;
use gretel_core::llm::{CompletionRequest, FinishReason, HttpProvider, HttpProviderConfig, LlmProvider, PromptRole};
use gretel_core::retriever::{fuse, Bm25Index, Bm25Params, EmbeddingClient};
use serde_json::{json, Value};

async fn serve(app: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

fn provider(endpoint: String, token: Option<&str>, max_in_flight: usize) -> HttpProvider {
    HttpProvider::new(HttpProviderConfig {
        endpoint,
        model: "test-model".into(),
        token: token.map(str::to_string),
        timeout: Duration::from_secs(5),
        max_in_flight,
    })
    .unwrap()
}

fn request() -> CompletionRequest {
    CompletionRequest::new(PromptRole::Planner, "say hi")
}

#[derive(Clone, Default)]
struct Seen {
    bodies: Arc<Mutex<Vec<Value>>>,
    auth: Arc<Mutex<Vec<Option<String>>>>,
}

#[tokio::test]
async fn chat_completion_round_trip() {
    let seen = Seen::default();
    let app = Router::new()
        .route(
            "/v1/chat",
            post(|State(s): State<Seen>, headers: HeaderMap, Json(body): Json<Value>| async move {
                s.auth.lock().unwrap().push(headers.get("authorization").map(|v| v.to_str().unwrap().to_string()));
                s.bodies.lock().unwrap().push(body);
                Json(json!({"choices": [{"message": {"role": "assistant", "content": "{\"q\": 1}"}, "finish_reason": "stop"}]}))
            }),
        )
        .with_state(seen.clone());
    let base = serve(app).await;
    let out = provider(format!("{base}/v1/chat"), Some("tok"), 2)
        .complete(&request())
        .await;
    assert_eq!(out.finish_reason, FinishReason::Complete);
    assert_eq!(out.text, "{\"q\": 1}");
    assert_eq!(out.http_status, Some(200));
    let body = &seen.bodies.lock().unwrap()[0];
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["content"], "say hi");
    assert_eq!(seen.auth.lock().unwrap()[0].as_deref(), Some("Bearer tok"));
}

#[tokio::test]
async fn server_error_is_a_provider_error() {
    let app = Router::new().route(
        "/c",
        post(|| async { (StatusCode::INTERNAL_SERVER_ERROR, "overloaded") }),
    );
    let base = serve(app).await;
    let out = provider(format!("{base}/c"), None, 1).complete(&request()).await;
    assert!(out.is_error());
    assert_eq!(out.http_status, Some(500));
    assert!(out.text.contains("overloaded"));
}

#[tokio::test]
async fn malformed_and_truncated_bodies() {
    let app = Router::new()
        .route("/bad", post(|| async { Json(json!({"nope": true})) }))
        .route("/empty", post(|| async { Json(json!({"choices": []})) }))
        .route(
            "/long",
            post(|| async {
                Json(json!({"choices": [{"message": {"content": "{\"a\""}, "finish_reason": "length"}]}))
            }),
        );
    let base = serve(app).await;
    assert!(provider(format!("{base}/bad"), None, 1)
        .complete(&request())
        .await
        .is_error());
    assert!(provider(format!("{base}/empty"), None, 1)
        .complete(&request())
        .await
        .is_error());
    let out = provider(format!("{base}/long"), None, 1).complete(&request()).await;
    assert_eq!(out.finish_reason, FinishReason::Truncated);
}

#[tokio::test]
async fn unreachable_endpoint_is_a_provider_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let out = provider(format!("http://127.0.0.1:{port}/c"), None, 1)
        .complete(&request())
        .await;
    assert!(out.is_error());
    assert_eq!(out.http_status, None);
}

#[derive(Clone, Default)]
struct Gauge {
    now: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

#[tokio::test(flavor = "multi_thread")]
async fn in_flight_requests_are_bounded() {
    let gauge = Gauge::default();
    let app = Router::new()
        .route(
            "/c",
            post(|State(g): State<Gauge>| async move {
                let n = g.now.fetch_add(1, Ordering::SeqCst) + 1;
                g.peak.fetch_max(n, Ordering::SeqCst);
                tokio::time::sleep(Duration::from_millis(40)).await;
                g.now.fetch_sub(1, Ordering::SeqCst);
                Json(json!({"choices": [{"message": {"content": "ok"}}]}))
            }),
        )
        .with_state(gauge.clone());
    let base = serve(app).await;
    let p = Arc::new(provider(format!("{base}/c"), None, 2));
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let p = Arc::clone(&p);
            tokio::spawn(async move { p.complete(&request()).await })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap().text, "ok");
    }
    assert_eq!(gauge.peak.load(Ordering::SeqCst), 2);
}

fn docs() -> Vec<(ToolKey, String)> {
    vec![
        (ToolKey::new("a", "api"), "flight search".to_string()),
        (ToolKey::new("b", "api"), "flight flight booking".to_string()),
        (ToolKey::new("c", "api"), "weather".to_string()),
    ]
}

#[test]
fn bm25_matches_hand_computation() {
    let idx = Bm25Index::from_documents(docs(), Bm25Params::default()).unwrap();
    // idf(flight) = ln(1 + 1.5/2.5), idf(weather) = ln(1 + 2.5/1.5), avgdl = 2
    let scores: BTreeMap<String, f64> = idx
        .score_all("flight weather")
        .unwrap()
        .into_iter()
        .map(|(k, s)| (k.tool_id, s))
        .collect();
    assert!((scores["a"] - 0.47000362924573563).abs() < 1e-12);
    assert!((scores["b"] - 0.5665797174469143).abs() < 1e-12);
    assert!((scores["c"] - 1.233042489500456).abs() < 1e-12);

    let list = idx.retrieve("q", "flight weather", 3).unwrap();
    let order: Vec<&str> = list.ranked.iter().map(|c| c.tool_id.as_str()).collect();
    assert_eq!(order, ["c", "b", "a"]);
    let b_norm = (0.5665797174469143 - 0.47000362924573563) / (1.233042489500456 - 0.47000362924573563);
    assert!((list.ranked[1].sparse_norm - b_norm).abs() < 1e-12);
    assert_eq!(list.ranked[2].sparse_norm, 0.0);
}

#[tokio::test]
async fn dense_scores_from_the_embedding_endpoint() {
    // query and "a" point the same way, "b" is orthogonal, "c" is opposite
    let app = Router::new().route(
        "/embed",
        post(|Json(body): Json<Value>| async move {
            let n = body["texts"].as_array().unwrap().len();
            assert_eq!(n, 4);
            Json(json!({"vectors": [[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]}))
        }),
    );
    let base = serve(app).await;
    let client = EmbeddingClient::new(format!("{base}/embed"), Duration::from_secs(5)).unwrap();
    let dense = client.dense_scores("q", &docs()).await.unwrap();
    assert_eq!(dense[&ToolKey::new("a", "api")], 1.0);
    assert_eq!(dense[&ToolKey::new("b", "api")], 0.5);
    assert_eq!(dense[&ToolKey::new("c", "api")], 0.0);

    let sparse = Bm25Index::from_documents(docs(), Bm25Params::default())
        .unwrap()
        .retrieve("q", "flight weather", 3)
        .unwrap();
    let fused = fuse(&sparse, &dense, 1.0).unwrap();
    let order: Vec<&str> = fused.ranked.iter().map(|c| c.tool_id.as_str()).collect();
    assert_eq!(order, ["a", "b", "c"]);
    let half = fuse(&sparse, &dense, 0.5).unwrap();
    let c = half.ranked.iter().find(|c| c.tool_id == "c").unwrap();
    assert!((c.fused_score - 0.5).abs() < 1e-12);
}

#[tokio::test]
async fn embedding_errors_are_reported() {
    let app = Router::new()
        .route("/short", post(|| async { Json(json!({"vectors": [[1.0]]})) }))
        .route("/down", post(|| async { StatusCode::SERVICE_UNAVAILABLE }));
    let base = serve(app).await;
    for path in ["short", "down"] {
        let client = EmbeddingClient::new(format!("{base}/{path}"), Duration::from_secs(5)).unwrap();
        assert!(client.dense_scores("q", &docs()).await.is_err(), "{path}");
    }
}
