mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{dead_endpoint, mock_protocol, MockServer};
use ragbench::embedding::{
    mock_embed, EmbedRequest, Embedder, EmbedderSpec, PrefixPolicy, RateLimiter, RemoteBackend,
    RemoteClient, RetryPolicy, TaskType,
};
use ragbench::Error;
use serde_json::Value;

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 5,
        base_delay: Duration::from_millis(5),
        factor: 2.0,
    }
}

fn client(url: &str) -> RemoteClient {
    RemoteClient::new(url, Duration::from_secs(5), fast_retry(), Arc::new(RateLimiter::new(0.0)))
}

fn remote_spec(name: &str, dim: usize, url: &str) -> EmbedderSpec {
    let mut s = EmbedderSpec::mock(name, dim);
    s.backend = ragbench::embedding::BackendKind::Remote;
    s.endpoint = Some(url.to_string());
    s
}

fn texts(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn vectors_round_trip_in_order() {
    let server = MockServer::start(mock_protocol(32, vec!["m".into()]));
    let backend = RemoteBackend::new(client(&server.url), "m", true);
    let input = texts(&["alpha beta", "gamma", "alpha beta", "delta epsilon zeta"]);
    let emb = Embedder::new(remote_spec("m", 32, &server.url), Box::new(backend), None).unwrap();
    let out = emb.embed_batch(&input, TaskType::RetrievalDocument).unwrap();
    assert_eq!(out.len(), 4);
    for (t, v) in input.iter().zip(&out) {
        assert_eq!(v.values(), mock_embed(t, 32).values());
        assert!(v.is_unit(1e-6));
    }
    // the duplicate text is sent once
    let sent: Value = serde_json::from_str(&server.recorded()[0].body).unwrap();
    assert_eq!(sent["texts"].as_array().unwrap().len(), 3);
}

#[test]
fn request_shape_is_exact() {
    let server = MockServer::start(mock_protocol(8, vec!["m".into()]));
    let c = client(&server.url);
    let req = EmbedRequest {
        model: "m".into(),
        task: "query".into(),
        normalize: true,
        texts: texts(&["x y"]),
    };
    let resp = c.embed(&req).unwrap();
    assert_eq!(resp.dim, 8);
    let rec = &server.recorded()[0];
    assert_eq!(rec.method, "POST");
    assert_eq!(rec.path, "/embed");
    let body: Value = serde_json::from_str(&rec.body).unwrap();
    let obj = body.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["model", "normalize", "task", "texts"]);
    assert_eq!(body["model"], "m");
    assert_eq!(body["task"], "query");
    assert_eq!(body["normalize"], true);
    assert_eq!(body["texts"], serde_json::json!(["x y"]));
}

#[test]
fn task_native_requests_differ_only_in_task() {
    let server = MockServer::start(mock_protocol(8, vec!["ge".into()]));
    let mut spec = remote_spec("ge", 8, &server.url);
    spec.prefix_policy = PrefixPolicy::TaskTypeNative;
    let backend = RemoteBackend::new(client(&server.url), "ge", true);
    let emb = Embedder::new(spec, Box::new(backend), None).unwrap();
    let t = texts(&["same text"]);
    emb.embed_batch(&t, TaskType::RetrievalQuery).unwrap();
    emb.embed_batch(&t, TaskType::RetrievalDocument).unwrap();
    let recs = server.recorded();
    let mut q: Value = serde_json::from_str(&recs[0].body).unwrap();
    let mut d: Value = serde_json::from_str(&recs[1].body).unwrap();
    assert_eq!(q["task"], "query");
    assert_eq!(d["task"], "document");
    q.as_object_mut().unwrap().remove("task");
    d.as_object_mut().unwrap().remove("task");
    assert_eq!(q, d);
}

#[test]
fn e5_prefix_is_observable_on_the_wire() {
    let server = MockServer::start(mock_protocol(128, vec!["e5".into()]));
    let mut spec = remote_spec("e5", 128, &server.url);
    spec.prefix_policy = PrefixPolicy::E5Style;
    let backend = RemoteBackend::new(client(&server.url), "e5", true);
    let emb = Embedder::new(spec, Box::new(backend), None).unwrap();
    let t = texts(&["ciao"]);
    let vq = emb.embed_batch(&t, TaskType::RetrievalQuery).unwrap();
    let vd = emb.embed_batch(&t, TaskType::RetrievalDocument).unwrap();
    let recs = server.recorded();
    let q: Value = serde_json::from_str(&recs[0].body).unwrap();
    let d: Value = serde_json::from_str(&recs[1].body).unwrap();
    assert_eq!(q["texts"][0], "query: ciao");
    assert_eq!(d["texts"][0], "passage: ciao");
    // "query:" and "passage:" land in different buckets at dim 128
    assert_ne!(vq[0].values(), vd[0].values());
}

#[test]
fn two_503s_then_success_takes_three_attempts() {
    let server = MockServer::start({
        let ok = mock_protocol(4, vec!["m".into()]);
        move |req, i| if i < 2 { (503, r#"{"error":"busy"}"#.into()) } else { ok(req, i) }
    });
    let c = client(&server.url);
    let req = EmbedRequest {
        model: "m".into(),
        task: "document".into(),
        normalize: true,
        texts: texts(&["a"]),
    };
    let resp = c.embed(&req).unwrap();
    assert_eq!(resp.vectors.len(), 1);
    assert_eq!(server.count(), 3);
}

#[test]
fn rate_limited_429_is_retried() {
    let server = MockServer::start({
        let ok = mock_protocol(4, vec!["m".into()]);
        move |req, i| if i == 0 { (429, "{}".into()) } else { ok(req, i) }
    });
    let backend = RemoteBackend::new(client(&server.url), "m", true);
    assert_eq!(backend.client().endpoint(), server.url);
    let v = ragbench::embedding::Backend::embed(&backend, &texts(&["a"]), TaskType::RetrievalQuery).unwrap();
    assert_eq!(v.len(), 1);
    assert_eq!(server.count(), 2);
}

#[test]
fn persistent_503_exhausts_five_attempts() {
    let server = MockServer::start(|_, _| (503, "{}".into()));
    let c = client(&server.url);
    let err = c.health().unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 5, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert_eq!(server.count(), 5);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let c = client(&dead_endpoint());
    let err = c.health().unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 5, .. }), "{err}");
}

#[test]
fn unknown_model_is_permanent() {
    let server = MockServer::start(mock_protocol(4, vec!["m".into()]));
    let backend = RemoteBackend::new(client(&server.url), "nope", true);
    let err = ragbench::embedding::Backend::embed(&backend, &texts(&["a"]), TaskType::RetrievalQuery).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
    assert_eq!(server.count(), 1);
}

#[test]
fn malformed_request_is_permanent() {
    let server = MockServer::start(|_, _| (400, r#"{"error":"bad"}"#.into()));
    let err = client(&server.url).health().unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
    assert_eq!(server.count(), 1);
}

#[test]
fn wrong_dimension_is_a_contract_violation() {
    let server = MockServer::start(mock_protocol(1023, vec!["big".into()]));
    let backend = RemoteBackend::new(client(&server.url), "big", true);
    let emb = Embedder::new(remote_spec("big", 1024, &server.url), Box::new(backend), None).unwrap();
    let err = emb.embed_batch(&texts(&["x"]), TaskType::RetrievalDocument).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn vector_count_mismatch_is_a_protocol_error() {
    let server = MockServer::start(|_, _| (200, r#"{"dim":2,"vectors":[[1,0]]}"#.into()));
    let req = EmbedRequest {
        model: "m".into(),
        task: "query".into(),
        normalize: false,
        texts: texts(&["a", "b"]),
    };
    assert!(matches!(client(&server.url).embed(&req), Err(Error::Protocol(_))));
    let server = MockServer::start(|_, _| (200, r#"{"dim":2,"vectors":[[1,0],[1]]}"#.into()));
    assert!(matches!(client(&server.url).embed(&req), Err(Error::Protocol(_))));
    let server = MockServer::start(|_, _| (200, "not json".into()));
    assert!(matches!(client(&server.url).embed(&req), Err(Error::Protocol(_))));
}

#[test]
fn healthz_lists_models() {
    let server = MockServer::start(mock_protocol(4, vec!["a".into(), "b".into()]));
    let h = client(&server.url).health().unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.models, vec!["a", "b"]);
    assert_eq!(server.recorded()[0].path, "/healthz");
}

#[test]
fn batches_respect_batch_size() {
    let server = MockServer::start(mock_protocol(8, vec!["m".into()]));
    let mut spec = remote_spec("m", 8, &server.url);
    spec.batch_size = 3;
    let backend = RemoteBackend::new(client(&server.url), "m", true);
    let emb = Embedder::new(spec, Box::new(backend), None).unwrap();
    let input: Vec<String> = (0..7).map(|i| format!("text {i}")).collect();
    let out = emb.embed_batch(&input, TaskType::RetrievalDocument).unwrap();
    assert_eq!(out.len(), 7);
    let sizes: Vec<usize> = server
        .recorded()
        .iter()
        .map(|r| serde_json::from_str::<Value>(&r.body).unwrap()["texts"].as_array().unwrap().len())
        .collect();
    assert_eq!(sizes, vec![3, 3, 1]);
}
