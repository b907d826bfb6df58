mod common;

use std::sync::Arc;

use common::{http, spawn_server, synth_engine};
use unir_core::index::Hit;
use unir_core::server::{SearchRequest, ServiceState};

fn requests(synth: &unir_core::synthgen::SynthCorpus, n: usize) -> Vec<SearchRequest> {
    let queries = &synth.corpus.queries;
    (0..n)
        .map(|i| {
            let q = &queries[(i * 7) % queries.len()];
            SearchRequest {
                txt: q.text.clone(),
                img_id: q.image_ref.clone(),
                instruction: (i % 2 == 0).then(|| q.instructions[0].text.clone()),
                k: 1 + i % 12,
            }
        })
        .collect()
}

#[test]
fn healthz_and_search() {
    let (synth, engine) = synth_engine(1);
    let addr = spawn_server(Arc::new(ServiceState::with_engine(engine)));
    assert_eq!(http(addr, "GET", "/healthz", None), (200, "ok".to_string()));
    let img = synth.corpus.queries.iter().find_map(|q| q.image_ref.clone()).unwrap();
    let (status, body) = http(addr, "POST", "/search", Some(&format!(r#"{{"img_id":"{img}","k":3}}"#)));
    assert_eq!(status, 200);
    let hits: Vec<Hit> = serde_json::from_str(&body).unwrap();
    assert_eq!(hits.len(), 3);
    assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn error_statuses() {
    let (_, engine) = synth_engine(2);
    let addr = spawn_server(Arc::new(ServiceState::with_engine(engine)));
    let post = |body: &str| http(addr, "POST", "/search", Some(body)).0;
    assert_eq!(post("{not json"), 400);
    assert_eq!(post(r#"{"txt":"a"}"#), 400);
    assert_eq!(post(r#"{"txt":"a","k":0}"#), 400);
    assert_eq!(post(r#"{"txt":null,"img_id":null,"instruction":null,"k":2}"#), 400);
    assert_eq!(post(r#"{"txt":"a","k":2,"extra":1}"#), 400);
    assert_eq!(post(r#"{"img_id":"img:nowhere","k":2}"#), 404);
    assert_eq!(post(r#"{"txt":"a","img_id":null,"instruction":"find a caption about","k":2}"#), 200);
}

#[test]
fn not_loaded_is_503_until_loaded() {
    let state = Arc::new(ServiceState::new());
    let addr = spawn_server(Arc::clone(&state));
    assert_eq!(http(addr, "GET", "/healthz", None).0, 200);
    assert_eq!(http(addr, "POST", "/search", Some(r#"{"txt":"a","k":1}"#)).0, 503);
    let (_, engine) = synth_engine(3);
    state.load(engine);
    assert_eq!(http(addr, "POST", "/search", Some(r#"{"txt":"a","k":1}"#)).0, 200);
}

#[test]
fn concurrent_burst_matches_sequential() {
    let (synth, engine) = synth_engine(4);
    let state = Arc::new(ServiceState::with_engine(engine));
    let oracle = state.engine().unwrap();
    let addr = spawn_server(Arc::clone(&state));
    let reqs = requests(&synth, 100);
    let expected: Vec<String> =
        reqs.iter().map(|r| serde_json::to_string(&oracle.search(r).unwrap()).unwrap()).collect();
    let sequential: Vec<String> = reqs
        .iter()
        .map(|r| {
            let (status, body) = http(addr, "POST", "/search", Some(&serde_json::to_string(r).unwrap()));
            assert_eq!(status, 200);
            body
        })
        .collect();
    assert_eq!(sequential, expected);
    let handles: Vec<_> = reqs
        .iter()
        .map(|r| {
            let body = serde_json::to_string(r).unwrap();
            std::thread::spawn(move || http(addr, "POST", "/search", Some(&body)))
        })
        .collect();
    let concurrent: Vec<String> = handles
        .into_iter()
        .map(|h| {
            let (status, body) = h.join().unwrap();
            assert_eq!(status, 200);
            body
        })
        .collect();
    assert_eq!(concurrent, expected);
}
