#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;

use unir_core::index::build_flat;
use unir_core::model::{embed_pool, FusionMode, ModelParams};
use unir_core::server::{serve_blocking, SearchEngine, ServiceState};
use unir_core::synthgen::{generate, SynthConfig, SynthCorpus};

/// A synthetic corpus small enough for quick tests.
pub fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig { queries_per_task: 60, pool_per_task: 48, topics_per_task: 8, dim: 16, seed, ..SynthConfig::default() }
}

pub fn engine_for(synth: &SynthCorpus, params: &ModelParams) -> SearchEngine {
    let store = embed_pool(params, &synth.corpus.pool, &synth.features).unwrap();
    let index = build_flat(Arc::new(store), params.weights);
    SearchEngine::new(Box::new(index), params.clone(), Box::new(synth.features.clone())).unwrap()
}

pub fn synth_engine(seed: u64) -> (SynthCorpus, SearchEngine) {
    let synth = generate(&small_synth(seed)).unwrap();
    let params = ModelParams::init(synth.config.dim, FusionMode::ScoreFusion, seed);
    let engine = engine_for(&synth, &params);
    (synth, engine)
}

/// Serves `state` on an ephemeral port from a background thread.
pub fn spawn_server(state: Arc<ServiceState>) -> SocketAddr {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || serve_blocking(listener, state));
    addr
}

/// One HTTP/1.1 exchange; returns status and body.
pub fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).unwrap();
    let body = body.unwrap_or("");
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let (head, body) = raw.split_once("\r\n\r\n").expect("http response");
    let status = head.split_whitespace().nth(1).and_then(|s| s.parse().ok()).expect("status line");
    (status, body.to_string())
}
