use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

const CANDIDATES: &str = r#"{"did":"c1","modality":"text","domain":"wiki","txt":"a paragraph","img":null}
{"did":"c2","modality":"image","domain":"news","txt":null,"img":"img/c2.jpg"}
"#;

const QUERIES: &str = r#"{"qid":"q1","task":1,"dataset":"d1","modality":"text","txt":"a dog","img":null,"instructions":[{"text":"find an image","intent":"match","domain":"news"}],"pos":["c2"],"neg":[]}
{"qid":"q2","task":2,"dataset":"d2","modality":"text","txt":"who is","img":null,"instructions":[{"text":"find a paragraph","intent":"answer","domain":"wiki"}],"pos":["c1"],"neg":[]}
"#;

const SMALL_SYNTH: &str = "queries_per_task = 40\npool_per_task = 40\ntopics_per_task = 6\ndim = 16\n";

fn unir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unir")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (q, c) = (dir.path().join("q.jsonl"), dir.path().join("c.jsonl"));
    std::fs::write(&q, QUERIES).unwrap();
    std::fs::write(&c, CANDIDATES).unwrap();
    let ok = unir(&["validate", "--queries", s(&q), "--candidates", s(&c)]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));

    std::fs::write(&q, QUERIES.replace(r#""pos":["c1"]"#, r#""pos":["c9"]"#)).unwrap();
    let bad = unir(&["validate", "--queries", s(&q), "--candidates", s(&c)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("error[DANGLING_REF]"), "{}", stderr(&bad));

    let usage = unir(&["validate", "--bogus"]);
    assert_eq!(usage.status.code(), Some(1));
    assert!(stderr(&usage).contains("error[USAGE]"));
    let missing = unir(&["validate", "--queries", "/nonexistent.jsonl", "--candidates", s(&c)]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn synth_train_index_search_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("synth.toml");
    std::fs::write(&cfg, SMALL_SYNTH).unwrap();
    let corpus = d.join("corpus");
    let out = unir(&["--seed", "3", "synth", "--out", s(&corpus), "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (q, c, f) = (corpus.join("queries.jsonl"), corpus.join("candidates.jsonl"), corpus.join("features.unir"));
    let out = unir(&["validate", "--queries", s(&q), "--candidates", s(&c), "--features", s(&f)]);
    assert!(out.status.success(), "{}", stderr(&out));

    let ckpt = d.join("model.unck");
    let out = unir(&[
        "--seed", "3", "train", "--queries", s(&q), "--candidates", s(&c), "--features", s(&f), "--out", s(&ckpt),
        "--epochs", "2", "--batch-size", "16",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let store = d.join("store.unir");
    let out = unir(&["embed", "--candidates", s(&c), "--features", s(&f), "--checkpoint", s(&ckpt), "--out", s(&store)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let index = d.join("index.json");
    let out = unir(&[
        "index-build", "--store", s(&store), "--checkpoint", s(&ckpt), "--features", s(&f), "--out", s(&index),
        "--kind", "clustered", "--n-lists", "4",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let search = |extra: &[&str]| {
        let mut args = vec!["search", "--index", s(&index), "--k", "5"];
        args.extend_from_slice(extra);
        unir(&args)
    };
    let out = search(&["--txt", "anything at all", "--n-probe", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let hits: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let hits = hits.as_array().unwrap();
    assert_eq!(hits.len(), 5);
    let scores: Vec<f64> = hits.iter().map(|h| h["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(stdout(&out), stdout(&search(&["--txt", "anything at all", "--n-probe", "4"])));

    let out = search(&["--img-id", "no-such-image"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error[UNKNOWN_IMAGE]"), "{}", stderr(&out));
}

#[test]
fn experiment_run_prints_delta_table() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.toml");
    std::fs::write(
        &plan,
        format!(
            "name = \"tiny\"\nseeds = [0]\nbaseline = \"multi-task\"\ntreatment = \"instruction-tuned\"\n\n[synth]\n{SMALL_SYNTH}\n[train]\nepochs = 2\n\n\
             [[conditions]]\nname = \"multi-task\"\nuse_instructions = false\n\n[[conditions]]\nname = \"instruction-tuned\"\nuse_instructions = true\n"
        ),
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = unir(&["experiment", "run", "--plan", s(&plan), "--out", s(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("seed 0: instruction-tuned vs multi-task"), "{text}");
    assert!(text.contains("ΔR@primary"), "{text}");
    assert!(run.join("manifest.json").is_file());
}

fn get(addr: &str, path: &str) -> Option<(u16, String)> {
    let mut stream = TcpStream::connect(addr).ok()?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").ok()?;
    let mut raw = String::new();
    stream.read_to_string(&mut raw).ok()?;
    let (head, body) = raw.split_once("\r\n\r\n")?;
    Some((head.split_whitespace().nth(1)?.parse().ok()?, body.to_string()))
}

#[test]
fn serve_answers_healthz() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("synth.toml");
    std::fs::write(&cfg, SMALL_SYNTH).unwrap();
    let corpus = d.join("corpus");
    assert!(unir(&["synth", "--out", s(&corpus), "--config", s(&cfg)]).status.success());
    let (q, c, f) = (corpus.join("queries.jsonl"), corpus.join("candidates.jsonl"), corpus.join("features.unir"));
    let ckpt = d.join("model.unck");
    let trained = unir(&["train", "--queries", s(&q), "--candidates", s(&c), "--features", s(&f), "--out", s(&ckpt), "--epochs", "1"]);
    assert!(trained.status.success(), "{}", stderr(&trained));
    let store = d.join("store.unir");
    assert!(unir(&["embed", "--candidates", s(&c), "--features", s(&f), "--checkpoint", s(&ckpt), "--out", s(&store)]).status.success());
    let index = d.join("index.json");
    assert!(unir(&["index-build", "--store", s(&store), "--checkpoint", s(&ckpt), "--features", s(&f), "--out", s(&index)])
        .status
        .success());

    let mut child = Command::new(env!("CARGO_BIN_EXE_unir"))
        .args(["serve", "--addr", "127.0.0.1:0", "--index", s(&index)])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
    let health = get(&addr, "/healthz");
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut loaded = false;
    while Instant::now() < deadline {
        let mut stream = TcpStream::connect(&addr).unwrap();
        let body = r#"{"txt":"hello","k":3}"#;
        write!(stream, "POST /search HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
        let mut raw = String::new();
        stream.read_to_string(&mut raw).unwrap();
        if raw.starts_with("HTTP/1.1 200") {
            loaded = true;
            break;
        }
        assert!(raw.starts_with("HTTP/1.1 503"), "{raw}");
        std::thread::sleep(Duration::from_millis(50));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(health, Some((200, "ok".to_string())));
    assert!(loaded, "index never became searchable");
}
