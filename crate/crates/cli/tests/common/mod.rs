#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::time::{Duration, Instant};

use refinery_cli::server::{BackgroundServer, ServiceContext};
use refinery_core::annotation::{AnnotationHub, HubAnnotator};
use refinery_core::benchmark::{refinement_sequence, supervised_sequence};
use refinery_core::config::RunConfig;
use refinery_core::eventlog::{read_log, Event, EventLog};
use refinery_core::orchestrator::{Engine, RefinementOutcome};
use refinery_core::store::LabelSource;
use refinery_core::tracker::ConstantVelocityTracker;
use refinery_core::world::World;
use serde_json::{json, Value};

/// Minimal HTTP/1.1 client; each request asks for the connection to be
/// closed so the body ends at EOF.
pub fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    let body = body.unwrap_or("");
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut reader = BufReader::new(s);
    let mut status = String::new();
    reader.read_line(&mut status).unwrap();
    let code: u16 = status.split_whitespace().nth(1).unwrap().parse().unwrap();
    let mut rest = String::new();
    reader.read_to_string(&mut rest).unwrap();
    let body = rest
        .split_once("\r\n\r\n")
        .map_or(String::new(), |(_, b)| b.to_string());
    (code, body)
}

/// Annotation boxes are flat: corner, size and class side by side.
pub fn labeled(bbox: &Value, class: &Value) -> Value {
    let mut v = bbox.clone();
    v["class"] = class.clone();
    v
}

pub struct RoundTrip {
    /// State reported by `/api/status` while the request was pending.
    pub state_while_pending: Value,
    pub status_pending_matches: bool,
    pub submitted: Value,
    /// Time from the POST until the refinement phase returned.
    pub resume: Duration,
    pub outcome: RefinementOutcome,
    /// Boxes of the first human-sourced `LabelsStored` entry.
    pub logged_human: Value,
    /// Milliseconds between the request and the response log entries.
    pub log_gap_ms: u64,
}

/// Scripted browser session against a live service: poll for the pending
/// request, accept every prediction, and wait for the phase to finish.
pub fn ui_round_trip() -> RoundTrip {
    let mut cfg = RunConfig::default();
    cfg.world.num_classes = 2;
    cfg.world.objects_per_scene = 2;
    cfg.world.feature_dim = 16;
    cfg.kernel.num_centers = 60;
    cfg.bootstrap.n_batches = 3;
    cfg.benchmark.groups = vec![vec![0, 1]];
    cfg.benchmark.refinement_frames = 3;
    // every frame is a query; the tracker answers after the first one
    cfg.selection.th_l = 1.0;
    cfg.selection.th_h = 1.0;

    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("events.jsonl");
    let world = World::new(cfg.world.clone()).unwrap();
    let mut engine = Engine::new(cfg.clone())
        .unwrap()
        .with_log(EventLog::open(&log_path).unwrap());
    for c in 0..2 {
        let seq = supervised_sequence(&world, c, 10, 0).unwrap();
        engine.ingest_supervised(&format!("h{c}"), &seq, c).unwrap();
    }
    engine.retrain().unwrap();
    let seq = refinement_sequence(&world, &cfg, 0).unwrap();

    let hub = Arc::new(AnnotationHub::new());
    let server = BackgroundServer::start(
        "127.0.0.1:0",
        ServiceContext::new(hub.clone(), engine.controller()),
    )
    .unwrap();
    let addr = server.addr;

    let run = std::thread::spawn(move || {
        let mut annotator = HubAnnotator::new(hub, Duration::from_secs(30));
        let mut tracker = ConstantVelocityTracker::new(cfg.tracker);
        engine
            .run_refinement_phase("tabletop", &seq, &mut annotator, &mut tracker)
            .unwrap()
    });

    let deadline = Instant::now() + Duration::from_secs(30);
    let pending: Value = loop {
        let (code, body) = http(addr, "GET", "/api/pending", None);
        if code == 200 {
            break serde_json::from_str(&body).unwrap();
        }
        assert_eq!(code, 204);
        assert!(Instant::now() < deadline, "no request was posted");
        std::thread::sleep(Duration::from_millis(20));
    };
    let (_, status) = http(addr, "GET", "/api/status", None);
    let status: Value = serde_json::from_str(&status).unwrap();

    // accept all predictions; with none, draw over the rendered objects
    let predicted = pending["predicted"].as_array().unwrap();
    let boxes: Vec<Value> = if predicted.is_empty() {
        let class = &pending["classes"][0]["id"];
        pending["rendering"]["rects"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| labeled(&r["box"], class))
            .collect()
    } else {
        predicted
            .iter()
            .map(|d| labeled(&d["box"], &d["class"]))
            .collect()
    };
    assert!(!boxes.is_empty());
    let submitted = Instant::now();
    let flags = vec![true; predicted.len()];
    let answer =
        json!({"request_id": pending["request_id"], "boxes": boxes, "accepted_predictions": flags});
    let (code, _) = http(addr, "POST", "/api/annotations", Some(&answer.to_string()));
    assert_eq!(code, 200);

    let outcome = run.join().unwrap();
    let resume = submitted.elapsed();
    drop(server);

    let log = read_log(&log_path).unwrap();
    let received_at = log
        .entries
        .iter()
        .position(|e| matches!(e.event, Event::AnnotationReceived { .. }))
        .unwrap();
    let logged_human = log
        .entries
        .iter()
        .find_map(|e| match &e.event {
            Event::LabelsStored {
                source: LabelSource::Human,
                boxes,
                ..
            } => Some(serde_json::to_value(boxes).unwrap()),
            _ => None,
        })
        .unwrap_or(Value::Null);
    let requested = log.entries[..received_at]
        .iter()
        .rev()
        .find(|e| matches!(e.event, Event::AnnotationRequested { .. }))
        .unwrap();

    RoundTrip {
        state_while_pending: status["state"].clone(),
        status_pending_matches: status["pending"] == pending["request_id"],
        submitted: json!(boxes),
        resume,
        outcome,
        logged_human,
        log_gap_ms: log.entries[received_at].ts.saturating_sub(requested.ts),
    }
}
