use std::sync::Arc;
use std::time::{Duration, Instant};

use cochpl::agent::AgentParams;
use cochpl::catalog::{Catalog, SynthConfig};
use cochpl::env::{EpisodeLog, EpisodeStatus};
use cochpl::kg_embed::TransEConfig;
use cochpl::pipeline::PipelineConfig;
use cochpl_cli::api::Service;
use cochpl_cli::build_service;
use serde_json::{json, Value};

fn config() -> PipelineConfig {
    PipelineConfig {
        seed: 3,
        synth: SynthConfig::new(6, 40, 12, 3, 3, 5).with_popularity_exponent(1.0),
        transe: TransEConfig { d: 8, epochs: 5, ..TransEConfig::default() },
        ..PipelineConfig::default()
    }
}

fn service() -> (Service, Catalog) {
    let cfg = config();
    let c = cfg.generate_catalog().unwrap();
    let split = cfg.split(&c).unwrap();
    let tbl = cfg.pretrain(&c, &split).unwrap();
    let params = AgentParams::new(&tbl, 1).unwrap();
    (build_service(&cfg, c.clone(), tbl, params), c)
}

fn create(s: &Service, attr: usize) -> (u16, Value) {
    s.handle_request("POST", "/api/sessions", json!({ "initial_attribute_id": attr }).to_string().as_bytes())
}

fn respond(s: &Service, id: &str, accepted: &[bool]) -> (u16, Value) {
    let body = json!({ "accepted": accepted }).to_string();
    s.handle_request("POST", &format!("/api/sessions/{id}/responses"), body.as_bytes())
}

fn get(s: &Service, id: &str) -> (u16, Value) {
    s.handle_request("GET", &format!("/api/sessions/{id}"), b"")
}

/// Truthful answers for a user who wants `target`.
fn answers(c: &Catalog, target: usize, question: &Value) -> Vec<bool> {
    let ask = question["option"] == "ask";
    question["choices"]
        .as_array()
        .unwrap()
        .iter()
        .map(|ch| {
            let id = ch["id"].as_u64().unwrap() as usize;
            if ask {
                c.item_attributes(target).contains(&id)
            } else {
                id == target
            }
        })
        .collect()
}

/// Plays a session to the end; returns the id, every question and the final reply.
fn play(s: &Service, c: &Catalog, target: usize) -> (String, Vec<Value>, Value) {
    let (status, mut reply) = create(s, c.item_attributes(target)[0]);
    assert_eq!(status, 201);
    let id = reply["session_id"].as_str().unwrap().to_owned();
    let mut questions = Vec::new();
    while let Some(q) = reply.get("question").cloned() {
        let a = answers(c, target, &q);
        questions.push(q);
        let (status, next) = respond(s, &id, &a);
        assert_eq!(status, 200, "{next}");
        reply = next;
    }
    (id, questions, reply)
}

#[test]
fn sessions_run_to_a_logged_outcome() {
    let (s, c) = service();
    let mut successes = 0;
    for target in 0..c.num_items() {
        let (id, questions, last) = play(&s, &c, target);
        assert_eq!(last["api_version"], 1);
        let (status, summary) = get(&s, &id);
        assert_eq!(status, 200);
        let log: EpisodeLog = serde_json::from_value(summary["log"].clone()).unwrap();
        assert_eq!(log.turns.len(), questions.len());
        assert!(log.turns.len() <= 15);
        for (turn, q) in log.turns.iter().zip(&questions) {
            let ids: Vec<usize> = q["choices"].as_array().unwrap().iter().map(|ch| ch["id"].as_u64().unwrap() as usize).collect();
            assert!(turn.choices.len() <= ids.len());
            assert_eq!(turn.choices, ids[..turn.choices.len()]);
        }
        match last["status"].as_str().unwrap() {
            "success" => {
                successes += 1;
                assert_eq!(log.status, EpisodeStatus::Success);
                assert_eq!(Some(last["turn"].as_u64().unwrap() as usize), log.success_turn);
                assert_eq!(Some(last["rank"].as_u64().unwrap() as usize), log.success_rank);
                assert_eq!(log.target, None);
            }
            "timeout" => assert_eq!(log.status, EpisodeStatus::Timeout),
            other => panic!("unexpected status {other}"),
        }
        assert!(last.get("question").is_none());
        assert_eq!(respond(&s, &id, &[true]).0, 409, "terminated sessions reject input");
    }
    assert!(successes > 0);
}

#[test]
fn contract_violations_map_to_status_codes() {
    let (s, c) = service();
    let (_, reply) = create(&s, c.item_attributes(0)[0]);
    let id = reply["session_id"].as_str().unwrap().to_owned();
    let n = reply["question"]["choices"].as_array().unwrap().len();

    let (status, body) = respond(&s, &id, &vec![false; n + 1]);
    assert_eq!(status, 409);
    assert_eq!(body["api_version"], 1);
    assert_eq!(get(&s, &id).1["question"], reply["question"], "a rejected response leaves the question pending");

    let path = format!("/api/sessions/{id}/responses");
    assert_eq!(s.handle_request("POST", &path, b"not json").0, 400);
    assert_eq!(s.handle_request("POST", &path, br#"{"accepted": [1, 2]}"#).0, 400);
    assert_eq!(s.handle_request("POST", &path, br#"{}"#).0, 400);
    assert_eq!(s.handle_request("POST", "/api/sessions", br#"{"initial_attribute_id": "a"}"#).0, 400);
    assert_eq!(create(&s, c.num_attributes()).0, 422);

    assert_eq!(get(&s, "nope").0, 404);
    assert_eq!(respond(&s, "nope", &[true]).0, 404);
    assert_eq!(s.handle_request("DELETE", "/api/sessions/nope", b"").0, 404);
    assert_eq!(s.handle_request("GET", "/api/other", b"").0, 404);
    assert_eq!(s.handle_request("PUT", &format!("/api/sessions/{id}"), b"").0, 405);

    let (status, body) = s.handle_request("DELETE", &format!("/api/sessions/{id}"), b"");
    assert_eq!((status, body["status"].as_str()), (200, Some("closed")));
    assert_eq!(get(&s, &id).0, 404);
}

#[test]
fn serving_is_deterministic_and_sessions_are_isolated() {
    let (a, c) = service();
    let (b, _) = service();
    let targets = [1, 4, 9];
    let alone: Vec<Vec<Value>> = targets.iter().map(|&t| play(&a, &c, t).1).collect();
    let again: Vec<Vec<Value>> = targets.iter().map(|&t| play(&b, &c, t).1).collect();
    assert_eq!(alone, again);

    // Interleave the three conversations on a fresh service.
    let (s, _) = service();
    let mut live: Vec<(usize, String, Value, Vec<Value>)> = targets
        .iter()
        .map(|&t| {
            let (_, r) = create(&s, c.item_attributes(t)[0]);
            (t, r["session_id"].as_str().unwrap().to_owned(), r, Vec::new())
        })
        .collect();
    while live.iter().any(|l| l.2.get("question").is_some()) {
        for (t, id, reply, seen) in live.iter_mut() {
            if let Some(q) = reply.get("question").cloned() {
                let ans = answers(&c, *t, &q);
                seen.push(q);
                *reply = respond(&s, id, &ans).1;
            }
        }
    }
    let interleaved: Vec<Vec<Value>> = live.into_iter().map(|l| l.3).collect();
    assert_eq!(interleaved, alone);
}

#[test]
fn concurrent_sessions_match_sequential_ones() {
    let (s, c) = service();
    let s = Arc::new(s);
    let c = Arc::new(c);
    let expected: Vec<Vec<Value>> = (0..4).map(|t| play(&s, &c, t).1).collect();
    let handles: Vec<_> = (0..4)
        .map(|t| {
            let (s, c) = (s.clone(), c.clone());
            std::thread::spawn(move || play(&s, &c, t).1)
        })
        .collect();
    let got: Vec<Vec<Value>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(got, expected);
}

#[test]
fn transcript_rebuilds_the_conversation() {
    let (s, c) = service();
    let target = 2;
    let (_, mut reply) = create(&s, c.item_attributes(target)[0]);
    let id = reply["session_id"].as_str().unwrap().to_owned();
    let mut turns = Vec::new();
    for _ in 0..2 {
        let Some(q) = reply.get("question").cloned() else { break };
        let a = answers(&c, target, &q);
        reply = respond(&s, &id, &a).1;
        turns.push((q, a));
    }
    let summary = get(&s, &id).1;
    let transcript = summary["transcript"].as_array().unwrap();
    assert_eq!(transcript.len(), turns.len());
    for (entry, (q, a)) in transcript.iter().zip(&turns) {
        assert_eq!(entry["option"], q["option"]);
        let n = entry["accepted"].as_array().unwrap().len();
        assert_eq!(entry["choices"].as_array().unwrap()[..], q["choices"].as_array().unwrap()[..n]);
        assert_eq!(entry["accepted"], json!(a[..n]));
    }
    assert_eq!(summary["turn"], turns.len());
    assert_eq!(summary["initial_attribute_id"], c.item_attributes(target)[0]);
    for key in ["accepted_attributes", "rejected_attributes", "rejected_items", "candidate_items", "status"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
}

#[test]
fn idle_sessions_expire() {
    let (s, c) = service();
    let id = create(&s, c.item_attributes(0)[0]).1["session_id"].as_str().unwrap().to_owned();
    assert_eq!(s.purge_expired(Instant::now() + Duration::from_secs(29 * 60)), 0);
    assert_eq!(s.purge_expired(Instant::now() + Duration::from_secs(31 * 60)), 1);
    assert_eq!(get(&s, &id).0, 404);
    assert_eq!(s.session_count(), 0);
}
