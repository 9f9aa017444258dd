mod common;

use common::{spec, Server};
use maskguide::codec::image_to_png;
use maskguide::jobspec::JobSpec;
use maskguide::pipeline::JobObserver;
use maskguide::seed::sha256_hex;
use maskguide::{run_job, toytask, JobMode, JobStatus};
use maskguide_service::EventKind;
use serde_json::{json, Value};

fn statuses(frames: &[common::SseFrame]) -> Vec<JobStatus> {
    frames
        .iter()
        .filter_map(|f| match &f.data.kind {
            EventKind::Status { status, .. } => Some(*status),
            _ => None,
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn submit_stream_fetch_matches_in_process_run() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path()).await;
    let mut doc = spec(40);
    doc["fan_out"] = json!({"n_stage1": 2, "n_stage2": 2});

    let (code, body) = server.submit(&doc).await;
    assert_eq!(code, 201, "{body}");
    assert_eq!(body["status"], "pending");
    let id = body["id"].as_str().unwrap().to_string();

    let frames = server.events(&id, None).await;
    let seqs: Vec<u64> = frames.iter().map(|f| f.id).collect();
    assert_eq!(seqs, (1..=frames.len() as u64).collect::<Vec<_>>(), "gap-free from 1");
    assert!(frames.iter().all(|f| f.data.seq == f.id && f.event == f.data.kind.name()));
    use JobStatus::*;
    assert_eq!(
        statuses(&frames),
        [Pending, Stage1Running, AwaitingSelection, Stage2Running, Done]
    );

    // Loss steps strictly increase within each candidate.
    for cand in ["s1-0", "s1-1"] {
        let steps: Vec<usize> = frames
            .iter()
            .filter_map(|f| match &f.data.kind {
                EventKind::Step { candidate, step, .. } if candidate == cand => Some(*step),
                _ => None,
            })
            .collect();
        assert!(!steps.is_empty());
        assert!(steps.windows(2).all(|w| w[0] < w[1]), "{cand}: {steps:?}");
    }

    let (code, view) = server.get_json(&format!("/jobs/{id}")).await;
    assert_eq!(code, 200);
    assert_eq!(view["status"], "done");
    assert_eq!(view["stage1"].as_array().unwrap().len(), 2);
    assert_eq!(view["stage2"].as_array().unwrap().len(), 4);

    // Reference run in-process with the same spec.
    let backends = toytask::backends::<f64>().unwrap();
    let parsed: JobSpec = serde_json::from_value(doc).unwrap();
    let job = parsed.resolve::<f64>("ref", std::path::Path::new("."), &backends).unwrap();
    let reference = run_job(job, JobMode::Auto, &backends, &mut () as &mut dyn JobObserver<f64>).unwrap();
    let expected: Vec<(String, String)> = reference
        .stage1
        .iter()
        .map(|r| (r.id.clone(), image_to_png(&r.image).unwrap()))
        .chain(reference.stage2.iter().map(|r| (r.id.clone(), image_to_png(&r.image).unwrap())))
        .map(|(id, png)| (id, sha256_hex(&png)))
        .collect();
    let served: Vec<(String, String)> = ["stage1", "stage2"]
        .iter()
        .flat_map(|k| view[*k].as_array().unwrap().clone())
        .map(|r| (r["id"].as_str().unwrap().to_string(), r["artifact"].as_str().unwrap().to_string()))
        .collect();
    assert_eq!(served, expected);

    for (_, artifact) in &served {
        let (code, bytes) = server.artifact(artifact).await;
        assert_eq!(code, 200);
        assert_eq!(&sha256_hex(&bytes), artifact);
    }
    let ready: Vec<String> = frames
        .iter()
        .filter_map(|f| match &f.data.kind {
            EventKind::Stage1Ready { artifact, .. } | EventKind::Stage2Ready { artifact, .. } => Some(artifact.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(ready, served.iter().map(|(_, a)| a.clone()).collect::<Vec<_>>());

    // Stage-2 provenance.
    for r in view["stage2"].as_array().unwrap() {
        let id = r["id"].as_str().unwrap();
        let source = r["source"].as_str().unwrap();
        assert_eq!(&id[3..4], &source[3..4]);
    }
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn late_subscribers_replay_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path()).await;
    let (_, body) = server.submit(&spec(30)).await;
    let id = body["id"].as_str().unwrap().to_string();
    let first = server.events(&id, None).await;
    let again = server.events(&id, None).await;
    assert_eq!(
        first.iter().map(|f| &f.data).collect::<Vec<_>>(),
        again.iter().map(|f| &f.data).collect::<Vec<_>>()
    );
    let resumed = server.events(&id, Some(3)).await;
    assert_eq!(resumed.first().unwrap().id, 4);
    assert_eq!(resumed.len(), first.len() - 3);
    let resp = reqwest::get(server.url(&format!("/jobs/{id}/events?after=2"))).await.unwrap();
    let by_query = common::parse_sse(&resp.text().await.unwrap());
    assert_eq!(by_query.first().unwrap().id, 3);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn loss_events_follow_the_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path()).await;
    let mut doc = spec(300);
    // Never stop early, so the run is exactly 300 steps.
    doc["optimizer"]["plateau_patience"] = json!(1000);
    let (_, body) = server.submit(&doc).await;
    let id = body["id"].as_str().unwrap().to_string();
    let frames = server.events(&id, None).await;
    let loss_events: Vec<usize> = frames
        .iter()
        .filter_map(|f| match &f.data.kind {
            EventKind::Step { step, .. } => Some(*step),
            _ => None,
        })
        .collect();

    let (_, view) = server.get_json(&format!("/jobs/{id}")).await;
    let trace = view["stage1"][0]["loss_trace"].as_array().unwrap();
    assert_eq!(trace.len(), 300);
    let expected: Vec<usize> = trace
        .iter()
        .map(|row| row["step"].as_u64().unwrap() as usize)
        .filter(|s| s % 10 == 0)
        .collect();
    assert_eq!(loss_events, expected);
    assert!(loss_events.len() <= 31, "{}", loss_events.len());
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn validation_lists_every_bad_field() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path()).await;
    let mut doc = spec(10);
    doc["weights"]["alpha_clip"] = json!(-1.0);
    doc["refine"] = json!({"strength": 1.5});
    doc["fan_out"] = json!({"n_stage1": 0});
    let (code, body) = server.submit(&doc).await;
    assert_eq!(code, 422, "{body}");
    let fields: Vec<&str> = body["fields"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["field"].as_str().unwrap())
        .collect();
    assert!(fields.contains(&"weights.alpha_clip"), "{fields:?}");
    assert!(fields.contains(&"refine.strength"), "{fields:?}");
    assert!(fields.contains(&"fan_out.n_stage1"), "{fields:?}");

    let (code, body) = server.submit(&json!({"prompt": "a cat"})).await;
    assert_eq!(code, 422);
    assert_eq!(body["fields"][0]["field"], "mask_path");

    let resp = reqwest::Client::new()
        .post(server.url("/jobs"))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    let body: Value = resp.json().await.unwrap();
    assert!(body["error"].is_string());

    // Nothing was persisted.
    assert_eq!(server.get_json("/jobs/job-000001").await.0, 404);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn orphan_class_is_rejected_at_submit() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::config(dir.path());
    config.backends.segmenters = vec!["dogs".into()];
    config
        .backends
        .params
        .insert("dogs".into(), json!({"kind": "toy", "classes": ["dog"]}));
    let server = Server::start_with(config).await;
    let (code, body) = server.submit(&spec(10)).await;
    assert_eq!(code, 422, "{body}");
    assert_eq!(body["fields"][0]["field"], "mask_png_base64");
    assert!(body["fields"][0]["message"].as_str().unwrap().contains("cat"), "{body}");
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unknown_ids_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path()).await;
    let (_, body) = server.submit(&spec(10)).await;
    let id = body["id"].as_str().unwrap().to_string();
    server.events(&id, None).await;
    let (_, view) = server.get_json(&format!("/jobs/{id}")).await;
    let artifact = view["stage1"][0]["artifact"].as_str().unwrap().to_string();

    let mut tampered: Vec<char> = artifact.chars().collect();
    tampered[10] = if tampered[10] == 'a' { 'b' } else { 'a' };
    let tampered: String = tampered.into_iter().collect();
    assert_eq!(server.artifact(&tampered).await.0, 404);
    assert_eq!(server.artifact("not-a-hash").await.0, 404);
    assert_eq!(server.artifact(&artifact).await.0, 200);

    assert_eq!(server.get_json("/jobs/job-999999").await.0, 404);
    let resp = reqwest::get(server.url("/jobs/job-999999/events")).await.unwrap();
    assert_eq!(resp.status().as_u16(), 404);

    // The submitted mask is served back byte for byte.
    let mask_artifact = view["mask_artifact"].as_str().unwrap();
    let (_, mask) = server.artifact(mask_artifact).await;
    use base64::Engine;
    assert_eq!(
        mask,
        base64::engine::general_purpose::STANDARD.decode(common::mask_b64()).unwrap()
    );
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn vocab_describes_classes_size_and_guides() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path()).await;
    let (code, body) = server.get_json("/vocab").await;
    assert_eq!(code, 200);
    assert_eq!(body["classes"]["0"]["name"], "background");
    assert_eq!(body["classes"]["1"]["name"], "cat");
    assert_eq!(body["width"], toytask::SIZE);
    assert_eq!(body["height"], toytask::SIZE);
    assert_eq!(body["guides"][0]["classes"], json!([1, 2, 3, 4]));
    assert_eq!(body["defaults"]["alpha_clip"], 1.0);
    server.stop().await;
}
