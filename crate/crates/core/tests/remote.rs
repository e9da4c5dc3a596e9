use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use promptforge::env::wire::{EvaluateRequest, EvaluateResponse, InfoResponse, EVALUATE_PATH, INFO_PATH};
use promptforge::env::{Environment, RemoteConfig, RemoteEnv, RemoteTask, StubBackend, StubServer};
use promptforge::{Error, Example, Prompt, Vocabulary};

const TEMPLATE: &str = "{input} {prompt} {mask}";

fn info_body() -> String {
    serde_json::to_string(&InfoResponse {
        name: "fake".into(),
        mask_marker: "<mask>".into(),
        classes: Some(vec!["yes".into(), "no".into()]),
        deterministic_supported: true,
    })
    .unwrap()
}

/// Answers info, and evaluates with `f` applied to each (prompt, input) cell.
fn scoring_server(f: fn(&[String], &str) -> f64) -> StubServer {
    let handler = move |method: &str, path: &str, body: &str| -> (u16, String) {
        match (method, path) {
            ("GET", INFO_PATH) => (200, info_body()),
            ("POST", EVALUATE_PATH) => {
                let req: EvaluateRequest = serde_json::from_str(body).unwrap();
                let rewards = req.prompts.iter().map(|p| req.inputs.iter().map(|x| f(p, x)).collect()).collect();
                let probs = req.prompts.iter().map(|_| req.inputs.iter().map(|_| vec![0.5, 0.5]).collect()).collect();
                let resp = EvaluateResponse {
                    rewards,
                    class_probs: Some(probs),
                    outputs: None,
                };
                (200, serde_json::to_string(&resp).unwrap())
            }
            _ => (404, "{}".into()),
        }
    };
    StubServer::start("127.0.0.1:0", Arc::new(handler), 4).unwrap()
}

fn vocab(n: usize) -> Vocabulary {
    Vocabulary::new((0..n).map(|i| format!("v{i}"))).unwrap()
}

fn config(url: String) -> RemoteConfig {
    RemoteConfig {
        retries: 1,
        timeout_ms: 5_000,
        ..RemoteConfig::new(url, TEMPLATE, RemoteTask::Classification)
    }
}

fn labelled(n: usize) -> Vec<Example> {
    (0..n).map(|i| Example::labeled(format!("v{i} v{}", i + 1), i % 2)).collect()
}

#[test]
fn zero_handler_gives_zero_matrix() {
    let server = scoring_server(|_, _| 0.0);
    let v = vocab(8);
    let env = RemoteEnv::connect(config(server.url()), v.clone()).unwrap();
    let prompts: Vec<Prompt> = (0..3).map(|i| Prompt::new(vec![i, i + 1], &v).unwrap()).collect();
    let m = env.evaluate(&prompts, &labelled(5), 0).unwrap().rewards;
    assert_eq!((m.rows(), m.cols()), (3, 5));
    assert!(m.to_rows().iter().flatten().all(|&r| r == 0.0));
}

#[test]
fn malformed_response_is_a_schema_error() {
    let handler = |method: &str, path: &str, _: &str| -> (u16, String) {
        match (method, path) {
            ("GET", INFO_PATH) => (200, info_body()),
            _ => (200, "{\"rewards\": [[1.0, ".into()),
        }
    };
    let server = StubServer::start("127.0.0.1:0", Arc::new(handler), 1).unwrap();
    let v = vocab(4);
    let env = RemoteEnv::connect(config(server.url()), v.clone()).unwrap();
    let err = env.evaluate(&[Prompt::new(vec![0], &v).unwrap()], &labelled(1), 0).unwrap_err();
    assert!(matches!(err, Error::SchemaError(_)), "{err:?}");
}

#[test]
fn wrong_shape_is_rejected() {
    let handler = |method: &str, path: &str, _: &str| -> (u16, String) {
        match (method, path) {
            ("GET", INFO_PATH) => (200, info_body()),
            _ => (200, "{\"rewards\": [[1.0]]}".into()),
        }
    };
    let server = StubServer::start("127.0.0.1:0", Arc::new(handler), 1).unwrap();
    let v = vocab(4);
    let env = RemoteEnv::connect(config(server.url()), v.clone()).unwrap();
    assert!(env.evaluate(&[Prompt::new(vec![0], &v).unwrap()], &labelled(3), 0).is_err());
}

#[test]
fn batches_are_split_and_reassembled_in_order() {
    // Reward identifies the prompt: the numeric suffix of its first token.
    let server = scoring_server(|p, _| p[0][1..].parse::<f64>().unwrap());
    let v = vocab(64);
    let cfg = RemoteConfig {
        batch_cap: 16,
        parallelism: 4,
        ..config(server.url())
    };
    let env = RemoteEnv::connect(cfg, v.clone()).unwrap();
    let prompts: Vec<Prompt> = (0..64).map(|i| Prompt::new(vec![i], &v).unwrap()).collect();
    let m = env.evaluate(&prompts, &labelled(2), 0).unwrap().rewards;
    assert_eq!(env.call_count(), 4);
    for i in 0..64 {
        assert_eq!(m.row(i), &[i as f64, i as f64]);
    }
}

#[test]
fn round_trip_matches_in_process_classifier() {
    let backend = StubBackend::desk(0).unwrap();
    let local = backend.classifier().clone();
    let server = StubServer::start("127.0.0.1:0", Arc::new(backend), 2).unwrap();
    let cfg = RemoteConfig::new(server.url(), local.config().template.clone(), RemoteTask::Classification);
    let env = RemoteEnv::connect(cfg, local.vocab().clone()).unwrap();
    let examples = local.dataset(&[6, 6], 5, 3).unwrap();
    let prompts: Vec<Prompt> = [vec![3, 4], vec![0, 1], vec![7, 29], vec![12, 12]]
        .into_iter()
        .map(|ids| Prompt::new(ids, local.vocab()).unwrap())
        .collect();
    let remote = env.evaluate(&prompts, &examples, 0).unwrap();
    let inproc = local.evaluate(&prompts, &examples, 0).unwrap();
    let (rp, lp) = (remote.class_probs.unwrap(), inproc.class_probs.unwrap());
    for i in 0..prompts.len() {
        for j in 0..examples.len() {
            assert!((remote.rewards.get(i, j) - inproc.rewards.get(i, j)).abs() <= 1e-9);
            for (a, b) in rp[i][j].iter().zip(&lp[i][j]) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }
    let p = env.class_probabilities(&prompts[0], &examples[0]).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn info_schema_and_bad_post() {
    let server = StubServer::start("127.0.0.1:0", Arc::new(StubBackend::desk(1).unwrap()), 1).unwrap();
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut resp = agent.get(format!("{}{INFO_PATH}", server.url())).call().unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let info: serde_json::Value = serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap();
    assert!(info["name"].is_string() && info["mask_marker"].is_string());
    assert!(info["classes"].as_array().is_some_and(|c| c.len() == 2));
    assert_eq!(info["deterministic_supported"], serde_json::Value::Bool(true));

    let mut resp = agent
        .post(format!("{}{EVALUATE_PATH}", server.url()))
        .header("content-type", "application/json")
        .send("{\"task\": \"classification\", \"prompts\": 3}")
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    let body: serde_json::Value = serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap();
    assert!(body["error"].is_string());
}

#[test]
fn busy_server_is_retried() {
    static SEEN: AtomicUsize = AtomicUsize::new(0);
    let handler = |method: &str, path: &str, _: &str| -> (u16, String) {
        match (method, path) {
            ("GET", INFO_PATH) => (200, info_body()),
            _ if SEEN.fetch_add(1, Ordering::SeqCst) == 0 => (503, "{\"error\":\"busy\"}".into()),
            _ => (200, "{\"rewards\": [[0.5]], \"class_probs\": [[[0.5, 0.5]]]}".into()),
        }
    };
    let server = StubServer::start("127.0.0.1:0", Arc::new(handler), 1).unwrap();
    let v = vocab(4);
    let env = RemoteEnv::connect(config(server.url()), v.clone()).unwrap();
    let m = env.evaluate(&[Prompt::new(vec![1], &v).unwrap()], &labelled(1), 0).unwrap().rewards;
    assert_eq!(m.get(0, 0), 0.5);
    assert_eq!(env.call_count(), 2);
}

#[test]
fn unreachable_server_is_remote_unavailable() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = RemoteEnv::connect(config(format!("http://127.0.0.1:{port}")), vocab(4)).unwrap_err();
    assert!(matches!(err, Error::RemoteUnavailable(_)), "{err:?}");
}

#[test]
fn server_without_classes_is_refused_for_classification() {
    let handler = |_: &str, _: &str, _: &str| -> (u16, String) {
        (200, "{\"name\":\"x\",\"mask_marker\":\"<mask>\",\"deterministic_supported\":true}".into())
    };
    let server = StubServer::start("127.0.0.1:0", Arc::new(handler), 1).unwrap();
    assert!(matches!(RemoteEnv::connect(config(server.url()), vocab(4)), Err(Error::SchemaError(_))));
}
