#![cfg(feature = "http")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rmisel_core::corpus::{Sample, ScoreCache};
use rmisel_core::scoring::{
    score_sample, score_span, Backend, BackendDescriptor, BackendKind, HttpProtocol, HttpScorer,
    NgramConfig, ScoreStatus, ScoringContext,
};
use rmisel_core::templating::{Direction, TemplateLibrary, TemplateVariant};
use rmisel_core::Error;
use serde_json::{json, Value};

struct Seen {
    bodies: Vec<Value>,
    request_ids: Vec<String>,
}

/// Minimal HTTP/1.1 server: one request per connection, answered by `handler`
/// with (status, json body). Returns the endpoint URL, request counter and log.
fn serve<F>(handler: F) -> (String, Arc<AtomicUsize>, Arc<Mutex<Seen>>)
where
    F: Fn(usize, &Value) -> (u16, String) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/score", listener.local_addr().unwrap());
    let count = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(Mutex::new(Seen { bodies: vec![], request_ids: vec![] }));
    let (c, s) = (count.clone(), seen.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut request_id = String::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((name, value)) = line.split_once(':') {
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => len = value.trim().parse().unwrap_or(0),
                        "x-request-id" => request_id = value.trim().to_owned(),
                        _ => {}
                    }
                }
            }
            let mut body = vec![0u8; len];
            if reader.read_exact(&mut body).is_err() {
                continue;
            }
            let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let n = c.fetch_add(1, Ordering::SeqCst);
            let (status, payload) = handler(n, &body);
            {
                let mut s = s.lock().unwrap();
                s.bodies.push(body);
                s.request_ids.push(request_id);
            }
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    (url, count, seen)
}

fn descriptor(url: &str, protocol: HttpProtocol) -> BackendDescriptor {
    BackendDescriptor {
        kind: BackendKind::HttpTeacherForcing,
        endpoint: Some(url.to_owned()),
        protocol,
        max_retries: 2,
        timeout_secs: 5,
        ..BackendDescriptor::builtin("remote-model", NgramConfig::default())
    }
}

fn backend(url: &str, protocol: HttpProtocol) -> Backend {
    let desc = descriptor(url, protocol);
    let scorer = HttpScorer::new(&desc).unwrap().with_backoff(Duration::from_millis(1));
    Backend::with_scorer(desc, Box::new(scorer))
}

fn sample() -> Sample {
    Sample::new("s1", "how does quicksort partition", "it picks a pivot and splits the array")
}

/// Every whitespace token of the target gets log-probability -0.5.
fn teacher_forcing(_: usize, body: &Value) -> (u16, String) {
    let target = body["target"].as_str().unwrap_or_default();
    let tokens: Vec<&str> = target.split_whitespace().collect();
    let resp = json!({
        "target_tokens": tokens,
        "logprobs": vec![-0.5; tokens.len()],
        "context_token_count": 7,
    });
    (200, resp.to_string())
}

#[test]
fn teacher_forcing_round_trip() {
    let (url, count, seen) = serve(teacher_forcing);
    let backend = backend(&url, HttpProtocol::TeacherForcing);
    let lib = TemplateLibrary::builtin();
    let cache = ScoreCache::in_memory();
    let ctx = ScoringContext { library: &lib, cache: &cache };
    let rec = score_sample(&sample(), &backend, &ctx, TemplateVariant::Standard, &Direction::ALL);
    assert_eq!(rec.status, ScoreStatus::Ok, "{:?}", rec.failures);
    assert_eq!(count.load(Ordering::SeqCst), 4);
    let e_half = 0.5f64.exp();
    for ppl in [rec.ppl_q, rec.ppl_q_given_a, rec.ppl_a, rec.ppl_a_given_q] {
        assert!((ppl.unwrap() - e_half).abs() < 1e-12);
    }
    assert_eq!(rec.rmi, Some(0.0));
    assert_eq!(rec.ifd, Some(1.0));

    let seen = seen.lock().unwrap();
    let reverse = seen
        .bodies
        .iter()
        .find(|b| b["context"].as_str().unwrap().contains("TASK:"))
        .expect("a reverse-task request");
    assert_eq!(reverse["model"], "remote-model");
    assert_eq!(reverse["target"], "how does quicksort partition");
    assert!(reverse["context"].as_str().unwrap().contains("it picks a pivot"));
    // request ids are stable per (sample, model, variant, direction)
    assert!(seen.request_ids.iter().all(|id| id.len() == 32));
    let mut ids = seen.request_ids.clone();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 4);
}

#[test]
fn openai_echo_adapter_slices_the_target() {
    // One token per character; every echoed token except the first scores -1.
    let (url, _, _) = serve(|_, body| {
        let prompt = body["prompt"].as_str().unwrap_or_default();
        assert_eq!(body["echo"], true);
        assert_eq!(body["max_tokens"], 1);
        let chars: Vec<String> = prompt.chars().map(String::from).collect();
        let lps: Vec<Option<f64>> = (0..chars.len()).map(|i| (i > 0).then_some(-1.0)).collect();
        let offsets: Vec<usize> = (0..chars.len()).collect();
        let resp = json!({"choices": [{"logprobs": {
            "tokens": chars, "token_logprobs": lps, "text_offset": offsets
        }}]});
        (200, resp.to_string())
    });
    let backend = backend(&url, HttpProtocol::OpenaiEcho);
    let lib = TemplateLibrary::builtin();
    let plan = lib
        .plan(&sample(), TemplateVariant::Standard, "deepseek-coder", Direction::QUnconditional)
        .unwrap();
    let out = score_span(&plan, &backend).unwrap();
    assert_eq!(out.tokens.concat(), plan.target_text);
    assert_eq!(out.context_token_count, plan.context_text.chars().count());
    assert!(out.logprobs.iter().all(|&lp| lp == -1.0));
}

#[test]
fn transient_errors_are_retried() {
    let (url, count, _) = serve(|n, body| {
        if n < 2 {
            (503, "{}".into())
        } else {
            teacher_forcing(n, body)
        }
    });
    let backend = backend(&url, HttpProtocol::TeacherForcing);
    let lib = TemplateLibrary::builtin();
    let plan = lib
        .plan(&sample(), TemplateVariant::Standard, "deepseek-coder", Direction::AGivenQ)
        .unwrap();
    let out = score_span(&plan, &backend).unwrap();
    assert_eq!(out.logprobs.len(), 8);
    assert_eq!(count.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_failure_gives_up_after_retries() {
    let (url, count, _) = serve(|_, _| (500, "{}".into()));
    let backend = backend(&url, HttpProtocol::TeacherForcing);
    let lib = TemplateLibrary::builtin();
    let plan = lib
        .plan(&sample(), TemplateVariant::Standard, "deepseek-coder", Direction::AGivenQ)
        .unwrap();
    let err = score_span(&plan, &backend).unwrap_err();
    assert!(matches!(err, Error::Backend(_)), "{err}");
    assert_eq!(count.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, count, _) = serve(|_, _| (400, r#"{"detail":"bad model"}"#.into()));
    let backend = backend(&url, HttpProtocol::TeacherForcing);
    let lib = TemplateLibrary::builtin();
    let plan = lib
        .plan(&sample(), TemplateVariant::Standard, "deepseek-coder", Direction::AGivenQ)
        .unwrap();
    let err = score_span(&plan, &backend).unwrap_err();
    assert!(err.to_string().contains("bad model"), "{err}");
    assert_eq!(count.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_responses_are_protocol_errors() {
    let (url, _, _) = serve(|_, _| (200, r#"{"target_tokens":["a","b"],"logprobs":[-1.0],"context_token_count":0}"#.into()));
    let backend = backend(&url, HttpProtocol::TeacherForcing);
    let lib = TemplateLibrary::builtin();
    let cache = ScoreCache::in_memory();
    let ctx = ScoringContext { library: &lib, cache: &cache };
    let rec = score_sample(&sample(), &backend, &ctx, TemplateVariant::Standard, &Direction::ALL);
    assert_eq!(rec.status, ScoreStatus::Failed);
    assert_eq!(rec.failures.len(), 4);
    assert!(rec.failures.values().all(|m| m.contains("protocol") || m.contains("logprobs")));
    assert!(cache.is_empty());
}

#[test]
fn positive_logprobs_rejected_when_normalized() {
    let (url, _, _) = serve(|_, _| (200, r#"{"target_tokens":["a"],"logprobs":[0.3],"context_token_count":0}"#.into()));
    let backend = backend(&url, HttpProtocol::TeacherForcing);
    let lib = TemplateLibrary::builtin();
    let plan = lib
        .plan(&sample(), TemplateVariant::Standard, "deepseek-coder", Direction::AGivenQ)
        .unwrap();
    let err = score_span(&plan, &backend).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
}
