//! Remote backend behavior against a local scripted HTTP server: payload
//! parsing, retry and fatal-status classification, disk caching, and
//! credential containment.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use statebind_core::agents::{DiagnosticCategory, EndpointConfig, RemoteAgent};
use statebind_core::ontology::{ActionCode, ConditionName};
use statebind_core::probes::{builtin_families, generate_events};
use statebind_core::records::{ParseStatus, ProbeRecord};

struct Received {
    headers: String,
    body: String,
}

/// Serves the scripted (status, body) responses in order, one connection
/// each, and reports every request over the channel.
fn scripted_server(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Received>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base_url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = match listener.accept() {
                Ok(pair) => pair,
                Err(_) => return,
            };
            stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
            let mut buffer = Vec::new();
            let mut chunk = [0u8; 1024];
            let header_end = loop {
                match stream.read(&mut chunk) {
                    Ok(0) => return,
                    Ok(n) => buffer.extend_from_slice(&chunk[..n]),
                    Err(_) => return,
                }
                if let Some(pos) = buffer.windows(4).position(|w| w == b"\r\n\r\n") {
                    break pos + 4;
                }
            };
            let headers = String::from_utf8_lossy(&buffer[..header_end]).to_string();
            let content_length = headers
                .lines()
                .find_map(|line| {
                    let (name, value) = line.split_once(':')?;
                    name.eq_ignore_ascii_case("content-length")
                        .then(|| value.trim().parse::<usize>().ok())?
                })
                .unwrap_or(0);
            while buffer.len() < header_end + content_length {
                match stream.read(&mut chunk) {
                    Ok(0) => break,
                    Ok(n) => buffer.extend_from_slice(&chunk[..n]),
                    Err(_) => break,
                }
            }
            let body_text = String::from_utf8_lossy(&buffer[header_end..]).to_string();
            let _ = tx.send(Received { headers, body: body_text });
            let reason = match status {
                200 => "OK",
                401 => "Unauthorized",
                429 => "Too Many Requests",
                500 => "Internal Server Error",
                _ => "Status",
            };
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len(),
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    (base_url, rx)
}

fn sample_probe() -> ProbeRecord {
    let family = builtin_families()
        .into_iter()
        .find(|f| f.family_id == "synth_choice_a")
        .expect("builtin family");
    generate_events(&family, &ConditionName::ALL, 5)
        .unwrap()
        .into_iter()
        .next()
        .unwrap()
}

fn endpoint(base_url: &str, env_name: &str, key: &str) -> EndpointConfig {
    std::env::set_var(env_name, key);
    EndpointConfig {
        base_url: base_url.to_string(),
        model: "probe-model".to_string(),
        api_key_env: env_name.to_string(),
        retries: 0,
        retry_base_ms: 1,
        timeout_secs: 5,
        ..EndpointConfig::default()
    }
}

fn good_body(content: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"content": content}}],
        "usage": {"prompt_tokens": 21, "completion_tokens": 7, "total_tokens": 28},
    })
    .to_string()
}

#[test]
fn successful_payload_parses_content_and_usage() {
    let (base_url, rx) = scripted_server(vec![(200, good_body("I go with option A."))]);
    let config = endpoint(&base_url, "STATEBIND_TEST_KEY_OK", "sk-test-ok");
    let agent = RemoteAgent::new(config).unwrap();
    let probe = sample_probe();
    let response = agent.generate(&probe, 7);
    assert_eq!(response.parse_status, ParseStatus::Ok);
    assert_eq!(response.raw_output, "I go with option A.");
    assert_eq!(response.meta.prompt_tokens, Some(21));
    assert_eq!(response.meta.completion_tokens, Some(7));
    assert_eq!(response.meta.total_tokens, Some(28));
    assert!(response.diagnostic.is_none());

    let received = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert!(received.headers.contains("authorization: Bearer sk-test-ok")
        || received.headers.contains("Authorization: Bearer sk-test-ok"));
    let body: serde_json::Value = serde_json::from_str(&received.body).unwrap();
    assert_eq!(body["model"], "probe-model");
    assert_eq!(body["seed"], 7);
    let prompt = body["messages"][0]["content"].as_str().unwrap();
    assert!(prompt.contains("Answer with exactly one action"));
}

#[test]
fn transient_failure_retries_then_succeeds() {
    let (base_url, rx) = scripted_server(vec![
        (500, "{\"error\":\"overloaded\"}".to_string()),
        (200, good_body("Veto this request.")),
    ]);
    let mut config = endpoint(&base_url, "STATEBIND_TEST_KEY_RETRY", "sk-test-retry");
    config.retries = 2;
    let agent = RemoteAgent::new(config).unwrap();
    let response = agent.generate(&sample_probe(), 11);
    assert_eq!(response.parse_status, ParseStatus::Ok);
    assert_eq!(response.raw_output, "Veto this request.");
    let mut requests = 0;
    while rx.recv_timeout(Duration::from_millis(500)).is_ok() {
        requests += 1;
    }
    assert_eq!(requests, 2, "one failure plus one retry");
}

#[test]
fn auth_rejection_is_fatal_without_retry() {
    let (base_url, rx) = scripted_server(vec![
        (401, "{\"error\":\"bad key\"}".to_string()),
        (200, good_body("never reached")),
    ]);
    let mut config = endpoint(&base_url, "STATEBIND_TEST_KEY_AUTH", "sk-test-auth");
    config.retries = 3;
    let agent = RemoteAgent::new(config).unwrap();
    let response = agent.generate(&sample_probe(), 13);
    assert_eq!(response.parse_status, ParseStatus::Unrecovered);
    assert_eq!(response.diagnostic, Some(DiagnosticCategory::Auth));
    assert_eq!(response.raw_output, "");
    let mut requests = 0;
    while rx.recv_timeout(Duration::from_millis(500)).is_ok() {
        requests += 1;
    }
    assert_eq!(requests, 1, "a credential rejection must not be retried");
}

#[test]
fn non_json_payload_is_a_parse_error() {
    let (base_url, _rx) = scripted_server(vec![(200, "<html>proxy error</html>".to_string())]);
    let config = endpoint(&base_url, "STATEBIND_TEST_KEY_HTML", "sk-test-html");
    let agent = RemoteAgent::new(config).unwrap();
    let response = agent.generate(&sample_probe(), 17);
    assert_eq!(response.parse_status, ParseStatus::ParseError);
    assert_eq!(response.diagnostic, Some(DiagnosticCategory::PayloadNotObject));
    assert_eq!(response.raw_output, "<html>proxy error</html>");
}

#[test]
fn payload_without_content_reports_the_missing_field() {
    let (base_url, _rx) =
        scripted_server(vec![(200, "{\"choices\":[{\"message\":{}}]}".to_string())]);
    let config = endpoint(&base_url, "STATEBIND_TEST_KEY_EMPTY", "sk-test-empty");
    let agent = RemoteAgent::new(config).unwrap();
    let response = agent.generate(&sample_probe(), 19);
    assert_eq!(response.parse_status, ParseStatus::ParseError);
    assert_eq!(response.diagnostic, Some(DiagnosticCategory::MissingContent));
}

#[test]
fn structured_content_becomes_a_trace_bundle() {
    let content = serde_json::json!({
        "first_impulse": "lean toward the first option",
        "candidate_actions": ["ACTION_A", "VETO"],
        "reason_graph": "ACTION_A consistent with brief",
        "final_action": "ACTION_A",
        "final_action_rationale": "matches the standing choice",
    })
    .to_string();
    let (base_url, _rx) = scripted_server(vec![(200, good_body(&content))]);
    let config = endpoint(&base_url, "STATEBIND_TEST_KEY_TRACE", "sk-test-trace");
    let agent = RemoteAgent::new(config).unwrap();
    let response = agent.generate(&sample_probe(), 23);
    assert_eq!(response.parse_status, ParseStatus::Ok);
    let trace = response.trace.expect("structured content parses into a trace");
    assert_eq!(trace.final_action, "ACTION_A");
    assert_eq!(trace.candidate_actions, vec!["ACTION_A", "VETO"]);
}

#[test]
fn cache_serves_repeat_calls_without_new_requests() {
    let cache = tempfile::tempdir().unwrap();
    let (base_url, rx) = scripted_server(vec![(200, good_body("Defer for now."))]);
    let mut config = endpoint(&base_url, "STATEBIND_TEST_KEY_CACHE", "sk-test-cache");
    config.cache_dir = Some(cache.path().to_path_buf());
    let agent = RemoteAgent::new(config).unwrap();
    let probe = sample_probe();
    let first = agent.generate(&probe, 29);
    let second = agent.generate(&probe, 29);
    assert_eq!(first.parse_status, ParseStatus::Ok);
    assert_eq!(first.raw_output, second.raw_output);
    assert_eq!(first.trace, second.trace);
    let mut requests = 0;
    while rx.recv_timeout(Duration::from_millis(500)).is_ok() {
        requests += 1;
    }
    assert_eq!(requests, 1, "second call must come from the cache");

    // The credential reaches the wire but never the cache files.
    let mut cached_files = 0;
    for entry in std::fs::read_dir(cache.path()).unwrap() {
        let path = entry.unwrap().path();
        let bytes = std::fs::read(&path).unwrap();
        assert!(
            !bytes.windows(b"sk-test-cache".len()).any(|w| w == b"sk-test-cache"),
            "{} holds the api key",
            path.display()
        );
        cached_files += 1;
    }
    assert_eq!(cached_files, 1);
}

#[test]
fn missing_credentials_name_both_sources() {
    std::env::remove_var("STATEBIND_TEST_KEY_ABSENT");
    let config = EndpointConfig {
        base_url: "http://127.0.0.1:9".to_string(),
        api_key_env: "STATEBIND_TEST_KEY_ABSENT".to_string(),
        ..EndpointConfig::default()
    };
    let Err(err) = RemoteAgent::new(config) else {
        panic!("an unset env var and no key file must fail construction");
    };
    let message = err.to_string();
    assert!(message.contains("STATEBIND_TEST_KEY_ABSENT"), "{message}");
    assert!(message.contains("none configured"), "{message}");
}

#[test]
fn distinct_seeds_and_prompts_use_distinct_cache_slots() {
    let cache = tempfile::tempdir().unwrap();
    let (base_url, _rx) = scripted_server(vec![
        (200, good_body("Go with option A.")),
        (200, good_body("Go with option B.")),
    ]);
    let mut config = endpoint(&base_url, "STATEBIND_TEST_KEY_SLOTS", "sk-test-slots");
    config.cache_dir = Some(cache.path().to_path_buf());
    let agent = RemoteAgent::new(config).unwrap();
    let probe = sample_probe();
    let first = agent.generate(&probe, 1);
    let second = agent.generate(&probe, 2);
    assert_eq!(first.raw_output, "Go with option A.");
    assert_eq!(second.raw_output, "Go with option B.");
    assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), 2);
    // Both outputs still canonicalize to their distinct codes.
    assert_eq!(statebind_core::ontology::canonicalize(&first.raw_output), ActionCode::ActionA);
    assert_eq!(statebind_core::ontology::canonicalize(&second.raw_output), ActionCode::ActionB);
}
