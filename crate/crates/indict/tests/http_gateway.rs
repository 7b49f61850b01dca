//! HTTP backend and adapter tests against a local mock server.

use std::sync::mpsc;

use indict::gateway::{Backend, BackendBinding, ChatMessage, CompletionRequest, GatewayError};
use indict::tools::{ExtractionRules, KnowledgeTool, WebSearchConfig, WebSearchTool};

struct Captured {
    body: serde_json::Value,
    authorization: Option<String>,
    url: String,
}

/// Serves scripted (status, body) responses for N requests on a local port,
/// reporting each captured request through a channel.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let server = tiny_http::Server::http("127.0.0.1:0").expect("bind local server");
    let addr = format!("http://{}", server.server_addr().to_ip().unwrap());
    let (sender, receiver) = mpsc::channel();
    std::thread::spawn(move || {
        for (status, body) in responses {
            let Ok(mut request) = server.recv() else {
                return;
            };
            let mut content = String::new();
            let _ = request.as_reader().read_to_string(&mut content);
            let authorization = request
                .headers()
                .iter()
                .find(|h| h.field.equiv("authorization"))
                .map(|h| h.value.as_str().to_string());
            let _ = sender.send(Captured {
                body: serde_json::from_str(&content).unwrap_or(serde_json::Value::Null),
                authorization,
                url: request.url().to_string(),
            });
            let response = tiny_http::Response::from_string(body).with_status_code(status);
            let _ = request.respond(response);
        }
    });
    (addr, receiver)
}

fn chat_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}]
    })
    .to_string()
}

fn request() -> CompletionRequest {
    CompletionRequest::build(
        vec![ChatMessage::system("be brief"), ChatMessage::user("say hi")],
        256,
        2048,
        0.0,
        Some(7),
    )
    .unwrap()
}

fn no_retry(mut binding: BackendBinding) -> BackendBinding {
    binding.retry_delays_ms = Some(vec![0, 0, 0]);
    binding
}

#[test]
fn http_backend_speaks_the_chat_completion_protocol() {
    let (addr, captured) = serve(vec![(200, chat_body("hello back"))]);
    let mut binding = no_retry(BackendBinding::http(addr, "test-model"));
    binding.auth_env_var = Some("INDICT_TEST_KEY_PROTO".to_string());
    std::env::set_var("INDICT_TEST_KEY_PROTO", "sekrit");

    let backend = Backend::new(binding).unwrap();
    let text = backend.complete(&request()).unwrap();
    assert_eq!(text, "hello back");

    let seen = captured.recv().unwrap();
    assert_eq!(seen.body["model"], "test-model");
    assert_eq!(seen.body["max_tokens"], 256);
    assert_eq!(seen.body["temperature"], 0.0);
    assert_eq!(seen.body["seed"], 7);
    let messages = seen.body["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 2);
    assert_eq!(messages[0]["role"], "system");
    assert_eq!(messages[1]["content"], "say hi");
    assert_eq!(seen.authorization.as_deref(), Some("Bearer sekrit"));
}

#[test]
fn transient_errors_are_retried_until_success() {
    let (addr, captured) = serve(vec![
        (500, "overloaded".to_string()),
        (503, "still overloaded".to_string()),
        (200, chat_body("third time lucky")),
    ]);
    let backend = Backend::new(no_retry(BackendBinding::http(addr, "m"))).unwrap();
    let text = backend.complete(&request()).unwrap();
    assert_eq!(text, "third time lucky");
    assert_eq!(captured.iter().count(), 3);
}

#[test]
fn persistent_failure_reports_status_and_attempts() {
    let (addr, _captured) = serve(vec![
        (500, "no".to_string()),
        (500, "no".to_string()),
        (500, "no".to_string()),
        (500, "no".to_string()),
    ]);
    let backend = Backend::new(no_retry(BackendBinding::http(addr, "m"))).unwrap();
    match backend.complete(&request()) {
        Err(GatewayError::BadStatus {
            status: 500,
            attempts: 4,
        }) => {}
        other => panic!("unexpected result: {other:?}"),
    }
}

#[test]
fn response_text_path_is_configurable() {
    let (addr, _captured) = serve(vec![(
        200,
        serde_json::json!({"output": {"segments": ["first segment text"]}}).to_string(),
    )]);
    let mut binding = no_retry(BackendBinding::http(addr, "m"));
    binding.response_text_path = Some("output.segments.0".to_string());
    let backend = Backend::new(binding).unwrap();
    assert_eq!(backend.complete(&request()).unwrap(), "first segment text");
}

#[test]
fn missing_text_at_path_is_an_error() {
    let (addr, _captured) = serve(vec![(200, "{\"choices\": []}".to_string())]);
    let backend = Backend::new(no_retry(BackendBinding::http(addr, "m"))).unwrap();
    assert!(matches!(
        backend.complete(&request()),
        Err(GatewayError::MissingResponseText(_))
    ));
}

#[test]
fn unresolvable_auth_variable_is_an_error() {
    let mut binding = no_retry(BackendBinding::http("http://127.0.0.1:9", "m"));
    binding.auth_env_var = Some("INDICT_TEST_KEY_DEFINITELY_UNSET".to_string());
    let backend = Backend::new(binding).unwrap();
    assert!(matches!(
        backend.complete(&request()),
        Err(GatewayError::MissingAuth(_))
    ));
}

#[test]
fn web_search_adapter_extracts_snippets_from_json() {
    let (addr, captured) = serve(vec![(
        200,
        serde_json::json!({
            "results": [
                {"title": "OWASP command injection", "snippet": "Neutralize shell metacharacters."},
                {"title": "CWE-78", "snippet": "OS command injection weakness."},
                {"title": "Extra", "snippet": "Third hit."},
                {"title": "Beyond cap", "snippet": "Never returned."},
            ]
        })
        .to_string(),
    )]);
    let tool = WebSearchTool::new(WebSearchConfig {
        endpoint: addr,
        query_param: "q".to_string(),
        api_key_env: None,
        api_key_param: None,
        extraction: ExtractionRules::Json {
            results_path: "results".to_string(),
            title_key: "title".to_string(),
            excerpt_key: "snippet".to_string(),
        },
        max_snippets: 3,
        excerpt_chars: 500,
        timeout_ms: 5_000,
    });
    let snippets = tool.search("CWE-78 mitigation").unwrap();
    assert_eq!(snippets.len(), 3);
    assert_eq!(snippets[0].title, "OWASP command injection");

    let seen = captured.recv().unwrap();
    assert!(seen.url.contains("q=CWE-78"), "url: {}", seen.url);
}

#[test]
fn failing_web_endpoint_surfaces_as_a_tool_error() {
    let (addr, _captured) = serve(vec![(404, "not here".to_string())]);
    let tool = WebSearchTool::new(WebSearchConfig {
        endpoint: addr,
        query_param: "q".to_string(),
        api_key_env: None,
        api_key_param: None,
        extraction: ExtractionRules::Json {
            results_path: "results".to_string(),
            title_key: "title".to_string(),
            excerpt_key: "snippet".to_string(),
        },
        max_snippets: 3,
        excerpt_chars: 500,
        timeout_ms: 5_000,
    });
    assert!(tool.search("anything").is_err());
}
