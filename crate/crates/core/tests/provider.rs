mod common;

use ctxsynth::corpus::{Corpus, Document};
use ctxsynth::error::Error;
use ctxsynth::provider::{mock_generate, GenerationRequest, NgramTable, Provider, ProviderConfig, ProviderKind};
use ctxsynth::synthesis::{render_anchor_prompt, render_expansion_prompt, DELIMITER};

use common::stub::{completion, user_prompt, StubServer};

const KEY_ENV: &str = "CTXSYNTH_TEST_PROVIDER_KEY";

fn http_config(url: &str, max_retries: u32) -> ProviderConfig {
    std::env::set_var(KEY_ENV, "test-key");
    ProviderConfig {
        kind: ProviderKind::HttpChat,
        endpoint_url: url.into(),
        api_key_env: KEY_ENV.into(),
        max_retries,
        base_backoff_ms: 1,
        timeout_ms: 10_000,
        ..ProviderConfig::default()
    }
}

fn exemplars() -> Corpus {
    Corpus::new(
        "ex",
        vec![
            Document::new("e1", "the harbour authority reported record cargo volumes as container traffic rose sharply this quarter"),
            Document::new("e2", "dock workers at the northern terminal agreed a new shift pattern after talks with the port operator"),
            Document::new("e3", "shipping lines warned that congestion at the harbour could delay deliveries well into next month"),
        ],
    )
}

fn mock() -> Provider {
    Provider::new(ProviderConfig { mock_seed: 9, ..ProviderConfig::default() }, Some(NgramTable::from_corpus(&exemplars())))
        .unwrap()
}

#[test]
fn retry_after_rate_limit() {
    let server = StubServer::start(Box::new(|call, _| {
        if call == 0 {
            (429, r#"{"error":"slow down"}"#.into())
        } else {
            (200, completion("generated text"))
        }
    }));
    let p = Provider::new(http_config(&server.url, 5), None).unwrap();
    let r = p.complete(&GenerationRequest::new("hello", 64, "t")).unwrap();
    assert_eq!(r.text, "generated text");
    assert_eq!(r.attempt_count, 2);
    assert_eq!(server.calls(), 2);
    let body = &server.bodies()[0];
    assert_eq!(user_prompt(body), "hello");
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["model"], "gpt-4o-2024-11-20");
}

#[test]
fn retries_exhausted_is_transport_error() {
    let server = StubServer::start(Box::new(|_, _| (500, "{}".into())));
    let p = Provider::new(http_config(&server.url, 2), None).unwrap();
    match p.complete(&GenerationRequest::new("hello", 64, "t")) {
        Err(Error::Transport { attempts, status, .. }) => {
            assert_eq!(attempts, 3);
            assert_eq!(status, Some(500));
        }
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(server.calls(), 3);
}

#[test]
fn client_error_is_not_retried() {
    let server = StubServer::start(Box::new(|_, _| (400, r#"{"error":"bad request"}"#.into())));
    let p = Provider::new(http_config(&server.url, 5), None).unwrap();
    match p.complete(&GenerationRequest::new("hello", 64, "t")) {
        Err(Error::Request { status, body }) => {
            assert_eq!(status, 400);
            assert!(body.contains("bad request"));
        }
        other => panic!("expected request error, got {other:?}"),
    }
    assert_eq!(server.calls(), 1);
}

#[test]
fn empty_content_is_protocol_error() {
    let server = StubServer::start(Box::new(|_, _| (200, completion("   "))));
    let p = Provider::new(http_config(&server.url, 0), None).unwrap();
    assert!(matches!(p.complete(&GenerationRequest::new("hello", 64, "t")), Err(Error::Protocol(_))));
}

#[test]
fn missing_key_is_config_error() {
    let cfg = ProviderConfig {
        kind: ProviderKind::HttpChat,
        api_key_env: "CTXSYNTH_TEST_KEY_THAT_IS_NEVER_SET".into(),
        ..ProviderConfig::default()
    };
    assert!(matches!(Provider::new(cfg, None), Err(Error::Config(_))));
}

#[test]
fn mock_needs_a_table() {
    assert!(matches!(Provider::new(ProviderConfig::default(), None), Err(Error::Config(_))));
}

#[test]
fn mock_is_deterministic() {
    let p = mock();
    let req = GenerationRequest::new(render_anchor_prompt(&exemplars(), &[]), 512, "a");
    let a = p.complete(&req).unwrap();
    let b = p.complete(&req).unwrap();
    assert_eq!(a.text, b.text);
    assert_eq!(a.attempt_count, 1);
    assert_eq!(a.provider_name, "mock");
}

#[test]
fn mock_differs_across_anchors() {
    let table = NgramTable::from_corpus(&exemplars());
    let a = Document::new("anchor_1", "cargo volumes rose as container traffic grew at the harbour");
    let b = Document::new("anchor_2", "dock workers agreed a new shift pattern with the port operator");
    let ta = mock_generate(3, &render_expansion_prompt(&a, 1), 512, &table).unwrap();
    let tb = mock_generate(3, &render_expansion_prompt(&b, 1), 512, &table).unwrap();
    assert_ne!(ta, tb);
}

#[test]
fn mock_seed_changes_output() {
    let table = NgramTable::from_corpus(&exemplars());
    let prompt = render_anchor_prompt(&exemplars(), &[]);
    assert_ne!(mock_generate(1, &prompt, 512, &table).unwrap(), mock_generate(2, &prompt, 512, &table).unwrap());
}

#[test]
fn mock_expansion_splits_into_requested_count() {
    let table = NgramTable::from_corpus(&exemplars());
    let anchor = Document::new("anchor_1", "container traffic at the harbour");
    for count in [1, 3, 8] {
        let text = mock_generate(5, &render_expansion_prompt(&anchor, count), 512 * count, &table).unwrap();
        let parts = text.split(DELIMITER).map(str::trim).filter(|s| !s.is_empty()).count();
        assert_eq!(parts, count);
    }
}

#[test]
fn mock_output_uses_exemplar_vocabulary() {
    let table = NgramTable::from_corpus(&exemplars());
    let vocab: std::collections::HashSet<String> =
        exemplars().documents.iter().flat_map(|d| ctxsynth::corpus::tokenize(&d.text)).collect();
    let text = mock_generate(4, &render_anchor_prompt(&exemplars(), &[]), 512, &table).unwrap();
    let toks = ctxsynth::corpus::tokenize(&text);
    assert!(!toks.is_empty());
    assert!(toks.iter().all(|t| vocab.contains(t)));
}

#[test]
fn backoff_is_non_decreasing() {
    let cfg = ProviderConfig { base_backoff_ms: 250, ..ProviderConfig::default() };
    let ceilings: Vec<_> = (0..30).map(|a| cfg.backoff_ceiling(a)).collect();
    assert!(ceilings.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(ceilings[0].as_millis(), 250);
    assert_eq!(ceilings[3].as_millis(), 2000);
}

#[test]
fn empty_prompt_is_rejected() {
    assert!(matches!(mock().complete(&GenerationRequest::new("", 10, "t")), Err(Error::Argument(_))));
    assert!(matches!(mock().complete(&GenerationRequest::new("x", 0, "t")), Err(Error::Argument(_))));
}
