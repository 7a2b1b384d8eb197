mod common;

use std::sync::Arc;
use std::time::Duration;

use common::*;
use genrank::backends::cache::ScoreCache;
use genrank::backends::mock::MockConfig;
use genrank::backends::{BackendEndpoint, BackendError, Client, ClientOptions};

fn client() -> Client {
    Client::new(ClientOptions {
        retry_backoff: Duration::from_millis(5),
        ..Default::default()
    })
    .unwrap()
}

fn cached_client(dir: &std::path::Path) -> Client {
    Client::new(ClientOptions {
        retry_backoff: Duration::from_millis(5),
        cache: Some(Arc::new(ScoreCache::open(dir).unwrap())),
        ..Default::default()
    })
    .unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn fixed_logprob_scores_every_token() {
    let mock = start_mock_with(MockConfig {
        fixed_logprob: Some(-1.0),
        ..Default::default()
    })
    .await;
    let ep = BackendEndpoint::new(mock.base_url(), "m");
    let seq = client()
        .score_logprobs(&ep, "", "one two three")
        .await
        .unwrap();
    assert_eq!(seq.token_count, 3);
    assert_eq!(seq.logprobs().collect::<Vec<_>>(), vec![-1.0, -1.0, -1.0]);
    assert!(!seq.truncated);
}

#[tokio::test(flavor = "multi_thread")]
async fn hashed_logprobs_match_oracle() {
    let mock = start_mock().await;
    let ep = BackendEndpoint::new(mock.base_url(), BASE_MODEL);
    let seq = client().score_logprobs(&ep, "", "a b").await.unwrap();
    assert_eq!(seq.token_count, 2);
    for (s, tok) in seq.scores.iter().zip(["a", "b"]) {
        assert_eq!(s.token_text, tok);
        assert!((-2.0..=-1.0).contains(&s.logprob));
        assert_eq!(s.logprob, oracle_logprob(BASE_MODEL, tok));
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn context_tokens_are_not_scored() {
    let mock = start_mock().await;
    let ep = BackendEndpoint::new(mock.base_url(), BASE_MODEL);
    let seq = client()
        .score_logprobs(&ep, "Explain gravity please\n", "Mass attracts mass.")
        .await
        .unwrap();
    let texts: Vec<&str> = seq.scores.iter().map(|s| s.token_text.as_str()).collect();
    assert_eq!(texts, vec!["Mass", "attracts", "mass."]);
}

#[tokio::test(flavor = "multi_thread")]
async fn long_continuation_is_truncated() {
    let mock = start_mock().await;
    let ep = BackendEndpoint::new(mock.base_url(), BASE_MODEL).with_max_context_tokens(5);
    let c = client();
    let seq = c.score_logprobs(&ep, "x y\n", "a b c d e f").await.unwrap();
    assert!(seq.truncated);
    assert_eq!(seq.token_count, 3);
    let texts: Vec<&str> = seq.scores.iter().map(|s| s.token_text.as_str()).collect();
    assert_eq!(texts, vec!["a", "b", "c"]);

    let err = c.score_logprobs(&ep, "1 2 3 4 5\n", "a").await.unwrap_err();
    assert!(
        matches!(err, BackendError::ContextTooLong { max: 5, .. }),
        "{err:?}"
    );
}

#[tokio::test(flavor = "multi_thread")]
async fn reward_is_byte_length_mod_seven() {
    let mock = start_mock().await;
    let ep = BackendEndpoint::new(mock.base_url(), REWARD_MODEL);
    let c = client();
    let r = c.score_reward(&ep, "Say hi", "Hello!").await.unwrap();
    assert_eq!(r.value, 6.0 / 7.0);
    assert_eq!(r.reward_model_id, REWARD_MODEL);
    assert_eq!(c.score_reward(&ep, "Say hi", "").await.unwrap().value, 0.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn unreachable_endpoint_is_unavailable() {
    // Bind then drop to get a port with nothing listening.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let ep = BackendEndpoint::new(format!("http://127.0.0.1:{port}"), "m").with_max_retries(1);
    let err = client().score_logprobs(&ep, "", "hi").await.unwrap_err();
    match err {
        BackendError::Unavailable { attempts, .. } => assert_eq!(attempts, 2),
        other => panic!("expected Unavailable, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_arguments_fail_before_any_request() {
    let mock = start_mock().await;
    let ep = BackendEndpoint::new(mock.base_url(), "g");
    let c = client();
    assert!(matches!(
        c.score_logprobs(&ep, "ctx", "").await,
        Err(BackendError::Argument(_))
    ));
    assert!(matches!(
        c.generate_responses(&ep, "q", 0, 0.8, 1.0, 0).await,
        Err(BackendError::Argument(_))
    ));
    assert!(matches!(
        c.generate_responses(&ep, "q", 3, 0.0, 1.0, 0).await,
        Err(BackendError::Argument(_))
    ));
    assert!(matches!(
        c.generate_responses(&ep, "q", 2, 0.8, 0.0, 0).await,
        Err(BackendError::Argument(_))
    ));
    assert_eq!(mock.stats().requests, 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn generation_is_seeded() {
    let mock = start_mock().await;
    let ep = BackendEndpoint::new(mock.base_url(), "gen");
    let c = client();
    let a = c
        .generate_responses(&ep, "Write a poem", 4, 0.8, 0.9, 7)
        .await
        .unwrap();
    let b = c
        .generate_responses(&ep, "Write a poem", 4, 0.8, 0.9, 7)
        .await
        .unwrap();
    let other = c
        .generate_responses(&ep, "Write a poem", 4, 0.8, 0.9, 8)
        .await
        .unwrap();
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
    assert_ne!(a, other);

    let g1 = c
        .generate_responses(&ep, "Write a poem", 1, 0.0, 1.0, 1)
        .await
        .unwrap();
    let g2 = c
        .generate_responses(&ep, "Write a poem", 1, 0.0, 1.0, 2)
        .await
        .unwrap();
    assert_eq!(g1, g2, "greedy output ignores the seed");
}

#[tokio::test(flavor = "multi_thread")]
async fn transient_failures_are_retried() {
    let mock = start_mock_with(MockConfig {
        fail_first: 2,
        ..Default::default()
    })
    .await;
    let ep = BackendEndpoint::new(mock.base_url(), BASE_MODEL).with_max_retries(3);
    let seq = client().score_logprobs(&ep, "", "retry me").await.unwrap();
    let fresh = start_mock().await;
    let ep2 = BackendEndpoint::new(fresh.base_url(), BASE_MODEL);
    assert_eq!(
        seq,
        client().score_logprobs(&ep2, "", "retry me").await.unwrap()
    );
    assert_eq!(mock.stats().requests, 3);

    let flaky = start_mock_with(MockConfig {
        fail_first: 10,
        ..Default::default()
    })
    .await;
    let ep3 = BackendEndpoint::new(flaky.base_url(), BASE_MODEL).with_max_retries(2);
    assert!(matches!(
        client().score_reward(&ep3, "q", "r").await,
        Err(BackendError::Unavailable { attempts: 3, .. })
    ));
}

#[tokio::test(flavor = "multi_thread")]
async fn cache_answers_repeats_without_requests() {
    let mock = start_mock().await;
    let dir = tempfile::tempdir().unwrap();
    let ep = BackendEndpoint::new(mock.base_url(), BASE_MODEL);
    let rm = BackendEndpoint::new(mock.base_url(), REWARD_MODEL);
    let c = cached_client(dir.path());

    let first = c.score_logprobs(&ep, "ctx\n", "some words").await.unwrap();
    let again = c.score_logprobs(&ep, "ctx\n", "some words").await.unwrap();
    assert_eq!(first, again);
    assert_eq!(mock.stats().completions, 1);

    // A different context is a different key.
    c.score_logprobs(&ep, "other\n", "some words")
        .await
        .unwrap();
    assert_eq!(mock.stats().completions, 2);
    // So is a different model.
    let ep_b = BackendEndpoint::new(mock.base_url(), REF_MODEL);
    c.score_logprobs(&ep_b, "ctx\n", "some words")
        .await
        .unwrap();
    assert_eq!(mock.stats().completions, 3);

    let r1 = c.score_reward(&rm, "q", "resp").await.unwrap();
    let r2 = c.score_reward(&rm, "q", "resp").await.unwrap();
    assert_eq!(r1, r2);
    assert_eq!(mock.stats().rewards, 1);

    // Reopened cache keeps everything; no further requests.
    drop(c);
    let c2 = cached_client(dir.path());
    assert_eq!(
        c2.score_logprobs(&ep, "ctx\n", "some words").await.unwrap(),
        first
    );
    assert_eq!(c2.score_reward(&rm, "q", "resp").await.unwrap(), r1);
    assert_eq!(mock.stats().requests, 4);
}

#[tokio::test(flavor = "multi_thread")]
async fn cached_and_uncached_results_agree() {
    let mock = start_mock().await;
    let dir = tempfile::tempdir().unwrap();
    let ep = BackendEndpoint::new(mock.base_url(), BASE_MODEL);
    let plain = client();
    let cached = cached_client(dir.path());
    for text in ["alpha beta", "x\ny z", "ünï cödé words"] {
        let a = plain.score_logprobs(&ep, "p\n", text).await.unwrap();
        let _ = cached.score_logprobs(&ep, "p\n", text).await.unwrap();
        let b = cached.score_logprobs(&ep, "p\n", text).await.unwrap();
        assert_eq!(a, b);
        let expected: Vec<f64> = oracle_tokens(text)
            .iter()
            .map(|t| oracle_logprob(BASE_MODEL, t))
            .collect();
        assert_eq!(a.logprobs().collect::<Vec<_>>(), expected);
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn missing_capability_is_reported() {
    use axum::Router;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, Router::new()).await.unwrap();
    });
    let ep = BackendEndpoint::new(format!("http://{addr}"), "m");
    let err = client().score_reward(&ep, "q", "r").await.unwrap_err();
    assert!(matches!(err, BackendError::Capability { .. }), "{err:?}");
}
