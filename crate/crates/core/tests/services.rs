//! Generation and judging against an in-process OpenAI-compatible server.

use std::time::Duration;

use serde_json::{json, Value};

use unlearn_core::api::{ApiClient, RetryPolicy};
use unlearn_core::dataset::conversation::{Dialogue, Role, Turn};
use unlearn_core::dataset::generate::{generate_all, GenerationConfig, Recipe};
use unlearn_core::dataset::expand;
use unlearn_core::eval::{run_judge_eval, run_pii_eval, EvalSample, JudgeConfig, PiiEvalConfig, QaItem, Verdict};
use unlearn_core::guidance::{GuidanceSpec, Variant};
use unlearn_core::lm::{TabularLM, Vocabulary};
use unlearn_core::mock_http::{MockRequest, MockResponse, MockServer};
use unlearn_core::pii::{Label, PiiDetector};
use unlearn_core::prompts::USER_NUDGE;
use unlearn_core::Error;

fn reply(req: &MockRequest, text: &str) -> MockResponse {
    if req.path.ends_with("/chat/completions") {
        MockResponse::json(json!({"choices": [{"message": {"role": "assistant", "content": text}}]}))
    } else {
        MockResponse::json(json!({"choices": [{"text": text}]}))
    }
}

fn client(server: &MockServer, attempts: u32) -> ApiClient {
    let retry = RetryPolicy {
        max_attempts: attempts,
        initial_backoff_ms: 1,
        max_backoff_ms: 2,
    };
    ApiClient::new(&server.url(), Some("k".into()), retry, Duration::from_secs(5)).unwrap()
}

fn detector() -> PiiDetector {
    PiiDetector::builder()
        .gazetteer(Label::Person, ["Alice"])
        .gazetteer(Label::Gpe, ["Paris"])
        .build()
        .unwrap()
}

fn sample_dialogue() -> Dialogue {
    Dialogue::new(
        "d1",
        vec![
            Turn::new(Role::System, "You are helpful."),
            Turn::new(Role::User, "Who lives in the flat?"),
            Turn::new(Role::Assistant, "The tenant is Alice from Paris."),
        ],
    )
    .unwrap()
}

#[test]
fn every_recipe_issues_its_own_request() {
    let server = MockServer::start(|r| reply(r, "A tenant lives there."));
    let samples = expand(&sample_dialogue(), &detector());
    assert_eq!(samples.len(), 2);
    let cfg = GenerationConfig::default();
    let out = generate_all(&samples, &client(&server, 1), &cfg).unwrap();

    assert!(out.failures.is_empty());
    assert_eq!(out.candidates.len(), 2 * Recipe::ALL.len());
    for recipe in Recipe::ALL {
        assert_eq!(out.candidates.iter().filter(|c| c.recipe == recipe).count(), 2);
    }
    let reqs = server.requests();
    assert_eq!(reqs.len(), 8);
    let chat = reqs.iter().filter(|r| r.path == "/v1/chat/completions").count();
    assert_eq!(chat, 4);
    assert!(reqs.iter().all(|r| r.header("authorization") == Some("Bearer k")));

    // Every recipe except the plain completion one carries the nudge.
    let nudged = reqs.iter().filter(|r| r.body.contains(USER_NUDGE)).count();
    assert_eq!(nudged, 6);
}

#[test]
fn prefix_recipe_quotes_the_prefix_verbatim() {
    let server = MockServer::start(|r| reply(r, "The tenant is someone."));
    let samples = expand(&sample_dialogue(), &detector());
    let cfg = GenerationConfig {
        recipes: vec![Recipe::ChatPrefix],
        ..GenerationConfig::default()
    };
    generate_all(&samples, &client(&server, 1), &cfg).unwrap();
    let bodies: Vec<Value> = server.requests().iter().map(|r| r.json()).collect();
    let last_user = |b: &Value| {
        b["messages"]
            .as_array()
            .unwrap()
            .iter()
            .rev()
            .find(|m| m["role"] == "user")
            .unwrap()["content"]
            .as_str()
            .unwrap()
            .to_string()
    };
    let texts: Vec<String> = bodies.iter().map(last_user).collect();
    assert!(texts.iter().any(|t| t.ends_with("Start your answer with exactly these words: The tenant is")));
    assert!(texts.iter().any(|t| t.ends_with("Start your answer with exactly these words: The tenant is Alice from")));
}

#[test]
fn persistent_server_errors_become_failure_records() {
    let server = MockServer::start(|_| MockResponse::status(500));
    let samples = expand(&sample_dialogue(), &detector());
    let cfg = GenerationConfig {
        recipes: vec![Recipe::ChatNudge],
        workers: 1,
        ..GenerationConfig::default()
    };
    let out = generate_all(&samples[..1], &client(&server, 3), &cfg).unwrap();
    assert!(out.candidates.is_empty());
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].recipe, Recipe::ChatNudge);
    assert_eq!(server.request_count(), 3);
}

fn qa_items() -> Vec<QaItem> {
    (0..5)
        .map(|i| QaItem {
            id: format!("q{i}"),
            question: format!("What is {i} + {i}?"),
            correct_answer: format!("{}", 2 * i),
            answer: format!("It is {}", 2 * i),
        })
        .collect()
}

#[test]
fn judge_counts_verdicts() {
    let correct = MockServer::start(|r| reply(r, "Correct"));
    let report = run_judge_eval(&qa_items(), &client(&correct, 1), &JudgeConfig::default(), Value::Null).unwrap();
    assert_eq!(report.correct, 5);
    assert_eq!(report.correctness_rate, 1.0);
    for r in correct.requests() {
        let body = r.json();
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"].as_array().unwrap().len(), 1);
    }

    let incorrect = MockServer::start(|r| reply(r, "Incorrect"));
    let report = run_judge_eval(&qa_items(), &client(&incorrect, 1), &JudgeConfig::default(), Value::Null).unwrap();
    assert!(report.verdicts.iter().all(|v| v.verdict == Verdict::Incorrect));
    assert_eq!(report.correctness_rate, 0.0);
}

#[test]
fn judge_unreachable_is_external_error() {
    let server = MockServer::start(|_| MockResponse::status(503));
    let err = run_judge_eval(&qa_items(), &client(&server, 2), &JudgeConfig::default(), Value::Null).unwrap_err();
    assert!(matches!(err, Error::ExternalService(_)));
}

#[test]
fn pii_eval_is_deterministic_across_worker_counts() {
    let words: Vec<String> = ["<unk>", "<eos>", "Alice", "went", "home"].iter().map(|s| s.to_string()).collect();
    let vocab = Vocabulary::new(words, 1).unwrap();
    let mut model = TabularLM::new(vocab, 2, vec![0.0, -1.0, 0.5, 0.3, 0.1]).unwrap();
    model.insert(vec![2], vec![0.0, -2.0, -1.0, 2.0, 0.0]).unwrap();
    model.insert(vec![3], vec![0.0, 0.0, -1.0, -1.0, 2.0]).unwrap();
    model.insert(vec![4], vec![0.0, 5.0, 0.0, 0.0, 0.0]).unwrap();
    let samples: Vec<EvalSample> = (0..20)
        .map(|i| EvalSample {
            id: format!("s{i:02}"),
            prompt: format!("System: x\nUser: q{i}\nAssistant:"),
        })
        .collect();
    let spec = GuidanceSpec::new(1.5, Variant::DualProb).unwrap();
    let det = detector();
    let run = |workers| {
        let cfg = PiiEvalConfig {
            max_new_tokens: 6,
            workers,
        };
        run_pii_eval(&model, &samples, &spec, &det, &cfg, json!({"w": 0})).unwrap().to_json().unwrap()
    };
    let one = run(1);
    assert_eq!(one, run(8));
    assert_eq!(one, run(1));
}
